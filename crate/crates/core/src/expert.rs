//! Two-layer FFN expert (`d_m -> d_h -> d_m`, relu) and the executor that
//! runs a worker's local experts over their contiguous input blocks.

use rand::Rng;
use rayon::prelude::*;

use crate::dispatch::BlockLayout;
use crate::error::{Error, Result};
use crate::param_sync::ParamTag;
use crate::rng::INIT_RANGE;
use crate::tensor::{add_bias_rows, matmul, relu, relu_backward, transpose, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Gradients with the same shapes as [`ExpertParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Activations retained by [`expert_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Matrix,
    pre_activation: Matrix,
    post_activation: Matrix,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.input.rows()
    }
}

pub const EXPERT_TENSOR_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl ExpertParams {
    /// Every expert is unique to the worker hosting it.
    pub const TAG: ParamTag = ParamTag::NoSync;

    pub fn new(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        let (d_m, d_h) = w1.shape();
        if b1.shape() != (1, d_h) || w2.shape() != (d_h, d_m) || b2.shape() != (1, d_m) {
            return Err(Error::shape(
                "ExpertParams::new",
                format!(
                    "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                    w1.shape(),
                    b1.shape(),
                    w2.shape(),
                    b2.shape()
                ),
            ));
        }
        Ok(ExpertParams { w1, b1, w2, b2 })
    }

    pub fn zeros(d_m: usize, d_h: usize) -> Self {
        ExpertParams {
            w1: Matrix::zeros(d_m, d_h),
            b1: Matrix::zeros(1, d_h),
            w2: Matrix::zeros(d_h, d_m),
            b2: Matrix::zeros(1, d_m),
        }
    }

    pub fn init<G: Rng + ?Sized>(rng: &mut G, d_m: usize, d_h: usize) -> Self {
        let mut u = |r, c| Matrix::random_uniform(rng, r, c, -INIT_RANGE, INIT_RANGE);
        ExpertParams {
            w1: u(d_m, d_h),
            b1: u(1, d_h),
            w2: u(d_h, d_m),
            b2: u(1, d_m),
        }
    }

    pub fn d_m(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_h(&self) -> usize {
        self.w1.cols()
    }

    pub fn tag(&self) -> ParamTag {
        Self::TAG
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl ExpertGrads {
    pub fn zeros_like(params: &ExpertParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ExpertGrads {
            w1: z(&params.w1),
            b1: z(&params.b1),
            w2: z(&params.w2),
            b2: z(&params.b2),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn scale(&self, s: f64) -> ExpertGrads {
        ExpertGrads {
            w1: self.w1.scale(s),
            b1: self.b1.scale(s),
            w2: self.w2.scale(s),
            b2: self.b2.scale(s),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|m| m.is_zero())
    }

    pub fn bit_eq(&self, other: &ExpertGrads) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.bit_eq(b))
    }

    pub fn max_abs_diff(&self, other: &ExpertGrads) -> Result<f64> {
        let mut worst = 0.0f64;
        for (a, b) in self.tensors().iter().zip(other.tensors()) {
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }
}

pub fn expert_forward(x_block: &Matrix, params: &ExpertParams) -> Result<(Matrix, ForwardCache)> {
    if x_block.cols() != params.d_m() {
        return Err(Error::shape(
            "expert_forward",
            format!("input has {} features, expert expects {}", x_block.cols(), params.d_m()),
        ));
    }
    let pre = add_bias_rows(&matmul(x_block, &params.w1)?, &params.b1)?;
    let post = relu(&pre);
    let y = add_bias_rows(&matmul(&post, &params.w2)?, &params.b2)?;
    Ok((
        y,
        ForwardCache {
            input: x_block.clone(),
            pre_activation: pre,
            post_activation: post,
        },
    ))
}

pub fn expert_backward(
    d_y: &Matrix,
    cache: &ForwardCache,
    params: &ExpertParams,
) -> Result<(Matrix, ExpertGrads)> {
    if d_y.shape() != (cache.rows(), params.d_m()) {
        return Err(Error::shape(
            "expert_backward",
            format!(
                "upstream {:?}, forward output was {:?}",
                d_y.shape(),
                (cache.rows(), params.d_m())
            ),
        ));
    }
    let d_w2 = matmul(&transpose(&cache.post_activation), d_y)?;
    let d_b2 = d_y.column_sums();
    let d_post = matmul(d_y, &transpose(&params.w2))?;
    let d_pre = relu_backward(&d_post, &cache.pre_activation)?;
    let d_w1 = matmul(&transpose(&cache.input), &d_pre)?;
    let d_b1 = d_pre.column_sums();
    let d_x = matmul(&d_pre, &transpose(&params.w1))?;
    Ok((
        d_x,
        ExpertGrads {
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
        },
    ))
}

/// How [`multi_expert_forward`] and [`multi_expert_backward`] schedule the
/// per-expert blocks. Both produce bit-identical results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// One task per expert on the rayon pool.
    #[default]
    Concurrent,
}

fn map_blocks<T: Send>(
    n: usize,
    exec: Execution,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Concurrent => (0..n).into_par_iter().map(f).collect(),
    }
}

fn check_layout(op: &'static str, rows: usize, layout: &BlockLayout, experts: usize) -> Result<()> {
    if layout.num_blocks() != experts || layout.total() != rows {
        return Err(Error::shape(
            op,
            format!(
                "{} blocks covering {} rows for {} experts over {} rows",
                layout.num_blocks(),
                layout.total(),
                experts,
                rows
            ),
        ));
    }
    Ok(())
}

/// Runs expert `e` on rows `layout.range(e)` of `xs` for every local expert.
pub fn multi_expert_forward(
    xs: &Matrix,
    layout: &BlockLayout,
    experts: &[ExpertParams],
    exec: Execution,
) -> Result<(Matrix, Vec<ForwardCache>)> {
    check_layout("multi_expert_forward", xs.rows(), layout, experts.len())?;
    let d_m = experts.first().map_or(xs.cols(), |e| e.d_m());
    let results = map_blocks(experts.len(), exec, |e| {
        let r = layout.range(e);
        expert_forward(&xs.slice_rows(r.start, r.end)?, &experts[e])
    })?;
    let (blocks, caches): (Vec<Matrix>, Vec<ForwardCache>) = results.into_iter().unzip();
    Ok((Matrix::vstack(d_m, &blocks)?, caches))
}

pub fn multi_expert_backward(
    d_ys: &Matrix,
    caches: &[ForwardCache],
    experts: &[ExpertParams],
    exec: Execution,
) -> Result<(Matrix, Vec<ExpertGrads>)> {
    if caches.len() != experts.len() {
        return Err(Error::shape(
            "multi_expert_backward",
            format!("{} caches for {} experts", caches.len(), experts.len()),
        ));
    }
    let layout = BlockLayout::from_counts(caches.iter().map(|c| c.rows()).collect());
    check_layout("multi_expert_backward", d_ys.rows(), &layout, experts.len())?;
    let d_m = experts.first().map_or(d_ys.cols(), |e| e.d_m());
    let results = map_blocks(experts.len(), exec, |e| {
        let r = layout.range(e);
        expert_backward(&d_ys.slice_rows(r.start, r.end)?, &caches[e], &experts[e])
    })?;
    let (blocks, grads): (Vec<Matrix>, Vec<ExpertGrads>) = results.into_iter().unzip();
    Ok((Matrix::vstack(d_m, &blocks)?, grads))
}
