//! Gate network: one bias-free linear layer, softmax over all experts, top-k.
//!
//! The selected post-softmax scores are used directly as combine weights;
//! they are not renormalized over the k selections.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param_sync::ParamTag;
use crate::rng::INIT_RANGE;
use crate::tensor::{matmul, softmax_rows, topk_rows, transpose, IndexMatrix, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// `d_m x E_total`.
    pub w_g: Matrix,
}

impl GateParams {
    /// The gate is replicated on every worker.
    pub const TAG: ParamTag = ParamTag::World;

    pub fn new(w_g: Matrix) -> Self {
        GateParams { w_g }
    }

    pub fn init<G: Rng + ?Sized>(rng: &mut G, d_m: usize, num_experts: usize) -> Self {
        GateParams {
            w_g: Matrix::random_uniform(rng, d_m, num_experts, -INIT_RANGE, INIT_RANGE),
        }
    }

    pub fn d_m(&self) -> usize {
        self.w_g.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.w_g.cols()
    }

    pub fn tag(&self) -> ParamTag {
        Self::TAG
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// Post-softmax scores, `n_b x E_total`.
    pub scores: Matrix,
    /// Selected experts per sample, best first.
    pub topk_indices: IndexMatrix,
    /// `scores` at `topk_indices`.
    pub topk_scores: Matrix,
}

impl GateOutput {
    pub fn k(&self) -> usize {
        self.topk_indices.cols()
    }
}

pub fn gate_forward(x: &Matrix, params: &GateParams, k: usize) -> Result<GateOutput> {
    if x.cols() != params.d_m() {
        return Err(Error::shape(
            "gate_forward",
            format!("input has {} features, gate expects {}", x.cols(), params.d_m()),
        ));
    }
    let logits = matmul(x, &params.w_g)?;
    let scores = softmax_rows(&logits);
    let (topk_indices, topk_scores) = topk_rows(&scores, k)?;
    Ok(GateOutput {
        scores,
        topk_indices,
        topk_scores,
    })
}

/// Gradient of the selected scores with respect to the gate weight and the
/// input. Returns `(d_w_g, d_x)`.
///
/// Every selected score depends on all logits of its row through the softmax
/// normalizer, so the full Jacobian `diag(s) - s s^T` is applied; unselected
/// score slots carry zero upstream gradient.
pub fn gate_backward(
    x: &Matrix,
    params: &GateParams,
    out: &GateOutput,
    d_topk_scores: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let (n_b, n_exp) = out.scores.shape();
    let k = out.k();
    if x.rows() != n_b || x.cols() != params.d_m() || params.num_experts() != n_exp {
        return Err(Error::shape(
            "gate_backward",
            format!(
                "input {:?}, gate {:?}, scores {:?}",
                x.shape(),
                params.w_g.shape(),
                out.scores.shape()
            ),
        ));
    }
    if d_topk_scores.shape() != (n_b, k) {
        return Err(Error::shape(
            "gate_backward",
            format!("upstream {:?}, expected {:?}", d_topk_scores.shape(), (n_b, k)),
        ));
    }

    let mut d_logits = Matrix::zeros(n_b, n_exp);
    let mut d_scores = vec![0.0; n_exp];
    for i in 0..n_b {
        d_scores.iter_mut().for_each(|v| *v = 0.0);
        for (j, &e) in out.topk_indices.row(i).iter().enumerate() {
            d_scores[e] = d_topk_scores.get(i, j);
        }
        let s = out.scores.row(i);
        let inner: f64 = s.iter().zip(&d_scores).map(|(a, b)| a * b).sum();
        for (e, dl) in d_logits.row_mut(i).iter_mut().enumerate() {
            *dl = s[e] * (d_scores[e] - inner);
        }
    }
    let d_w_g = matmul(&transpose(x), &d_logits)?;
    let d_x = matmul(&d_logits, &transpose(&params.w_g))?;
    Ok((d_w_g, d_x))
}
