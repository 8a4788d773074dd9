//! Expert-assignment permutation, scatter into per-expert contiguous blocks,
//! and the score-weighted gather back into sample order.
//!
//! Scattered position `p` holds a copy of input row `expanded_src_row[p]`.
//! Expert `e` owns rows `[offsets[e], offsets[e] + counts[e])`; inside a
//! block, positions are ordered by `(row, slot)` ascending.

use crate::error::{Error, Result};
use crate::tensor::{IndexMatrix, Matrix};

/// Row ranges of consecutive expert blocks inside one matrix.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BlockLayout {
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn from_counts(counts: Vec<usize>) -> Self {
        let offsets = counts
            .iter()
            .scan(0, |acc, &c| {
                let start = *acc;
                *acc += c;
                Some(start)
            })
            .collect();
        BlockLayout { counts, offsets }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_blocks(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn range(&self, block: usize) -> std::ops::Range<usize> {
        self.offsets[block]..self.offsets[block] + self.counts[block]
    }

    /// The blocks starting at `first`, `len` of them, re-based to offset 0.
    pub fn sub_layout(&self, first: usize, len: usize) -> BlockLayout {
        BlockLayout::from_counts(self.counts[first..first + len].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchPlan {
    num_experts: usize,
    k: usize,
    n_b: usize,
    expanded_src_row: Vec<usize>,
    expanded_slot: Vec<usize>,
    blocks: BlockLayout,
    inverse_pos: IndexMatrix,
}

impl DispatchPlan {
    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// Number of scattered rows, `n_b * k`.
    pub fn expanded_len(&self) -> usize {
        self.expanded_src_row.len()
    }

    pub fn expanded_src_row(&self) -> &[usize] {
        &self.expanded_src_row
    }

    pub fn expanded_slot(&self) -> &[usize] {
        &self.expanded_slot
    }

    pub fn counts(&self) -> &[usize] {
        self.blocks.counts()
    }

    pub fn offsets(&self) -> &[usize] {
        self.blocks.offsets()
    }

    pub fn blocks(&self) -> &BlockLayout {
        &self.blocks
    }

    /// Scattered position of `(row, slot)`.
    pub fn inverse_pos(&self) -> &IndexMatrix {
        &self.inverse_pos
    }

    /// Redirects scattered position 0 to a different source row, breaking
    /// the permutation. Only for exercising the self-check.
    #[doc(hidden)]
    pub fn inject_fault(&mut self) {
        if let Some(src) = self.expanded_src_row.first_mut() {
            *src = if self.n_b > 1 { (*src + 1) % self.n_b } else { *src };
        }
        if self.n_b <= 1 {
            if let Some(slot) = self.expanded_slot.first_mut() {
                *slot = slot.wrapping_add(1);
            }
        }
    }
}

pub fn build_plan(topk_indices: &IndexMatrix, num_experts: usize) -> Result<DispatchPlan> {
    let (n_b, k) = (topk_indices.rows(), topk_indices.cols());
    let mut counts = vec![0usize; num_experts];
    for &e in topk_indices.data() {
        if e >= num_experts {
            return Err(Error::InvalidArgument(format!(
                "expert index {e} out of range for {num_experts} experts"
            )));
        }
        counts[e] += 1;
    }
    let blocks = BlockLayout::from_counts(counts);
    let mut cursor = blocks.offsets().to_vec();
    let total = n_b * k;
    let mut expanded_src_row = vec![0; total];
    let mut expanded_slot = vec![0; total];
    let mut inverse = vec![0; total];
    // Visiting (row, slot) in ascending order makes each block stable.
    for row in 0..n_b {
        for (slot, &e) in topk_indices.row(row).iter().enumerate() {
            let pos = cursor[e];
            cursor[e] += 1;
            expanded_src_row[pos] = row;
            expanded_slot[pos] = slot;
            inverse[row * k + slot] = pos;
        }
    }
    Ok(DispatchPlan {
        num_experts,
        k,
        n_b,
        expanded_src_row,
        expanded_slot,
        blocks,
        inverse_pos: IndexMatrix::from_vec(n_b, k, inverse)?,
    })
}

/// Copies each sample once per selection into its expert's block.
pub fn scatter(x: &Matrix, plan: &DispatchPlan) -> Result<Matrix> {
    if x.rows() != plan.n_b {
        return Err(Error::shape(
            "scatter",
            format!("{} input rows, plan built for {}", x.rows(), plan.n_b),
        ));
    }
    let d = x.cols();
    let mut out = Vec::with_capacity(plan.expanded_len() * d);
    for &src in &plan.expanded_src_row {
        out.extend_from_slice(x.row(src));
    }
    Matrix::from_vec(plan.expanded_len(), d, out)
}

/// Adjoint of [`scatter`]: sums the `k` scattered copies of every row.
pub fn scatter_backward(d_xs: &Matrix, plan: &DispatchPlan) -> Result<Matrix> {
    if d_xs.rows() != plan.expanded_len() {
        return Err(Error::shape(
            "scatter_backward",
            format!("{} rows, expected {}", d_xs.rows(), plan.expanded_len()),
        ));
    }
    let mut out = Matrix::zeros(plan.n_b, d_xs.cols());
    for row in 0..plan.n_b {
        let acc = out.row_mut(row);
        for slot in 0..plan.k {
            let pos = plan.inverse_pos.get(row, slot);
            for (a, v) in acc.iter_mut().zip(d_xs.row(pos)) {
                *a += v;
            }
        }
    }
    Ok(out)
}

fn check_gather_shapes(
    op: &'static str,
    ys: &Matrix,
    plan: &DispatchPlan,
    topk_scores: &Matrix,
) -> Result<()> {
    if ys.rows() != plan.expanded_len() {
        return Err(Error::shape(
            op,
            format!("{} expert rows, expected {}", ys.rows(), plan.expanded_len()),
        ));
    }
    if topk_scores.shape() != (plan.n_b, plan.k) {
        return Err(Error::shape(
            op,
            format!(
                "scores {:?}, expected {:?}",
                topk_scores.shape(),
                (plan.n_b, plan.k)
            ),
        ));
    }
    Ok(())
}

/// `out[i] = sum_j topk_scores[i][j] * ys[inverse_pos[i][j]]`, accumulated in
/// slot order.
pub fn gather_combine(ys: &Matrix, plan: &DispatchPlan, topk_scores: &Matrix) -> Result<Matrix> {
    check_gather_shapes("gather_combine", ys, plan, topk_scores)?;
    let mut out = Matrix::zeros(plan.n_b, ys.cols());
    for row in 0..plan.n_b {
        let acc = out.row_mut(row);
        for slot in 0..plan.k {
            let w = topk_scores.get(row, slot);
            let src = ys.row(plan.inverse_pos.get(row, slot));
            for (a, v) in acc.iter_mut().zip(src) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

/// Returns `(d_ys, d_topk_scores)`.
pub fn gather_combine_backward(
    d_y: &Matrix,
    ys: &Matrix,
    plan: &DispatchPlan,
    topk_scores: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_gather_shapes("gather_combine_backward", ys, plan, topk_scores)?;
    if d_y.shape() != (plan.n_b, ys.cols()) {
        return Err(Error::shape(
            "gather_combine_backward",
            format!("upstream {:?}, expected {:?}", d_y.shape(), (plan.n_b, ys.cols())),
        ));
    }
    let mut d_ys = Matrix::zeros(ys.rows(), ys.cols());
    let mut d_scores = Matrix::zeros(plan.n_b, plan.k);
    for row in 0..plan.n_b {
        let g = d_y.row(row);
        for slot in 0..plan.k {
            let pos = plan.inverse_pos.get(row, slot);
            let w = topk_scores.get(row, slot);
            for (d, v) in d_ys.row_mut(pos).iter_mut().zip(g) {
                *d = w * v;
            }
            let dot: f64 = g.iter().zip(ys.row(pos)).map(|(a, b)| a * b).sum();
            d_scores.set(row, slot, dot);
        }
    }
    Ok((d_ys, d_scores))
}
