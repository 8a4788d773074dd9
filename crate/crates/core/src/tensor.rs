//! Dense row-major matrices and the handful of kernels the gate and the FFN
//! experts are built from.
//!
//! A sample is a row. Every kernel here is a pure function of its inputs and
//! produces bit-identical results on repeated calls: `matmul` accumulates each
//! output element over the inner dimension in ascending order starting from
//! `0.0`, exactly like the textbook triple loop, regardless of how the loops
//! are tiled.

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Row-major matrix of indices (used for top-k expert selections).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Entries drawn uniformly from `[low, high]`.
    pub fn random_uniform<G: Rng + ?Sized>(
        rng: &mut G,
        rows: usize,
        cols: usize,
        low: f64,
        high: f64,
    ) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(low..=high)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::shape(
                "Matrix::slice_rows",
                format!("rows {start}..{end} of a {}-row matrix", self.rows),
            ));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Stacks matrices vertically. All parts must share `cols`.
    pub fn vstack(cols: usize, parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "Matrix::vstack",
                    format!("part has {} cols, expected {cols}", p.cols),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl IndexMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "IndexMatrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(IndexMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        IndexMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> usize {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [usize] {
        &mut self.data
    }
}

// Register tile of the micro-kernel, and the cache blocking around it: a
// `KC x NR` panel of `b` stays in L1 while an `MC x KC` block of `a` stays
// in L2.
const MR: usize = 12;
const NR: usize = 16;
const KC: usize = 128;
const MC: usize = 48;

/// `a[m x p] * b[p x n]`.
///
/// Every output element is accumulated as `acc = fma(a[i,q], b[q,j], acc)`
/// for `q = 0, 1, ..., p-1` starting from `acc = 0.0`. Tiling, packing and
/// SIMD only change which elements are computed together, never that
/// per-element sequence, so the result is bitwise identical to the plain
/// triple loop and a row's output does not depend on the batch it came in.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(0, 0);
    matmul_into(a, b, &mut out)?;
    Ok(out)
}

/// [`matmul`] writing into `out`, reusing its allocation when the capacity
/// suffices. `out` is reshaped to `a.rows x b.cols`.
pub fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, p, n) = (a.rows, a.cols, b.cols);
    out.rows = m;
    out.cols = n;
    out.data.resize(m * n, 0.0);
    if p == 0 {
        out.data.fill(0.0);
    } else if m > 0 && n > 0 {
        gemm::gemm(m, p, n, &a.data, &b.data, &mut out.data);
    }
    Ok(())
}

mod gemm {
    use super::{KC, MC, MR, NR};

    pub(super) fn gemm(m: usize, p: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the required CPU features were detected at runtime.
                unsafe { gemm_avx512(m, p, n, a, b, c) };
                return;
            }
            if std::arch::is_x86_feature_detected!("avx2")
                && std::arch::is_x86_feature_detected!("fma")
            {
                // SAFETY: as above.
                unsafe { gemm_avx2(m, p, n, a, b, c) };
                return;
            }
        }
        gemm_body(m, p, n, a, b, c, kernel_portable);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f,avx2,fma")]
    unsafe fn gemm_avx512(m: usize, p: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        gemm_body(m, p, n, a, b, c, |ap, bp, kc, c, ldc, first| unsafe {
            kernel_avx512(ap, bp, kc, c, ldc, first)
        });
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn gemm_avx2(m: usize, p: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        gemm_body(m, p, n, a, b, c, kernel_portable);
    }

    #[inline(always)]
    fn gemm_body(
        m: usize,
        p: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        kernel: impl Fn(&[f64], &[f64], usize, &mut [f64], usize, bool),
    ) {
        let tiled_rows = m / MR * MR;
        let tiled_cols = n / NR * NR;
        let tiled = tiled_rows > 0 && tiled_cols > 0;
        if tiled {
            let panels_n = tiled_cols / NR;
            // All of `b` packed once: for each depth block `pc`, `panels_n`
            // contiguous `kc x NR` panels.
            let mut b_pack = vec![0.0; p * tiled_cols];
            for pc in (0..p).step_by(KC) {
                let kc = KC.min(p - pc);
                let block = &mut b_pack[pc * tiled_cols..(pc + kc) * tiled_cols];
                for jp in 0..panels_n {
                    let panel = &mut block[jp * kc * NR..(jp + 1) * kc * NR];
                    for q in 0..kc {
                        let src = (pc + q) * n + jp * NR;
                        panel[q * NR..(q + 1) * NR].copy_from_slice(&b[src..src + NR]);
                    }
                }
            }
            let mut a_pack = vec![0.0; MC * KC.min(p)];
            for ic in (0..tiled_rows).step_by(MC) {
                let panels_m = MC.min(tiled_rows - ic) / MR;
                for pc in (0..p).step_by(KC) {
                    let kc = KC.min(p - pc);
                    for ip in 0..panels_m {
                        let panel = &mut a_pack[ip * kc * MR..(ip + 1) * kc * MR];
                        for r in 0..MR {
                            let row = (ic + ip * MR + r) * p + pc;
                            for (q, &v) in a[row..row + kc].iter().enumerate() {
                                panel[q * MR + r] = v;
                            }
                        }
                    }
                    let block = &b_pack[pc * tiled_cols..(pc + kc) * tiled_cols];
                    for jp in 0..panels_n {
                        let b_panel = &block[jp * kc * NR..(jp + 1) * kc * NR];
                        for ip in 0..panels_m {
                            let a_panel = &a_pack[ip * kc * MR..(ip + 1) * kc * MR];
                            let off = (ic + ip * MR) * n + jp * NR;
                            kernel(a_panel, b_panel, kc, &mut c[off..], n, pc == 0);
                        }
                    }
                }
            }
            // Column remainder of the tiled rows.
            for i in 0..tiled_rows {
                for j in tiled_cols..n {
                    let mut acc = 0.0f64;
                    for q in 0..p {
                        acc = a[i * p + q].mul_add(b[q * n + j], acc);
                    }
                    c[i * n + j] = acc;
                }
            }
        }
        // Remaining rows stream whole rows of `b`. This is also the
        // matrix-vector path taken by single-sample calls.
        for i in if tiled { tiled_rows } else { 0 }..m {
            let a_row = &a[i * p..(i + 1) * p];
            let c_row = &mut c[i * n..(i + 1) * n];
            c_row.fill(0.0);
            for (q, &av) in a_row.iter().enumerate() {
                let b_row = &b[q * n..(q + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f")]
    unsafe fn kernel_avx512(
        a_panel: &[f64],
        b_panel: &[f64],
        kc: usize,
        c: &mut [f64],
        ldc: usize,
        first: bool,
    ) {
        use std::arch::x86_64::*;
        const _: () = assert!(NR == 16);
        debug_assert!(a_panel.len() >= kc * MR && b_panel.len() >= kc * NR);
        debug_assert!(c.len() >= (MR - 1) * ldc + NR);
        let ap = a_panel.as_ptr();
        let bp = b_panel.as_ptr();
        let cp = c.as_mut_ptr();
        let mut acc = [[_mm512_setzero_pd(); 2]; MR];
        if !first {
            for (r, acc_row) in acc.iter_mut().enumerate() {
                acc_row[0] = _mm512_maskz_loadu_pd(0xff, cp.add(r * ldc));
                acc_row[1] = _mm512_maskz_loadu_pd(0xff, cp.add(r * ldc + 8));
            }
        }
        for q in 0..kc {
            let b0 = _mm512_maskz_loadu_pd(0xff, bp.add(q * NR));
            let b1 = _mm512_maskz_loadu_pd(0xff, bp.add(q * NR + 8));
            for (r, acc_row) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_pd(*ap.add(q * MR + r));
                acc_row[0] = _mm512_fmadd_pd(av, b0, acc_row[0]);
                acc_row[1] = _mm512_fmadd_pd(av, b1, acc_row[1]);
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            _mm512_mask_storeu_pd(cp.add(r * ldc), 0xff, acc_row[0]);
            _mm512_mask_storeu_pd(cp.add(r * ldc + 8), 0xff, acc_row[1]);
        }
    }

    #[inline(always)]
    fn kernel_portable(
        a_panel: &[f64],
        b_panel: &[f64],
        kc: usize,
        c: &mut [f64],
        ldc: usize,
        first: bool,
    ) {
        let mut acc = [[0.0f64; NR]; MR];
        if !first {
            for (r, acc_row) in acc.iter_mut().enumerate() {
                acc_row.copy_from_slice(&c[r * ldc..r * ldc + NR]);
            }
        }
        for q in 0..kc {
            let a_col: &[f64; MR] = a_panel[q * MR..(q + 1) * MR].try_into().unwrap();
            let b_row: &[f64; NR] = b_panel[q * NR..(q + 1) * NR].try_into().unwrap();
            for (acc_row, &av) in acc.iter_mut().zip(a_col) {
                for (v, &bv) in acc_row.iter_mut().zip(b_row) {
                    *v = av.mul_add(bv, *v);
                }
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            c[r * ldc..r * ldc + NR].copy_from_slice(acc_row);
        }
    }
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

/// Adds a `1 x n` bias to every row of `a`.
pub fn add_bias_rows(a: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows != 1 || bias.cols != a.cols {
        return Err(Error::shape(
            "add_bias_rows",
            format!("bias {:?} for matrix {:?}", bias.shape(), a.shape()),
        ));
    }
    let mut out = a.clone();
    for r in 0..out.rows {
        for (v, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn relu(a: &Matrix) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Passes `d_y` where `x > 0`; the derivative at exactly zero is taken as 0.
pub fn relu_backward(d_y: &Matrix, x: &Matrix) -> Result<Matrix> {
    d_y.zip_map(x, "relu_backward", |g, v| if v > 0.0 { g } else { 0.0 })
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per row, the `k` largest entries in descending order. Ties go to the
/// lower column index.
pub fn topk_rows(a: &Matrix, k: usize) -> Result<(IndexMatrix, Matrix)> {
    if k == 0 || k > a.cols {
        return Err(Error::InvalidArgument(format!(
            "top-k with k={k} over {} columns",
            a.cols
        )));
    }
    let mut idx = Vec::with_capacity(a.rows * k);
    let mut vals = Vec::with_capacity(a.rows * k);
    let mut best: Vec<usize> = Vec::with_capacity(k);
    for r in 0..a.rows {
        let row = a.row(r);
        best.clear();
        // Insertion into a sorted prefix; a strict `>` keeps earlier columns
        // ahead of later equal ones.
        for (c, &v) in row.iter().enumerate() {
            let pos = best.iter().position(|&b| v > row[b]).unwrap_or(best.len());
            if pos < k {
                if best.len() == k {
                    best.pop();
                }
                best.insert(pos, c);
            }
        }
        for &c in &best {
            idx.push(c);
            vals.push(row[c]);
        }
    }
    Ok((
        IndexMatrix {
            rows: a.rows,
            cols: k,
            data: idx,
        },
        Matrix {
            rows: a.rows,
            cols: k,
            data: vals,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Textbook triple loop with the same per-element accumulation sequence.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f64;
                for q in 0..a.cols() {
                    acc = a.get(i, q).mul_add(b.get(q, j), acc);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn full_sort_topk(row: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap().then(x.cmp(&y)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            Matrix::from_rows(&[[19.0, 22.0], [43.0, 50.0]])
        );
        assert!(matmul(&a, &Matrix::zeros(2, 3)).unwrap().is_zero());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matmul_empty_operands() {
        let out = matmul(&Matrix::zeros(0, 4), &Matrix::zeros(4, 5)).unwrap();
        assert_eq!(out.shape(), (0, 5));
        let out = matmul(&Matrix::zeros(3, 0), &Matrix::zeros(0, 2)).unwrap();
        assert!(out.is_zero() && out.shape() == (3, 2));
    }

    #[test]
    fn matmul_tiled_paths_match_naive_bitwise() {
        // Shapes crossing the register tile, the depth block and the row
        // panel boundaries.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, p, n) in &[(12, 128, 16), (25, 300, 37), (100, 129, 33), (13, 1, 17), (49, 7, 64)] {
            let a = Matrix::random_uniform(&mut rng, m, p, -1.0, 1.0);
            let b = Matrix::random_uniform(&mut rng, p, n, -1.0, 1.0);
            assert!(matmul(&a, &b).unwrap().bit_eq(&naive_matmul(&a, &b)), "{m}x{p}x{n}");
        }
    }

    #[test]
    fn matmul_row_result_independent_of_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Matrix::random_uniform(&mut rng, 40, 50, -1.0, 1.0);
        let b = Matrix::random_uniform(&mut rng, 50, 48, -1.0, 1.0);
        let full = matmul(&a, &b).unwrap();
        for r in [0, 13, 39] {
            let single = matmul(&a.slice_rows(r, r + 1).unwrap(), &b).unwrap();
            assert!(single.bit_eq(&full.slice_rows(r, r + 1).unwrap()));
        }
    }

    #[test]
    fn matmul_into_reuses_buffer() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[1.0], [1.0]]);
        let mut out = Matrix::filled(5, 5, 9.0);
        matmul_into(&a, &b, &mut out).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[3.0]]));
    }

    #[test]
    fn transpose_examples() {
        assert_eq!(transpose(&Matrix::identity(2)), Matrix::identity(2));
        let row = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        assert_eq!(transpose(&row), Matrix::from_rows(&[[1.0], [2.0], [3.0]]));
    }

    #[test]
    fn add_bias_rows_examples() {
        let a = Matrix::from_rows(&[[1.0, 1.0]]);
        assert_eq!(add_bias_rows(&a, &Matrix::zeros(1, 2)).unwrap(), a);
        let out = add_bias_rows(&a, &Matrix::from_rows(&[[2.0, 3.0]])).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[3.0, 4.0]]));
        assert!(add_bias_rows(&a, &Matrix::zeros(1, 3)).is_err());
        assert!(add_bias_rows(&a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn add_bias_rows_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_uniform(&mut rng, 5, 4, -1.0, 1.0);
        let bias = Matrix::random_uniform(&mut rng, 1, 4, -1.0, 1.0);
        let out = add_bias_rows(&a, &bias).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(out.get(i, j), a.get(i, j) + bias.get(0, j));
            }
        }
    }

    #[test]
    fn relu_examples() {
        let x = Matrix::from_rows(&[[-1.0, 2.0, 0.0]]);
        assert_eq!(relu(&x), Matrix::from_rows(&[[0.0, 2.0, 0.0]]));
        let dy = Matrix::from_rows(&[[1.0, 1.0, 1.0]]);
        assert_eq!(
            relu_backward(&dy, &x).unwrap(),
            Matrix::from_rows(&[[0.0, 1.0, 0.0]])
        );
        assert!(relu_backward(&dy, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn relu_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::random_uniform(&mut rng, 6, 6, -1.0, 1.0);
        let ones = Matrix::filled(6, 6, 1.0);
        let analytic = relu_backward(&ones, &x).unwrap();
        let h = 1e-6;
        for (i, &v) in x.data().iter().enumerate() {
            if v.abs() < 10.0 * h {
                continue;
            }
            let fd = ((v + h).max(0.0) - (v - h).max(0.0)) / (2.0 * h);
            assert!((fd - analytic.data()[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0], [1000.0, 1000.0]]));
        assert_eq!(s, Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 3f64.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn topk_examples() {
        let a = Matrix::from_rows(&[[0.1, 0.5, 0.2, 0.9]]);
        let (idx, val) = topk_rows(&a, 2).unwrap();
        assert_eq!(idx.row(0), &[3, 1]);
        assert_eq!(val.row(0), &[0.9, 0.5]);

        let (idx, _) = topk_rows(&Matrix::from_rows(&[[0.5, 0.5, 0.2]]), 1).unwrap();
        assert_eq!(idx.row(0), &[0]);

        let (idx, _) = topk_rows(&a, 4).unwrap();
        assert_eq!(idx.row(0), &[3, 1, 2, 0]);
    }

    #[test]
    fn topk_rejects_bad_k() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(topk_rows(&a, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(topk_rows(&a, 4), Err(Error::InvalidArgument(_))));
    }

    fn small_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matmul_equals_naive_loop(m in 1usize..=16, p in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random_uniform(&mut rng, m, p, -1.0, 1.0);
            let b = Matrix::random_uniform(&mut rng, p, n, -1.0, 1.0);
            prop_assert!(matmul(&a, &b).unwrap().bit_eq(&naive_matmul(&a, &b)));
            prop_assert!(matmul(&a, &Matrix::identity(p)).unwrap().bit_eq(&a));
        }

        #[test]
        fn transpose_is_involution(a in small_matrix(8, 8)) {
            prop_assert_eq!(transpose(&transpose(&a)), a);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(a in small_matrix(6, 8), shift in -50.0f64..50.0) {
            let s = softmax_rows(&a);
            let shifted = Matrix::from_vec(a.rows(), a.cols(), a.data().iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax_rows(&shifted);
            for r in 0..a.rows() {
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            prop_assert!(s.max_abs_diff(&s2).unwrap() <= 1e-12);
        }

        #[test]
        fn topk_matches_full_sort(a in small_matrix(6, 8), k_frac in 0.0f64..1.0, coarse in any::<bool>()) {
            // Coarse rounding produces plenty of ties.
            let a = if coarse {
                Matrix::from_vec(a.rows(), a.cols(), a.data().iter().map(|v| v.round()).collect()).unwrap()
            } else {
                a
            };
            let k = 1 + ((a.cols() - 1) as f64 * k_frac) as usize;
            let (idx, val) = topk_rows(&a, k).unwrap();
            for r in 0..a.rows() {
                let expect = full_sort_topk(a.row(r), k);
                prop_assert_eq!(idx.row(r), expect.as_slice());
                for (j, &c) in expect.iter().enumerate() {
                    prop_assert_eq!(val.get(r, j), a.get(r, c));
                }
            }
        }
    }
}
