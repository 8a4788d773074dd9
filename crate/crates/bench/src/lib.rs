//! Benchmark, training and self-check harness around the `fmoe` engine.

pub mod check;
pub mod cli;
pub mod dist;
pub mod error;
pub mod gemm;
pub mod local;
pub mod report;
pub mod timing;
pub mod train;

pub use error::{BenchError, Result};

/// Seed used when neither `--seed` nor `FMOE_SEED` is given.
pub const DEFAULT_SEED: u64 = 42;

/// Multiply-add count of an `n_b x d_m` by `d_m x d_h` product, times two.
pub fn gemm_flops(n_b: usize, d_m: usize, d_h: usize) -> f64 {
    2.0 * n_b as f64 * d_m as f64 * d_h as f64
}

/// Matmul FLOPs of one MoE forward over `n_b` samples: the gate plus two
/// expert layers for each of the `k` selections.
pub fn moe_forward_flops(n_b: usize, d_m: usize, d_h: usize, e_total: usize, k: usize) -> f64 {
    gemm_flops(n_b, d_m, e_total) + 2.0 * k as f64 * gemm_flops(n_b, d_m, d_h)
}

/// Backward costs two matmuls per forward matmul.
pub fn moe_train_flops(n_b: usize, d_m: usize, d_h: usize, e_total: usize, k: usize) -> f64 {
    3.0 * moe_forward_flops(n_b, d_m, d_h, e_total, k)
}
