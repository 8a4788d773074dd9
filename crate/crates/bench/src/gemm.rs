//! Throughput of one expert-sized matmul as the batch grows.

use fmoe::tensor::matmul_into;
use fmoe::{rng, Matrix};

use crate::error::{BenchError, Result};
use crate::report::{BenchResult, Shape};
use crate::timing::{measure, Timing};

/// Each timed sample repeats the product until it covers at least this
/// much work, so tiny batches are not dominated by timer resolution.
const MIN_FLOPS_PER_SAMPLE: f64 = 5e7;

#[derive(Clone, Debug)]
pub struct GemmSweep {
    pub d_m: usize,
    pub d_h: usize,
    pub batches: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

pub fn time_gemm(n_b: usize, d_m: usize, d_h: usize, warmup: usize, reps: usize, seed: u64) -> Result<Timing> {
    if n_b == 0 || d_m == 0 || d_h == 0 {
        return Err(BenchError::Usage("gemm dimensions must be positive".into()));
    }
    let mut r = rng::data_stream(seed, 0);
    let a = Matrix::random_uniform(&mut r, n_b, d_m, -1.0, 1.0);
    let b = Matrix::random_uniform(&mut r, d_m, d_h, -1.0, 1.0);
    let mut out = Matrix::zeros(n_b, d_h);
    let inner = (MIN_FLOPS_PER_SAMPLE / crate::gemm_flops(n_b, d_m, d_h)).ceil().max(1.0) as usize;
    measure(warmup, reps, inner, || {
        for _ in 0..inner {
            matmul_into(&a, &b, &mut out)?;
        }
        Ok(())
    })
}

pub fn run(sweep: &GemmSweep) -> Result<Vec<BenchResult>> {
    if sweep.batches.is_empty() {
        return Err(BenchError::Usage("no batch sizes given".into()));
    }
    sweep
        .batches
        .iter()
        .map(|&n_b| {
            let t = time_gemm(n_b, sweep.d_m, sweep.d_h, sweep.warmup, sweep.reps, sweep.seed)?;
            let shape = Shape {
                n_b,
                d_m: sweep.d_m,
                d_h: sweep.d_h,
                n_e: 1,
                k: 1,
                world: 1,
            };
            Ok(BenchResult::new("gemm", shape, &t, crate::gemm_flops(n_b, sweep.d_m, sweep.d_h)))
        })
        .collect()
}
