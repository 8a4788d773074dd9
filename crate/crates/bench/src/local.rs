//! Single-process latency of the per-sample loop against the batched layer.

use fmoe::moe_layer::{backward, forward, naive_forward, naive_forward_backward, MoEConfig, MoELayerState};
use fmoe::{rng, Matrix};

use crate::error::{BenchError, Result};
use crate::report::{BenchResult, Shape};
use crate::timing::{measure, Timing};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    /// One sample and one expert at a time.
    Naive,
    Batched,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::Naive => "naive",
            Path::Batched => "batched",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Forward,
    ForwardBackward,
}

#[derive(Clone, Copy, Debug)]
pub struct LocalCase {
    pub n_b: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub k: usize,
    pub n_e: usize,
    pub seed: u64,
}

impl LocalCase {
    pub fn config(&self) -> Result<MoEConfig> {
        let c = MoEConfig {
            n_b: self.n_b,
            d_m: self.d_m,
            d_h: self.d_h,
            k: self.k,
            n_e_local: self.n_e,
            world_size: 1,
            seed: self.seed,
        };
        c.validate().map_err(|e| BenchError::Usage(e.to_string()))?;
        Ok(c)
    }

    pub fn flops(&self, pass: Pass) -> f64 {
        match pass {
            Pass::Forward => crate::moe_forward_flops(self.n_b, self.d_m, self.d_h, self.n_e, self.k),
            Pass::ForwardBackward => crate::moe_train_flops(self.n_b, self.d_m, self.d_h, self.n_e, self.k),
        }
    }
}

pub fn time_case(case: &LocalCase, path: Path, pass: Pass, warmup: usize, reps: usize) -> Result<Timing> {
    let config = case.config()?;
    let state = MoELayerState::init(config, 0)?;
    let x = Matrix::random_uniform(&mut rng::data_stream(case.seed, 0), case.n_b, case.d_m, -1.0, 1.0);
    let d_y = Matrix::random_uniform(&mut rng::data_stream(case.seed, 1), case.n_b, case.d_m, -1.0, 1.0);
    measure(warmup, reps, 1, || {
        match (path, pass) {
            (Path::Naive, Pass::Forward) => {
                naive_forward(&x, &state)?;
            }
            (Path::Naive, Pass::ForwardBackward) => {
                naive_forward_backward(&x, &d_y, &state)?;
            }
            (Path::Batched, Pass::Forward) => {
                forward(&x, &state, None)?;
            }
            (Path::Batched, Pass::ForwardBackward) => {
                let (_, cache) = forward(&x, &state, None)?;
                backward(&d_y, &cache, &state, None)?;
            }
        }
        Ok(())
    })
}

#[derive(Clone, Debug)]
pub struct LocalBench {
    pub n_b: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub k: usize,
    pub expert_counts: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

/// Forward plus backward on both paths for every expert count.
pub fn run(bench: &LocalBench) -> Result<Vec<BenchResult>> {
    if bench.expert_counts.is_empty() {
        return Err(BenchError::Usage("no expert counts given".into()));
    }
    let mut rows = Vec::new();
    for &n_e in &bench.expert_counts {
        let case = LocalCase {
            n_b: bench.n_b,
            d_m: bench.d_m,
            d_h: bench.d_h,
            k: bench.k,
            n_e,
            seed: bench.seed,
        };
        case.config()?;
        let shape = Shape {
            n_b: case.n_b,
            d_m: case.d_m,
            d_h: case.d_h,
            n_e,
            k: case.k,
            world: 1,
        };
        for path in [Path::Naive, Path::Batched] {
            let t = time_case(&case, path, Pass::ForwardBackward, bench.warmup, bench.reps)?;
            rows.push(BenchResult::new(path.name(), shape, &t, case.flops(Pass::ForwardBackward)));
        }
    }
    Ok(rows)
}
