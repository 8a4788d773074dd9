//! Seeded toy regression run of the full layer.

use std::fmt::Write as _;

use fmoe::comm::{run_world, Communicator, TransportKind};
use fmoe::moe_layer::{synthetic_task, train_step, MoEConfig, MoELayerState};

use crate::error::{BenchError, Result};

#[derive(Clone, Debug)]
pub struct ToyRun {
    /// Global batch, split evenly over the workers.
    pub n_b: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub k: usize,
    /// Global expert count, split evenly over the workers.
    pub n_e: usize,
    pub world: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyRun {
    fn default() -> Self {
        ToyRun {
            n_b: 256,
            d_m: 32,
            d_h: 64,
            k: 2,
            n_e: 4,
            world: 1,
            steps: 50,
            lr: 5.0,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl ToyRun {
    /// Per-worker layer configuration.
    pub fn config(&self) -> Result<MoEConfig> {
        if self.world == 0 || !self.n_b.is_multiple_of(self.world) || !self.n_e.is_multiple_of(self.world) {
            return Err(BenchError::Usage(format!(
                "n_b = {} and n_e = {} must both be multiples of world = {}",
                self.n_b, self.n_e, self.world
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(BenchError::Usage(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        let c = MoEConfig {
            n_b: self.n_b / self.world,
            d_m: self.d_m,
            d_h: self.d_h,
            k: self.k,
            n_e_local: self.n_e / self.world,
            world_size: self.world,
            seed: self.seed,
        };
        c.validate().map_err(|e| BenchError::Usage(e.to_string()))?;
        Ok(c)
    }

    /// Loss before each step, as seen by `rank`.
    pub fn run_rank(&self, rank: usize, mut comm: Option<&mut Communicator>) -> Result<Vec<f64>> {
        let config = self.config()?;
        let (x, t) = synthetic_task(&config, rank)?;
        let mut state = MoELayerState::init(config, rank)?;
        (0..self.steps)
            .map(|_| Ok(train_step(&x, &t, &mut state, self.lr, comm.as_deref_mut())?))
            .collect()
    }

    /// All ranks as threads of this process; returns rank 0's losses.
    pub fn run_local(&self, kind: TransportKind) -> Result<Vec<f64>> {
        self.config()?;
        if self.world == 1 && kind == TransportKind::InProcess {
            return self.run_rank(0, None);
        }
        let mut per_rank = run_world(self.world, kind, |mut comm| {
            self.run_rank(comm.rank(), Some(&mut comm))
                .map_err(|e| match e {
                    BenchError::Core(c) => c,
                    other => fmoe::Error::InvalidArgument(other.to_string()),
                })
        })?;
        Ok(per_rank.swap_remove(0))
    }
}

pub fn render_losses(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:e}");
    }
    s
}

/// Exponential moving average with the given decay, seeded by the first value.
pub fn smoothed(losses: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    for &l in losses {
        let next = match out.last() {
            None => l,
            Some(&prev) => decay * prev + (1.0 - decay) * l,
        };
        out.push(next);
    }
    out
}
