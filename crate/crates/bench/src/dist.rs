//! Multi-process expert-parallel throughput.
//!
//! The launcher starts one process per rank on localhost for each world size
//! and collects the row rank 0 writes. A rank process can also be started by
//! hand with a host file to span machines.

use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::process::{Child, Command};
use std::time::Duration;

use fmoe::comm::{parse_hostfile, Communicator, TcpTransport};
use fmoe::moe_layer::{backward, forward, MoEConfig, MoELayerState};
use fmoe::{rng, Matrix};

use crate::error::{BenchError, Result};
use crate::report::{parse_csv, BenchResult, Shape};
use crate::timing::measure;

pub const RENDEZVOUS_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Clone, Debug)]
pub struct DistBench {
    /// Samples per worker.
    pub n_b: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub k: usize,
    /// Experts per worker.
    pub n_e: usize,
    pub worlds: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl DistBench {
    fn config(&self, world: usize) -> Result<MoEConfig> {
        let c = MoEConfig {
            n_b: self.n_b,
            d_m: self.d_m,
            d_h: self.d_h,
            k: self.k,
            n_e_local: self.n_e,
            world_size: world,
            seed: self.seed,
        };
        c.validate().map_err(|e| BenchError::Usage(e.to_string()))?;
        Ok(c)
    }
}

/// One rank's part of a timed run. Every rep is bracketed by barriers, so
/// rank 0's clock covers the slowest worker. Returns the row on rank 0.
pub fn run_rank(bench: &DistBench, comm: &mut Communicator) -> Result<Option<BenchResult>> {
    let world = comm.world_size();
    let rank = comm.rank();
    let config = bench.config(world)?;
    let state = MoELayerState::init(config, rank)?;
    let x = Matrix::random_uniform(&mut rng::data_stream(bench.seed, 2 * rank as u64), bench.n_b, bench.d_m, -1.0, 1.0);
    let d_y = Matrix::random_uniform(&mut rng::data_stream(bench.seed, 2 * rank as u64 + 1), bench.n_b, bench.d_m, -1.0, 1.0);
    comm.barrier()?;
    let timing = measure(bench.warmup, bench.reps, 1, || {
        comm.barrier()?;
        let (_, cache) = forward(&x, &state, Some(&mut *comm))?;
        backward(&d_y, &cache, &state, Some(&mut *comm))?;
        comm.barrier()?;
        Ok(())
    })?;
    if rank != 0 {
        return Ok(None);
    }
    let shape = Shape {
        n_b: bench.n_b,
        d_m: bench.d_m,
        d_h: bench.d_h,
        n_e: bench.n_e,
        k: bench.k,
        world,
    };
    let flops = world as f64 * crate::moe_train_flops(bench.n_b, bench.d_m, bench.d_h, config.e_total(), bench.k);
    Ok(Some(BenchResult::new("dist", shape, &timing, flops)))
}

/// Connects rank `rank` of the world described by `hostfile`.
pub fn connect(rank: usize, hostfile: &Path, timeout: Duration) -> Result<Communicator> {
    let text = std::fs::read_to_string(hostfile)
        .map_err(|e| BenchError::Usage(format!("cannot read host file {}: {e}", hostfile.display())))?;
    let addrs = parse_hostfile(&text).map_err(|e| BenchError::Usage(e.to_string()))?;
    if rank >= addrs.len() {
        return Err(BenchError::Usage(format!("rank {rank} but host file lists {} hosts", addrs.len())));
    }
    Ok(Communicator::new(TcpTransport::connect(rank, &addrs, timeout)?))
}

fn free_loopback_addrs(n: usize) -> Result<Vec<SocketAddr>> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<_>>()?;
    Ok(listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<std::io::Result<_>>()?)
}

fn rank_args(bench: &DistBench, world: usize, rank: usize, hostfile: &Path, out: &Path) -> Vec<String> {
    let mut args: Vec<String> = vec!["bench-dist".into()];
    let mut push = |flag: &str, value: String| {
        args.push(flag.into());
        args.push(value);
    };
    push("--world", world.to_string());
    push("--rank", rank.to_string());
    push("--hostfile", hostfile.display().to_string());
    push("--out", out.display().to_string());
    push("--n-b", bench.n_b.to_string());
    push("--d-m", bench.d_m.to_string());
    push("--d-h", bench.d_h.to_string());
    push("--k", bench.k.to_string());
    push("--n-e", bench.n_e.to_string());
    push("--seed", bench.seed.to_string());
    push("--reps", bench.reps.to_string());
    push("--warmup", bench.warmup.to_string());
    args
}

/// Runs every world size as a set of local processes of `exe`.
pub fn launch(bench: &DistBench, exe: &Path) -> Result<Vec<BenchResult>> {
    if bench.worlds.is_empty() || bench.worlds.contains(&0) {
        return Err(BenchError::Usage("world sizes must be positive".into()));
    }
    let mut rows = Vec::new();
    for &world in &bench.worlds {
        bench.config(world)?;
        let dir = tempfile::tempdir()?;
        let hostfile = dir.path().join("hosts");
        let out = dir.path().join("rank0.csv");
        let hosts: String = free_loopback_addrs(world)?
            .iter()
            .map(|a| format!("{a}\n"))
            .collect();
        std::fs::write(&hostfile, hosts)?;

        let children: Vec<Child> = (0..world)
            .map(|rank| Command::new(exe).args(rank_args(bench, world, rank, &hostfile, &out)).spawn())
            .collect::<std::io::Result<_>>()?;
        let mut failure = None;
        for (rank, mut child) in children.into_iter().enumerate() {
            let status = child.wait()?;
            if !status.success() && failure.is_none() {
                let code = status.code().unwrap_or(crate::error::EXIT_TRANSPORT);
                failure = Some(BenchError::Worker(
                    format!("rank {rank} of world {world} exited with status {code}"),
                    code,
                ));
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        rows.extend(parse_csv(&std::fs::read_to_string(&out)?)?);
    }
    Ok(rows)
}
