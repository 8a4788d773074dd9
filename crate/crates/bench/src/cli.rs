//! Command-line surface of the `fmoe` binary.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use fmoe::comm::TransportKind;

use crate::check::{run_checks, CheckOptions};
use crate::dist::{self, DistBench};
use crate::error::{BenchError, Result};
use crate::gemm::{self, GemmSweep};
use crate::local::{self, LocalBench};
use crate::report::{emit, hardware_description, reference_shape_line, render_csv};
use crate::train::{render_losses, ToyRun};

#[derive(Debug, Parser)]
#[command(name = "fmoe", version, about = "Mixture-of-experts engine benchmarks, toy training and self-checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Matmul throughput across batch sizes (`--n-b` list) at one expert shape.
    GemmSweep(Common),
    /// Per-sample loop against the batched layer, forward plus backward, per `--n-e`.
    BenchLocal(Common),
    /// Expert-parallel throughput: launches local ranks for each `--world`, or
    /// runs one rank with `--rank` and `--hostfile`.
    BenchDist(Common),
    /// Seeded regression run writing `step,loss` rows.
    TrainToy(TrainArgs),
    /// Runs the invariant suite; exit status 1 names the failures.
    Check(CheckArgs),
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Batch size; a comma list for gemm-sweep.
    #[arg(long = "n-b", value_delimiter = ',')]
    pub n_b: Vec<usize>,
    /// Model width.
    #[arg(long = "d-m")]
    pub d_m: Option<usize>,
    /// Expert hidden width.
    #[arg(long = "d-h")]
    pub d_h: Option<usize>,
    /// Experts per sample.
    #[arg(long)]
    pub k: Option<usize>,
    /// Experts; a comma list for bench-local.
    #[arg(long = "n-e", value_delimiter = ',')]
    pub n_e: Vec<usize>,
    #[arg(long, env = "FMOE_SEED")]
    pub seed: Option<u64>,
    /// Timed repetitions [default: 16].
    #[arg(long)]
    pub reps: Option<usize>,
    /// Untimed warm-up repetitions [default: 2].
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Output CSV path; stdout if omitted or `-`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// World size; a comma list for bench-dist.
    #[arg(long, value_delimiter = ',')]
    pub world: Vec<usize>,
    /// Rank of this process; requires `--hostfile`.
    #[arg(long)]
    pub rank: Option<usize>,
    /// One `host:port` per line; line index is the rank.
    #[arg(long)]
    pub hostfile: Option<PathBuf>,
    /// Seconds to wait for every peer in the host file.
    #[arg(long = "connect-timeout", default_value_t = dist::RENDEZVOUS_TIMEOUT.as_secs_f64())]
    pub connect_timeout: f64,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// SGD step size [default: 5].
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corrupt one scatter index in every dispatch plan.
    #[arg(long)]
    pub inject_fault: bool,
}

pub const DEFAULT_WARMUP: usize = 2;
pub const DEFAULT_REPS: usize = 16;

fn one(values: &[usize], flag: &str, default: usize) -> Result<usize> {
    match values {
        [] => Ok(default),
        [v] => Ok(*v),
        _ => Err(BenchError::Usage(format!("{flag} takes a single value here"))),
    }
}

fn list(values: &[usize], default: &[usize]) -> Vec<usize> {
    if values.is_empty() {
        default.to_vec()
    } else {
        values.to_vec()
    }
}

impl Common {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(crate::DEFAULT_SEED)
    }

    fn connect_timeout(&self) -> Duration {
        Duration::try_from_secs_f64(self.connect_timeout).unwrap_or(dist::RENDEZVOUS_TIMEOUT)
    }

    fn reps(&self) -> Result<usize> {
        match self.reps.unwrap_or(DEFAULT_REPS) {
            0 => Err(BenchError::Usage("--reps must be at least 1".into())),
            r => Ok(r),
        }
    }

    fn warmup(&self) -> usize {
        self.warmup.unwrap_or(DEFAULT_WARMUP)
    }

    fn reject(&self, command: &str, flags: &[&str]) -> Result<()> {
        for &flag in flags {
            let given = match flag {
                "--world" => !self.world.is_empty(),
                "--rank" => self.rank.is_some(),
                "--hostfile" => self.hostfile.is_some(),
                "--n-e" => !self.n_e.is_empty(),
                "--k" => self.k.is_some(),
                _ => false,
            };
            if given {
                return Err(BenchError::Usage(format!("{flag} does not apply to {command}")));
            }
        }
        Ok(())
    }

    fn positive(&self, pairs: &[(&str, usize)]) -> Result<()> {
        for (flag, v) in pairs {
            if *v == 0 {
                return Err(BenchError::Usage(format!("{flag} must be at least 1")));
            }
        }
        Ok(())
    }
}

fn gemm_sweep(c: &Common) -> Result<()> {
    c.reject("gemm-sweep", &["--world", "--rank", "--hostfile", "--n-e", "--k"])?;
    let sweep = GemmSweep {
        d_m: c.d_m.unwrap_or(256),
        d_h: c.d_h.unwrap_or(1024),
        batches: list(&c.n_b, &[1, 16, 256, 4096]),
        warmup: c.warmup(),
        reps: c.reps()?,
        seed: c.seed(),
    };
    c.positive(&[("--d-m", sweep.d_m), ("--d-h", sweep.d_h)])?;
    if sweep.batches.contains(&0) {
        return Err(BenchError::Usage("batch size 0 is not allowed".into()));
    }
    let rows = gemm::run(&sweep)?;
    let meta = [
        ("hardware", hardware_description()),
        ("workload", format!("[n_b x {}] * [{} x {}] f64 matmul", sweep.d_m, sweep.d_m, sweep.d_h)),
    ];
    emit(c.out.as_deref(), &render_csv(&meta, &rows))
}

fn bench_local(c: &Common) -> Result<()> {
    c.reject("bench-local", &["--world", "--rank", "--hostfile"])?;
    let bench = LocalBench {
        n_b: one(&c.n_b, "--n-b", 1024)?,
        d_m: c.d_m.unwrap_or(256),
        d_h: c.d_h.unwrap_or(1024),
        k: c.k.unwrap_or(2),
        expert_counts: list(&c.n_e, &[2, 4, 8, 16]),
        warmup: c.warmup(),
        reps: c.reps()?,
        seed: c.seed(),
    };
    let rows = local::run(&bench)?;
    let meta = [
        ("hardware", hardware_description()),
        ("reference_shape", reference_shape_line(bench.n_b, bench.d_m, bench.d_h, bench.k)),
        ("timing", format!("{} warm-up reps, then {} timed reps of forward+backward", bench.warmup, bench.reps)),
    ];
    emit(c.out.as_deref(), &render_csv(&meta, &rows))
}

fn bench_dist(c: &Common) -> Result<()> {
    let bench = DistBench {
        n_b: one(&c.n_b, "--n-b", 1024)?,
        d_m: c.d_m.unwrap_or(256),
        d_h: c.d_h.unwrap_or(1024),
        k: c.k.unwrap_or(2),
        n_e: one(&c.n_e, "--n-e", 4)?,
        worlds: list(&c.world, &[1, 2, 4]),
        warmup: c.warmup(),
        reps: c.reps()?,
        seed: c.seed(),
    };
    let meta = |rows: &[crate::report::BenchResult]| {
        let meta = [
            ("hardware", hardware_description()),
            ("reference_shape", reference_shape_line(bench.n_b, bench.d_m, bench.d_h, bench.k)),
            (
                "timing",
                format!("{} warm-up reps, then {} timed reps of forward+backward; gflops aggregate over all workers", bench.warmup, bench.reps),
            ),
        ];
        render_csv(&meta, rows)
    };
    match (c.rank, &c.hostfile) {
        (None, None) => {
            let exe = std::env::current_exe()?;
            let rows = dist::launch(&bench, &exe)?;
            emit(c.out.as_deref(), &meta(&rows))
        }
        (Some(rank), Some(hostfile)) => {
            let mut comm = dist::connect(rank, hostfile, c.connect_timeout())?;
            if let [w] = bench.worlds[..] {
                if !c.world.is_empty() && w != comm.world_size() {
                    return Err(BenchError::Usage(format!(
                        "--world {w} but the host file lists {} ranks",
                        comm.world_size()
                    )));
                }
            }
            if let Some(row) = dist::run_rank(&bench, &mut comm)? {
                emit(c.out.as_deref(), &meta(&[row]))?;
            }
            Ok(())
        }
        _ => Err(BenchError::Usage("--rank and --hostfile must be given together".into())),
    }
}

fn train_toy(a: &TrainArgs) -> Result<()> {
    let c = &a.common;
    let defaults = ToyRun::default();
    let mut run = ToyRun {
        n_b: one(&c.n_b, "--n-b", defaults.n_b)?,
        d_m: c.d_m.unwrap_or(defaults.d_m),
        d_h: c.d_h.unwrap_or(defaults.d_h),
        k: c.k.unwrap_or(defaults.k),
        n_e: one(&c.n_e, "--n-e", defaults.n_e)?,
        world: one(&c.world, "--world", 1)?,
        steps: a.steps,
        lr: a.lr.unwrap_or(defaults.lr),
        seed: c.seed(),
    };
    let losses = match (c.rank, &c.hostfile) {
        (None, None) => run.run_local(TransportKind::InProcess)?,
        (Some(rank), Some(hostfile)) => {
            let mut comm = dist::connect(rank, hostfile, c.connect_timeout())?;
            if !c.world.is_empty() && run.world != comm.world_size() {
                return Err(BenchError::Usage(format!(
                    "--world {} but the host file lists {} ranks",
                    run.world,
                    comm.world_size()
                )));
            }
            run.world = comm.world_size();
            let losses = run.run_rank(rank, Some(&mut comm))?;
            if rank != 0 {
                return Ok(());
            }
            losses
        }
        _ => return Err(BenchError::Usage("--rank and --hostfile must be given together".into())),
    };
    emit(c.out.as_deref(), &render_losses(&losses))
}

fn check(a: &CheckArgs) -> Result<()> {
    a.common.reject("check", &["--world", "--rank", "--hostfile"])?;
    let results = run_checks(CheckOptions {
        seed: a.common.seed(),
        inject_fault: a.inject_fault,
    });
    let report: String = results.iter().map(|r| r.report_line() + "\n").collect();
    emit(a.common.out.as_deref(), &report)?;
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.name.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(BenchError::CheckFailed(failed))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GemmSweep(c) => gemm_sweep(c),
        Command::BenchLocal(c) => bench_local(c),
        Command::BenchDist(c) => bench_dist(c),
        Command::TrainToy(a) => train_toy(a),
        Command::Check(a) => check(a),
    }
}
