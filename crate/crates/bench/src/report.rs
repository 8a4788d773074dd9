//! Plot-ready CSV output.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{BenchError, Result};
use crate::timing::Timing;

pub const CSV_HEADER: &str = "scenario,n_b,d_m,d_h,n_e,k,world,reps,mean_ms,stddev_ms,gflops";

/// Shape of the experiments being scaled down (n_b, d_m, d_h, k).
pub const REFERENCE_SHAPE: (usize, usize, usize, usize) = (4096, 1024, 4096, 2);

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub scenario: String,
    pub n_b: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub n_e: usize,
    pub k: usize,
    pub world: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub gflops: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub n_b: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub n_e: usize,
    pub k: usize,
    pub world: usize,
}

impl BenchResult {
    /// `flops` is the matmul work of one timed operation.
    pub fn new(scenario: &str, shape: Shape, timing: &Timing, flops: f64) -> Self {
        let mean_ms = timing.mean_ms();
        BenchResult {
            scenario: scenario.to_string(),
            n_b: shape.n_b,
            d_m: shape.d_m,
            d_h: shape.d_h,
            n_e: shape.n_e,
            k: shape.k,
            world: shape.world,
            reps: timing.reps(),
            mean_ms,
            stddev_ms: timing.stddev_ms(),
            gflops: flops / (mean_ms * 1e6),
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.4}",
            self.scenario,
            self.n_b,
            self.d_m,
            self.d_h,
            self.n_e,
            self.k,
            self.world,
            self.reps,
            self.mean_ms,
            self.stddev_ms,
            self.gflops
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(BenchError::Usage(format!("expected 11 CSV fields, got {}: {line:?}", f.len())));
        }
        let int = |i: usize| {
            f[i].parse::<usize>()
                .map_err(|e| BenchError::Usage(format!("bad integer {:?}: {e}", f[i])))
        };
        let real = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| BenchError::Usage(format!("bad number {:?}: {e}", f[i])))
        };
        Ok(BenchResult {
            scenario: f[0].to_string(),
            n_b: int(1)?,
            d_m: int(2)?,
            d_h: int(3)?,
            n_e: int(4)?,
            k: int(5)?,
            world: int(6)?,
            reps: int(7)?,
            mean_ms: real(8)?,
            stddev_ms: real(9)?,
            gflops: real(10)?,
        })
    }
}

/// Data rows of a CSV produced by [`write_csv`], skipping comments and the header.
pub fn parse_csv(text: &str) -> Result<Vec<BenchResult>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty() && *l != CSV_HEADER)
        .map(BenchResult::parse_csv_row)
        .collect()
}

pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}, {threads} logical cpu(s), {}/{}, f64 CPU matmul; absolute numbers are not comparable to GPU results",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// `# reference_shape` line relating a run's shape to the reference experiment.
pub fn reference_shape_line(n_b: usize, d_m: usize, d_h: usize, k: usize) -> String {
    let (rn, rm, rh, rk) = REFERENCE_SHAPE;
    format!(
        "reference n_b={rn} d_m={rm} d_h={rh} k={rk}; this run n_b={n_b} (x{:.4}) d_m={d_m} (x{:.4}) d_h={d_h} (x{:.4}) k={k}",
        n_b as f64 / rn as f64,
        d_m as f64 / rm as f64,
        d_h as f64 / rh as f64
    )
}

pub fn render_csv(metadata: &[(&str, String)], rows: &[BenchResult]) -> String {
    let mut s = String::new();
    for (key, value) in metadata {
        let _ = writeln!(s, "# {key}: {value}");
    }
    let _ = writeln!(s, "{CSV_HEADER}");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv_row());
    }
    s
}

/// Writes to `path`, or stdout for `None` / `-`.
pub fn emit(path: Option<&std::path::Path>, text: &str) -> Result<()> {
    match path {
        Some(p) if p.as_os_str() != "-" => std::fs::write(p, text)?,
        _ => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}
