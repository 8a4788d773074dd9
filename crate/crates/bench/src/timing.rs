//! Warm-up then timed repetitions.

use std::time::Instant;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Timing {
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn reps(&self) -> usize {
        self.samples_ms.len()
    }

    pub fn mean_ms(&self) -> f64 {
        self.samples_ms.iter().sum::<f64>() / self.samples_ms.len() as f64
    }

    /// Sample standard deviation; zero for a single rep.
    pub fn stddev_ms(&self) -> f64 {
        let n = self.samples_ms.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_ms();
        let ss: f64 = self.samples_ms.iter().map(|v| (v - m).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn median_ms(&self) -> f64 {
        let mut s = self.samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        }
    }
}

/// Runs `f` `warmup` times untimed, then `reps` times timed. Each timed call
/// is expected to perform `inner` identical operations; samples are per
/// operation.
pub fn measure<F>(warmup: usize, reps: usize, inner: usize, mut f: F) -> Result<Timing>
where
    F: FnMut() -> Result<()>,
{
    for _ in 0..warmup {
        f()?;
    }
    let inner = inner.max(1);
    let mut samples_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    Ok(Timing { samples_ms })
}
