//! `bench`: wall-clock scaling of the sequential and chunked scans.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxmamba::ssm::{discretize_sequence, scan_chunked, scan_sequential, DEFAULT_CHUNK};
use voxmamba::{Error, Result, Tensor};

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub min_log2: u32,
    pub max_log2: u32,
    pub reps: usize,
    pub channels: usize,
    pub state: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self { min_log2: 10, max_log2: 20, reps: 10, channels: 2, state: 4, chunk: DEFAULT_CHUNK, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub sequential_median_s: f64,
    pub chunked_median_s: f64,
    /// Largest |chunked − sequential| over all outputs.
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Seconds per token.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub channels: usize,
    pub state: usize,
    pub chunk: usize,
    pub reps: usize,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
    pub sequential_fit: LinearFit,
    pub chunked_fit: LinearFit,
    /// Accuracy gate applied to `max_abs_diff` (64-bit arithmetic).
    pub tolerance: f64,
    pub accurate: bool,
}

pub const BENCH_TOLERANCE: f64 = 1e-10;

/// Ordinary least squares `y ≈ slope·x + intercept` with its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchReport> {
    if args.min_log2 > args.max_log2 || args.max_log2 > 26 {
        return Err(Error::Config(format!("bad length range 2^{}..2^{}", args.min_log2, args.max_log2)));
    }
    if args.reps == 0 || args.channels == 0 || args.state == 0 || args.chunk == 0 {
        return Err(Error::Config("reps, channels, state and chunk must be >= 1".into()));
    }
    let (e, n) = (args.channels, args.state);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let a = Tensor::<f64>::from_fn(&[e, n], |_| -rng.random_range(0.5..2.0));
    let mut rows = Vec::new();
    for k in args.min_log2..=args.max_log2 {
        let l = 1usize << k;
        let b = Tensor::from_fn(&[l, n], |_| rng.random_range(-1.0..1.0));
        let c = Tensor::from_fn(&[l, n], |_| rng.random_range(-1.0..1.0));
        let x = Tensor::from_fn(&[l, e], |_| rng.random_range(-1.0..1.0));
        let delta = Tensor::from_fn(&[l, e], |_| rng.random_range(1e-3..1e-1));
        let p = discretize_sequence(&a, &b, &delta)?;
        let mut seq_t = Vec::with_capacity(args.reps);
        let mut chk_t = Vec::with_capacity(args.reps);
        let mut diff = 0.0f64;
        for _ in 0..args.reps {
            let t = Instant::now();
            let ys = scan_sequential(&x, &p, &c)?;
            seq_t.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            let yc = scan_chunked(&x, &p, &c, args.chunk)?;
            chk_t.push(t.elapsed().as_secs_f64());
            diff = diff.max(ys.max_abs_diff(&yc));
        }
        rows.push(BenchRow {
            len: l,
            sequential_median_s: median(&mut seq_t),
            chunked_median_s: median(&mut chk_t),
            max_abs_diff: diff,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let seq: Vec<f64> = rows.iter().map(|r| r.sequential_median_s).collect();
    let chk: Vec<f64> = rows.iter().map(|r| r.chunked_median_s).collect();
    Ok(BenchReport {
        channels: e,
        state: n,
        chunk: args.chunk,
        reps: args.reps,
        threads: rayon::current_num_threads(),
        sequential_fit: linear_fit(&xs, &seq),
        chunked_fit: linear_fit(&xs, &chk),
        tolerance: BENCH_TOLERANCE,
        accurate: rows.iter().all(|r| r.max_abs_diff < BENCH_TOLERANCE),
        rows,
    })
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>9}  {:>14}  {:>14}  {:>10}\n",
            "L", "sequential_s", "chunked_s", "max|diff|"
        );
        for r in &self.rows {
            s += &format!(
                "{:>9}  {:>14.6e}  {:>14.6e}  {:>10.2e}\n",
                r.len, r.sequential_median_s, r.chunked_median_s, r.max_abs_diff
            );
        }
        s += &format!(
            "fit sequential: slope {:.3e} s/token, R^2 {:.5}\nfit chunked:    slope {:.3e} s/token, R^2 {:.5}\n",
            self.sequential_fit.slope, self.sequential_fit.r2, self.chunked_fit.slope, self.chunked_fit.r2
        );
        s
    }
}
