//! Scaling and verification experiments.
//!
//! Timings use a monotonic clock; each size runs one discarded warm-up and
//! then reports medians over the repetitions. Operation counts are exact and
//! do not depend on the repetition.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::client::{local_pinv_counted, OutsourceSession, DEFAULT_LAMBDA, DEFAULT_TOLERANCE};
use crate::error::{Error, Result};
use crate::keygen::{generate_keys, ScaleMode};
use crate::matrix::DenseMatrix;
use crate::transport::spawn_pipe_worker;
use crate::worker::{CloudWorker, FaultMode};

pub const SCALING_SCHEMA: &str = "pbls-bench-scaling/1";
pub const DEFAULT_SIZES: [usize; 5] = [64, 128, 256, 512, 1024];
pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    /// Column counts `n`; inputs are `rows_for(n) x n`.
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub scale_mode: ScaleMode,
    pub lambda: f64,
    pub verify_rounds: usize,
    /// Also time the all-local computation.
    pub local_baseline: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            sizes: DEFAULT_SIZES.to_vec(),
            repetitions: MIN_REPETITIONS,
            seed: 0,
            scale_mode: ScaleMode::Pow2,
            lambda: DEFAULT_LAMBDA,
            verify_rounds: 1,
            local_baseline: true,
        }
    }
}

/// Rows used for an input with `n` columns. Tall enough that random inputs
/// are well conditioned and pass verification at the default ridge term.
pub fn rows_for(n: usize) -> usize {
    n + n.div_ceil(2)
}

/// One CSV row: medians over the repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub rows: usize,
    pub repetitions: usize,
    pub client_transform: Duration,
    pub client_recover: Duration,
    pub client_verify: Duration,
    pub client_total: Duration,
    /// Round trips to the worker, transport included.
    pub worker: Duration,
    pub local: Option<Duration>,
    pub client_transform_ops: u64,
    pub client_recover_ops: u64,
    pub client_verify_ops: u64,
    pub worker_ops: u64,
    pub local_ops: Option<u64>,
    pub accepted: bool,
}

impl ScalingRow {
    pub fn client_ops(&self) -> u64 {
        self.client_transform_ops + self.client_recover_ops + self.client_verify_ops
    }
}

pub const SCALING_HEADER: &str = "schema,n,rows,repetitions,client_transform_ms,client_recover_ms,client_verify_ms,\
client_total_ms,worker_ms,local_ms,client_transform_ops,client_recover_ops,client_verify_ops,client_ops,\
worker_ops,local_ops,accepted";

fn ms(d: Duration) -> String {
    format!("{:.4}", d.as_secs_f64() * 1e3)
}

impl ScalingRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        [
            SCALING_SCHEMA.to_string(),
            self.n.to_string(),
            self.rows.to_string(),
            self.repetitions.to_string(),
            ms(self.client_transform),
            ms(self.client_recover),
            ms(self.client_verify),
            ms(self.client_total),
            ms(self.worker),
            opt(self.local.map(ms)),
            self.client_transform_ops.to_string(),
            self.client_recover_ops.to_string(),
            self.client_verify_ops.to_string(),
            self.client_ops().to_string(),
            self.worker_ops.to_string(),
            opt(self.local_ops.map(|v| v.to_string())),
            self.accepted.to_string(),
        ]
        .join(",")
    }
}

pub fn write_scaling_csv<W: Write>(mut w: W, rows: &[ScalingRow]) -> Result<()> {
    writeln!(w, "{SCALING_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2
    }
}

/// Runs the outsourced computation against an honest worker on a pipe, once
/// per size for warm-up and then `repetitions` times.
pub fn run_scaling(config: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    if config.repetitions == 0 {
        return Err(Error::invalid("at least one repetition is required"));
    }
    if config.sizes.is_empty() || config.sizes.contains(&0) {
        return Err(Error::invalid(
            "sizes must be a nonempty list of positive integers",
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.sizes.len());
    for &n in &config.sizes {
        let m = rows_for(n);
        let a = DenseMatrix::random_uniform(m, n, &mut rng);
        let keys = generate_keys(m, n, rng.random(), config.scale_mode)?;
        let (mut transport, handle) = spawn_pipe_worker(CloudWorker::honest());

        let mut samples: [Vec<Duration>; 5] = Default::default();
        let mut ops = (0, 0, 0);
        let mut accepted = true;
        for rep in 0..=config.repetitions {
            let mut session =
                OutsourceSession::new(a.clone(), config.lambda, keys.clone(), rep as u64)?;
            let run = session.run(
                &mut transport,
                config.verify_rounds,
                DEFAULT_TOLERANCE,
                &mut rng,
            );
            match run {
                Ok(_) => {}
                Err(Error::ResultRejected(_)) => accepted = false,
                Err(e) => return Err(e),
            }
            if rep == 0 {
                continue;
            }
            let t = session.timings();
            for (slot, d) in samples.iter_mut().zip([
                t.transform,
                t.recover,
                t.verify,
                t.client_total(),
                t.remote,
            ]) {
                slot.push(d);
            }
            let o = session.ops();
            ops = (o.transform, o.recover, o.verify);
        }
        drop(transport);
        let (worker, served) = handle
            .join()
            .map_err(|_| Error::State("worker thread panicked".into()))?;
        served?;
        let worker_ops = worker.stats().ops / (config.repetitions as u64 + 1);

        let (local, local_ops) = if config.local_baseline {
            let mut times = Vec::with_capacity(config.repetitions);
            let mut count = 0;
            for rep in 0..=config.repetitions {
                let start = Instant::now();
                let (_, c) = local_pinv_counted(&a, config.lambda)?;
                if rep > 0 {
                    times.push(start.elapsed());
                }
                count = c;
            }
            (Some(median(times)), Some(count))
        } else {
            (None, None)
        };

        let [transform, recover, verify, total, remote] = samples.map(median);
        out.push(ScalingRow {
            n,
            rows: m,
            repetitions: config.repetitions,
            client_transform: transform,
            client_recover: recover,
            client_verify: verify,
            client_total: total,
            worker: remote,
            local,
            client_transform_ops: ops.0,
            client_recover_ops: ops.1,
            client_verify_ops: ops.2,
            worker_ops,
            local_ops,
            accepted,
        });
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("slope fit needs at least two paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("slope fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid(
            "slope fit needs at least two distinct sizes",
        ));
    }
    Ok(sxy / sxx)
}

/// `(client slope, worker slope)` over a scaling run.
pub fn scaling_slopes(rows: &[ScalingRow]) -> Result<(f64, f64)> {
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let client: Vec<f64> = rows.iter().map(|r| r.client_ops() as f64).collect();
    let worker: Vec<f64> = rows.iter().map(|r| r.worker_ops as f64).collect();
    Ok((log_log_slope(&ns, &client)?, log_log_slope(&ns, &worker)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyDemoConfig {
    pub trials: usize,
    pub fault: FaultMode,
    pub verify_rounds: usize,
    pub tolerance: f64,
    pub lambda: f64,
    pub seed: u64,
    pub scale_mode: ScaleMode,
    /// Column counts are drawn from this inclusive range; rows from
    /// `[2n, 2n + 16]`.
    pub min_cols: usize,
    pub max_cols: usize,
}

impl Default for VerifyDemoConfig {
    fn default() -> Self {
        VerifyDemoConfig {
            trials: 1000,
            fault: FaultMode::Honest,
            verify_rounds: 1,
            tolerance: DEFAULT_TOLERANCE,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            scale_mode: ScaleMode::Pow2,
            min_cols: 8,
            max_cols: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyDemoReport {
    pub trials: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub min_residual: f64,
    pub max_residual: f64,
}

impl VerifyDemoReport {
    /// A note for perturbations too small for the tolerance to see.
    pub fn limitation(config: &VerifyDemoConfig) -> Option<String> {
        match config.fault {
            FaultMode::Perturb(eps) if eps.abs() <= config.tolerance => Some(format!(
                "note: perturbations of {eps:e} are at or below the tolerance {:e}; results this close to the \
                 truth are accepted by design",
                config.tolerance
            )),
            _ => None,
        }
    }
}

/// Runs `trials` outsourced computations against a worker in `config.fault`
/// mode and tallies the verification outcomes.
pub fn verify_demo(config: &VerifyDemoConfig) -> Result<VerifyDemoReport> {
    if config.min_cols == 0 || config.min_cols > config.max_cols {
        return Err(Error::invalid("column range must be nonempty and positive"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut worker = CloudWorker::new(config.fault, rng.random());
    let mut report = VerifyDemoReport {
        trials: config.trials,
        accepted: 0,
        rejected: 0,
        min_residual: f64::INFINITY,
        max_residual: 0.0,
    };
    for t in 0..config.trials {
        let n = rng.random_range(config.min_cols..=config.max_cols);
        let m = rng.random_range(2 * n..=2 * n + 16);
        let a = DenseMatrix::random_uniform(m, n, &mut rng);
        let keys = generate_keys(m, n, rng.random(), config.scale_mode)?;
        let mut transport = crate::transport::InProcessTransport::new(worker);
        let mut session = OutsourceSession::new(a, config.lambda, keys, t as u64)?;
        let outcome = session.run(
            &mut transport,
            config.verify_rounds,
            config.tolerance,
            &mut rng,
        );
        worker = transport.into_worker();
        let verdict = match outcome {
            Ok(_) => *session.report().expect("accepted sessions carry a report"),
            Err(Error::ResultRejected(r)) => r,
            Err(e) => return Err(e),
        };
        if verdict.accepted {
            report.accepted += 1;
        } else {
            report.rejected += 1;
        }
        report.min_residual = report.min_residual.min(verdict.max_residual);
        report.max_residual = report.max_residual.max(verdict.max_residual);
    }
    Ok(report)
}
