//! Filter quality metrics and the Latin-hypercube tuning sweep.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::adm1::{N_OUTPUTS, N_STATES};
use crate::ekf::{FilterError, RunLog, UpdateKind};
use crate::estimate::{run, Estimate, Method, RunOptions, Tuning};
use crate::events::MeasurementEvent;
use crate::scenario::{zoh_forecast, Scenario};

pub use crate::ekf::nis;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("series needs at least two points, got {0}")]
    TooShort(usize),
    #[error("degenerate series: the reference has zero range")]
    DegenerateSeries,
    #[error("empty NIS series")]
    EmptyNis,
    #[error("invalid metric input: {0}")]
    Invalid(String),
}

/// Root-mean-square error of `estimate` divided by the range of `truth`.
pub fn nrmse(truth: &[f64], estimate: &[f64]) -> Result<f64, MetricError> {
    if truth.len() != estimate.len() {
        return Err(MetricError::LengthMismatch(truth.len(), estimate.len()));
    }
    if truth.len() < 2 {
        return Err(MetricError::TooShort(truth.len()));
    }
    let (lo, hi) = truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(MetricError::DegenerateSeries);
    }
    let mse = truth.iter().zip(estimate).map(|(z, e)| (e - z) * (e - z)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt() / range)
}

/// Two-sided `alpha` acceptance interval of a chi-square variable with `q`
/// degrees of freedom.
pub fn chi2_interval(q: usize, alpha: f64) -> (f64, f64) {
    let d = ChiSquared::new(q as f64).expect("degrees of freedom are positive");
    (chi2_quantile(&d, alpha / 2.0), chi2_quantile(&d, 1.0 - alpha / 2.0))
}

/// statrs returns NaN for small lower quantiles at one degree of freedom;
/// bisection on the CDF covers that case.
fn chi2_quantile(d: &ChiSquared, p: f64) -> f64 {
    let x = d.inverse_cdf(p);
    if x.is_finite() {
        return x;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while d.cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if d.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Consistency statistics of NIS values `(nis, q)`, each scaled by its own
/// number of rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NisStats {
    pub n: usize,
    /// Mean of `nis / q`; one for a consistent filter.
    pub mean_ratio: f64,
    /// Sample variance of `(nis - q) / sqrt(2 q)`; one for a consistent filter.
    pub variance_ratio: f64,
    /// Fraction of values outside the two-sided chi-square interval.
    pub outside: f64,
}

pub fn nis_stats(series: &[(f64, usize)], alpha: f64) -> Result<NisStats, MetricError> {
    if series.is_empty() {
        return Err(MetricError::EmptyNis);
    }
    if series.iter().any(|&(e, q)| q == 0 || !e.is_finite()) {
        return Err(MetricError::Invalid("NIS values must be finite with q >= 1".into()));
    }
    let n = series.len();
    let mean_ratio = series.iter().map(|&(e, q)| e / q as f64).sum::<f64>() / n as f64;
    let z: Vec<f64> = series.iter().map(|&(e, q)| (e - q as f64) / (2.0 * q as f64).sqrt()).collect();
    let zm = z.iter().sum::<f64>() / n as f64;
    let variance_ratio = if n > 1 { z.iter().map(|v| (v - zm) * (v - zm)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let mut bounds = std::collections::HashMap::new();
    let mut out = 0usize;
    for &(e, q) in series {
        let (lo, hi) = *bounds.entry(q).or_insert_with(|| chi2_interval(q, alpha));
        if e < lo || e > hi {
            out += 1;
        }
    }
    Ok(NisStats { n, mean_ratio, variance_ratio, outside: out as f64 / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoulkrouneWeights(pub [f64; 5]);

impl Default for BoulkrouneWeights {
    fn default() -> Self {
        Self([1.0, 1e-3, 1.0, 1.0, 5e-2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoulkrouneCost {
    pub total: f64,
    /// Weighted summands in the order output error, covariance trace, NIS
    /// mean, NIS variance, outlier fraction.
    pub summands: [f64; 5],
}

/// Weighted cost from measured-output errors, covariance traces and NIS.
/// `output_nrmse` holds one NRMSE per signal against the measurements.
pub fn boulkroune_cost(
    output_nrmse: &[f64],
    cov_trace: &[f64],
    nis_series: &[(f64, usize)],
    weights: &BoulkrouneWeights,
    alpha: f64,
) -> Result<BoulkrouneCost, MetricError> {
    if weights.0.iter().any(|w| !(*w > 0.0)) {
        return Err(MetricError::Invalid("weights must be positive".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricError::Invalid(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if cov_trace.is_empty() {
        return Err(MetricError::Invalid("no covariance traces".into()));
    }
    let stats = nis_stats(nis_series, alpha)?;
    let raw = [
        output_nrmse.iter().map(|v| v * v).sum::<f64>().sqrt(),
        (cov_trace.iter().map(|v| v * v).sum::<f64>() / cov_trace.len() as f64).sqrt(),
        (stats.mean_ratio - 1.0).abs(),
        (stats.variance_ratio - 1.0).abs(),
        (stats.outside / alpha - 1.0).abs(),
    ];
    let mut summands = [0.0; 5];
    for i in 0..5 {
        summands[i] = weights.0[i] * raw[i];
    }
    Ok(BoulkrouneCost { total: summands.iter().sum(), summands })
}

/// Which rows of each update feed the NIS series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NisRows {
    /// Every stacked row (zero-delay runs).
    All,
    /// Rows of the online event only.
    Online,
}

/// NIS values of the updates at or after `start`.
pub fn nis_series(log: &RunLog, start: f64, rows: NisRows) -> Vec<(f64, usize)> {
    log.updates
        .iter()
        .filter(|u| u.t >= start - 1e-9)
        .filter_map(|u| match rows {
            NisRows::All => Some((u.nis, u.q)),
            NisRows::Online if u.q_online > 0 => Some((u.nis_online, u.q_online)),
            NisRows::Online => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Timeout,
    Diverged,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Timeout => "timeout",
            Self::Diverged => "diverged",
        }
    }
}

/// JSON has no NaN; failed runs write `null`, which reads back as NaN.
mod nullable {
    use serde::{Deserialize, Deserializer};

    pub fn scalar<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub fn vector<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }

    pub fn five<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 5], D::Error> {
        let v = vector(d)?;
        v.try_into().map_err(|_| serde::de::Error::custom("expected five summands"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(deserialize_with = "nullable::vector")]
    pub nrmse_x: Vec<f64>,
    #[serde(deserialize_with = "nullable::scalar")]
    pub nrmse_x_l1: f64,
    #[serde(deserialize_with = "nullable::vector")]
    pub nrmse_y: Vec<f64>,
    #[serde(deserialize_with = "nullable::scalar")]
    pub nrmse_y_l1: f64,
    #[serde(deserialize_with = "nullable::scalar")]
    pub boulkroune: f64,
    #[serde(deserialize_with = "nullable::five")]
    pub boulkroune_summands: [f64; 5],
    pub nis: Option<NisStats>,
    pub wall_time: f64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl RunMetrics {
    pub fn failed(status: RunStatus, wall_time: f64, message: String) -> Self {
        Self {
            nrmse_x: vec![f64::NAN; N_STATES],
            nrmse_x_l1: f64::NAN,
            nrmse_y: vec![f64::NAN; N_OUTPUTS],
            nrmse_y_l1: f64::NAN,
            boulkroune: f64::NAN,
            boulkroune_summands: [f64::NAN; 5],
            nis: None,
            wall_time,
            status,
            message: Some(message),
        }
    }
}

/// Start of the evaluation window: the second half of the horizon (day 7 of
/// a 14-day run).
pub fn metric_window_start(days: f64) -> f64 {
    days / 2.0
}

fn column<const N: usize>(rows: &[[f64; N]], i: usize, from: usize) -> Vec<f64> {
    rows[from..].iter().map(|r| r[i]).collect()
}

/// Per-signal NRMSE of estimated against measured outputs at the measurement
/// steps in the window. Laboratory values are compared with the estimate at
/// their sample step. Signals with fewer than two values or a constant
/// measurement in the window are left out.
pub fn measured_output_nrmse(scn: &Scenario, est: &Estimate, start: f64) -> Vec<f64> {
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); N_OUTPUTS];
    let step_of = |t: f64| (t / scn.config.dt()).round() as usize;
    for ev in &scn.measurements.events {
        if let MeasurementEvent::Online { t, values } = ev {
            let k = step_of(*t);
            if *t < start - 1e-9 || k >= est.outputs.len() {
                continue;
            }
            for (i, v) in values.iter().enumerate() {
                if let Some(v) = v {
                    pairs[i].0.push(*v);
                    pairs[i].1.push(est.outputs[k][i]);
                }
            }
        }
    }
    for s in &scn.measurements.samples {
        let k = s.sample_step;
        if scn.truth.t[k] >= start - 1e-9 && k < est.outputs.len() {
            pairs[s.signal].0.push(s.value);
            pairs[s.signal].1.push(est.outputs[k][s.signal]);
        }
    }
    pairs.iter().filter_map(|(m, e)| nrmse(m, e).ok()).collect()
}

/// All three tuning criteria from one run.
pub fn compute_metrics(scn: &Scenario, est: &Estimate, wall_time: f64) -> Result<RunMetrics, MetricError> {
    let start = metric_window_start(scn.config.days);
    let from = scn.truth.t.iter().position(|&t| t >= start - 1e-9).unwrap_or(scn.truth.t.len());
    if est.states.len() != scn.truth.states.len() {
        return Err(MetricError::LengthMismatch(scn.truth.states.len(), est.states.len()));
    }
    let mut nrmse_x = Vec::with_capacity(N_STATES);
    for i in 0..N_STATES {
        nrmse_x.push(nrmse(&column(&scn.truth.states, i, from), &column(&est.states, i, from))?);
    }
    let mut nrmse_y = Vec::with_capacity(N_OUTPUTS);
    for i in 0..N_OUTPUTS {
        nrmse_y.push(nrmse(&column(&scn.truth.outputs, i, from), &column(&est.outputs, i, from))?);
    }
    let rows = if scn.config.delay_ac_hours == 0.0 && scn.config.delay_in_hours == 0.0 { NisRows::All } else { NisRows::Online };
    let series = nis_series(&est.log, start, rows);
    let measured = measured_output_nrmse(scn, est, start);
    let cost = boulkroune_cost(&measured, &est.cov_trace[from..], &series, &BoulkrouneWeights::default(), 0.05)?;
    Ok(RunMetrics {
        nrmse_x_l1: nrmse_x.iter().sum(),
        nrmse_x,
        nrmse_y_l1: nrmse_y.iter().sum(),
        nrmse_y,
        boulkroune: cost.total,
        boulkroune_summands: cost.summands,
        nis: nis_stats(&series, 0.05).ok(),
        wall_time,
        status: RunStatus::Ok,
        message: None,
    })
}

/// Run one method and turn the outcome, including failures, into metrics.
pub fn evaluate(scn: &Scenario, tuning: &Tuning, method: Method, cutoff: Option<Duration>) -> (RunMetrics, Option<Estimate>) {
    let t0 = Instant::now();
    let opts = RunOptions { deadline: cutoff.map(|c| t0 + c), check_covariance: false };
    match run(scn, tuning, method, &opts) {
        Ok(est) => {
            let wall = t0.elapsed().as_secs_f64();
            match compute_metrics(scn, &est, wall) {
                Ok(m) => (m, Some(est)),
                Err(e) => (RunMetrics::failed(RunStatus::Diverged, wall, e.to_string()), Some(est)),
            }
        }
        Err(e) => {
            let status = if matches!(e, FilterError::Timeout { .. }) { RunStatus::Timeout } else { RunStatus::Diverged };
            (RunMetrics::failed(status, t0.elapsed().as_secs_f64(), e.to_string()), None)
        }
    }
}

/// Window NRMSE of the estimated `signal` and of its zero-order-hold
/// forecast from returned laboratory values, both against the truth.
pub fn zoh_comparison(scn: &Scenario, est: &Estimate, signal: usize) -> Result<(f64, f64), MetricError> {
    let start = metric_window_start(scn.config.days);
    let from = scn.truth.t.iter().position(|&t| t >= start - 1e-9).unwrap_or(scn.truth.t.len());
    let returns: Vec<(f64, f64)> = scn
        .measurements
        .samples
        .iter()
        .filter(|s| s.signal == signal)
        .map(|s| (scn.truth.t[s.return_step], s.value))
        .collect();
    let initial = est.outputs.first().map_or(0.0, |y| y[signal]);
    let zoh = zoh_forecast(&returns, &scn.truth.t, initial);
    let truth = column(&scn.truth.outputs, signal, from);
    Ok((nrmse(&truth, &column(&est.outputs, signal, from))?, nrmse(&truth, &zoh[from..])?))
}

pub const TUNING_DIMS: usize = N_STATES + 1;

/// One point of the sweep: the 14 process-noise diagonals and `k_R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningSample {
    pub q: [f64; N_STATES],
    pub k_r: f64,
}

impl TuningSample {
    pub fn from_slice(v: &[f64]) -> Self {
        let mut q = [0.0; N_STATES];
        q.copy_from_slice(&v[..N_STATES]);
        Self { q, k_r: v[N_STATES] }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.q.to_vec();
        v.push(self.k_r);
        v
    }

    pub fn tuning(&self) -> Tuning {
        Tuning { q: self.q.to_vec(), k_r: self.k_r, p0: vec![1.0; N_STATES] }
    }
}

/// Latin hypercube in `dims` dimensions, log-uniform on `[lo, hi]`: every
/// dimension has exactly one point in each of the `n` equal strata of
/// `log10`.
pub fn lhs_unit(n: usize, dims: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (lo.log10(), hi.log10());
    let mut out = vec![vec![0.0; dims]; n];
    for d in 0..dims {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for (i, p) in perm.into_iter().enumerate() {
            let u = (p as f64 + rng.gen::<f64>()) / n as f64;
            out[i][d] = 10f64.powf(a + (b - a) * u);
        }
    }
    out
}

pub fn lhs_sample(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<TuningSample> {
    lhs_unit(n, TUNING_DIMS, lo, hi, seed).iter().map(|v| TuningSample::from_slice(v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub id: usize,
    pub sample: TuningSample,
    pub metrics: RunMetrics,
}

/// Evaluate every tuning on `jobs` worker threads with a per-run cutoff.
/// `skip` lists ids already done; `on_done` sees each new result as it
/// completes. Results come back ordered by id.
pub fn grid_search(
    scn: &Scenario,
    samples: &[TuningSample],
    cutoff: Duration,
    jobs: usize,
    skip: &std::collections::HashSet<usize>,
    on_done: &(dyn Fn(&TuningResult) + Sync),
) -> Vec<TuningResult> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("worker pool");
    let done = Mutex::new(Vec::with_capacity(samples.len()));
    pool.install(|| {
        samples.par_iter().enumerate().filter(|(id, _)| !skip.contains(id)).for_each(|(id, s)| {
            let (metrics, _) = evaluate(scn, &s.tuning(), Method::Mrekf, Some(cutoff));
            let r = TuningResult { id, sample: *s, metrics };
            on_done(&r);
            done.lock().expect("result list").push(r);
        });
    });
    let mut out = done.into_inner().expect("result list");
    out.sort_by_key(|r| r.id);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    NrmseX,
    NrmseY,
    Boulkroune,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::NrmseX, Criterion::NrmseY, Criterion::Boulkroune];

    pub fn value(&self, m: &RunMetrics) -> f64 {
        match self {
            Self::NrmseX => m.nrmse_x_l1,
            Self::NrmseY => m.nrmse_y_l1,
            Self::Boulkroune => m.boulkroune,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NrmseX => "nrmse_x",
            Self::NrmseY => "nrmse_y",
            Self::Boulkroune => "boulkroune",
        }
    }
}

/// Successful results ordered best first by `criterion`; failures are left
/// out.
pub fn rank<'a>(results: &'a [TuningResult], criterion: Criterion) -> Vec<&'a TuningResult> {
    let mut ok: Vec<&TuningResult> =
        results.iter().filter(|r| r.metrics.status == RunStatus::Ok && criterion.value(&r.metrics).is_finite()).collect();
    ok.sort_by(|a, b| criterion.value(&a.metrics).total_cmp(&criterion.value(&b.metrics)).then(a.id.cmp(&b.id)));
    ok
}

/// Share of runs that timed out or diverged.
pub fn failure_fraction(results: &[TuningResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.metrics.status != RunStatus::Ok).count() as f64 / results.len() as f64
}

/// Updates that carried a returning laboratory value.
pub fn major_updates(log: &RunLog) -> usize {
    log.updates.iter().filter(|u| u.kind == UpdateKind::Major).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_examples() {
        assert_eq!(nrmse(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((nrmse(&[0.0, 1.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nrmse(&[1.0, 1.0], &[0.0, 1.0]), Err(MetricError::DegenerateSeries));
        assert!(matches!(nrmse(&[1.0], &[1.0]), Err(MetricError::TooShort(1))));
    }

    #[test]
    fn chi2_critical_values() {
        let (lo, hi) = chi2_interval(6, 0.05);
        assert!((lo - 1.237).abs() < 1e-3, "{lo}");
        assert!((hi - 14.449).abs() < 1e-3, "{hi}");
        // One degree of freedom: squares of the normal 51.25 % and 98.75 % quantiles.
        let (lo, hi) = chi2_interval(1, 0.05);
        assert!((lo - 0.031337982_f64.powi(2)).abs() < 1e-10, "{lo}");
        assert!((hi - 2.241402728_f64.powi(2)).abs() < 1e-8, "{hi}");
    }

    #[test]
    fn ideal_log_costs_nothing() {
        // 20 outliers of 400 plus two inlier levels chosen so the mean is q
        // and the sample variance is 2q.
        let q = 6usize;
        let qf = q as f64;
        let n = 400usize;
        let (lo_out, hi_out) = (0.5, 20.0);
        let shift: f64 = 10.0 * (lo_out - qf) + 10.0 * (hi_out - qf);
        let sq = 10.0 * (lo_out - qf).powi(2) + 10.0 * (hi_out - qf).powi(2);
        let m = (n - 20) as f64 / 2.0;
        // m (a - b) = -shift, m (a^2 + b^2) = 2q (n - 1) - sq
        let diff = -shift / m;
        let s2 = (2.0 * qf * (n - 1) as f64 - sq) / m;
        let b = (-diff + (2.0 * s2 - diff * diff).sqrt()) / 2.0;
        let a = b + diff;
        let mut series = vec![(lo_out, q); 10];
        series.extend(vec![(hi_out, q); 10]);
        series.extend(vec![(qf + a, q); m as usize]);
        series.extend(vec![(qf - b, q); m as usize]);
        let cost = boulkroune_cost(&[0.0; 6], &[0.0; 3], &series, &BoulkrouneWeights::default(), 0.05).unwrap();
        assert!(cost.total.abs() < 1e-12, "{:?}", cost.summands);
        let stats = nis_stats(&series, 0.05).unwrap();
        assert!((stats.outside - 0.05).abs() < 1e-15);
    }

    #[test]
    fn outlier_count_matches_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = ChiSquared::new(6.0).unwrap();
        let series: Vec<(f64, usize)> = (0..2000).map(|_| (rng.gen::<f64>() * 20.0, 6)).collect();
        let oracle = series.iter().filter(|(e, _)| {
            let c = d.cdf(*e);
            c < 0.025 || c > 0.975
        });
        let stats = nis_stats(&series, 0.05).unwrap();
        assert_eq!((stats.outside * 2000.0).round() as usize, oracle.count());
    }

    #[test]
    fn weights_scale_single_summand() {
        let series: Vec<(f64, usize)> = (0..50).map(|i| (0.5 + 0.1 * i as f64, 3)).collect();
        let base = boulkroune_cost(&[0.1, 0.2], &[1.0, 2.0], &series, &BoulkrouneWeights::default(), 0.05).unwrap();
        let mut w = BoulkrouneWeights::default();
        w.0[0] *= 2.0;
        let doubled = boulkroune_cost(&[0.1, 0.2], &[1.0, 2.0], &series, &w, 0.05).unwrap();
        assert!((doubled.summands[0] - 2.0 * base.summands[0]).abs() < 1e-15);
        assert_eq!(&doubled.summands[1..], &base.summands[1..]);
        assert!(boulkroune_cost(&[], &[1.0], &[], &w, 0.05).is_err());
    }

    #[test]
    fn failed_metrics_survive_json() {
        let m = RunMetrics::failed(RunStatus::Timeout, 30.5, "slow".into());
        let back: RunMetrics = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back.status, RunStatus::Timeout);
        assert!(back.nrmse_x_l1.is_nan() && back.boulkroune_summands.iter().all(|v| v.is_nan()));
        assert_eq!(back.nrmse_x.len(), N_STATES);
    }

    #[test]
    fn lhs_strata() {
        let s = lhs_unit(4, 1, 1e-2, 1e2, 3);
        let mut decades: Vec<usize> = s.iter().map(|v| (v[0].log10() + 2.0).floor() as usize).collect();
        decades.sort();
        assert_eq!(decades, vec![0, 1, 2, 3]);
        let big = lhs_sample(1000, 1e-2, 1e2, 9);
        for d in 0..TUNING_DIMS {
            let mut bins = [0usize; 10];
            for t in &big {
                let u = (t.to_vec()[d].log10() + 2.0) / 4.0;
                bins[((u * 10.0) as usize).min(9)] += 1;
            }
            assert_eq!(bins, [100; 10]);
        }
        assert_eq!(lhs_sample(5, 1e-2, 1e2, 1), lhs_sample(5, 1e-2, 1e2, 1));
        assert!(big.iter().all(|t| t.to_vec().iter().all(|v| (1e-2..=1e2).contains(v))));
        assert_ne!(lhs_sample(5, 1e-2, 1e2, 1), lhs_sample(5, 1e-2, 1e2, 2));
    }
}
