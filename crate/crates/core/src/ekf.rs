//! Continuous-discrete extended Kalman filter: beliefs, Joseph-form
//! measurement updates, time updates and the single-rate run loop.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{group_by_step, MeasurementEvent};
use crate::linalg::{asymmetry, min_eigenvalue, select, symmetrize};
use crate::model::FilterModel;
use crate::multirate::{GainMask, SampleCoupling};
use crate::ode::{JointState, OdeError};

/// Largest accepted condition number of the innovation covariance.
pub const MAX_INNOVATION_CONDITION: f64 = 1e15;
/// Covariance diagonal beyond which a run counts as diverged.
pub const DEFAULT_COV_CEILING: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("filter diverged at t = {t}: {reason}")]
    Divergence { t: f64, reason: String },
    #[error("integration failed on [{t0}, {t1}]: {source}")]
    Integration {
        t0: f64,
        t1: f64,
        #[source]
        source: OdeError,
    },
    #[error("more than {capacity} pending samples at t = {t}")]
    CapacityExceeded { t: f64, capacity: usize },
    #[error("return of unknown sample {id} at t = {t}")]
    UnknownSample { id: u64, t: f64 },
    #[error("run exceeded its time budget at t = {t}")]
    Timeout { t: f64 },
    #[error("invalid filter input: {0}")]
    Invalid(String),
}

impl FilterError {
    /// Divergence-like failures (as opposed to bad input).
    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::Divergence { .. } | Self::Integration { .. } | Self::CapacityExceeded { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
}

/// Innovation statistics of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub innovation: DVector<f64>,
    pub s: DMatrix<f64>,
    pub nis: f64,
}

impl UpdateStats {
    /// NIS restricted to a subset of the stacked rows.
    pub fn nis_of(&self, rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let s = select(&self.s, rows, rows);
        let dy = DVector::from_fn(rows.len(), |i, _| self.innovation[rows[i]]);
        nis(&dy, &s).unwrap_or(f64::NAN)
    }
}

/// Normalized innovation squared `dy^T S^-1 dy`.
pub fn nis(innovation: &DVector<f64>, s: &DMatrix<f64>) -> Option<f64> {
    let chol = Cholesky::new(s.clone())?;
    let w = chol.solve(innovation);
    Some(innovation.dot(&w))
}

/// Joseph-form update `P+ = (I - K H) P (I - K H)^T + K R K^T` with the
/// optimal gain `K = P H^T S^-1`. Rows of `K` whose entry in `gain_rows` is
/// `false` are zeroed before use, so those state entries stay untouched.
pub fn joseph_update(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    innovation: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gain_rows: Option<&[bool]>,
    t: f64,
) -> Result<UpdateStats, FilterError> {
    let n = mean.len();
    let ph = &*cov * h.transpose();
    let mut s = h * &ph + r;
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v.abs())));
    if !(lo > 0.0) || hi / lo > MAX_INNOVATION_CONDITION {
        return Err(FilterError::Divergence {
            t,
            reason: format!("innovation covariance is ill-conditioned (eigenvalues in [{lo:e}, {hi:e}])"),
        });
    }
    let chol = Cholesky::new(s.clone())
        .ok_or_else(|| FilterError::Divergence { t, reason: "innovation covariance is not positive definite".into() })?;
    let mut k = chol.solve(&ph.transpose()).transpose();
    if let Some(mask) = gain_rows {
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                k.row_mut(i).fill(0.0);
            }
        }
    }
    let w = chol.solve(innovation);
    let nis = innovation.dot(&w);
    *mean += &k * innovation;
    let a = DMatrix::identity(n, n) - &k * h;
    let mut p = &a * &*cov * a.transpose() + &k * r * k.transpose();
    symmetrize(&mut p);
    *cov = p;
    Ok(UpdateStats { innovation: innovation.clone(), s, nis })
}

/// Single-rate update with the available entries of a full output vector.
/// Returns `None` statistics when nothing is available.
pub fn measurement_update<M: FilterModel + ?Sized>(
    model: &M,
    prior: &GaussianBelief,
    y: &[Option<f64>],
    r: &DMatrix<f64>,
    t: f64,
) -> Result<(GaussianBelief, Option<UpdateStats>), FilterError> {
    let rows: Vec<usize> = y.iter().enumerate().filter_map(|(i, v)| v.map(|_| i)).collect();
    if rows.is_empty() {
        return Ok((prior.clone(), None));
    }
    let yhat = model.output(&prior.mean);
    let hfull = model.output_jacobian(&prior.mean);
    let h = select(&hfull, &rows, &(0..prior.mean.len()).collect::<Vec<_>>());
    let dy = DVector::from_fn(rows.len(), |i, _| y[rows[i]].unwrap() - yhat[rows[i]]);
    let rr = select(r, &rows, &rows);
    let mut post = prior.clone();
    let stats = joseph_update(&mut post.mean, &mut post.cov, &dy, &h, &rr, None, t)?;
    Ok((post, Some(stats)))
}

/// Raise every mean entry below `floor` to `floor`.
pub fn clip_mean(mean: &mut [f64], floor: f64) {
    for v in mean {
        if *v < floor {
            *v = floor;
        }
    }
}

/// Time update of a plain belief (clipping first when the model asks for it).
pub fn time_update<M: FilterModel + ?Sized>(
    model: &M,
    belief: &GaussianBelief,
    t0: f64,
    t1: f64,
    q: &DMatrix<f64>,
) -> Result<GaussianBelief, FilterError> {
    let mut mean = belief.mean.clone();
    if let Some(f) = model.clip_floor() {
        clip_mean(mean.as_mut_slice(), f);
    }
    let n = mean.len();
    let mut st = JointState { mean, cov: belief.cov.clone(), cross: DMatrix::zeros(n, 0) };
    model.propagate(t0, t1, &mut st, q)?;
    Ok(GaussianBelief { mean: st.mean, cov: st.cov })
}

/// Fail when the mean or covariance is non-finite or a variance exceeds `ceiling`.
pub fn check_divergence(mean: &DVector<f64>, cov: &DMatrix<f64>, ceiling: f64, t: f64) -> Result<(), FilterError> {
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(FilterError::Divergence { t, reason: "non-finite state estimate".into() });
    }
    for i in 0..cov.nrows() {
        let d = cov[(i, i)];
        if !d.is_finite() || d > ceiling {
            return Err(FilterError::Divergence { t, reason: format!("variance {i} is {d:e}") });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FilterSettings {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Process noise in filter coordinates.
    pub q: DMatrix<f64>,
    /// Measurement noise of the full output vector in filter coordinates.
    pub r: DMatrix<f64>,
    pub max_augmentation: usize,
    pub cov_ceiling: f64,
    pub coupling: SampleCoupling,
    pub gain_mask: GainMask,
    /// Record symmetry and smallest eigenvalue of every posterior covariance.
    pub check_covariance: bool,
    pub deadline: Option<Instant>,
}

impl FilterSettings {
    pub fn new(t0: f64, dt: f64, n_steps: usize, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self {
            t0,
            dt,
            n_steps,
            q,
            r,
            max_augmentation: 5,
            cov_ceiling: DEFAULT_COV_CEILING,
            coupling: SampleCoupling::default(),
            gain_mask: GainMask::default(),
            check_covariance: false,
            deadline: None,
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub(crate) fn check_deadline(&self, t: f64) -> Result<(), FilterError> {
        match self.deadline {
            Some(d) if Instant::now() > d => Err(FilterError::Timeout { t }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateKind {
    /// Online signals only (pending samples frozen).
    Minor,
    /// At least one delayed sample returned.
    Major,
    /// All available signals fused on the current state (single rate or zero delay).
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub t: f64,
    pub kind: UpdateKind,
    /// Number of stacked rows.
    pub q: usize,
    pub nis: f64,
    /// Rows that came from the online event of this step.
    pub q_online: usize,
    pub nis_online: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    /// Posterior mean of the current state (filter coordinates).
    pub mean: DVector<f64>,
    /// Posterior covariance of the current state.
    pub cov: DMatrix<f64>,
    /// Predicted outputs `h(mean)`.
    pub output: DVector<f64>,
    pub augmentation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceHealth {
    pub t: f64,
    pub dim: usize,
    pub asymmetry: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub updates: Vec<UpdateRecord>,
    pub health: Vec<CovarianceHealth>,
    pub max_augmentation: usize,
    /// Count of Joseph updates performed (for cost comparisons).
    pub update_count: usize,
}

impl RunLog {
    pub(crate) fn record_health(&mut self, t: f64, cov: &DMatrix<f64>) {
        self.health.push(CovarianceHealth {
            t,
            dim: cov.nrows(),
            asymmetry: asymmetry(cov),
            min_eigenvalue: min_eigenvalue(cov),
        });
    }

    pub(crate) fn record_step<M: FilterModel + ?Sized>(
        &mut self,
        model: &M,
        t: f64,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        augmentation: usize,
    ) {
        let output = model.output(&mean);
        self.max_augmentation = self.max_augmentation.max(augmentation);
        self.steps.push(StepRecord { t, mean, cov, output, augmentation });
    }
}

/// Rows of a stacked update: output indices with their measured values.
#[derive(Debug, Clone, Default)]
pub(crate) struct Rows {
    pub signals: Vec<usize>,
    pub values: Vec<f64>,
    pub online: Vec<bool>,
}

impl Rows {
    pub fn push(&mut self, signal: usize, value: f64, online: bool) {
        self.signals.push(signal);
        self.values.push(value);
        self.online.push(online);
    }

    /// Order rows by output index (stable), the layout used for every update
    /// on the current state.
    pub fn sorted(mut self) -> Self {
        let mut idx: Vec<usize> = (0..self.signals.len()).collect();
        idx.sort_by_key(|&i| self.signals[i]);
        self.signals = idx.iter().map(|&i| self.signals[i]).collect();
        self.values = idx.iter().map(|&i| self.values[i]).collect();
        self.online = idx.iter().map(|&i| self.online[i]).collect();
        self
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn online_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.online[i]).collect()
    }
}

/// Rows from an online event.
pub(crate) fn online_rows(values: &[Option<f64>]) -> Rows {
    let mut rows = Rows::default();
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            if v.is_finite() {
                rows.push(i, *v, true);
            }
        }
    }
    rows
}

/// Update a plain belief with stacked rows measured on that state.
pub(crate) fn update_rows<M: FilterModel + ?Sized>(
    model: &M,
    belief: &mut GaussianBelief,
    rows: &Rows,
    r: &DMatrix<f64>,
    t: f64,
) -> Result<Option<UpdateStats>, FilterError> {
    if rows.len() == 0 {
        return Ok(None);
    }
    let n = belief.mean.len();
    let yhat = model.output(&belief.mean);
    let hfull = model.output_jacobian(&belief.mean);
    let h = select(&hfull, &rows.signals, &(0..n).collect::<Vec<_>>());
    let dy = DVector::from_fn(rows.len(), |i, _| rows.values[i] - yhat[rows.signals[i]]);
    let rr = select(r, &rows.signals, &rows.signals);
    joseph_update(&mut belief.mean, &mut belief.cov, &dy, &h, &rr, None, t).map(Some)
}

/// Single-rate EKF over an event stream where every laboratory value is
/// treated as known at its sample time.
pub fn run_ekf<M: FilterModel + ?Sized>(
    model: &M,
    initial: &GaussianBelief,
    events: &[MeasurementEvent],
    settings: &FilterSettings,
) -> Result<RunLog, FilterError> {
    let steps = group_by_step(events, settings.t0, settings.dt, settings.n_steps).map_err(FilterError::Invalid)?;
    let mut sample_step = std::collections::HashMap::new();
    for (k, s) in steps.iter().enumerate() {
        for (id, _) in &s.samples {
            sample_step.insert(*id, k);
        }
    }
    let mut offline: Vec<Vec<(usize, f64)>> = vec![Vec::new(); steps.len()];
    for s in &steps {
        for (id, vals) in &s.returns {
            let k = *sample_step.get(id).ok_or(FilterError::UnknownSample { id: *id, t: f64::NAN })?;
            offline[k].extend(vals.iter().copied());
        }
    }
    let mut log = RunLog::default();
    let mut belief = initial.clone();
    for (k, step) in steps.iter().enumerate() {
        let t = settings.time(k);
        settings.check_deadline(t)?;
        if k > 0 {
            belief = time_update(model, &belief, settings.time(k - 1), t, &settings.q)?;
            check_divergence(&belief.mean, &belief.cov, settings.cov_ceiling, t)?;
        }
        let mut rows = step.online.as_deref().map(online_rows).unwrap_or_default();
        for &(sig, v) in &offline[k] {
            rows.push(sig, v, false);
        }
        let rows = rows.sorted();
        if let Some(stats) = update_rows(model, &mut belief, &rows, &settings.r, t)? {
            log.update_count += 1;
            let on = rows.online_rows();
            log.updates.push(UpdateRecord {
                t,
                kind: UpdateKind::Full,
                q: rows.len(),
                nis: stats.nis,
                q_online: on.len(),
                nis_online: stats.nis_of(&on),
            });
            check_divergence(&belief.mean, &belief.cov, settings.cov_ceiling, t)?;
        }
        if settings.check_covariance {
            log.record_health(t, &belief.cov);
        }
        log.record_step(model, t, belief.mean.clone(), belief.cov.clone(), 0);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_joseph_update() {
        let mut m = DVector::from_element(1, 0.0);
        let mut p = DMatrix::from_element(1, 1, 1.0);
        let h = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, 1.0);
        let s = joseph_update(&mut m, &mut p, &DVector::from_element(1, 2.0), &h, &r, None, 0.0).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.nis - 2.0).abs() < 1e-15);
    }

    #[test]
    fn nis_scalar_example() {
        let v = nis(&DVector::from_element(1, 2.0), &DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn joseph_matches_simple_form_for_optimal_gain() {
        let p0 = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.7]);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, -1.0]);
        let r = DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]);
        let mut m = DVector::zeros(3);
        let mut p = p0.clone();
        joseph_update(&mut m, &mut p, &DVector::from_vec(vec![0.4, -0.1]), &h, &r, None, 0.0).unwrap();
        let s = &h * &p0 * h.transpose() + &r;
        let k = &p0 * h.transpose() * s.try_inverse().unwrap();
        let simple = (DMatrix::identity(3, 3) - &k * &h) * &p0;
        assert!((&p - &simple).amax() < 1e-12);
        assert_eq!(asymmetry(&p), 0.0);
    }

    #[test]
    fn masked_rows_are_untouched() {
        let p0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
        let mut p = p0.clone();
        let mut m = DVector::from_vec(vec![1.0, 2.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = DMatrix::from_element(1, 1, 0.5);
        joseph_update(&mut m, &mut p, &DVector::from_element(1, 1.0), &h, &r, Some(&[true, false]), 0.0).unwrap();
        assert_eq!(m[1], 2.0);
        assert_eq!(p[(1, 1)], p0[(1, 1)]);
        assert!(min_eigenvalue(&p) > 0.0);
    }

    #[test]
    fn singular_innovation_is_divergence() {
        let mut m = DVector::zeros(1);
        let mut p = DMatrix::zeros(1, 1);
        let h = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::zeros(1, 1);
        let e = joseph_update(&mut m, &mut p, &DVector::from_element(1, 1.0), &h, &r, None, 0.5).unwrap_err();
        assert!(e.is_divergence());
    }

    #[test]
    fn divergence_ceiling() {
        let m = DVector::zeros(2);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2e8]));
        assert!(check_divergence(&m, &p, 1e8, 0.0).is_err());
        assert!(check_divergence(&m, &p, 1e9, 0.0).is_ok());
    }

    #[test]
    fn clip_raises_small_entries() {
        let mut v = [-1.0, 0.0005, 0.5];
        clip_mean(&mut v, 1e-3);
        assert_eq!(v, [1e-3, 1e-3, 0.5]);
    }
}
