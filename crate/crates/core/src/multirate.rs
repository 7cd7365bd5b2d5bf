//! Sample-state augmentation for delayed laboratory measurements.
//!
//! The augmented state stacks the current state with frozen copies of the
//! state at every pending sample time. Each copy's mean is held constant by
//! the time update; a laboratory result is fused against its copy when it
//! returns, after which the copy is removed.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ekf::{
    check_divergence, clip_mean, joseph_update, online_rows, FilterError, FilterSettings, GaussianBelief, Rows,
    RunLog, UpdateKind, UpdateRecord, UpdateStats,
};
use crate::events::{group_by_step, MeasurementEvent, SignalSet};
use crate::model::FilterModel;
use crate::ode::JointState;

/// Cross-covariance between a new sample block and the older pending blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCoupling {
    /// Copy the current state's rows, so the augmented covariance stays the
    /// exact joint covariance (positive semidefinite).
    #[default]
    Correlated,
    /// Zero blocks between distinct samples.
    Independent,
}

/// Which blocks a measurement update may change.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMask {
    /// Every block, including pending samples that do not return. Pending
    /// copies are then refined by later online data, which makes the filter
    /// coincide with recalculation on linear systems.
    #[default]
    Full,
    /// Only the current state and the returning samples; pending means stay
    /// frozen until their own return.
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingSample {
    pub id: u64,
    pub t_s: f64,
    pub signals: SignalSet,
}

/// Current state plus pending sample copies.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBelief {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub registry: Vec<PendingSample>,
    n: usize,
}

impl AugmentedBelief {
    pub fn new(t: f64, belief: GaussianBelief) -> Self {
        let n = belief.mean.len();
        Self { t, mean: belief.mean, cov: belief.cov, registry: Vec::new(), n }
    }

    /// Dimension of one block.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.registry.len()
    }

    /// Block index of a pending sample (the current state is block 0).
    pub fn block_of(&self, id: u64) -> Option<usize> {
        self.registry.iter().position(|s| s.id == id).map(|p| p + 1)
    }

    pub fn block_mean(&self, block: usize) -> DVector<f64> {
        self.mean.rows(block * self.n, self.n).into_owned()
    }

    pub fn online(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.block_mean(0),
            cov: self.cov.view((0, 0), (self.n, self.n)).into_owned(),
        }
    }
}

/// Append a copy of the current state for `sample`.
pub fn augment(
    belief: &mut AugmentedBelief,
    sample: PendingSample,
    coupling: SampleCoupling,
    max_augmentation: usize,
) -> Result<(), FilterError> {
    if belief.degree() >= max_augmentation {
        return Err(FilterError::CapacityExceeded { t: belief.t, capacity: max_augmentation });
    }
    if belief.block_of(sample.id).is_some() {
        return Err(FilterError::Invalid(format!("sample {} is already pending", sample.id)));
    }
    let n = belief.n;
    let big = belief.mean.len();
    let mut mean = DVector::zeros(big + n);
    mean.rows_mut(0, big).copy_from(&belief.mean);
    mean.rows_mut(big, n).copy_from(&belief.mean.rows(0, n));
    let mut cov = DMatrix::zeros(big + n, big + n);
    cov.view_mut((0, 0), (big, big)).copy_from(&belief.cov);
    let copy_cols = match coupling {
        SampleCoupling::Correlated => big,
        SampleCoupling::Independent => n,
    };
    for j in 0..copy_cols {
        for i in 0..n {
            let v = belief.cov[(i, j)];
            cov[(big + i, j)] = v;
            cov[(j, big + i)] = v;
        }
    }
    cov.view_mut((big, big), (n, n)).copy_from(&belief.cov.view((0, 0), (n, n)));
    belief.mean = mean;
    belief.cov = cov;
    belief.registry.push(sample);
    Ok(())
}

/// Remove the blocks of the given samples.
pub fn deaugment(belief: &mut AugmentedBelief, ids: &[u64]) -> Result<(), FilterError> {
    let n = belief.n;
    let mut drop = HashSet::new();
    for &id in ids {
        let b = belief.block_of(id).ok_or(FilterError::UnknownSample { id, t: belief.t })?;
        drop.insert(b);
    }
    let keep: Vec<usize> = (0..=belief.degree())
        .filter(|b| !drop.contains(b))
        .flat_map(|b| b * n..(b + 1) * n)
        .collect();
    belief.mean = DVector::from_fn(keep.len(), |i, _| belief.mean[keep[i]]);
    belief.cov = DMatrix::from_fn(keep.len(), keep.len(), |i, j| belief.cov[(keep[i], keep[j])]);
    let mut b = 0;
    belief.registry.retain(|_| {
        b += 1;
        !drop.contains(&b)
    });
    Ok(())
}

/// Time update: the current block follows the model, sample means and
/// sample-to-sample covariances stay as they are, and the cross blocks are
/// carried by the state transition.
pub fn propagate_augmented<M: FilterModel + ?Sized>(
    model: &M,
    belief: &mut AugmentedBelief,
    t1: f64,
    q: &DMatrix<f64>,
) -> Result<(), FilterError> {
    let n = belief.n;
    let big = belief.mean.len();
    let mut x = belief.block_mean(0);
    if let Some(f) = model.clip_floor() {
        clip_mean(x.as_mut_slice(), f);
    }
    let mut st = JointState {
        mean: x,
        cov: belief.cov.view((0, 0), (n, n)).into_owned(),
        cross: belief.cov.view((0, n), (n, big - n)).into_owned(),
    };
    model.propagate(belief.t, t1, &mut st, q)?;
    belief.mean.rows_mut(0, n).copy_from(&st.mean);
    belief.cov.view_mut((0, 0), (n, n)).copy_from(&st.cov);
    if big > n {
        belief.cov.view_mut((0, n), (n, big - n)).copy_from(&st.cross);
        belief.cov.view_mut((n, 0), (big - n, n)).copy_from(&st.cross.transpose());
    }
    belief.t = t1;
    Ok(())
}

/// Block-diagonal 0/1 matrix with identity blocks for the current state and
/// the returning samples.
pub fn build_indicator(belief: &AugmentedBelief, returning: &[u64]) -> Result<DMatrix<f64>, FilterError> {
    let mask = block_mask(belief, returning)?;
    Ok(DMatrix::from_fn(mask.len(), mask.len(), |i, j| if i == j && mask[i] { 1.0 } else { 0.0 }))
}

fn block_mask(belief: &AugmentedBelief, returning: &[u64]) -> Result<Vec<bool>, FilterError> {
    let n = belief.n;
    let mut mask = vec![false; belief.mean.len()];
    mask[..n].fill(true);
    for &id in returning {
        let b = belief.block_of(id).ok_or(FilterError::UnknownSample { id, t: belief.t })?;
        mask[b * n..(b + 1) * n].fill(true);
    }
    Ok(mask)
}

/// Offline results of one returning sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReturn {
    pub id: u64,
    pub values: Vec<(usize, f64)>,
}

/// Stacked update: `current` rows are measured on the current state, each
/// return on its sample block. Returned samples are de-augmented afterwards.
/// Rows are stacked as the current rows (by output index) followed by the
/// returns in registry order.
pub(crate) fn update_augmented<M: FilterModel + ?Sized>(
    model: &M,
    belief: &mut AugmentedBelief,
    current: &Rows,
    returns: &[SampleReturn],
    r: &DMatrix<f64>,
    gain: GainMask,
) -> Result<Option<(UpdateStats, Vec<usize>)>, FilterError> {
    let n = belief.n;
    let mut rows: Vec<(usize, usize, f64, bool)> = current
        .signals
        .iter()
        .zip(&current.values)
        .zip(&current.online)
        .map(|((&s, &v), &o)| (0, s, v, o))
        .collect();
    let mut ret: Vec<(usize, &SampleReturn)> = Vec::new();
    for sr in returns {
        let b = belief.block_of(sr.id).ok_or(FilterError::UnknownSample { id: sr.id, t: belief.t })?;
        ret.push((b, sr));
    }
    ret.sort_by_key(|(b, _)| *b);
    for (b, sr) in &ret {
        let mut vals = sr.values.clone();
        vals.sort_by_key(|(s, _)| *s);
        for (s, v) in vals {
            if v.is_finite() {
                rows.push((*b, s, v, false));
            }
        }
    }
    let ids: Vec<u64> = returns.iter().map(|s| s.id).collect();
    if rows.is_empty() {
        deaugment(belief, &ids)?;
        return Ok(None);
    }
    let big = belief.mean.len();
    let m = rows.len();
    let mut h = DMatrix::zeros(m, big);
    let mut dy = DVector::zeros(m);
    let mut cache: Vec<Option<(DVector<f64>, DMatrix<f64>)>> = vec![None; belief.degree() + 1];
    for (i, &(b, s, v, _)) in rows.iter().enumerate() {
        if cache[b].is_none() {
            let x = belief.block_mean(b);
            cache[b] = Some((model.output(&x), model.output_jacobian(&x)));
        }
        let (yhat, hb) = cache[b].as_ref().unwrap();
        dy[i] = v - yhat[s];
        for j in 0..n {
            h[(i, b * n + j)] = hb[(s, j)];
        }
    }
    let rr = DMatrix::from_fn(m, m, |i, j| if rows[i].0 == rows[j].0 { r[(rows[i].1, rows[j].1)] } else { 0.0 });
    let mask = match gain {
        GainMask::Full => None,
        GainMask::Indicator => Some(block_mask(belief, &ids)?),
    };
    let stats = joseph_update(&mut belief.mean, &mut belief.cov, &dy, &h, &rr, mask.as_deref(), belief.t)?;
    deaugment(belief, &ids)?;
    let online: Vec<usize> = (0..m).filter(|&i| rows[i].3).collect();
    Ok(Some((stats, online)))
}

/// Update with online signals only while samples are pending.
pub fn update_minor<M: FilterModel + ?Sized>(
    model: &M,
    belief: &mut AugmentedBelief,
    online: &[Option<f64>],
    r: &DMatrix<f64>,
    gain: GainMask,
) -> Result<Option<UpdateStats>, FilterError> {
    Ok(update_augmented(model, belief, &online_rows(online), &[], r, gain)?.map(|(s, _)| s))
}

/// Update at the return of one or more samples, optionally stacked with the
/// online signals of the same step. Returns the de-augmented ids.
pub fn update_major<M: FilterModel + ?Sized>(
    model: &M,
    belief: &mut AugmentedBelief,
    online: Option<&[Option<f64>]>,
    returns: &[SampleReturn],
    r: &DMatrix<f64>,
    gain: GainMask,
) -> Result<(Option<UpdateStats>, Vec<u64>), FilterError> {
    if returns.is_empty() {
        return Err(FilterError::Invalid("major update without returning samples".into()));
    }
    let current = online.map(online_rows).unwrap_or_default();
    let stats = update_augmented(model, belief, &current, returns, r, gain)?.map(|(s, _)| s);
    Ok((stats, returns.iter().map(|s| s.id).collect()))
}

/// Multirate EKF over a time-ordered event stream on the grid of `settings`.
///
/// Per step: time update, then one stacked update with the online values,
/// any zero-delay laboratory values and all returning samples, then
/// augmentation for the samples drawn at this step.
pub fn run_multirate<M: FilterModel + ?Sized>(
    model: &M,
    initial: &GaussianBelief,
    events: &[MeasurementEvent],
    settings: &FilterSettings,
) -> Result<RunLog, FilterError> {
    let steps = group_by_step(events, settings.t0, settings.dt, settings.n_steps).map_err(FilterError::Invalid)?;
    let mut belief = AugmentedBelief::new(settings.t0, initial.clone());
    let mut log = RunLog::default();
    for (k, step) in steps.iter().enumerate() {
        let t = settings.time(k);
        settings.check_deadline(t)?;
        if k > 0 {
            propagate_augmented(model, &mut belief, t, &settings.q)?;
            check_divergence(&belief.mean, &belief.cov, settings.cov_ceiling, t)?;
        }
        let drawn_now: HashSet<u64> = step.samples.iter().map(|(id, _)| *id).collect();
        let mut current = step.online.as_deref().map(online_rows).unwrap_or_default();
        let mut returns = Vec::new();
        let mut zero_delay = HashSet::new();
        for (id, vals) in &step.returns {
            if drawn_now.contains(id) {
                zero_delay.insert(*id);
                for &(s, v) in vals {
                    if v.is_finite() {
                        current.push(s, v, false);
                    }
                }
            } else {
                returns.push(SampleReturn { id: *id, values: vals.clone() });
            }
        }
        let current = current.sorted();
        let kind = if !returns.is_empty() {
            UpdateKind::Major
        } else if current.online.iter().any(|o| !o) {
            UpdateKind::Full
        } else {
            UpdateKind::Minor
        };
        if let Some((stats, online)) =
            update_augmented(model, &mut belief, &current, &returns, &settings.r, settings.gain_mask)?
        {
            log.update_count += 1;
            log.updates.push(UpdateRecord {
                t,
                kind,
                q: stats.innovation.len(),
                nis: stats.nis,
                q_online: online.len(),
                nis_online: stats.nis_of(&online),
            });
            check_divergence(&belief.mean, &belief.cov, settings.cov_ceiling, t)?;
        }
        for (id, signals) in &step.samples {
            if zero_delay.contains(id) {
                continue;
            }
            augment(
                &mut belief,
                PendingSample { id: *id, t_s: t, signals: *signals },
                settings.coupling,
                settings.max_augmentation,
            )?;
        }
        if settings.check_covariance {
            log.record_health(t, &belief.cov);
        }
        let online = belief.online();
        log.record_step(model, t, online.mean, online.cov, belief.degree());
    }
    Ok(log)
}
