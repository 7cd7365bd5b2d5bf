//! Reference methods for delayed measurements: filter recalculation for any
//! model, and the Alexander and Larsen schemes for linear time-invariant
//! systems. They serve as oracles for the augmented filter.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::ekf::{
    check_divergence, joseph_update, online_rows, time_update, update_rows, FilterError, FilterSettings,
    GaussianBelief, Rows, RunLog, UpdateKind, UpdateRecord, UpdateStats,
};
use crate::events::{group_by_step, MeasurementEvent, StepEvents};
use crate::linalg::select;
use crate::model::{FilterModel, LinearSystem};

fn record_update(log: &mut RunLog, t: f64, kind: UpdateKind, rows: &Rows, stats: &UpdateStats) {
    let on = rows.online_rows();
    log.update_count += 1;
    log.updates.push(UpdateRecord {
        t,
        kind,
        q: rows.len(),
        nis: stats.nis,
        q_online: on.len(),
        nis_online: stats.nis_of(&on),
    });
}

/// Sample step of every id in the stream, and whether its result returns in
/// that same step.
fn sample_steps(steps: &[StepEvents]) -> HashMap<u64, usize> {
    let mut map = HashMap::new();
    for (k, s) in steps.iter().enumerate() {
        for (id, _) in &s.samples {
            map.insert(*id, k);
        }
    }
    map
}

fn rows_with_offline(step: &StepEvents, offline: &[(usize, f64)]) -> Rows {
    let mut rows = step.online.as_deref().map(online_rows).unwrap_or_default();
    for &(s, v) in offline {
        if v.is_finite() {
            rows.push(s, v, false);
        }
    }
    rows.sorted()
}

/// Filter recalculation: when a laboratory result returns, rewind to the
/// stored prior at its sample time, fuse it there together with the online
/// values of that step, and replay every later step.
pub fn run_recalculation<M: FilterModel + ?Sized>(
    model: &M,
    initial: &GaussianBelief,
    events: &[MeasurementEvent],
    settings: &FilterSettings,
) -> Result<RunLog, FilterError> {
    let steps = group_by_step(events, settings.t0, settings.dt, settings.n_steps).map_err(FilterError::Invalid)?;
    let sample_at = sample_steps(&steps);
    let mut offline: Vec<Vec<(usize, f64)>> = vec![Vec::new(); steps.len()];
    let mut priors: Vec<GaussianBelief> = Vec::with_capacity(steps.len());
    let mut posts: Vec<GaussianBelief> = Vec::with_capacity(steps.len());
    let mut log = RunLog::default();
    for (k, step) in steps.iter().enumerate() {
        let t = settings.time(k);
        settings.check_deadline(t)?;
        let mut rewind = k;
        for (id, vals) in &step.returns {
            let s = *sample_at.get(id).ok_or(FilterError::UnknownSample { id: *id, t })?;
            if s > k {
                return Err(FilterError::Invalid(format!("sample {id} returns before it is drawn")));
            }
            offline[s].extend(vals.iter().copied());
            rewind = rewind.min(s);
        }
        let prior = if k == 0 { initial.clone() } else { time_update(model, &posts[k - 1], settings.time(k - 1), t, &settings.q)? };
        check_divergence(&prior.mean, &prior.cov, settings.cov_ceiling, t)?;
        priors.push(prior);
        posts.truncate(rewind);
        for j in rewind..=k {
            let tj = settings.time(j);
            if j > rewind {
                priors[j] = time_update(model, &posts[j - 1], settings.time(j - 1), tj, &settings.q)?;
            }
            let mut b = priors[j].clone();
            let rows = rows_with_offline(&steps[j], &offline[j]);
            let stats = update_rows(model, &mut b, &rows, &settings.r, tj)?;
            check_divergence(&b.mean, &b.cov, settings.cov_ceiling, tj)?;
            if j == k {
                if let Some(stats) = stats {
                    let kind = if rewind < k { UpdateKind::Major } else { UpdateKind::Full };
                    record_update(&mut log, t, kind, &rows, &stats);
                }
            } else {
                log.update_count += usize::from(stats.is_some());
            }
            posts.push(b);
        }
        if settings.check_covariance {
            log.record_health(t, &posts[k].cov);
        }
        log.record_step(model, t, posts[k].mean.clone(), posts[k].cov.clone(), 0);
    }
    Ok(log)
}

/// `P H^T S^-1` for the given rows of `C`.
fn gain(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    let ph = p * h.transpose();
    let s = h * &ph + r;
    let chol = Cholesky::new(s).ok_or_else(|| FilterError::Divergence {
        t: f64::NAN,
        reason: "innovation covariance is not positive definite".into(),
    })?;
    Ok(chol.solve(&ph.transpose()).transpose())
}

struct Pending {
    id: u64,
    /// Gain columns of the laboratory rows at the sample time.
    k_off: DMatrix<f64>,
    signals: Vec<usize>,
    /// Prior prediction of the laboratory rows at the sample time.
    predicted: DVector<f64>,
    /// Accumulated `prod (I - K' C) A` since the sample time.
    m_delta: DMatrix<f64>,
}

/// Rows of `C` for the given output indices.
fn rows_of(sys: &LinearSystem, signals: &[usize]) -> DMatrix<f64> {
    select(&sys.c, signals, &(0..sys.n_states()).collect::<Vec<_>>())
}

/// One measurement step of the delayed-gain filter. At a sample step the
/// covariance absorbs the laboratory rows while the state only sees the
/// online innovation; the missing correction is stored in `pending`.
fn alexander_step(
    sys: &LinearSystem,
    belief: &mut GaussianBelief,
    step: &StepEvents,
    pending: &mut Option<Pending>,
    settings: &FilterSettings,
    t: f64,
    log: &mut RunLog,
) -> Result<(), FilterError> {
    let drawn: Vec<(u64, Vec<usize>)> = step.samples.iter().map(|(id, s)| (*id, s.indices())).collect();
    let returned: HashMap<u64, &Vec<(usize, f64)>> = step.returns.iter().map(|(id, v)| (*id, v)).collect();
    let mut rows = step.online.as_deref().map(online_rows).unwrap_or_default();
    let mut delayed: Option<(u64, Vec<usize>)> = None;
    for (id, sigs) in &drawn {
        if let Some(vals) = returned.get(id) {
            for &(s, v) in vals.iter() {
                rows.push(s, v, false);
            }
        } else {
            if delayed.is_some() || pending.is_some() {
                return Err(FilterError::Invalid(format!(
                    "sample {id} at t = {t}: the delayed-gain filters support one pending sample at a time"
                )));
            }
            delayed = Some((*id, sigs.clone()));
        }
    }
    let rows = rows.sorted();
    let n_cur = rows.len();
    let mut signals = rows.signals.clone();
    let mut innov_rows = rows.values.clone();
    if let Some((_, sigs)) = &delayed {
        signals.extend(sigs.iter().copied());
        innov_rows.extend(std::iter::repeat(f64::NAN).take(sigs.len()));
    }
    if !signals.is_empty() {
        let h = rows_of(sys, &signals);
        let yhat = &h * &belief.mean;
        let dy = DVector::from_fn(signals.len(), |i, _| if i < n_cur { innov_rows[i] - yhat[i] } else { 0.0 });
        let rr = select(&settings.r, &signals, &signals);
        let p_prior = belief.cov.clone();
        let k_full = gain(&p_prior, &h, &rr)?;
        if let Some(p) = pending.as_mut() {
            let kc = &k_full * &h;
            p.m_delta = (DMatrix::identity(kc.nrows(), kc.ncols()) - kc) * &p.m_delta;
        }
        let stats = joseph_update(&mut belief.mean, &mut belief.cov, &dy, &h, &rr, None, t)?;
        let cur: Vec<usize> = (0..n_cur).collect();
        if n_cur > 0 {
            log.update_count += 1;
            log.updates.push(UpdateRecord {
                t,
                kind: UpdateKind::Minor,
                q: n_cur,
                nis: stats.nis_of(&cur),
                q_online: rows.online_rows().len(),
                nis_online: stats.nis_of(&rows.online_rows()),
            });
        }
        if let Some((id, sigs)) = delayed {
            let k_off = k_full.columns(n_cur, sigs.len()).into_owned();
            let predicted = DVector::from_fn(sigs.len(), |i, _| yhat[n_cur + i]);
            let n = sys.n_states();
            *pending = Some(Pending { id, k_off, signals: sigs, predicted, m_delta: DMatrix::identity(n, n) });
        }
    }
    let mut applied = None;
    if let Some(p) = pending.take() {
        match returned.get(&p.id) {
            Some(vals) => {
                let mut nu = DVector::zeros(p.signals.len());
                for (i, s) in p.signals.iter().enumerate() {
                    let v = vals.iter().find(|(sig, _)| sig == s).map(|(_, v)| *v).ok_or_else(|| {
                        FilterError::Invalid(format!("sample {} returned without signal {s}", p.id))
                    })?;
                    nu[i] = v - p.predicted[i];
                }
                belief.mean += &p.m_delta * (&p.k_off * nu);
                applied = Some(p.id);
            }
            None => *pending = Some(p),
        }
    }
    for id in returned.keys() {
        if applied != Some(*id) && !drawn.iter().any(|(d, _)| d == id) {
            return Err(FilterError::UnknownSample { id: *id, t });
        }
    }
    check_divergence(&belief.mean, &belief.cov, settings.cov_ceiling, t)
}

fn check_linear(sys: &LinearSystem, settings: &FilterSettings) -> Result<(), FilterError> {
    if (sys.dt - settings.dt).abs() > 1e-12 * sys.dt.max(1.0) {
        return Err(FilterError::Invalid(format!(
            "filter grid spacing {} differs from the system's {}",
            settings.dt, sys.dt
        )));
    }
    Ok(())
}

fn predict(sys: &LinearSystem, belief: &GaussianBelief, t0: f64, t1: f64, q: &DMatrix<f64>) -> Result<GaussianBelief, FilterError> {
    time_update(sys, belief, t0, t1, q)
}

/// Alexander's method: during a delay the covariance behaves as if the
/// laboratory value had been fused at its sample time, and the state is
/// corrected once the value arrives.
pub fn run_alexander(
    sys: &LinearSystem,
    initial: &GaussianBelief,
    events: &[MeasurementEvent],
    settings: &FilterSettings,
) -> Result<RunLog, FilterError> {
    check_linear(sys, settings)?;
    let steps = group_by_step(events, settings.t0, settings.dt, settings.n_steps).map_err(FilterError::Invalid)?;
    let mut belief = initial.clone();
    let mut pending: Option<Pending> = None;
    let mut log = RunLog::default();
    for (k, step) in steps.iter().enumerate() {
        let t = settings.time(k);
        if k > 0 {
            belief = predict(sys, &belief, settings.time(k - 1), t, &settings.q)?;
            if let Some(p) = pending.as_mut() {
                p.m_delta = &sys.a * &p.m_delta;
            }
        }
        alexander_step(sys, &mut belief, step, &mut pending, settings, t, &mut log)?;
        log.record_step(sys, t, belief.mean.clone(), belief.cov.clone(), usize::from(pending.is_some()));
    }
    Ok(log)
}

/// Larsen's parallel filter: Alexander's filter runs alongside an ordinary
/// filter that bridges each delay window, so the reported estimate is
/// optimal at every step.
pub fn run_larsen(
    sys: &LinearSystem,
    initial: &GaussianBelief,
    events: &[MeasurementEvent],
    settings: &FilterSettings,
) -> Result<RunLog, FilterError> {
    check_linear(sys, settings)?;
    let steps = group_by_step(events, settings.t0, settings.dt, settings.n_steps).map_err(FilterError::Invalid)?;
    let mut first = initial.clone();
    let mut bridge: Option<GaussianBelief> = None;
    let mut pending: Option<Pending> = None;
    let mut log = RunLog::default();
    let mut scratch = RunLog::default();
    for (k, step) in steps.iter().enumerate() {
        let t = settings.time(k);
        if k > 0 {
            first = predict(sys, &first, settings.time(k - 1), t, &settings.q)?;
            if let Some(p) = pending.as_mut() {
                p.m_delta = &sys.a * &p.m_delta;
            }
            if let Some(b) = bridge.take() {
                bridge = Some(predict(sys, &b, settings.time(k - 1), t, &settings.q)?);
            }
        }
        let prior = first.clone();
        let before = scratch.update_count;
        alexander_step(sys, &mut first, step, &mut pending, settings, t, &mut scratch)?;
        log.update_count += scratch.update_count - before;
        let delayed_now = pending.is_some();
        if delayed_now {
            let mut b = match bridge.take() {
                Some(b) => b,
                None => prior,
            };
            let drawn_now: Vec<u64> = step.samples.iter().map(|(id, _)| *id).collect();
            let zero_delay: Vec<(usize, f64)> = step
                .returns
                .iter()
                .filter(|(id, _)| drawn_now.contains(id))
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let rows = rows_with_offline(step, &zero_delay);
            if let Some(stats) = update_rows(sys, &mut b, &rows, &settings.r, t)? {
                record_update(&mut log, t, UpdateKind::Minor, &rows, &stats);
            }
            bridge = Some(b);
        } else {
            bridge = None;
            if let Some(u) = scratch.updates.last() {
                if u.t == t {
                    log.updates.push(u.clone());
                }
            }
        }
        let shown = bridge.as_ref().unwrap_or(&first);
        log.record_step(sys, t, shown.mean.clone(), shown.cov.clone(), usize::from(delayed_now));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ekf::run_ekf;
    use crate::events::SignalSet;

    fn system() -> LinearSystem {
        LinearSystem {
            a: DMatrix::from_row_slice(2, 2, &[0.95, 0.1, -0.05, 0.9]),
            b: DMatrix::zeros(2, 0),
            c: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]),
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![0.02, 0.05])),
            r: DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2])),
            inputs: vec![],
            dt: 1.0,
        }
    }

    fn stream(delay: usize, n: usize) -> Vec<MeasurementEvent> {
        let mut ev = Vec::new();
        let mut id = 0;
        for k in 0..=n {
            ev.push(MeasurementEvent::Online { t: k as f64, values: vec![Some((k as f64 * 0.3).sin()), None] });
            if k % 7 == 2 && k + delay <= n {
                id += 1;
                ev.push(MeasurementEvent::SampleDrawn { t: k as f64, id, signals: SignalSet::single(1) });
                ev.push(MeasurementEvent::OfflineReturn {
                    t: (k + delay) as f64,
                    id,
                    values: vec![(1, (k as f64 * 0.2).cos())],
                });
            }
        }
        crate::events::sort_events(&mut ev);
        ev
    }

    fn settings(n: usize) -> FilterSettings {
        let s = system();
        FilterSettings::new(0.0, 1.0, n, s.q.clone(), s.r.clone())
    }

    fn initial() -> GaussianBelief {
        GaussianBelief::new(DVector::from_vec(vec![0.5, -0.2]), DMatrix::identity(2, 2))
    }

    #[test]
    fn zero_delay_recalculation_is_plain_filter() {
        let ev = stream(0, 30);
        let a = run_recalculation(&system(), &initial(), &ev, &settings(30)).unwrap();
        let b = run_ekf(&system(), &initial(), &ev, &settings(30)).unwrap();
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert!((&x.mean - &y.mean).amax() < 1e-12);
        }
    }

    #[test]
    fn larsen_matches_recalculation_everywhere() {
        let ev = stream(3, 40);
        let rec = run_recalculation(&system(), &initial(), &ev, &settings(40)).unwrap();
        let lar = run_larsen(&system(), &initial(), &ev, &settings(40)).unwrap();
        for (x, y) in rec.steps.iter().zip(&lar.steps) {
            assert!((&x.mean - &y.mean).amax() < 1e-10, "t = {}", x.t);
            assert!((&x.cov - &y.cov).amax() < 1e-10, "t = {}", x.t);
        }
    }

    #[test]
    fn alexander_matches_after_returns_and_differs_inside() {
        let ev = stream(3, 40);
        let rec = run_recalculation(&system(), &initial(), &ev, &settings(40)).unwrap();
        let alx = run_alexander(&system(), &initial(), &ev, &settings(40)).unwrap();
        let mut inside_differs = false;
        for (x, y) in rec.steps.iter().zip(&alx.steps) {
            if y.augmentation == 0 {
                assert!((&x.mean - &y.mean).amax() < 1e-10, "t = {}", x.t);
                assert!((&x.cov - &y.cov).amax() < 1e-10, "t = {}", x.t);
            } else if (&x.mean - &y.mean).amax() > 1e-6 {
                inside_differs = true;
            }
        }
        assert!(inside_differs);
    }

    #[test]
    fn larsen_doubles_updates_only_inside_delays() {
        let ev = stream(3, 40);
        let ekf = run_ekf(&system(), &initial(), &stream(0, 40), &settings(40)).unwrap();
        let lar = run_larsen(&system(), &initial(), &ev, &settings(40)).unwrap();
        let windows = lar.steps.iter().filter(|s| s.augmentation > 0).count();
        assert_eq!(lar.update_count, ekf.update_count + windows);
    }

    #[test]
    fn overlapping_samples_are_refused() {
        let ev = stream(9, 40);
        assert!(matches!(
            run_alexander(&system(), &initial(), &ev, &settings(40)),
            Err(FilterError::Invalid(_))
        ));
    }
}
