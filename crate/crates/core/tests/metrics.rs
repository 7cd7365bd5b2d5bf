use std::collections::HashSet;
use std::time::Duration;

use mrekf::ekf::{nis, run_ekf, FilterSettings, GaussianBelief};
use mrekf::estimate::{run, Method, RunOptions, Tuning};
use mrekf::events::MeasurementEvent;
use mrekf::model::LinearSystem;
use mrekf::scenario::{Scenario, ScenarioConfig};
use mrekf::tuning::{
    chi2_interval, compute_metrics, grid_search, lhs_unit, nis_stats, nrmse, RunStatus, TuningSample,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Two-pass reference: range first, then the mean squared error.
fn nrmse_two_pass(z: &[f64], e: &[f64]) -> f64 {
    let mut lo = z[0];
    let mut hi = z[0];
    for &v in z {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let mut acc = 0.0;
    for i in 0..z.len() {
        acc += (z[i] - e[i]).powi(2);
    }
    (acc / z.len() as f64).sqrt() / (hi - lo)
}

#[test]
fn nrmse_matches_two_pass_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.gen_range(2..500);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let e: Vec<f64> = z.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let a = nrmse(&z, &e).unwrap();
        let b = nrmse_two_pass(&z, &e);
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn nis_examples() {
    assert_eq!(nis(&DVector::zeros(2), &DMatrix::identity(2, 2)), Some(0.0));
    assert_eq!(nis(&DVector::from_vec(vec![2.0]), &DMatrix::from_element(1, 1, 4.0)), Some(1.0));
    assert_eq!(nis(&DVector::from_vec(vec![1.0, 1.0]), &DMatrix::from_element(2, 2, 1.0)), None);
}

#[test]
fn consistent_filter_has_alpha_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let sys = LinearSystem {
        a: DMatrix::from_row_slice(1, 1, &[0.95]),
        b: DMatrix::zeros(1, 0),
        c: DMatrix::from_row_slice(1, 1, &[1.0]),
        q: DMatrix::from_element(1, 1, 0.1),
        r: DMatrix::from_element(1, 1, 0.5),
        inputs: vec![],
        dt: 1.0,
    };
    let n = 6000;
    let mut x: f64 = rng.sample(StandardNormal);
    let mut events = Vec::new();
    for k in 1..=n {
        x = 0.95 * x + 0.1f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let y = x + 0.5f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        events.push(MeasurementEvent::Online { t: k as f64, values: vec![Some(y)] });
    }
    let settings = FilterSettings::new(0.0, 1.0, n, sys.q.clone(), sys.r.clone());
    let log = run_ekf(&sys, &GaussianBelief::new(DVector::zeros(1), DMatrix::identity(1, 1)), &events, &settings).unwrap();
    let series: Vec<(f64, usize)> = log.updates.iter().map(|u| (u.nis, u.q)).collect();
    let stats = nis_stats(&series, 0.05).unwrap();
    assert!((stats.outside - 0.05).abs() < 0.02, "{stats:?}");
    assert!((stats.mean_ratio - 1.0).abs() < 0.1, "{stats:?}");
    let (lo, hi) = chi2_interval(1, 0.05);
    assert!((lo - 0.000982).abs() < 1e-6 && (hi - 5.024).abs() < 1e-3);
}

#[test]
fn first_week_does_not_count() {
    let scn = Scenario::generate(&ScenarioConfig { days: 2.0, ..ScenarioConfig::default() }).unwrap();
    let est = run(&scn, &Tuning::uniform(0.1, 1.0), Method::Mrekf, &RunOptions::default()).unwrap();
    let base = compute_metrics(&scn, &est, 0.0).unwrap();
    let mut garbled = est.clone();
    let half = garbled.t.iter().position(|&t| t >= 1.0).unwrap();
    for k in 0..half {
        garbled.states[k] = [1e6; 14];
        garbled.outputs[k] = [-1e6; 6];
        garbled.cov_trace[k] = 1e9;
    }
    let again = compute_metrics(&scn, &garbled, 0.0).unwrap();
    assert_eq!(base.nrmse_x, again.nrmse_x);
    assert_eq!(base.nrmse_y, again.nrmse_y);
    assert_eq!(base.boulkroune_summands, again.boulkroune_summands);
}

#[test]
fn single_tuning_sweep_and_resume_skip() {
    let scn = Scenario::generate(&ScenarioConfig { days: 1.0, ..ScenarioConfig::default() }).unwrap();
    let s = TuningSample { q: [0.1; 14], k_r: 1.0 };
    let out = grid_search(&scn, &[s], Duration::from_secs(30), 1, &HashSet::new(), &|_| {});
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].metrics.status, RunStatus::Ok);
    let skip: HashSet<usize> = [0].into();
    assert!(grid_search(&scn, &[s], Duration::from_secs(30), 1, &skip, &|_| {}).is_empty());
}

#[test]
fn tiny_cutoff_records_timeout() {
    let scn = Scenario::generate(&ScenarioConfig { days: 1.0, ..ScenarioConfig::default() }).unwrap();
    let s = TuningSample { q: [0.1; 14], k_r: 1.0 };
    let out = grid_search(&scn, &[s], Duration::from_nanos(1), 1, &HashSet::new(), &|_| {});
    assert_eq!(out[0].metrics.status, RunStatus::Timeout);
}

proptest! {
    #[test]
    fn every_stratum_holds_one_point(n in 1usize..60, dims in 1usize..6, seed in any::<u64>()) {
        let pts = lhs_unit(n, dims, 1e-2, 1e2, seed);
        for d in 0..dims {
            let mut seen = vec![0usize; n];
            for p in &pts {
                let u = (p[d].log10() + 2.0) / 4.0;
                seen[((u * n as f64) as usize).min(n - 1)] += 1;
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
