//! Running a filter on a synthetic digester scenario in scaled coordinates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adm1::{self, Adm1, N_OUTPUTS, N_STATES};
use crate::baselines::run_recalculation;
use crate::ekf::{run_ekf, FilterError, FilterSettings, GaussianBelief, RunLog};
use crate::events::MeasurementEvent;
use crate::model::{ContinuousModel, Normalization, Normalized};
use crate::multirate::run_multirate;
use crate::ode::SolverOptions;
use crate::scenario::Scenario;

/// Floor applied to the scaled prior mean before each time update.
pub const CLIP_FLOOR: f64 = 1e-3;

/// Diagonal tuning in scaled coordinates: process noise densities, an
/// amplification of the tabulated measurement variances, and the initial
/// covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tuning {
    pub q: Vec<f64>,
    pub k_r: f64,
    #[serde(default = "unit_p0")]
    pub p0: Vec<f64>,
}

fn unit_p0() -> Vec<f64> {
    vec![1.0; N_STATES]
}

impl Tuning {
    pub fn uniform(q: f64, k_r: f64) -> Self {
        Self { q: vec![q; N_STATES], k_r, p0: unit_p0() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.q.len() != N_STATES || self.p0.len() != N_STATES {
            return Err(format!("tuning needs {N_STATES} entries in q and p0"));
        }
        if self.q.iter().chain(&self.p0).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err("tuning entries of q and p0 must be finite and nonnegative".into());
        }
        if !(self.k_r > 0.0 && self.k_r.is_finite()) {
            return Err(format!("k_r = {} must be positive", self.k_r));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sample-state augmentation.
    Mrekf,
    /// Rewind and replay at every return.
    Recalc,
    /// Single-rate filter that sees laboratory values at their sample time.
    Ekf,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mrekf" => Ok(Self::Mrekf),
            "recalc" => Ok(Self::Recalc),
            "ekf" => Ok(Self::Ekf),
            _ => Err(format!("unknown method {s:?} for the digester model (mrekf, recalc, ekf)")),
        }
    }
}

pub fn adm1_scaling() -> Normalization {
    Normalization { state: adm1::STATE_SCALE.to_vec(), output: adm1::OUTPUT_SCALE.to_vec(), feed: adm1::FEED_SCALE }
}

pub type Adm1Filter = ContinuousModel<Normalized<Adm1>>;

/// The filter's process model: mismatched parameters, known feeding.
pub fn filter_model(scn: &Scenario) -> Adm1Filter {
    let inner = Normalized { inner: Adm1::with_constants(scn.theta_hat, scn.config.physical), scale: adm1_scaling() };
    let mut m = ContinuousModel::new(inner, scn.schedule.clone()).with_clip(CLIP_FLOOR);
    m.options = SolverOptions::with_tolerances(1e-4, 1e-7);
    m
}

/// Divide every measured value by its output scale.
pub fn normalize_events(events: &[MeasurementEvent], scale: &Normalization) -> Vec<MeasurementEvent> {
    events
        .iter()
        .map(|e| match e {
            MeasurementEvent::Online { t, values } => MeasurementEvent::Online {
                t: *t,
                values: values.iter().enumerate().map(|(i, v)| v.map(|v| v / scale.output[i])).collect(),
            },
            MeasurementEvent::OfflineReturn { t, id, values } => MeasurementEvent::OfflineReturn {
                t: *t,
                id: *id,
                values: values.iter().map(|&(i, v)| (i, v / scale.output[i])).collect(),
            },
            other => other.clone(),
        })
        .collect()
}

pub fn initial_belief(scn: &Scenario, tuning: &Tuning) -> GaussianBelief {
    let z = adm1_scaling().normalize_state(&scn.x0_hat_vector());
    GaussianBelief::new(z, DMatrix::from_diagonal(&DVector::from_column_slice(&tuning.p0)))
}

/// `R = k_R diag(sigma^2)` and `Q = diag(q)`, both scaled.
pub fn filter_settings(scn: &Scenario, tuning: &Tuning) -> FilterSettings {
    let scale = adm1_scaling();
    let r = DMatrix::from_fn(N_OUTPUTS, N_OUTPUTS, |i, j| {
        if i == j {
            tuning.k_r * (adm1::OUTPUT_SIGMA[i] / scale.output[i]).powi(2)
        } else {
            0.0
        }
    });
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&tuning.q));
    FilterSettings::new(0.0, scn.config.dt(), scn.config.n_steps(), q, r)
}

/// Estimates of one run in plant units.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub t: Vec<f64>,
    pub states: Vec<[f64; N_STATES]>,
    pub outputs: Vec<[f64; N_OUTPUTS]>,
    /// Trace of the scaled posterior covariance.
    pub cov_trace: Vec<f64>,
    pub log: RunLog,
}

impl Estimate {
    pub fn from_log(log: RunLog, scale: &Normalization) -> Self {
        let mut t = Vec::with_capacity(log.steps.len());
        let mut states = Vec::with_capacity(log.steps.len());
        let mut outputs = Vec::with_capacity(log.steps.len());
        let mut cov_trace = Vec::with_capacity(log.steps.len());
        for s in &log.steps {
            t.push(s.t);
            let x = scale.denormalize_state(&s.mean);
            let y = scale.denormalize_output(&s.output);
            let mut xa = [0.0; N_STATES];
            xa.copy_from_slice(x.as_slice());
            let mut ya = [0.0; N_OUTPUTS];
            ya.copy_from_slice(y.as_slice());
            states.push(xa);
            outputs.push(ya);
            cov_trace.push(s.cov.trace());
        }
        Self { t, states, outputs, cov_trace, log }
    }
}

pub struct RunOptions {
    pub deadline: Option<Instant>,
    pub check_covariance: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { deadline: None, check_covariance: false }
    }
}

/// Run `method` on the scenario's measurements.
pub fn run(scn: &Scenario, tuning: &Tuning, method: Method, opts: &RunOptions) -> Result<Estimate, FilterError> {
    tuning.validate().map_err(FilterError::Invalid)?;
    let model = filter_model(scn);
    let scale = adm1_scaling();
    let events = normalize_events(&scn.measurements.events, &scale);
    let initial = initial_belief(scn, tuning);
    let mut settings = filter_settings(scn, tuning);
    settings.deadline = opts.deadline;
    settings.check_covariance = opts.check_covariance;
    let log = match method {
        Method::Mrekf => run_multirate(&model, &initial, &events, &settings)?,
        Method::Recalc => run_recalculation(&model, &initial, &events, &settings)?,
        Method::Ekf => run_ekf(&model, &initial, &events, &settings)?,
    };
    Ok(Estimate::from_log(log, &scale))
}
