//! Synthetic plant data: a demand-driven feeding schedule, the true process
//! trajectory and noisy multi-rate measurements of it.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adm1::{self, Adm1, Params, PhysicalConstants, N_OUTPUTS, N_STATES, OUT_AC, OUT_IN};
use crate::events::{sort_events, MeasurementEvent, SignalSet};
use crate::ode::{integrate_piecewise, FeedSegment, InputSchedule, OdeError, SolverOptions};

/// Absolute initial-state perturbations scaled by `k_x`.
pub const INITIAL_ERROR: [f64; N_STATES] = [
    0.0753, 0.0007, 1.2959, 0.4334, 1.6140, 2.4212, 1.8854, 6.8336, 1.7393, 0.0752, 1.2710, 0.0274, 0.0117, 0.0357,
];

/// Online signals measured every hour.
pub const ONLINE_SIGNALS: [usize; 4] = [0, 1, 2, 3];

/// Steps per day of the measurement grid.
pub const STEPS_PER_DAY: usize = 24;

const STREAM_FEEDING: u64 = 1;
const STREAM_ONLINE: u64 = 10;
const STREAM_LAB_NOISE: u64 = 20;
const STREAM_LAB_TIME: u64 = 30;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("truth simulation failed: {0}")]
    Ode(#[from] OdeError),
}

/// Parameters of the weekly feeding pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedingConfig {
    /// Time-averaged feed rate in m^3/d.
    pub mean_rate: f64,
    /// Relative daily amount from Monday to Sunday; day 0 is a Monday.
    pub weekday_factors: [f64; 7],
    /// Hours of the day at which a pulse starts.
    pub pulse_hours: Vec<f64>,
    pub pulse_minutes: f64,
    /// Half-width of the uniform multiplicative noise on each pulse.
    pub randomization: f64,
    /// Volatile solids per m^3 of fresh feed mixture (kg/m^3).
    pub vs_density: f64,
    pub liquid_volume: f64,
}

impl Default for FeedingConfig {
    fn default() -> Self {
        Self {
            mean_rate: adm1::MEAN_FEED,
            weekday_factors: [2.0, 1.3, 1.0, 1.0, 0.9, 0.4, 0.4],
            pulse_hours: vec![5.0, 6.0, 7.0, 8.0],
            pulse_minutes: 15.0,
            randomization: 0.2,
            vs_density: 258.88,
            liquid_volume: 2000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub days: f64,
    pub delay_ac_hours: f64,
    pub delay_in_hours: f64,
    pub k_sigma: f64,
    pub k_theta: f64,
    pub k_x: f64,
    pub seed: u64,
    pub feeding: FeedingConfig,
    pub jitter_in: f64,
    pub jitter_ac: f64,
    pub sample_hour: f64,
    /// Fresh-matter shares of maize silage, grass silage and cattle manure;
    /// `None` uses the reference mixture.
    pub substrate_shares: Option<[f64; 3]>,
    /// Length of the constant-feed run that produces the initial steady state.
    pub steady_state_days: f64,
    /// True kinetic parameters of the simulated plant.
    pub params: Params,
    pub physical: PhysicalConstants,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            days: 14.0,
            delay_ac_hours: 0.0,
            delay_in_hours: 0.0,
            k_sigma: 1.0,
            k_theta: 0.2,
            k_x: 1.0,
            seed: 1,
            feeding: FeedingConfig::default(),
            jitter_in: 0.0625,
            jitter_ac: 0.1,
            sample_hour: 7.5,
            substrate_shares: None,
            steady_state_days: 500.0,
            params: Params::default(),
            physical: PhysicalConstants::default(),
        }
    }
}

impl ScenarioConfig {
    /// Delays, mismatch and initial error of row `i` (1 to 4) of the standard
    /// scenario table. Noise stays at the medium level; set `k_sigma` to vary it.
    pub fn table_row(i: usize) -> Result<Self, ScenarioError> {
        const AC: [f64; 4] = [0.0, 12.0, 24.0, 36.0];
        const IN: [f64; 4] = [0.0, 6.0, 12.0, 24.0];
        const THETA: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
        const KX: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
        if !(1..=4).contains(&i) {
            return Err(ScenarioError::Invalid(format!("scenario row {i} is not in 1..=4")));
        }
        Ok(Self {
            delay_ac_hours: AC[i - 1],
            delay_in_hours: IN[i - 1],
            k_theta: THETA[i - 1],
            k_x: KX[i - 1],
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |k: &str, v: f64, dom: &str| Err(ScenarioError::Invalid(format!("{k} = {v} must be {dom}")));
        if !(self.days > 0.0 && self.days.is_finite()) {
            return bad("days", self.days, "positive");
        }
        for (k, v) in [("delay_ac_hours", self.delay_ac_hours), ("delay_in_hours", self.delay_in_hours)] {
            if !(v >= 0.0 && v.fract() == 0.0) {
                return bad(k, v, "a nonnegative whole number of hours (AC: 0, 12, 24, 36; IN: 0, 6, 12, 24)");
            }
        }
        for (k, v, dom) in [
            ("k_sigma", self.k_sigma, "nonnegative (standard levels 0.5, 1, 2)"),
            ("k_theta", self.k_theta, "nonnegative (standard levels 0, 0.1, 0.2, 0.3)"),
            ("k_x", self.k_x, "nonnegative (standard levels 0, 0.5, 1, 2)"),
            ("jitter_in", self.jitter_in, "nonnegative"),
            ("jitter_ac", self.jitter_ac, "nonnegative"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, v, dom);
            }
        }
        if !(0.0..24.0).contains(&self.sample_hour) {
            return bad("sample_hour", self.sample_hour, "in [0, 24)");
        }
        let f = &self.feeding;
        if !(f.mean_rate > 0.0) {
            return bad("feeding.mean_rate", f.mean_rate, "positive");
        }
        if !(0.0..1.0).contains(&f.randomization) {
            return bad("feeding.randomization", f.randomization, "in [0, 1)");
        }
        if f.pulse_hours.is_empty() {
            return Err(ScenarioError::Invalid("feeding.pulse_hours must not be empty".into()));
        }
        let width = f.pulse_minutes / 60.0;
        if !(width > 0.0 && width <= 1.0) {
            return bad("feeding.pulse_minutes", f.pulse_minutes, "in (0, 60]");
        }
        let mut hours = f.pulse_hours.clone();
        hours.sort_by(f64::total_cmp);
        if hours.windows(2).any(|w| w[1] - w[0] < width) || hours[0] < 0.0 || hours[hours.len() - 1] + width > 24.0 {
            return Err(ScenarioError::Invalid("feeding.pulse_hours overlap or leave the day".into()));
        }
        if f.weekday_factors.iter().any(|v| !(*v >= 0.0)) || f.weekday_factors.iter().sum::<f64>() <= 0.0 {
            return Err(ScenarioError::Invalid("feeding.weekday_factors must be nonnegative and not all zero".into()));
        }
        if !(self.steady_state_days > 0.0) {
            return bad("steady_state_days", self.steady_state_days, "positive");
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.days * STEPS_PER_DAY as f64).round() as usize
    }

    pub fn dt(&self) -> f64 {
        1.0 / STEPS_PER_DAY as f64
    }

    pub fn influent(&self) -> Result<[f64; N_STATES], ScenarioError> {
        match self.substrate_shares {
            None => Ok(adm1::influent::reference()),
            Some(s) => adm1::influent::mix(s).map_err(ScenarioError::Invalid),
        }
    }

    pub fn truth_model(&self) -> Adm1 {
        Adm1::with_constants(self.params, self.physical)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// Pulse feeding over `[0, days]`, rescaled so the time-averaged rate equals
/// `mean_rate`.
pub fn generate_feeding(cfg: &ScenarioConfig, influent: &[f64]) -> Result<InputSchedule, ScenarioError> {
    cfg.validate()?;
    let f = &cfg.feeding;
    let mut rng = cfg.rng(STREAM_FEEDING);
    let width = f.pulse_minutes / 60.0 / 24.0;
    let mut hours = f.pulse_hours.clone();
    hours.sort_by(f64::total_cmp);
    let mut pulses = Vec::new();
    let n_days = cfg.days.ceil() as usize;
    for d in 0..n_days {
        let factor = f.weekday_factors[d % 7];
        for &h in &hours {
            let noise = 1.0 + f.randomization * (2.0 * rng.gen::<f64>() - 1.0);
            let start = d as f64 + h / 24.0;
            if start + width <= cfg.days + 1e-12 {
                pulses.push((start, factor * noise));
            }
        }
    }
    let volume: f64 = pulses.iter().map(|p| p.1).sum();
    if volume <= 0.0 {
        return Err(ScenarioError::Invalid("feeding pattern has no volume within the horizon".into()));
    }
    let scale = f.mean_rate * cfg.days / volume;
    let mut segments = Vec::with_capacity(2 * pulses.len() + 1);
    let mut t = 0.0;
    for (start, amount) in pulses {
        if start > t {
            segments.push(FeedSegment { start: t, end: start, feed_rate: 0.0 });
        }
        segments.push(FeedSegment { start, end: start + width, feed_rate: amount * scale / width });
        t = start + width;
    }
    if t < cfg.days {
        segments.push(FeedSegment { start: t, end: cfg.days, feed_rate: 0.0 });
    }
    Ok(InputSchedule::new(segments, influent.to_vec())?)
}

/// Daily fed volume (m^3) and organic loading rate (kg VS/m^3/d) per day.
pub fn daily_loading(schedule: &InputSchedule, feeding: &FeedingConfig) -> Vec<(f64, f64)> {
    let n = schedule.end().ceil() as usize;
    let mut vol = vec![0.0; n];
    for s in &schedule.segments {
        let d = (s.start.floor() as usize).min(n.saturating_sub(1));
        vol[d] += s.feed_rate * (s.end - s.start);
    }
    vol.into_iter().map(|v| (v, v * feeding.vs_density / feeding.liquid_volume)).collect()
}

/// True states and outputs on the hourly grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub t: Vec<f64>,
    pub states: Vec<[f64; N_STATES]>,
    pub outputs: Vec<[f64; N_OUTPUTS]>,
}

/// Integrate the plant from `x0` under `schedule` and sample every grid step.
pub fn simulate_truth(
    model: &Adm1,
    schedule: &InputSchedule,
    x0: &[f64],
    n_steps: usize,
    dt: f64,
) -> Result<Truth, ScenarioError> {
    let grid: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
    let opts = SolverOptions::with_tolerances(1e-8, 1e-10);
    let mask = [true; N_STATES];
    let t1 = grid[n_steps];
    let sol = integrate_piecewise(model, schedule, x0, 0.0, t1, &grid, &opts, Some(&mask))?;
    let mut states = Vec::with_capacity(grid.len());
    let mut outputs = Vec::with_capacity(grid.len());
    for x in &sol.states {
        let mut s = [0.0; N_STATES];
        s.copy_from_slice(x.as_slice());
        outputs.push(model.outputs(&s));
        states.push(s);
    }
    Ok(Truth { t: grid, states, outputs })
}

/// A laboratory sample with its result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabSample {
    pub id: u64,
    pub signal: usize,
    pub sample_step: usize,
    pub return_step: usize,
    pub value: f64,
}

/// Online readings and laboratory samples of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub events: Vec<MeasurementEvent>,
    pub samples: Vec<LabSample>,
}

impl Measurements {
    /// Rebuild the sample list from drawn and returned events on a grid of
    /// spacing `dt`. Returns without a drawn sample are an error.
    pub fn from_events(events: Vec<MeasurementEvent>, dt: f64) -> Result<Self, ScenarioError> {
        let mut drawn = std::collections::HashMap::new();
        let mut samples = Vec::new();
        let step = |t: f64| crate::events::grid_index(t, 0.0, dt).ok_or_else(|| ScenarioError::Invalid(format!("event at t = {t} is off the grid")));
        for ev in &events {
            if let MeasurementEvent::SampleDrawn { t, id, .. } = ev {
                drawn.insert(*id, step(*t)?);
            }
        }
        for ev in &events {
            if let MeasurementEvent::OfflineReturn { t, id, values } = ev {
                let sample_step = *drawn
                    .get(id)
                    .ok_or_else(|| ScenarioError::Invalid(format!("sample {id} returns at t = {t} but was never drawn")))?;
                let return_step = step(*t)?;
                if return_step < sample_step {
                    return Err(ScenarioError::Invalid(format!("sample {id} returns at t = {t} before it is drawn")));
                }
                for &(signal, value) in values {
                    samples.push(LabSample { id: *id, signal, sample_step, return_step, value });
                }
            }
        }
        Ok(Self { events, samples })
    }
}

/// Noisy online readings every step after the first and one laboratory
/// sample per day for each offline signal.
pub fn synthesize_measurements(truth: &Truth, cfg: &ScenarioConfig) -> Result<Measurements, ScenarioError> {
    cfg.validate()?;
    let n_steps = truth.t.len() - 1;
    let dt = cfg.dt();
    let sigma = adm1::OUTPUT_SIGMA;
    let mut online_rng: Vec<ChaCha8Rng> = ONLINE_SIGNALS.iter().map(|&i| cfg.rng(STREAM_ONLINE + i as u64)).collect();
    let mut events = Vec::new();
    for k in 1..=n_steps {
        let mut values = vec![None; N_OUTPUTS];
        for (j, &i) in ONLINE_SIGNALS.iter().enumerate() {
            let e: f64 = online_rng[j].sample(StandardNormal);
            values[i] = Some(truth.outputs[k][i] + cfg.k_sigma * sigma[i] * e);
        }
        events.push(MeasurementEvent::Online { t: truth.t[k], values });
    }

    // IN is drawn first so that it keeps its step when both land together.
    let labs = [(OUT_IN, cfg.jitter_in, cfg.delay_in_hours), (OUT_AC, cfg.jitter_ac, cfg.delay_ac_hours)];
    let mut taken = std::collections::HashSet::new();
    let mut samples = Vec::new();
    let mut next_id = 1u64;
    let n_days = cfg.days.ceil() as usize;
    let mut draws = Vec::new();
    for (signal, jitter, delay) in labs {
        let mut time_rng = cfg.rng(STREAM_LAB_TIME + signal as u64);
        let mut noise_rng = cfg.rng(STREAM_LAB_NOISE + signal as u64);
        for d in 0..n_days {
            let u: f64 = time_rng.gen();
            let e: f64 = noise_rng.sample(StandardNormal);
            let t = d as f64 + cfg.sample_hour / 24.0 + jitter * (2.0 * u - 1.0);
            draws.push((d, signal, t, e, delay));
        }
    }
    draws.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.total_cmp(&b.2)).then(a.1.cmp(&b.1)));
    for (_, signal, t, e, delay) in draws {
        let mut step = ((t / dt) - 1e-9).ceil().max(1.0) as usize;
        while taken.contains(&step) {
            step += 1;
        }
        let ret = step + delay as usize * STEPS_PER_DAY / 24;
        if ret > n_steps {
            continue;
        }
        taken.insert(step);
        let value = truth.outputs[step][signal] + cfg.k_sigma * sigma[signal] * e;
        samples.push(LabSample { id: next_id, signal, sample_step: step, return_step: ret, value });
        next_id += 1;
    }
    for s in &samples {
        events.push(MeasurementEvent::SampleDrawn {
            t: truth.t[s.sample_step],
            id: s.id,
            signals: SignalSet::single(s.signal),
        });
        events.push(MeasurementEvent::OfflineReturn { t: truth.t[s.return_step], id: s.id, values: vec![(s.signal, s.value)] });
    }
    sort_events(&mut events);
    Ok(Measurements { events, samples })
}

/// Multiply every model parameter by `1 + k_theta`.
pub fn perturb_params(theta: &Params, k_theta: f64) -> Params {
    Params::from_array(theta.to_array().map(|v| v * (1.0 + k_theta)))
}

/// `x0 + k_x dx`, clipped at zero.
pub fn perturb_initial(x0: &[f64], dx: &[f64], k_x: f64) -> Vec<f64> {
    x0.iter().zip(dx).map(|(a, b)| (a + k_x * b).max(0.0)).collect()
}

/// Hold the most recent returned value; `initial` before the first return.
/// `returns` are `(time, value)` pairs in any order.
pub fn zoh_forecast(returns: &[(f64, f64)], grid: &[f64], initial: f64) -> Vec<f64> {
    let mut r = returns.to_vec();
    r.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(grid.len());
    let mut j = 0;
    let mut held = initial;
    for &t in grid {
        while j < r.len() && r[j].0 <= t + 1e-9 {
            held = r[j].1;
            j += 1;
        }
        out.push(held);
    }
    out
}

/// Everything one filter experiment needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub influent: [f64; N_STATES],
    pub schedule: InputSchedule,
    pub truth_model: Adm1,
    pub x0: [f64; N_STATES],
    pub truth: Truth,
    pub measurements: Measurements,
    /// Parameters the filter believes in.
    pub theta_hat: Params,
    pub x0_hat: Vec<f64>,
}

impl Scenario {
    pub fn generate(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let influent = cfg.influent()?;
        let truth_model = cfg.truth_model();
        let ss = truth_model.steady_state(
            cfg.feeding.mean_rate,
            &influent,
            &adm1::STEADY_STATE_START,
            cfg.steady_state_days,
            1e-3,
        )?;
        let mut x0 = [0.0; N_STATES];
        x0.copy_from_slice(ss.state.as_slice());
        Self::from_initial_state(cfg, x0)
    }

    /// Like [`Scenario::generate`] but starting the plant from a given state.
    pub fn from_initial_state(cfg: &ScenarioConfig, x0: [f64; N_STATES]) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let influent = cfg.influent()?;
        let truth_model = cfg.truth_model();
        let schedule = generate_feeding(cfg, &influent)?;
        let truth = simulate_truth(&truth_model, &schedule, &x0, cfg.n_steps(), cfg.dt())?;
        let measurements = synthesize_measurements(&truth, cfg)?;
        let theta_hat = perturb_params(&truth_model.theta, cfg.k_theta);
        let x0_hat = perturb_initial(&x0, &INITIAL_ERROR, cfg.k_x);
        Ok(Self { config: cfg.clone(), influent, schedule, truth_model, x0, truth, measurements, theta_hat, x0_hat })
    }

    pub fn x0_hat_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0_hat)
    }
}
