//! Stiff integration of the process model and of the joint mean/covariance system.
//!
//! The integrator is the two-stage linearly implicit ROS2 scheme with
//! `gamma = 1 + 1/sqrt(2)`. It is L-stable and keeps second order for any
//! approximation of the Jacobian. Step sizes are controlled with the embedded
//! first-order solution; accepted steps are joined by cubic Hermite
//! interpolation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::symmetrize;

const GAMMA: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("more than {steps} steps before reaching t = {t_end}")]
    TooManySteps { steps: usize, t_end: f64 },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Piecewise-constant input seen by the right-hand side.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    /// Volumetric feed rate (m^3/d for the digester model).
    pub feed_rate: f64,
    /// Influent concentrations, one per state (may be empty for models without feed).
    pub influent: &'a [f64],
}

impl Input<'static> {
    /// No feed and no influent.
    pub const NONE: Input<'static> = Input { feed_rate: 0.0, influent: &[] };
}

/// Autonomous right-hand side `x' = f(x, u)` with an optional analytic Jacobian.
pub trait OdeModel: Sync {
    fn dim(&self) -> usize;

    fn rhs(&self, x: &[f64], input: &Input<'_>, dx: &mut [f64]);

    /// `df/dx` written into `jac` (`dim x dim`). Defaults to central differences.
    fn jacobian(&self, x: &[f64], input: &Input<'_>, jac: &mut DMatrix<f64>) {
        finite_difference_jacobian(self, x, input, jac);
    }
}

/// Central-difference Jacobian with step `1e-6 * max(|x_i|, 1)`.
pub fn finite_difference_jacobian<M: OdeModel + ?Sized>(
    model: &M,
    x: &[f64],
    input: &Input<'_>,
    jac: &mut DMatrix<f64>,
) {
    let n = model.dim();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        model.rhs(&xp, input, &mut fp);
        xp[j] = x[j] - h;
        model.rhs(&xp, input, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

/// Linear test system `x' = A x + b u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOde {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearOde {
    pub fn new(a: DMatrix<f64>) -> Self {
        let n = a.nrows();
        Self { a, b: DVector::zeros(n) }
    }

    pub fn with_input(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self { a, b }
    }
}

impl OdeModel for LinearOde {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn rhs(&self, x: &[f64], input: &Input<'_>, dx: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = self.b[i] * input.feed_rate;
            for j in 0..n {
                s += self.a[(i, j)] * x[j];
            }
            dx[i] = s;
        }
    }

    fn jacobian(&self, _x: &[f64], _input: &Input<'_>, jac: &mut DMatrix<f64>) {
        jac.copy_from(&self.a);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rtol: 1e-4, atol: 1e-7, initial_step: 1e-4, min_step: 1e-13, max_steps: 500_000 }
    }
}

impl SolverOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }
}

/// One interval of constant feed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedSegment {
    pub start: f64,
    pub end: f64,
    pub feed_rate: f64,
}

/// Contiguous, non-overlapping feed intervals sharing one influent composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSchedule {
    pub segments: Vec<FeedSegment>,
    pub influent: Vec<f64>,
}

impl InputSchedule {
    pub fn new(segments: Vec<FeedSegment>, influent: Vec<f64>) -> Result<Self, OdeError> {
        if segments.is_empty() {
            return Err(OdeError::Invalid("schedule has no segments".into()));
        }
        for (i, s) in segments.iter().enumerate() {
            if !(s.start < s.end) || !s.feed_rate.is_finite() || s.feed_rate < 0.0 {
                return Err(OdeError::Invalid(format!("segment {i} is malformed: {s:?}")));
            }
            if i > 0 && (segments[i - 1].end - s.start).abs() > 1e-9 {
                return Err(OdeError::Invalid(format!("segment {i} does not start where segment {} ends", i - 1)));
            }
        }
        Ok(Self { segments, influent })
    }

    pub fn constant(t0: f64, t1: f64, feed_rate: f64, influent: Vec<f64>) -> Self {
        Self { segments: vec![FeedSegment { start: t0, end: t1, feed_rate }], influent }
    }

    pub fn start(&self) -> f64 {
        self.segments[0].start
    }

    pub fn end(&self) -> f64 {
        self.segments[self.segments.len() - 1].end
    }

    /// Feed rate in force at `t` (segments are closed on the left).
    pub fn rate_at(&self, t: f64) -> Option<f64> {
        if t < self.start() || t > self.end() {
            return None;
        }
        let i = self.segments.partition_point(|s| s.end <= t);
        Some(self.segments[i.min(self.segments.len() - 1)].feed_rate)
    }

    /// The constant-feed pieces `(a, b, rate)` covering `[t0, t1]`.
    pub fn pieces(&self, t0: f64, t1: f64) -> Result<Vec<(f64, f64, f64)>, OdeError> {
        let eps = 1e-9;
        if t0 < self.start() - eps || t1 > self.end() + eps {
            return Err(OdeError::Invalid(format!(
                "interval [{t0}, {t1}] is outside the schedule [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let first = self.segments.partition_point(|s| s.end <= t0 + 1e-12);
        let mut out = Vec::new();
        for s in &self.segments[first.min(self.segments.len())..] {
            if s.start >= t1 - 1e-12 {
                break;
            }
            let a = s.start.max(t0);
            let b = s.end.min(t1);
            if b - a > 1e-12 {
                out.push((a, b, s.feed_rate));
            }
        }
        if let Some(last) = out.last_mut() {
            last.1 = t1;
        }
        if let Some(first) = out.first_mut() {
            first.0 = t0;
        }
        Ok(out)
    }

    /// Total fed volume over the schedule.
    pub fn total_volume(&self) -> f64 {
        self.segments.iter().map(|s| s.feed_rate * (s.end - s.start)).sum()
    }

    /// Time-averaged feed rate over the schedule.
    pub fn mean_rate(&self) -> f64 {
        self.total_volume() / (self.end() - self.start())
    }
}

/// Initial-value problem on one interval of constant input.
pub struct IvpProblem<'a, M: OdeModel + ?Sized> {
    pub model: &'a M,
    pub input: Input<'a>,
    pub t0: f64,
    pub t1: f64,
    pub x0: &'a [f64],
    pub options: SolverOptions,
    pub nonnegative: Option<&'a [bool]>,
}

/// Accepted steps of one integration with Hermite dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub dy: Vec<DVector<f64>>,
    nonnegative: Option<Vec<bool>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.y.last().expect("trajectory holds at least the initial point")
    }

    pub fn steps(&self) -> usize {
        self.t.len() - 1
    }

    /// Cubic Hermite interpolant at `t`, `None` outside the integrated range.
    pub fn eval(&self, t: f64) -> Option<DVector<f64>> {
        let (t0, t1) = (self.t[0], *self.t.last()?);
        let span_eps = 1e-12 * (1.0 + t1.abs());
        if t < t0 - span_eps || t > t1 + span_eps {
            return None;
        }
        let i = self.t.partition_point(|&s| s <= t).clamp(1, self.t.len().max(2) - 1);
        if self.t.len() == 1 {
            return Some(self.y[0].clone());
        }
        let mut v = hermite(self.t[i - 1], self.t[i], &self.y[i - 1], &self.y[i], &self.dy[i - 1], &self.dy[i], t);
        if let Some(mask) = &self.nonnegative {
            project(&mut v, mask);
        }
        Some(v)
    }
}

fn hermite(
    ta: f64,
    tb: f64,
    ya: &DVector<f64>,
    yb: &DVector<f64>,
    fa: &DVector<f64>,
    fb: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let h = tb - ta;
    let s = ((t - ta) / h).clamp(0.0, 1.0);
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    ya * h00 + fa * (h10 * h) + yb * h01 + fb * (h11 * h)
}

fn project(y: &mut DVector<f64>, mask: &[bool]) {
    for (v, &m) in y.iter_mut().zip(mask) {
        if m && *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Integrate one constant-input interval and keep every accepted step.
pub fn solve_ivp<M: OdeModel + ?Sized>(p: &IvpProblem<'_, M>) -> Result<Trajectory, OdeError> {
    let n = p.model.dim();
    if p.x0.len() != n {
        return Err(OdeError::Invalid(format!("x0 has length {}, model dimension is {n}", p.x0.len())));
    }
    if !(p.t1 >= p.t0) {
        return Err(OdeError::Invalid(format!("t1 = {} precedes t0 = {}", p.t1, p.t0)));
    }
    let sys = DenseSystem { model: p.model, input: p.input, mask: p.nonnegative };
    let mut traj = Trajectory {
        t: Vec::new(),
        y: Vec::new(),
        dy: Vec::new(),
        nonnegative: p.nonnegative.map(|m| m.to_vec()),
    };
    integrate(&sys, p.t0, p.t1, DVector::from_column_slice(p.x0), &p.options, None, |t, y, f| {
        traj.t.push(t);
        traj.y.push(y.clone());
        traj.dy.push(f.clone());
    })?;
    Ok(traj)
}

/// Values of a piecewise integration on an output grid.
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub final_state: DVector<f64>,
}

/// Integrate across the feed intervals of `schedule` on `[t0, t1]`, restarting
/// the solver at every discontinuity, and report the state at each grid time.
pub fn integrate_piecewise<M: OdeModel + ?Sized>(
    model: &M,
    schedule: &InputSchedule,
    x0: &[f64],
    t0: f64,
    t1: f64,
    grid: &[f64],
    options: &SolverOptions,
    nonnegative: Option<&[bool]>,
) -> Result<GridSolution, OdeError> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(OdeError::Invalid("output grid is not sorted".into()));
    }
    if let (Some(&a), Some(&b)) = (grid.first(), grid.last()) {
        if a < t0 - 1e-9 || b > t1 + 1e-9 {
            return Err(OdeError::Invalid(format!("output grid [{a}, {b}] leaves [{t0}, {t1}]")));
        }
    }
    let mut states = Vec::with_capacity(grid.len());
    let mut y = DVector::from_column_slice(x0);
    let mut gi = 0;
    while gi < grid.len() && grid[gi] <= t0 + 1e-12 {
        states.push(y.clone());
        gi += 1;
    }
    let mut hint = None;
    for (a, b, rate) in schedule.pieces(t0, t1)? {
        let input = Input { feed_rate: rate, influent: &schedule.influent };
        let sys = DenseSystem { model, input, mask: nonnegative };
        let mut prev: Option<(f64, DVector<f64>, DVector<f64>)> = None;
        let (yb, h) = integrate(&sys, a, b, y, options, hint, |t, yy, ff| {
            if let Some((tp, yp, fp)) = &prev {
                while gi < grid.len() && grid[gi] <= t + 1e-12 {
                    let mut v = hermite(*tp, t, yp, yy, fp, ff, grid[gi]);
                    if let Some(mask) = nonnegative {
                        project(&mut v, mask);
                    }
                    states.push(v);
                    gi += 1;
                }
            }
            prev = Some((t, yy.clone(), ff.clone()));
        })?;
        y = yb;
        hint = Some(h);
    }
    while gi < grid.len() {
        states.push(y.clone());
        gi += 1;
    }
    Ok(GridSolution { grid: grid.to_vec(), states, final_state: y })
}

/// Mean, covariance and cross-covariance columns carried through a time update.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `n x m` block propagated as `C' = F C` (the covariances with frozen sample states).
    pub cross: DMatrix<f64>,
}

/// Integrate `x' = f(x, u)`, `P' = F P + P F^T + Q` and `C' = F C` jointly over
/// the feed pieces of `[t0, t1]`. The mean takes adaptive ROS2 steps; on every
/// accepted step the covariance and the cross columns are mapped with the
/// step's transition matrix `Phi`, `P+ = Phi P Phi^T + h/2 (Phi Q Phi^T + Q)`
/// and `C+ = Phi C`, which keeps `P` symmetric positive semidefinite and makes
/// the step sequence independent of the cross columns.
pub fn propagate_joint<M: OdeModel + ?Sized>(
    model: &M,
    schedule: &InputSchedule,
    t0: f64,
    t1: f64,
    state: &JointState,
    q: &DMatrix<f64>,
    options: &SolverOptions,
    nonnegative: Option<&[bool]>,
) -> Result<JointState, OdeError> {
    let n = model.dim();
    let m = state.cross.ncols();
    if state.mean.len() != n || state.cov.shape() != (n, n) || q.shape() != (n, n) || (m > 0 && state.cross.nrows() != n)
    {
        return Err(OdeError::Invalid("joint state dimensions do not match the model".into()));
    }
    let mut x = state.mean.clone();
    let mut p = state.cov.clone();
    let mut c = state.cross.clone();
    let mut hint = None;
    let mut failure = None;
    for (a, b, rate) in schedule.pieces(t0, t1)? {
        let input = Input { feed_rate: rate, influent: &schedule.influent };
        let sys = DenseSystem { model, input, mask: nonnegative };
        let mut prev: Option<(f64, DVector<f64>)> = None;
        let (xb, h) = integrate(&sys, a, b, x, options, hint, |t, y, _| {
            if let Some((tp, yp)) = &prev {
                match step_transition(model, &input, yp, t - tp) {
                    Some(phi) => {
                        let h = t - tp;
                        let pq = &phi * q * phi.transpose();
                        p = &phi * &p * phi.transpose() + (pq + q) * (0.5 * h);
                        symmetrize(&mut p);
                        if m > 0 {
                            c = &phi * &c;
                        }
                    }
                    None => failure = Some(t),
                }
            }
            prev = Some((t, y.clone()));
        })?;
        if let Some(t) = failure {
            return Err(OdeError::NonFinite { t });
        }
        x = xb;
        hint = Some(h);
    }
    Ok(JointState { mean: x, cov: p, cross: c })
}

/// ROS2 stability matrix `R(h F)` for the Jacobian `F` at the start of a step:
/// the step's derivative with respect to its initial value with `F` frozen.
fn step_transition<M: OdeModel + ?Sized>(model: &M, input: &Input<'_>, y: &DVector<f64>, h: f64) -> Option<DMatrix<f64>> {
    let n = y.len();
    let mut f = DMatrix::zeros(n, n);
    model.jacobian(y.as_slice(), input, &mut f);
    let w = (DMatrix::identity(n, n) - &f * (GAMMA * h)).lu();
    let mut d1 = f.clone();
    if !w.solve_mut(&mut d1) {
        return None;
    }
    let mut d2 = &f * (DMatrix::identity(n, n) + &d1 * h) - &d1 * 2.0;
    w.solve_mut(&mut d2);
    let phi = DMatrix::identity(n, n) + d1 * (1.5 * h) + d2 * (0.5 * h);
    phi.iter().all(|v| v.is_finite()).then_some(phi)
}

trait StiffSystem {
    type Factor;
    /// Leading components that enter the error norm.
    fn controlled(&self) -> usize;
    fn rhs(&self, y: &DVector<f64>) -> DVector<f64>;
    fn factor(&self, y: &DVector<f64>, gh: f64) -> Option<Self::Factor>;
    fn solve(&self, f: &Self::Factor, b: &mut DVector<f64>);
    fn project(&self, y: &mut DVector<f64>);
}

struct DenseSystem<'a, M: OdeModel + ?Sized> {
    model: &'a M,
    input: Input<'a>,
    mask: Option<&'a [bool]>,
}

impl<M: OdeModel + ?Sized> StiffSystem for DenseSystem<'_, M> {
    type Factor = nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

    fn controlled(&self) -> usize {
        self.model.dim()
    }

    fn rhs(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut f = DVector::zeros(y.len());
        self.model.rhs(y.as_slice(), &self.input, f.as_mut_slice());
        f
    }

    fn factor(&self, y: &DVector<f64>, gh: f64) -> Option<Self::Factor> {
        let n = y.len();
        let mut j = DMatrix::zeros(n, n);
        self.model.jacobian(y.as_slice(), &self.input, &mut j);
        let a = DMatrix::identity(n, n) - j * gh;
        let lu = a.lu();
        lu.is_invertible().then_some(lu)
    }

    fn solve(&self, f: &Self::Factor, b: &mut DVector<f64>) {
        f.solve_mut(b);
    }

    fn project(&self, y: &mut DVector<f64>) {
        if let Some(mask) = self.mask {
            project(y, mask);
        }
    }
}

/// Adaptive ROS2 on `[t0, t1]`. Calls `on_step` for the initial point and for
/// every accepted step; returns the final state and the proposed next step.
fn integrate<S: StiffSystem>(
    sys: &S,
    t0: f64,
    t1: f64,
    y0: DVector<f64>,
    opts: &SolverOptions,
    hint: Option<f64>,
    mut on_step: impl FnMut(f64, &DVector<f64>, &DVector<f64>),
) -> Result<(DVector<f64>, f64), OdeError> {
    let mut y = y0;
    sys.project(&mut y);
    let mut f = sys.rhs(&y);
    if !y.iter().chain(f.iter()).all(|v| v.is_finite()) {
        return Err(OdeError::NonFinite { t: t0 });
    }
    on_step(t0, &y, &f);
    let span = t1 - t0;
    let mut h = hint.unwrap_or(opts.initial_step).max(opts.min_step);
    if span <= 0.0 {
        return Ok((y, h));
    }
    let nc = sys.controlled();
    let mut t = t0;
    let mut steps = 0usize;
    loop {
        let remaining = t1 - t;
        let last = h >= remaining * (1.0 - 1e-10) || h * 1.05 >= remaining;
        let step = if last { remaining } else { h };
        steps += 1;
        if steps > opts.max_steps {
            return Err(OdeError::TooManySteps { steps: opts.max_steps, t_end: t1 });
        }
        let Some(fac) = sys.factor(&y, GAMMA * step) else {
            h = step * 0.25;
            if h < opts.min_step {
                return Err(OdeError::StepSizeUnderflow { t, h });
            }
            continue;
        };
        let mut k1 = f.clone();
        sys.solve(&fac, &mut k1);
        let y1 = &y + &k1 * step;
        let f1 = sys.rhs(&y1);
        let mut k2 = f1 - &k1 * 2.0;
        sys.solve(&fac, &mut k2);
        let mut ynew = &y + &k1 * (1.5 * step) + &k2 * (0.5 * step);

        let mut acc = 0.0;
        let mut finite = true;
        for i in 0..nc {
            let e = 0.5 * step * (k1[i] + k2[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            let r = e / sc;
            acc += r * r;
            finite &= ynew[i].is_finite();
        }
        finite &= ynew.iter().all(|v| v.is_finite());
        let err = (acc / nc.max(1) as f64).sqrt();
        if !finite || !err.is_finite() {
            h = step * 0.25;
            if h < opts.min_step {
                return Err(OdeError::NonFinite { t });
            }
            continue;
        }
        let fac_h = if err == 0.0 { 5.0 } else { (0.9 / err.sqrt()).clamp(0.2, 5.0) };
        if err <= 1.0 {
            t = if last { t1 } else { t + step };
            sys.project(&mut ynew);
            y = ynew;
            f = sys.rhs(&y);
            if !f.iter().all(|v| v.is_finite()) {
                return Err(OdeError::NonFinite { t });
            }
            on_step(t, &y, &f);
            h = if last && step < h { h } else { step * fac_h };
            if last {
                return Ok((y, h));
            }
        } else {
            h = step * fac_h.min(0.9);
            if h < opts.min_step {
                return Err(OdeError::StepSizeUnderflow { t, h });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay;
    impl OdeModel for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, x: &[f64], _: &Input<'_>, dx: &mut [f64]) {
            dx[0] = -x[0];
        }
    }

    struct Blowup;
    impl OdeModel for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, x: &[f64], _: &Input<'_>, dx: &mut [f64]) {
            dx[0] = x[0] * x[0];
        }
    }

    /// Stiff linear pair with eigenvalues -1 and -1e6.
    fn stiff() -> LinearOde {
        LinearOde::new(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1e6, -1e6]))
    }

    fn solve1<M: OdeModel>(m: &M, x0: &[f64], t1: f64, opts: SolverOptions) -> Result<Trajectory, OdeError> {
        solve_ivp(&IvpProblem { model: m, input: Input::NONE, t0: 0.0, t1, x0, options: opts, nonnegative: None })
    }

    #[test]
    fn exponential_decay_reaches_inverse_e() {
        let tr = solve1(&Decay, &[1.0], 1.0, SolverOptions::default()).unwrap();
        assert!((tr.final_state()[0] - (-1.0f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn tightening_tolerance_reduces_error() {
        let exact = (-1.0f64).exp();
        let coarse = solve1(&Decay, &[1.0], 1.0, SolverOptions::with_tolerances(1e-4, 1e-7)).unwrap();
        let fine = solve1(&Decay, &[1.0], 1.0, SolverOptions::with_tolerances(1e-8, 1e-11)).unwrap();
        let ec = (coarse.final_state()[0] - exact).abs();
        let ef = (fine.final_state()[0] - exact).abs();
        assert!(ef < ec && ef < 1e-7, "coarse {ec:e} fine {ef:e}");
    }

    #[test]
    fn stiff_pair_needs_few_steps() {
        let tr = solve1(&stiff(), &[1.0, 0.0], 1.0, SolverOptions::default()).unwrap();
        let e = (-1.0f64).exp();
        assert!((tr.final_state()[0] - e).abs() < 1e-4);
        assert!((tr.final_state()[1] - e).abs() < 1e-3);
        assert!(tr.steps() < 1000, "took {} steps", tr.steps());
    }

    #[test]
    fn nonnegativity_is_enforced() {
        struct Drain;
        impl OdeModel for Drain {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&self, _x: &[f64], _: &Input<'_>, dx: &mut [f64]) {
                dx[0] = -1.0;
            }
        }
        let mask = [true];
        let tr = solve_ivp(&IvpProblem {
            model: &Drain,
            input: Input::NONE,
            t0: 0.0,
            t1: 2.0,
            x0: &[0.5],
            options: SolverOptions::default(),
            nonnegative: Some(&mask),
        })
        .unwrap();
        assert!(tr.y.iter().all(|y| y[0] >= 0.0));
        assert_eq!(tr.final_state()[0], 0.0);
        assert!(tr.eval(1.3).unwrap()[0] >= 0.0);
    }

    #[test]
    fn finite_time_blowup_is_reported() {
        let r = solve1(&Blowup, &[1.0], 2.0, SolverOptions::default());
        assert!(r.is_err(), "{r:?}");
    }

    #[test]
    fn dense_output_tracks_the_solution() {
        let tr = solve1(&Decay, &[1.0], 2.0, SolverOptions::with_tolerances(1e-8, 1e-12)).unwrap();
        for &t in &[0.0, 0.3, 1.1, 2.0] {
            assert!((tr.eval(t).unwrap()[0] - (-t as f64).exp()).abs() < 1e-6);
        }
        assert!(tr.eval(2.5).is_none());
    }

    #[test]
    fn piecewise_input_matches_analytic() {
        // x' = u - x with u = 1 on [0, 0.5) and u = 0 afterwards.
        let m = LinearOde::with_input(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, 1.0));
        let sched = InputSchedule::new(
            vec![
                FeedSegment { start: 0.0, end: 0.5, feed_rate: 1.0 },
                FeedSegment { start: 0.5, end: 1.0, feed_rate: 0.0 },
            ],
            vec![],
        )
        .unwrap();
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let sol = integrate_piecewise(&m, &sched, &[0.0], 0.0, 1.0, &grid, &SolverOptions::with_tolerances(1e-9, 1e-12), None)
            .unwrap();
        let exact = |t: f64| {
            if t <= 0.5 {
                1.0 - (-t).exp()
            } else {
                (1.0 - (-0.5f64).exp()) * (-(t - 0.5)).exp()
            }
        };
        for (t, x) in grid.iter().zip(&sol.states) {
            assert!((x[0] - exact(*t)).abs() < 1e-7, "t = {t}");
        }
    }

    #[test]
    fn schedule_validation() {
        let bad = InputSchedule::new(
            vec![
                FeedSegment { start: 0.0, end: 0.5, feed_rate: 1.0 },
                FeedSegment { start: 0.6, end: 1.0, feed_rate: 0.0 },
            ],
            vec![],
        );
        assert!(bad.is_err());
        let s = InputSchedule::constant(0.0, 1.0, 2.0, vec![]);
        assert!(s.pieces(0.0, 1.5).is_err());
        assert_eq!(s.rate_at(0.3), Some(2.0));
        assert!((s.mean_rate() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_riccati_matches_closed_form() {
        let a = -0.7;
        let q = 0.3;
        let p0 = 2.0;
        let model = LinearOde::new(DMatrix::from_element(1, 1, a));
        let sched = InputSchedule::constant(0.0, 1.5, 0.0, vec![]);
        let st = JointState {
            mean: DVector::from_element(1, 1.0),
            cov: DMatrix::from_element(1, 1, p0),
            cross: DMatrix::from_element(1, 1, 0.4),
        };
        let out = propagate_joint(
            &model,
            &sched,
            0.0,
            1.5,
            &st,
            &DMatrix::from_element(1, 1, q),
            &SolverOptions::with_tolerances(1e-9, 1e-12),
            None,
        )
        .unwrap();
        let t: f64 = 1.5;
        let p = (p0 + q / (2.0 * a)) * (2.0 * a * t).exp() - q / (2.0 * a);
        assert!((out.cov[(0, 0)] - p).abs() < 1e-7);
        assert!((out.mean[0] - (a * t).exp()).abs() < 1e-7);
        assert!((out.cross[(0, 0)] - 0.4 * (a * t).exp()).abs() < 1e-7);
    }

    /// Classical RK4 on the full (non-vech) matrix equations as an oracle.
    fn rk4_joint(f: &DMatrix<f64>, q: &DMatrix<f64>, p0: &DMatrix<f64>, t: f64, steps: usize) -> DMatrix<f64> {
        let h = t / steps as f64;
        let d = |p: &DMatrix<f64>| f * p + p * f.transpose() + q;
        let mut p = p0.clone();
        for _ in 0..steps {
            let k1 = d(&p);
            let k2 = d(&(&p + &k1 * (h / 2.0)));
            let k3 = d(&(&p + &k2 * (h / 2.0)));
            let k4 = d(&(&p + &k3 * h));
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        p
    }

    #[test]
    fn lyapunov_block_matches_rk4_oracle() {
        let f = DMatrix::from_row_slice(3, 3, &[-1.0, 0.5, 0.0, 0.2, -3.0, 1.0, 0.0, 0.4, -0.5]);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2, 0.05]));
        let p0 = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 2.0, -0.3, 0.1, -0.3, 0.5]);
        let model = LinearOde::new(f.clone());
        let sched = InputSchedule::constant(0.0, 2.0, 0.0, vec![]);
        let st = JointState { mean: DVector::from_vec(vec![1.0, 2.0, 3.0]), cov: p0.clone(), cross: DMatrix::zeros(3, 0) };
        let out =
            propagate_joint(&model, &sched, 0.0, 2.0, &st, &q, &SolverOptions::with_tolerances(1e-8, 1e-11), None)
                .unwrap();
        let oracle = rk4_joint(&f, &q, &p0, 2.0, 4000);
        assert!((&out.cov - &oracle).amax() < 1e-6, "{}", (&out.cov - &oracle).amax());
        assert_eq!(crate::linalg::asymmetry(&out.cov), 0.0);
    }

    #[test]
    fn cross_columns_do_not_change_the_mean_path() {
        let f = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, -50.0]);
        let model = LinearOde::new(f);
        let sched = InputSchedule::constant(0.0, 1.0, 0.0, vec![]);
        let q = DMatrix::identity(2, 2) * 0.1;
        let base = JointState { mean: DVector::from_vec(vec![1.0, 1.0]), cov: DMatrix::identity(2, 2), cross: DMatrix::zeros(2, 0) };
        let mut aug = base.clone();
        aug.cross = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 3.0, 1.0, 0.5, 2.0, 0.0, 7.0]);
        let opts = SolverOptions::default();
        let a = propagate_joint(&model, &sched, 0.0, 1.0, &base, &q, &opts, None).unwrap();
        let b = propagate_joint(&model, &sched, 0.0, 1.0, &aug, &q, &opts, None).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.cov, b.cov);
    }
}
