//! Process models as the filters see them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ekf::FilterError;
use crate::linalg::symmetrize;
use crate::ode::{propagate_joint, Input, InputSchedule, JointState, OdeModel, SolverOptions};

/// An ODE model with an output map.
pub trait ObservedModel: OdeModel {
    fn n_outputs(&self) -> usize;
    fn output(&self, x: &[f64], y: &mut [f64]);
    fn output_jacobian(&self, x: &[f64], h: &mut DMatrix<f64>);
}

/// Hooks a filter needs: output map, its Jacobian, and a time update that
/// carries the mean, the covariance and the cross-covariance columns of
/// frozen sample states.
pub trait FilterModel: Sync {
    fn n_states(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn output(&self, x: &DVector<f64>) -> DVector<f64>;
    fn output_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn propagate(&self, t0: f64, t1: f64, state: &mut JointState, q: &DMatrix<f64>) -> Result<(), FilterError>;

    /// Lower bound applied to the mean before each time update.
    fn clip_floor(&self) -> Option<f64> {
        None
    }
}

/// Continuous-discrete wrapper: integrates the model and its covariance
/// between grid times under a known feed schedule.
#[derive(Debug, Clone)]
pub struct ContinuousModel<M> {
    pub model: M,
    pub schedule: InputSchedule,
    pub options: SolverOptions,
    pub nonnegative: bool,
    pub clip: Option<f64>,
}

impl<M: ObservedModel> ContinuousModel<M> {
    pub fn new(model: M, schedule: InputSchedule) -> Self {
        Self { model, schedule, options: SolverOptions::default(), nonnegative: true, clip: None }
    }

    pub fn with_clip(mut self, floor: f64) -> Self {
        self.clip = Some(floor);
        self
    }
}

impl<M: ObservedModel> FilterModel for ContinuousModel<M> {
    fn n_states(&self) -> usize {
        self.model.dim()
    }

    fn n_outputs(&self) -> usize {
        self.model.n_outputs()
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.model.n_outputs());
        self.model.output(x.as_slice(), y.as_mut_slice());
        y
    }

    fn output_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.model.n_outputs(), self.model.dim());
        self.model.output_jacobian(x.as_slice(), &mut h);
        h
    }

    fn propagate(&self, t0: f64, t1: f64, state: &mut JointState, q: &DMatrix<f64>) -> Result<(), FilterError> {
        let mask = vec![self.nonnegative; self.model.dim()];
        let out = propagate_joint(&self.model, &self.schedule, t0, t1, state, q, &self.options, Some(&mask))
            .map_err(|source| FilterError::Integration { t0, t1, source })?;
        *state = out;
        Ok(())
    }

    fn clip_floor(&self) -> Option<f64> {
        self.clip
    }
}

/// Per-component scalings so that the filter works on quantities of order one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub state: Vec<f64>,
    pub output: Vec<f64>,
    pub feed: f64,
}

impl Normalization {
    pub fn identity(n: usize, q: usize) -> Self {
        Self { state: vec![1.0; n], output: vec![1.0; q], feed: 1.0 }
    }

    pub fn normalize_state(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i] / self.state[i])
    }

    pub fn denormalize_state(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i] * self.state[i])
    }

    pub fn normalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |i, _| y[i] / self.output[i])
    }

    pub fn denormalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |i, _| y[i] * self.output[i])
    }

    /// `T^-1 P T^-1` for a state covariance.
    pub fn normalize_state_cov(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| p[(i, j)] / (self.state[i] * self.state[j]))
    }

    pub fn denormalize_state_cov(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| p[(i, j)] * self.state[i] * self.state[j])
    }

    pub fn normalize_output_cov(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| r[(i, j)] / (self.output[i] * self.output[j]))
    }
}

/// A model expressed in scaled coordinates `x = T_x z`, `y = T_y w`.
#[derive(Debug, Clone)]
pub struct Normalized<M> {
    pub inner: M,
    pub scale: Normalization,
}

impl<M: ObservedModel> OdeModel for Normalized<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn rhs(&self, z: &[f64], input: &Input<'_>, dz: &mut [f64]) {
        let tx = &self.scale.state;
        let x: Vec<f64> = z.iter().zip(tx).map(|(a, b)| a * b).collect();
        self.inner.rhs(&x, input, dz);
        for (v, s) in dz.iter_mut().zip(tx) {
            *v /= s;
        }
    }

    fn jacobian(&self, z: &[f64], input: &Input<'_>, jac: &mut DMatrix<f64>) {
        let tx = &self.scale.state;
        let x: Vec<f64> = z.iter().zip(tx).map(|(a, b)| a * b).collect();
        self.inner.jacobian(&x, input, jac);
        let n = tx.len();
        for i in 0..n {
            for j in 0..n {
                jac[(i, j)] *= tx[j] / tx[i];
            }
        }
    }
}

impl<M: ObservedModel> ObservedModel for Normalized<M> {
    fn n_outputs(&self) -> usize {
        self.inner.n_outputs()
    }

    fn output(&self, z: &[f64], w: &mut [f64]) {
        let x: Vec<f64> = z.iter().zip(&self.scale.state).map(|(a, b)| a * b).collect();
        self.inner.output(&x, w);
        for (v, s) in w.iter_mut().zip(&self.scale.output) {
            *v /= s;
        }
    }

    fn output_jacobian(&self, z: &[f64], h: &mut DMatrix<f64>) {
        let tx = &self.scale.state;
        let ty = &self.scale.output;
        let x: Vec<f64> = z.iter().zip(tx).map(|(a, b)| a * b).collect();
        self.inner.output_jacobian(&x, h);
        for i in 0..ty.len() {
            for j in 0..tx.len() {
                h[(i, j)] *= tx[j] / ty[i];
            }
        }
    }
}

/// Discrete linear time-invariant system `x+ = A x + B u + w`, `y = C x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Inputs `u_k` applied on the step from `k` to `k + 1`; missing entries are zero.
    pub inputs: Vec<DVector<f64>>,
    /// Grid spacing in days.
    pub dt: f64,
}

impl LinearSystem {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    fn input(&self, k: usize) -> DVector<f64> {
        self.inputs.get(k).cloned().unwrap_or_else(|| DVector::zeros(self.b.ncols()))
    }

    /// One step of the mean only.
    pub fn step_mean(&self, x: &DVector<f64>, k: usize) -> DVector<f64> {
        let mut out = &self.a * x;
        if self.b.ncols() > 0 {
            out += &self.b * self.input(k);
        }
        out
    }
}

impl FilterModel for LinearSystem {
    fn n_states(&self) -> usize {
        self.a.nrows()
    }

    fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    fn output_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.c.clone()
    }

    fn propagate(&self, t0: f64, t1: f64, state: &mut JointState, q: &DMatrix<f64>) -> Result<(), FilterError> {
        let k0 = (t0 / self.dt).round();
        let steps = ((t1 - t0) / self.dt).round();
        if (steps * self.dt - (t1 - t0)).abs() > 1e-9 * self.dt.max(1.0) || steps < 0.0 {
            return Err(FilterError::Invalid(format!("[{t0}, {t1}] is not a whole number of steps of {}", self.dt)));
        }
        for s in 0..steps as usize {
            let k = k0 as usize + s;
            state.mean = self.step_mean(&state.mean, k);
            state.cov = &self.a * &state.cov * self.a.transpose() + q;
            symmetrize(&mut state.cov);
            if state.cross.ncols() > 0 {
                state.cross = &self.a * &state.cross;
            }
        }
        Ok(())
    }
}

/// JSON layout of a [`LinearSystem`] with row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSystemFile {
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub inputs: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub dt: f64,
    pub x0: Vec<f64>,
    pub p0: Vec<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>], ncols: Option<usize>) -> Result<DMatrix<f64>, String> {
    let nr = rows.len();
    let nc = ncols.unwrap_or_else(|| rows.first().map_or(0, |r| r.len()));
    if rows.iter().any(|r| r.len() != nc) {
        return Err(format!("{name}: rows have unequal length"));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

impl LinearSystemFile {
    pub fn into_parts(self) -> Result<(LinearSystem, DVector<f64>, DMatrix<f64>), String> {
        let a = rows_to_matrix("a", &self.a, None)?;
        let n = a.nrows();
        if a.ncols() != n {
            return Err("a: must be square".into());
        }
        let b = if self.b.is_empty() { DMatrix::zeros(n, 0) } else { rows_to_matrix("b", &self.b, None)? };
        let c = rows_to_matrix("c", &self.c, None)?;
        let q = rows_to_matrix("q", &self.q, None)?;
        let r = rows_to_matrix("r", &self.r, None)?;
        let p0 = rows_to_matrix("p0", &self.p0, None)?;
        if b.nrows() != n || c.ncols() != n || q.shape() != (n, n) || p0.shape() != (n, n) || self.x0.len() != n {
            return Err("linear system blocks have inconsistent dimensions".into());
        }
        if r.shape() != (c.nrows(), c.nrows()) {
            return Err("r: must be square with one row per output".into());
        }
        let inputs = self.inputs.into_iter().map(DVector::from_vec).collect();
        Ok((LinearSystem { a, b, c, q, r, inputs, dt: self.dt }, DVector::from_vec(self.x0), p0))
    }

    pub fn from_parts(sys: &LinearSystem, x0: &DVector<f64>, p0: &DMatrix<f64>) -> Self {
        Self {
            a: matrix_to_rows(&sys.a),
            b: matrix_to_rows(&sys.b),
            c: matrix_to_rows(&sys.c),
            q: matrix_to_rows(&sys.q),
            r: matrix_to_rows(&sys.r),
            inputs: sys.inputs.iter().map(|u| u.as_slice().to_vec()).collect(),
            dt: sys.dt,
            x0: x0.as_slice().to_vec(),
            p0: matrix_to_rows(p0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adm1::{self, Adm1};

    #[test]
    fn normalized_jacobian_is_similarity_transform() {
        let scale = Normalization {
            state: adm1::STATE_SCALE.to_vec(),
            output: adm1::OUTPUT_SCALE.to_vec(),
            feed: adm1::FEED_SCALE,
        };
        let m = Normalized { inner: Adm1::default(), scale: scale.clone() };
        let xi = adm1::influent::reference();
        let input = Input { feed_rate: 20.0, influent: &xi };
        let x = DVector::from_row_slice(&adm1::REFERENCE_STEADY_STATE);
        let z = scale.normalize_state(&x);
        let mut jz = DMatrix::zeros(14, 14);
        m.jacobian(z.as_slice(), &input, &mut jz);
        let mut jx = DMatrix::zeros(14, 14);
        m.inner.jacobian(x.as_slice(), &input, &mut jx);
        let t = DMatrix::from_diagonal(&DVector::from_row_slice(&scale.state));
        let tinv = t.clone().try_inverse().unwrap();
        let expected = &tinv * jx * &t;
        assert!((&jz - &expected).amax() <= 1e-9 * expected.amax());

        let mut dz = vec![0.0; 14];
        m.rhs(z.as_slice(), &input, &mut dz);
        let mut dx = vec![0.0; 14];
        m.inner.rhs(x.as_slice(), &input, &mut dx);
        for i in 0..14 {
            assert!((dz[i] * scale.state[i] - dx[i]).abs() <= 1e-12 * dx[i].abs().max(1.0));
        }
    }

    #[test]
    fn linear_system_file_roundtrip() {
        let sys = LinearSystem {
            a: DMatrix::identity(2, 2),
            b: DMatrix::zeros(2, 0),
            c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            inputs: vec![],
            dt: 1.0,
        };
        let f = LinearSystemFile::from_parts(&sys, &DVector::zeros(2), &DMatrix::identity(2, 2));
        let (back, _, _) = f.into_parts().unwrap();
        assert_eq!(back, sys);
    }
}
