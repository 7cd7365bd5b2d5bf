//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod dd;

use dd::Dd;
use mrekf::adm1::{idx, Adm1, N_OUTPUTS, N_STATES, REFERENCE_STEADY_STATE};
use nalgebra::DMatrix;
use rand::Rng;

/// Totals drawn in `[0.5, 1.5]` times the reference steady state, ions at
/// acid-base equilibrium with the resulting pH.
pub fn feasible_state<R: Rng>(m: &Adm1, rng: &mut R) -> [f64; N_STATES] {
    let mut x = [0.0; N_STATES];
    for i in 0..N_STATES {
        x[i] = REFERENCE_STEADY_STATE[i] * rng.gen_range(0.5..1.5);
    }
    m.equilibrate_ions(&mut x);
    x
}

fn hydrogen_ion_dd(m: &Adm1, x: &[Dd; N_STATES]) -> Dd {
    let c = &m.c.c;
    let phi = Dd::from(m.theta.delta_s_ion) + (x[idx::S_IN] - x[idx::S_NH3]) / 17.0
        - x[idx::S_HCO3] / 44.0
        - x[idx::S_AC_ION] / 60.0;
    let root = (phi * phi + c[4]).sqrt();
    if phi.hi > 0.0 {
        Dd::from(0.5 * c[4]) / (phi + root)
    } else {
        (root - phi) * 0.5
    }
}

/// The model right-hand side re-coded in double-double arithmetic, using
/// the model's own (f64) constants.
pub fn rhs_dd(m: &Adm1, x: &[Dd; N_STATES], feed: f64, influent: &[f64]) -> [Dd; N_STATES] {
    let c = &m.c.c;
    let th = &m.theta;
    let a = &m.petersen.a;
    let s_h = hydrogen_ion_dd(m, x);
    let i_ph = Dd::from(c[3]) / (s_h.powf(c[2]) + c[3]);
    let i_in = x[idx::S_IN] / (x[idx::S_IN] + c[8]);
    let i_nh3 = Dd::from(th.k_i_nh3) / (x[idx::S_NH3] + th.k_i_nh3);
    let s_ac = x[idx::S_AC];
    let r = [
        x[idx::X_CH] * th.k_ch,
        x[idx::X_PR] * th.k_pr,
        x[idx::X_LI] * th.k_li,
        s_ac / (s_ac + th.k_s_ac) * x[idx::X_AC] * i_ph * i_in * i_nh3 * th.mu_m_ac,
        x[idx::X_BAC] * th.k_dec,
        x[idx::X_AC] * th.k_dec,
    ];
    let mut dx = [Dd::ZERO; N_STATES];
    for i in 0..9 {
        let mut xi = influent[i];
        if i == idx::S_IN {
            xi *= th.phi_in;
        }
        let mut v = (Dd::from(xi) - x[i]) * (c[1] * feed);
        for j in 0..6 {
            v = v + r[j] * a[j][i];
        }
        dx[i] = v;
    }
    dx[idx::S_CH4] = dx[idx::S_CH4] - x[idx::S_CH4] * c[5] + x[idx::S_CH4_GAS] * c[6];
    dx[idx::S_IC] = dx[idx::S_IC] - x[idx::S_IC] * c[5] + x[idx::S_HCO3] * c[5] + x[idx::S_CO2_GAS] * c[7];
    dx[idx::S_AC_ION] = (x[idx::S_AC] - x[idx::S_AC_ION]) * c[28] - x[idx::S_AC_ION] * s_h * c[9];
    dx[idx::S_HCO3] = (x[idx::S_IC] - x[idx::S_HCO3]) * c[29] - x[idx::S_HCO3] * s_h * c[10];
    dx[idx::S_NH3] = (x[idx::S_IN] - x[idx::S_NH3]) * c[30] - x[idx::S_NH3] * s_h * c[11];
    let g = x[idx::S_CH4_GAS];
    let h = x[idx::S_CO2_GAS];
    dx[idx::S_CH4_GAS] = g * g * g * c[21]
        + g * g * h * c[22]
        + g * h * h * c[23]
        + g * g * c[24]
        + g * h * c[25]
        + x[idx::S_CH4] * c[12]
        + g * c[26];
    dx[idx::S_CO2_GAS] = g * g * h * c[21]
        + g * h * h * c[22]
        + h * h * h * c[23]
        + g * h * c[24]
        + h * h * c[25]
        + (x[idx::S_IC] - x[idx::S_HCO3]) * c[12]
        + h * c[27];
    dx
}

/// The six outputs in double-double arithmetic.
pub fn outputs_dd(m: &Adm1, x: &[Dd; N_STATES]) -> [Dd; N_OUTPUTS] {
    let c = &m.c.c;
    let g = x[idx::S_CH4_GAS];
    let h = x[idx::S_CO2_GAS];
    let flow = g * g * c[13] + g * h * c[14] + h * h * c[15] + g * c[16] + h * c[17] + c[18];
    let ph = -hydrogen_ion_dd(m, x).ln() / std::f64::consts::LN_10;
    [flow, g * c[19], h * c[20], ph, x[idx::S_IN], x[idx::S_AC]]
}

/// Step for column `j`: relative 1e-3, but small enough that the charge
/// balance moves by only a fraction of the hydrogen ion concentration.
fn step(m: &Adm1, x: &[f64; N_STATES], j: usize) -> f64 {
    let base = 1e-3 * x[j].abs().max(1e-9);
    let molar = match j {
        idx::S_IN | idx::S_NH3 => 17.0,
        idx::S_HCO3 => 44.0,
        idx::S_AC_ION => 60.0,
        _ => return base,
    };
    base.min(0.01 * m.hydrogen_ion(x) * molar)
}

const STENCIL: [(f64, f64); 6] = [(-3.0, -1.0), (-2.0, 9.0), (-1.0, -45.0), (1.0, 45.0), (2.0, -9.0), (3.0, 1.0)];

/// Sixth-order central differences of `f`, evaluated in double-double.
fn stencil<const R: usize, F: Fn(&[Dd; N_STATES]) -> [Dd; R]>(m: &Adm1, x: &[f64; N_STATES], f: F) -> DMatrix<f64> {
    let xd = x.map(Dd::from);
    let mut jac = DMatrix::zeros(R, N_STATES);
    for j in 0..N_STATES {
        let h = step(m, x, j);
        let mut acc = [Dd::ZERO; R];
        for (o, w) in STENCIL {
            let mut xp = xd;
            xp[j] = xp[j] + o * h;
            let v = f(&xp);
            for i in 0..R {
                acc[i] = acc[i] + v[i] * w;
            }
        }
        for i in 0..R {
            jac[(i, j)] = (acc[i] / (60.0 * h)).to_f64();
        }
    }
    jac
}

pub fn fd_state_jacobian(m: &Adm1, x: &[f64; N_STATES], feed: f64, influent: &[f64]) -> DMatrix<f64> {
    stencil(m, x, |xp| rhs_dd(m, xp, feed, influent))
}

pub fn fd_output_jacobian(m: &Adm1, x: &[f64; N_STATES]) -> DMatrix<f64> {
    stencil(m, x, |xp| outputs_dd(m, xp))
}

/// Worst entry of the comparison `|a - f| < rel |a|` over entries with
/// `|a| > 1e-12`; entries the model treats as zero must also vanish in the
/// oracle (below 1e-12). Returns `(ratio, row, col)`; a ratio below 1 passes.
pub fn jacobian_mismatch(an: &DMatrix<f64>, fd: &DMatrix<f64>, rel: f64) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for i in 0..an.nrows() {
        for j in 0..an.ncols() {
            let (a, f) = (an[(i, j)], fd[(i, j)]);
            let ratio = if a.abs() > 1e-12 { (a - f).abs() / (rel * a.abs()) } else { f.abs() / 1e-12 };
            if ratio > worst.0 {
                worst = (ratio, i, j);
            }
        }
    }
    worst
}
