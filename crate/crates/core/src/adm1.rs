//! Reduced anaerobic digestion model with fourteen states (ADM1-R3 with
//! dissociation and gas-phase states).
//!
//! State order (kg/m^3): `S_ac, S_ch4, S_IC, S_IN, X_ch, X_pr, X_li, X_bac,
//! X_ac, S_ac-, S_hco3-, S_nh3, S_ch4,gas, S_co2,gas`.
//! Output order: gas flow (m^3/d), methane and carbon dioxide partial pressure
//! (bar), pH, `S_IN`, `S_ac`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::ObservedModel;
use crate::ode::{integrate_piecewise, Input, InputSchedule, OdeError, OdeModel, SolverOptions};

pub const N_STATES: usize = 14;
pub const N_OUTPUTS: usize = 6;
/// Number of liquid components that are convected with the feed.
const N_LIQUID: usize = 9;

pub const STATE_NAMES: [&str; N_STATES] = [
    "S_ac", "S_ch4", "S_IC", "S_IN", "X_ch", "X_pr", "X_li", "X_bac", "X_ac", "S_ac_ion", "S_hco3_ion", "S_nh3",
    "S_ch4_gas", "S_co2_gas",
];
pub const OUTPUT_NAMES: [&str; N_OUTPUTS] = ["V_gas", "p_ch4", "p_co2", "pH", "S_IN", "S_ac"];

pub mod idx {
    pub const S_AC: usize = 0;
    pub const S_CH4: usize = 1;
    pub const S_IC: usize = 2;
    pub const S_IN: usize = 3;
    pub const X_CH: usize = 4;
    pub const X_PR: usize = 5;
    pub const X_LI: usize = 6;
    pub const X_BAC: usize = 7;
    pub const X_AC: usize = 8;
    pub const S_AC_ION: usize = 9;
    pub const S_HCO3: usize = 10;
    pub const S_NH3: usize = 11;
    pub const S_CH4_GAS: usize = 12;
    pub const S_CO2_GAS: usize = 13;
}

/// Output index of the ammonium nitrogen signal.
pub const OUT_IN: usize = 4;
/// Output index of the acetic acid signal.
pub const OUT_AC: usize = 5;

/// Kinetic and balance parameters that the filter may get wrong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub k_ch: f64,
    pub k_pr: f64,
    pub k_li: f64,
    pub k_dec: f64,
    pub mu_m_ac: f64,
    #[serde(rename = "K_S_ac")]
    pub k_s_ac: f64,
    #[serde(rename = "K_I_nh3")]
    pub k_i_nh3: f64,
    #[serde(rename = "Delta_S_ion")]
    pub delta_s_ion: f64,
    #[serde(rename = "phi_IN")]
    pub phi_in: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            k_ch: 1.25,
            k_pr: 0.20,
            k_li: 0.10,
            k_dec: 0.020,
            mu_m_ac: 0.40,
            k_s_ac: 0.14,
            k_i_nh3: 0.0306,
            delta_s_ion: 0.0528,
            phi_in: 1.00,
        }
    }
}

impl Params {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.k_ch,
            self.k_pr,
            self.k_li,
            self.k_dec,
            self.mu_m_ac,
            self.k_s_ac,
            self.k_i_nh3,
            self.delta_s_ion,
            self.phi_in,
        ]
    }

    pub fn from_array(t: [f64; 9]) -> Self {
        Self {
            k_ch: t[0],
            k_pr: t[1],
            k_li: t[2],
            k_dec: t[3],
            mu_m_ac: t[4],
            k_s_ac: t[5],
            k_i_nh3: t[6],
            delta_s_ion: t[7],
            phi_in: t[8],
        }
    }
}

/// Plant and physico-chemical constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    #[serde(rename = "pH_LL")]
    pub ph_ll: f64,
    #[serde(rename = "pH_UL")]
    pub ph_ul: f64,
    #[serde(rename = "K_S_IN")]
    pub k_s_in: f64,
    #[serde(rename = "K_a_ac")]
    pub ka_ac: f64,
    #[serde(rename = "K_a_co2")]
    pub ka_co2: f64,
    #[serde(rename = "K_a_IN")]
    pub ka_in: f64,
    #[serde(rename = "k_AB_ac")]
    pub kab_ac: f64,
    #[serde(rename = "k_AB_co2")]
    pub kab_co2: f64,
    #[serde(rename = "k_AB_IN")]
    pub kab_in: f64,
    #[serde(rename = "K_W")]
    pub k_w: f64,
    /// kmol/(m^3 kPa), i.e. kmol/kJ.
    #[serde(rename = "K_H_ch4")]
    pub kh_ch4: f64,
    #[serde(rename = "K_H_co2")]
    pub kh_co2: f64,
    /// 1/d.
    #[serde(rename = "k_La")]
    pub k_la: f64,
    /// m^3/(bar d).
    pub k_p: f64,
    #[serde(rename = "M_ch4")]
    pub m_ch4: f64,
    #[serde(rename = "M_co2")]
    pub m_co2: f64,
    /// kJ/(kmol K).
    #[serde(rename = "R")]
    pub r: f64,
    /// K.
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "V_liq")]
    pub v_liq: f64,
    #[serde(rename = "V_gas")]
    pub v_gas: f64,
    /// Atmospheric pressure (bar).
    pub p0: f64,
    /// Water vapour pressure at `t` (bar).
    pub p_h2o: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        let t = 311.15;
        Self {
            ph_ll: 6.0,
            ph_ul: 7.0,
            k_s_in: 0.0017,
            ka_ac: 10f64.powf(-4.76),
            ka_co2: 10f64.powf(-6.29),
            ka_in: 10f64.powf(-8.87),
            kab_ac: 1e10,
            kab_co2: 1e10,
            kab_in: 1e10,
            k_w: 10f64.powf(-13.7),
            kh_ch4: 1.1e-5,
            kh_co2: 2.5e-4,
            k_la: 200.0,
            k_p: 5e4,
            m_ch4: 16.0,
            m_co2: 44.0,
            r: 8.314,
            t,
            v_liq: 2000.0,
            v_gas: 353.0,
            p0: 1.013,
            p_h2o: water_vapour_pressure(t),
        }
    }
}

/// Saturation pressure of water in bar (`0.0313 exp(5290 (1/298.15 - 1/T))`).
pub fn water_vapour_pressure(t_kelvin: f64) -> f64 {
    0.0313 * (5290.0 * (1.0 / 298.15 - 1.0 / t_kelvin)).exp()
}

/// The 31 aggregated constants `c_1..c_31` (index 0 is unused).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregated {
    pub c: [f64; 32],
}

impl Aggregated {
    pub fn new(p: &PhysicalConstants) -> Self {
        let mut c = [0.0; 32];
        let rt = p.r * p.t;
        // Gas law in kPa m^3/kg, divided by 100 for bar.
        let a = rt / p.m_ch4 / 100.0;
        let b = rt / p.m_co2 / 100.0;
        let kp = p.k_p / p.p0;
        let pw = p.p_h2o;
        c[1] = 1.0 / p.v_liq;
        c[2] = 3.0 / (p.ph_ul - p.ph_ll);
        c[3] = 10f64.powf(-1.5 * (p.ph_ul + p.ph_ll) / (p.ph_ul - p.ph_ll));
        c[4] = 4.0 * p.k_w;
        c[5] = p.k_la;
        c[6] = p.k_la * p.kh_ch4 * rt;
        c[7] = p.k_la * p.kh_co2 * rt;
        c[8] = p.k_s_in;
        c[9] = p.kab_ac;
        c[10] = p.kab_co2;
        c[11] = p.kab_in;
        c[12] = p.k_la * p.v_liq / p.v_gas;
        c[13] = kp * a * a;
        c[14] = 2.0 * kp * a * b;
        c[15] = kp * b * b;
        c[16] = kp * a * (2.0 * pw - p.p0);
        c[17] = kp * b * (2.0 * pw - p.p0);
        c[18] = kp * (pw - p.p0) * pw;
        c[19] = a;
        c[20] = b;
        for k in 0..5 {
            c[21 + k] = -c[13 + k] / p.v_gas;
        }
        c[26] = -c[12] * p.kh_ch4 * rt - c[18] / p.v_gas;
        c[27] = -c[12] * p.kh_co2 * rt - c[18] / p.v_gas;
        c[28] = p.kab_ac * p.ka_ac;
        c[29] = p.kab_co2 * p.ka_co2;
        c[30] = p.kab_in * p.ka_in;
        c[31] = p.v_liq / p.v_gas;
        Self { c }
    }
}

/// Stoichiometric coefficients: six processes by nine liquid components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Petersen {
    pub a: [[f64; N_LIQUID]; 6],
}

impl Default for Petersen {
    fn default() -> Self {
        Self {
            a: [
                [0.6555, 0.0818, 0.2245, -0.0169, -1.0, 0.0, 0.0, 0.1125, 0.0],
                [0.9947, 0.0696, 0.1029, 0.1746, 0.0, -1.0, 0.0, 0.1349, 0.0],
                [1.7651, 0.1913, -0.6472, -0.0244, 0.0, 0.0, -1.0, 0.1621, 0.0],
                [-26.5447, 6.7367, 18.4808, -0.1506, 0.0, 0.0, 0.0, 0.0, 1.0],
                [0.0, 0.0, 0.0, 0.0, 0.18, 0.77, 0.05, -1.0, 0.0],
                [0.0, 0.0, 0.0, 0.0, 0.18, 0.77, 0.05, 0.0, -1.0],
            ],
        }
    }
}

/// Substrate influent library and mixing.
pub mod influent {
    use super::N_STATES;

    pub const SUBSTRATES: [&str; 3] = ["maize_silage", "grass_silage", "cattle_manure"];

    /// Columns per substrate of `(S_ac, S_IN, X_ch, X_pr, X_li)` in kg/m^3.
    pub const LIBRARY: [[f64; 5]; 3] = [
        [10.27, 0.76, 304.50, 24.20, 18.10],
        [12.33, 0.86, 205.31, 42.27, 15.42],
        [4.99, 1.71, 17.00, 10.80, 1.40],
    ];

    /// The reference mixture used in all scenarios.
    pub const REFERENCE_MIX: [f64; 5] = [7.64, 1.27, 144.19, 18.54, 9.03];

    const SLOTS: [usize; 5] = [0, 3, 4, 5, 6];

    fn expand(v: [f64; 5]) -> [f64; N_STATES] {
        let mut xi = [0.0; N_STATES];
        for (k, &s) in SLOTS.iter().enumerate() {
            xi[s] = v[k];
        }
        xi
    }

    /// Influent vector of a mixture given fresh-matter shares per substrate.
    /// Shares are normalized to sum to one.
    pub fn mix(shares: [f64; 3]) -> Result<[f64; N_STATES], String> {
        if shares.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(format!("substrate shares must be finite and nonnegative, got {shares:?}"));
        }
        let total: f64 = shares.iter().sum();
        if total <= 0.0 {
            return Err("substrate shares sum to zero".into());
        }
        let mut v = [0.0; 5];
        for (s, col) in shares.iter().zip(LIBRARY.iter()) {
            for k in 0..5 {
                v[k] += s / total * col[k];
            }
        }
        Ok(expand(v))
    }

    pub fn reference() -> [f64; N_STATES] {
        expand(REFERENCE_MIX)
    }
}

/// Initial state used to start steady-state computations.
pub const STEADY_STATE_START: [f64; N_STATES] =
    [0.049, 0.012, 4.975, 0.964, 2.962, 0.949, 0.412, 1.926, 0.552, 0.049, 4.546, 0.022, 0.358, 0.660];

/// Reference steady state at the mean feed of 29.821 m^3/d.
pub const REFERENCE_STEADY_STATE: [f64; N_STATES] = [
    0.0935, 0.0152, 8.5259, 2.3051, 2.4604, 2.7327, 1.7016, 10.8126, 2.7521, 0.0933, 7.9940, 0.0877, 0.3891, 0.9143,
];

/// Mean feed rate of the reference plant (m^3/d).
pub const MEAN_FEED: f64 = 29.821;

/// Per-signal scaling of states, outputs and the feed.
pub const STATE_SCALE: [f64; N_STATES] =
    [0.182, 0.014, 11.011, 3.371, 1.819, 2.576, 0.869, 9.712, 2.453, 0.181, 10.483, 0.167, 0.387, 0.914];
pub const OUTPUT_SCALE: [f64; N_OUTPUTS] = [4209.0, 0.550, 0.472, 7.588, 3.371, 0.182];
pub const FEED_SCALE: f64 = 29.821;

/// Measurement standard deviations per output.
pub const OUTPUT_SIGMA: [f64; N_OUTPUTS] = [25.0, 0.001, 0.001, 0.02, 0.12, 0.05];

/// The digester model for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adm1 {
    pub theta: Params,
    pub physical: PhysicalConstants,
    pub c: Aggregated,
    pub petersen: Petersen,
}

impl Default for Adm1 {
    fn default() -> Self {
        Self::new(Params::default())
    }
}

/// Intermediate quantities shared by the right-hand side and the Jacobians.
struct Chemistry {
    s_h: f64,
    /// `dS_H+/dx_j`, nonzero only for `S_IN`, `S_ac-`, `S_hco3-`, `S_nh3`.
    ds_h: [f64; N_STATES],
    i_ac: f64,
    di_ac: [f64; N_STATES],
}

impl Adm1 {
    pub fn new(theta: Params) -> Self {
        Self::with_constants(theta, PhysicalConstants::default())
    }

    pub fn with_constants(theta: Params, physical: PhysicalConstants) -> Self {
        Self { theta, c: Aggregated::new(&physical), physical, petersen: Petersen::default() }
    }

    fn charge_balance(&self, x: &[f64]) -> f64 {
        self.theta.delta_s_ion + (x[idx::S_IN] - x[idx::S_NH3]) / 17.0 - x[idx::S_HCO3] / 44.0 - x[idx::S_AC_ION] / 60.0
    }

    /// Hydrogen ion concentration (kmol/m^3) from the charge balance.
    pub fn hydrogen_ion(&self, x: &[f64]) -> f64 {
        let phi = self.charge_balance(x);
        let c4 = self.c.c[4];
        let root = (phi * phi + c4).sqrt();
        // Rationalized branch avoids cancellation when the anions dominate.
        if phi > 0.0 {
            0.5 * c4 / (phi + root)
        } else {
            0.5 * (root - phi)
        }
    }

    pub fn ph(&self, x: &[f64]) -> f64 {
        -self.hydrogen_ion(x).log10()
    }

    fn chemistry(&self, x: &[f64]) -> Chemistry {
        let c = &self.c.c;
        let th = &self.theta;
        let phi = self.charge_balance(x);
        let root = (phi * phi + c[4]).sqrt();
        let s_h = self.hydrogen_ion(x);
        let dphi = -s_h / root;
        let mut ds_h = [0.0; N_STATES];
        ds_h[idx::S_IN] = dphi / 17.0;
        ds_h[idx::S_NH3] = -dphi / 17.0;
        ds_h[idx::S_HCO3] = -dphi / 44.0;
        ds_h[idx::S_AC_ION] = -dphi / 60.0;

        let shc = s_h.powf(c[2]);
        let i_ph = c[3] / (c[3] + shc);
        let di_ph = -c[3] * c[2] * s_h.powf(c[2] - 1.0) / (c[3] + shc).powi(2);
        let s_in = x[idx::S_IN];
        let i_in = s_in / (s_in + c[8]);
        let di_in = c[8] / (s_in + c[8]).powi(2);
        let nh3 = x[idx::S_NH3];
        let i_nh3 = th.k_i_nh3 / (th.k_i_nh3 + nh3);
        let di_nh3 = -th.k_i_nh3 / (th.k_i_nh3 + nh3).powi(2);

        let i_ac = i_ph * i_in * i_nh3;
        let mut di_ac = [0.0; N_STATES];
        for j in [idx::S_IN, idx::S_AC_ION, idx::S_HCO3, idx::S_NH3] {
            di_ac[j] = di_ph * ds_h[j] * i_in * i_nh3;
        }
        di_ac[idx::S_IN] += i_ph * di_in * i_nh3;
        di_ac[idx::S_NH3] += i_ph * i_in * di_nh3;
        Chemistry { s_h, ds_h, i_ac, di_ac }
    }

    /// Process rates: three hydrolysis steps, acetoclastic uptake, two decays.
    fn rates(&self, x: &[f64], ch: &Chemistry) -> [f64; 6] {
        let th = &self.theta;
        let s_ac = x[idx::S_AC];
        [
            th.k_ch * x[idx::X_CH],
            th.k_pr * x[idx::X_PR],
            th.k_li * x[idx::X_LI],
            th.mu_m_ac * s_ac / (th.k_s_ac + s_ac) * x[idx::X_AC] * ch.i_ac,
            th.k_dec * x[idx::X_BAC],
            th.k_dec * x[idx::X_AC],
        ]
    }

    /// Biogas volume flow (m^3/d) from the gas-phase concentrations.
    pub fn gas_flow(&self, x: &[f64]) -> f64 {
        let c = &self.c.c;
        let g = x[idx::S_CH4_GAS];
        let h = x[idx::S_CO2_GAS];
        c[13] * g * g + c[14] * g * h + c[15] * h * h + c[16] * g + c[17] * h + c[18]
    }

    fn derivative(&self, x: &[f64], feed: f64, influent: &[f64], dx: &mut [f64]) {
        let c = &self.c.c;
        let a = &self.petersen.a;
        let ch = self.chemistry(x);
        let r = self.rates(x, &ch);
        for i in 0..N_LIQUID {
            let mut xi = influent.get(i).copied().unwrap_or(0.0);
            if i == idx::S_IN {
                xi *= self.theta.phi_in;
            }
            let mut v = c[1] * (xi - x[i]) * feed;
            for (j, rj) in r.iter().enumerate() {
                v += a[j][i] * rj;
            }
            dx[i] = v;
        }
        dx[idx::S_CH4] += -c[5] * x[idx::S_CH4] + c[6] * x[idx::S_CH4_GAS];
        dx[idx::S_IC] += -c[5] * x[idx::S_IC] + c[5] * x[idx::S_HCO3] + c[7] * x[idx::S_CO2_GAS];

        let s_h = ch.s_h;
        dx[idx::S_AC_ION] = c[28] * (x[idx::S_AC] - x[idx::S_AC_ION]) - c[9] * x[idx::S_AC_ION] * s_h;
        dx[idx::S_HCO3] = c[29] * (x[idx::S_IC] - x[idx::S_HCO3]) - c[10] * x[idx::S_HCO3] * s_h;
        dx[idx::S_NH3] = c[30] * (x[idx::S_IN] - x[idx::S_NH3]) - c[11] * x[idx::S_NH3] * s_h;

        let g = x[idx::S_CH4_GAS];
        let h = x[idx::S_CO2_GAS];
        dx[idx::S_CH4_GAS] = c[21] * g * g * g
            + c[22] * g * g * h
            + c[23] * g * h * h
            + c[24] * g * g
            + c[25] * g * h
            + c[12] * x[idx::S_CH4]
            + c[26] * g;
        dx[idx::S_CO2_GAS] = c[21] * g * g * h
            + c[22] * g * h * h
            + c[23] * h * h * h
            + c[24] * g * h
            + c[25] * h * h
            + c[12] * (x[idx::S_IC] - x[idx::S_HCO3])
            + c[27] * h;
    }

    fn state_jacobian(&self, x: &[f64], feed: f64, jac: &mut DMatrix<f64>) {
        let c = &self.c.c;
        let th = &self.theta;
        let a = &self.petersen.a;
        let ch = self.chemistry(x);
        jac.fill(0.0);

        let mut dr = [[0.0; N_STATES]; 6];
        dr[0][idx::X_CH] = th.k_ch;
        dr[1][idx::X_PR] = th.k_pr;
        dr[2][idx::X_LI] = th.k_li;
        let s_ac = x[idx::S_AC];
        let monod = s_ac / (th.k_s_ac + s_ac);
        let x_ac = x[idx::X_AC];
        dr[3][idx::S_AC] = th.mu_m_ac * th.k_s_ac / (th.k_s_ac + s_ac).powi(2) * x_ac * ch.i_ac;
        dr[3][idx::X_AC] = th.mu_m_ac * monod * ch.i_ac;
        for j in [idx::S_IN, idx::S_AC_ION, idx::S_HCO3, idx::S_NH3] {
            dr[3][j] = th.mu_m_ac * monod * x_ac * ch.di_ac[j];
        }
        dr[4][idx::X_BAC] = th.k_dec;
        dr[5][idx::X_AC] = th.k_dec;

        for i in 0..N_LIQUID {
            jac[(i, i)] -= c[1] * feed;
            for (j, drj) in dr.iter().enumerate() {
                if a[j][i] != 0.0 {
                    for k in 0..N_STATES {
                        jac[(i, k)] += a[j][i] * drj[k];
                    }
                }
            }
        }
        jac[(idx::S_CH4, idx::S_CH4)] -= c[5];
        jac[(idx::S_CH4, idx::S_CH4_GAS)] += c[6];
        jac[(idx::S_IC, idx::S_IC)] -= c[5];
        jac[(idx::S_IC, idx::S_HCO3)] += c[5];
        jac[(idx::S_IC, idx::S_CO2_GAS)] += c[7];

        let dissociation = [
            (idx::S_AC_ION, idx::S_AC, c[28], c[9]),
            (idx::S_HCO3, idx::S_IC, c[29], c[10]),
            (idx::S_NH3, idx::S_IN, c[30], c[11]),
        ];
        for (row, total, kf, kb) in dissociation {
            jac[(row, total)] += kf;
            jac[(row, row)] += -kf - kb * ch.s_h;
            for j in [idx::S_IN, idx::S_AC_ION, idx::S_HCO3, idx::S_NH3] {
                jac[(row, j)] -= kb * x[row] * ch.ds_h[j];
            }
        }

        let g = x[idx::S_CH4_GAS];
        let h = x[idx::S_CO2_GAS];
        let (m, n) = (idx::S_CH4_GAS, idx::S_CO2_GAS);
        jac[(m, m)] = 3.0 * c[21] * g * g + 2.0 * c[22] * g * h + c[23] * h * h + 2.0 * c[24] * g + c[25] * h + c[26];
        jac[(m, n)] = c[22] * g * g + 2.0 * c[23] * g * h + c[25] * g;
        jac[(m, idx::S_CH4)] = c[12];
        jac[(n, m)] = 2.0 * c[21] * g * h + c[22] * h * h + c[24] * h;
        jac[(n, n)] = c[21] * g * g + 2.0 * c[22] * g * h + 3.0 * c[23] * h * h + c[24] * g + 2.0 * c[25] * h + c[27];
        jac[(n, idx::S_IC)] = c[12];
        jac[(n, idx::S_HCO3)] = -c[12];
    }

    pub fn outputs(&self, x: &[f64]) -> [f64; N_OUTPUTS] {
        let c = &self.c.c;
        [
            self.gas_flow(x),
            c[19] * x[idx::S_CH4_GAS],
            c[20] * x[idx::S_CO2_GAS],
            self.ph(x),
            x[idx::S_IN],
            x[idx::S_AC],
        ]
    }

    fn outputs_jacobian(&self, x: &[f64], hm: &mut DMatrix<f64>) {
        let c = &self.c.c;
        hm.fill(0.0);
        let g = x[idx::S_CH4_GAS];
        let h = x[idx::S_CO2_GAS];
        hm[(0, idx::S_CH4_GAS)] = 2.0 * c[13] * g + c[14] * h + c[16];
        hm[(0, idx::S_CO2_GAS)] = c[14] * g + 2.0 * c[15] * h + c[17];
        hm[(1, idx::S_CH4_GAS)] = c[19];
        hm[(2, idx::S_CO2_GAS)] = c[20];
        let ch = self.chemistry(x);
        for j in [idx::S_IN, idx::S_AC_ION, idx::S_HCO3, idx::S_NH3] {
            hm[(3, j)] = -ch.ds_h[j] / (ch.s_h * std::f64::consts::LN_10);
        }
        hm[(4, idx::S_IN)] = 1.0;
        hm[(5, idx::S_AC)] = 1.0;
    }

    /// Set the three ion states to acid-base equilibrium with the pH they
    /// imply, leaving the totals untouched. Returns the hydrogen ion
    /// concentration.
    pub fn equilibrate_ions(&self, x: &mut [f64]) -> f64 {
        let p = &self.physical;
        let set = |x: &mut [f64], s: f64| {
            x[idx::S_AC_ION] = p.ka_ac * x[idx::S_AC] / (p.ka_ac + s);
            x[idx::S_HCO3] = p.ka_co2 * x[idx::S_IC] / (p.ka_co2 + s);
            x[idx::S_NH3] = p.ka_in * x[idx::S_IN] / (p.ka_in + s);
        };
        let (mut lo, mut hi) = ((1e-14f64).ln(), 0.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            set(x, mid.exp());
            if self.hydrogen_ion(x) > mid.exp() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = (0.5 * (lo + hi)).exp();
        set(x, s);
        s
    }

    /// Integrate at constant feed from `x_init` over `horizon` days and check
    /// that the derivative has died out.
    pub fn steady_state(
        &self,
        feed: f64,
        influent: &[f64],
        x_init: &[f64],
        horizon: f64,
        tolerance: f64,
    ) -> Result<SteadyState, OdeError> {
        if !(feed >= 0.0) || !(horizon > 0.0) {
            return Err(OdeError::Invalid(format!("feed {feed} and horizon {horizon} must be nonnegative/positive")));
        }
        let schedule = InputSchedule::constant(0.0, horizon, feed, influent.to_vec());
        let mask = [true; N_STATES];
        let opts = SolverOptions::with_tolerances(1e-8, 1e-10);
        let sol = integrate_piecewise(self, &schedule, x_init, 0.0, horizon, &[], &opts, Some(&mask))?;
        let x = sol.final_state;
        let mut dx = [0.0; N_STATES];
        self.derivative(x.as_slice(), feed, influent, &mut dx);
        let residual = dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(residual <= tolerance) {
            return Err(OdeError::Invalid(format!(
                "no steady state after {horizon} d: max |dx/dt| = {residual:e} exceeds {tolerance:e}"
            )));
        }
        Ok(SteadyState { state: x, residual })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub state: DVector<f64>,
    /// Largest absolute derivative at the returned state.
    pub residual: f64,
}

impl OdeModel for Adm1 {
    fn dim(&self) -> usize {
        N_STATES
    }

    fn rhs(&self, x: &[f64], input: &Input<'_>, dx: &mut [f64]) {
        self.derivative(x, input.feed_rate, input.influent, dx);
    }

    fn jacobian(&self, x: &[f64], input: &Input<'_>, jac: &mut DMatrix<f64>) {
        self.state_jacobian(x, input.feed_rate, jac);
    }
}

impl ObservedModel for Adm1 {
    fn n_outputs(&self) -> usize {
        N_OUTPUTS
    }

    fn output(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.outputs(x));
    }

    fn output_jacobian(&self, x: &[f64], h: &mut DMatrix<f64>) {
        self.outputs_jacobian(x, h);
    }
}
