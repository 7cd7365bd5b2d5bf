//! Multi-rate extended Kalman filtering for processes whose laboratory
//! measurements arrive late.

pub mod linalg;
pub mod ode;
pub mod adm1;
pub mod model;
pub mod events;
pub mod ekf;
pub mod multirate;
pub mod baselines;
pub mod scenario;
pub mod estimate;
pub mod tuning;
pub mod io;
pub mod config;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
