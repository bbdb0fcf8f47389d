//! Numerical toolkit for theta functions, elliptic pole systems and the
//! secant characterisations of Jacobians.
//!
//! The modules build on each other bottom up: [`siegel_theta`] and
//! [`weierstrass`] supply the special functions, [`pole_systems`] the
//! Calogero-Moser, Ruijsenaars-Schneider and Bethe dynamics,
//! [`tau_divisor`] the zero tracking of tau functions, [`secant_conditions`]
//! the residual evaluators for the characterisation conditions and
//! [`wave_ba`] the wave-series recursion and Baker-Akhiezer solutions.
//! [`cli`] turns JSON scenarios into residual reports for the `theta-lab`
//! binary.

pub mod error;
pub mod numerics;
pub mod siegel_theta;
pub mod pole_systems;
pub mod weierstrass;
pub mod tau_divisor;
pub mod secant_conditions;
pub mod wave_ba;
pub mod cli;

pub use error::{Error, Result};
pub use numerics::C64;
