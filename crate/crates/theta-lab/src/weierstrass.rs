//! Weierstrass functions on the lattice `2 omega1 Z + 2 omega2 Z`, the Lamé
//! kernel `Phi(x, z)` and the Bloch multipliers of double-Bloch functions.
//!
//! Everything is computed from the Jacobi function `theta_1` in the nome
//! `q = exp(pi i omega2/omega1)` after reducing the argument to the centred
//! fundamental cell; quasi-periodicity restores the original argument.

use crate::error::{Error, Result};
use crate::numerics::{C64, I};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticLattice {
    pub omega1: C64,
    pub omega2: C64,
    pub eta1: C64,
    pub eta2: C64,
    pub tau_modulus: C64,
    nome: C64,
    theta1_d1: C64,
    guard: f64,
    n_terms: usize,
}

/// JSON form `{"omega1": [re, im], "omega2": [re, im]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatticeConfig {
    pub omega1: [f64; 2],
    pub omega2: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<f64>,
}

/// Values of zeta, wp and wp' at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeierstrassValues {
    pub zeta: C64,
    pub wp: C64,
    pub wp_prime: C64,
}

/// Multipliers of a double-Bloch function over the two period shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochMultipliers {
    pub b1: C64,
    pub b2: C64,
}

impl BlochMultipliers {
    /// `B1^omega2 B2^(-omega1)` on the principal logarithm branch, with the
    /// branch (imaginary parts of the logs used) returned alongside.
    pub fn equivalence_invariant(&self, lat: &EllipticLattice) -> (C64, [f64; 2]) {
        let l1 = self.b1.ln();
        let l2 = self.b2.ln();
        ((lat.omega2 * l1 - lat.omega1 * l2).exp(), [l1.im, l2.im])
    }
}

struct Reduced {
    x0: C64,
    m: i64,
    n: i64,
}

impl EllipticLattice {
    pub fn new(omega1: C64, omega2: C64) -> Result<Self> {
        Self::with_guard(omega1, omega2, 1e-8)
    }

    /// `guard` is relative to `|omega1|`.
    pub fn with_guard(omega1: C64, omega2: C64, guard: f64) -> Result<Self> {
        if !(omega1.norm() > 0.0) || !omega1.re.is_finite() || !omega2.re.is_finite() {
            return Err(Error::InvalidLattice("half-periods must be finite and non-zero".into()));
        }
        let tau = omega2 / omega1;
        if !(tau.im > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "Im(omega2/omega1) = {:e} must be positive",
                tau.im
            )));
        }
        let nome = (I * PI * tau).exp();
        // enough terms for |q|^((n+1/2)^2 - (2n+1)/2) to drop below 1e-18
        let lq = -nome.norm().ln();
        let mut n_terms = 1;
        while lq * ((n_terms as f64 + 0.5).powi(2) - (n_terms as f64 + 0.5)) < 45.0 {
            n_terms += 1;
        }
        let mut lat = Self {
            omega1,
            omega2,
            eta1: C64::new(0.0, 0.0),
            eta2: C64::new(0.0, 0.0),
            tau_modulus: tau,
            nome,
            theta1_d1: C64::new(0.0, 0.0),
            guard,
            n_terms: n_terms + 2,
        };
        let t = lat.theta1(C64::new(0.0, 0.0));
        lat.theta1_d1 = t[1];
        lat.eta1 = -PI * PI * t[3] / (12.0 * omega1 * t[1]);
        // zeta(omega2) from the series, independently of Legendre
        let v = PI * tau / 2.0;
        let tv = lat.theta1(v);
        lat.eta2 = lat.eta1 * omega2 / omega1 + PI / (2.0 * omega1) * tv[1] / tv[0];
        let res = lat.legendre_residual();
        let scale = 1.0 + (lat.eta1 * omega2).norm() + (lat.eta2 * omega1).norm();
        if res > 1e-12 * scale {
            return Err(Error::InvalidLattice(format!(
                "Legendre relation fails: residual {res:e}"
            )));
        }
        Ok(lat)
    }

    pub fn from_config(cfg: &LatticeConfig) -> Result<Self> {
        Self::with_guard(
            C64::new(cfg.omega1[0], cfg.omega1[1]),
            C64::new(cfg.omega2[0], cfg.omega2[1]),
            cfg.guard.unwrap_or(1e-8),
        )
    }

    pub fn to_config(&self) -> LatticeConfig {
        LatticeConfig {
            omega1: [self.omega1.re, self.omega1.im],
            omega2: [self.omega2.re, self.omega2.im],
            guard: Some(self.guard),
        }
    }

    /// Square lattice with half-periods `1/2` and `i/2`.
    pub fn unit_square() -> Self {
        Self::new(C64::new(0.5, 0.0), C64::new(0.0, 0.5)).expect("square lattice is valid")
    }

    /// `|eta1 omega2 - eta2 omega1 - pi i / 2|`.
    pub fn legendre_residual(&self) -> f64 {
        (self.eta1 * self.omega2 - self.eta2 * self.omega1 - I * PI / 2.0).norm()
    }

    pub fn guard_radius(&self) -> f64 {
        self.guard * self.omega1.norm()
    }

    pub fn eta(&self, alpha: usize) -> C64 {
        if alpha == 1 {
            self.eta1
        } else {
            self.eta2
        }
    }

    pub fn omega(&self, alpha: usize) -> C64 {
        if alpha == 1 {
            self.omega1
        } else {
            self.omega2
        }
    }

    // theta_1 and its first three v-derivatives
    fn theta1(&self, v: C64) -> [C64; 4] {
        let mut out = [C64::new(0.0, 0.0); 4];
        let lq = self.nome.ln();
        for n in 0..self.n_terms {
            let k = 2.0 * n as f64 + 1.0;
            let coef = (lq * (n as f64 + 0.5).powi(2)).exp() * if n % 2 == 0 { 2.0 } else { -2.0 };
            let (s, c) = ((k * v).sin(), (k * v).cos());
            out[0] += coef * s;
            out[1] += coef * k * c;
            out[2] -= coef * k * k * s;
            out[3] -= coef * k * k * k * c;
        }
        out
    }

    fn reduce(&self, x: C64) -> Reduced {
        let s = x / (2.0 * self.omega1);
        let b = s.im / self.tau_modulus.im;
        let a = s.re - b * self.tau_modulus.re;
        let m = a.round() as i64;
        let n = b.round() as i64;
        let x0 = x - 2.0 * m as f64 * self.omega1 - 2.0 * n as f64 * self.omega2;
        Reduced { x0, m, n }
    }

    /// Distance from `x` to the nearest lattice point.
    pub fn lattice_distance(&self, x: C64) -> f64 {
        let r = self.reduce(x);
        let mut d = f64::INFINITY;
        for i in -1..=1 {
            for j in -1..=1 {
                let p = 2.0 * i as f64 * self.omega1 + 2.0 * j as f64 * self.omega2;
                d = d.min((r.x0 - p).norm());
            }
        }
        d
    }

    fn check_pole(&self, x: C64) -> Result<()> {
        if !(x.re.is_finite() && x.im.is_finite()) {
            return Err(Error::NearSingularInput(format!("non-finite argument {x}")));
        }
        if self.lattice_distance(x) < self.guard_radius() {
            return Err(Error::PoleAtLatticePoint(format!("{x}")));
        }
        Ok(())
    }

    fn ratios(&self, x0: C64) -> (C64, C64, C64) {
        let v = PI * x0 / (2.0 * self.omega1);
        let t = self.theta1(v);
        (t[1] / t[0], t[2] / t[0], t[3] / t[0])
    }

    /// Weierstrass sigma.
    pub fn sigma(&self, x: C64) -> C64 {
        let r = self.reduce(x);
        let v = PI * r.x0 / (2.0 * self.omega1);
        let t = self.theta1(v);
        let s0 = 2.0 * self.omega1 / PI * (self.eta1 * r.x0 * r.x0 / (2.0 * self.omega1)).exp() * t[0]
            / self.theta1_d1;
        if r.m == 0 && r.n == 0 {
            return s0;
        }
        let (m, n) = (r.m as f64, r.n as f64);
        let sign = if (r.m + r.n + r.m * r.n).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let eta = m * self.eta1 + n * self.eta2;
        let om = m * self.omega1 + n * self.omega2;
        sign * (2.0 * eta * (r.x0 + om)).exp() * s0
    }

    /// `zeta`, `wp` and `wp'` from a single theta series pass.
    pub fn values(&self, x: C64) -> Result<WeierstrassValues> {
        self.check_pole(x)?;
        let r = self.reduce(x);
        let (a, b, c) = self.ratios(r.x0);
        let k = PI / (2.0 * self.omega1);
        let zeta = self.eta1 * r.x0 / self.omega1
            + k * a
            + 2.0 * r.m as f64 * self.eta1
            + 2.0 * r.n as f64 * self.eta2;
        let wp = -self.eta1 / self.omega1 + k * k * (a * a - b);
        let wp_prime = k * k * k * (3.0 * a * b - 2.0 * a * a * a - c);
        Ok(WeierstrassValues { zeta, wp, wp_prime })
    }

    pub fn zeta_w(&self, x: C64) -> Result<C64> {
        Ok(self.values(x)?.zeta)
    }

    pub fn wp(&self, x: C64) -> Result<C64> {
        Ok(self.values(x)?.wp)
    }

    pub fn wp_prime(&self, x: C64) -> Result<C64> {
        Ok(self.values(x)?.wp_prime)
    }

    /// `wp'' = 6 wp^2 - g2/2`.
    pub fn wp_second(&self, x: C64) -> Result<C64> {
        let p = self.wp(x)?;
        Ok(6.0 * p * p - self.invariants().0 / 2.0)
    }

    /// Half-period values `(e1, e2, e3) = (wp(omega1), wp(omega2), wp(omega1 + omega2))`.
    pub fn half_period_values(&self) -> (C64, C64, C64) {
        let e1 = self.wp(self.omega1).expect("half-period is off the lattice");
        let e2 = self.wp(self.omega2).expect("half-period is off the lattice");
        let e3 = self.wp(self.omega1 + self.omega2).expect("half-period is off the lattice");
        (e1, e2, e3)
    }

    /// Invariants `(g2, g3)` from the half-period values.
    pub fn invariants(&self) -> (C64, C64) {
        let (e1, e2, e3) = self.half_period_values();
        (-4.0 * (e1 * e2 + e1 * e3 + e2 * e3), 4.0 * e1 * e2 * e3)
    }

    /// `T_alpha(z) = exp(2 omega_alpha zeta(z) - 2 eta_alpha z)`.
    pub fn bloch_multiplier(&self, alpha: usize, z: C64) -> Result<C64> {
        if alpha != 1 && alpha != 2 {
            return Err(Error::InvalidArgument("alpha must be 1 or 2".into()));
        }
        let zeta = self.zeta_w(z).map_err(near)?;
        Ok((2.0 * self.omega(alpha) * zeta - 2.0 * self.eta(alpha) * z).exp())
    }

    pub fn bloch_multipliers(&self, z: C64) -> Result<BlochMultipliers> {
        Ok(BlochMultipliers {
            b1: self.bloch_multiplier(1, z)?,
            b2: self.bloch_multiplier(2, z)?,
        })
    }

    fn check_phi(&self, x: C64, z: C64) -> Result<()> {
        for (name, w) in [("x", x), ("z", z), ("z - x", z - x)] {
            if self.lattice_distance(w) < self.guard_radius() {
                return Err(Error::NearSingularInput(format!("{name} = {w} is on the lattice")));
            }
        }
        Ok(())
    }

    /// Lamé kernel `Phi(x, z) = sigma(z - x) / (sigma(z) sigma(x)) exp(x zeta(z))`.
    pub fn phi_lame(&self, x: C64, z: C64) -> Result<C64> {
        self.check_phi(x, z)?;
        let zeta = self.zeta_w(z)?;
        Ok(self.sigma(z - x) / (self.sigma(z) * self.sigma(x)) * (x * zeta).exp())
    }

    /// `(Phi, d Phi/dx, d^2 Phi/dx^2)` at `(x, z)`.
    pub fn phi_lame_jet(&self, x: C64, z: C64) -> Result<[C64; 3]> {
        let phi = self.phi_lame(x, z)?;
        let vz = self.values(z)?;
        let vx = self.values(x)?;
        let vzx = self.values(z - x)?;
        let l = vz.zeta - vx.zeta - vzx.zeta;
        Ok([phi, phi * l, phi * (l * l + vx.wp - vzx.wp)])
    }

    /// `d Phi/dx`.
    pub fn phi_lame_dx(&self, x: C64, z: C64) -> Result<C64> {
        Ok(self.phi_lame_jet(x, z)?[1])
    }

    /// Defect of the Lamé equation `Phi'' - 2 wp(x) Phi = wp(z) Phi` with the
    /// second derivative from a five-point stencil, normalised by
    /// `|wp(z) Phi| + 1`.
    pub fn lame_residual(&self, x: C64, z: C64) -> Result<f64> {
        self.check_phi(x, z)?;
        let dist = self.lattice_distance(x).min(self.lattice_distance(z - x));
        let h = 1e-3 * self.omega1.norm().min(dist).max(1e-6);
        let f = |s: f64| self.phi_lame(x + h * s, z);
        let (fm2, fm1, f0, f1, f2) = (f(-2.0)?, f(-1.0)?, f(0.0)?, f(1.0)?, f(2.0)?);
        let d2 = (-fm2 + 16.0 * fm1 - 30.0 * f0 + 16.0 * f1 - f2) / (12.0 * h * h);
        let wz = self.wp(z)?;
        let wx = self.wp(x)?;
        Ok((d2 - 2.0 * wx * f0 - wz * f0).norm() / ((wz * f0).norm() + 1.0))
    }
}

fn near(e: Error) -> Error {
    match e {
        Error::PoleAtLatticePoint(s) => Error::NearSingularInput(s),
        other => other,
    }
}
