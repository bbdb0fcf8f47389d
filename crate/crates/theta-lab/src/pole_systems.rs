//! Elliptic Calogero-Moser and Ruijsenaars-Schneider systems, nested Bethe
//! equations and the double-Bloch reduction of the heat equation.
//!
//! The CM flow is written as `q' = p`, `p'_i = kappa sum_{j != i} wp'(q_i - q_j)`.
//! The coefficient `kappa` is not taken from the printed equations of motion
//! but fixed by [`calibrate_flow`], which picks the candidate for which the
//! Lax equation `L' = [M, L]` holds with the given `L` and `M`.

use crate::error::{Error, Result};
use crate::numerics::{C64, I};
use crate::weierstrass::{BlochMultipliers, EllipticLattice};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

pub type CMatrix = DMatrix<C64>;

#[derive(Debug, Clone, PartialEq)]
pub struct CMState {
    pub q: Vec<C64>,
    pub p: Vec<C64>,
    pub lat: EllipticLattice,
}

impl CMState {
    pub fn new(q: Vec<C64>, p: Vec<C64>, lat: EllipticLattice) -> Result<Self> {
        if q.len() != p.len() || q.is_empty() {
            return Err(Error::InvalidArgument("q and p must have equal non-zero length".into()));
        }
        let s = Self { q, p, lat };
        s.check_collisions()?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    fn check_collisions(&self) -> Result<()> {
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.lat.lattice_distance(self.q[i] - self.q[j]) < self.lat.guard_radius() {
                    return Err(Error::CollisionDetected(format!("particles {i} and {j}")));
                }
            }
        }
        Ok(())
    }
}

/// Random CM state with positions spread over the fundamental cell and
/// pairwise separations at least `min_sep` modulo the lattice.
pub fn random_cm_state<R: Rng>(n: usize, lat: &EllipticLattice, min_sep: f64, rng: &mut R) -> CMState {
    random_cm_state_scaled(n, lat, min_sep, 1.0, rng)
}

/// As [`random_cm_state`] with momenta drawn from the square of half-width `p_scale`.
pub fn random_cm_state_scaled<R: Rng>(n: usize, lat: &EllipticLattice, min_sep: f64, p_scale: f64, rng: &mut R) -> CMState {
    loop {
        let q: Vec<C64> = (0..n)
            .map(|_| rng.random_range(-0.9..0.9) * lat.omega1 + rng.random_range(-0.9..0.9) * lat.omega2)
            .collect();
        let ok = (0..n).all(|i| ((i + 1)..n).all(|j| lat.lattice_distance(q[i] - q[j]) > min_sep));
        if !ok {
            continue;
        }
        let p: Vec<C64> = (0..n)
            .map(|_| p_scale * C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        return CMState::new(q, p, *lat).expect("separated state is valid");
    }
}

/// The CM Hamiltonian `1/2 sum p_i^2 + sum_{i != j} wp(q_i - q_j)` as printed.
pub fn cm_hamiltonian(s: &CMState) -> Result<C64> {
    let n = s.n();
    let mut h: C64 = s.p.iter().map(|p| 0.5 * p * p).sum();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                h += s.lat.wp(s.q[i] - s.q[j]).map_err(singular)?;
            }
        }
    }
    Ok(h)
}

/// Energy conserved by the flow with coefficient `kappa`:
/// `1/2 sum p_i^2 - kappa/2 sum_{i != j} wp(q_i - q_j)`.
pub fn cm_flow_energy(s: &CMState, kappa: f64) -> Result<C64> {
    let n = s.n();
    let mut h: C64 = s.p.iter().map(|p| 0.5 * p * p).sum();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                h -= 0.5 * kappa * s.lat.wp(s.q[i] - s.q[j]).map_err(singular)?;
            }
        }
    }
    Ok(h)
}

fn singular(e: Error) -> Error {
    match e {
        Error::PoleAtLatticePoint(s) => Error::NearSingularInput(s),
        other => other,
    }
}

/// `L_ij = p_i delta_ij + 2 (1 - delta_ij) Phi(q_i - q_j, z)`.
pub fn cm_lax(s: &CMState, z: C64) -> Result<CMatrix> {
    let n = s.n();
    let mut l = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = if i == j {
                s.p[i]
            } else {
                2.0 * s.lat.phi_lame(s.q[i] - s.q[j], z)?
            };
        }
    }
    Ok(l)
}

/// `M_ij = (wp(z) - 2 sum_{l != i} wp(q_i - q_l)) delta_ij - 2 (1 - delta_ij) Phi'(q_i - q_j, z)`.
pub fn cm_m_matrix(s: &CMState, z: C64) -> Result<CMatrix> {
    let n = s.n();
    let wz = s.lat.wp(z).map_err(singular)?;
    let mut m = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = if i == j {
                let mut d = wz;
                for l in 0..n {
                    if l != i {
                        d -= 2.0 * s.lat.wp(s.q[i] - s.q[l]).map_err(singular)?;
                    }
                }
                d
            } else {
                -2.0 * s.lat.phi_lame_dx(s.q[i] - s.q[j], z)?
            };
        }
    }
    Ok(m)
}

/// Forces `kappa sum_{j != i} wp'(q_i - q_j)`.
pub fn cm_forces(q: &[C64], lat: &EllipticLattice, kappa: f64) -> Result<Vec<C64>> {
    let n = q.len();
    let mut f = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                f[i] += kappa * lat.wp_prime(q[i] - q[j]).map_err(|_| {
                    Error::CollisionDetected(format!("particles {i} and {j}"))
                })?;
            }
        }
    }
    Ok(f)
}

/// Outcome of the flow calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCalibration {
    pub kappa: f64,
    /// `(candidate, lax residual)` pairs in the order tried.
    pub candidates: Vec<(f64, f64)>,
}

/// `||L' - [M, L]||_F / (1 + ||L||_F)` with `L'` assembled from the flow
/// with coefficient `kappa`.
pub fn lax_residual_with(s: &CMState, z: C64, kappa: f64) -> Result<f64> {
    let n = s.n();
    let l = cm_lax(s, z)?;
    let m = cm_m_matrix(s, z)?;
    let f = cm_forces(&s.q, &s.lat, kappa)?;
    let mut ldot = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            ldot[(i, j)] = if i == j {
                f[i]
            } else {
                2.0 * s.lat.phi_lame_dx(s.q[i] - s.q[j], z)? * (s.p[i] - s.p[j])
            };
        }
    }
    let comm = &m * &l - &l * &m;
    Ok((ldot - comm).norm() / (1.0 + l.norm()))
}

/// Lax residual for the calibrated flow.
pub fn lax_residual(s: &CMState, z: C64) -> Result<f64> {
    lax_residual_with(s, z, calibrate_flow().kappa)
}

/// Chooses `kappa` among `{-2, 2, -4, 4}` by the Lax residual on a fixed
/// three-particle reference state; computed once per process.
pub fn calibrate_flow() -> &'static FlowCalibration {
    static CAL: OnceLock<FlowCalibration> = OnceLock::new();
    CAL.get_or_init(|| {
        let lat = EllipticLattice::new(C64::new(1.0, 0.0), C64::new(0.3, 1.1)).expect("reference lattice");
        let s = CMState::new(
            vec![C64::new(0.1, 0.2), C64::new(0.7, -0.3), C64::new(-0.5, 0.45)],
            vec![C64::new(0.3, -0.1), C64::new(-0.6, 0.2), C64::new(0.25, 0.5)],
            lat,
        )
        .expect("reference state");
        let z = C64::new(0.37, 0.21);
        let candidates: Vec<(f64, f64)> = [-2.0, 2.0, -4.0, 4.0]
            .iter()
            .map(|&k| (k, lax_residual_with(&s, z, k).unwrap_or(f64::INFINITY)))
            .collect();
        let kappa = candidates
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|c| c.0)
            .expect("non-empty");
        FlowCalibration { kappa, candidates }
    })
}

/// RK4 trajectory of the CM flow: `steps + 1` states including the start.
pub fn cm_flow(s0: &CMState, dt: f64, steps: usize) -> Result<Vec<CMState>> {
    cm_flow_with(s0, dt, steps, calibrate_flow().kappa)
}

pub fn cm_flow_with(s0: &CMState, dt: f64, steps: usize, kappa: f64) -> Result<Vec<CMState>> {
    let n = s0.n();
    let lat = s0.lat;
    let rhs = |q: &[C64], p: &[C64]| -> Result<(Vec<C64>, Vec<C64>)> {
        Ok((p.to_vec(), cm_forces(q, &lat, kappa)?))
    };
    let mut traj = vec![s0.clone()];
    let mut e_prev = cm_flow_energy(s0, kappa)?;
    let (mut q, mut p) = (s0.q.clone(), s0.p.clone());
    for step in 0..steps {
        let (k1q, k1p) = rhs(&q, &p)?;
        let mid = |a: &[C64], k: &[C64], h: f64| -> Vec<C64> { a.iter().zip(k).map(|(x, y)| x + h * y).collect() };
        let (k2q, k2p) = rhs(&mid(&q, &k1q, dt / 2.0), &mid(&p, &k1p, dt / 2.0))?;
        let (k3q, k3p) = rhs(&mid(&q, &k2q, dt / 2.0), &mid(&p, &k2p, dt / 2.0))?;
        let (k4q, k4p) = rhs(&mid(&q, &k3q, dt), &mid(&p, &k3p, dt))?;
        for i in 0..n {
            q[i] += dt / 6.0 * (k1q[i] + 2.0 * k2q[i] + 2.0 * k3q[i] + k4q[i]);
            p[i] += dt / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
        }
        let s = CMState { q: q.clone(), p: p.clone(), lat };
        s.check_collisions()?;
        let e = cm_flow_energy(&s, kappa)?;
        if (e - e_prev).norm() > 1e-6 * (1.0 + e_prev.norm()) {
            return Err(Error::StepRejected(format!(
                "energy jump {:e} at step {}",
                (e - e_prev).norm(),
                step + 1
            )));
        }
        e_prev = e;
        traj.push(s);
    }
    Ok(traj)
}

/// Power traces and characteristic polynomial of a Lax matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralInvariants {
    /// `tr L^k`, `k = 1..=kmax`.
    pub power_traces: Vec<C64>,
    /// Coefficients of `det(k I - L)` from `k^N` down to `k^0`.
    pub charpoly: Vec<C64>,
}

pub fn spectral_invariants_of(l: &CMatrix, kmax: usize) -> SpectralInvariants {
    let n = l.nrows();
    let kk = kmax.max(n);
    let mut traces = Vec::with_capacity(kk);
    let mut pow = l.clone();
    for k in 1..=kk {
        if k > 1 {
            pow = &pow * l;
        }
        traces.push(pow.trace());
    }
    // Newton's identities for the elementary symmetric functions
    let mut e = vec![C64::new(1.0, 0.0)];
    for k in 1..=n {
        let mut s = C64::new(0.0, 0.0);
        for i in 1..=k {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            s += sign * e[k - i] * traces[i - 1];
        }
        e.push(s / k as f64);
    }
    let charpoly = (0..=n).map(|j| if j % 2 == 0 { e[j] } else { -e[j] }).collect();
    traces.truncate(kmax);
    SpectralInvariants {
        power_traces: traces,
        charpoly,
    }
}

pub fn spectral_invariants(s: &CMState, z: C64, kmax: usize) -> Result<SpectralInvariants> {
    Ok(spectral_invariants_of(&cm_lax(s, z)?, kmax))
}

/// Eigenvalues of a complex matrix, sorted by real then imaginary part.
pub fn eigenvalues(m: &CMatrix) -> Result<Vec<C64>> {
    let ev = m
        .clone()
        .schur()
        .eigenvalues()
        .ok_or_else(|| Error::DegenerateEigenvalue("Schur decomposition failed".into()))?;
    let mut v: Vec<C64> = ev.iter().cloned().collect();
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(v)
}

// ---------------------------------------------------------------------------
// Ruijsenaars-Schneider

#[derive(Debug, Clone, PartialEq)]
pub struct RSState {
    pub q: Vec<C64>,
    pub p: Vec<C64>,
    pub lat: EllipticLattice,
    /// Sign applied to the principal square root in each `f_i`.
    pub sheet: Vec<f64>,
}

impl RSState {
    pub fn new(q: Vec<C64>, p: Vec<C64>, lat: EllipticLattice) -> Result<Self> {
        if q.len() != p.len() || q.is_empty() {
            return Err(Error::InvalidArgument("q and p must have equal non-zero length".into()));
        }
        let n = q.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for shift in [-1.0, 0.0, 1.0] {
                    if lat.lattice_distance(q[i] - q[j] + shift) < lat.guard_radius() {
                        return Err(Error::NearSingularInput(format!(
                            "q_{i} - q_{j} {shift:+} is on the lattice"
                        )));
                    }
                }
            }
        }
        Ok(Self { q, p, lat, sheet: vec![1.0; n] })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }
}

fn rs_products(q: &[C64], lat: &EllipticLattice) -> Vec<C64> {
    let n = q.len();
    (0..n)
        .map(|i| {
            let mut prod = C64::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    let d = q[i] - q[j];
                    let s = lat.sigma(d);
                    prod *= lat.sigma(d - 1.0) * lat.sigma(d + 1.0) / (s * s);
                }
            }
            prod
        })
        .collect()
}

/// `f_i = e^{p_i} (prod_{j != i} sigma(q_ij - 1) sigma(q_ij + 1) / sigma(q_ij)^2)^{1/2}`.
pub fn rs_f(s: &RSState) -> Vec<C64> {
    rs_products(&s.q, &s.lat)
        .iter()
        .enumerate()
        .map(|(i, pr)| s.sheet[i] * s.p[i].exp() * pr.sqrt())
        .collect()
}

pub fn rs_hamiltonian(s: &RSState) -> C64 {
    rs_f(s).iter().sum()
}

/// `L_ij = f_i Phi(q_i - q_j - 1, z)`.
pub fn rs_lax(s: &RSState, z: C64) -> Result<CMatrix> {
    let n = s.n();
    let f = rs_f(s);
    let mut l = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = f[i] * s.lat.phi_lame(s.q[i] - s.q[j] - 1.0, z)?;
        }
    }
    Ok(l)
}

fn rs_rhs(s: &RSState) -> (Vec<C64>, Vec<C64>) {
    let n = s.n();
    let qdot = rs_f(s);
    let h = 1e-4;
    let mut pdot = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        let at = |d: f64| {
            let mut t = s.clone();
            t.q[i] += d;
            rs_hamiltonian(&t)
        };
        let d = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        pdot[i] = -d;
    }
    (qdot, pdot)
}

/// RK4 flow of the RS Hamiltonian with `dq/dt = dH/dp` and `dp/dt` from a
/// finite-difference gradient. Square-root sheets are continued along the
/// path; a crossing of the negative real axis by any product raises
/// `BranchAmbiguity`.
pub fn rs_flow(s0: &RSState, dt: f64, steps: usize) -> Result<Vec<RSState>> {
    let n = s0.n();
    let mut traj = vec![s0.clone()];
    let mut s = s0.clone();
    let mut prev = rs_products(&s.q, &s.lat);
    for step in 0..steps {
        let shift = |a: &RSState, kq: &[C64], kp: &[C64], h: f64| {
            let mut t = a.clone();
            for i in 0..n {
                t.q[i] += h * kq[i];
                t.p[i] += h * kp[i];
            }
            t
        };
        let (k1q, k1p) = rs_rhs(&s);
        let (k2q, k2p) = rs_rhs(&shift(&s, &k1q, &k1p, dt / 2.0));
        let (k3q, k3p) = rs_rhs(&shift(&s, &k2q, &k2p, dt / 2.0));
        let (k4q, k4p) = rs_rhs(&shift(&s, &k3q, &k3p, dt));
        for i in 0..n {
            s.q[i] += dt / 6.0 * (k1q[i] + 2.0 * k2q[i] + 2.0 * k3q[i] + k4q[i]);
            s.p[i] += dt / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
        }
        let cur = rs_products(&s.q, &s.lat);
        for i in 0..n {
            let crossed = prev[i].re < 0.0 && cur[i].re < 0.0 && prev[i].im * cur[i].im < 0.0;
            if crossed {
                return Err(Error::BranchAmbiguity(format!(
                    "product for particle {i} crossed the negative real axis at step {}",
                    step + 1
                )));
            }
        }
        if s.q.iter().chain(&s.p).any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::StepRejected(format!("non-finite state at step {}", step + 1)));
        }
        prev = cur;
        traj.push(s.clone());
    }
    Ok(traj)
}

// ---------------------------------------------------------------------------
// Nested Bethe equations

#[derive(Debug, Clone, PartialEq)]
pub struct BetheTrajectory {
    pub k: usize,
    /// Level index of `levels[0]`.
    pub n0: i64,
    pub levels: Vec<Vec<C64>>,
    pub lat: EllipticLattice,
}

impl BetheTrajectory {
    pub fn new(n0: i64, levels: Vec<Vec<C64>>, lat: EllipticLattice) -> Result<Self> {
        let k = levels.first().map(|l| l.len()).unwrap_or(0);
        if k == 0 || levels.iter().any(|l| l.len() != k) {
            return Err(Error::InvalidArgument("levels must be non-empty with equal length".into()));
        }
        Ok(Self { k, n0, levels, lat })
    }

    /// Levels `q_i^n = seeds_i + n * step` for `n` in `n0..n0+len`.
    pub fn linear(seeds: &[C64], step: C64, n0: i64, len: usize, lat: EllipticLattice) -> Result<Self> {
        let levels = (0..len)
            .map(|m| seeds.iter().map(|q| q + (n0 + m as i64) as f64 * step).collect())
            .collect();
        Self::new(n0, levels, lat)
    }

    pub fn level(&self, n: i64) -> Option<&Vec<C64>> {
        let idx = n - self.n0;
        if idx < 0 {
            return None;
        }
        self.levels.get(idx as usize)
    }

    fn factors(&self, n: i64, i: usize) -> Result<(C64, Vec<[C64; 6]>)> {
        let (prev, cur, next) = match (self.level(n - 1), self.level(n), self.level(n + 1)) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::InvalidArgument(format!("levels {}..={} not available", n - 1, n + 1))),
        };
        if i >= self.k {
            return Err(Error::InvalidArgument(format!("index {i} out of range")));
        }
        let qi = cur[i];
        let mut args = Vec::with_capacity(self.k);
        for j in 0..self.k {
            args.push([
                qi - next[j],
                qi - 1.0 - cur[j],
                qi - prev[j] + 1.0,
                qi - prev[j],
                next[i] - cur[j],
                qi - next[j] - 1.0,
            ]);
        }
        let mut num = C64::new(1.0, 0.0);
        let mut den = C64::new(1.0, 0.0);
        for a in &args {
            for (k, x) in a.iter().enumerate() {
                if self.lat.lattice_distance(*x) < self.lat.guard_radius() {
                    return Err(Error::NearSingularInput(format!("sigma argument {x} on the lattice")));
                }
                let s = self.lat.sigma(*x);
                if k < 3 {
                    num *= s;
                } else {
                    den *= s;
                }
            }
        }
        if den.norm() == 0.0 {
            return Err(Error::NearSingularInput("vanishing denominator".into()));
        }
        Ok((num / den, args))
    }
}

/// Left-hand side of the Bethe equation at `(n, i)` plus one.
pub fn bethe_residual(traj: &BetheTrajectory, n: i64, i: usize) -> Result<C64> {
    let (r, _) = traj.factors(n, i)?;
    Ok(r + 1.0)
}

/// Solves the Bethe equations on all interior levels with the first and
/// last level held fixed. Newton homotopy from the seed: the system
/// `R(q) = (1 - s) R(q_seed)` is followed from `s = 0` to `s = 1` in
/// `10` stages with damped Newton at each stage. Returns the solved
/// trajectory and the final maximum residual.
pub fn bethe_solve(seed: &BetheTrajectory, tol: f64, max_iter: usize) -> Result<(BetheTrajectory, f64)> {
    let k = seed.k;
    let nl = seed.levels.len();
    if nl < 3 {
        return Err(Error::InvalidArgument("need at least three levels".into()));
    }
    let unknowns = k * (nl - 2);
    let eval = |t: &BetheTrajectory| -> Result<Vec<C64>> {
        let mut r = Vec::with_capacity(unknowns);
        for m in 1..nl - 1 {
            for i in 0..k {
                r.push(bethe_residual(t, t.n0 + m as i64, i)?);
            }
        }
        Ok(r)
    };
    let maxnorm = |r: &[C64]| {
        r.iter()
            .map(|v| if v.re.is_finite() && v.im.is_finite() { v.norm() } else { f64::INFINITY })
            .fold(0.0, f64::max)
    };
    let r0 = eval(seed)?;
    let stages = 10;
    let mut cur = seed.clone();
    for stage in 1..=stages {
        let s = stage as f64 / stages as f64;
        let target: Vec<C64> = r0.iter().map(|v| (1.0 - s) * v).collect();
        let shifted = |t: &BetheTrajectory| -> Result<Vec<C64>> {
            Ok(eval(t)?.iter().zip(&target).map(|(a, b)| a - b).collect())
        };
        let stage_tol = if stage == stages { tol } else { 1e-6 };
        let mut r = shifted(&cur)?;
        let mut done = false;
        for _ in 0..max_iter {
            let rn = maxnorm(&r);
            if rn <= stage_tol {
                done = true;
                break;
            }
            let jac = bethe_jacobian(&cur)?;
            let rhs = nalgebra::DVector::from_iterator(unknowns, r.iter().map(|v| -v));
            let step = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::NearSingularInput("singular Bethe Jacobian".into()))?;
            let mut lambda = 1.0;
            loop {
                let mut trial = cur.clone();
                for m in 1..nl - 1 {
                    for i in 0..k {
                        trial.levels[m][i] += lambda * step[(m - 1) * k + i];
                    }
                }
                if let Ok(rt) = shifted(&trial) {
                    if maxnorm(&rt) < rn {
                        cur = trial;
                        r = rt;
                        break;
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-8 {
                    if rn <= 10.0 * stage_tol {
                        done = true;
                        break;
                    }
                    return Err(Error::StepRejected(format!("Bethe line search failed at stage {stage}")));
                }
            }
            if done {
                break;
            }
        }
        if !done && maxnorm(&r) > stage_tol {
            return Err(Error::StepRejected(format!(
                "Bethe Newton did not converge at stage {stage} (residual {:e})",
                maxnorm(&r)
            )));
        }
    }
    let rn = maxnorm(&eval(&cur)?);
    Ok((cur, rn))
}

// Analytic Jacobian of the residuals with respect to the interior levels:
// d(ratio)/dq = ratio * sum of +-zeta(argument) terms.
pub fn bethe_jacobian(t: &BetheTrajectory) -> Result<CMatrix> {
    let k = t.k;
    let nl = t.levels.len();
    let unknowns = k * (nl - 2);
    let mut jac = CMatrix::zeros(unknowns, unknowns);
    let col = |m: usize, j: usize| -> Option<usize> {
        if m >= 1 && m < nl - 1 {
            Some((m - 1) * k + j)
        } else {
            None
        }
    };
    for m in 1..nl - 1 {
        for i in 0..k {
            let row = (m - 1) * k + i;
            let (ratio, args) = t.factors(t.n0 + m as i64, i)?;
            for (j, a) in args.iter().enumerate() {
                let z: Vec<C64> = a.iter().map(|x| t.lat.zeta_w(*x)).collect::<Result<_>>()?;
                // (argument index, sign in the log-ratio, level offset of the subtracted q_j)
                let terms: [(usize, f64, i64); 6] =
                    [(0, 1.0, 1), (1, 1.0, 0), (2, 1.0, -1), (3, -1.0, -1), (4, -1.0, 0), (5, -1.0, 1)];
                for (idx, sgn, dl) in terms {
                    let zv = sgn * z[idx] * ratio;
                    // argument 4 is q_i^{m+1} - q_j^m, the others q_i^m - q_j^{...}
                    let (plus_level, plus_idx, minus_level) = if idx == 4 {
                        (m + 1, i, m)
                    } else {
                        (m, i, (m as i64 + dl) as usize)
                    };
                    if let Some(c) = col(plus_level, plus_idx) {
                        jac[(row, c)] += zv;
                    }
                    if let Some(c) = col(minus_level, j) {
                        jac[(row, c)] -= zv;
                    }
                }
            }
        }
    }
    Ok(jac)
}

// ---------------------------------------------------------------------------
// Double-Bloch functions and the heat-equation reduction

/// `psi(x) = sum_i c_i Phi(x - q_i, z) e^{k x}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleBloch {
    pub qs: Vec<C64>,
    pub cs: Vec<C64>,
    pub z: C64,
    pub k: C64,
    pub lat: EllipticLattice,
}

pub fn double_bloch_assemble(qs: &[C64], cs: &[C64], z: C64, k: C64, lat: &EllipticLattice) -> Result<DoubleBloch> {
    if qs.len() != cs.len() {
        return Err(Error::InvalidArgument("qs and cs differ in length".into()));
    }
    for i in 0..qs.len() {
        for j in (i + 1)..qs.len() {
            if lat.lattice_distance(qs[i] - qs[j]) < lat.guard_radius() {
                return Err(Error::NearSingularInput(format!("poles {i} and {j} coincide")));
            }
        }
    }
    lat.zeta_w(z).map_err(singular)?;
    Ok(DoubleBloch {
        qs: qs.to_vec(),
        cs: cs.to_vec(),
        z,
        k,
        lat: *lat,
    })
}

impl DoubleBloch {
    pub fn eval(&self, x: C64) -> Result<C64> {
        let mut s = C64::new(0.0, 0.0);
        for (q, c) in self.qs.iter().zip(&self.cs) {
            s += c * self.lat.phi_lame(x - q, self.z)?;
        }
        Ok(s * (self.k * x).exp())
    }

    /// `B_alpha = T_alpha(z) e^{2 omega_alpha k}`.
    pub fn multipliers(&self) -> Result<BlochMultipliers> {
        let t = self.lat.bloch_multipliers(self.z)?;
        Ok(BlochMultipliers {
            b1: t.b1 * (2.0 * self.lat.omega1 * self.k).exp(),
            b2: t.b2 * (2.0 * self.lat.omega2 * self.k).exp(),
        })
    }

    /// Gauge `psi -> psi e^{a x}`.
    pub fn gauged(&self, a: C64) -> Self {
        Self { k: self.k + a, ..self.clone() }
    }
}

/// Residuals of the double-Bloch reduction for one spectral value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatReduction {
    pub k: C64,
    /// Smallest singular value of `L + 2k I`, relative to `1 + ||L||`.
    pub residual_l: f64,
    /// Drift of the `dC/dt = M C` evolved vector out of the kernel of `L(t) + 2k I`.
    pub residual_m: f64,
    /// Max over the grid of `|(d_t - d_x^2 + u) psi| / (1 + |psi|)`.
    pub heat_residual: f64,
}

/// Values of `k` admitted by the reduction: `k = -lambda/2` for the
/// eigenvalues `lambda` of `L(z)`.
pub fn reduction_spectrum(s: &CMState, z: C64) -> Result<Vec<C64>> {
    let l = cm_lax(s, z)?;
    let ev = eigenvalues(&l)?;
    let scale = 1.0 + l.norm();
    for a in 0..ev.len() {
        for b in (a + 1)..ev.len() {
            if (ev[a] - ev[b]).norm() < 1e-8 * scale {
                return Err(Error::DegenerateEigenvalue(format!("eigenvalues {a} and {b} coincide")));
            }
        }
    }
    Ok(ev.iter().map(|l| -0.5 * l).collect())
}

fn kernel_vector(a: &CMatrix) -> (Vec<C64>, f64) {
    let svd = a.clone().svd(false, true);
    let (idx, smin) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, s)| (i, *s))
        .expect("non-empty matrix");
    let vt = svd.v_t.expect("v_t requested");
    (vt.row(idx).iter().map(|v| v.conj()).collect(), smin)
}

// RK4 for (q, p, C) with dC/dt = M C.
fn evolve_qpc(s: &CMState, c: &[C64], z: C64, kappa: f64, t: f64, substeps: usize) -> Result<(CMState, Vec<C64>)> {
    let n = s.n();
    let dt = t / substeps as f64;
    let rhs = |q: &[C64], p: &[C64], c: &[C64]| -> Result<(Vec<C64>, Vec<C64>, Vec<C64>)> {
        let st = CMState { q: q.to_vec(), p: p.to_vec(), lat: s.lat };
        let m = cm_m_matrix(&st, z)?;
        let cv = nalgebra::DVector::from_column_slice(c);
        let cd = &m * cv;
        Ok((p.to_vec(), cm_forces(q, &s.lat, kappa)?, cd.iter().cloned().collect()))
    };
    let add = |a: &[C64], b: &[C64], h: f64| -> Vec<C64> { a.iter().zip(b).map(|(x, y)| x + h * y).collect() };
    let (mut q, mut p, mut cc) = (s.q.clone(), s.p.clone(), c.to_vec());
    for _ in 0..substeps {
        let (a1, b1, c1) = rhs(&q, &p, &cc)?;
        let (a2, b2, c2) = rhs(&add(&q, &a1, dt / 2.0), &add(&p, &b1, dt / 2.0), &add(&cc, &c1, dt / 2.0))?;
        let (a3, b3, c3) = rhs(&add(&q, &a2, dt / 2.0), &add(&p, &b2, dt / 2.0), &add(&cc, &c2, dt / 2.0))?;
        let (a4, b4, c4) = rhs(&add(&q, &a3, dt), &add(&p, &b3, dt), &add(&cc, &c3, dt))?;
        for i in 0..n {
            q[i] += dt / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
            p[i] += dt / 6.0 * (b1[i] + 2.0 * b2[i] + 2.0 * b3[i] + b4[i]);
            cc[i] += dt / 6.0 * (c1[i] + 2.0 * c2[i] + 2.0 * c3[i] + c4[i]);
        }
    }
    Ok((CMState::new(q, p, s.lat)?, cc))
}

/// Grid of sample points in the fundamental cell, `m x m` nodes,
/// skipping nodes within `0.05 |omega1|` of a pole.
pub fn cell_grid(lat: &EllipticLattice, poles: &[C64], m: usize) -> Vec<C64> {
    let mut pts = Vec::new();
    for a in 0..m {
        for b in 0..m {
            let u = -0.9 + 1.8 * (a as f64 + 0.5) / m as f64;
            let v = -0.9 + 1.8 * (b as f64 + 0.5) / m as f64;
            let x = u * lat.omega1 + v * lat.omega2;
            if poles.iter().all(|q| lat.lattice_distance(x - q) > 0.05 * lat.omega1.norm()) {
                pts.push(x);
            }
        }
    }
    pts
}

/// How `d psi/dt` is obtained in the heat residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeDerivative {
    /// Chain rule along the flow: `dq/dt = p`, `dC/dt = M C`.
    Flow,
    /// Five-point difference of `psi` on the RK4-evolved `(q, p, C)`.
    FiniteDifference,
}

/// Heat residual for the double-Bloch ansatz with initial coefficient
/// vector `c0` (not necessarily in the kernel of `L + 2k I`).
pub fn heat_residual_for(s: &CMState, c0: &[C64], z: C64, k: C64, grid: &[C64], mode: TimeDerivative) -> Result<f64> {
    let kappa = calibrate_flow().kappa;
    let h = 1e-3;
    let mut states = Vec::new();
    if mode == TimeDerivative::FiniteDifference {
        for j in [-2.0, -1.0, 1.0, 2.0] {
            states.push((j, evolve_qpc(s, c0, z, kappa, j * h, 4)?));
        }
    }
    let m = cm_m_matrix(s, z)?;
    let cdot = &m * nalgebra::DVector::from_column_slice(c0);
    let psi_at = |st: &CMState, c: &[C64], x: C64, t: f64| -> Result<C64> {
        let mut v = C64::new(0.0, 0.0);
        for (q, ci) in st.q.iter().zip(c) {
            v += ci * s.lat.phi_lame(x - q, z)?;
        }
        Ok(v * (k * x + k * k * t).exp())
    };
    let mut worst: f64 = 0.0;
    for &x in grid {
        let mut psi = C64::new(0.0, 0.0);
        let mut psi_xx = C64::new(0.0, 0.0);
        let mut psi_t = C64::new(0.0, 0.0);
        let mut u = C64::new(0.0, 0.0);
        for (i, (q, ci)) in s.q.iter().zip(c0).enumerate() {
            let [f, f1, f2] = s.lat.phi_lame_jet(x - q, z)?;
            psi += ci * f;
            psi_xx += ci * (f2 + 2.0 * k * f1 + k * k * f);
            psi_t += cdot[i] * f - ci * s.p[i] * f1 + k * k * ci * f;
            u += 2.0 * s.lat.wp(x - q).map_err(singular)?;
        }
        let e = (k * x).exp();
        psi *= e;
        psi_xx *= e;
        psi_t *= e;
        if mode == TimeDerivative::FiniteDifference {
            let v: Vec<C64> = states
                .iter()
                .map(|(j, (st, c))| psi_at(st, c, x, j * h))
                .collect::<Result<_>>()?;
            psi_t = (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h);
        }
        let r = psi_t - psi_xx + u * psi;
        worst = worst.max(r.norm() / (1.0 + psi.norm()));
    }
    Ok(worst)
}

/// Builds `u = 2 sum wp(x - q_i)`, solves `(L(z) + 2k I) C = 0`, evolves
/// `(q, p, C)` with `dC/dt = M C` and measures the heat-equation defect of
/// `psi = sum c_i Phi(x - q_i, z) e^{k x + k^2 t}` on a grid.
pub fn heat_to_lax_reduction(s: &CMState, z: C64, k: C64) -> Result<HeatReduction> {
    let n = s.n();
    let l = cm_lax(s, z)?;
    let a = &l + CMatrix::identity(n, n) * (2.0 * k);
    let (c0, smin) = kernel_vector(&a);
    let residual_l = smin / (1.0 + l.norm());
    let kappa = calibrate_flow().kappa;
    let mut residual_m: f64 = 0.0;
    for t in [-4e-3, 4e-3] {
        let (st, c) = evolve_qpc(s, &c0, z, kappa, t, 8)?;
        let lt = cm_lax(&st, z)?;
        let at = &lt + CMatrix::identity(n, n) * (2.0 * k);
        let cv = nalgebra::DVector::from_column_slice(&c);
        residual_m = residual_m.max((&at * &cv).norm() / (cv.norm() * (1.0 + lt.norm())));
    }
    let grid = cell_grid(&s.lat, &s.q, 6);
    let heat_residual = heat_residual_for(s, &c0, z, k, &grid, TimeDerivative::Flow)?;
    Ok(HeatReduction {
        k,
        residual_l,
        residual_m,
        heat_residual,
    })
}

/// Same as [`heat_to_lax_reduction`] but with the kernel vector perturbed
/// by `noise` (relative, deterministic direction) before evolution.
pub fn heat_residual_perturbed(s: &CMState, z: C64, k: C64, noise: f64) -> Result<f64> {
    let n = s.n();
    let l = cm_lax(s, z)?;
    let a = &l + CMatrix::identity(n, n) * (2.0 * k);
    let (mut c0, _) = kernel_vector(&a);
    for (i, c) in c0.iter_mut().enumerate() {
        let phase = (I * (1.0 + 2.0 * i as f64)).exp();
        *c += noise * phase / (n as f64).sqrt();
    }
    let grid = cell_grid(&s.lat, &s.q, 6);
    heat_residual_for(s, &c0, z, k, &grid, TimeDerivative::Flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::c;

    #[test]
    fn calibration_prefers_lax_consistent_flow() {
        let cal = calibrate_flow();
        assert_eq!(cal.kappa, 4.0);
        let best = cal.candidates.iter().find(|c| c.0 == 4.0).unwrap().1;
        assert!(best < 1e-10);
    }

    #[test]
    fn single_particle() {
        let lat = EllipticLattice::unit_square();
        let s = CMState::new(vec![c(0.1, 0.0)], vec![c(0.5, 0.2)], lat).unwrap();
        assert_eq!(cm_hamiltonian(&s).unwrap(), 0.5 * c(0.5, 0.2) * c(0.5, 0.2));
        assert_eq!(lax_residual(&s, c(0.3, 0.1)).unwrap(), 0.0);
        let m = cm_m_matrix(&s, c(0.3, 0.1)).unwrap();
        assert_eq!(m[(0, 0)], lat.wp(c(0.3, 0.1)).unwrap());
    }

    #[test]
    fn newton_identities_on_diagonal() {
        let l = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0)]));
        let inv = spectral_invariants_of(&l, 3);
        let expect = [1.0, -6.0, 11.0, -6.0];
        for (a, b) in inv.charpoly.iter().zip(expect) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
