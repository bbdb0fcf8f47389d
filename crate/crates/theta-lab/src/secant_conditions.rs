//! Residual evaluators for the flex, tangent-trisecant, trisecant and
//! quadrisecant characterisations and for the two involution criteria.
//!
//! Every evaluator returns a dimensionless residual. Points of the theta
//! divisor are reduced modulo the lattice before evaluation, and every
//! normalisation is stated on the function that uses it.

use crate::error::{Error, Result};
use crate::numerics::{lstsq, median, C64};
use crate::siegel_theta::{
    theta_series_derivs, theta_with_char_derivs, HalfCharacteristic, PeriodMatrix, TruncationPolicy,
};
use crate::tau_divisor::{find_zeros, track_zero, TauLine, Window};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Optional constants attached to a datum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SecantConstants {
    pub b1: Option<C64>,
    pub b2: Option<C64>,
    pub b3: Option<C64>,
    pub c1_plus: Option<C64>,
    pub c1_minus: Option<C64>,
    pub c2_plus: Option<C64>,
    pub c2_minus: Option<C64>,
    pub c3: Option<C64>,
    pub omega0: Option<C64>,
    pub omega1: Option<C64>,
    pub omega2: Option<C64>,
}

/// Which secant statement a datum is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecantMode {
    Flex,
    TangentTrisecant,
    Trisecant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecantDatum {
    pub b: PeriodMatrix,
    pub u: Vec<C64>,
    pub v: Vec<C64>,
    pub w: Vec<C64>,
    pub a: Vec<C64>,
    pub p: C64,
    pub e: C64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_shift: Option<Vec<C64>>,
    #[serde(default)]
    pub constants: SecantConstants,
}

impl SecantDatum {
    /// Datum with `W = 0`, no shift and no constants.
    pub fn new(b: PeriodMatrix, u: Vec<C64>, v: Vec<C64>, a: Vec<C64>, p: C64, e: C64) -> Result<Self> {
        let g = b.genus();
        if u.len() != g || v.len() != g || a.len() != g {
            return Err(Error::InvalidArgument(format!("U, V, A must have length {g}")));
        }
        if u.iter().all(|x| x.norm() == 0.0) {
            return Err(Error::InvalidArgument("U must be non-zero".into()));
        }
        Ok(Self {
            b,
            u,
            v,
            w: vec![C64::new(0.0, 0.0); g],
            a,
            p,
            e,
            zeta_shift: None,
            constants: SecantConstants::default(),
        })
    }

    pub fn with_w(mut self, w: Vec<C64>) -> Self {
        self.w = w;
        self
    }

    pub fn with_zeta_shift(mut self, z: Vec<C64>) -> Self {
        self.zeta_shift = Some(z);
        self
    }

    pub fn with_pe(mut self, p: C64, e: C64) -> Self {
        self.p = p;
        self.e = e;
        self
    }

    pub fn genus(&self) -> usize {
        self.b.genus()
    }

    /// Checks the distinctness preconditions of `mode`.
    pub fn check_mode(&self, mode: SecantMode) -> Result<()> {
        let same = |x: &[C64], y: &[C64]| lattice_equivalent(&self.b, x, y);
        match mode {
            SecantMode::Flex => Ok(()),
            SecantMode::TangentTrisecant => {
                if same(&self.u, &self.a) {
                    Err(Error::InvalidArgument("U = A mod lattice".into()))
                } else {
                    Ok(())
                }
            }
            SecantMode::Trisecant => {
                if same(&self.u, &self.v) || same(&self.u, &self.a) || same(&self.v, &self.a) {
                    Err(Error::InvalidArgument("U, V, A must be pairwise distinct mod lattice".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("datum serialises");
        hex(&Sha256::digest(s.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Whether `x - y` lies in the lattice to within `1e-9`.
pub fn lattice_equivalent(b: &PeriodMatrix, x: &[C64], y: &[C64]) -> bool {
    let d: Vec<C64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
    let (r, _, _) = b.reduce(&d);
    r.iter().all(|v| v.norm() < 1e-9)
}

/// Where a divisor point came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub z0: Vec<C64>,
    pub window: Window,
    pub x: C64,
}

/// Points of the theta divisor together with the lines they were found on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaDivisorSample {
    pub points: Vec<Vec<C64>>,
    pub provenance: Vec<SampleProvenance>,
    pub seed: u64,
}

impl ThetaDivisorSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sample built from explicit points (no line provenance).
    pub fn from_points(points: Vec<Vec<C64>>) -> Self {
        let provenance = points
            .iter()
            .map(|p| SampleProvenance {
                z0: p.clone(),
                window: Window {
                    lo: C64::new(0.0, 0.0),
                    hi: C64::new(0.0, 0.0),
                },
                x: C64::new(0.0, 0.0),
            })
            .collect();
        Self {
            points,
            provenance,
            seed: 0,
        }
    }

    /// Splits into the even- and odd-indexed halves.
    pub fn split(&self) -> (Self, Self) {
        let pick = |par: usize| Self {
            points: self.points.iter().skip(par).step_by(2).cloned().collect(),
            provenance: self.provenance.iter().skip(par).step_by(2).cloned().collect(),
            seed: self.seed,
        };
        (pick(0), pick(1))
    }

    /// The same points translated by `m + B n`.
    pub fn translated(&self, b: &PeriodMatrix, m: &[i64], n: &[i64]) -> Self {
        let nc: Vec<C64> = n.iter().map(|&k| C64::new(k as f64, 0.0)).collect();
        let bn = b.apply(&nc);
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            for i in 0..p.len() {
                p[i] += m[i] as f64 + bn[i];
            }
        }
        out
    }
}

/// Samples `count` simple points of the theta divisor by locating zeros of
/// `x -> theta(U x + Z0)` on random lines. Lines are drawn from a ChaCha8
/// stream seeded with `seed`.
pub fn sample_theta_divisor(b: &PeriodMatrix, u: &[C64], count: usize, seed: u64) -> Result<ThetaDivisorSample> {
    let g = b.genus();
    if u.len() != g || u.iter().all(|x| x.norm() == 0.0) {
        return Err(Error::InvalidArgument(format!("U must be a non-zero vector of length {g}")));
    }
    let mut out = ThetaDivisorSample {
        points: Vec::new(),
        provenance: Vec::new(),
        seed,
    };
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let un = u.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let half = 1.0 / un;
    let max_lines = 8 + 4 * count;
    let pol = TruncationPolicy::default();
    for _ in 0..max_lines {
        let re: Vec<C64> = (0..g).map(|_| C64::new(rng.random_range(0.0..1.0), 0.0)).collect();
        let im: Vec<C64> = (0..g).map(|_| C64::new(rng.random_range(0.0..1.0), 0.0)).collect();
        let bi = b.apply(&im);
        let z0: Vec<C64> = (0..g).map(|i| re[i] + bi[i]).collect();
        let jitter = C64::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)) * half;
        let window = Window::centered(jitter, half * 1.01, half * 0.99)?;
        let line = match TauLine::new(b.clone(), u.to_vec(), vec![C64::new(0.0, 0.0); g], z0.clone(), window, [0.0, 0.0]) {
            Ok(l) => l.with_policy(pol),
            Err(_) => continue,
        };
        let zeros = match find_zeros(&line, 0.0) {
            Ok(z) => z,
            Err(Error::BoundaryZero(_)) | Err(Error::TruncationInsufficient(_)) => continue,
            Err(e) => return Err(e),
        };
        for z in zeros.iter().filter(|z| z.simple) {
            out.points.push(line.point(z.q, 0.0));
            out.provenance.push(SampleProvenance {
                z0: z0.clone(),
                window,
                x: z.q,
            });
            if out.points.len() == count {
                return Ok(out);
            }
        }
    }
    Err(Error::InsufficientZeros(format!(
        "found {} of {count} simple divisor points on {max_lines} lines",
        out.points.len()
    )))
}

/// Per-point residuals of a condition on a divisor sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResidual {
    pub max: f64,
    pub median: f64,
    pub per_point: Vec<Option<f64>>,
    /// Indices of points skipped because a theta factor vanished.
    pub skipped: Vec<usize>,
}

fn collect_sample(per_point: Vec<Option<f64>>) -> Result<SampleResidual> {
    let vals: Vec<f64> = per_point.iter().flatten().cloned().collect();
    let skipped: Vec<usize> = per_point
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(i, _)| i)
        .collect();
    if vals.is_empty() && !per_point.is_empty() {
        return Err(Error::FactorVanishes(format!("all {} sample points skipped", per_point.len())));
    }
    Ok(SampleResidual {
        max: vals.iter().cloned().fold(0.0, f64::max),
        median: if vals.is_empty() { 0.0 } else { median(&vals) },
        per_point,
        skipped,
    })
}

fn shifted(z: &[C64], terms: &[(f64, &[C64])]) -> Vec<C64> {
    let mut out = z.to_vec();
    for (s, v) in terms {
        for i in 0..out.len() {
            out[i] += *s * v[i];
        }
    }
    out
}

fn theta_at(b: &PeriodMatrix, z: &[C64], pol: &TruncationPolicy) -> Result<C64> {
    Ok(theta_series_derivs(z, b, &vec![0.0; b.genus()], &[], &[vec![]], pol)?[0])
}

fn jet_uv(b: &PeriodMatrix, z: &[C64], u: &[C64], v: &[C64], orders: &[[usize; 2]], pol: &TruncationPolicy) -> Result<Vec<C64>> {
    let multis: Vec<Vec<usize>> = orders.iter().map(|o| o.to_vec()).collect();
    theta_series_derivs(z, b, &vec![0.0; b.genus()], &[u.to_vec(), v.to_vec()], &multis, pol)
}

// ---------------------------------------------------------------------------
// Linear problems

/// Least-squares fit of the two scalar constants of a linear problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub p: C64,
    pub e: C64,
    /// Residual of the fitted constants on the fitting points.
    pub fit_residual: f64,
    pub rank: usize,
}

// Row of a problem linear in two unknowns: c0 * x0 + c1 * x1 + r = 0, plus
// magnitudes of the individual terms for normalisation.
struct LinRow {
    r: C64,
    c: [C64; 2],
    r_scale: f64,
}

impl LinRow {
    fn residual(&self, x: [C64; 2]) -> f64 {
        let num = self.r + self.c[0] * x[0] + self.c[1] * x[1];
        let den = self.r_scale + (self.c[0] * x[0]).norm() + (self.c[1] * x[1]).norm();
        if den == 0.0 {
            0.0
        } else {
            num.norm() / den
        }
    }
}

fn solve_rows(rows: &[LinRow]) -> Result<([C64; 2], usize)> {
    let n = rows.len();
    let mut a = DMatrix::<C64>::zeros(n, 2);
    let mut rhs = DVector::<C64>::zeros(n);
    for (k, row) in rows.iter().enumerate() {
        let s = row.r_scale + row.c[0].norm() + row.c[1].norm();
        let s = if s > 0.0 { s } else { 1.0 };
        a[(k, 0)] = row.c[0] / s;
        a[(k, 1)] = row.c[1] / s;
        rhs[k] = -row.r / s;
    }
    let sol = lstsq(&a, &rhs, 1e-12);
    if sol.rank < 2 {
        return Err(Error::FitDegenerate(format!("rank {} < 2", sol.rank)));
    }
    Ok(([sol.x[0], sol.x[1]], sol.rank))
}

fn divisor_guard(d0: C64, dx: C64, what: &str) -> Result<()> {
    if d0.norm() <= 1e-8 * dx.norm() || d0.norm() == 0.0 {
        return Err(Error::GridHitsDivisor(format!("{what}: |theta| = {:e}", d0.norm())));
    }
    Ok(())
}

// KP row at (x, t); unknowns (E - p^2, p).
fn kp_row(d: &SecantDatum, z: &[C64], x: C64, t: C64, pol: &TruncationPolicy) -> Result<LinRow> {
    let ords = [[0, 0], [1, 0], [2, 0], [0, 1]];
    let pt = shifted(z, &[(1.0, &d.u.iter().map(|u| u * x).collect::<Vec<_>>()), (1.0, &d.v.iter().map(|v| v * t).collect::<Vec<_>>())]);
    let den = jet_uv(&d.b, &pt, &d.u, &d.v, &ords, pol)?;
    let num = jet_uv(&d.b, &shifted(&pt, &[(1.0, &d.a)]), &d.u, &d.v, &ords, pol)?;
    divisor_guard(den[0], den[1], "KP grid point")?;
    let f = num[0] / den[0];
    let fx = (num[1] - f * den[1]) / den[0];
    let fxx = (num[2] - 2.0 * fx * den[1] - f * den[2]) / den[0];
    let ft = (num[3] - f * den[3]) / den[0];
    let lx = den[1] / den[0];
    let uu = -2.0 * (den[2] / den[0] - lx * lx);
    Ok(LinRow {
        r: ft - fxx + uu * f,
        c: [f, -2.0 * fx],
        r_scale: ft.norm() + fxx.norm() + (uu * f).norm(),
    })
}

/// Fits `(p, E)` so that `psi = theta(A + Ux + Vt + Z)/theta(Ux + Vt + Z)
/// e^{px + Et}` solves `(d_t - d_x^2 + u) psi = 0` at the points `grid`.
pub fn fit_kp_linear(d: &SecantDatum, z: &[C64], grid: &[(C64, C64)]) -> Result<LinearFit> {
    let pol = TruncationPolicy::default();
    let rows: Vec<LinRow> = grid.iter().map(|&(x, t)| kp_row(d, z, x, t, &pol)).collect::<Result<_>>()?;
    let (x, rank) = solve_rows(&rows)?;
    let p = x[1];
    let e = x[0] + p * p;
    let fit_residual = rows.iter().map(|r| r.residual(x)).fold(0.0, f64::max);
    Ok(LinearFit { p, e, fit_residual, rank })
}

/// Maximum over `grid` of `|(d_t - d_x^2 + u) psi|` divided by the sum of
/// the moduli of its terms. The `x` and `t` derivatives come from theta jets
/// along `U` and `V`.
pub fn linear_problem_residual_kp(d: &SecantDatum, z: &[C64], grid: &[(C64, C64)]) -> Result<f64> {
    let pol = TruncationPolicy::default();
    let x = [d.e - d.p * d.p, d.p];
    let mut worst: f64 = 0.0;
    for &(gx, gt) in grid {
        let row = kp_row(d, z, gx, gt, &pol)?;
        let num = row.r + row.c[0] * x[0] + row.c[1] * x[1];
        let den = row.r_scale + (d.e * row.c[0]).norm() + (d.p * d.p * row.c[0]).norm() + (d.p * row.c[1]).norm();
        worst = worst.max(if den == 0.0 { 0.0 } else { num.norm() / den });
    }
    Ok(worst)
}

// Row of d_t psi = psi(x+1) + w psi at (x, t); unknowns (E, e^p).
fn rs_row(d: &SecantDatum, z: &[C64], x: C64, t: C64, pol: &TruncationPolicy) -> Result<LinRow> {
    let ords = [[0, 0], [1, 0], [0, 1]];
    let ux: Vec<C64> = d.u.iter().map(|u| u * x).collect();
    let vt: Vec<C64> = d.v.iter().map(|v| v * t).collect();
    let pt = shifted(z, &[(1.0, &ux), (1.0, &vt)]);
    let pt1 = shifted(&pt, &[(1.0, &d.u)]);
    let d0 = jet_uv(&d.b, &pt, &d.u, &d.v, &ords, pol)?;
    let d1 = jet_uv(&d.b, &pt1, &d.u, &d.v, &ords, pol)?;
    let n0 = jet_uv(&d.b, &shifted(&pt, &[(1.0, &d.a)]), &d.u, &d.v, &ords, pol)?;
    let n1 = theta_at(&d.b, &shifted(&pt1, &[(1.0, &d.a)]), pol)?;
    divisor_guard(d0[0], d0[1], "RS grid point")?;
    divisor_guard(d1[0], d1[1], "RS shifted grid point")?;
    let f = n0[0] / d0[0];
    let ft = (n0[2] - f * d0[2]) / d0[0];
    let f1 = n1 / d1[0];
    let w = d1[2] / d1[0] - d0[2] / d0[0];
    Ok(LinRow {
        r: ft - w * f,
        c: [f, -f1],
        r_scale: ft.norm() + (w * f).norm(),
    })
}

/// Fits `(p, E)` for `d_t psi = psi(x+1) + w psi`, `w = d_t ln(tau(x+1)/tau(x))`.
pub fn fit_rs_linear(d: &SecantDatum, z: &[C64], grid: &[(C64, C64)]) -> Result<LinearFit> {
    let pol = TruncationPolicy::default();
    let rows: Vec<LinRow> = grid.iter().map(|&(x, t)| rs_row(d, z, x, t, &pol)).collect::<Result<_>>()?;
    let (x, rank) = solve_rows(&rows)?;
    let fit_residual = rows.iter().map(|r| r.residual(x)).fold(0.0, f64::max);
    Ok(LinearFit {
        p: x[1].ln(),
        e: x[0],
        fit_residual,
        rank,
    })
}

/// Normalised residual of the differential-difference linear problem.
pub fn linear_problem_residual_rs(d: &SecantDatum, z: &[C64], grid: &[(C64, C64)]) -> Result<f64> {
    let pol = TruncationPolicy::default();
    let x = [d.e, d.p.exp()];
    let mut worst: f64 = 0.0;
    for &(gx, gt) in grid {
        worst = worst.max(rs_row(d, z, gx, gt, &pol)?.residual(x));
    }
    Ok(worst)
}

// Row of psi_{n+1}(x) = psi_n(x+1) - v_n psi_n(x); unknowns (e^E, e^p).
fn bdhe_row(d: &SecantDatum, z: &[C64], x: C64, n: i64, pol: &TruncationPolicy) -> Result<LinRow> {
    let ux: Vec<C64> = d.u.iter().map(|u| u * x).collect();
    let pt = shifted(z, &[(1.0, &ux), (n as f64, &d.v)]);
    let th = |s: &[(f64, &[C64])]| theta_at(&d.b, &shifted(&pt, s), pol);
    let t00 = th(&[])?;
    let t10 = th(&[(1.0, &d.u)])?;
    let t01 = th(&[(1.0, &d.v)])?;
    let t11 = th(&[(1.0, &d.u), (1.0, &d.v)])?;
    let a00 = th(&[(1.0, &d.a)])?;
    let a10 = th(&[(1.0, &d.a), (1.0, &d.u)])?;
    let a01 = th(&[(1.0, &d.a), (1.0, &d.v)])?;
    let r = jet_uv(&d.b, &pt, &d.u, &d.v, &[[1, 0]], pol)?[0];
    for (val, what) in [(t00, "tau_n(x)"), (t10, "tau_n(x+1)"), (t01, "tau_{n+1}(x)")] {
        divisor_guard(val, r, what)?;
    }
    let vn = t00 * t11 / (t10 * t01);
    let f = a00 / t00;
    Ok(LinRow {
        r: vn * f,
        c: [a01 / t01, -a10 / t10],
        r_scale: (vn * f).norm(),
    })
}

/// Fits `(p, E)` for `psi_{n+1}(x) = psi_n(x+1) - v_n(x) psi_n(x)` at the
/// points `(x, n)`.
pub fn fit_bdhe_linear(d: &SecantDatum, z: &[C64], grid: &[(C64, i64)]) -> Result<LinearFit> {
    let pol = TruncationPolicy::default();
    let rows: Vec<LinRow> = grid.iter().map(|&(x, n)| bdhe_row(d, z, x, n, &pol)).collect::<Result<_>>()?;
    let (x, rank) = solve_rows(&rows)?;
    let fit_residual = rows.iter().map(|r| r.residual(x)).fold(0.0, f64::max);
    Ok(LinearFit {
        p: x[1].ln(),
        e: x[0].ln(),
        fit_residual,
        rank,
    })
}

/// Normalised residual of the difference linear problem.
pub fn linear_problem_residual_bdhe(d: &SecantDatum, z: &[C64], grid: &[(C64, i64)]) -> Result<f64> {
    let pol = TruncationPolicy::default();
    let x = [d.e.exp(), d.p.exp()];
    let mut worst: f64 = 0.0;
    for &(gx, n) in grid {
        worst = worst.max(bdhe_row(d, z, gx, n, &pol)?.residual(x));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Conditions on the level two theta functions

fn char_rows<F>(d: &SecantDatum, f: F) -> Result<Vec<LinRow>>
where
    F: Fn(&HalfCharacteristic) -> Result<LinRow> + Sync + Send,
{
    HalfCharacteristic::all(d.genus()).par_iter().map(f).collect()
}

fn flex_rows(d: &SecantDatum, pol: &TruncationPolicy) -> Result<Vec<LinRow>> {
    let w: Vec<C64> = d.a.iter().map(|a| a * 0.5).collect();
    let multis = vec![vec![0, 0], vec![1, 0], vec![2, 0], vec![0, 1]];
    char_rows(d, |eps| {
        let j = theta_with_char_derivs(eps, &w, &d.b, &[d.u.clone(), d.v.clone()], &multis, pol)?;
        Ok(LinRow {
            r: j[3] - j[2],
            c: [j[0], -2.0 * j[1]],
            r_scale: j[3].norm() + j[2].norm(),
        })
    })
}

fn max_rows(rows: &[LinRow], x: [C64; 2]) -> f64 {
    let num = rows
        .iter()
        .map(|r| (r.r + r.c[0] * x[0] + r.c[1] * x[1]).norm())
        .fold(0.0, f64::max);
    let den = rows
        .iter()
        .map(|r| r.r_scale + (r.c[0] * x[0]).norm() + (r.c[1] * x[1]).norm())
        .fold(0.0, f64::max);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Flex condition: maximum over characteristics of
/// `|(d_V - d_U^2 - 2p d_U + E - p^2) Theta[eps,0](A/2)|`, divided by the
/// largest sum of term moduli over the characteristics.
pub fn flex_residual_b(d: &SecantDatum, pol: &TruncationPolicy) -> Result<f64> {
    let rows = flex_rows(d, pol)?;
    let a = d.e - d.p * d.p;
    let num = rows
        .iter()
        .map(|r| (r.r + r.c[0] * a + r.c[1] * d.p).norm())
        .fold(0.0, f64::max);
    let den = rows
        .iter()
        .map(|r| r.r_scale + (r.c[0] * d.e).norm() + (r.c[0] * d.p * d.p).norm() + (r.c[1] * d.p).norm())
        .fold(0.0, f64::max);
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Best `(p, E)` for the flex condition in the least-squares sense.
pub fn fit_flex_b(d: &SecantDatum, pol: &TruncationPolicy) -> Result<LinearFit> {
    let rows = flex_rows(d, pol)?;
    let (x, rank) = solve_rows(&rows)?;
    let p = x[1];
    let fitted = d.clone().with_pe(p, x[0] + p * p);
    Ok(LinearFit {
        p,
        e: fitted.e,
        fit_residual: flex_residual_b(&fitted, pol)?,
        rank,
    })
}

fn tangent_rows(d: &SecantDatum, pol: &TruncationPolicy) -> Result<Vec<LinRow>> {
    let wm: Vec<C64> = (0..d.genus()).map(|i| (d.a[i] - d.u[i]) * 0.5).collect();
    let wp: Vec<C64> = (0..d.genus()).map(|i| (d.a[i] + d.u[i]) * 0.5).collect();
    char_rows(d, |eps| {
        let jm = theta_with_char_derivs(eps, &wm, &d.b, &[d.v.clone()], &[vec![0], vec![1]], pol)?;
        let jp = theta_with_char_derivs(eps, &wp, &d.b, &[], &[vec![]], pol)?;
        Ok(LinRow {
            r: jm[1],
            c: [jm[0], -jp[0]],
            r_scale: jm[1].norm(),
        })
    })
}

/// Tangent-trisecant condition: maximum over characteristics of
/// `|d_V Theta((A-U)/2) - e^p Theta((A+U)/2) + E Theta((A-U)/2)|` over the
/// largest sum of term moduli.
pub fn tangent_trisecant_residual_b(d: &SecantDatum, pol: &TruncationPolicy) -> Result<f64> {
    d.check_mode(SecantMode::TangentTrisecant)?;
    Ok(max_rows(&tangent_rows(d, pol)?, [d.e, d.p.exp()]))
}

pub fn fit_tangent_trisecant_b(d: &SecantDatum, pol: &TruncationPolicy) -> Result<LinearFit> {
    d.check_mode(SecantMode::TangentTrisecant)?;
    let rows = tangent_rows(d, pol)?;
    let (x, rank) = solve_rows(&rows)?;
    Ok(LinearFit {
        p: x[1].ln(),
        e: x[0],
        fit_residual: max_rows(&rows, x),
        rank,
    })
}

fn trisecant_rows(d: &SecantDatum, pol: &TruncationPolicy) -> Result<Vec<LinRow>> {
    let g = d.genus();
    let w1: Vec<C64> = (0..g).map(|i| (d.a[i] - d.u[i] - d.v[i]) * 0.5).collect();
    let w2: Vec<C64> = (0..g).map(|i| (d.a[i] + d.u[i] - d.v[i]) * 0.5).collect();
    let w3: Vec<C64> = (0..g).map(|i| (d.a[i] + d.v[i] - d.u[i]) * 0.5).collect();
    char_rows(d, |eps| {
        let t = |w: &[C64]| theta_with_char_derivs(eps, w, &d.b, &[], &[vec![]], pol).map(|v| v[0]);
        let (a, b, c) = (t(&w1)?, t(&w2)?, t(&w3)?);
        Ok(LinRow {
            r: a,
            c: [b, -c],
            r_scale: a.norm(),
        })
    })
}

/// Trisecant condition: maximum over characteristics of
/// `|Theta((A-U-V)/2) + e^p Theta((A+U-V)/2) - e^E Theta((A+V-U)/2)|` over
/// the largest sum of term moduli.
pub fn trisecant_residual_b(d: &SecantDatum, pol: &TruncationPolicy) -> Result<f64> {
    d.check_mode(SecantMode::Trisecant)?;
    Ok(max_rows(&trisecant_rows(d, pol)?, [d.p.exp(), d.e.exp()]))
}

pub fn fit_trisecant_b(d: &SecantDatum, pol: &TruncationPolicy) -> Result<LinearFit> {
    d.check_mode(SecantMode::Trisecant)?;
    let rows = trisecant_rows(d, pol)?;
    let (x, rank) = solve_rows(&rows)?;
    Ok(LinearFit {
        p: x[0].ln(),
        e: x[1].ln(),
        fit_residual: max_rows(&rows, x),
        rank,
    })
}

// ---------------------------------------------------------------------------
// Conditions on the theta divisor

fn per_point<F>(b: &PeriodMatrix, sample: &ThetaDivisorSample, f: F) -> Result<SampleResidual>
where
    F: Fn(&[C64]) -> Result<Option<f64>> + Sync,
{
    let vals: Vec<Option<f64>> = sample
        .points
        .par_iter()
        .map(|z| {
            let (zr, _, _) = b.reduce(z);
            f(&zr)
        })
        .collect::<Result<_>>()?;
    collect_sample(vals)
}

/// Flex condition on the divisor:
/// `[(th_V)^2 - (th_UU)^2] th_UU + 2[th_UU th_UUU - th_V th_UV] th_U
///  + [th_VV - th_UUUU] th_U^2`, divided by `|th_U|^3 (1 + |2w|)` where `w`
/// is the Laurent coefficient of `u = -2 d_x^2 ln theta(Ux + Z)` at the
/// zero. The normalised value equals the pole-dynamics defect
/// `|q'' - 2w| / (1 + |2w|)`.
pub fn cm_condition_c_residual(b: &PeriodMatrix, u: &[C64], v: &[C64], sample: &ThetaDivisorSample) -> Result<SampleResidual> {
    let pol = TruncationPolicy::default();
    let ords = [[1, 0], [2, 0], [3, 0], [4, 0], [0, 1], [1, 1], [0, 2]];
    per_point(b, sample, |z| {
        let j = jet_uv(b, z, u, v, &ords, &pol)?;
        let (tu, tuu, tuuu, tuuuu, tv, tuv, tvv) = (j[0], j[1], j[2], j[3], j[4], j[5], j[6]);
        if tu.norm() == 0.0 {
            return Err(Error::NonSimpleZero("d_U theta vanishes at a sample point".into()));
        }
        let expr = (tv * tv - tuu * tuu) * tuu + 2.0 * (tuu * tuuu - tv * tuv) * tu + (tvv - tuuuu) * tu * tu;
        let two_w = -tuuuu / tu + 2.0 * tuu * tuuu / (tu * tu) - tuu * tuu * tuu / (tu * tu * tu);
        Ok(Some(expr.norm() / (tu.norm().powi(3) * (1.0 + two_w.norm()))))
    })
}

/// `d_V[theta(Z+U) theta(Z-U)] d_V theta - theta(Z+U) theta(Z-U) d_V^2 theta`
/// divided by `|d_V P d_V theta| + |P d_V^2 theta| + |d_V theta|^2 |theta(0)|`
/// with `P = theta(Z+U) theta(Z-U)`.
pub fn rs_condition_c_residual(b: &PeriodMatrix, u: &[C64], v: &[C64], sample: &ThetaDivisorSample) -> Result<SampleResidual> {
    let pol = TruncationPolicy::default();
    let g = b.genus();
    let th0 = theta_at(b, &vec![C64::new(0.0, 0.0); g], &pol)?.norm();
    per_point(b, sample, |z| {
        let ords = [[0, 0], [0, 1], [0, 2]];
        let j = jet_uv(b, z, u, v, &ords, &pol)?;
        let jp = jet_uv(b, &shifted(z, &[(1.0, u)]), u, v, &ords[..2], &pol)?;
        let jm = jet_uv(b, &shifted(z, &[(-1.0, u)]), u, v, &ords[..2], &pol)?;
        let pp = jp[0] * jm[0];
        let pv = jp[1] * jm[0] + jp[0] * jm[1];
        let expr = pv * j[1] - pp * j[2];
        let den = (pv * j[1]).norm() + (pp * j[2]).norm() + j[1].norm_sqr() * th0;
        Ok(Some(if den == 0.0 { 0.0 } else { expr.norm() / den }))
    })
}

// A factor counts as vanishing when |theta(x)| exp(-pi Im x . Y^{-1} Im x)
// falls below this value.
const FACTOR_TOL: f64 = 1e-10;

fn factor_vanishes(b: &PeriodMatrix, x: &[C64], val: C64) -> bool {
    val.norm() * (-b.gaussian_exponent(x)).exp() <= FACTOR_TOL
}

/// `|P(Z) + 1|` with `P = theta(Z+U) theta(Z-V) theta(Z-U+V) /
/// (theta(Z-U) theta(Z+V) theta(Z+U-V))`. Points where a factor vanishes
/// are skipped and listed in `skipped`; if every point is skipped the call
/// fails with `FactorVanishes`.
pub fn bdhe_condition_c_residual(b: &PeriodMatrix, u: &[C64], v: &[C64], sample: &ThetaDivisorSample) -> Result<SampleResidual> {
    let pol = TruncationPolicy::default();
    per_point(b, sample, |z| {
        let args = [
            shifted(z, &[(1.0, u)]),
            shifted(z, &[(-1.0, v)]),
            shifted(z, &[(-1.0, u), (1.0, v)]),
            shifted(z, &[(-1.0, u)]),
            shifted(z, &[(1.0, v)]),
            shifted(z, &[(1.0, u), (-1.0, v)]),
        ];
        let mut f = [C64::new(0.0, 0.0); 6];
        for (k, x) in args.iter().enumerate() {
            f[k] = theta_at(b, x, &pol)?;
            if factor_vanishes(b, x, f[k]) {
                return Ok(None);
            }
        }
        let p = f[0] * f[1] * f[2] / (f[3] * f[4] * f[5]);
        Ok(Some((p + 1.0).norm()))
    })
}

/// The four triple products of the quadrisecant identity for the sign
/// `s = +1` (argument `+W`) or `s = -1` (argument `-W`).
fn quad_terms(b: &PeriodMatrix, z: &[C64], u: &[C64], v: &[C64], w: &[C64], s: f64, pol: &TruncationPolicy) -> Result<Option<[C64; 4]>> {
    let args = [
        shifted(z, &[(1.0, u), (-1.0, v)]),
        shifted(z, &[(-1.0, u), (s, w)]),
        shifted(z, &[(1.0, v), (s, w)]),
        shifted(z, &[(-1.0, u), (1.0, v)]),
        shifted(z, &[(1.0, u), (s, w)]),
        shifted(z, &[(-1.0, v), (s, w)]),
        shifted(z, &[(-1.0, u), (-1.0, v)]),
        shifted(z, &[(1.0, u), (1.0, v)]),
    ];
    let mut f = [C64::new(0.0, 0.0); 8];
    let mut all_equal = true;
    for (k, x) in args.iter().enumerate() {
        f[k] = theta_at(b, x, pol)?;
        all_equal &= x == &args[0];
    }
    // With U = V = W = 0 every factor is theta(Z) and the identity is exact.
    if !all_equal && args.iter().zip(&f).any(|(x, v)| factor_vanishes(b, x, *v)) {
        return Ok(None);
    }
    Ok(Some([
        f[0] * f[1] * f[2],
        f[3] * f[4] * f[5],
        f[6] * f[4] * f[2],
        f[7] * f[1] * f[5],
    ]))
}

// alpha = (c1^{-2s} c3^2, c2^{-2s} c3^2, c1^{-2s} c2^{-2s}).
fn quad_alpha(c1: C64, c2: C64, c3: C64, s: f64) -> [C64; 3] {
    let k1 = c1.powf(-2.0 * s);
    let k2 = c2.powf(-2.0 * s);
    [k1 * c3 * c3, k2 * c3 * c3, k1 * k2]
}

fn quad_point_residual(t: &[C64; 4], alpha: &[C64; 3]) -> f64 {
    let terms = [alpha[0] * t[0], alpha[1] * t[1], -alpha[2] * t[2], -t[3]];
    let num: C64 = terms.iter().sum();
    let den = terms.iter().map(|x| x.norm()).fold(0.0, f64::max);
    if num.norm() == 0.0 {
        0.0
    } else {
        num.norm() / den
    }
}

/// Residuals of both sign choices of the quadrisecant identity with the
/// constants of `d`, each term normalised by the largest term modulus.
pub fn quadrisecant_residual(d: &SecantDatum, sample: &ThetaDivisorSample) -> Result<(SampleResidual, SampleResidual)> {
    let k = &d.constants;
    let need = |x: Option<C64>, n: &str| x.ok_or_else(|| Error::InvalidArgument(format!("constant {n} missing")));
    let c3 = need(k.c3, "c3")?;
    let ap = quad_alpha(need(k.c1_plus, "c1+")?, need(k.c2_plus, "c2+")?, c3, 1.0);
    let am = quad_alpha(need(k.c1_minus, "c1-")?, need(k.c2_minus, "c2-")?, c3, -1.0);
    let pol = TruncationPolicy::default();
    let run = |s: f64, alpha: [C64; 3]| {
        per_point(&d.b, sample, |z| {
            Ok(quad_terms(&d.b, z, &d.u, &d.v, &d.w, s, &pol)?.map(|t| quad_point_residual(&t, &alpha)))
        })
    };
    Ok((run(1.0, ap)?, run(-1.0, am)?))
}

/// Constants of one sign choice fitted on half a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrisecantFit {
    pub sign: i8,
    /// `(c1^{-2s} c3^2, c2^{-2s} c3^2, c1^{-2s} c2^{-2s})`.
    pub alpha: [C64; 3],
    pub c1: C64,
    pub c2: C64,
    pub c3: C64,
    pub rank: usize,
    pub fit_residual: f64,
    pub held_out: SampleResidual,
}

/// Fits the quadrisecant constants for both signs on the even-indexed
/// points and reports the residual on the odd-indexed points. Fails with
/// `FitDegenerate` when the design matrix has rank below three.
pub fn quadrisecant_fit(b: &PeriodMatrix, u: &[C64], v: &[C64], w: &[C64], sample: &ThetaDivisorSample) -> Result<(QuadrisecantFit, QuadrisecantFit)> {
    let pol = TruncationPolicy::default();
    let (fit, hold) = sample.split();
    let one = |s: f64| -> Result<QuadrisecantFit> {
        let rows: Vec<[C64; 4]> = fit
            .points
            .par_iter()
            .map(|z| quad_terms(b, &b.reduce(z).0, u, v, w, s, &pol))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        if rows.len() < 3 {
            return Err(Error::FitDegenerate(format!("{} usable fitting points", rows.len())));
        }
        let mut a = DMatrix::<C64>::zeros(rows.len(), 3);
        let mut rhs = DVector::<C64>::zeros(rows.len());
        for (k, t) in rows.iter().enumerate() {
            let sc = t.iter().map(|x| x.norm()).fold(0.0, f64::max);
            a[(k, 0)] = t[0] / sc;
            a[(k, 1)] = t[1] / sc;
            a[(k, 2)] = -t[2] / sc;
            rhs[k] = t[3] / sc;
        }
        let sol = lstsq(&a, &rhs, 1e-10);
        if sol.rank < 3 {
            return Err(Error::FitDegenerate(format!("design matrix rank {} < 3", sol.rank)));
        }
        let alpha = [sol.x[0], sol.x[1], sol.x[2]];
        let c3 = (alpha[0] * alpha[1] / alpha[2]).powf(0.25);
        let (c1, c2) = (
            (alpha[0] / (c3 * c3)).powf(-0.5 * s),
            (alpha[1] / (c3 * c3)).powf(-0.5 * s),
        );
        let fit_residual = rows.iter().map(|t| quad_point_residual(t, &alpha)).fold(0.0, f64::max);
        let held_out = per_point(b, &hold, |z| {
            Ok(quad_terms(b, z, u, v, w, s, &pol)?.map(|t| quad_point_residual(&t, &alpha)))
        })?;
        Ok(QuadrisecantFit {
            sign: s as i8,
            alpha,
            c1,
            c2,
            c3,
            rank: sol.rank,
            fit_residual,
            held_out,
        })
    };
    Ok((one(1.0)?, one(-1.0)?))
}

// ---------------------------------------------------------------------------
// Involutions

/// Residuals of the KP involution criterion on one line `Ux + zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvolutionKpReport {
    /// Zeros of `theta(Ux + zeta)` in the window.
    pub zeros: Vec<C64>,
    /// `max |d_V theta / d_U theta|` over the zeros.
    pub residual_c: f64,
    /// Fitted constant of `d_U d_V ln theta` on the line.
    pub b2: C64,
    /// RMS of `d_U d_V ln theta - b2` over the line samples, relative to the
    /// mean modulus of its two terms.
    pub residual_b1: f64,
    /// Fitted constant of the Kummer orthogonality relation.
    pub b2_ort: C64,
    pub residual_ort: f64,
    /// `max |dq/dt|` at `t = 0` from tracked zeros.
    pub residual_turn: f64,
    /// Flex-condition constants for the same `U, V` and `A = zeta`-free
    /// least-squares fit; reported, not asserted.
    pub omega1: C64,
    pub omega2: C64,
}

fn line_points(window: &Window, n: usize) -> Vec<C64> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let fx = (i as f64 + 0.5) / n as f64;
            let fy = (j as f64 + 0.5) / n as f64;
            out.push(
                window.lo
                    + C64::new(
                        (window.hi.re - window.lo.re) * fx,
                        (window.hi.im - window.lo.im) * fy,
                    ),
            );
        }
    }
    out
}

fn divisor_zeros(line: &TauLine) -> Result<Vec<crate::tau_divisor::DivisorZero>> {
    let zs = find_zeros(line, 0.0)?;
    if zs.is_empty() {
        return Err(Error::InsufficientZeros("no zeros of theta(Ux + zeta) in the window".into()));
    }
    if let Some(z) = zs.iter().find(|z| !z.simple) {
        return Err(Error::NonSimpleZero(format!("zero at {} is not simple", z.q)));
    }
    Ok(zs)
}

// Points of the line at a grid of x away from the zeros.
fn off_divisor(u: &[C64], zeta: &[C64], window: &Window, zeros: &[C64], n: usize) -> Vec<Vec<C64>> {
    let minsep = 0.05 * window.size();
    line_points(window, n)
        .into_iter()
        .filter(|x| zeros.iter().all(|q| (q - x).norm() > minsep))
        .map(|x| shifted(zeta, &[(1.0, &u.iter().map(|c| c * x).collect::<Vec<_>>())]))
        .collect()
}

fn kummer_rows(b: &PeriodMatrix, pts: &[Vec<C64>], pol: &TruncationPolicy) -> Result<Vec<Vec<C64>>> {
    let chars = HalfCharacteristic::all(b.genus());
    pts.par_iter()
        .map(|z| {
            chars
                .iter()
                .map(|e| theta_with_char_derivs(e, z, b, &[], &[vec![]], pol).map(|v| v[0]))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn char_vector(b: &PeriodMatrix, w: &[C64], dirs: &[Vec<C64>], multi: &[usize], pol: &TruncationPolicy) -> Result<Vec<C64>> {
    HalfCharacteristic::all(b.genus())
        .iter()
        .map(|e| theta_with_char_derivs(e, w, b, dirs, &[multi.to_vec()], pol).map(|v| v[0]))
        .collect()
}

fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates the KP involution criterion: the divisor condition
/// `d_V theta = 0` on the zeros of `theta(Ux + zeta)`, the constancy of
/// `d_U d_V ln theta` on the line, its Kummer form and the turning-point
/// form `dq/dt = 0`.
pub fn involution_kp_conditions(b: &PeriodMatrix, u: &[C64], v: &[C64], zeta: &[C64], x_window: Window) -> Result<InvolutionKpReport> {
    let g = b.genus();
    let pol = TruncationPolicy::default();
    let h = 1e-3;
    let line = TauLine::new(b.clone(), u.to_vec(), v.to_vec(), zeta.to_vec(), x_window, [-2.0 * h, 2.0 * h])?;
    let zs = divisor_zeros(&line)?;
    let qs: Vec<C64> = zs.iter().map(|z| z.q).collect();

    let mut residual_c: f64 = 0.0;
    for z in &zs {
        let j = line.derivs(z.q, 0.0, &[[1, 0], [0, 1]])?;
        residual_c = residual_c.max((j[1] / j[0]).norm());
    }

    let mut residual_turn: f64 = 0.0;
    for z in &zs {
        let q = |t: f64| track_zero(&line, z, t).map(|w| w.q);
        let d1 = q(h)? - q(-h)?;
        let d2 = q(2.0 * h)? - q(-2.0 * h)?;
        residual_turn = residual_turn.max(((8.0 * d1 - d2) / (12.0 * h)).norm());
    }

    let pts = off_divisor(u, zeta, &x_window, &qs, 6);
    let mut f = Vec::with_capacity(pts.len());
    let mut mag = 0.0;
    for z in &pts {
        let j = jet_uv(b, z, u, v, &[[0, 0], [1, 0], [0, 1], [1, 1]], &pol)?;
        let a = j[3] / j[0];
        let c = j[1] * j[2] / (j[0] * j[0]);
        f.push(a - c);
        mag += a.norm() + c.norm();
    }
    let b2 = f.iter().sum::<C64>() / f.len() as f64;
    let rms = (f.iter().map(|x| (x - b2).norm_sqr()).sum::<f64>() / f.len() as f64).sqrt();
    let mean_mag = mag / f.len() as f64;
    let residual_b1 = if mean_mag == 0.0 { 0.0 } else { rms / mean_mag };

    let zero = vec![C64::new(0.0, 0.0); g];
    let a_vec = char_vector(b, &zero, &[u.to_vec(), v.to_vec()], &[1, 1], &pol)?;
    let c_vec = char_vector(b, &zero, &[], &[], &pol)?;
    let rows = kummer_rows(b, &pts, &pol)?;
    let ka: Vec<C64> = rows.iter().map(|k| dotc(k, &a_vec)).collect();
    let kc: Vec<C64> = rows.iter().map(|k| dotc(k, &c_vec)).collect();
    let kcn: f64 = kc.iter().map(|x| x.norm_sqr()).sum();
    let b2_ort = if kcn == 0.0 {
        C64::new(0.0, 0.0)
    } else {
        kc.iter().zip(&ka).map(|(c, a)| c.conj() * a).sum::<C64>() / kcn
    };
    let num: f64 = ka.iter().zip(&kc).map(|(a, c)| (a - b2_ort * c).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = ka.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt() + b2_ort.norm() * kcn.sqrt();
    let residual_ort = if den == 0.0 { 0.0 } else { num / den };

    let flex = SecantDatum::new(b.clone(), u.to_vec(), v.to_vec(), zeta.to_vec(), C64::new(0.0, 0.0), C64::new(0.0, 0.0))
        .and_then(|d| fit_flex_b(&d, &pol));
    let (omega1, omega2) = match flex {
        Ok(fit) => (fit.p, fit.e),
        Err(_) => (C64::new(f64::NAN, 0.0), C64::new(f64::NAN, 0.0)),
    };
    Ok(InvolutionKpReport {
        zeros: qs,
        residual_c,
        b2,
        residual_b1,
        b2_ort,
        residual_ort,
        residual_turn,
        omega1,
        omega2,
    })
}

/// Residuals of the 2D Toda involution criterion on one line `Ux + zeta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvolutionTodaReport {
    pub zeros: Vec<C64>,
    /// `max |(d_V theta)^2 + theta(z+U) theta(z-U)|` over the zeros, each
    /// divided by the sum of the two moduli.
    pub residual_cd: f64,
    /// Hausdorff distance between the zeros of `theta(Ux + zeta)` and of
    /// `theta(Ux + U + zeta)` away from the window edge.
    pub shift_distance: f64,
    pub b2: C64,
    pub b3: C64,
    /// Held-out residual of the Kummer relation with fitted `(b2, b3)`.
    pub residual_ortd: f64,
}

// Directed Hausdorff distance from `a` to `b`.
fn hausdorff(a: &[C64], b: &[C64]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Evaluates the 2D Toda involution criterion on the line `Ux + zeta`.
/// Fails with `ShiftInvariantDivisor` when the zero set of
/// `theta(Ux + zeta)` is invariant under `x -> x + 1`.
pub fn involution_toda_conditions(b: &PeriodMatrix, u: &[C64], v: &[C64], zeta: &[C64], x_window: Window) -> Result<InvolutionTodaReport> {
    let g = b.genus();
    if lattice_equivalent(b, u, &vec![C64::new(0.0, 0.0); g]) {
        return Err(Error::ShiftInvariantDivisor("U lies in the lattice".into()));
    }
    let pol = TruncationPolicy::default();
    let line = TauLine::new(b.clone(), u.to_vec(), v.to_vec(), zeta.to_vec(), x_window, [0.0, 0.0])?;
    let zs = divisor_zeros(&line)?;
    let qs: Vec<C64> = zs.iter().map(|z| z.q).collect();

    let mut residual_cd: f64 = 0.0;
    for q in &qs {
        let z = line.point(*q, 0.0);
        let tv = jet_uv(b, &z, u, v, &[[0, 1]], &pol)?[0];
        let pp = theta_at(b, &shifted(&z, &[(1.0, u)]), &pol)? * theta_at(b, &shifted(&z, &[(-1.0, u)]), &pol)?;
        let den = tv.norm_sqr() + pp.norm();
        residual_cd = residual_cd.max(if den == 0.0 { 0.0 } else { (tv * tv + pp).norm() / den });
    }

    let margin = 0.1 * x_window.size();
    let inner = Window::new(
        x_window.lo + C64::new(margin, margin),
        x_window.hi - C64::new(margin, margin),
    )?;
    let big = Window::new(
        x_window.lo - C64::new(margin, margin),
        x_window.hi + C64::new(margin, margin),
    )?;
    let zeros_on = |z: &[C64]| -> Result<Vec<C64>> {
        let l = TauLine::new(b.clone(), u.to_vec(), v.to_vec(), z.to_vec(), big, [0.0, 0.0])?;
        Ok(find_zeros(&l, 0.0)?.iter().map(|z| z.q).collect())
    };
    let za = zeros_on(zeta)?;
    let zb = zeros_on(&shifted(zeta, &[(1.0, u)]))?;
    let a_in: Vec<C64> = za.iter().cloned().filter(|q| inner.contains(*q)).collect();
    let b_in: Vec<C64> = zb.iter().cloned().filter(|q| inner.contains(*q)).collect();
    let shift_distance = if a_in.is_empty() && b_in.is_empty() {
        f64::INFINITY
    } else {
        hausdorff(&a_in, &zb).max(hausdorff(&b_in, &za))
    };
    if shift_distance < 1e-6 {
        return Err(Error::ShiftInvariantDivisor(format!(
            "zero sets agree to {shift_distance:e} under x -> x + 1"
        )));
    }

    let zero = vec![C64::new(0.0, 0.0); g];
    let a_vec: Vec<C64> = char_vector(b, &zero, &[v.to_vec()], &[2], &pol)?.iter().map(|x| x * 2.0).collect();
    let c1 = char_vector(b, u, &[], &[], &pol)?;
    let c0 = char_vector(b, &zero, &[], &[], &pol)?;
    let pts = off_divisor(u, zeta, &x_window, &qs, 6);
    let rows = kummer_rows(b, &pts, &pol)?;
    let trip: Vec<[C64; 3]> = rows.iter().map(|k| [dotc(k, &a_vec), dotc(k, &c1), dotc(k, &c0)]).collect();
    let (fit, hold): (Vec<_>, Vec<_>) = trip.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let mut m = DMatrix::<C64>::zeros(fit.len(), 2);
    let mut rhs = DVector::<C64>::zeros(fit.len());
    for (k, (_, t)) in fit.iter().enumerate() {
        let sc = t.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let sc = if sc > 0.0 { sc } else { 1.0 };
        m[(k, 0)] = t[1] / sc;
        m[(k, 1)] = t[2] / sc;
        rhs[k] = t[0] / sc;
    }
    let sol = lstsq(&m, &rhs, 1e-12);
    let (b2, b3) = (sol.x[0], sol.x[1]);
    let residual_ortd = hold
        .iter()
        .map(|(_, t)| {
            let num = (t[0] - b2 * t[1] - b3 * t[2]).norm();
            let den = t[0].norm() + (b2 * t[1]).norm() + (b3 * t[2]).norm();
            if den == 0.0 {
                0.0
            } else {
                num / den
            }
        })
        .fold(0.0, f64::max);
    Ok(InvolutionTodaReport {
        zeros: qs,
        residual_cd,
        shift_distance,
        b2,
        b3,
        residual_ortd,
    })
}

// ---------------------------------------------------------------------------
// Genus one factories

/// A genus-one datum whose constants were fitted on a few points and
/// checked on an independent grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedDatum {
    pub datum: SecantDatum,
    pub z: Vec<C64>,
    pub fit: LinearFit,
    pub validation_residual: f64,
}

fn genus1_b(tau: C64) -> Result<PeriodMatrix> {
    PeriodMatrix::new(1, vec![tau])
}

fn fit_grid(scale: f64) -> Vec<(C64, C64)> {
    vec![
        (C64::new(0.11, 0.07) * scale, C64::new(0.03, 0.0)),
        (C64::new(-0.23, 0.17) * scale, C64::new(-0.05, 0.02)),
        (C64::new(0.31, -0.13) * scale, C64::new(0.07, -0.01)),
        (C64::new(-0.07, -0.29) * scale, C64::new(0.01, 0.04)),
    ]
}

/// `n x n` validation grid of `(x, t)` points on `[-r, r]^2 x {t0}`.
pub fn validation_grid(r: f64, n: usize, t0: C64) -> Vec<(C64, C64)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let fx = -r + 2.0 * r * (i as f64 + 0.37) / n as f64;
            let fy = -r + 2.0 * r * (j as f64 + 0.61) / n as f64;
            out.push((C64::new(fx, fy), t0 + C64::new(0.013 * i as f64, -0.007 * j as f64)));
        }
    }
    out
}

fn retry<T, F: FnMut(f64) -> Result<T>>(mut f: F) -> Result<T> {
    let mut last = None;
    for k in 0..4 {
        match f(1.0 + 0.173 * k as f64) {
            Err(e @ Error::GridHitsDivisor(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Genus-one datum for the heat-equation linear problem: `(p, E)` fitted on
/// four points, validated on a 5x5 grid.
pub fn genus1_kp_datum(tau: C64, u: C64, v: C64, a: C64, z: C64) -> Result<FittedDatum> {
    let b = genus1_b(tau)?;
    let d0 = SecantDatum::new(b, vec![u], vec![v], vec![a], C64::new(0.0, 0.0), C64::new(0.0, 0.0))?;
    retry(|s| {
        let fit = fit_kp_linear(&d0, &[z], &fit_grid(s / u.norm()))?;
        let datum = d0.clone().with_pe(fit.p, fit.e);
        let validation_residual = linear_problem_residual_kp(&datum, &[z], &validation_grid(0.45 * s / u.norm(), 5, C64::new(0.0, 0.0)))?;
        Ok(FittedDatum {
            datum,
            z: vec![z],
            fit: fit.clone(),
            validation_residual,
        })
    })
}

/// Genus-one datum for the differential-difference linear problem.
pub fn genus1_rs_datum(tau: C64, u: C64, v: C64, a: C64, z: C64) -> Result<FittedDatum> {
    let b = genus1_b(tau)?;
    let d0 = SecantDatum::new(b, vec![u], vec![v], vec![a], C64::new(0.0, 0.0), C64::new(0.0, 0.0))?;
    d0.check_mode(SecantMode::TangentTrisecant)?;
    retry(|s| {
        let fit = fit_rs_linear(&d0, &[z], &fit_grid(s / u.norm()))?;
        let datum = d0.clone().with_pe(fit.p, fit.e);
        let validation_residual = linear_problem_residual_rs(&datum, &[z], &validation_grid(0.45 * s / u.norm(), 5, C64::new(0.0, 0.0)))?;
        Ok(FittedDatum {
            datum,
            z: vec![z],
            fit: fit.clone(),
            validation_residual,
        })
    })
}

/// Genus-one datum for the difference linear problem.
pub fn genus1_bdhe_datum(tau: C64, u: C64, v: C64, a: C64, z: C64) -> Result<FittedDatum> {
    let b = genus1_b(tau)?;
    let d0 = SecantDatum::new(b, vec![u], vec![v], vec![a], C64::new(0.0, 0.0), C64::new(0.0, 0.0))?;
    d0.check_mode(SecantMode::Trisecant)?;
    retry(|s| {
        let grid: Vec<(C64, i64)> = fit_grid(s / u.norm())
            .iter()
            .enumerate()
            .map(|(k, (x, _))| (*x, k as i64 - 1))
            .collect();
        let fit = fit_bdhe_linear(&d0, &[z], &grid)?;
        let datum = d0.clone().with_pe(fit.p, fit.e);
        let val: Vec<(C64, i64)> = validation_grid(0.45 * s / u.norm(), 5, C64::new(0.0, 0.0))
            .iter()
            .enumerate()
            .map(|(k, (x, _))| (*x, (k % 5) as i64 - 2))
            .collect();
        let validation_residual = linear_problem_residual_bdhe(&datum, &[z], &val)?;
        Ok(FittedDatum {
            datum,
            z: vec![z],
            fit: fit.clone(),
            validation_residual,
        })
    })
}

/// Genus-one vector `V` for which the 2D Toda divisor condition holds:
/// `V^2 = -theta(z0+U) theta(z0-U) / theta'(z0)^2` at the zero `z0 = (1+tau)/2`.
pub fn genus1_toda_involution_v(tau: C64, u: C64) -> Result<C64> {
    let b = genus1_b(tau)?;
    let pol = TruncationPolicy::default();
    let z0 = (C64::new(1.0, 0.0) + tau) * 0.5;
    let d1 = theta_series_derivs(&[z0], &b, &[0.0], &[vec![C64::new(1.0, 0.0)]], &[vec![1]], &pol)?[0];
    let pp = theta_at(&b, &[z0 + u], &pol)? * theta_at(&b, &[z0 - u], &pol)?;
    Ok((-pp / (d1 * d1)).sqrt())
}

/// Random genus-two datum with `B = PeriodMatrix::random(2, 0.7)` and
/// `U, V, A, Z` uniform in the unit box; `(p, E)` are left at zero.
pub fn random_g2_datum<R: Rng>(rng: &mut R) -> Result<(SecantDatum, Vec<C64>)> {
    let b = PeriodMatrix::random(2, 0.7, rng)?;
    let mut vec2 = |s: f64| -> Vec<C64> {
        (0..2)
            .map(|_| C64::new(rng.random_range(-s..s), rng.random_range(-s..s)))
            .collect()
    };
    let u = vec2(1.0);
    let v = vec2(1.0);
    let a = vec2(0.5);
    let z = vec2(0.5);
    let w = vec2(0.5);
    Ok((SecantDatum::new(b, u, v, a, C64::new(0.0, 0.0), C64::new(0.0, 0.0))?.with_w(w), z))
}
