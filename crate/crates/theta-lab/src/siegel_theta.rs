//! Riemann theta function on the Siegel upper half space.
//!
//! The series is truncated to an ellipsoid in the `Im B` metric centred at
//! the saddle point of the summand. The radius comes from a Gaussian tail
//! bound that is recomputed for every evaluation point and derivative
//! order, and terms are accumulated in a fixed order with compensated
//! summation so results are reproducible bit for bit.

use crate::error::{Error, Result};
use crate::numerics::{ComplexSum, C64, I};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A point of the Siegel upper half space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PeriodMatrixConfig", try_from = "PeriodMatrixConfig")]
pub struct PeriodMatrix {
    g: usize,
    b: Vec<C64>,
    y: Vec<f64>,
    y_inv: Vec<f64>,
    // Upper triangular factor with Im B = T^t T.
    chol: Vec<f64>,
    lambda_min: f64,
    lambda_max: f64,
    det_y: f64,
}

/// JSON form `{"g": int, "B_re": [[...]], "B_im": [[...]]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PeriodMatrixConfig {
    pub g: usize,
    #[serde(rename = "B_re")]
    pub b_re: Vec<Vec<f64>>,
    #[serde(rename = "B_im")]
    pub b_im: Vec<Vec<f64>>,
}

impl From<PeriodMatrix> for PeriodMatrixConfig {
    fn from(b: PeriodMatrix) -> Self {
        b.to_config()
    }
}

impl TryFrom<PeriodMatrixConfig> for PeriodMatrix {
    type Error = Error;
    fn try_from(cfg: PeriodMatrixConfig) -> Result<Self> {
        Self::from_config(&cfg)
    }
}

impl PeriodMatrix {
    /// Builds a period matrix from row-major entries.
    pub fn new(g: usize, entries: Vec<C64>) -> Result<Self> {
        if g == 0 {
            return Err(Error::InvalidPeriodMatrix("genus must be positive".into()));
        }
        if entries.len() != g * g {
            return Err(Error::InvalidPeriodMatrix(format!(
                "expected {} entries, got {}",
                g * g,
                entries.len()
            )));
        }
        for (k, z) in entries.iter().enumerate() {
            if !(z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::InvalidPeriodMatrix(format!(
                    "entry ({}, {}) is not finite",
                    k / g,
                    k % g
                )));
            }
        }
        for i in 0..g {
            for j in (i + 1)..g {
                if entries[i * g + j] != entries[j * g + i] {
                    return Err(Error::InvalidPeriodMatrix(format!(
                        "not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let y: Vec<f64> = entries.iter().map(|z| z.im).collect();
        let ym = DMatrix::from_row_slice(g, g, &y);
        let eig = SymmetricEigen::new(ym.clone());
        let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        if !(lambda_min > 0.0) {
            return Err(Error::InvalidPeriodMatrix(format!(
                "Im B is not positive definite (smallest eigenvalue {lambda_min:e})"
            )));
        }
        let chol_l = ym.clone().cholesky().ok_or_else(|| {
            Error::InvalidPeriodMatrix("Cholesky factorisation of Im B failed".into())
        })?;
        let l = chol_l.l();
        let mut chol = vec![0.0; g * g];
        for i in 0..g {
            for j in 0..g {
                chol[i * g + j] = l[(j, i)];
            }
        }
        let inv = chol_l.inverse();
        let y_inv: Vec<f64> = (0..g * g).map(|k| inv[(k / g, k % g)]).collect();
        let det_y = (0..g).map(|i| l[(i, i)] * l[(i, i)]).product();
        Ok(Self {
            g,
            b: entries,
            y,
            y_inv,
            chol,
            lambda_min,
            lambda_max,
            det_y,
        })
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let g = rows.len();
        if rows.iter().any(|r| r.len() != g) {
            return Err(Error::InvalidPeriodMatrix("matrix is not square".into()));
        }
        Self::new(g, rows.iter().flatten().cloned().collect())
    }

    pub fn from_config(cfg: &PeriodMatrixConfig) -> Result<Self> {
        let g = cfg.g;
        if cfg.b_re.len() != g || cfg.b_im.len() != g {
            return Err(Error::InvalidPeriodMatrix(format!(
                "B_re/B_im must have {g} rows"
            )));
        }
        let mut entries = Vec::with_capacity(g * g);
        for i in 0..g {
            if cfg.b_re[i].len() != g || cfg.b_im[i].len() != g {
                return Err(Error::InvalidPeriodMatrix(format!("row {i} must have {g} entries")));
            }
            for j in 0..g {
                entries.push(C64::new(cfg.b_re[i][j], cfg.b_im[i][j]));
            }
        }
        Self::new(g, entries)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: PeriodMatrixConfig = serde_json::from_str(s)?;
        Self::from_config(&cfg)
    }

    pub fn to_config(&self) -> PeriodMatrixConfig {
        let g = self.g;
        PeriodMatrixConfig {
            g,
            b_re: (0..g).map(|i| (0..g).map(|j| self.b[i * g + j].re).collect()).collect(),
            b_im: (0..g).map(|i| (0..g).map(|j| self.b[i * g + j].im).collect()).collect(),
        }
    }

    /// Diagonal matrix `diag(taus)`.
    pub fn diagonal(taus: &[C64]) -> Result<Self> {
        let g = taus.len();
        let mut e = vec![C64::new(0.0, 0.0); g * g];
        for (i, t) in taus.iter().enumerate() {
            e[i * g + i] = *t;
        }
        Self::new(g, e)
    }

    pub fn genus(&self) -> usize {
        self.g
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.b[i * self.g + j]
    }

    pub fn entries(&self) -> &[C64] {
        &self.b
    }

    /// `B n` for a complex or real vector given as complex.
    pub fn apply(&self, n: &[C64]) -> Vec<C64> {
        let g = self.g;
        (0..g)
            .map(|i| (0..g).map(|j| self.b[i * g + j] * n[j]).sum())
            .collect()
    }

    /// `k B` (used for the level two functions with `k = 2`).
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.g, self.b.iter().map(|z| z * k).collect())
    }

    /// Random period matrix: `Re B` symmetric with entries in `[-1/2, 1/2]`,
    /// `Im B = A A^t + y_floor I` with `A` uniform in `[-1/2, 1/2]`.
    pub fn random<R: rand::Rng>(g: usize, y_floor: f64, rng: &mut R) -> Result<Self> {
        let mut e = vec![C64::new(0.0, 0.0); g * g];
        let a: Vec<f64> = (0..g * g).map(|_| rng.random_range(-0.5..0.5)).collect();
        for i in 0..g {
            for j in i..g {
                let x = rng.random_range(-0.5..0.5);
                let mut y: f64 = (0..g).map(|k| a[i * g + k] * a[j * g + k]).sum();
                if i == j {
                    y += y_floor;
                }
                e[i * g + j] = C64::new(x, y);
                e[j * g + i] = C64::new(x, y);
            }
        }
        Self::new(g, e)
    }

    /// Smallest eigenvalue of `Im B`.
    pub fn im_lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// Reduces `z` modulo the lattice `Z^g + B Z^g`: returns `(z', m, n)`
    /// with `z = z' + m + B n` and `Y^{-1} Im z'`, `Re z'` rounded into
    /// `[-1/2, 1/2]` componentwise.
    pub fn reduce(&self, z: &[C64]) -> (Vec<C64>, Vec<i64>, Vec<i64>) {
        let g = self.g;
        let y: Vec<f64> = z.iter().map(|v| v.im).collect();
        let (c, _) = self.center(&y);
        let n: Vec<i64> = c.iter().map(|v| v.round() as i64).collect();
        let nc: Vec<C64> = n.iter().map(|&k| C64::new(k as f64, 0.0)).collect();
        let bn = self.apply(&nc);
        let w: Vec<C64> = (0..g).map(|i| z[i] - bn[i]).collect();
        let m: Vec<i64> = w.iter().map(|v| v.re.round() as i64).collect();
        let out = (0..g).map(|i| w[i] - m[i] as f64).collect();
        (out, m, n)
    }

    /// `pi y^t Y^{-1} y` for `y = Im z`; `|theta(z)|` is bounded by a
    /// constant times the exponential of this value.
    pub fn gaussian_exponent(&self, z: &[C64]) -> f64 {
        let y: Vec<f64> = z.iter().map(|v| v.im).collect();
        PI * self.center(&y).1
    }

    // y^t Y^{-1} y and c = Y^{-1} y.
    fn center(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let g = self.g;
        let c: Vec<f64> = (0..g)
            .map(|i| (0..g).map(|j| self.y_inv[i * g + j] * y[j]).sum())
            .collect();
        let q = (0..g).map(|i| c[i] * y[i]).sum();
        (c, q)
    }
}

/// Truncation policy: absolute tolerance and a cap on the term count.
/// `radius` records the ellipsoid radius for `Im z = 0` at order zero;
/// each evaluation re-derives its own radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub target_abs_tol: f64,
    pub radius: f64,
    pub max_terms: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            target_abs_tol: 1e-12,
            radius: 0.0,
            max_terms: 4_000_000,
        }
    }
}

impl TruncationPolicy {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            target_abs_tol: tol,
            ..Self::default()
        }
    }

    /// Policy validated against `b`: the stored radius makes the tail
    /// bound at `z = 0` fall below the tolerance.
    pub fn for_matrix(b: &PeriodMatrix, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        let mut p = Self::with_tol(tol);
        p.radius = radius_for(b, &vec![0.0; b.g], 0.0, 0, tol)?;
        Ok(p)
    }
}

/// A half-integer characteristic, entries in {0, 1/2}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfCharacteristic {
    pub eps: Vec<f64>,
}

impl HalfCharacteristic {
    pub fn new(eps: Vec<f64>) -> Result<Self> {
        if eps.iter().any(|&e| e != 0.0 && e != 0.5) {
            return Err(Error::InvalidArgument(
                "characteristic entries must be 0 or 1/2".into(),
            ));
        }
        Ok(Self { eps })
    }

    /// All `2^g` characteristics in binary counting order on `2 eps`,
    /// first coordinate most significant.
    pub fn all(g: usize) -> Vec<Self> {
        (0..(1usize << g))
            .map(|k| Self {
                eps: (0..g)
                    .map(|i| if (k >> (g - 1 - i)) & 1 == 1 { 0.5 } else { 0.0 })
                    .collect(),
            })
            .collect()
    }
}

/// Directional derivatives of theta at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalJet {
    pub directions: Vec<Vec<C64>>,
    pub orders: Vec<Vec<usize>>,
    pub values: Vec<C64>,
}

impl DirectionalJet {
    /// Value for the multi-index `order` (one entry per direction).
    pub fn get(&self, order: &[usize]) -> C64 {
        let k = self
            .orders
            .iter()
            .position(|o| o.as_slice() == order)
            .unwrap_or_else(|| panic!("multi-index {order:?} not in jet"));
        self.values[k]
    }
}

/// All multi-indices with `dirs` entries and total order at most `max`,
/// graded by total order then lexicographic.
pub fn multi_indices(dirs: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=max {
        let mut cur = vec![0usize; dirs];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if cur.is_empty() {
        if left == 0 {
            out.push(vec![]);
        }
        return;
    }
    if pos == cur.len() - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        fill(out, cur, pos + 1, left - k);
    }
}

// Upper bound for int_L^inf u^k exp(-u^2) du, k = 0..=kmax, L > 0.
fn gaussian_moment_tails(l: f64, kmax: usize) -> Vec<f64> {
    let e = (-l * l).exp();
    let mut j = vec![0.0; kmax + 1];
    j[0] = e / (2.0 * l);
    if kmax >= 1 {
        j[1] = e / 2.0;
    }
    for k in 2..=kmax {
        j[k] = 0.5 * l.powi(k as i32 - 1) * e + 0.5 * (k as f64 - 1.0) * j[k - 2];
    }
    j
}

fn binom(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r *= (n - i) as f64 / (i + 1) as f64;
    }
    r
}

fn tail_bound(b: &PeriodMatrix, r: f64, a: f64, beta: f64, order: usize, log_pref: f64) -> f64 {
    let g = b.g;
    let delta = (PI * b.lambda_max).sqrt() * (g as f64).sqrt() / 2.0;
    let l = r - 2.0 * delta;
    if l <= 0.5 {
        return f64::INFINITY;
    }
    // the radial profile must be decreasing beyond l
    if order > 0 && a * order as f64 / (beta + a * l) >= 2.0 * l {
        return f64::INFINITY;
    }
    // (beta + a u)^N (u + delta)^(g-1) expanded in powers of u
    let mut p1 = vec![0.0; order + 1];
    for k in 0..=order {
        p1[k] = binom(order, k) * a.powi(k as i32) * beta.powi((order - k) as i32);
    }
    let mut p2 = vec![0.0; g];
    for k in 0..g {
        p2[k] = binom(g - 1, k) * delta.powi((g - 1 - k) as i32);
    }
    let mut poly = vec![0.0; order + g];
    for (i, x) in p1.iter().enumerate() {
        for (j, y) in p2.iter().enumerate() {
            poly[i + j] += x * y;
        }
    }
    let j = gaussian_moment_tails(l, poly.len() - 1);
    let integral: f64 = poly.iter().zip(&j).map(|(p, q)| p * q).sum();
    let gamma_half_g = gamma_half_integer(g);
    let sphere = 2.0 * PI.powf(g as f64 / 2.0) / gamma_half_g;
    let k = sphere / (PI.powf(g as f64 / 2.0) * b.det_y.sqrt());
    (log_pref.exp()) * k * integral
}

// Gamma(g/2) for positive integer g.
fn gamma_half_integer(g: usize) -> f64 {
    if g % 2 == 0 {
        (1..g / 2).map(|k| k as f64).product()
    } else {
        let mut v = PI.sqrt();
        let mut x = 0.5;
        while x < g as f64 / 2.0 - 1e-9 {
            v *= x;
            x += 1.0;
        }
        v
    }
}

/// Ellipsoid radius (in the metric `pi Im B`) that makes the tail bound
/// at imaginary part `y` and derivative order `order` at most `tol`;
/// `dir_norm` bounds the Euclidean norm of the derivative directions.
pub fn radius_for(b: &PeriodMatrix, y: &[f64], dir_norm: f64, order: usize, tol: f64) -> Result<f64> {
    let (c, q) = b.center(y);
    let cnorm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a = 2.0 * PI * dir_norm / (PI * b.lambda_min).sqrt();
    let beta = 1.0 + 2.0 * PI * dir_norm * (cnorm + 1.0);
    let log_pref = PI * q;
    let mut r = 1.0;
    while r < 200.0 {
        if tail_bound(b, r, a, beta, order, log_pref) <= tol {
            return Ok(r);
        }
        r += 0.125;
    }
    Err(Error::TruncationInsufficient(format!(
        "no radius below 200 meets tolerance {tol:e} at order {order}"
    )))
}

// Lattice points m with pi |T (m + s)|^2 <= r^2, sorted by that norm then
// lexicographically.
fn enumerate_ellipsoid(b: &PeriodMatrix, s: &[f64], r: f64, max_terms: usize) -> Result<Vec<(f64, Vec<i64>)>> {
    let g = b.g;
    let bound = r * r / PI;
    let mut out = Vec::new();
    let mut m = vec![0i64; g];
    let mut overflow = false;
    rec(b, s, bound, g as isize - 1, 0.0, &mut m, &mut out, max_terms, &mut overflow);
    if overflow {
        return Err(Error::TruncationInsufficient(format!(
            "ellipsoid of radius {r:.3} exceeds max_terms = {max_terms}"
        )));
    }
    out.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn rec(
    b: &PeriodMatrix,
    s: &[f64],
    bound: f64,
    i: isize,
    acc: f64,
    m: &mut Vec<i64>,
    out: &mut Vec<(f64, Vec<i64>)>,
    max_terms: usize,
    overflow: &mut bool,
) {
    if *overflow {
        return;
    }
    if i < 0 {
        out.push((acc * PI, m.clone()));
        if out.len() > max_terms {
            *overflow = true;
        }
        return;
    }
    let g = b.g;
    let i = i as usize;
    let tii = b.chol[i * g + i];
    let w: f64 = ((i + 1)..g).map(|j| b.chol[i * g + j] * (m[j] as f64 + s[j])).sum();
    let rho2 = bound - acc;
    if rho2 < 0.0 {
        return;
    }
    let rho = rho2.sqrt();
    let lo = ((-rho - w) / tii - s[i]).ceil() as i64;
    let hi = ((rho - w) / tii - s[i]).floor() as i64;
    for k in lo..=hi {
        m[i] = k;
        let t = tii * (k as f64 + s[i]) + w;
        let a2 = acc + t * t;
        if a2 <= bound {
            rec(b, s, bound, i as isize - 1, a2, m, out, max_terms, overflow);
        }
    }
    m[i] = 0;
}

/// Termwise derivatives of the characteristic theta series
/// `sum_{n in Z^g + eps} exp(pi i n.Bn + 2 pi i n.z)` along `dirs`, one value
/// per multi-index in `multis`. Arbitrary orders are allowed here.
pub fn theta_series_derivs(
    z: &[C64],
    b: &PeriodMatrix,
    eps: &[f64],
    dirs: &[Vec<C64>],
    multis: &[Vec<usize>],
    pol: &TruncationPolicy,
) -> Result<Vec<C64>> {
    let g = b.g;
    if z.len() != g || eps.len() != g || dirs.iter().any(|d| d.len() != g) {
        return Err(Error::InvalidArgument(format!("vectors must have length {g}")));
    }
    if z.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::InvalidArgument("non-finite theta argument".into()));
    }
    let order = multis.iter().map(|m| m.iter().sum::<usize>()).max().unwrap_or(0);
    let dir_norm = dirs
        .iter()
        .map(|d| d.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let y: Vec<f64> = z.iter().map(|v| v.im).collect();
    let r = radius_for(b, &y, dir_norm, order, pol.target_abs_tol)?;
    let (c, _) = b.center(&y);
    let s: Vec<f64> = (0..g).map(|i| eps[i] + c[i]).collect();
    let pts = enumerate_ellipsoid(b, &s, r, pol.max_terms)?;
    let mut sums = vec![ComplexSum::new(); multis.len()];
    let nd = dirs.len();
    let mut pows = vec![vec![C64::new(1.0, 0.0); order + 1]; nd];
    let mut n = vec![0.0; g];
    for (_, m) in &pts {
        for i in 0..g {
            n[i] = m[i] as f64 + eps[i];
        }
        let mut quad = C64::new(0.0, 0.0);
        for i in 0..g {
            let mut row = C64::new(0.0, 0.0);
            for j in 0..g {
                row += b.b[i * g + j] * n[j];
            }
            quad += row * n[i];
        }
        let lin: C64 = (0..g).map(|i| z[i] * n[i]).sum();
        let term = (I * PI * quad + 2.0 * I * PI * lin).exp();
        if order == 0 {
            for s in sums.iter_mut() {
                s.add(term);
            }
            continue;
        }
        for (d, dir) in dirs.iter().enumerate() {
            let a: C64 = 2.0 * I * PI * (0..g).map(|i| dir[i] * n[i]).sum::<C64>();
            for k in 1..=order {
                pows[d][k] = pows[d][k - 1] * a;
            }
        }
        for (s, mi) in sums.iter_mut().zip(multis) {
            let mut f = term;
            for (d, &k) in mi.iter().enumerate() {
                f *= pows[d][k];
            }
            s.add(f);
        }
    }
    Ok(sums.iter().map(|s| s.value()).collect())
}

/// Riemann theta function `theta(z | B)`.
pub fn theta_eval(z: &[C64], b: &PeriodMatrix, pol: &TruncationPolicy) -> Result<C64> {
    let zero = vec![0.0; b.g];
    Ok(theta_series_derivs(z, b, &zero, &[], &[vec![]], pol)?[0])
}

/// Evaluates theta at many points in parallel; output order matches input.
pub fn theta_eval_many(zs: &[Vec<C64>], b: &PeriodMatrix, pol: &TruncationPolicy) -> Result<Vec<C64>> {
    zs.par_iter().map(|z| theta_eval(z, b, pol)).collect()
}

/// Directional jet of theta up to total order `max_order <= 4`.
pub fn theta_jet(
    z: &[C64],
    b: &PeriodMatrix,
    directions: &[Vec<C64>],
    max_order: usize,
    pol: &TruncationPolicy,
) -> Result<DirectionalJet> {
    if max_order > 4 {
        return Err(Error::InvalidArgument("max_order must be at most 4".into()));
    }
    if directions.iter().any(|d| d.iter().all(|v| v.norm() == 0.0)) {
        return Err(Error::InvalidArgument("jet directions must be non-zero".into()));
    }
    let orders = multi_indices(directions.len(), max_order);
    let zero = vec![0.0; b.g];
    let values = theta_series_derivs(z, b, &zero, directions, &orders, pol)?;
    Ok(DirectionalJet {
        directions: directions.to_vec(),
        orders,
        values,
    })
}

/// Level two theta function `Theta[eps,0](z) = theta[eps,0](2z, 2B)`.
pub fn theta_with_char(eps: &HalfCharacteristic, z: &[C64], b: &PeriodMatrix, pol: &TruncationPolicy) -> Result<C64> {
    let b2 = b.scaled(2.0)?;
    let z2: Vec<C64> = z.iter().map(|v| v * 2.0).collect();
    Ok(theta_series_derivs(&z2, &b2, &eps.eps, &[], &[vec![]], pol)?[0])
}

/// Derivatives of `Theta[eps,0](w)` with respect to `w` along `dirs`.
pub fn theta_with_char_derivs(
    eps: &HalfCharacteristic,
    w: &[C64],
    b: &PeriodMatrix,
    dirs: &[Vec<C64>],
    multis: &[Vec<usize>],
    pol: &TruncationPolicy,
) -> Result<Vec<C64>> {
    let b2 = b.scaled(2.0)?;
    let w2: Vec<C64> = w.iter().map(|v| v * 2.0).collect();
    let d2: Vec<Vec<C64>> = dirs.iter().map(|d| d.iter().map(|v| v * 2.0).collect()).collect();
    theta_series_derivs(&w2, &b2, &eps.eps, &d2, multis, pol)
}

/// Unnormalised Kummer coordinates `(Theta[eps,0](z))_eps`.
pub fn kummer_coordinates(z: &[C64], b: &PeriodMatrix, pol: &TruncationPolicy) -> Result<Vec<C64>> {
    HalfCharacteristic::all(b.g)
        .iter()
        .map(|e| theta_with_char(e, z, b, pol))
        .collect()
}

/// Kummer map as a projective point, normalised by the first coordinate
/// whose modulus exceeds the evaluation tolerance.
pub fn kummer_map(z: &[C64], b: &PeriodMatrix, pol: &TruncationPolicy) -> Result<Vec<C64>> {
    let k = kummer_coordinates(z, b, pol)?;
    let thresh = 10.0 * pol.target_abs_tol;
    let lead = k
        .iter()
        .find(|v| v.norm() > thresh)
        .cloned()
        .ok_or(Error::AllCoordinatesVanish)?;
    Ok(k.iter().map(|v| v / lead).collect())
}

/// Quasi-periodicity defect `theta(z + m + Bn)` against
/// `exp(-pi i n.Bn - 2 pi i n.z) theta(z)`, measured relative to the size
/// of the multiplier: `|theta(z+m+Bn)/F - theta(z)| / (1 + |theta(z)|)`.
pub fn quasiperiodicity_residual(
    z: &[C64],
    m: &[i64],
    n: &[i64],
    b: &PeriodMatrix,
    pol: &TruncationPolicy,
) -> Result<f64> {
    let g = b.g;
    if m.len() != g || n.len() != g {
        return Err(Error::InvalidArgument(format!("lattice indices must have length {g}")));
    }
    let nc: Vec<C64> = n.iter().map(|&v| C64::new(v as f64, 0.0)).collect();
    let bn = b.apply(&nc);
    let zs: Vec<C64> = (0..g).map(|i| z[i] + m[i] as f64 + bn[i]).collect();
    let lhs = theta_eval(&zs, b, pol)?;
    let th = theta_eval(z, b, pol)?;
    let nbn: C64 = (0..g).map(|i| nc[i] * bn[i]).sum();
    let nz: C64 = (0..g).map(|i| nc[i] * z[i]).sum();
    let log_f = -I * PI * nbn - 2.0 * I * PI * nz;
    let back = lhs * (-log_f).exp();
    Ok((back - th).norm() / (1.0 + th.norm()))
}

/// Defect of `theta(z+w) theta(z-w) = sum_eps Theta[eps](z) Theta[eps](w)`.
pub fn addition_residual(z: &[C64], w: &[C64], b: &PeriodMatrix, pol: &TruncationPolicy) -> Result<f64> {
    let g = b.g;
    let zp: Vec<C64> = (0..g).map(|i| z[i] + w[i]).collect();
    let zm: Vec<C64> = (0..g).map(|i| z[i] - w[i]).collect();
    let lhs = theta_eval(&zp, b, pol)? * theta_eval(&zm, b, pol)?;
    let kz = kummer_coordinates(z, b, pol)?;
    let kw = kummer_coordinates(w, b, pol)?;
    let mut s = ComplexSum::new();
    for (a, c) in kz.iter().zip(&kw) {
        s.add(a * c);
    }
    Ok((lhs - s.value()).norm() / (1.0 + lhs.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::c;

    fn brute_theta1(z: C64, tau: C64, mmax: i64) -> C64 {
        let mut s = C64::new(0.0, 0.0);
        for m in -mmax..=mmax {
            let m = m as f64;
            s += (I * PI * m * m * tau + 2.0 * I * PI * m * z).exp();
        }
        s
    }

    #[test]
    fn genus_one_value_at_origin() {
        let b = PeriodMatrix::new(1, vec![c(0.0, 1.0)]).unwrap();
        let pol = TruncationPolicy::default();
        let v = theta_eval(&[c(0.0, 0.0)], &b, &pol).unwrap();
        let oracle = brute_theta1(c(0.0, 0.0), c(0.0, 1.0), 50);
        assert!((v - oracle).norm() < 1e-14);
        assert!((v.re - 1.086_434_811_213_308).abs() < 1e-12);
        assert_eq!(v.im, 0.0);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = PeriodMatrix::new(2, vec![c(0.0, 1.0), c(0.1, 0.0), c(0.2, 0.0), c(0.0, 1.0)]);
        assert!(matches!(asym, Err(Error::InvalidPeriodMatrix(_))));
        let indef = PeriodMatrix::new(1, vec![c(0.3, -1.0)]);
        assert!(matches!(indef, Err(Error::InvalidPeriodMatrix(_))));
    }

    #[test]
    fn multi_index_ordering() {
        let m = multi_indices(2, 2);
        assert_eq!(m, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn characteristics_in_binary_order() {
        let e = HalfCharacteristic::all(2);
        assert_eq!(e[1].eps, vec![0.0, 0.5]);
        assert_eq!(e[2].eps, vec![0.5, 0.0]);
    }
}
