//! Formal wave solutions of `(d_t - d_x^2 + u) psi = 0` on a theta line,
//! Baker-Akhiezer functions from ingested curve data, and grid residuals of
//! the KP, 2D Toda and discrete Hirota equations and their linear problems.
//!
//! The wave series `psi = exp(k x + (k^2 + b) t) (1 + sum xi_s k^-s)` is
//! built in two ways. Around each tracked zero `q(t)` of `tau` the
//! coefficients are bivariate Laurent-Taylor series in `y = x - q(t)` and
//! `T = t - t0`; the residue of the right-hand side at `y = 0` is the
//! obstruction. On a horizontal line free of zeros, for an integer vector
//! `U`, the coefficients are Fourier series in `x` and Taylor series in `T`
//! and the constants `c_s(T)` restore periodicity.

use crate::error::{Error, Result};
use crate::numerics::{C64, I};
use crate::secant_conditions::SecantDatum;
use crate::siegel_theta::{theta_series_derivs, PeriodMatrix, TruncationPolicy};
use crate::tau_divisor::{find_zeros_with, isolation_radius, track_zero, DivisorZero, TauLine, ZeroSearch};
use crate::weierstrass::EllipticLattice;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };
const YBIG: i32 = 1 << 20;

// ---------------------------------------------------------------------------
// Truncated bivariate series sum c[p][j] y^p T^j, p >= lead. Coefficients
// are meaningful through y^ymax and T^tmax; entries above `hi` are zero.

#[derive(Debug, Clone)]
struct Ser {
    lead: i32,
    hi: i32,
    ymax: i32,
    tmax: usize,
    c: Vec<C64>,
}

impl Ser {
    fn zeros(lead: i32, hi: i32, ymax: i32, tmax: usize) -> Ser {
        let hi = hi.min(ymax).max(lead - 1);
        let n = (hi - lead + 1) as usize * (tmax + 1);
        Ser {
            lead,
            hi,
            ymax,
            tmax,
            c: vec![ZERO; n],
        }
    }

    fn one(tmax: usize) -> Ser {
        let mut s = Ser::zeros(0, 0, YBIG, tmax);
        s.c[0] = ONE;
        s
    }

    fn t_series(v: &[C64], tmax: usize) -> Ser {
        let mut s = Ser::zeros(0, 0, YBIG, tmax);
        for (j, x) in v.iter().enumerate().take(tmax + 1) {
            s.c[j] = *x;
        }
        s
    }

    fn monomial(p: i32, a: C64, tmax: usize) -> Ser {
        let mut s = Ser::zeros(p, p, YBIG, tmax);
        s.c[0] = a;
        s
    }

    #[inline]
    fn idx(&self, p: i32, j: usize) -> usize {
        (p - self.lead) as usize * (self.tmax + 1) + j
    }

    fn get(&self, p: i32, j: usize) -> C64 {
        if p < self.lead || p > self.hi || j > self.tmax {
            ZERO
        } else {
            self.c[self.idx(p, j)]
        }
    }

    fn add_at(&mut self, p: i32, j: usize, v: C64) {
        if p >= self.lead && p <= self.hi && j <= self.tmax {
            let k = self.idx(p, j);
            self.c[k] += v;
        }
    }

    fn lin(&self, a: C64, o: &Ser, b: C64) -> Ser {
        let ymax = self.ymax.min(o.ymax);
        let tmax = self.tmax.min(o.tmax);
        let mut r = Ser::zeros(self.lead.min(o.lead), self.hi.max(o.hi), ymax, tmax);
        for p in r.lead..=r.hi {
            for j in 0..=tmax {
                let v = a * self.get(p, j) + b * o.get(p, j);
                let k = r.idx(p, j);
                r.c[k] = v;
            }
        }
        r
    }

    fn scale(&self, a: C64) -> Ser {
        let mut r = self.clone();
        r.c.iter_mut().for_each(|x| *x *= a);
        r
    }

    fn mul(&self, o: &Ser) -> Ser {
        let ymax = (self.ymax.saturating_add(o.lead)).min(o.ymax.saturating_add(self.lead));
        let tmax = self.tmax.min(o.tmax);
        let mut r = Ser::zeros(self.lead + o.lead, self.hi + o.hi, ymax, tmax);
        for p in self.lead..=self.hi {
            for q in o.lead..=o.hi {
                if p + q > r.hi {
                    break;
                }
                for j in 0..=tmax {
                    let a = self.c[self.idx(p, j)];
                    if a == ZERO {
                        continue;
                    }
                    for l in 0..=(tmax - j) {
                        let v = a * o.c[o.idx(q, l)];
                        let k = r.idx(p + q, j + l);
                        r.c[k] += v;
                    }
                }
            }
        }
        r
    }

    fn dy(&self) -> Ser {
        let lead = if self.lead == 0 { 0 } else { self.lead - 1 };
        let ymax = if self.ymax >= YBIG { YBIG } else { self.ymax - 1 };
        let mut r = Ser::zeros(lead, self.hi - 1, ymax, self.tmax);
        for p in self.lead..=self.hi {
            if p == 0 {
                continue;
            }
            for j in 0..=self.tmax {
                r.add_at(p - 1, j, p as f64 * self.get(p, j));
            }
        }
        r
    }

    fn dt(&self) -> Ser {
        let tmax = self.tmax.saturating_sub(1);
        let mut r = Ser::zeros(self.lead, self.hi, self.ymax, tmax);
        if self.tmax == 0 {
            return r;
        }
        for p in self.lead..=self.hi {
            for j in 0..self.tmax {
                r.add_at(p, j, (j + 1) as f64 * self.get(p, j + 1));
            }
        }
        r
    }

    /// Antiderivative in `y` with zero constant term; the `y^-1` column is
    /// dropped and returned.
    fn integrate_y(&self) -> (Ser, Vec<C64>) {
        let residue: Vec<C64> = (0..=self.tmax).map(|j| self.get(-1, j)).collect();
        let ymax = if self.ymax >= YBIG { YBIG } else { self.ymax + 1 };
        let mut r = Ser::zeros(self.lead + 1, self.hi + 1, ymax, self.tmax);
        for p in self.lead..=self.hi {
            if p == -1 {
                continue;
            }
            for j in 0..=self.tmax {
                r.add_at(p + 1, j, self.get(p, j) / (p + 1) as f64);
            }
        }
        (r, residue)
    }

    fn mul_t_pow(&self, k: usize) -> Ser {
        let mut r = Ser::zeros(self.lead, self.hi, self.ymax, self.tmax);
        for p in self.lead..=self.hi {
            for j in 0..=self.tmax {
                if j + k <= self.tmax {
                    r.add_at(p, j + k, self.get(p, j));
                }
            }
        }
        r
    }

    fn truncate(&self, ymax: i32) -> Ser {
        let ymax = ymax.min(self.ymax);
        let mut r = Ser::zeros(self.lead, self.hi, ymax, self.tmax);
        for p in r.lead..=r.hi {
            for j in 0..=self.tmax {
                let k = r.idx(p, j);
                r.c[k] = self.get(p, j);
            }
        }
        r
    }

    fn inverse(&self) -> Result<Ser> {
        let c0 = self.get(0, 0);
        if self.lead < 0 || c0 == ZERO {
            return Err(Error::InvalidArgument("series is not invertible".into()));
        }
        let rest = self.scale(ONE / c0).lin(ONE, &Ser::one(self.tmax), -ONE);
        let hi = if self.hi == 0 { 0 } else { self.ymax };
        let terms = hi.max(0) as usize + self.tmax + 1;
        let mut acc = Ser::one(self.tmax);
        let mut pw = Ser::one(self.tmax);
        let neg = rest.scale(-ONE);
        for _ in 0..terms {
            pw = pw.mul(&neg);
            if pw.hi > hi {
                pw = pw.truncate(hi);
            }
            acc = acc.lin(ONE, &pw, ONE);
        }
        if self.hi > 0 {
            acc = acc.truncate(self.ymax);
        }
        Ok(acc.scale(ONE / c0))
    }

    fn table(&self) -> SeriesTable {
        SeriesTable {
            lead: self.lead,
            ymax: self.ymax.min(self.hi.max(self.lead)),
            tmax: self.tmax,
            coeffs: (self.lead..=self.hi)
                .map(|p| (0..=self.tmax).map(|j| self.get(p, j)).collect())
                .collect(),
        }
    }
}

/// Coefficients `coeffs[p - lead][j]` of `y^p T^j`, meaningful through
/// `y^ymax` and `T^tmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTable {
    pub lead: i32,
    pub ymax: i32,
    pub tmax: usize,
    pub coeffs: Vec<Vec<C64>>,
}

impl SeriesTable {
    pub fn coeff(&self, p: i32, j: usize) -> C64 {
        if p < self.lead || j > self.tmax {
            return ZERO;
        }
        self.coeffs
            .get((p - self.lead) as usize)
            .and_then(|row| row.get(j))
            .copied()
            .unwrap_or(ZERO)
    }

    /// `d_y^m` of the series at `(y, T)`.
    pub fn eval(&self, y: C64, t: f64, m: usize) -> C64 {
        let mut s = ZERO;
        for (i, row) in self.coeffs.iter().enumerate() {
            let p = self.lead + i as i32;
            let mut f = 1.0;
            let mut q = p;
            for _ in 0..m {
                f *= q as f64;
                q -= 1;
            }
            if f == 0.0 {
                continue;
            }
            let mut tv = ZERO;
            for (j, c) in row.iter().enumerate() {
                tv += c * t.powi(j as i32);
            }
            s += f * tv * y.powi(q);
        }
        s
    }
}

// Univariate truncated power series in T.
fn tmul(a: &[C64], b: &[C64], n: usize) -> Vec<C64> {
    let mut r = vec![ZERO; n + 1];
    for (i, x) in a.iter().enumerate().take(n + 1) {
        for (j, y) in b.iter().enumerate().take(n + 1 - i) {
            r[i + j] += x * y;
        }
    }
    r
}

fn tinv(a: &[C64], n: usize) -> Vec<C64> {
    let mut r = vec![ZERO; n + 1];
    r[0] = ONE / a[0];
    for k in 1..=n {
        let mut s = ZERO;
        for j in 1..=k.min(a.len() - 1) {
            s += a[j] * r[k - j];
        }
        r[k] = -s * r[0];
    }
    r
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `a[i][j] = d_x^i d_t^j tau / (i! j!)` at `(x, t)` for `j <= tj`, `i + j <= total`
/// and `i <= ix`.
fn tau_taylor(line: &TauLine, x: C64, t: f64, ix: usize, tj: usize, total: usize) -> Result<Vec<Vec<C64>>> {
    let mut orders = Vec::new();
    for i in 0..=ix {
        for j in 0..=tj {
            if i + j <= total {
                orders.push([i, j]);
            }
        }
    }
    let d = line.derivs(x, t, &orders)?;
    let mut a = vec![vec![ZERO; tj + 1]; ix + 1];
    for (o, v) in orders.iter().zip(d) {
        a[o[0]][o[1]] = v / (factorial(o[0]) * factorial(o[1]));
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// Wave recursion

/// Options of [`wave_recursion_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveOptions {
    /// The constant `b` of the exponent `(k^2 + b) t`.
    pub b: C64,
    /// Halt with `ResidueObstruction` when an obstruction exceeds this.
    pub halt_tol: Option<f64>,
    /// Periodic mode: solve for `c_s(T)`; `false` keeps `c_s = 0`.
    pub fix_constants: bool,
    /// Fourier nodes per period.
    pub nx: usize,
    /// Extra `y` orders kept in the local series.
    pub y_margin: usize,
    pub search: ZeroSearch,
}

impl Default for WaveOptions {
    fn default() -> Self {
        Self {
            b: ZERO,
            halt_tol: Some(1e-6),
            fix_constants: true,
            nx: 64,
            y_margin: 6,
            search: ZeroSearch::default(),
        }
    }
}

/// Laurent-Taylor data of the wave coefficients at one tracked zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalWave {
    pub zero: DivisorZero,
    /// Radius within which the local series are evaluated.
    pub radius: f64,
    /// `q(t0 + T)` Taylor coefficients.
    pub q_taylor: Vec<C64>,
    /// `u` in the moving coordinate `y = x - q(t)`.
    pub u: SeriesTable,
    /// `xi_0 .. xi_S`, normalised by a vanishing `y^0` coefficient.
    pub xi: Vec<SeriesTable>,
    /// Residue of the right-hand side of order `s` at `y = 0`, `s = 0 ..= S`.
    pub obstructions: Vec<C64>,
}

impl LocalWave {
    pub fn qdot(&self) -> C64 {
        self.q_taylor.get(1).copied().unwrap_or(ZERO)
    }

    pub fn qddot(&self) -> C64 {
        2.0 * self.q_taylor.get(2).copied().unwrap_or(ZERO)
    }

    /// `(v, w)` of `u = 2/y^2 + v + w y + ...` at `t0`.
    pub fn vw(&self) -> (C64, C64) {
        (self.u.coeff(0, 0), self.u.coeff(1, 0))
    }

    /// `(r_s, r_s0, r_s1, dr_s/dt)` at `t0`.
    pub fn laurent(&self, s: usize) -> (C64, C64, C64, C64) {
        let x = &self.xi[s];
        (x.coeff(-1, 0), x.coeff(0, 0), x.coeff(1, 0), x.coeff(-1, 1))
    }

    /// `dr_s/dt + v r_s + 2 r_s1`, recomputed from the Laurent data.
    pub fn obstruction_from_laurent(&self, s: usize, b: C64) -> C64 {
        let (r, _, r1, rdot) = self.laurent(s);
        let (v, _) = self.vw();
        rdot + (v + b) * r + 2.0 * r1
    }

    /// `|ob_{s+1} + (r_s (q'' - 2 w) + q' ob_s) / 2|`.
    pub fn propagation_defect(&self, s: usize) -> f64 {
        let (r, _, _, _) = self.laurent(s);
        let (_, w) = self.vw();
        let pred = -0.5 * (r * (self.qddot() - 2.0 * w) + self.qdot() * self.obstructions[s]);
        (self.obstructions[s + 1] - pred).norm()
    }
}

/// Fourier-Taylor data of the wave coefficients on the line
/// `x = base + s`, `s` real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicWave {
    pub base: C64,
    pub nx: usize,
    /// `xi_hat[s][j][n + nx/2 - 1]`: Fourier coefficient `n` of the `T^j`
    /// coefficient of `xi^0_s`.
    pub xi_hat: Vec<Vec<Vec<C64>>>,
    /// `c[s][j]`: Taylor coefficients of `c_s(T)`.
    pub c: Vec<Vec<C64>>,
    /// `defects[s] = max_j |xi^0_{s+1}(x+1) - xi^0_{s+1}(x)|` over the Taylor
    /// coefficients, `s = 0 ..= S`.
    pub defects: Vec<f64>,
    pub u_mean: Vec<C64>,
}

/// The formal wave solution up to order `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveSeries {
    pub order: usize,
    pub b: C64,
    pub t0: f64,
    pub periodic: bool,
    pub zeros: Vec<LocalWave>,
    pub periodic_part: Option<PeriodicWave>,
}

impl WaveSeries {
    pub fn max_obstruction(&self) -> f64 {
        self.zeros
            .iter()
            .flat_map(|z| z.obstructions.iter().map(|o| o.norm()))
            .fold(0.0, f64::max)
    }

    pub fn max_propagation_defect(&self) -> f64 {
        let mut m: f64 = 0.0;
        for z in &self.zeros {
            for s in 0..self.order {
                m = m.max(z.propagation_defect(s));
            }
        }
        m
    }

    pub fn max_periodicity_defect(&self) -> Option<f64> {
        self.periodic_part
            .as_ref()
            .map(|p| p.defects.iter().cloned().fold(0.0, f64::max))
    }

    /// `d_x^m xi_s` at `(x, t)`: from the periodic part when present,
    /// otherwise from the local series of the zero whose disc contains `x`.
    pub fn xi(&self, s: usize, x: C64, t: f64, m: usize) -> Result<C64> {
        if s > self.order {
            return Err(Error::InvalidArgument(format!("order {s} exceeds {}", self.order)));
        }
        let tt = t - self.t0;
        if let Some(p) = &self.periodic_part {
            let n0 = p.nx as i64 / 2 - 1;
            let mut val = ZERO;
            for (j, row) in p.xi_hat[s].iter().enumerate() {
                let mut f = if m == 0 { p.c[s].get(j).copied().unwrap_or(ZERO) } else { ZERO };
                for (i, c) in row.iter().enumerate() {
                    let n = i as i64 - n0;
                    let k = 2.0 * PI * I * n as f64;
                    f += c * k.powi(m as i32) * (k * (x - p.base)).exp();
                }
                val += f * tt.powi(j as i32);
            }
            return Ok(val);
        }
        for z in &self.zeros {
            let q = csum_t(&z.q_taylor, tt);
            let y = x - q;
            if y.norm() < z.radius {
                return Ok(z.xi[s].eval(y, tt, m));
            }
        }
        Err(Error::InvalidArgument(format!("{x} is outside every local disc")))
    }
}

fn csum_t(c: &[C64], t: f64) -> C64 {
    c.iter().rev().fold(ZERO, |acc, x| acc * t + x)
}

/// [`wave_recursion_with`] with default options.
pub fn wave_recursion(line: &TauLine, order: usize, periodic: bool) -> Result<WaveSeries> {
    wave_recursion_with(line, order, periodic, &WaveOptions::default())
}

/// Solves `2 xi'_{s+1} = d_t xi_s + (u + b) xi_s - xi''_s` through order `S`
/// around every zero of `tau(., t0)` in the window, `t0 = t_range[0]`, and,
/// when `periodic`, on a zero-free horizontal line with the constants
/// `c_s(T)` fixed by `c_s(0) = 0` and the periodicity of `xi^0_{s+1}`.
pub fn wave_recursion_with(line: &TauLine, order: usize, periodic: bool, opts: &WaveOptions) -> Result<WaveSeries> {
    let t0 = line.t_range[0];
    let zeros = find_zeros_with(line, t0, &opts.search)?;
    for z in &zeros {
        if !z.simple {
            return Err(Error::NonSimpleZero(format!("zero at {}", z.q)));
        }
        if line.t_range[1] > t0 {
            track_zero(line, z, line.t_range[1])?;
        }
    }
    let locals: Vec<Result<LocalWave>> = zeros.par_iter().map(|z| local_wave(line, z, order, opts)).collect();
    let mut out = Vec::with_capacity(locals.len());
    for l in locals {
        let l = l?;
        if let Some(tol) = opts.halt_tol {
            if let Some((s, o)) = l.obstructions.iter().enumerate().find(|(_, o)| o.norm() > tol) {
                return Err(Error::ResidueObstruction {
                    order: s,
                    value: o.norm(),
                });
            }
        }
        out.push(l);
    }
    let periodic_part = if periodic { Some(periodic_wave(line, order, opts)?) } else { None };
    Ok(WaveSeries {
        order,
        b: opts.b,
        t0,
        periodic,
        zeros: out,
        periodic_part,
    })
}

/// Obstruction of order `s` at the tracked zero nearest to `zero.q`.
pub fn residue_obstruction(series: &WaveSeries, zero: &DivisorZero, s: usize) -> Option<C64> {
    let z = series
        .zeros
        .iter()
        .min_by(|a, b| (a.zero.q - zero.q).norm().total_cmp(&(b.zero.q - zero.q).norm()))?;
    if (z.zero.q - zero.q).norm() > z.radius {
        return None;
    }
    z.obstructions.get(s).copied()
}

fn local_wave(line: &TauLine, zero: &DivisorZero, order: usize, opts: &WaveOptions) -> Result<LocalWave> {
    let t0 = zero.t;
    let s_max = order as i32;
    let ytau = s_max + 4 + opts.y_margin as i32;
    let ttau = order + 1;
    let tdel = ttau + 1;
    let total = ytau as usize + tdel;
    let a = tau_taylor(line, zero.q, t0, total, tdel, total)?;
    let a10 = a[1][0];
    if a10.norm() == 0.0 {
        return Err(Error::NonSimpleZero(format!("d_x tau vanishes at {}", zero.q)));
    }
    // q(t0 + T) = q0 + delta(T) from tau(q0 + delta, t0 + T) = 0
    let mut delta = vec![ZERO; tdel + 1];
    for _ in 0..=tdel {
        let mut g = vec![ZERO; tdel + 1];
        let mut pw = vec![ZERO; tdel + 1];
        pw[0] = ONE;
        for (i, ai) in a.iter().enumerate() {
            for (j, aij) in ai.iter().enumerate() {
                if (i == 0 && j == 0) || *aij == ZERO {
                    continue;
                }
                for k in 0..=(tdel - j) {
                    g[j + k] += aij * pw[k];
                }
            }
            pw = tmul(&pw, &delta, tdel);
        }
        for k in 1..=tdel {
            delta[k] -= g[k] / a10;
        }
    }
    // tau(q(t) + y, t) as a series in (y, T)
    let mut base = Ser::zeros(0, 1, YBIG, ttau);
    for j in 1..=ttau {
        base.add_at(0, j, delta[j]);
    }
    base.add_at(1, 0, ONE);
    let mut acc = Ser::zeros(0, ytau, ytau, ttau);
    let mut pw = Ser::one(ttau).truncate(ytau);
    for ai in a.iter() {
        for (j, aij) in ai.iter().enumerate().take(ttau + 1) {
            if *aij != ZERO {
                acc = acc.lin(ONE, &pw.mul_t_pow(j), *aij);
            }
        }
        pw = pw.mul(&base).truncate(ytau);
    }
    // P = tau / y, u = 2/y^2 - 2 d_y (P_y / P)
    let mut p = Ser::zeros(0, ytau - 1, ytau - 1, ttau);
    for k in 0..ytau {
        for j in 0..=ttau {
            p.add_at(k, j, acc.get(k + 1, j));
        }
    }
    let l = p.dy().mul(&p.inverse()?);
    let u = l.dy().scale(C64::new(-2.0, 0.0)).lin(ONE, &Ser::monomial(-2, C64::new(2.0, 0.0), ttau), ONE);
    let qdot: Vec<C64> = (0..tdel).map(|j| (j + 1) as f64 * delta[j + 1]).collect();
    let qd = Ser::t_series(&qdot, ttau);
    let ub = u.lin(ONE, &Ser::monomial(0, opts.b, ttau), ONE);

    let mut eta = Ser::one(ttau);
    let mut xi = Vec::with_capacity(order + 1);
    let mut obstructions = Vec::with_capacity(order + 1);
    for s in 0..=order {
        let ey = eta.dy();
        let rhs = eta
            .dt()
            .lin(ONE, &qd.mul(&ey), -ONE)
            .lin(ONE, &ub.mul(&eta), ONE)
            .lin(ONE, &ey.dy(), -ONE);
        if rhs.ymax < -1 {
            return Err(Error::TruncationInsufficient(format!("order {s} lost the residue column")));
        }
        obstructions.push(rhs.get(-1, 0));
        xi.push(eta.table());
        if s < order {
            eta = rhs.integrate_y().0.scale(C64::new(0.5, 0.0));
        }
    }
    let radius = 0.5 * isolation_radius(line, zero.q, t0)?;
    Ok(LocalWave {
        zero: *zero,
        radius,
        q_taylor: std::iter::once(zero.q).chain(delta[1..].iter().copied()).collect(),
        u: u.table(),
        xi,
        obstructions,
    })
}

struct Fourier {
    nx: usize,
    modes: Vec<i64>,
}

impl Fourier {
    fn new(nx: usize) -> Self {
        let h = nx as i64 / 2;
        Self {
            nx,
            modes: (-(h - 1)..h).collect(),
        }
    }

    fn forward(&self, v: &[C64]) -> Vec<C64> {
        self.modes
            .iter()
            .map(|&n| {
                let mut s = ZERO;
                for (k, x) in v.iter().enumerate() {
                    s += x * C64::from_polar(1.0, -2.0 * PI * (n * k as i64) as f64 / self.nx as f64);
                }
                s / self.nx as f64
            })
            .collect()
    }

    // sum_n c_n (2 pi i n)^m e^{2 pi i n k / nx}; m = -1 drops n = 0 and integrates
    fn nodes(&self, c: &[C64], m: i32) -> Vec<C64> {
        (0..self.nx)
            .map(|k| {
                let mut s = ZERO;
                for (&n, cn) in self.modes.iter().zip(c) {
                    if n == 0 && m != 0 {
                        continue;
                    }
                    let f = (2.0 * PI * I * n as f64).powi(m);
                    s += cn * f * C64::from_polar(1.0, 2.0 * PI * (n * k as i64) as f64 / self.nx as f64);
                }
                s
            })
            .collect()
    }
}

fn is_integer_vector(u: &[C64]) -> bool {
    u.iter().all(|x| x.im.abs() < 1e-12 && (x.re - x.re.round()).abs() < 1e-12) && u.iter().any(|x| x.norm() > 0.5)
}

fn envelope_tau(line: &TauLine, x: C64, t: f64) -> Result<f64> {
    let z = line.point(x, t);
    let v = line.derivs(x, t, &[[0, 0]])?[0];
    Ok(v.norm() * (-line.b.gaussian_exponent(&z)).exp())
}

fn periodic_wave(line: &TauLine, order: usize, opts: &WaveOptions) -> Result<PeriodicWave> {
    if !is_integer_vector(&line.u) {
        return Err(Error::InvalidArgument("periodic mode needs an integer vector U".into()));
    }
    let nx = opts.nx.max(8);
    let t0 = line.t_range[0];
    let x0 = line.window.lo.re;
    let (ylo, yhi) = (line.window.lo.im, line.window.hi.im);
    let mut best = (f64::NEG_INFINITY, ylo);
    for i in 0..=40 {
        let y = ylo + (yhi - ylo) * i as f64 / 40.0;
        let mut m = f64::INFINITY;
        for k in 0..32 {
            m = m.min(envelope_tau(line, C64::new(x0 + k as f64 / 32.0, y), t0)?);
        }
        if m > best.0 {
            best = (m, y);
        }
    }
    let base = C64::new(x0, best.1);
    let tt = order + 1;
    let fourier = Fourier::new(nx);
    let u_nodes: Vec<Vec<C64>> = (0..nx)
        .into_par_iter()
        .map(|k| -> Result<Vec<C64>> {
            let x = base + k as f64 / nx as f64;
            let a = tau_taylor(line, x, t0, 2, tt, 2 + tt)?;
            let t0s: Vec<C64> = a[0].clone();
            if t0s[0].norm() == 0.0 {
                return Err(Error::DivisorHit(format!("tau vanishes at {x}")));
            }
            let inv = tinv(&t0s, tt);
            let l1 = tmul(&a[1], &inv, tt);
            let t2: Vec<C64> = a[2].iter().map(|v| 2.0 * v).collect();
            let l2 = tmul(&t2, &inv, tt);
            let l11 = tmul(&l1, &l1, tt);
            Ok((0..=tt).map(|j| -2.0 * (l2[j] - l11[j]) + if j == 0 { opts.b } else { ZERO }).collect())
        })
        .collect::<Result<_>>()?;
    // u_t[j][k] including b
    let u_t: Vec<Vec<C64>> = (0..=tt).map(|j| (0..nx).map(|k| u_nodes[k][j]).collect()).collect();
    let u_mean: Vec<C64> = u_t.iter().map(|r| r.iter().sum::<C64>() / nx as f64).collect();

    let mut xi_nodes: Vec<Vec<Vec<C64>>> = vec![vec![vec![ZERO; nx]; tt + 1]];
    let mut xi_hat: Vec<Vec<Vec<C64>>> = vec![vec![vec![ZERO; fourier.modes.len()]; tt + 1]];
    let mut cs: Vec<Vec<C64>> = vec![{
        let mut c = vec![ZERO; tt + 1];
        c[0] = ONE;
        c
    }];
    let mut defects = Vec::with_capacity(order + 1);
    for s in 0..=order {
        let vs = tt - s;
        if s >= 1 {
            let mut c = vec![ZERO; vs + 1];
            if opts.fix_constants {
                // f_j = mean of d_T xi^0 + (u + b) xi^0
                let mut f = vec![ZERO; vs];
                for (j, fj) in f.iter_mut().enumerate() {
                    let mut acc = ZERO;
                    for k in 0..nx {
                        let mut v = (j + 1) as f64 * xi_nodes[s][j + 1][k];
                        for l in 0..=j {
                            v += u_t[j - l][k] * xi_nodes[s][l][k];
                        }
                        acc += v;
                    }
                    *fj = acc / nx as f64;
                }
                for j in 0..vs {
                    let mut acc = f[j];
                    for l in 0..=j {
                        acc += u_mean[j - l] * c[l];
                    }
                    c[j + 1] = -acc / (j + 1) as f64;
                }
            }
            cs.push(c);
        }
        // right-hand side, T-orders 0 .. vs - 1
        let mut rhs = vec![vec![ZERO; nx]; vs];
        let xi_s = |j: usize, k: usize| cs[s][j] + xi_nodes[s][j][k];
        for (j, row) in rhs.iter_mut().enumerate() {
            let d2 = fourier.nodes(&xi_hat[s][j], 2);
            for k in 0..nx {
                let mut v = (j + 1) as f64 * xi_s(j + 1, k) - d2[k];
                for l in 0..=j {
                    v += u_t[j - l][k] * xi_s(l, k);
                }
                row[k] = v;
            }
        }
        let mut defect: f64 = 0.0;
        let mut next_nodes = vec![vec![ZERO; nx]; tt + 1];
        let mut next_hat = vec![vec![ZERO; fourier.modes.len()]; tt + 1];
        for (j, row) in rhs.iter().enumerate() {
            let mean = row.iter().sum::<C64>() / nx as f64;
            defect = defect.max(0.5 * mean.norm());
            let mut hat = fourier.forward(row);
            for (h, &n) in hat.iter_mut().zip(&fourier.modes) {
                *h = if n == 0 { ZERO } else { 0.5 * *h / (2.0 * PI * I * n as f64) };
            }
            let vals = fourier.nodes(&hat, 0);
            let shift = vals[0];
            let n0 = fourier.modes.iter().position(|&n| n == 0).unwrap();
            hat[n0] = -shift;
            next_nodes[j] = vals.iter().map(|v| v - shift).collect();
            next_hat[j] = hat;
        }
        defects.push(defect);
        if s < order {
            xi_nodes.push(next_nodes);
            xi_hat.push(next_hat);
        }
    }
    Ok(PeriodicWave {
        base,
        nx,
        xi_hat,
        c: cs,
        defects,
        u_mean,
    })
}

// ---------------------------------------------------------------------------
// Grid residuals

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Pointwise residual table of one equation over a sample grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResidual {
    pub grid: String,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub max: f64,
    pub mean: f64,
    /// Constants fitted on the grid, by name.
    #[serde(default)]
    pub fitted: Vec<(String, C64)>,
    /// Observed finite-difference order, when a step ladder was run.
    #[serde(default)]
    pub order: Option<f64>,
}

impl GridResidual {
    pub fn new(grid: impl Into<String>, points: Vec<Vec<f64>>, values: Vec<f64>) -> Self {
        let max = values.iter().cloned().fold(0.0, f64::max);
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self {
            grid: grid.into(),
            points,
            values,
            max,
            mean,
            fitted: Vec::new(),
            order: None,
        }
    }

    pub fn fitted(&self, name: &str) -> Option<C64> {
        self.fitted.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// One row per grid point: index, coordinates, residual.
    pub fn to_csv(&self) -> String {
        let dim = self.points.first().map_or(0, |p| p.len());
        let mut out = String::from("index");
        for i in 0..dim {
            out += &format!(",p{i}");
        }
        out += ",residual\n";
        for (i, (p, v)) in self.points.iter().zip(&self.values).enumerate() {
            out += &i.to_string();
            for c in p {
                out += &format!(",{c:e}");
            }
            out += &format!(",{v:e}\n");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Curve data

/// Truncated expansion `log ln k + sum_j coeffs[j] k^(lead - j)` of an
/// abelian integral in the local parameter at a marked point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbelianSeries {
    #[serde(default)]
    pub log: i32,
    pub lead: i32,
    pub coeffs: Vec<C64>,
}

impl AbelianSeries {
    pub fn zero() -> Self {
        Self {
            log: 0,
            lead: 0,
            coeffs: Vec::new(),
        }
    }

    /// Coefficient of `k^power`.
    pub fn coeff(&self, power: i32) -> C64 {
        let j = self.lead - power;
        if j >= 0 && (j as usize) < self.coeffs.len() {
            self.coeffs[j as usize]
        } else {
            ZERO
        }
    }

    pub fn eval(&self, k: C64) -> C64 {
        let s = 1.0 / k;
        let mut acc = ZERO;
        for c in self.coeffs.iter().rev() {
            acc = acc * s + c;
        }
        let mut v = acc * k.powi(self.lead);
        if self.log != 0 {
            v += self.log as f64 * k.ln();
        }
        v
    }

    // Size of the last two retained terms.
    fn tail(&self, k: C64) -> f64 {
        let n = self.coeffs.len();
        (n.saturating_sub(2)..n)
            .map(|j| self.coeffs[j].norm() * k.norm().powi(self.lead - j as i32))
            .fold(0.0, f64::max)
    }
}

/// Data attached to one marked point `P_alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedPoint {
    /// `U[i]`: b-periods over `2 pi i` of `d Omega_{alpha,i}`, `i = 0..=trunc_order`.
    #[serde(rename = "U")]
    pub u: Vec<Vec<C64>>,
    /// `Omega[beta][i]`: expansion of `Omega_{beta,i}` near this point, `i = 0..=flows`.
    #[serde(rename = "Omega")]
    pub omega: Vec<Vec<AbelianSeries>>,
    /// `A(P_alpha)`.
    #[serde(rename = "Abel0")]
    pub abel0: Vec<C64>,
    /// `Abel[i-1]`: coefficient of `k^-i` in `A(p)`, `i = 1..=trunc_order`.
    #[serde(rename = "Abel")]
    pub abel: Vec<Vec<C64>>,
}

/// Curve data for Baker-Akhiezer functions with `N <= 3` marked points.
///
/// Times are indexed `t[beta][i]` with `i = 0..=flows`; `t[beta][0]` is a
/// discrete variable and is ignored for the last point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCurveDatum")]
pub struct CurveDatum {
    #[serde(rename = "B")]
    pub b: PeriodMatrix,
    pub points: Vec<MarkedPoint>,
    #[serde(rename = "Z")]
    pub z: Vec<C64>,
    pub trunc_order: usize,
    pub flows: usize,
}

#[derive(Deserialize)]
struct RawCurveDatum {
    #[serde(rename = "B")]
    b: PeriodMatrix,
    points: Vec<MarkedPoint>,
    #[serde(rename = "Z")]
    z: Vec<C64>,
    trunc_order: usize,
    flows: usize,
}

impl TryFrom<RawCurveDatum> for CurveDatum {
    type Error = Error;
    fn try_from(r: RawCurveDatum) -> Result<Self> {
        CurveDatum::new(r.b, r.points, r.z, r.trunc_order, r.flows)
    }
}

const ABEL_TOL: f64 = 1e-10;

impl CurveDatum {
    /// Validated constructor: shapes and the Abel expansion consistency
    /// `Abel_i = -U_i / i` for `i = 1..=trunc_order` at every point.
    pub fn new(b: PeriodMatrix, points: Vec<MarkedPoint>, z: Vec<C64>, trunc_order: usize, flows: usize) -> Result<Self> {
        let cd = Self::new_unchecked(b, points, z, trunc_order, flows)?;
        let d = cd.abel_defect();
        if !(d <= ABEL_TOL) {
            return Err(Error::InvalidArgument(format!(
                "Abel expansion inconsistent with U (defect {d:e})"
            )));
        }
        Ok(cd)
    }

    /// Shape checks only.
    pub fn new_unchecked(b: PeriodMatrix, points: Vec<MarkedPoint>, z: Vec<C64>, trunc_order: usize, flows: usize) -> Result<Self> {
        let g = b.genus();
        let n = points.len();
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if n == 0 || n > 3 {
            return bad("between one and three marked points are supported");
        }
        if flows == 0 || flows > 4 || trunc_order < flows {
            return bad("need 1 <= flows <= 4 and trunc_order >= flows");
        }
        if z.len() != g {
            return bad("Z has the wrong length");
        }
        for p in &points {
            if p.u.len() != trunc_order + 1 || p.abel.len() != trunc_order || p.abel0.len() != g {
                return bad("marked point data do not match trunc_order");
            }
            if p.u.iter().chain(&p.abel).any(|v| v.len() != g) {
                return bad("marked point vectors have the wrong length");
            }
            if p.omega.len() != n || p.omega.iter().any(|row| row.len() != flows + 1) {
                return bad("Omega must be indexed [beta][0..=flows]");
            }
        }
        Ok(Self {
            b,
            points,
            z,
            trunc_order,
            flows,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("curve datum: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("curve datum serializes")
    }

    pub fn genus(&self) -> usize {
        self.b.genus()
    }

    /// Largest `|Abel_i + U_i / i| / (1 + |U_i|)` over points and orders.
    pub fn abel_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for p in &self.points {
            for i in 1..=self.trunc_order {
                for (a, u) in p.abel[i - 1].iter().zip(&p.u[i]) {
                    d = d.max((a + u / i as f64).norm() / (1.0 + u.norm()));
                }
            }
        }
        d
    }

    pub fn zero_times(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.flows + 1]; self.points.len()]
    }

    fn check_times(&self, t: &[Vec<f64>]) -> Result<()> {
        if t.len() != self.points.len() || t.iter().any(|r| r.len() != self.flows + 1) {
            return Err(Error::InvalidArgument("times must be indexed [beta][0..=flows]".into()));
        }
        Ok(())
    }

    fn used(&self, beta: usize, i: usize) -> bool {
        i > 0 || beta + 1 < self.points.len()
    }

    /// `W = Z + sum t_{beta,i} U_{beta,i}`.
    pub fn shift(&self, t: &[Vec<f64>]) -> Result<Vec<C64>> {
        self.check_times(t)?;
        let mut w = self.z.clone();
        for (beta, row) in t.iter().enumerate() {
            for (i, &ti) in row.iter().enumerate() {
                if ti != 0.0 && self.used(beta, i) {
                    for (wk, uk) in w.iter_mut().zip(&self.points[beta].u[i]) {
                        *wk += ti * uk;
                    }
                }
            }
        }
        Ok(w)
    }

    /// Truncated Abel map near `P_alpha` and its tail estimate.
    pub fn abel_at(&self, alpha: usize, k: C64) -> (Vec<C64>, f64) {
        let p = &self.points[alpha];
        let s = 1.0 / k;
        let mut a = p.abel0.clone();
        let mut sp = ONE;
        for row in &p.abel {
            sp *= s;
            for (ak, ck) in a.iter_mut().zip(row) {
                *ak += ck * sp;
            }
        }
        let tail = p.abel.last().map_or(0.0, |row| row.iter().map(|c| c.norm()).fold(0.0, f64::max) * sp.norm());
        (a, tail)
    }
}

const TRUNC_TOL: f64 = 1e-8;
const DIVISOR_TOL: f64 = 1e-12;

fn theta_multi(b: &PeriodMatrix, z: &[C64], dirs: &[Vec<C64>], multis: &[Vec<usize>]) -> Result<Vec<C64>> {
    theta_series_derivs(z, b, &vec![0.0; b.genus()], dirs, multis, &TruncationPolicy::default())
}

fn theta_value(b: &PeriodMatrix, z: &[C64]) -> Result<C64> {
    Ok(theta_multi(b, z, &[], &[vec![]])?[0])
}

fn divisor_check(b: &PeriodMatrix, z: &[C64], v: C64, what: &str) -> Result<()> {
    let env = v.norm() * (-b.gaussian_exponent(z)).exp();
    if !(env > DIVISOR_TOL) {
        return Err(Error::DivisorHit(format!("{what}: normalized |theta| = {env:e}")));
    }
    Ok(())
}

fn add_vec(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

// Exponent sum t Omega(p) near P_alpha with its truncation tail.
fn exponent(cd: &CurveDatum, t: &[Vec<f64>], alpha: usize, k: C64) -> (C64, f64) {
    let pt = &cd.points[alpha];
    let mut e = ZERO;
    let mut tail = 0.0;
    for (beta, row) in t.iter().enumerate() {
        for (i, &ti) in row.iter().enumerate() {
            if ti != 0.0 && cd.used(beta, i) {
                let s = &pt.omega[beta][i];
                e += ti * s.eval(k);
                tail += ti.abs() * s.tail(k);
            }
        }
    }
    (e, tail)
}

/// Baker-Akhiezer function at `p` near `P_alpha` with local coordinate `k`:
/// `exp(sum t Omega(p)) theta(A(p) + W) theta(Z) / (theta(W) theta(A(p) + Z))`,
/// `W = Z + sum t U`. The factor `theta(Z)/theta(W)` is the normalization
/// with leading coefficient one at `P_1`.
pub fn ba_eval(cd: &CurveDatum, t: &[Vec<f64>], alpha: usize, k: C64) -> Result<C64> {
    Ok(ba_log_jet(cd, t, alpha, k, &[])?.0)
}

// psi together with first and second pure log-derivatives along the flows
// `(beta, i)` listed.
fn ba_log_jet(cd: &CurveDatum, t: &[Vec<f64>], alpha: usize, k: C64, flows: &[(usize, usize)]) -> Result<(C64, Vec<C64>, Vec<C64>)> {
    if alpha >= cd.points.len() {
        return Err(Error::InvalidArgument(format!("no marked point {alpha}")));
    }
    let w = cd.shift(t)?;
    let (a, atail) = cd.abel_at(alpha, k);
    let (e, etail) = exponent(cd, t, alpha, k);
    let mut tail = etail + atail;
    let pt = &cd.points[alpha];
    for &(beta, i) in flows {
        tail += pt.omega[beta][i].tail(k);
    }
    if tail > TRUNC_TOL {
        return Err(Error::TruncationInsufficient(format!(
            "expansion tail {tail:e} at |k| = {}",
            k.norm()
        )));
    }
    let aw = add_vec(&a, &w);
    let az = add_vec(&a, &cd.z);
    let dirs: Vec<Vec<C64>> = flows.iter().map(|&(b, i)| cd.points[b].u[i].clone()).collect();
    let nf = flows.len();
    let mut multis = vec![vec![0; nf]];
    for j in 0..nf {
        let mut m = vec![0; nf];
        m[j] = 1;
        multis.push(m.clone());
        m[j] = 2;
        multis.push(m);
    }
    let num = theta_multi(&cd.b, &aw, &dirs, &multis)?;
    let den = theta_multi(&cd.b, &w, &dirs, &multis)?;
    let tz = theta_value(&cd.b, &cd.z)?;
    let taz = theta_value(&cd.b, &az)?;
    divisor_check(&cd.b, &az, taz, "theta(A(p) + Z)")?;
    divisor_check(&cd.b, &w, den[0], "theta(W)")?;
    let psi = e.exp() * num[0] * tz / (den[0] * taz);
    let mut d1 = Vec::with_capacity(nf);
    let mut d2 = Vec::with_capacity(nf);
    for (j, &(beta, i)) in flows.iter().enumerate() {
        let (n1, n2) = (num[1 + 2 * j] / num[0], num[2 + 2 * j] / num[0]);
        let (m1, m2) = (den[1 + 2 * j] / den[0], den[2 + 2 * j] / den[0]);
        d1.push(pt.omega[beta][i].eval(k) + n1 - m1);
        d2.push(n2 - n1 * n1 - m2 + m1 * m1);
    }
    Ok((psi, d1, d2))
}

/// Residual of `(d_y - d_x^2 + u) psi = 0` for the one-point function,
/// `x = t_1`, `y = t_2`, with `u = 2 d_x xi_1` taken from the expansion
/// data at `P_1`. Grid points are `(x, y)`.
pub fn ba_kp_linear_residual(cd: &CurveDatum, grid: &[(f64, f64)], k: C64) -> Result<GridResidual> {
    if cd.flows < 2 {
        return Err(Error::InvalidArgument("need flows t_1 and t_2".into()));
    }
    let p0 = &cd.points[0];
    let w11 = p0.omega[0][1].coeff(-1);
    let vals: Vec<f64> = grid
        .par_iter()
        .map(|&(x, y)| {
            let mut t = cd.zero_times();
            t[0][1] = x;
            t[0][2] = y;
            let (_, d1, d2) = ba_log_jet(cd, &t, 0, k, &[(0, 1), (0, 2)])?;
            let w = cd.shift(&t)?;
            let j = theta_multi(&cd.b, &w, &[p0.abel[0].clone(), p0.u[1].clone()], &[vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]])?;
            let u = 2.0 * w11 + 2.0 * (j[3] / j[0] - j[1] * j[2] / (j[0] * j[0]));
            let lxx = d2[0] + d1[0] * d1[0];
            let r = d1[1] - lxx + u;
            Ok(ratio(r.norm(), d1[1].norm() + lxx.norm() + u.norm()))
        })
        .collect::<Result<_>>()?;
    let pts = grid.iter().map(|&(x, y)| vec![x, y]).collect();
    Ok(GridResidual::new(format!("ba-kp-linear k={k}"), pts, vals))
}

// ---------------------------------------------------------------------------
// Genus-one curve data

// Laurent coefficients c_n, n = -lead..=top, of samples on |s| = r.
fn cauchy_laurent(vals: &[C64], r: f64, lead: i32, top: i32) -> Vec<C64> {
    let m = vals.len();
    (-lead..=top)
        .map(|n| {
            let mut acc = ZERO;
            for (j, v) in vals.iter().enumerate() {
                let th = 2.0 * PI * j as f64 / m as f64;
                acc += v * C64::from_polar(r.powi(-n), -(n as f64) * th);
            }
            acc / m as f64
        })
        .collect()
}

fn circle(r: f64, m: usize) -> Vec<C64> {
    (0..m).map(|j| C64::from_polar(r, 2.0 * PI * j as f64 / m as f64)).collect()
}

// Continuous branch of log along a closed sampled curve.
fn unwrap_log(vals: &[C64]) -> Vec<C64> {
    let mut out: Vec<C64> = Vec::with_capacity(vals.len());
    for v in vals {
        let mut l = v.ln();
        if let Some(prev) = out.last() {
            let jump = ((l.im - prev.im) / (2.0 * PI)).round();
            l.im -= 2.0 * PI * jump;
        }
        out.push(l);
    }
    out
}

fn series_from(vals: &[C64], r: f64, log: i32, lead: i32, top: i32) -> AbelianSeries {
    AbelianSeries {
        log,
        lead,
        coeffs: cauchy_laurent(vals, r, lead, top),
    }
}

const CAUCHY_NODES: usize = 256;

// Normalized second-kind integral with pole y^-i, i = 1..=4.
fn omega_y(lat: &EllipticLattice, i: usize, y: C64) -> Result<C64> {
    let v = lat.values(y)?;
    Ok(match i {
        1 => v.zeta - lat.eta1 / lat.omega1 * y,
        2 => v.wp,
        3 => -0.5 * v.wp_prime,
        4 => lat.wp_second(y)? / 6.0,
        _ => return Err(Error::InvalidArgument("flows beyond t_4 are not supported".into())),
    })
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

fn lattice_points(lat: &EllipticLattice) -> Vec<C64> {
    let mut out = Vec::new();
    for m in -2i32..=2 {
        for n in -2i32..=2 {
            out.push(2.0 * m as f64 * lat.omega1 + 2.0 * n as f64 * lat.omega2);
        }
    }
    out
}

fn zero_const_at_first(series: &mut [Vec<Vec<AbelianSeries>>], beta: usize, i: usize) {
    let c = series[0][beta][i].coeff(0);
    for per_point in series.iter_mut() {
        let s = &mut per_point[beta][i];
        let j = s.lead as usize;
        if j < s.coeffs.len() {
            s.coeffs[j] -= c;
        }
    }
}

fn genus1_b(lat: &EllipticLattice) -> Result<PeriodMatrix> {
    PeriodMatrix::new(1, vec![lat.omega2 / lat.omega1])
}

/// One-point datum on `C / (2 omega_1 Z + 2 omega_2 Z)` with `P_1` at the
/// origin and local parameter `k = 1/x + beta`. Then `U_i = i beta^(i-1) U_1`,
/// `U_1 = -1/(2 omega_1)`, and `u = 2 wp(x + 2 beta y + 3 beta^2 t) + const`.
pub fn genus1_one_point(lat: &EllipticLattice, beta: C64, z: C64, trunc_order: usize, flows: usize) -> Result<CurveDatum> {
    if flows == 0 || flows > 4 || trunc_order < flows {
        return Err(Error::InvalidArgument("need 1 <= flows <= 4 and trunc_order >= flows".into()));
    }
    let u1 = -1.0 / (2.0 * lat.omega1);
    let mut rho = f64::INFINITY;
    for x in lattice_points(lat) {
        if x.norm() > 1e-12 {
            rho = rho.min((x / (1.0 + beta * x)).norm());
        }
    }
    if beta.norm() > 0.0 {
        rho = rho.min(1.0 / beta.norm());
    }
    let r = 0.35 * rho;
    let ss = circle(r, CAUCHY_NODES);
    let xs: Vec<C64> = ss.iter().map(|s| s / (1.0 - beta * s)).collect();
    let mut table = vec![vec![vec![AbelianSeries::zero(); flows + 1]]];
    for i in 1..=flows {
        let vals: Vec<C64> = xs
            .iter()
            .map(|&x| {
                let mut acc = ZERO;
                for j in 1..=i {
                    acc += binom(i, j) * beta.powi((i - j) as i32) * omega_y(lat, j, x)?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        table[0][0][i] = series_from(&vals, r, 0, i as i32, trunc_order as i32);
        zero_const_at_first(&mut table, 0, i);
    }
    let u: Vec<Vec<C64>> = (0..=trunc_order)
        .map(|i| vec![if i == 0 { ZERO } else { i as f64 * beta.powi(i as i32 - 1) * u1 }])
        .collect();
    let abel: Vec<Vec<C64>> = (1..=trunc_order).map(|i| vec![-beta.powi(i as i32 - 1) * u1]).collect();
    let point = MarkedPoint {
        u,
        omega: table.remove(0),
        abel0: vec![ZERO],
        abel,
    };
    CurveDatum::new(genus1_b(lat)?, vec![point], vec![z], trunc_order, flows)
}

/// Two-point datum with `P_1` at `0` and `P_2` at `a`, local parameters
/// `k_alpha = 1/(x - x_alpha)`. The discrete flow has `U_{1,0} = a/(2 omega_1)
/// = A(P_2) - A(P_1)`.
pub fn genus1_two_point(lat: &EllipticLattice, a: C64, z: C64, trunc_order: usize, flows: usize) -> Result<CurveDatum> {
    if flows == 0 || flows > 4 || trunc_order < flows {
        return Err(Error::InvalidArgument("need 1 <= flows <= 4 and trunc_order >= flows".into()));
    }
    if lat.lattice_distance(a) < 1e-3 {
        return Err(Error::InvalidArgument("marked points coincide modulo the lattice".into()));
    }
    let centers = [ZERO, a];
    let mut rho = f64::INFINITY;
    for x in lattice_points(lat) {
        for (ci, cj) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
            let d = (x + centers[ci] - centers[cj]).norm();
            if d > 1e-12 {
                rho = rho.min(d);
            }
        }
    }
    let r = 0.35 * rho;
    let ss = circle(r, CAUCHY_NODES);
    let top = trunc_order as i32;
    let c1 = lat.eta1 * a / lat.omega1;
    let sig_ma = lat.sigma(-a);
    let sig_a = lat.sigma(a);
    // table[alpha][beta][i]: expansion of Omega_{beta,i} near P_alpha
    let mut table = vec![vec![vec![AbelianSeries::zero(); flows + 1]; 2]; 2];
    // third-kind integral ln sigma(x - a) - ln sigma(x) + c1 x, log +1 at P_1
    let l_near0: Vec<C64> = {
        let la = unwrap_log(&ss.iter().map(|s| lat.sigma(s - a) / sig_ma).collect::<Vec<_>>());
        let ls = unwrap_log(&ss.iter().map(|s| lat.sigma(*s) / s).collect::<Vec<_>>());
        (0..ss.len()).map(|j| la[j] + sig_ma.ln() - ls[j] + c1 * ss[j]).collect()
    };
    let l_near1: Vec<C64> = {
        let ls = unwrap_log(&ss.iter().map(|s| lat.sigma(*s) / s).collect::<Vec<_>>());
        let la = unwrap_log(&ss.iter().map(|s| lat.sigma(a + s) / sig_a).collect::<Vec<_>>());
        (0..ss.len()).map(|j| ls[j] - la[j] - sig_a.ln() + c1 * (a + ss[j])).collect()
    };
    table[0][0][0] = series_from(&l_near0, r, 1, 0, top);
    table[1][0][0] = series_from(&l_near1, r, -1, 0, top);
    zero_const_at_first(&mut table, 0, 0);
    for beta in 0..2 {
        for i in 1..=flows {
            for alpha in 0..2 {
                let vals: Vec<C64> = ss
                    .iter()
                    .map(|s| omega_y(lat, i, centers[alpha] + s - centers[beta]))
                    .collect::<Result<_>>()?;
                let lead = if alpha == beta { i as i32 } else { 0 };
                table[alpha][beta][i] = series_from(&vals, r, 0, lead, top);
            }
            zero_const_at_first(&mut table, beta, i);
        }
    }
    let u1 = -1.0 / (2.0 * lat.omega1);
    let mk_u = |u0: C64| -> Vec<Vec<C64>> {
        (0..=trunc_order)
            .map(|i| vec![match i {
                0 => u0,
                1 => u1,
                _ => ZERO,
            }])
            .collect()
    };
    let abel: Vec<Vec<C64>> = (1..=trunc_order).map(|i| vec![if i == 1 { -u1 } else { ZERO }]).collect();
    let mut it = table.into_iter();
    let p1 = MarkedPoint {
        u: mk_u(a / (2.0 * lat.omega1)),
        omega: it.next().unwrap(),
        abel0: vec![ZERO],
        abel: abel.clone(),
    };
    let p2 = MarkedPoint {
        u: mk_u(ZERO),
        omega: it.next().unwrap(),
        abel0: vec![a / (2.0 * lat.omega1)],
        abel,
    };
    CurveDatum::new(genus1_b(lat)?, vec![p1, p2], vec![z], trunc_order, flows)
}

// ---------------------------------------------------------------------------
// KP

fn one_point_times(cd: &CurveDatum, t: &[f64]) -> Result<Vec<Vec<f64>>> {
    if t.len() > cd.flows {
        return Err(Error::InvalidArgument(format!("at most {} flows", cd.flows)));
    }
    let mut tt = cd.zero_times();
    tt[0][1..=t.len()].copy_from_slice(t);
    Ok(tt)
}

/// `u = -2 d_1^2 ln theta(sum U_i t_i + Z)` for the flows of `P_1`, without
/// the additive constant.
pub fn kp_u(cd: &CurveDatum, t: &[f64]) -> Result<C64> {
    let w = cd.shift(&one_point_times(cd, t)?)?;
    let j = theta_multi(&cd.b, &w, &[cd.points[0].u[1].clone()], &[vec![0], vec![1], vec![2]])?;
    divisor_check(&cd.b, &w, j[0], "theta(W)")?;
    let l1 = j[1] / j[0];
    Ok(-2.0 * (j[2] / j[0] - l1 * l1))
}

// Terms of 3u_yy - (4u_t - 6uu_x + u_xxx)_x at step h: [3u_yy, -4u_xt,
// 6(u_x^2 + u u_xx), -u_xxxx] and 6 u_xx.
fn kp_terms(cd: &CurveDatum, p: [f64; 3], h: f64) -> Result<([C64; 4], C64)> {
    let u = |dx: f64, dy: f64, dt: f64| kp_u(cd, &[p[0] + dx * h, p[1] + dy * h, p[2] + dt * h]);
    let u0 = u(0.0, 0.0, 0.0)?;
    let (xp, xm, xpp, xmm) = (u(1.0, 0.0, 0.0)?, u(-1.0, 0.0, 0.0)?, u(2.0, 0.0, 0.0)?, u(-2.0, 0.0, 0.0)?);
    let (yp, ym) = (u(0.0, 1.0, 0.0)?, u(0.0, -1.0, 0.0)?);
    let cross = u(1.0, 0.0, 1.0)? - u(1.0, 0.0, -1.0)? - u(-1.0, 0.0, 1.0)? + u(-1.0, 0.0, -1.0)?;
    let ux = (xp - xm) / (2.0 * h);
    let uxx = (xp - 2.0 * u0 + xm) / (h * h);
    let uxxxx = (xpp - 4.0 * xp + 6.0 * u0 - 4.0 * xm + xmm) / h.powi(4);
    let uyy = (yp - 2.0 * u0 + ym) / (h * h);
    let uxt = cross / (4.0 * h * h);
    Ok(([3.0 * uyy, -4.0 * uxt, 6.0 * (ux * ux + u0 * uxx), -uxxxx], 6.0 * uxx))
}

/// Step of the finite differences in the KP and Toda residuals.
pub const FD_STEP: f64 = 1e-2;

/// Additive constant in `u = -2 d_1^2 ln theta + const`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KpConstant {
    /// `2 omega_{1,1}`, twice the `k^-1` coefficient of `Omega_1` at `P_1`.
    FromDatum,
    /// Least-squares fit over the grid.
    Fitted,
}

/// KP residual `3u_yy - (4u_t - 6uu_x + u_xxx)_x` with `x = t_1, y = t_2,
/// t = t_3` at grid points `(x, y, t)`, using the constant of the datum.
/// See [`kp_residual_with`].
pub fn kp_residual(cd: &CurveDatum, grid: &[[f64; 3]]) -> Result<GridResidual> {
    kp_residual_with(cd, grid, KpConstant::FromDatum)
}

/// KP residual with central differences at steps `2h, h, h/2` and
/// Richardson extrapolation of the last two. Both the datum constant
/// (`const_datum`) and the least-squares one (`const_fit`) are reported;
/// `const` is the one used. `order` is the median observed order of the
/// ladder.
pub fn kp_residual_with(cd: &CurveDatum, grid: &[[f64; 3]], constant: KpConstant) -> Result<GridResidual> {
    if cd.flows < 3 {
        return Err(Error::InvalidArgument("KP needs the flows t_1, t_2, t_3".into()));
    }
    let h = FD_STEP;
    let ladder: Vec<[([C64; 4], C64); 3]> = grid
        .par_iter()
        .map(|&p| Ok([kp_terms(cd, p, 2.0 * h)?, kp_terms(cd, p, h)?, kp_terms(cd, p, 0.5 * h)?]))
        .collect::<Result<_>>()?;
    let rich = |a: C64, b: C64| (4.0 * b - a) / 3.0;
    let ext: Vec<([C64; 4], C64)> = ladder
        .iter()
        .map(|l| {
            let mut t = [ZERO; 4];
            for (i, ti) in t.iter_mut().enumerate() {
                *ti = rich(l[1].0[i], l[2].0[i]);
            }
            (t, rich(l[1].1, l[2].1))
        })
        .collect();
    let (mut num, mut den) = (ZERO, 0.0);
    for (t, s) in &ext {
        let r0: C64 = t.iter().sum();
        num += s.conj() * r0;
        den += s.norm_sqr();
    }
    let c_fit = if den > 0.0 { -num / den } else { ZERO };
    let c_datum = 2.0 * cd.points[0].omega[0][1].coeff(-1);
    let c = match constant {
        KpConstant::FromDatum => c_datum,
        KpConstant::Fitted => c_fit,
    };
    let vals: Vec<f64> = ext
        .iter()
        .map(|(t, s)| {
            let r: C64 = t.iter().sum::<C64>() + c * s;
            let scale = t[0].norm() + t[1].norm() + (t[2] + c * s).norm() + t[3].norm();
            ratio(r.norm(), scale)
        })
        .collect();
    let mut orders = Vec::new();
    for l in &ladder {
        let r: Vec<C64> = l.iter().map(|(t, s)| t.iter().sum::<C64>() + c * s).collect();
        let (d1, d2) = ((r[0] - r[1]).norm(), (r[1] - r[2]).norm());
        if d1 > 0.0 && d2 > 0.0 {
            orders.push((d1 / d2).log2());
        }
    }
    let mut res = GridResidual::new(format!("kp h={h}"), grid.iter().map(|p| p.to_vec()).collect(), vals);
    res.fitted.push(("const".into(), c));
    res.fitted.push(("const_datum".into(), c_datum));
    res.fitted.push(("const_fit".into(), c_fit));
    res.order = (!orders.is_empty()).then(|| crate::numerics::median(&orders));
    Ok(res)
}

// ---------------------------------------------------------------------------
// 2D Toda

/// Sign layout of the right-hand side of the 2D Toda equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TodaLayout {
    /// `d_xi d_eta phi_n = c (e^{phi_n - phi_{n-1}} - e^{phi_{n+1} - phi_n})`
    Forward,
    /// `d_xi d_eta phi_n = c (e^{phi_{n-1} - phi_n} - e^{phi_n - phi_{n+1}})`
    Backward,
}

fn toda_times(cd: &CurveDatum, n: i64, xi: f64, eta: f64) -> Result<Vec<Vec<f64>>> {
    if cd.points.len() != 2 {
        return Err(Error::InvalidArgument("2D Toda needs two marked points".into()));
    }
    let mut t = cd.zero_times();
    t[0][0] = n as f64;
    t[0][1] = xi;
    t[1][1] = eta;
    Ok(t)
}

// e^{phi_n} = theta(W_{n+1}) / theta(W_n).
fn toda_ratio(cd: &CurveDatum, n: i64, xi: f64, eta: f64) -> Result<C64> {
    let w0 = cd.shift(&toda_times(cd, n, xi, eta)?)?;
    let w1 = add_vec(&w0, &cd.points[0].u[0]);
    let (a, b) = (theta_value(&cd.b, &w1)?, theta_value(&cd.b, &w0)?);
    divisor_check(&cd.b, &w1, a, "theta(W_{n+1})")?;
    divisor_check(&cd.b, &w0, b, "theta(W_n)")?;
    Ok(a / b)
}

/// `phi_n = ln theta((n+1)U + xi U_{1,1} + eta U_{2,1} + Z) / theta(nU + ...)`,
/// principal branch.
pub fn toda_phi(cd: &CurveDatum, n: i64, xi: f64, eta: f64) -> Result<C64> {
    Ok(toda_ratio(cd, n, xi, eta)?.ln())
}

fn toda_cross(cd: &CurveDatum, n: i64, xi: f64, eta: f64, h: f64) -> Result<C64> {
    let r0 = toda_ratio(cd, n, xi, eta)?;
    let d = |a: f64, b: f64| -> Result<C64> { Ok((toda_ratio(cd, n, xi + a * h, eta + b * h)? / r0).ln()) };
    Ok((d(1.0, 1.0)? - d(1.0, -1.0)? - d(-1.0, 1.0)? + d(-1.0, -1.0)?) / (4.0 * h * h))
}

/// Residual of the 2D Toda equation for `phi_n` on grid points
/// `(n, xi, eta)`. The mixed derivative uses a four-point cross stencil
/// with Richardson extrapolation; the overall constant `c` multiplying the
/// exponentials is fitted (reported as `c`).
pub fn toda_residual(cd: &CurveDatum, grid: &[(i64, f64, f64)], layout: TodaLayout) -> Result<GridResidual> {
    let h = FD_STEP;
    let rows: Vec<([C64; 3], [C64; 2])> = grid
        .par_iter()
        .map(|&(n, xi, eta)| {
            let ladder = [toda_cross(cd, n, xi, eta, 2.0 * h)?, toda_cross(cd, n, xi, eta, h)?, toda_cross(cd, n, xi, eta, 0.5 * h)?];
            let (rm, r0, rp) = (toda_ratio(cd, n - 1, xi, eta)?, toda_ratio(cd, n, xi, eta)?, toda_ratio(cd, n + 1, xi, eta)?);
            let e = match layout {
                TodaLayout::Forward => [r0 / rm, rp / r0],
                TodaLayout::Backward => [rm / r0, r0 / rp],
            };
            Ok((ladder, e))
        })
        .collect::<Result<_>>()?;
    let lhs: Vec<C64> = rows.iter().map(|(l, _)| (4.0 * l[2] - l[1]) / 3.0).collect();
    let rhs: Vec<C64> = rows.iter().map(|(_, e)| e[0] - e[1]).collect();
    let num: C64 = rhs.iter().zip(&lhs).map(|(r, l)| r.conj() * l).sum();
    let den: f64 = rhs.iter().map(|r| r.norm_sqr()).sum();
    let c = if den > 0.0 { num / den } else { ZERO };
    let vals: Vec<f64> = rows
        .iter()
        .zip(lhs.iter().zip(&rhs))
        .map(|((_, e), (l, r))| ratio((l - c * r).norm(), l.norm() + c.norm() * (e[0].norm() + e[1].norm())))
        .collect();
    let mut orders = Vec::new();
    for (l, _) in &rows {
        let (d1, d2) = ((l[0] - l[1]).norm(), (l[1] - l[2]).norm());
        if d1 > 0.0 && d2 > 0.0 {
            orders.push((d1 / d2).log2());
        }
    }
    let pts = grid.iter().map(|&(n, a, b)| vec![n as f64, a, b]).collect();
    let mut res = GridResidual::new(format!("toda {layout:?} h={h}"), pts, vals);
    res.fitted.push(("c".into(), c));
    res.order = (!orders.is_empty()).then(|| crate::numerics::median(&orders));
    Ok(res)
}

/// Residuals of the pair `(d_xi - T + u) psi = 0`, `(d_eta - w T^-1) psi = 0`
/// for the two-point function at `p` near `P_1`, with `u = (T - 1) xi_{1,1}`
/// and `w = xi_{2,0}(n) / xi_{2,0}(n - 1)` from the expansions at both
/// marked points.
pub fn toda_pair_residual(cd: &CurveDatum, grid: &[(i64, f64, f64)], k: C64) -> Result<(GridResidual, GridResidual)> {
    let p1 = &cd.points[0];
    let p2 = cd.points.get(1).ok_or_else(|| Error::InvalidArgument("2D Toda needs two marked points".into()))?;
    let a2 = add_vec(&p2.abel0, &cd.z);
    let tz = theta_value(&cd.b, &cd.z)?;
    let ta2 = theta_value(&cd.b, &a2)?;
    divisor_check(&cd.b, &a2, ta2, "theta(A(P_2) + Z)")?;
    let gz = theta_multi(&cd.b, &cd.z, &[p1.abel[0].clone()], &[vec![0], vec![1]])?;
    let xi11 = |n: i64, xi: f64, eta: f64| -> Result<C64> {
        let t = toda_times(cd, n, xi, eta)?;
        let w = cd.shift(&t)?;
        let j = theta_multi(&cd.b, &w, &[p1.abel[0].clone()], &[vec![0], vec![1]])?;
        let mut v = j[1] / j[0] - gz[1] / gz[0];
        for (beta, row) in t.iter().enumerate() {
            for (i, &ti) in row.iter().enumerate() {
                if ti != 0.0 && cd.used(beta, i) {
                    v += ti * p1.omega[beta][i].coeff(-1);
                }
            }
        }
        Ok(v)
    };
    let xi20 = |n: i64, xi: f64, eta: f64| -> Result<C64> {
        let t = toda_times(cd, n, xi, eta)?;
        let w = cd.shift(&t)?;
        let mut e = ZERO;
        for (beta, row) in t.iter().enumerate() {
            for (i, &ti) in row.iter().enumerate() {
                if ti != 0.0 && cd.used(beta, i) {
                    e += ti * p2.omega[beta][i].coeff(0);
                }
            }
        }
        let tw = theta_value(&cd.b, &w)?;
        divisor_check(&cd.b, &w, tw, "theta(W_n)")?;
        Ok(e.exp() * theta_value(&cd.b, &add_vec(&p2.abel0, &w))? * tz / (tw * ta2))
    };
    let rows: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&(n, xi, eta)| {
            let (psi, d1, _) = ba_log_jet(cd, &toda_times(cd, n, xi, eta)?, 0, k, &[(0, 1), (1, 1)])?;
            let psi_p = ba_eval(cd, &toda_times(cd, n + 1, xi, eta)?, 0, k)?;
            let psi_m = ba_eval(cd, &toda_times(cd, n - 1, xi, eta)?, 0, k)?;
            let u = xi11(n + 1, xi, eta)? - xi11(n, xi, eta)?;
            let w = xi20(n, xi, eta)? / xi20(n - 1, xi, eta)?;
            let (dx, de) = (psi * d1[0], psi * d1[1]);
            let r1 = ratio((dx - psi_p + u * psi).norm(), dx.norm() + psi_p.norm() + (u * psi).norm());
            let r2 = ratio((de - w * psi_m).norm(), de.norm() + (w * psi_m).norm());
            Ok((r1, r2))
        })
        .collect::<Result<_>>()?;
    let pts: Vec<Vec<f64>> = grid.iter().map(|&(n, a, b)| vec![n as f64, a, b]).collect();
    Ok((
        GridResidual::new(format!("toda-pair-xi k={k}"), pts.clone(), rows.iter().map(|r| r.0).collect()),
        GridResidual::new(format!("toda-pair-eta k={k}"), pts, rows.iter().map(|r| r.1).collect()),
    ))
}

// ---------------------------------------------------------------------------
// Linear problems on sampled fields

/// A pair `(tau, psi)` sampled with the jets `[f, f_x, f_xx, f_t]`. For
/// the difference problem `t` is the integer `n`.
pub trait WaveField: Sync {
    fn tau_jet(&self, x: C64, t: C64) -> Result<[C64; 4]>;
    fn psi_jet(&self, x: C64, t: C64) -> Result<[C64; 4]>;
}

/// `tau = theta(Ux + Vt + Z)` and
/// `psi = theta(A + Ux + Vt + Z) / theta(Ux + Vt + Z) e^{px + Et}`.
#[derive(Debug, Clone)]
pub struct ThetaField {
    pub datum: SecantDatum,
    pub z: Vec<C64>,
}

impl ThetaField {
    fn jets(&self, x: C64, t: C64, extra: Option<&[C64]>) -> Result<[C64; 4]> {
        let d = &self.datum;
        let mut pt: Vec<C64> = (0..d.b.genus()).map(|i| self.z[i] + d.u[i] * x + d.v[i] * t).collect();
        if let Some(a) = extra {
            pt = add_vec(&pt, a);
        }
        let j = theta_multi(&d.b, &pt, &[d.u.clone(), d.v.clone()], &[vec![0, 0], vec![1, 0], vec![2, 0], vec![0, 1]])?;
        Ok([j[0], j[1], j[2], j[3]])
    }
}

impl WaveField for ThetaField {
    fn tau_jet(&self, x: C64, t: C64) -> Result<[C64; 4]> {
        self.jets(x, t, None)
    }

    fn psi_jet(&self, x: C64, t: C64) -> Result<[C64; 4]> {
        let d = &self.datum;
        let den = self.jets(x, t, None)?;
        let pt: Vec<C64> = (0..d.b.genus()).map(|i| self.z[i] + d.u[i] * x + d.v[i] * t).collect();
        divisor_check(&d.b, &pt, den[0], "tau")?;
        let num = self.jets(x, t, Some(&d.a))?;
        let (n1, n2, nt) = (num[1] / num[0], num[2] / num[0], num[3] / num[0]);
        let (m1, m2, mt) = (den[1] / den[0], den[2] / den[0], den[3] / den[0]);
        let lx = n1 - m1 + d.p;
        let lxx = n2 - n1 * n1 - m2 + m1 * m1;
        let lt = nt - mt + d.e;
        let psi = num[0] / den[0] * (d.p * x + d.e * t).exp();
        Ok([psi, psi * lx, psi * (lxx + lx * lx), psi * lt])
    }
}

/// `tau = 1`, `psi = e^{kx + k^2 t}`.
#[derive(Debug, Clone, Copy)]
pub struct FlatField {
    pub k: C64,
}

impl WaveField for FlatField {
    fn tau_jet(&self, _x: C64, _t: C64) -> Result<[C64; 4]> {
        Ok([ONE, ZERO, ZERO, ZERO])
    }

    fn psi_jet(&self, x: C64, t: C64) -> Result<[C64; 4]> {
        let k = self.k;
        let psi = (k * x + k * k * t).exp();
        Ok([psi, k * psi, k * k * psi, k * k * psi])
    }
}

fn complex_points<T: Copy + Into<C64>>(grid: &[(C64, T)]) -> Vec<Vec<f64>> {
    grid.iter()
        .map(|&(x, t)| {
            let t: C64 = t.into();
            vec![x.re, x.im, t.re, t.im]
        })
        .collect()
}

fn tau_guard(f: &[C64; 4], what: &str) -> Result<()> {
    if !(f[0].norm() > 1e-8 * f[1].norm()) {
        return Err(Error::DivisorHit(format!("{what}: |tau| = {:e}", f[0].norm())));
    }
    Ok(())
}

/// `(d_t - d_x^2 + u) psi` with `u = -2 d_x^2 ln tau`, normalized by
/// `|psi_t| + |psi_xx| + |u psi|`.
pub fn linear_residual_kp<F: WaveField>(f: &F, grid: &[(C64, C64)]) -> Result<GridResidual> {
    let vals: Vec<f64> = grid
        .par_iter()
        .map(|&(x, t)| {
            let tau = f.tau_jet(x, t)?;
            tau_guard(&tau, "tau(x)")?;
            let psi = f.psi_jet(x, t)?;
            let l1 = tau[1] / tau[0];
            let u = -2.0 * (tau[2] / tau[0] - l1 * l1);
            let r = psi[3] - psi[2] + u * psi[0];
            Ok(ratio(r.norm(), psi[3].norm() + psi[2].norm() + (u * psi[0]).norm()))
        })
        .collect::<Result<_>>()?;
    Ok(GridResidual::new("linear-kp (x, t)", complex_points(grid), vals))
}

/// `d_t psi(x) - psi(x+1) - w psi(x)` with `w = d_t ln(tau(x+1)/tau(x))`.
pub fn linear_residual_toda<F: WaveField>(f: &F, grid: &[(C64, C64)]) -> Result<GridResidual> {
    let vals: Vec<f64> = grid
        .par_iter()
        .map(|&(x, t)| {
            let (t0, t1) = (f.tau_jet(x, t)?, f.tau_jet(x + 1.0, t)?);
            tau_guard(&t0, "tau(x)")?;
            tau_guard(&t1, "tau(x+1)")?;
            let w = t1[3] / t1[0] - t0[3] / t0[0];
            let (p0, p1) = (f.psi_jet(x, t)?, f.psi_jet(x + 1.0, t)?);
            let r = p0[3] - p1[0] - w * p0[0];
            Ok(ratio(r.norm(), p0[3].norm() + p1[0].norm() + (w * p0[0]).norm()))
        })
        .collect::<Result<_>>()?;
    Ok(GridResidual::new("linear-toda (x, t)", complex_points(grid), vals))
}

fn n_c(n: i64) -> C64 {
    C64::new(n as f64, 0.0)
}

/// `psi_{n+1}(x) - psi_n(x+1) + v_n(x) psi_n(x)` with
/// `v_n = tau_n(x) tau_{n+1}(x+1) / (tau_n(x+1) tau_{n+1}(x))`.
pub fn linear_residual_bdhe<F: WaveField>(f: &F, grid: &[(C64, i64)]) -> Result<GridResidual> {
    let vals: Vec<f64> = grid
        .par_iter()
        .map(|&(x, n)| {
            let tau = |dx: f64, dn: i64| -> Result<C64> {
                let j = f.tau_jet(x + dx, n_c(n + dn))?;
                tau_guard(&j, "tau")?;
                Ok(j[0])
            };
            let v = tau(0.0, 0)? * tau(1.0, 1)? / (tau(1.0, 0)? * tau(0.0, 1)?);
            let a = f.psi_jet(x, n_c(n + 1))?[0];
            let b = f.psi_jet(x + 1.0, n_c(n))?[0];
            let c = f.psi_jet(x, n_c(n))?[0];
            Ok(ratio((a - b + v * c).norm(), a.norm() + b.norm() + (v * c).norm()))
        })
        .collect::<Result<_>>()?;
    let pts = grid.iter().map(|&(x, n)| vec![x.re, x.im, n as f64]).collect();
    Ok(GridResidual::new("linear-bdhe (x, n)", pts, vals))
}

// ---------------------------------------------------------------------------
// Discrete equations

/// `tau_n(l, m)` on an integer box, indexed `values[n][l][m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    pub values: Vec<Vec<Vec<C64>>>,
}

impl TauGrid {
    pub fn constant(n: usize, l: usize, m: usize, v: C64) -> Self {
        Self {
            values: vec![vec![vec![v; m]; l]; n],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let n = self.values.len();
        let l = self.values.first().map_or(0, |a| a.len());
        let m = self.values.first().and_then(|a| a.first()).map_or(0, |a| a.len());
        (n, l, m)
    }
}

/// `tau_n(l+1,m) tau_n(l,m+1) - tau_n(l,m) tau_n(l+1,m+1) + tau_{n+1}(l+1,m)
/// tau_{n-1}(l,m+1)` over all interior stencils, normalized by the largest
/// of the three products.
pub fn bdhe_tau_residual(tau: &TauGrid) -> GridResidual {
    let (nn, ll, mm) = tau.dims();
    let v = &tau.values;
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for n in 1..nn.saturating_sub(1) {
        for l in 0..ll.saturating_sub(1) {
            for m in 0..mm.saturating_sub(1) {
                let t1 = v[n][l + 1][m] * v[n][l][m + 1];
                let t2 = v[n][l][m] * v[n][l + 1][m + 1];
                let t3 = v[n + 1][l + 1][m] * v[n - 1][l][m + 1];
                let scale = t1.norm().max(t2.norm()).max(t3.norm());
                pts.push(vec![n as f64, l as f64, m as f64]);
                vals.push(ratio((t1 - t2 + t3).norm(), scale));
            }
        }
    }
    GridResidual::new(format!("bdhe {nn}x{ll}x{mm}"), pts, vals)
}

/// Gauge-fixed theta grid solving the discrete Hirota equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdheThetaGrid {
    pub grid: TauGrid,
    /// `(alpha, beta, gamma)` with `alpha T1 + beta T2 + gamma T3 = 0`.
    pub coeffs: [C64; 3],
    /// Smallest over largest singular value of the sampled relation.
    pub fit_ratio: f64,
}

/// `tau_n(l, m) = theta(Z + lU + mV + nW) rho^{lm} mu^{nl}` with
/// `rho = -beta/alpha`, `mu = gamma/alpha`, where the three products
/// `T1 = f(z+U) f(z+V)`, `T2 = f(z) f(z+U+V)`, `T3 = f(z+U+W) f(z+V-W)`
/// satisfy `alpha T1 + beta T2 + gamma T3 = 0`. The relation is fitted on
/// sample points away from `Z` and holds identically in genus one.
#[allow(clippy::too_many_arguments)]
pub fn bdhe_theta_grid(b: &PeriodMatrix, u: &[C64], v: &[C64], w: &[C64], z: &[C64], dims: (usize, usize, usize), n0: i64) -> Result<BdheThetaGrid> {
    let g = b.genus();
    if [u, v, w, z].iter().any(|x| x.len() != g) {
        return Err(Error::InvalidArgument(format!("vectors must have length {g}")));
    }
    let f = |s: &[C64]| theta_value(b, s);
    let mut rows = Vec::new();
    for j in 0..12 {
        let off: Vec<C64> = (0..g)
            .map(|i| C64::new(0.37 * j as f64 + 0.11 * i as f64, 0.05 * ((j * 7 + i * 3) % 5) as f64 - 0.1))
            .collect();
        let zz = add_vec(z, &off);
        let zu = add_vec(&zz, u);
        let zv = add_vec(&zz, v);
        let t1 = f(&zu)? * f(&zv)?;
        let t2 = f(&zz)? * f(&add_vec(&zu, v))?;
        let vw: Vec<C64> = v.iter().zip(w).map(|(a, b)| a - b).collect();
        let t3 = f(&add_vec(&zu, w))? * f(&add_vec(&zz, &vw))?;
        let s = t1.norm().max(t2.norm()).max(t3.norm());
        rows.push([t1 / s, t2 / s, t3 / s]);
    }
    let m = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let svd = m.svd(false, true);
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let sv = &svd.singular_values;
    let (imin, _) = sv.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let null: Vec<C64> = (0..3).map(|j| vt[(imin, j)].conj()).collect();
    if null[0].norm() < 1e-12 {
        return Err(Error::FitDegenerate("coefficient of T1 vanishes".into()));
    }
    let rho = -null[1] / null[0];
    let mu = null[2] / null[0];
    let (nn, ll, mm) = dims;
    let values = (0..nn)
        .map(|ni| {
            let n = n0 + ni as i64;
            (0..ll)
                .map(|l| {
                    (0..mm)
                        .map(|mi| {
                            let pt: Vec<C64> = (0..g).map(|i| z[i] + l as f64 * u[i] + mi as f64 * v[i] + n as f64 * w[i]).collect();
                            Ok(f(&pt)? * rho.powi((l * mi) as i32) * mu.powi((n * l as i64) as i32))
                        })
                        .collect::<Result<Vec<C64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BdheThetaGrid {
        grid: TauGrid { values },
        coeffs: [null[0], null[1], null[2]],
        fit_ratio: sv[imin] / smax,
    })
}

fn aligned(a: &[Vec<C64>], b: &[Vec<C64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
}

/// `psi_{n+1,m+1} - u_{n,m} (psi_{n+1,m} - psi_{n,m+1}) - psi_{n,m}`,
/// grids indexed `[n][m]`.
pub fn discrete_schrodinger_residual(psi: &[Vec<C64>], u: &[Vec<C64>]) -> Result<GridResidual> {
    if !aligned(psi, u) {
        return Err(Error::InvalidArgument("psi and u grids must be aligned".into()));
    }
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for n in 0..psi.len().saturating_sub(1) {
        for m in 0..psi[n].len().saturating_sub(1) {
            let d = psi[n + 1][m] - psi[n][m + 1];
            let r = psi[n + 1][m + 1] - u[n][m] * d - psi[n][m];
            pts.push(vec![n as f64, m as f64]);
            vals.push(ratio(r.norm(), psi[n + 1][m + 1].norm() + (u[n][m] * d).norm() + psi[n][m].norm()));
        }
    }
    Ok(GridResidual::new("discrete-schrodinger (n, m)", pts, vals))
}

/// `psi_{m,n+1} - psi_{m+1,n} - u_{m,n} psi_{m,n}`, grids indexed `[m][n]`.
pub fn laxdd_residual(psi: &[Vec<C64>], u: &[Vec<C64>]) -> Result<GridResidual> {
    if !aligned(psi, u) {
        return Err(Error::InvalidArgument("psi and u grids must be aligned".into()));
    }
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for m in 0..psi.len().saturating_sub(1) {
        for n in 0..psi[m].len().saturating_sub(1) {
            let (a, b, c) = (psi[m][n + 1], psi[m + 1][n], u[m][n] * psi[m][n]);
            pts.push(vec![m as f64, n as f64]);
            vals.push(ratio((a - b - c).norm(), a.norm() + b.norm() + c.norm()));
        }
    }
    Ok(GridResidual::new("laxdd (m, n)", pts, vals))
}

/// `u_{m,n} = tau_{m+1,n+1} tau_{m,n} / (tau_{m,n+1} tau_{m+1,n})` on the
/// interior of a `[m][n]` grid.
pub fn uformula(tau: &[Vec<C64>]) -> Vec<Vec<C64>> {
    (0..tau.len().saturating_sub(1))
        .map(|m| {
            (0..tau[m].len().saturating_sub(1))
                .map(|n| tau[m + 1][n + 1] * tau[m][n] / (tau[m][n + 1] * tau[m + 1][n]))
                .collect()
        })
        .collect()
}
