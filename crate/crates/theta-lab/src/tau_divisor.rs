//! Zeros of `tau(x, t) = theta(U x + V t + Z | B)` in a window of the
//! x-plane, the Laurent data of `u = -2 d_x^2 ln tau` at a simple zero and
//! the pole-dynamics residual `q'' - 2 w`.
//!
//! Zeros are located by the argument principle on a quadtree of rectangles
//! and polished by Newton. Every cell is handled independently so the
//! search runs in parallel and the merged list is sorted spatially.

use crate::error::{Error, Result};
use crate::numerics::C64;
use crate::siegel_theta::{theta_series_derivs, PeriodMatrix, TruncationPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Axis-aligned rectangle `[lo.re, hi.re] x [lo.im, hi.im]` in the x-plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: C64,
    pub hi: C64,
}

impl Window {
    pub fn new(lo: C64, hi: C64) -> Result<Self> {
        if !(hi.re > lo.re && hi.im > lo.im) {
            return Err(Error::InvalidArgument(format!("empty window {lo} .. {hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn centered(center: C64, half_width: f64, half_height: f64) -> Result<Self> {
        Self::new(
            center - C64::new(half_width, half_height),
            center + C64::new(half_width, half_height),
        )
    }

    pub fn contains(&self, x: C64) -> bool {
        x.re >= self.lo.re && x.re <= self.hi.re && x.im >= self.lo.im && x.im <= self.hi.im
    }

    pub fn size(&self) -> f64 {
        (self.hi.re - self.lo.re).max(self.hi.im - self.lo.im)
    }

    pub fn center(&self) -> C64 {
        (self.lo + self.hi) * 0.5
    }

    /// Corners in counterclockwise order starting at `lo`.
    pub fn corners(&self) -> [C64; 4] {
        [
            self.lo,
            C64::new(self.hi.re, self.lo.im),
            self.hi,
            C64::new(self.lo.re, self.hi.im),
        ]
    }

    fn grown(&self, by: f64) -> Window {
        Window {
            lo: self.lo - C64::new(by, by),
            hi: self.hi + C64::new(by, by),
        }
    }
}

/// The line `x -> U x + V t + Z` in `C^g` together with a search window.
#[derive(Debug, Clone, PartialEq)]
pub struct TauLine {
    pub b: PeriodMatrix,
    pub u: Vec<C64>,
    pub v: Vec<C64>,
    pub z: Vec<C64>,
    pub window: Window,
    pub t_range: [f64; 2],
    pub pol: TruncationPolicy,
}

impl TauLine {
    pub fn new(b: PeriodMatrix, u: Vec<C64>, v: Vec<C64>, z: Vec<C64>, window: Window, t_range: [f64; 2]) -> Result<Self> {
        let g = b.genus();
        if u.len() != g || v.len() != g || z.len() != g {
            return Err(Error::InvalidArgument(format!("U, V, Z must have length {g}")));
        }
        if u.iter().all(|x| x.norm() == 0.0) {
            return Err(Error::InvalidArgument("U must be non-zero".into()));
        }
        if !(t_range[0] <= t_range[1]) {
            return Err(Error::InvalidArgument("t_range must be ordered".into()));
        }
        let line = Self {
            b,
            u,
            v,
            z,
            window,
            t_range,
            pol: TruncationPolicy::default(),
        };
        let mut m: f64 = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let x = window.lo
                    + C64::new(
                        (window.hi.re - window.lo.re) * (0.1 + 0.2 * i as f64),
                        (window.hi.im - window.lo.im) * (0.1 + 0.2 * j as f64),
                    );
                m = m.max(tau_eval(&line, x, t_range[0])?.norm());
            }
        }
        if !(m > 0.0) {
            return Err(Error::InvalidArgument("tau vanishes on the window samples".into()));
        }
        Ok(line)
    }

    pub fn with_policy(mut self, pol: TruncationPolicy) -> Self {
        self.pol = pol;
        self
    }

    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    pub fn genus(&self) -> usize {
        self.b.genus()
    }

    /// The point `U x + V t + Z`.
    pub fn point(&self, x: C64, t: f64) -> Vec<C64> {
        (0..self.genus()).map(|i| self.u[i] * x + self.v[i] * t + self.z[i]).collect()
    }

    /// `d_x^i d_t^j tau` for each `(i, j)` in `orders`.
    pub fn derivs(&self, x: C64, t: f64, orders: &[[usize; 2]]) -> Result<Vec<C64>> {
        let multis: Vec<Vec<usize>> = orders.iter().map(|o| o.to_vec()).collect();
        theta_series_derivs(
            &self.point(x, t),
            &self.b,
            &vec![0.0; self.genus()],
            &[self.u.clone(), self.v.clone()],
            &multis,
            &self.pol,
        )
    }

    fn f_fx(&self, x: C64, t: f64) -> Result<(C64, C64)> {
        let d = self.derivs(x, t, &[[0, 0], [1, 0]])?;
        Ok((d[0], d[1]))
    }
}

/// `theta(U x + V t + Z | B)`.
pub fn tau_eval(line: &TauLine, x: C64, t: f64) -> Result<C64> {
    Ok(line.derivs(x, t, &[[0, 0]])?[0])
}

/// A zero of `tau(., t)` in the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisorZero {
    pub q: C64,
    pub t: f64,
    pub dq_dt: C64,
    pub d2q_dt2: C64,
    pub simple: bool,
    pub multiplicity: u32,
    pub dtau_abs: f64,
    pub tau_abs: f64,
}

/// Parameters of the quadtree search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroSearch {
    /// Cells are not split below this fraction of the window size.
    pub min_cell_frac: f64,
    /// Newton stops at `|tau| <= newton_tol * scale`.
    pub newton_tol: f64,
    /// A zero is simple when `|d_x tau| > simple_rel * max |tau|` on the window.
    pub simple_rel: f64,
    /// Seed for the jitter of the split lines.
    pub seed: u64,
}

impl Default for ZeroSearch {
    fn default() -> Self {
        Self {
            min_cell_frac: 1e-2,
            newton_tol: 1e-12,
            simple_rel: 1e-6,
            seed: 0,
        }
    }
}

// Argument change of tau along [a, b], refined until both halves agree
// with the whole, each turns by less than pi/4 and the log-derivative
// bounds the turn at the three sample points. Values are (tau, tau_x).
// Returns (dArg, max|tau|).
#[allow(clippy::too_many_arguments)]
fn segment_arg(
    line: &TauLine,
    t: f64,
    a: C64,
    b: C64,
    fa: (C64, C64),
    fb: (C64, C64),
    min_len: f64,
    depth: u32,
) -> Result<(f64, f64)> {
    let m = (a + b) * 0.5;
    let fm = line.f_fx(m, t)?;
    if fm.0.norm() == 0.0 || !fm.0.re.is_finite() {
        return Err(Error::BoundaryZero(format!("tau vanishes at {m}")));
    }
    let h = (b - a).norm();
    let whole = (fb.0 / fa.0).arg();
    let d1 = (fm.0 / fa.0).arg();
    let d2 = (fb.0 / fm.0).arg();
    let mx = fa.0.norm().max(fb.0.norm()).max(fm.0.norm());
    let slope = [fa, fm, fb].iter().map(|f| (f.1 / f.0).norm()).fold(0.0, f64::max);
    if slope * h < 0.5 && d1.abs() < PI / 4.0 && d2.abs() < PI / 4.0 && (d1 + d2 - whole).abs() < 1e-9 {
        return Ok((d1 + d2, mx));
    }
    if h < min_len || depth > 60 {
        return Err(Error::BoundaryZero(format!("zero on or near the segment {a} .. {b}")));
    }
    let (x, m1) = segment_arg(line, t, a, m, fa, fm, min_len, depth + 1)?;
    let (y, m2) = segment_arg(line, t, m, b, fm, fb, min_len, depth + 1)?;
    Ok((x + y, m1.max(m2)))
}

fn polygon_winding(line: &TauLine, t: f64, pts: &[C64], min_len: f64) -> Result<(i64, f64)> {
    let vals: Vec<(C64, C64)> = pts.iter().map(|&p| line.f_fx(p, t)).collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut mx: f64 = 0.0;
    for k in 0..pts.len() {
        let k1 = (k + 1) % pts.len();
        if vals[k].0.norm() == 0.0 {
            return Err(Error::BoundaryZero(format!("tau vanishes at {}", pts[k])));
        }
        let (d, m) = segment_arg(line, t, pts[k], pts[k1], vals[k], vals[k1], min_len, 0)?;
        total += d;
        mx = mx.max(m);
    }
    let w = total / (2.0 * PI);
    let n = w.round();
    if (w - n).abs() > 0.1 {
        return Err(Error::BoundaryZero(format!("winding {w} is not close to an integer")));
    }
    Ok((n as i64, mx))
}

fn rect_points(w: &Window, per_edge: usize) -> Vec<C64> {
    let c = w.corners();
    let mut out = Vec::with_capacity(4 * per_edge);
    for k in 0..4 {
        let (a, b) = (c[k], c[(k + 1) % 4]);
        for j in 0..per_edge {
            out.push(a + (b - a) * (j as f64 / per_edge as f64));
        }
    }
    out
}

/// Number of zeros of `tau(., t)` inside `w` (winding number of the boundary)
/// and the maximum of `|tau|` over the boundary samples.
pub fn winding_number(line: &TauLine, w: &Window, t: f64) -> Result<(i64, f64)> {
    polygon_winding(line, t, &rect_points(w, 8), 1e-10 * w.size())
}

/// Number of zeros inside the circle `|x - c| = r`.
pub fn circle_winding(line: &TauLine, c: C64, r: f64, t: f64) -> Result<i64> {
    let n = 32;
    let pts: Vec<C64> = (0..n)
        .map(|k| c + C64::from_polar(r, 2.0 * PI * k as f64 / n as f64))
        .collect();
    Ok(polygon_winding(line, t, &pts, 1e-10 * r)?.0)
}

// Newton for x - tau / tau_x confined to the disc |x - x0| <= reach.
// Returns the final point if it converged.
fn newton(line: &TauLine, x0: C64, t: f64, reach: f64, max_iter: usize) -> Result<Option<C64>> {
    let mut x = x0;
    for _ in 0..max_iter {
        let (f, fx) = line.f_fx(x, t)?;
        if f.norm() == 0.0 {
            return Ok(Some(x));
        }
        if fx.norm() == 0.0 || !fx.re.is_finite() {
            return Ok(None);
        }
        let dx = f / fx;
        x -= dx;
        if !x.re.is_finite() || !x.im.is_finite() || (x - x0).norm() > reach {
            return Ok(None);
        }
        if dx.norm() <= 4.0 * f64::EPSILON * (1.0 + x.norm()) {
            return Ok(Some(x));
        }
    }
    // Accept a point that stalls at round-off level.
    let (f, fx) = line.f_fx(x, t)?;
    if fx.norm() > 0.0 && (f / fx).norm() <= 1e-13 * (1.0 + x.norm()) {
        return Ok(Some(x));
    }
    Ok(None)
}

fn cluster_center(line: &TauLine, x0: C64, t: f64, m: usize, reach: f64) -> Result<Option<C64>> {
    let mut x = x0;
    for _ in 0..60 {
        let d = line.derivs(x, t, &[[m - 1, 0], [m, 0]])?;
        if d[1].norm() == 0.0 {
            return Ok(None);
        }
        let dx = d[0] / d[1];
        x -= dx;
        if !x.re.is_finite() || (x - x0).norm() > reach {
            return Ok(None);
        }
        if dx.norm() <= 4.0 * f64::EPSILON * (1.0 + x.norm()) {
            break;
        }
    }
    Ok(Some(x))
}

/// `(q', q'')` of a zero path from implicit differentiation of
/// `tau(q(t), t) = 0`, together with `d_x tau` at the zero.
pub fn implicit_derivatives(line: &TauLine, q: C64, t: f64) -> Result<(C64, C64, C64)> {
    let d = line.derivs(q, t, &[[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]])?;
    let (fx, ft, fxx, fxt, ftt) = (d[0], d[1], d[2], d[3], d[4]);
    let qd = -ft / fx;
    let qdd = -(fxx * qd * qd + 2.0 * fxt * qd + ftt) / fx;
    Ok((qd, qdd, fx))
}

fn make_zero(line: &TauLine, q: C64, t: f64, mult: u32, window_scale: f64, opts: &ZeroSearch) -> Result<DivisorZero> {
    let (f, fx) = line.f_fx(q, t)?;
    let simple = mult == 1 && fx.norm() > opts.simple_rel * window_scale;
    let (dq, ddq) = if simple {
        let (a, b, _) = implicit_derivatives(line, q, t)?;
        (a, b)
    } else {
        (C64::new(f64::NAN, f64::NAN), C64::new(f64::NAN, f64::NAN))
    };
    Ok(DivisorZero {
        q,
        t,
        dq_dt: dq,
        d2q_dt2: ddq,
        simple,
        multiplicity: mult,
        dtau_abs: fx.norm(),
        tau_abs: f.norm(),
    })
}

struct SearchCtx<'a> {
    line: &'a TauLine,
    t: f64,
    opts: &'a ZeroSearch,
    root_size: f64,
    window_scale: f64,
}

fn split_fracs(seed: u64, path: u64, attempt: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ path.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (attempt << 56));
    let spread = 0.1 + 0.1 * attempt as f64;
    (
        0.5 + spread * (rng.random::<f64>() - 0.5),
        0.5 + spread * (rng.random::<f64>() - 0.5),
    )
}

fn search(ctx: &SearchCtx, w: Window, count: i64, scale: f64, path: u64, depth: u32) -> Result<Vec<DivisorZero>> {
    if count <= 0 {
        return Ok(Vec::new());
    }
    let line = ctx.line;
    let margin = 1e-9 * ctx.root_size;
    if count == 1 {
        if let Some(q) = newton(line, w.center(), ctx.t, w.size(), 60)? {
            let (f, _) = line.f_fx(q, ctx.t)?;
            if w.grown(margin).contains(q) && f.norm() <= ctx.opts.newton_tol * scale.max(f64::MIN_POSITIVE) {
                return Ok(vec![make_zero(line, q, ctx.t, 1, ctx.window_scale, ctx.opts)?]);
            }
        }
    }
    if w.size() <= ctx.opts.min_cell_frac * ctx.root_size || depth > 40 {
        // A cluster that does not separate at the finest scale: Newton on
        // the derivative of order count - 1.
        let x = cluster_center(line, w.center(), ctx.t, count as usize, w.size())?.unwrap_or(w.center());
        return Ok(vec![make_zero(line, x, ctx.t, count as u32, ctx.window_scale, ctx.opts)?]);
    }
    let mut last_err = None;
    for attempt in 0..8u64 {
        let (fx, fy) = split_fracs(ctx.opts.seed, path, attempt);
        let mx = w.lo.re + fx * (w.hi.re - w.lo.re);
        let my = w.lo.im + fy * (w.hi.im - w.lo.im);
        let kids = [
            Window { lo: w.lo, hi: C64::new(mx, my) },
            Window { lo: C64::new(mx, w.lo.im), hi: C64::new(w.hi.re, my) },
            Window { lo: C64::new(w.lo.re, my), hi: C64::new(mx, w.hi.im) },
            Window { lo: C64::new(mx, my), hi: w.hi },
        ];
        let counts: Vec<Result<(i64, f64)>> = kids.par_iter().map(|k| winding_number(line, k, ctx.t)).collect();
        if let Some(Err(e)) = counts.iter().find(|r| r.is_err()) {
            last_err = Some(e.clone());
            continue;
        }
        let counts: Vec<(i64, f64)> = counts.into_iter().map(|r| r.unwrap()).collect();
        if counts.iter().map(|c| c.0).sum::<i64>() != count {
            last_err = Some(Error::BoundaryZero(format!("child windings do not add up in {w:?}")));
            continue;
        }
        let found: Vec<Result<Vec<DivisorZero>>> = kids
            .par_iter()
            .zip(counts.par_iter())
            .enumerate()
            .map(|(k, (kw, &(n, s)))| search(ctx, *kw, n, s, path * 4 + k as u64 + 1, depth + 1))
            .collect();
        let mut out = Vec::new();
        for f in found {
            out.extend(f?);
        }
        return Ok(out);
    }
    Err(last_err.unwrap_or_else(|| Error::BoundaryZero("cell split failed".into())))
}

/// All zeros of `tau(., t)` in the line's window.
pub fn find_zeros(line: &TauLine, t: f64) -> Result<Vec<DivisorZero>> {
    find_zeros_with(line, t, &ZeroSearch::default())
}

pub fn find_zeros_with(line: &TauLine, t: f64, opts: &ZeroSearch) -> Result<Vec<DivisorZero>> {
    let w = line.window;
    let (count, scale) = winding_number(line, &w, t)?;
    if count < 0 {
        return Err(Error::BoundaryZero(format!("negative winding {count}")));
    }
    let ctx = SearchCtx {
        line,
        t,
        opts,
        root_size: w.size(),
        window_scale: scale,
    };
    let mut zs = search(&ctx, w, count, scale, 0, 0)?;
    zs.sort_by(|a, b| a.q.re.total_cmp(&b.q.re).then(a.q.im.total_cmp(&b.q.im)));
    Ok(zs)
}

/// CSV lines `t,re_q,im_q,simple,abs_dtau` with a header.
pub fn zeros_to_csv(zs: &[DivisorZero]) -> String {
    let mut s = String::from("t,re_q,im_q,simple,abs_dtau\n");
    for z in zs {
        s.push_str(&format!("{},{},{},{},{}\n", z.t, z.q.re, z.q.im, z.simple as u8, z.dtau_abs));
    }
    s
}

/// Laurent data of `u = 2/(x-q)^2 + v + w (x-q) + ...` at a simple zero.
/// The jet route fills `v, w`; the contour route fills `v_contour, w_contour`.
/// The slots `alpha .. delta` hold the expansion of a solution `psi` when one
/// is attached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaurentData {
    pub q: C64,
    pub v: C64,
    pub w: C64,
    pub v_contour: C64,
    pub w_contour: C64,
    pub radius: f64,
    pub alpha: Option<C64>,
    pub beta: Option<C64>,
    pub gamma: Option<C64>,
    pub delta: Option<C64>,
}

/// `(v, w)` from the fourth-order x-jet of tau at `q`.
pub fn laurent_jet(line: &TauLine, q: C64, t: f64) -> Result<(C64, C64)> {
    let d = line.derivs(q, t, &[[1, 0], [2, 0], [3, 0], [4, 0]])?;
    let a1 = d[0];
    if a1.norm() == 0.0 {
        return Err(Error::NonSimpleZero(format!("d_x tau vanishes at {q}")));
    }
    let b1 = d[1] / 2.0 / a1;
    let b2 = d[2] / 6.0 / a1;
    let b3 = d[3] / 24.0 / a1;
    let c2 = b2 - b1 * b1 / 2.0;
    let c3 = b3 - b1 * b2 + b1 * b1 * b1 / 3.0;
    Ok((-4.0 * c2, -12.0 * c3))
}

/// `u = -2 (tau tau'' - tau'^2) / tau^2` at `x`.
pub fn u_at(line: &TauLine, x: C64, t: f64) -> Result<C64> {
    let d = line.derivs(x, t, &[[0, 0], [1, 0], [2, 0]])?;
    if d[0].norm() == 0.0 {
        return Err(Error::DivisorHit(format!("tau vanishes at {x}")));
    }
    let l1 = d[1] / d[0];
    Ok(-2.0 * (d[2] / d[0] - l1 * l1))
}

/// Trapezoid-rule Laurent coefficients `(v, w)` of `u` on `|x - q| = r`.
pub fn laurent_contour(line: &TauLine, q: C64, t: f64, r: f64, n: usize) -> Result<(C64, C64)> {
    let mut v = C64::new(0.0, 0.0);
    let mut w = C64::new(0.0, 0.0);
    for k in 0..n {
        let s = C64::from_polar(r, 2.0 * PI * k as f64 / n as f64);
        let u = u_at(line, q + s, t)?;
        v += u;
        w += u / s;
    }
    Ok((v / n as f64, w / n as f64))
}

/// Radius for the contour route: the circle of twice the radius encloses
/// only the zero at `q`.
pub fn isolation_radius(line: &TauLine, q: C64, t: f64) -> Result<f64> {
    let d = line.derivs(q, t, &[[1, 0], [2, 0]])?;
    let mut r = (0.5 * (d[0] / d[1]).norm()).min(0.05 * line.window.size()).min(0.25);
    if !r.is_finite() || r <= 0.0 {
        r = 0.05 * line.window.size();
    }
    for _ in 0..20 {
        if let Ok(1) = circle_winding(line, q, 2.0 * r, t) {
            return Ok(r);
        }
        r *= 0.5;
    }
    Err(Error::NonSimpleZero(format!("no isolating circle around {q}")))
}

pub fn laurent_u(line: &TauLine, zero: &DivisorZero) -> Result<LaurentData> {
    if !zero.simple {
        return Err(Error::NonSimpleZero(format!("zero at {} is not simple", zero.q)));
    }
    let (v, w) = laurent_jet(line, zero.q, zero.t)?;
    let r = isolation_radius(line, zero.q, zero.t)?;
    let (vc, wc) = laurent_contour(line, zero.q, zero.t, r, 128)?;
    Ok(LaurentData {
        q: zero.q,
        v,
        w,
        v_contour: vc,
        w_contour: wc,
        radius: r,
        alpha: None,
        beta: None,
        gamma: None,
        delta: None,
    })
}

/// Follows a simple zero from `zero.t` to `t` by a second-order predictor
/// and Newton.
pub fn track_zero(line: &TauLine, zero: &DivisorZero, t: f64) -> Result<DivisorZero> {
    let dt = t - zero.t;
    let pred = zero.q + zero.dq_dt * dt + 0.5 * zero.d2q_dt2 * dt * dt;
    let lost = |why: String| Error::TrackingLost(format!("from t={} to t={t}: {why}", zero.t));
    if !pred.re.is_finite() || !pred.im.is_finite() {
        return Err(lost("no velocity at a non-simple zero".into()));
    }
    let d0 = line.derivs(zero.q, zero.t, &[[1, 0], [2, 0]])?;
    let reach0 = (d0[0] / d0[1]).norm();
    let q = newton(line, pred, t, 0.5 * reach0, 40)?.ok_or_else(|| lost("Newton failed".into()))?;
    let d = line.derivs(q, t, &[[0, 0], [1, 0], [2, 0]])?;
    let reach = (d[1] / d[2]).norm();
    if (q - pred).norm() > 0.25 * reach {
        return Err(lost(format!("jump {:e} against basin {reach:e}", (q - pred).norm())));
    }
    let (dq, ddq, fx) = implicit_derivatives(line, q, t)?;
    Ok(DivisorZero {
        q,
        t,
        dq_dt: dq,
        d2q_dt2: ddq,
        simple: true,
        multiplicity: 1,
        dtau_abs: fx.norm(),
        tau_abs: d[0].norm(),
    })
}

/// Both routes to `q''` and the Laurent coefficient `w` at a zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoleDynamics {
    pub q: C64,
    pub qddot_fd: C64,
    pub qddot_implicit: C64,
    pub two_w: C64,
    pub h: f64,
    pub residual: f64,
}

fn qddot_fd(line: &TauLine, zero: &DivisorZero, h: f64) -> Result<C64> {
    let mut v = [C64::new(0.0, 0.0); 5];
    for (k, j) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
        v[k] = if *j == 0.0 { zero.q } else { track_zero(line, zero, zero.t + j * h)?.q };
    }
    Ok((-v[0] + 16.0 * v[1] - 30.0 * v[2] + 16.0 * v[3] - v[4]) / (12.0 * h * h))
}

pub fn pole_dynamics(line: &TauLine, zero: &DivisorZero) -> Result<PoleDynamics> {
    if !zero.simple {
        return Err(Error::NonSimpleZero(format!("zero at {} is not simple", zero.q)));
    }
    let (_, w) = laurent_jet(line, zero.q, zero.t)?;
    let (_, qdd_imp, _) = implicit_derivatives(line, zero.q, zero.t)?;
    let d = line.derivs(zero.q, zero.t, &[[1, 0], [2, 0]])?;
    let reach = (d[0] / d[1]).norm();
    let speed = zero.dq_dt.norm().max(1e-3);
    let mut h = (0.05 * reach / speed).min(2e-2);
    // Halve h while successive estimates keep getting closer.
    let mut prev = qddot_fd(line, zero, h)?;
    let mut best = (prev, h);
    let mut last_gap = f64::INFINITY;
    while h > 1e-4 {
        h *= 0.5;
        let cur = qddot_fd(line, zero, h)?;
        let gap = (cur - prev).norm();
        if gap > last_gap {
            break;
        }
        best = (cur, h);
        if gap <= 1e-11 * (1.0 + cur.norm()) {
            break;
        }
        last_gap = gap;
        prev = cur;
    }
    let two_w = 2.0 * w;
    let residual = (best.0 - two_w).norm().max((qdd_imp - two_w).norm()) / (1.0 + two_w.norm());
    Ok(PoleDynamics {
        q: zero.q,
        qddot_fd: best.0,
        qddot_implicit: qdd_imp,
        two_w,
        h: best.1,
        residual,
    })
}

/// `max(|q''_fd - 2w|, |q''_implicit - 2w|) / (1 + |2w|)`.
pub fn pole_dynamics_residual(line: &TauLine, zero: &DivisorZero) -> Result<f64> {
    Ok(pole_dynamics(line, zero)?.residual)
}
