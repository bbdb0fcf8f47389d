//! Small numerical helpers shared by the modules: compensated sums,
//! complex least squares and Gauss-Legendre nodes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Neumaier-style compensated accumulator for real values.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.sum, x);
        self.sum = s;
        self.comp += e;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated accumulator for complex values (real and imaginary parts
/// carried separately).
#[derive(Debug, Clone, Copy, Default)]
pub struct ComplexSum {
    re: NeumaierSum,
    im: NeumaierSum,
}

impl ComplexSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, z: C64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    pub fn value(&self) -> C64 {
        C64::new(self.re.value(), self.im.value())
    }
}

pub fn csum<It: IntoIterator<Item = C64>>(it: It) -> C64 {
    let mut s = ComplexSum::new();
    for z in it {
        s.add(z);
    }
    s.value()
}

pub fn is_finite(z: C64) -> bool {
    z.re.is_finite() && z.im.is_finite()
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    csum(a.iter().zip(b).map(|(x, y)| x * y))
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn axpy(a: C64, x: &[C64], y: &[C64]) -> Vec<C64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + yi).collect()
}

pub fn scale(a: C64, x: &[C64]) -> Vec<C64> {
    x.iter().map(|xi| a * xi).collect()
}

pub fn add(x: &[C64], y: &[C64]) -> Vec<C64> {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

pub fn sub(x: &[C64], y: &[C64]) -> Vec<C64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

/// Result of a complex least-squares solve.
#[derive(Debug, Clone)]
pub struct LstsqResult {
    pub x: Vec<C64>,
    /// Euclidean norm of the residual `Ax - b`.
    pub residual: f64,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Minimum-norm least squares via SVD; singular values below
/// `rcond * s_max` are treated as zero.
pub fn lstsq(a: &DMatrix<C64>, b: &DVector<C64>, rcond: f64) -> LstsqResult {
    let svd = a.clone().svd(true, true);
    let s = svd.singular_values.clone();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let rank = s.iter().filter(|&&v| v > rcond * smax && v > 0.0).count();
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let n = a.ncols();
    let mut x = DVector::<C64>::zeros(n);
    for k in 0..s.len() {
        if s[k] > rcond * smax && s[k] > 0.0 {
            let coef = u.column(k).adjoint() * b;
            let coef = coef[(0, 0)] / s[k];
            x += vt.row(k).adjoint() * coef;
        }
    }
    let r = a * &x - b;
    LstsqResult {
        x: x.iter().cloned().collect(),
        residual: r.norm(),
        rank,
        singular_values: s.iter().cloned().collect(),
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        xs[i] = x;
        ws[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

/// Median of a slice (NaN-free input assumed); empty input gives NaN.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, |a, b| a.max(b.abs()))
}
