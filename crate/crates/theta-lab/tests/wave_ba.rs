use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use theta_lab::error::Error;
use theta_lab::secant_conditions::{genus1_bdhe_datum, genus1_kp_datum, genus1_rs_datum, validation_grid};
use theta_lab::siegel_theta::PeriodMatrix;
use theta_lab::tau_divisor::*;
use theta_lab::wave_ba::*;
use theta_lab::weierstrass::EllipticLattice;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn genus1_line(tau: C64, v: C64, z: C64, t_end: f64) -> TauLine {
    let b = PeriodMatrix::new(1, vec![tau]).unwrap();
    let w = Window::centered(c(0.5, 0.0), 0.55, 0.8).unwrap();
    TauLine::new(b, vec![c(1.0, 0.0)], vec![v], vec![z], w, [0.0, t_end]).unwrap()
}

fn g2_line(seed: u64) -> TauLine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = PeriodMatrix::random(2, 0.8, &mut rng).unwrap();
    let w = Window::centered(c(0.0, 0.0), 0.8, 0.8).unwrap();
    TauLine::new(
        b,
        vec![c(0.7, 0.1), c(0.3, -0.2)],
        vec![c(0.2, 0.1), c(-0.3, 0.2)],
        vec![c(0.1, 0.05), c(0.3, 0.2)],
        w,
        [0.0, 0.0],
    )
    .unwrap()
}

fn no_halt() -> WaveOptions {
    WaveOptions {
        halt_tol: None,
        ..WaveOptions::default()
    }
}

fn lattice() -> EllipticLattice {
    EllipticLattice::new(c(1.0, 0.0), c(0.2, 1.1)).unwrap()
}

// ---------------------------------------------------------------------------
// Wave recursion

// tau = theta(x | 40i) equals one to double precision on the window, so u
// vanishes and so do all coefficients.
#[test]
fn flat_tau_gives_vanishing_coefficients() {
    let b = PeriodMatrix::new(1, vec![c(0.0, 40.0)]).unwrap();
    let w = Window::centered(c(0.0, 0.0), 0.6, 0.4).unwrap();
    let line = TauLine::new(b, vec![c(1.0, 0.0)], vec![c(0.0, 0.0)], vec![c(0.1, 0.0)], w, [0.0, 0.0]).unwrap();
    let s = wave_recursion(&line, 4, true).unwrap();
    assert!(s.zeros.is_empty());
    assert_eq!(s.max_obstruction(), 0.0);
    let p = s.periodic_part.as_ref().unwrap();
    for k in 1..=4 {
        for x in [0.0, 0.3, 0.7] {
            let v = s.xi(k, p.base + x, 0.0, 0).unwrap();
            assert!(v.norm() < 1e-12, "order {k}: {v}");
        }
    }
    for cs in &p.c[1..] {
        assert!(cs.iter().all(|v| v.norm() < 1e-14), "{cs:?}");
    }
}

#[test]
fn genus1_obstructions_vanish_through_order_six() {
    let line = genus1_line(c(0.1, 1.1), c(0.3, 0.1), c(0.1, 0.05), 0.2);
    let s = wave_recursion(&line, 6, false).unwrap();
    assert!(!s.zeros.is_empty());
    assert!(s.max_obstruction() <= 1e-7, "{:e}", s.max_obstruction());
    assert!(s.max_propagation_defect() <= 1e-7);
    for z in &s.zeros {
        let (v, w) = laurent_jet(&line, z.zero.q, 0.0).unwrap();
        assert!((z.vw().0 - v).norm() < 1e-8 && (z.vw().1 - w).norm() < 1e-8);
        assert_eq!(z.obstructions[0], c(0.0, 0.0));
        for k in 0..=6 {
            let from_table = z.obstruction_from_laurent(k, s.b);
            assert!((from_table - z.obstructions[k]).norm() < 1e-9);
            assert_eq!(residue_obstruction(&s, &z.zero, k), Some(z.obstructions[k]));
        }
    }
}

#[test]
fn obstruction_responds_linearly_to_the_defect() {
    let line = g2_line(3);
    let s = wave_recursion_with(&line, 6, false, &no_halt()).unwrap();
    assert!(!s.zeros.is_empty());
    for z in &s.zeros {
        let pd = pole_dynamics(&line, &z.zero).unwrap();
        assert!((z.qddot() - pd.qddot_implicit).norm() < 1e-6 * (1.0 + pd.qddot_implicit.norm()));
        let eps = z.qddot() - 2.0 * z.vw().1;
        let (r1, _, _, _) = z.laurent(1);
        assert!((r1 + 1.0).norm() < 1e-10);
        assert!(eps.norm() > 1e-3);
        assert!((z.obstructions[2] - 0.5 * eps).norm() <= 1e-8 * eps.norm());
        for k in 0..6 {
            let rel = z.propagation_defect(k) / (1.0 + z.obstructions[k + 1].norm());
            assert!(rel < 1e-7, "order {k}: {rel:e}");
        }
        // the recursion without the factor two predicts twice the obstruction
        let (r, _, _, _) = z.laurent(1);
        let printed = -r * eps - z.qdot() * z.obstructions[1];
        assert!((z.obstructions[2] - printed).norm() > 0.4 * z.obstructions[2].norm());
    }
}

#[test]
fn recursion_halts_at_the_first_obstruction() {
    let line = g2_line(3);
    match wave_recursion(&line, 6, false) {
        Err(Error::ResidueObstruction { order, value }) => {
            assert_eq!(order, 2);
            assert!(value > 1e-6);
        }
        other => panic!("expected an obstruction, got {other:?}"),
    }
}

#[test]
fn periodic_normalization_restores_periodicity() {
    let line = genus1_line(c(0.1, 1.1), c(0.3, 0.1), c(0.1, 0.05), 0.2);
    let s = wave_recursion(&line, 6, true).unwrap();
    let fixed = s.max_periodicity_defect().unwrap();
    assert!(fixed <= 1e-8, "{fixed:e}");
    let opts = WaveOptions {
        fix_constants: false,
        ..WaveOptions::default()
    };
    let raw = wave_recursion_with(&line, 6, true, &opts).unwrap();
    assert!(raw.max_periodicity_defect().unwrap() > 1e-3);
    let p = s.periodic_part.as_ref().unwrap();
    for k in 1..=6 {
        assert_eq!(p.c[k][0], c(0.0, 0.0));
        let x = p.base + 0.3;
        let d = (s.xi(k, x + 1.0, 0.05, 0).unwrap() - s.xi(k, x, 0.05, 0).unwrap()).norm();
        assert!(d < 1e-8, "order {k}: {d:e}");
    }
}

#[test]
fn periodic_mode_needs_an_integer_vector() {
    let b = PeriodMatrix::new(1, vec![c(0.1, 1.1)]).unwrap();
    let w = Window::centered(c(0.5, 0.0), 0.55, 0.8).unwrap();
    let line = TauLine::new(b, vec![c(0.9, 0.0)], vec![c(0.3, 0.1)], vec![c(0.1, 0.05)], w, [0.0, 0.0]).unwrap();
    assert!(matches!(wave_recursion(&line, 3, true), Err(Error::InvalidArgument(_))));
}

// Lamé potential: u = -2 d^2 ln theta(x + Z) = 2 wp(x - x0) + const on the
// lattice (1, tau). The coefficients of L_2 = d^2 - u_kp and
// L_3 = d^3 - 3/2 u_kp d - w built from xi_1, xi_2 must give u_kp = u + b
// and the stationary form w = 3/4 u_kp'.
#[test]
fn lame_coefficients_of_l2_and_l3() {
    let tau = c(0.1, 1.1);
    let z = c(0.1, 0.05);
    let line = genus1_line(tau, c(0.0, 0.0), z, 0.0);
    let lat = EllipticLattice::new(c(0.5, 0.0), tau * 0.5).unwrap();
    let x0 = c(0.5, 0.0) + tau * 0.5 - z;
    for periodic in [false, true] {
        let s = wave_recursion(&line, 3, periodic).unwrap();
        let pts: Vec<C64> = if periodic {
            let base = s.periodic_part.as_ref().unwrap().base;
            (0..5).map(|j| base + 0.2 * j as f64).collect()
        } else {
            let q = s.zeros[0].zero.q;
            let r = 0.5 * s.zeros[0].radius;
            (0..5).map(|j| q + C64::from_polar(r, 1.3 * j as f64)).collect()
        };
        let mut offsets = Vec::new();
        for &x in &pts {
            let xi1 = s.xi(1, x, 0.0, 0).unwrap();
            let ukp = 2.0 * s.xi(1, x, 0.0, 1).unwrap();
            let ukp_x = 2.0 * s.xi(1, x, 0.0, 2).unwrap();
            let w = 3.0 * s.xi(2, x, 0.0, 1).unwrap() + 3.0 * s.xi(1, x, 0.0, 2).unwrap() - 1.5 * ukp * xi1;
            assert!((w - 0.75 * ukp_x).norm() < 1e-6 * (1.0 + ukp_x.norm()), "periodic={periodic}");
            let wp = lat.wp(x - x0).unwrap();
            offsets.push(ukp - 2.0 * wp);
            let dwp = lat.wp_prime(x - x0).unwrap();
            assert!((ukp_x - 2.0 * dwp).norm() < 1e-6 * (1.0 + dwp.norm()));
        }
        for o in &offsets {
            assert!((o - offsets[0]).norm() < 1e-6);
        }
    }
}

// ---------------------------------------------------------------------------
// Curve data and Baker-Akhiezer functions

#[test]
fn ba_is_one_at_zero_times() {
    let cd = genus1_one_point(&lattice(), c(0.3, 0.1), c(0.13, 0.07), 12, 3).unwrap();
    let psi = ba_eval(&cd, &cd.zero_times(), 0, c(9.0, 2.0)).unwrap();
    assert!((psi - 1.0).norm() < 1e-14);
}

// psi(t_1 = x) against the Lame kernel: psi = C e^{beta x} Phi(x - x_pole, x_p).
#[test]
fn one_point_ba_matches_the_lame_kernel() {
    let lat = lattice();
    let z = c(0.13, 0.07);
    let k = c(9.0, 2.0);
    for beta in [c(0.0, 0.0), c(0.3, 0.1)] {
        let cd = genus1_one_point(&lat, beta, z, 12, 3).unwrap();
        let u1 = cd.points[0].u[1][0];
        let tau = lat.omega2 / lat.omega1;
        let x_pole = (c(0.5, 0.0) + tau * 0.5 - z) / u1;
        let x_p = 1.0 / (k - beta);
        let mut first = None;
        for j in 0..10 {
            let x = -0.4 + 0.08 * j as f64;
            let mut t = cd.zero_times();
            t[0][1] = x;
            let psi = ba_eval(&cd, &t, 0, k).unwrap();
            let phi = lat.phi_lame(c(x, 0.0) - x_pole, x_p).unwrap() * (beta * x).exp();
            let r = psi / phi;
            let r0 = *first.get_or_insert(r);
            assert!((r / r0 - 1.0).norm() < 1e-6, "beta={beta} x={x}");
        }
    }
}

#[test]
fn ba_reports_divisor_hits_and_short_truncation() {
    let lat = lattice();
    let z = c(0.13, 0.07);
    let cd = genus1_one_point(&lat, c(0.0, 0.0), z, 12, 3).unwrap();
    let tau = lat.omega2 / lat.omega1;
    let u1 = cd.points[0].u[1][0];
    let on_divisor = CurveDatum::new(cd.b.clone(), cd.points.clone(), vec![c(0.5, 0.0) + tau * 0.5 - u1 * 0.2], 12, 3).unwrap();
    let mut t = on_divisor.zero_times();
    t[0][1] = 0.2;
    assert!(matches!(ba_eval(&on_divisor, &t, 0, c(9.0, 0.0)), Err(Error::DivisorHit(_))));
    let mut t = cd.zero_times();
    t[0][1] = 0.3;
    assert!(matches!(
        ba_eval(&cd, &t, 0, c(1.2, 0.0)),
        Err(Error::TruncationInsufficient(_))
    ));
}

#[test]
fn abel_gate_rejects_inconsistent_data() {
    let cd = genus1_one_point(&lattice(), c(0.3, 0.1), c(0.13, 0.07), 12, 3).unwrap();
    assert!(cd.abel_defect() <= 1e-10);
    let mut pts = cd.points.clone();
    pts[0].u[2][0] += c(0.05, 0.0);
    assert!(matches!(
        CurveDatum::new(cd.b.clone(), pts.clone(), cd.z.clone(), 12, 3),
        Err(Error::InvalidArgument(_))
    ));
    let bad = CurveDatum::new_unchecked(cd.b.clone(), pts, cd.z.clone(), 12, 3).unwrap();
    let json = bad.to_json();
    assert!(CurveDatum::from_json(&json).is_err());
}

#[test]
fn abel_perturbation_degrades_the_linear_problem() {
    let cd = genus1_one_point(&lattice(), c(0.3, 0.1), c(0.13, 0.07), 12, 3).unwrap();
    let grid: Vec<(f64, f64)> = (0..5)
        .flat_map(|i| (0..5).map(move |j| (-0.3 + 0.15 * i as f64, -0.2 + 0.1 * j as f64)))
        .collect();
    let k = c(9.0, 2.0);
    let good = ba_kp_linear_residual(&cd, &grid, k).unwrap();
    assert!(good.max < 1e-12, "{:e}", good.max);
    let mut pts = cd.points.clone();
    pts[0].u[2][0] += c(0.05, 0.0);
    let bad = CurveDatum::new_unchecked(cd.b.clone(), pts, cd.z.clone(), 12, 3).unwrap();
    let r = ba_kp_linear_residual(&bad, &grid, k).unwrap();
    assert!(r.max > 1e-6 && r.max > 1e6 * good.max, "{:e}", r.max);
}

#[test]
fn curve_datum_json_round_trip() {
    let lat = lattice();
    for cd in [
        genus1_one_point(&lat, c(0.3, 0.1), c(0.13, 0.07), 10, 4).unwrap(),
        genus1_two_point(&lat, c(0.45, 0.3), c(0.13, 0.07), 10, 2).unwrap(),
    ] {
        let back = CurveDatum::from_json(&cd.to_json()).unwrap();
        assert_eq!(back, cd);
    }
}

#[test]
fn two_point_discrete_vector_is_the_abel_difference() {
    let lat = lattice();
    let a = c(0.45, 0.3);
    let cd = genus1_two_point(&lat, a, c(0.13, 0.07), 16, 2).unwrap();
    let u0 = cd.points[0].u[0][0];
    assert!((u0 - (cd.points[1].abel0[0] - cd.points[0].abel0[0])).norm() < 1e-14);
    assert_eq!(cd.points[0].omega[0][0].log, 1);
    assert_eq!(cd.points[1].omega[0][0].log, -1);
    // psi is single valued in p for integer n: going once around P_2 leaves it unchanged
    let mut t = cd.zero_times();
    t[0][0] = 2.0;
    t[0][1] = 0.1;
    let k = c(10.0, 0.0);
    let p1 = ba_eval(&cd, &t, 1, k).unwrap();
    let p2 = ba_eval(&cd, &t, 1, C64::from_polar(10.0, 2.0 * PI - 1e-12)).unwrap();
    assert!((p1 - p2).norm() < 1e-9 * p1.norm());
}

// ---------------------------------------------------------------------------
// KP

fn kp_grid() -> Vec<[f64; 3]> {
    (0..4)
        .flat_map(|i| (0..3).map(move |j| [-0.3 + 0.2 * i as f64, -0.1 + 0.1 * j as f64, 0.05]))
        .collect()
}

#[test]
fn genus1_kp_residual_and_order() {
    let cd = genus1_one_point(&lattice(), c(0.3, 0.1), c(0.13, 0.07), 12, 3).unwrap();
    let r = kp_residual(&cd, &kp_grid()).unwrap();
    assert!(r.max <= 1e-4, "{:e}", r.max);
    assert!(r.order.unwrap() >= 1.9);
    let (cd_, cf) = (r.fitted("const_datum").unwrap(), r.fitted("const_fit").unwrap());
    assert!((cd_ - cf).norm() < 1e-5 * (1.0 + cd_.norm()));
    let fitted = kp_residual_with(&cd, &kp_grid(), KpConstant::Fitted).unwrap();
    assert!(fitted.max <= 1e-4);
}

#[test]
fn kp_wrong_flow_vector_fails() {
    let cd = genus1_one_point(&lattice(), c(0.3, 0.1), c(0.13, 0.07), 12, 3).unwrap();
    let mut pts = cd.points.clone();
    pts[0].u[2][0] *= 2.0;
    let bad = CurveDatum::new_unchecked(cd.b.clone(), pts, cd.z.clone(), 12, 3).unwrap();
    let r = kp_residual(&bad, &kp_grid()).unwrap();
    assert!(r.max > 1e-1, "{:e}", r.max);
}

fn flat_datum(points: usize) -> CurveDatum {
    let b = PeriodMatrix::new(1, vec![c(0.0, 1.0)]).unwrap();
    let flows = 3;
    let p = MarkedPoint {
        u: vec![vec![c(0.0, 0.0)]; 4],
        omega: vec![
            (0..=flows)
                .map(|i| AbelianSeries {
                    log: 0,
                    lead: i as i32,
                    coeffs: vec![c(1.0, 0.0)],
                })
                .collect();
            points
        ],
        abel0: vec![c(0.0, 0.0)],
        abel: vec![vec![c(0.0, 0.0)]; 3],
    };
    CurveDatum::new(b, vec![p; points], vec![c(0.2, 0.1)], 3, flows).unwrap()
}

#[test]
fn flat_datum_has_zero_residuals() {
    let cd = flat_datum(1);
    let r = kp_residual(&cd, &kp_grid()).unwrap();
    assert_eq!(r.max, 0.0);
    assert_eq!(kp_u(&cd, &[0.3, 0.1, 0.2]).unwrap(), c(0.0, 0.0));
    let cd2 = flat_datum(2);
    assert_eq!(toda_phi(&cd2, 3, 0.1, 0.2).unwrap(), c(0.0, 0.0));
    let r = toda_residual(&cd2, &[(0, 0.1, 0.2), (1, 0.0, 0.0)], TodaLayout::Forward).unwrap();
    assert_eq!(r.max, 0.0);
}

// ---------------------------------------------------------------------------
// 2D Toda

fn toda_grid() -> Vec<(i64, f64, f64)> {
    (0..3)
        .flat_map(|n| (0..3).map(move |j| (n - 1, -0.2 + 0.2 * j as f64, 0.1 - 0.1 * j as f64)))
        .collect()
}

#[test]
fn toda_sign_layout() {
    let cd = genus1_two_point(&lattice(), c(0.45, 0.3), c(0.13, 0.07), 20, 2).unwrap();
    let fwd = toda_residual(&cd, &toda_grid(), TodaLayout::Forward).unwrap();
    let bwd = toda_residual(&cd, &toda_grid(), TodaLayout::Backward).unwrap();
    assert!(fwd.max <= 1e-4, "{:e}", fwd.max);
    assert!(fwd.order.unwrap() >= 1.9);
    assert!(bwd.max > 1e-2, "{:e}", bwd.max);
}

#[test]
fn toda_pair_linear_problems() {
    let cd = genus1_two_point(&lattice(), c(0.45, 0.3), c(0.13, 0.07), 20, 2).unwrap();
    let (a, b) = toda_pair_residual(&cd, &toda_grid(), c(12.0, 1.0)).unwrap();
    assert!(a.max <= 1e-5 && b.max <= 1e-5, "{:e} {:e}", a.max, b.max);
}

#[test]
fn toda_phi_is_the_theta_ratio() {
    let cd = genus1_two_point(&lattice(), c(0.45, 0.3), c(0.13, 0.07), 16, 2).unwrap();
    let pol = theta_lab::siegel_theta::TruncationPolicy::default();
    let (n, xi, eta) = (2, 0.1, -0.1);
    let p = &cd.points;
    let w = |m: f64| vec![cd.z[0] + m * p[0].u[0][0] + xi * p[0].u[1][0] + eta * p[1].u[1][0]];
    let th = |m: f64| theta_lab::siegel_theta::theta_eval(&w(m), &cd.b, &pol).unwrap();
    let expect = th(n as f64 + 1.0) / th(n as f64);
    let phi = toda_phi(&cd, n, xi, eta).unwrap();
    assert!((phi.exp() - expect).norm() < 1e-13 * expect.norm());
}

// ---------------------------------------------------------------------------
// Linear problems on sampled fields

struct Fields {
    kp: ThetaField,
    rs: ThetaField,
    bdhe: ThetaField,
}

fn fields() -> Fields {
    let (tau, u, v, a, z) = (c(0.1, 1.2), c(0.31, 0.05), c(0.2, 0.1), c(0.23, 0.17), c(0.1, 0.07));
    let mk = |f: theta_lab::secant_conditions::FittedDatum| ThetaField { datum: f.datum, z: f.z };
    Fields {
        kp: mk(genus1_kp_datum(tau, u, v, a, z).unwrap()),
        rs: mk(genus1_rs_datum(tau, u, v, a, z).unwrap()),
        bdhe: mk(genus1_bdhe_datum(tau, u, v, a, z).unwrap()),
    }
}

fn bdhe_grid(g: &[(C64, C64)]) -> Vec<(C64, i64)> {
    g.iter().enumerate().map(|(k, (x, _))| (*x, (k % 5) as i64 - 2)).collect()
}

#[test]
fn genus1_linear_problems_hold() {
    let f = fields();
    let g = validation_grid(0.5, 5, c(0.0, 0.0));
    assert!(linear_residual_kp(&f.kp, &g).unwrap().max <= 1e-5);
    assert!(linear_residual_toda(&f.rs, &g).unwrap().max <= 1e-5);
    assert!(linear_residual_bdhe(&f.bdhe, &bdhe_grid(&g)).unwrap().max <= 1e-5);
}

#[test]
fn flat_field_is_exact() {
    let g = validation_grid(0.5, 5, c(0.0, 0.0));
    assert_eq!(linear_residual_kp(&FlatField { k: c(1.3, 0.4) }, &g).unwrap().max, 0.0);
}

#[test]
fn random_data_fail_the_linear_problems() {
    let f = fields();
    let g = validation_grid(0.5, 5, c(0.0, 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rnd = |mut t: ThetaField| {
        t.datum.a = vec![c(rng.random_range(0.2..0.5), rng.random_range(0.2..0.5))];
        t.datum.p = c(rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5));
        t.datum.e = c(rng.random_range(-0.5..0.5), rng.random_range(0.5..1.0));
        t
    };
    assert!(linear_residual_kp(&rnd(f.kp), &g).unwrap().max > 1e-1);
    assert!(linear_residual_toda(&rnd(f.rs), &g).unwrap().max > 1e-1);
    assert!(linear_residual_bdhe(&rnd(f.bdhe), &bdhe_grid(&g)).unwrap().max > 1e-1);
}

// psi -> c(t) psi with c = exp(a t + b t^2) turns d_t - d_x^2 + u into
// d_t - c'/c - d_x^2 + u.
struct Gauged<'a> {
    inner: &'a ThetaField,
    a: C64,
    b: C64,
}

impl Gauged<'_> {
    fn gauge(&self, t: C64) -> (C64, C64) {
        ((self.a * t + self.b * t * t).exp(), self.a + 2.0 * self.b * t)
    }
}

impl WaveField for Gauged<'_> {
    fn tau_jet(&self, x: C64, t: C64) -> theta_lab::error::Result<[C64; 4]> {
        self.inner.tau_jet(x, t)
    }

    fn psi_jet(&self, x: C64, t: C64) -> theta_lab::error::Result<[C64; 4]> {
        let p = self.inner.psi_jet(x, t)?;
        let (g, dlog) = self.gauge(t);
        Ok([g * p[0], g * p[1], g * p[2], g * (p[3] + dlog * p[0])])
    }
}

#[test]
fn gauge_covariance_of_the_heat_operator() {
    let f = fields();
    let gauged = Gauged {
        inner: &f.kp,
        a: c(0.4, -0.2),
        b: c(0.3, 0.1),
    };
    let g = validation_grid(0.5, 5, c(0.0, 0.0));
    assert!(linear_residual_kp(&gauged, &g).unwrap().max > 1e-3);
    for &(x, t) in &g {
        let tau = gauged.tau_jet(x, t).unwrap();
        assert_eq!(tau, f.kp.tau_jet(x, t).unwrap());
        let l1 = tau[1] / tau[0];
        let u = -2.0 * (tau[2] / tau[0] - l1 * l1);
        let p = gauged.psi_jet(x, t).unwrap();
        let (_, dlog) = gauged.gauge(t);
        let r = p[3] - dlog * p[0] - p[2] + u * p[0];
        assert!(r.norm() < 1e-9 * (p[3].norm() + p[2].norm() + (u * p[0]).norm()));
    }
}

// The +u form of the lattice problem holds for psi with (p, E) shifted by i pi
// from the -v form.
#[test]
fn laxdd_and_difference_problem_signs() {
    let f = fields();
    let x0 = c(0.1, 0.05);
    let mut shifted = f.bdhe.clone();
    shifted.datum.p += c(0.0, PI);
    shifted.datum.e += c(0.0, PI);
    let tau: Vec<Vec<C64>> = (0..6)
        .map(|m| (0..6).map(|n| f.bdhe.tau_jet(x0 + m as f64, c(n as f64, 0.0)).unwrap()[0]).collect())
        .collect();
    let u: Vec<Vec<C64>> = uformula(&tau).iter().take(5).map(|r| r[..5].to_vec()).collect();
    let grid = |fld: &ThetaField| -> Vec<Vec<C64>> {
        (0..5)
            .map(|m| (0..5).map(|n| fld.psi_jet(x0 + m as f64, c(n as f64, 0.0)).unwrap()[0]).collect())
            .collect()
    };
    assert!(laxdd_residual(&grid(&shifted), &u).unwrap().max < 1e-10);
    assert!(laxdd_residual(&grid(&f.bdhe), &u).unwrap().max > 1e-1);
}

// ---------------------------------------------------------------------------
// Discrete equations

fn bdhe_grid_genus1(z: C64) -> BdheThetaGrid {
    let b = PeriodMatrix::new(1, vec![c(0.1, 1.2)]).unwrap();
    bdhe_theta_grid(&b, &[c(0.31, 0.05)], &[c(0.2, 0.1)], &[c(0.13, -0.04)], &[z], (5, 5, 5), -2).unwrap()
}

#[test]
fn genus1_theta_grid_solves_bdhe() {
    let g = bdhe_grid_genus1(c(0.1, 0.07));
    let r = bdhe_tau_residual(&g.grid);
    assert_eq!(r.values.len(), 3 * 4 * 4);
    assert!(r.max <= 1e-8, "{:e}", r.max);
}

#[test]
fn unit_tau_is_not_a_bdhe_solution() {
    let r = bdhe_tau_residual(&TauGrid::constant(3, 3, 3, c(1.0, 0.0)));
    assert_eq!(r.max, 1.0);
    assert_eq!(r.mean, 1.0);
}

#[test]
fn bdhe_residual_grows_with_perturbation() {
    let g = bdhe_grid_genus1(c(0.1, 0.07));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<C64> = (0..125).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let perturb = |eps: f64| {
        let mut t = g.grid.clone();
        let mut k = 0;
        for plane in t.values.iter_mut() {
            for row in plane.iter_mut() {
                for v in row.iter_mut() {
                    *v *= 1.0 + eps * noise[k];
                    k += 1;
                }
            }
        }
        bdhe_tau_residual(&t).max
    };
    let (r3, r2) = (perturb(1e-3), perturb(1e-2));
    assert!(r3 > 1e-5);
    assert!((r2 / r3 - 10.0).abs() < 2.0, "{r2:e} {r3:e}");
}

#[test]
fn discrete_schrodinger_oracles() {
    let constant = vec![vec![c(0.7, 0.2); 4]; 4];
    let any_u: Vec<Vec<C64>> = (0..4).map(|n| (0..4).map(|m| c(n as f64, m as f64 - 1.0)).collect()).collect();
    assert_eq!(discrete_schrodinger_residual(&constant, &any_u).unwrap().max, 0.0);
    let (a, b) = (c(1.1, 0.3), c(0.6, -0.4));
    let psi: Vec<Vec<C64>> = (0..5).map(|n| (0..5).map(|m| a.powi(n) * b.powi(m)).collect()).collect();
    let u = vec![vec![(a * b - 1.0) / (a - b); 5]; 5];
    assert!(discrete_schrodinger_residual(&psi, &u).unwrap().max < 1e-14);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rnd: Vec<Vec<C64>> = (0..5)
        .map(|_| (0..5).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect())
        .collect();
    assert!(discrete_schrodinger_residual(&rnd, &u).unwrap().max > 1e-2);
    assert!(discrete_schrodinger_residual(&rnd, &u[..4]).is_err());
}

#[test]
fn grid_residual_serializes() {
    let g = bdhe_grid_genus1(c(0.1, 0.07));
    let r = bdhe_tau_residual(&g.grid);
    let json = serde_json::to_string(&r).unwrap();
    let back: GridResidual = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), r.values.len() + 1);
    assert!(csv.starts_with("index,p0,p1,p2,residual"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn grid_residual_max_dominates_mean(vals in proptest::collection::vec(0.0f64..10.0, 0..40)) {
        let pts = vals.iter().map(|v| vec![*v]).collect();
        let r = GridResidual::new("p", pts, vals);
        prop_assert!(r.max >= r.mean && r.mean >= 0.0);
    }

    #[test]
    fn plane_waves_solve_the_discrete_equation(ar in 0.3f64..2.0, ai in -1.0f64..1.0, br in -2.0f64..-0.3, bi in -1.0f64..1.0) {
        let (a, b) = (c(ar, ai), c(br, bi));
        let psi: Vec<Vec<C64>> = (0..4).map(|n| (0..4).map(|m| a.powi(n) * b.powi(m)).collect()).collect();
        let u = vec![vec![(a * b - 1.0) / (a - b); 4]; 4];
        prop_assert!(discrete_schrodinger_residual(&psi, &u).unwrap().max < 1e-12);
    }

    #[test]
    fn genus1_data_pass_the_abel_gate(br in -0.4f64..0.4, bi in -0.4f64..0.4) {
        let cd = genus1_one_point(&lattice(), c(br, bi), c(0.13, 0.07), 10, 4).unwrap();
        prop_assert!(cd.abel_defect() <= 1e-10);
        let psi = ba_eval(&cd, &cd.zero_times(), 0, c(12.0, 1.0)).unwrap();
        prop_assert!((psi - 1.0).norm() < 1e-12);
    }

    #[test]
    fn bdhe_residual_is_lattice_invariant(zr in -0.3f64..0.3, zi in -0.2f64..0.2) {
        let a = bdhe_tau_residual(&bdhe_grid_genus1(c(zr, zi)).grid).max;
        let b = bdhe_tau_residual(&bdhe_grid_genus1(c(zr + 1.0, zi)).grid).max;
        prop_assert!(a <= 1e-8 && b <= 1e-8);
    }

    #[test]
    fn propagation_identity_on_random_genus2(seed in 0u64..40) {
        let line = g2_line(seed);
        if let Ok(s) = wave_recursion_with(&line, 4, false, &no_halt()) {
            for z in &s.zeros {
                for k in 0..4 {
                    prop_assert!(z.propagation_defect(k) < 1e-7 * (1.0 + z.obstructions[k + 1].norm()));
                }
            }
        }
    }
}
