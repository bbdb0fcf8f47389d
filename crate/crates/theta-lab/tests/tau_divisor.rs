use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use theta_lab::siegel_theta::PeriodMatrix;
use theta_lab::tau_divisor::*;
use theta_lab::weierstrass::EllipticLattice;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn genus1_line(tau: C64, u: C64, v: C64, z: C64, window: Window) -> TauLine {
    let b = PeriodMatrix::new(1, vec![tau]).unwrap();
    TauLine::new(b, vec![u], vec![v], vec![z], window, [-0.5, 0.5]).unwrap()
}

// theta_3(z | tau) by direct summation.
fn jacobi_theta(z: C64, tau: C64) -> C64 {
    let mut s = c(0.0, 0.0);
    for n in -40i32..=40 {
        let n = n as f64;
        s += (C64::i() * PI * (n * n * tau + 2.0 * n * z)).exp();
    }
    s
}

// Zero count by a dense polygon with 4000 samples per edge.
fn coarse_count(line: &TauLine, w: &Window) -> i64 {
    let corners = w.corners();
    let n = 4000;
    let mut total = 0.0;
    let mut prev = tau_eval(line, corners[0], 0.0).unwrap();
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        for j in 1..=n {
            let x = a + (b - a) * (j as f64 / n as f64);
            let f = tau_eval(line, x, 0.0).unwrap();
            total += (f / prev).arg();
            prev = f;
        }
    }
    (total / (2.0 * PI)).round() as i64
}

#[test]
fn genus_one_tau_is_jacobi_theta() {
    let w = Window::new(c(0.1, 0.1), c(1.1, 1.1)).unwrap();
    let line = genus1_line(c(0.0, 1.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), w);
    for x in [c(0.3, 0.2), c(-0.7, 0.4), c(1.2, -0.3)] {
        let a = tau_eval(&line, x, 0.0).unwrap();
        let b = jacobi_theta(x, c(0.0, 1.0));
        assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()));
    }
}

#[test]
fn time_shift_is_a_z_shift() {
    let w = Window::new(c(-1.0, -1.0), c(1.0, 1.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = PeriodMatrix::random(2, 0.8, &mut rng).unwrap();
    let (u, v, z) = (vec![c(0.7, 0.1), c(-0.3, 0.4)], vec![c(0.2, -0.5), c(0.6, 0.1)], vec![c(0.1, 0.2), c(0.3, -0.1)]);
    let line = TauLine::new(b.clone(), u.clone(), v.clone(), z.clone(), w, [0.0, 1.0]).unwrap();
    let t = 0.37;
    let z2: Vec<C64> = z.iter().zip(&v).map(|(a, b)| a + b * t).collect();
    let shifted = TauLine::new(b, u, v, z2, w, [0.0, 1.0]).unwrap();
    let x = c(0.31, -0.12);
    assert_eq!(tau_eval(&line, x, t).unwrap(), tau_eval(&shifted, x, 0.0).unwrap());
}

#[test]
fn monodromy_in_x() {
    let tau = c(0.3, 1.2);
    let u = c(0.8, 0.3);
    let z = c(0.1, 0.05);
    let w = Window::new(c(-1.0, -1.0), c(1.0, 1.0)).unwrap();
    let line = genus1_line(tau, u, c(0.0, 0.0), z, w);
    let x = c(0.2, 0.1);
    let f = tau_eval(&line, x, 0.0).unwrap();
    let f1 = tau_eval(&line, x + 1.0 / u, 0.0).unwrap();
    assert!((f1 - f).norm() <= 1e-12 * (1.0 + f.norm()));
    let arg = u * x + z;
    let fb = tau_eval(&line, x + tau / u, 0.0).unwrap();
    let factor = (-C64::i() * PI * tau - 2.0 * C64::i() * PI * arg).exp();
    assert!((fb - factor * f).norm() <= 1e-11 * (1.0 + fb.norm()));
}

#[test]
fn classical_zero_in_one_cell() {
    let w = Window::new(c(0.1, 0.1), c(1.1, 1.1)).unwrap();
    let line = genus1_line(c(0.0, 1.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), w);
    assert_eq!(coarse_count(&line, &w), 1);
    let zs = find_zeros(&line, 0.0).unwrap();
    assert_eq!(zs.len(), 1);
    assert!((zs[0].q - c(0.5, 0.5)).norm() < 1e-12);
    assert!(zs[0].simple);
}

#[test]
fn zeros_on_the_lattice_and_count_matches_winding() {
    let w = Window::new(c(-0.9, -0.8), c(1.1, 1.3)).unwrap();
    let line = genus1_line(c(0.0, 1.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), w);
    let zs = find_zeros(&line, 0.0).unwrap();
    let (n, _) = winding_number(&line, &w, 0.0).unwrap();
    assert_eq!(zs.len() as i64, n);
    assert_eq!(n, coarse_count(&line, &w));
    assert_eq!(n, 4);
    for z in &zs {
        let r = z.q - c(0.5, 0.5);
        assert!((r.re - r.re.round()).abs() < 1e-12 && (r.im - r.im.round()).abs() < 1e-12);
    }
}

fn random_g2_line(seed: u64) -> TauLine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let b = PeriodMatrix::random(2, 0.7, &mut rng).unwrap();
    let mut v2 = || -> Vec<C64> { (0..2).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect() };
    let (u, v, z) = (v2(), v2(), v2());
    let w = Window::new(c(-1.3, -1.1), c(1.2, 1.4)).unwrap();
    TauLine::new(b, u, v, z, w, [-0.5, 0.5]).unwrap()
}

fn sparse_g2_line(seed: u64) -> TauLine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let b = PeriodMatrix::random(2, 0.7, &mut rng).unwrap();
    let mut v2 = |s: f64| -> Vec<C64> { (0..2).map(|_| s * c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect() };
    let (u, v, z) = (v2(0.5), v2(1.0), v2(1.0));
    let w = Window::new(c(-0.8, -0.7), c(0.9, 0.75)).unwrap();
    TauLine::new(b, u, v, z, w, [-0.5, 0.5]).unwrap()
}

#[test]
fn random_genus_two_count_matches_dense_winding() {
    for seed in 0..4 {
        let line = random_g2_line(seed);
        let zs = find_zeros(&line, 0.0).unwrap();
        let total: u32 = zs.iter().map(|z| z.multiplicity).sum();
        assert_eq!(total as i64, coarse_count(&line, &line.window), "seed {seed}");
        let (_, scale) = winding_number(&line, &line.window, 0.0).unwrap();
        for z in &zs {
            assert!(z.tau_abs <= 1e-12 * scale, "{} {scale}", z.tau_abs);
        }
    }
}

#[test]
fn find_zeros_is_reproducible_across_thread_counts() {
    let line = random_g2_line(7);
    let a = find_zeros(&line, 0.1).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| find_zeros(&line, 0.1).unwrap());
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    let csv = zeros_to_csv(&a);
    assert_eq!(csv.lines().count(), a.len() + 1);
}

#[test]
fn zeros_move_continuously() {
    let line = random_g2_line(11);
    let zs = find_zeros(&line, 0.0).unwrap();
    let d = 1e-4;
    for z in zs.iter().filter(|z| z.simple) {
        let z1 = track_zero(&line, z, d).unwrap();
        let step = (z1.q - z.q).norm();
        assert!(step <= 2.0 * z.dq_dt.norm() * d + 1e-10, "{step}");
    }
}

#[test]
fn double_zero_is_flagged() {
    let b = PeriodMatrix::diagonal(&[c(0.0, 1.0), c(0.0, 1.0)]).unwrap();
    let w = Window::new(c(0.1, 0.15), c(0.95, 0.9)).unwrap();
    let line = TauLine::new(b, vec![c(1.0, 0.0); 2], vec![c(0.0, 0.0); 2], vec![c(0.0, 0.0); 2], w, [0.0, 0.0]).unwrap();
    let zs = find_zeros(&line, 0.0).unwrap();
    assert_eq!(zs.len(), 1);
    assert_eq!(zs[0].multiplicity, 2);
    assert!(!zs[0].simple);
    assert!((zs[0].q - c(0.5, 0.5)).norm() < 1e-6);
    assert!(matches!(laurent_u(&line, &zs[0]), Err(theta_lab::Error::NonSimpleZero(_))));
    assert!(matches!(track_zero(&line, &zs[0], 0.01), Err(theta_lab::Error::TrackingLost(_))));
}

#[test]
fn zero_on_boundary_is_reported() {
    let w = Window::new(c(0.1, 0.5), c(1.1, 1.1)).unwrap();
    let line = genus1_line(c(0.0, 1.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), w);
    assert!(matches!(find_zeros(&line, 0.0), Err(theta_lab::Error::BoundaryZero(_))));
}

#[test]
fn genus_one_laurent_matches_weierstrass() {
    for (tau, u) in [(c(0.0, 1.0), c(1.0, 0.0)), (c(0.3, 1.2), c(0.8, 0.3)), (c(-0.4, 0.9), c(0.5, -0.6))] {
        let w = Window::centered(c(0.0, 0.0), 1.5, 1.5).unwrap();
        let line = genus1_line(tau, u, c(0.4, 0.1), c(0.13, -0.07), w);
        let lat = EllipticLattice::new(0.5 / u, 0.5 * tau / u).unwrap();
        let v_exact = 2.0 * lat.eta1 / lat.omega1;
        let zs = find_zeros(&line, 0.0).unwrap();
        assert!(!zs.is_empty());
        for z in &zs {
            let l = laurent_u(&line, z).unwrap();
            assert!((l.v - v_exact).norm() <= 1e-8 * (1.0 + v_exact.norm()), "{} vs {v_exact}", l.v);
            assert!(l.w.norm() <= 1e-8, "{}", l.w);
            assert!((l.w - l.w_contour).norm() <= 1e-8);
        }
    }
}

#[test]
fn laurent_routes_agree_on_genus_two() {
    for seed in 0..4 {
        let line = random_g2_line(seed);
        for z in find_zeros(&line, 0.0).unwrap().iter().filter(|z| z.simple) {
            let l = laurent_u(&line, z).unwrap();
            let s = 1.0 + l.v.norm() + l.w.norm();
            assert!((l.v - l.v_contour).norm() <= 1e-8 * s, "v {} vs {}", l.v, l.v_contour);
            assert!((l.w - l.w_contour).norm() <= 1e-8 * s, "w {} vs {}", l.w, l.w_contour);
        }
    }
}

#[test]
fn singular_part_is_two_over_square() {
    let line = random_g2_line(2);
    let z = find_zeros(&line, 0.0).unwrap().into_iter().find(|z| z.simple).unwrap();
    let l = laurent_u(&line, &z).unwrap();
    let mut prev = f64::INFINITY;
    for r in [1e-2, 5e-3, 2.5e-3] {
        let mut worst: f64 = 0.0;
        for k in 0..8 {
            let s = C64::from_polar(r, 0.3 + k as f64 * PI / 4.0);
            let u = u_at(&line, z.q + s, 0.0).unwrap();
            worst = worst.max((u - 2.0 / (s * s) - l.v - l.w * s).norm());
        }
        // O(r^2) remainder: halving r divides the defect by about four.
        assert!(worst < prev / 3.0 || worst < 1e-8, "{worst} {prev}");
        prev = worst;
    }
}

#[test]
fn genus_one_pole_dynamics() {
    let w = Window::centered(c(0.0, 0.0), 1.23, 1.17).unwrap();
    let line = genus1_line(c(0.2, 1.1), c(0.9, 0.2), c(0.5, -0.3), c(0.1, 0.2), w);
    let zs = find_zeros(&line, 0.0).unwrap();
    assert!(!zs.is_empty());
    for z in &zs {
        let p = pole_dynamics(&line, z).unwrap();
        assert!(p.residual <= 1e-6, "{p:?}");
        assert!((p.qddot_fd - p.qddot_implicit).norm() <= 1e-6);
    }
}

#[test]
fn random_genus_two_pole_dynamics_fails() {
    let mut res = Vec::new();
    for seed in 0..10 {
        let line = random_g2_line(100 + seed);
        let zs = find_zeros(&line, 0.0).unwrap();
        if let Some(z) = zs.iter().find(|z| z.simple) {
            let p = pole_dynamics(&line, z).unwrap();
            assert!((p.qddot_fd - p.qddot_implicit).norm() <= 1e-6 * (1.0 + p.qddot_implicit.norm()));
            res.push(p.residual);
        }
    }
    res.sort_by(f64::total_cmp);
    assert!(res.len() >= 5);
    assert!(res[res.len() / 2] > 1e-2, "{res:?}");
}

fn boundary_distance(w: &Window, x: C64) -> f64 {
    let dx = (x.re - w.lo.re).abs().min((w.hi.re - x.re).abs());
    let dy = (x.im - w.lo.im).abs().min((w.hi.im - x.im).abs());
    if w.contains(x) {
        dx.min(dy)
    } else {
        let ox = (w.lo.re - x.re).max(x.re - w.hi.re).max(0.0);
        let oy = (w.lo.im - x.im).max(x.im - w.hi.im).max(0.0);
        ox.hypot(oy)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_count_constant_in_time(seed in 0u64..1000, t in -0.05f64..0.05) {
        let line = sparse_g2_line(seed);
        let w = line.window;
        let outer = Window::new(w.lo - c(0.4, 0.4), w.hi + c(0.4, 0.4)).unwrap();
        let zs = find_zeros(&line.clone().with_window(outer), 0.0).unwrap();
        // No zero of the enlarged window reaches the boundary over [0, t].
        let ok = zs.iter().all(|z| z.simple && boundary_distance(&w, z.q) > 4.0 * z.dq_dt.norm() * t.abs() + 0.05);
        prop_assume!(ok);
        let inside = zs.iter().filter(|z| w.contains(z.q)).count() as i64;
        let (n1, _) = winding_number(&line, &w, t).unwrap();
        prop_assert_eq!(n1, inside);
    }
}
