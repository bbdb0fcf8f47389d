use num_complex::Complex64 as C64;
use proptest::prelude::*;
use theta_lab::weierstrass::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

// Eisenstein sums over the box max(|m|,|n|) <= r, excluding the origin.
fn eisenstein(lat: &EllipticLattice, r: i64, k: i32) -> C64 {
    let mut s = c(0.0, 0.0);
    for m in -r..=r {
        for n in -r..=r {
            if m == 0 && n == 0 {
                continue;
            }
            let w = 2.0 * m as f64 * lat.omega1 + 2.0 * n as f64 * lat.omega2;
            s += w.powi(-k);
        }
    }
    s
}

// Square partial sums have tails in powers r^(2-k), r^(1-k), ... (the
// Euler-Maclaurin boundary term brings in the odd powers); repeated
// Richardson on r, 2r, 4r, 8r.
fn richardson(mut s: Vec<C64>, p0: i32) -> C64 {
    let mut p = p0;
    while s.len() > 1 {
        let a = 2f64.powi(p);
        s = s.windows(2).map(|w| (a * w[1] - w[0]) / (a - 1.0)).collect();
        p += 1;
    }
    s[0]
}

fn invariants_oracle(lat: &EllipticLattice) -> (C64, C64) {
    let rs = [24, 48, 96, 192];
    let g4 = rs.iter().map(|&r| eisenstein(lat, r, 4)).collect();
    let g6 = rs.iter().map(|&r| eisenstein(lat, r, 6)).collect();
    (60.0 * richardson(g4, 2), 140.0 * richardson(g6, 4))
}

fn lattices() -> Vec<EllipticLattice> {
    vec![
        EllipticLattice::unit_square(),
        EllipticLattice::new(c(1.0, 0.0), c(0.5, 0.9)).unwrap(),
        EllipticLattice::new(c(0.7, 0.2), c(-0.1, 1.1)).unwrap(),
    ]
}

#[test]
fn invariants_match_lattice_sums() {
    for lat in lattices() {
        let (g2, g3) = lat.invariants();
        let (o2, o3) = invariants_oracle(&lat);
        let s = 1.0 + g2.norm() + g3.norm();
        assert!((g2 - o2).norm() < 1e-9 * s, "g2 {g2} vs {o2}");
        assert!((g3 - o3).norm() < 1e-9 * s, "g3 {g3} vs {o3}");
    }
}

#[test]
fn differential_equation_with_oracle_invariants() {
    for lat in lattices() {
        let (o2, o3) = invariants_oracle(&lat);
        for x in [c(0.43, 0.21), c(0.31, -0.37), c(-0.4, 0.33)] {
            let p = lat.wp(x).unwrap();
            let dp = lat.wp_prime(x).unwrap();
            let res = dp * dp - (4.0 * p * p * p - o2 * p - o3);
            assert!(res.norm() < 1e-8 * (1.0 + (dp * dp).norm()), "{res}");
        }
    }
}

#[test]
fn half_period_values_sum_to_zero() {
    for lat in lattices() {
        let (e1, e2, e3) = lat.half_period_values();
        assert!((e1 + e2 + e3).norm() < 1e-9);
    }
}

#[test]
fn legendre_relation() {
    for lat in lattices() {
        assert!(lat.legendre_residual() <= 1e-12);
    }
}

#[test]
fn laurent_normalisations() {
    let lat = EllipticLattice::new(c(1.0, 0.0), c(0.5, 0.9)).unwrap();
    let mut prev = f64::INFINITY;
    for x in [1e-2, 1e-3] {
        let x = c(x, 0.5 * x);
        let d = (lat.wp(x).unwrap() - 1.0 / (x * x)).norm();
        assert!(d < prev);
        prev = d;
        assert!((lat.zeta_w(x).unwrap() - 1.0 / x).norm() < 1e-3);
    }
}

#[test]
fn sigma_quasiperiodicity() {
    for lat in lattices() {
        for x in [c(0.1, 0.2), c(-0.3, 0.05)] {
            for a in [1usize, 2] {
                let w = lat.omega(a);
                let lhs = lat.sigma(x + 2.0 * w);
                let rhs = -lat.sigma(x) * (2.0 * lat.eta(a) * (x + w)).exp();
                assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + rhs.norm()));
            }
        }
    }
}

#[test]
fn wp_is_minus_zeta_derivative() {
    let lat = EllipticLattice::new(c(0.7, 0.2), c(-0.1, 1.1)).unwrap();
    let x = c(0.23, 0.17);
    let h = 1e-4;
    let z = |s: f64| lat.zeta_w(x + h * s).unwrap();
    let d = (z(-2.0) - 8.0 * z(-1.0) + 8.0 * z(1.0) - z(2.0)) / (12.0 * h);
    assert!((d + lat.wp(x).unwrap()).norm() < 1e-9);
    let p = |s: f64| lat.wp(x + h * s).unwrap();
    let dp = (p(-2.0) - 8.0 * p(-1.0) + 8.0 * p(1.0) - p(2.0)) / (12.0 * h);
    assert!((dp - lat.wp_prime(x).unwrap()).norm() < 1e-8);
}

#[test]
fn phi_has_no_constant_term() {
    let lat = EllipticLattice::new(c(1.0, 0.0), c(0.5, 0.9)).unwrap();
    let z = c(0.37, 0.21);
    let xs = [1e-2, 1e-3, 1e-4, 1e-5];
    let errs: Vec<f64> = xs.iter().map(|&x| (lat.phi_lame(c(x, 0.0), z).unwrap() - 1.0 / x).norm()).collect();
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!(slope >= 0.9, "slope {slope}");
}

#[test]
fn phi_periodic_in_z_and_bloch_in_x() {
    for lat in lattices() {
        let (x, z) = (c(0.21, 0.13), c(0.33, -0.27));
        let p = lat.phi_lame(x, z).unwrap();
        let pz = lat.phi_lame(x, z + 2.0 * lat.omega1).unwrap();
        assert!((p - pz).norm() <= 1e-10 * (1.0 + p.norm()));
        for a in [1usize, 2] {
            let t = lat.bloch_multiplier(a, z).unwrap();
            let px = lat.phi_lame(x + 2.0 * lat.omega(a), z).unwrap();
            assert!((px - t * p).norm() <= 1e-10 * (1.0 + px.norm()));
            let tm = lat.bloch_multiplier(a, -z).unwrap();
            assert!((t * tm - 1.0).norm() < 1e-12);
        }
    }
}

#[test]
fn phi_product_identity() {
    let lat = EllipticLattice::new(c(0.7, 0.2), c(-0.1, 1.1)).unwrap();
    let (x, z) = (c(0.21, 0.13), c(0.33, -0.27));
    let lhs = lat.phi_lame(x, z).unwrap() * lat.phi_lame(-x, z).unwrap();
    let rhs = lat.wp(z).unwrap() - lat.wp(x).unwrap();
    assert!((lhs - rhs).norm() < 1e-10);
}

#[test]
fn phi_derivative_against_finite_difference() {
    let lat = EllipticLattice::unit_square();
    let (x, z) = (c(0.21, 0.13), c(0.33, -0.27));
    let h = 1e-3;
    let f = |s: f64| lat.phi_lame(x + h * s, z).unwrap();
    let d = (f(-2.0) - 8.0 * f(-1.0) + 8.0 * f(1.0) - f(2.0)) / (12.0 * h);
    assert!((d - lat.phi_lame_dx(x, z).unwrap()).norm() < 1e-7);
}

#[test]
fn lame_grid() {
    let lat = EllipticLattice::unit_square();
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        for j in 0..10 {
            let x = c(0.05 + 0.09 * i as f64, 0.11 + 0.03 * j as f64);
            let z = c(0.17 + 0.07 * j as f64, 0.23 - 0.04 * i as f64);
            worst = worst.max(lat.lame_residual(x, z).unwrap());
        }
    }
    assert!(worst <= 1e-6, "{worst}");
    let r = lat.lame_residual(c(0.2, 0.1), lat.omega1 + c(1e-3, 1e-3)).unwrap();
    assert!(r <= 1e-6);
    let a = lat.lame_residual(c(0.2, 0.1), c(0.3, 0.2)).unwrap();
    let b = lat.lame_residual(c(0.2, 0.1) + 2.0 * lat.omega1, c(0.3, 0.2)).unwrap();
    assert!(a <= 1e-6 && b <= 1e-6);
}

#[test]
fn config_round_trip() {
    let lat = EllipticLattice::new(c(1.0, 0.0), c(0.5, 0.9)).unwrap();
    let s = serde_json::to_string(&lat.to_config()).unwrap();
    let back = EllipticLattice::from_config(&serde_json::from_str(&s).unwrap()).unwrap();
    assert_eq!(back, lat);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn parity(xr in -2.0f64..2.0, xi in -2.0f64..2.0) {
        let lat = EllipticLattice::new(c(0.7, 0.2), c(-0.1, 1.1)).unwrap();
        let x = c(xr, xi);
        prop_assume!(lat.lattice_distance(x) > 1e-3);
        let s = (lat.sigma(-x) + lat.sigma(x)).norm();
        prop_assert!(s <= 1e-10 * (1.0 + lat.sigma(x).norm()));
        let z = (lat.zeta_w(-x).unwrap() + lat.zeta_w(x).unwrap()).norm();
        prop_assert!(z <= 1e-10 * (1.0 + lat.zeta_w(x).unwrap().norm()));
        let p = (lat.wp(-x).unwrap() - lat.wp(x).unwrap()).norm();
        prop_assert!(p <= 1e-10 * (1.0 + lat.wp(x).unwrap().norm()));
    }

    #[test]
    fn wp_is_periodic(xr in -1.0f64..1.0, xi in -1.0f64..1.0) {
        let lat = EllipticLattice::new(c(1.0, 0.0), c(0.5, 0.9)).unwrap();
        let x = c(xr, xi);
        prop_assume!(lat.lattice_distance(x) > 1e-2);
        let p = lat.wp(x).unwrap();
        let q = lat.wp(x + 2.0 * lat.omega1 - 2.0 * lat.omega2).unwrap();
        prop_assert!((p - q).norm() <= 1e-10 * (1.0 + p.norm()));
    }

    #[test]
    fn lame(xr in 0.05f64..0.45, xi in 0.05f64..0.45, zr in 0.05f64..0.45, zi in -0.45f64..-0.05) {
        let lat = EllipticLattice::unit_square();
        let r = lat.lame_residual(c(xr, xi), c(zr, zi)).unwrap();
        prop_assert!(r <= 1e-6, "{}", r);
    }
}
