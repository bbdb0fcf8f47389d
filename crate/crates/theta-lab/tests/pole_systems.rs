use num_complex::Complex64 as C64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use theta_lab::pole_systems::*;
use theta_lab::weierstrass::EllipticLattice;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn lat() -> EllipticLattice {
    EllipticLattice::new(c(1.0, 0.0), c(0.3, 1.1)).unwrap()
}

#[test]
fn two_particle_half_period_energy() {
    let l = EllipticLattice::new(c(1.0, 0.0), c(0.0, 1.3)).unwrap();
    let s = CMState::new(vec![c(0.2, 0.0), c(1.2, 0.0)], vec![c(0.0, 0.0); 2], l).unwrap();
    let (e1, _, _) = l.half_period_values();
    assert!((cm_hamiltonian(&s).unwrap() - 2.0 * e1).norm() < 1e-12);
}

#[test]
fn hamiltonian_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_cm_state(3, &lat(), 0.2, &mut rng);
    let mut t = s.clone();
    for q in t.q.iter_mut() {
        *q += c(0.37, -0.11);
    }
    assert!((cm_hamiltonian(&s).unwrap() - cm_hamiltonian(&t).unwrap()).norm() < 1e-10);
}

#[test]
fn lax_matrix_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_cm_state(3, &lat(), 0.2, &mut rng);
    let z = c(0.41, 0.29);
    let l = cm_lax(&s, z).unwrap();
    let tr: C64 = s.p.iter().sum();
    assert!((l.trace() - tr).norm() < 1e-14);
    let m = cm_m_matrix(&s, z).unwrap();
    let m2 = cm_m_matrix(&s, c(0.2, -0.3)).unwrap();
    let wz = s.lat.wp(z).unwrap();
    let wz2 = s.lat.wp(c(0.2, -0.3)).unwrap();
    for i in 0..3 {
        assert!(((m[(i, i)] - wz) - (m2[(i, i)] - wz2)).norm() < 1e-10);
    }
    let h = 1e-4;
    let x = s.q[0] - s.q[1];
    let fd = (s.lat.phi_lame(x + h, z).unwrap() - s.lat.phi_lame(x - h, z).unwrap()) / (2.0 * h);
    assert!((m[(0, 1)] + 2.0 * fd).norm() < 1e-7);
}

#[test]
fn two_particle_product_identity() {
    let s = CMState::new(vec![c(0.1, 0.2), c(-0.3, 0.5)], vec![c(0.0, 0.0); 2], lat()).unwrap();
    let z = c(0.41, 0.29);
    let l = cm_lax(&s, z).unwrap();
    let q = s.q[0] - s.q[1];
    let rhs = 4.0 * (s.lat.wp(z).unwrap() - s.lat.wp(q).unwrap());
    assert!((l[(0, 1)] * l[(1, 0)] - rhs).norm() < 1e-9);
}

#[test]
fn lax_residual_and_wrong_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kappa = calibrate_flow().kappa;
    for n in 2..=4 {
        for _ in 0..4 {
            let s = random_cm_state(n, &lat(), 0.15, &mut rng);
            let z = c(0.33, 0.17);
            assert!(lax_residual(&s, z).unwrap() <= 1e-8);
            assert!(lax_residual_with(&s, z, -kappa).unwrap() > 1e-2);
        }
    }
}

#[test]
fn single_particle_moves_freely() {
    let s = CMState::new(vec![c(0.1, 0.1)], vec![c(0.3, -0.2)], lat()).unwrap();
    let tr = cm_flow(&s, 1e-2, 100).unwrap();
    let last = tr.last().unwrap();
    assert!((last.q[0] - (s.q[0] + s.p[0])).norm() < 1e-13);
}

// RK4 on q'' = -8 / (q1 - q2)^3, the small-separation limit of the flow.
fn rational_oracle(q0: [C64; 2], p0: [C64; 2], dt: f64, steps: usize) -> [C64; 2] {
    let acc = |q: [C64; 2]| {
        let d = q[0] - q[1];
        let a = -8.0 / (d * d * d);
        [a, -a]
    };
    let (mut q, mut p) = (q0, p0);
    for _ in 0..steps {
        let k1q = p;
        let k1p = acc(q);
        let q2 = [q[0] + dt / 2.0 * k1q[0], q[1] + dt / 2.0 * k1q[1]];
        let p2 = [p[0] + dt / 2.0 * k1p[0], p[1] + dt / 2.0 * k1p[1]];
        let k2q = p2;
        let k2p = acc(q2);
        let q3 = [q[0] + dt / 2.0 * k2q[0], q[1] + dt / 2.0 * k2q[1]];
        let p3 = [p[0] + dt / 2.0 * k2p[0], p[1] + dt / 2.0 * k2p[1]];
        let k3q = p3;
        let k3p = acc(q3);
        let q4 = [q[0] + dt * k3q[0], q[1] + dt * k3q[1]];
        let p4 = [p[0] + dt * k3p[0], p[1] + dt * k3p[1]];
        let k4q = p4;
        let k4p = acc(q4);
        for i in 0..2 {
            q[i] += dt / 6.0 * (k1q[i] + 2.0 * k2q[i] + 2.0 * k3q[i] + k4q[i]);
            p[i] += dt / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i]);
        }
    }
    q
}

#[test]
fn rational_limit() {
    let big = EllipticLattice::new(c(60.0, 0.0), c(0.0, 60.0)).unwrap();
    let q0 = [c(0.0, 0.0), c(1.0, 0.3)];
    let p0 = [c(0.2, 0.1), c(-0.1, 0.0)];
    let s = CMState::new(q0.to_vec(), p0.to_vec(), big).unwrap();
    let tr = cm_flow(&s, 1e-3, 100).unwrap();
    let o = rational_oracle(q0, p0, 1e-3, 100);
    let last = tr.last().unwrap();
    assert!((last.q[0] - o[0]).norm() < 1e-6 && (last.q[1] - o[1]).norm() < 1e-6);
}

fn min_separation(tr: &[CMState]) -> f64 {
    let mut d = f64::INFINITY;
    for st in tr {
        for i in 0..st.n() {
            for j in (i + 1)..st.n() {
                d = d.min(st.lat.lattice_distance(st.q[i] - st.q[j]));
            }
        }
    }
    d
}

#[test]
fn energy_and_spectrum_conserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = c(0.33, 0.17);
    for n in 2..=4 {
        let (s, tr) = loop {
            let s = random_cm_state_scaled(n, &lat(), 0.5, 0.3, &mut rng);
            let Ok(tr) = cm_flow(&s, 1e-3, 1000) else { continue };
            if min_separation(&tr) >= 0.6 {
                break (s, tr);
            }
        };
        let kappa = calibrate_flow().kappa;
        let e0 = cm_flow_energy(&s, kappa).unwrap();
        let i0 = spectral_invariants(&s, z, n).unwrap();
        let last = tr.last().unwrap();
        let de = (cm_flow_energy(last, kappa).unwrap() - e0).norm();
        assert!(de <= 1e-8, "n={n}: drift {de:e} from {e0}");
        let i1 = spectral_invariants(last, z, n).unwrap();
        for (a, b) in i0.power_traces.iter().zip(&i1.power_traces) {
            assert!((a - b).norm() <= 1e-7 * (1.0 + a.norm()), "n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn involution_symmetry_for_zero_momenta() {
    let s = CMState::new(vec![c(0.1, 0.2), c(-0.4, -0.3)], vec![c(0.0, 0.0); 2], lat()).unwrap();
    let z = c(0.33, 0.17);
    let a = spectral_invariants(&s, z, 2).unwrap();
    let b = spectral_invariants(&s, -z, 2).unwrap();
    for (j, (x, y)) in a.charpoly.iter().zip(&b.charpoly).enumerate() {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        assert!((x - sign * y).norm() <= 1e-8);
    }
}

#[test]
fn collision_is_reported() {
    let r = CMState::new(vec![c(0.1, 0.0), c(0.1, 0.0)], vec![c(0.0, 0.0); 2], lat());
    assert!(matches!(r, Err(theta_lab::Error::CollisionDetected(_))));
}

#[test]
fn rs_single_particle() {
    let l = lat();
    let s = RSState::new(vec![c(0.2, 0.1)], vec![c(0.3, 0.0)], l).unwrap();
    let z = c(0.33, 0.17);
    assert!((rs_hamiltonian(&s) - c(0.3, 0.0).exp()).norm() < 1e-14);
    let m = rs_lax(&s, z).unwrap();
    assert!((m[(0, 0)] - c(0.3, 0.0).exp() * l.phi_lame(c(-1.0, 0.0), z).unwrap()).norm() < 1e-13);
}

#[test]
fn rs_trace_and_isospectrality() {
    let l = EllipticLattice::new(c(1.7, 0.0), c(0.2, 1.9)).unwrap();
    let s = RSState::new(
        vec![c(0.1, 0.2), c(0.55, -0.35), c(-0.6, 0.4)],
        vec![c(0.1, 0.05), c(-0.2, 0.1), c(0.05, -0.1)],
        l,
    )
    .unwrap();
    let z = c(0.41, 0.23);
    let m = rs_lax(&s, z).unwrap();
    let f = rs_f(&s);
    let tr: C64 = f.iter().map(|fi| fi * l.phi_lame(c(-1.0, 0.0), z).unwrap()).sum();
    assert!((m.trace() - tr).norm() < 1e-12);
    let i0 = spectral_invariants_of(&m, 3);
    let traj = rs_flow(&s, 1e-3, 200).unwrap();
    let i1 = spectral_invariants_of(&rs_lax(traj.last().unwrap(), z).unwrap(), 3);
    for (a, b) in i0.power_traces.iter().zip(&i1.power_traces) {
        assert!((a - b).norm() <= 1e-6 * (1.0 + a.norm()), "{a} vs {b}");
    }
}

fn bethe_lattice() -> EllipticLattice {
    EllipticLattice::new(c(1.7, 0.0), c(0.4, 1.6)).unwrap()
}

#[test]
fn bethe_unit_spacing_is_exact() {
    let t = BetheTrajectory::linear(&[c(0.3, 0.2)], c(1.0, 0.0), -2, 5, bethe_lattice()).unwrap();
    for n in -1..=1 {
        assert!(bethe_residual(&t, n, 0).unwrap().norm() <= 1e-12);
    }
    let bad = BetheTrajectory::linear(&[c(0.3, 0.2)], c(0.8, 0.1), -2, 5, bethe_lattice()).unwrap();
    assert!(bethe_residual(&bad, 0, 0).unwrap().norm() > 1e-3);
}

#[test]
fn bethe_two_particles_by_newton() {
    let seed = BetheTrajectory::linear(&[c(0.3, 0.2), c(-0.45, 0.7)], c(1.0, 0.0), 0, 6, bethe_lattice()).unwrap();
    let before = (1..5).map(|n| bethe_residual(&seed, n, 0).unwrap().norm()).fold(0.0, f64::max);
    assert!(before > 1e-3);
    let (sol, r) = bethe_solve(&seed, 1e-11, 60).unwrap();
    assert!(r <= 1e-9);
    for n in 1..5 {
        for i in 0..2 {
            assert!(bethe_residual(&sol, n, i).unwrap().norm() <= 1e-9);
        }
    }
}

#[test]
fn double_bloch_shift_and_residue() {
    let l = lat();
    let z = c(0.33, 0.17);
    let psi = double_bloch_assemble(&[c(0.1, 0.2), c(-0.4, 0.1)], &[c(1.0, 0.5), c(-0.3, 0.2)], z, c(0.2, -0.1), &l).unwrap();
    let b = psi.multipliers().unwrap();
    let x = c(0.27, -0.31);
    let r = psi.eval(x + 2.0 * l.omega1).unwrap() / psi.eval(x).unwrap();
    assert!((r - b.b1).norm() <= 1e-9 * b.b1.norm());
    let r2 = psi.eval(x + 2.0 * l.omega2).unwrap() / psi.eval(x).unwrap();
    assert!((r2 - b.b2).norm() <= 1e-9 * b.b2.norm());
    let one = double_bloch_assemble(&[c(0.1, 0.2)], &[c(1.0, 0.0)], z, c(0.2, -0.1), &l).unwrap();
    let eps = 1e-6;
    let res = one.eval(c(0.1, 0.2) + eps).unwrap() * eps;
    assert!((res - (c(0.2, -0.1) * c(0.1, 0.2)).exp()).norm() < 1e-5);
    let a = c(0.05, 0.3);
    let g = psi.gauged(a).multipliers().unwrap();
    assert!((g.b1 - b.b1 * (2.0 * a * l.omega1).exp()).norm() < 1e-9 * g.b1.norm());
    let (inv, _) = b.equivalence_invariant(&l);
    let (inv_g, _) = g.equivalence_invariant(&l);
    assert!((inv - inv_g).norm() < 1e-8 * inv.norm());
}

#[test]
fn heat_reduction_single_particle() {
    let s = CMState::new(vec![c(0.1, 0.2)], vec![c(0.4, -0.3)], lat()).unwrap();
    let z = c(0.33, 0.17);
    let ks = reduction_spectrum(&s, z).unwrap();
    assert!((ks[0] + 0.5 * s.p[0]).norm() < 1e-14);
    let r = heat_to_lax_reduction(&s, z, ks[0]).unwrap();
    assert!(r.heat_residual <= 1e-6, "{r:?}");
}

#[test]
fn heat_reduction_positive_and_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = c(0.33, 0.17);
    for n in 2..=3 {
        let s = random_cm_state(n, &lat(), 0.3, &mut rng);
        for k in reduction_spectrum(&s, z).unwrap() {
            let r = heat_to_lax_reduction(&s, z, k).unwrap();
            assert!(r.residual_l <= 1e-12, "{r:?}");
            assert!(r.residual_m <= 1e-8, "{r:?}");
            assert!(r.heat_residual <= 1e-5, "{r:?}");
            let bad = heat_residual_perturbed(&s, z, k, 1e-2).unwrap();
            assert!(bad > 1e-2, "{bad}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lax_residual_property(seed in 0u64..10_000, n in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_cm_state(n, &lat(), 0.15, &mut rng);
        prop_assert!(lax_residual(&s, c(0.21, -0.37)).unwrap() <= 1e-8);
    }
}

#[test]
fn heat_time_derivative_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = c(0.33, 0.17);
    for n in 2..=3 {
        let s = random_cm_state(n, &lat(), 0.3, &mut rng);
        for k in reduction_spectrum(&s, z).unwrap() {
            let l = cm_lax(&s, z).unwrap();
            let a = &l + CMatrix::identity(n, n) * (2.0 * k);
            let svd = a.svd(false, true);
            let idx = svd.singular_values.iamin();
            let c0: Vec<C64> = svd.v_t.unwrap().row(idx).iter().map(|v| v.conj()).collect();
            let grid = cell_grid(&s.lat, &s.q, 6);
            let flow = heat_residual_for(&s, &c0, z, k, &grid, TimeDerivative::Flow).unwrap();
            let fd = heat_residual_for(&s, &c0, z, k, &grid, TimeDerivative::FiniteDifference).unwrap();
            assert!(flow <= 1e-10, "{flow}");
            assert!(fd <= 1e-3, "{fd}");
        }
    }
}
