use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlirs::beamforming::estimation_plan;
use xlirs::channel::*;
use xlirs::grid::*;
use xlirs::tensor::{kron_vec, max_abs_diff, tucker_reconstruct, CVec, ComplexTensor3, C64};

fn desk() -> (Scenario, GridSet) {
    let s = Scenario::default();
    let g = build_grids(&s, &GridConfig::default()).unwrap();
    (s, g)
}

#[test]
fn user_grid_formula() {
    let s = Scenario { n_u: 16, ..Scenario::default() };
    let g = build_grids(&s, &GridConfig::default()).unwrap();
    assert!((g.user_angles[0] + 0.9375).abs() < 1e-15);
    assert!((g.user_angles[15] - 0.9375).abs() < 1e-15);
    for w in g.user_angles.windows(2) {
        assert!((w[1] - w[0] - 0.125).abs() < 1e-15);
    }
}

#[test]
fn full_scale_grid_sizes() {
    let s = Scenario::full();
    let g = build_grids(&s, &GridConfig { delay_points: None, ..GridConfig::default() }).unwrap();
    assert_eq!(g.n_bar_r(), 384);
    assert_eq!(g.n_f(), 24);
    assert!((g.delays[0] - 2.5e-9).abs() < 1e-20);
    assert!(*g.delays.last().unwrap() < 120e-9);
}

#[test]
fn polar_grid_structure() {
    let (s, g) = desk();
    let nr = s.n_r as f64;
    for m in 0..g.n_bar_r() {
        let (a, q) = (m / g.rings, m % g.rings);
        assert_eq!(g.polar_index(a, q), m);
        let theta = 2.0 / nr * (a as f64 - (nr - 1.0) / 2.0);
        assert!((g.polar_angles[m] - theta).abs() < 1e-15);
        let want = if q == 0 { g.far_distance } else { g.z_delta * (1.0 - theta * theta) / q as f64 };
        assert!((g.polar_distances[m] - want).abs() < 1e-12);
    }
    let rayleigh = rayleigh_distance(s.n_r, s.wavelength(), s.spacing()).unwrap();
    assert!((g.z_delta - rayleigh / 8.0).abs() < 1e-12);
    assert!((g.far_distance - 64.0 * rayleigh).abs() < 1e-9);
}

#[test]
fn build_grids_rejects_bad_parameters() {
    let s = Scenario::default();
    assert!(build_grids(&s, &GridConfig { rings: 0, ..GridConfig::default() }).is_err());
    assert!(build_grids(&s, &GridConfig { z_delta: Some(-1.0), ..GridConfig::default() }).is_err());
}

#[test]
fn polar_distance_examples() {
    assert_eq!(polar_distance((0.3, 5.0), (0.3, 5.0)).unwrap(), 0.0);
    assert!((polar_distance((0.2, 3.0), (0.2, 7.0)).unwrap() - 4.0).abs() < 1e-12);
    assert!((polar_distance((1.0, 1.0), (0.0, 1.0)).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert!(polar_distance((1.2, 1.0), (0.0, 1.0)).is_err());
}

#[test]
fn linear_index_bijection_exhaustive() {
    let (_, g) = desk();
    let mut seen = vec![false; g.n_bar()];
    for k in 0..g.n_f() {
        for m in 0..g.n_bar_r() {
            for u in 0..g.n_u() {
                let n = g.linear_index(u, m, k);
                assert!(!seen[n]);
                seen[n] = true;
                assert_eq!(g.triple(n), (u, m, k));
            }
        }
    }
    assert!(seen.iter().all(|x| *x));
}

#[test]
fn on_grid_path_has_zero_offsets() {
    let (s, g) = desk();
    let t = on_grid_truth(&s, &g, &[(1, 25, 2, C64::new(1.0, 0.0))], 0.0).unwrap();
    let a = assign_to_grid(&t, &g).unwrap();
    assert_eq!(a.triples, vec![(1, 25, 2)]);
    let all = a.offgrid.user.iter().chain(&a.offgrid.delay).chain(&a.offgrid.polar_angle);
    assert!(all.into_iter().all(|x| x.abs() < 1e-12));
    assert!(a.offgrid.polar_distance.iter().all(|x| x.abs() < 1e-9));
}

#[test]
fn small_angle_offset_is_recorded() {
    let (s, g) = desk();
    let mut t = FrameTruth::empty(&s);
    let eps = 0.1 * g.user_spacing();
    t.push_effective(C64::new(1.0, 0.0), g.user_angles[2] + eps, g.polar_angles[31], g.polar_distances[31], g.delays[3]);
    let a = assign_to_grid(&t, &g).unwrap();
    assert_eq!(a.triples[0].0, 2);
    assert!((a.offgrid.user[2] - eps).abs() < 1e-12);
    assert!(a.offgrid.user.iter().enumerate().all(|(u, x)| u == 2 || *x == 0.0));
}

#[test]
fn random_assignment_matches_brute_force() {
    let (s, g) = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let mut t = FrameTruth::empty(&s);
        let eff = rng.random_range(-0.9..0.9);
        let dist = rng.random_range(2.0..60.0);
        t.push_effective(C64::new(1.0, 0.0), rng.random_range(-0.95..0.95), eff, dist, rng.random_range(1e-9..g.delays[g.n_f() - 1]));
        let a = assign_to_grid(&t, &g).unwrap();
        let argmin = |n: usize, f: &dyn Fn(usize) -> f64| (0..n).min_by(|&i, &j| f(i).total_cmp(&f(j))).unwrap();
        let u = argmin(g.n_u(), &|i| (g.user_angles[i] - t.paths[0].user_angle).abs());
        let k = argmin(g.n_f(), &|i| (g.delays[i] - t.delay(0)).abs());
        let m = argmin(g.n_bar_r(), &|i| {
            let (t1, t2) = (t.eff_angle(0).acos(), g.polar_angles[i].acos());
            let (r1, r2) = (t.eff_distance(0), g.polar_distances[i]);
            (r1 * t1.cos() - r2 * t2.cos()).hypot(r1 * t1.sin() - r2 * t2.sin())
        });
        assert_eq!(a.triples[0], (u, m, k));
    }
}

#[test]
fn assignment_errors_and_collisions() {
    let (s, g) = desk();
    let mut t = FrameTruth::empty(&s);
    t.push_effective(C64::new(1.0, 0.0), 0.1, 0.2, 10.0, g.delays[g.n_f() - 1] + 1e-9);
    assert!(assign_to_grid(&t, &g).is_err());
    let t = on_grid_truth(&s, &g, &[(1, 25, 2, C64::new(1.0, 0.0)), (1, 25, 2, C64::new(0.0, 1.0))], 0.0).unwrap();
    let a = assign_to_grid(&t, &g).unwrap();
    assert_eq!(a.triples.len(), 2);
    assert_eq!(a.collisions, vec![(0, 1)]);
}

#[test]
fn plain_bu_dictionary_is_kron_of_arvs() {
    let (s, g) = desk();
    let (abu, ar, af) = build_dictionaries(&g, &OffGridState::zeros(&g), 0, 0.0, &s);
    let (bs_angle, _) = bs_irs_angles(&s);
    let ab = far_field_arv(bs_angle, s.n_b, s.wavelength(), s.spacing());
    for u in 0..g.n_u() {
        let au = far_field_arv(g.user_angles[u], s.n_u, s.wavelength(), s.spacing()).map(|z| z.conj());
        let want = kron_vec(&au, &ab);
        assert!(max_abs_diff(abu.column(u).as_slice(), want.as_slice()) < 1e-14);
    }
    assert_eq!(ar.shape(), (s.n_r, g.n_bar_r()));
    assert_eq!(af.shape(), (s.subcarriers, g.n_f()));
    for z in abu.iter().chain(ar.iter()).chain(af.iter()) {
        assert!((z.norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn delay_offset_shifts_column() {
    let (s, g) = desk();
    let mut og = OffGridState::zeros(&g);
    og.delay[3] = g.delay_spacing() / 2.0;
    let (_, _, af) = build_dictionaries(&g, &og, 0, 0.0, &s);
    let want = delay_response(&s, (g.delays[3] + g.delays[4]) / 2.0);
    assert!(max_abs_diff(af.column(3).as_slice(), want.as_slice()) < 1e-12);
}

#[test]
fn on_grid_path_is_a_one_sparse_tucker_core() {
    let (s, g) = desk();
    let gain = C64::new(0.4, -1.1);
    let doppler = 450.0;
    let t = on_grid_truth(&s, &g, &[(2, 22, 5, gain)], doppler).unwrap();
    let p = 3;
    let (abu, ar, af) = build_dictionaries(&g, &OffGridState::zeros(&g), p, doppler, &s);
    let mut core = ComplexTensor3::zeros([g.n_u(), g.n_bar_r(), g.n_f()]);
    core.set(2, 22, 5, gain);
    let recon = tucker_reconstruct(&core, &abu, &ar, &af).unwrap();
    let truth = cascaded_tensor(&t, p, &s);
    let scale = truth.norm_sqr().sqrt();
    assert!(max_abs_diff(recon.as_slice(), truth.as_slice()) < 1e-9 * scale);
}

#[test]
fn measurement_column_equals_received_pilot() {
    let (s, g) = desk();
    let selection = comb_selection(&s, &GridConfig::default()).unwrap();
    let pilots = zc_pilot(s.pilot_subcarriers, 1).unwrap();
    let plan = estimation_plan(&s, 2, 5);
    let doppler = 600.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &(u, m, k) in &[(0, 1, 0), (3, 19, 7), (1, 24, 4)] {
        let t = on_grid_truth(&s, &g, &[(u, m, k, C64::new(1.0, 0.0))], doppler).unwrap();
        for p in 0..2 {
            let f = measurement_matrix(p, &plan[p], &pilots, &selection, &g, &OffGridState::zeros(&g), doppler, &s).unwrap();
            assert_eq!(f.shape(), (s.r_b * s.pilot_subcarriers, g.n_bar()));
            let y = received_pilot(&t, p, &plan[p], &pilots, &selection, &s, 0.0, &mut rng).unwrap();
            let col = f.column(g.linear_index(u, m, k));
            let scale = y.norm_sqr().sqrt();
            assert!(max_abs_diff(col.as_slice(), y.as_slice()) < 1e-9 * scale, "({u},{m},{k}) pilot {p}");
        }
    }
}

#[test]
fn on_grid_observation_is_exact_for_a_sparse_core() {
    let (s, g) = desk();
    let atoms = [(0, 5, 1, C64::new(1.0, 2.0)), (3, 13, 6, C64::new(-0.5, 0.2))];
    let t = on_grid_truth(&s, &g, &atoms, 0.0).unwrap();
    let selection = comb_selection(&s, &GridConfig::default()).unwrap();
    let pilots = zc_pilot(s.pilot_subcarriers, 1).unwrap();
    let plan = estimation_plan(&s, 1, 9);
    let f = measurement_matrix(0, &plan[0], &pilots, &selection, &g, &OffGridState::zeros(&g), 0.0, &s).unwrap();
    let mut z = CVec::zeros(g.n_bar());
    for &(u, m, k, c) in &atoms {
        z[g.linear_index(u, m, k)] = c;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = received_pilot(&t, 0, &plan[0], &pilots, &selection, &s, 0.0, &mut rng).unwrap();
    let fz = &f * &z;
    assert!(max_abs_diff(fz.as_slice(), y.as_slice()) < 1e-9 * y.norm_sqr().sqrt());
    let zero = &f * CVec::zeros(g.n_bar());
    assert!(zero.iter().all(|x| *x == C64::new(0.0, 0.0)));
}

#[test]
fn pilots_differ_only_by_doppler_phase() {
    let (s, g) = desk();
    let selection = comb_selection(&s, &GridConfig::default()).unwrap();
    let pilots = zc_pilot(s.pilot_subcarriers, 1).unwrap();
    let beams = &estimation_plan(&s, 1, 4)[0];
    let og = OffGridState::zeros(&g);
    let doppler = 800.0;
    let f0 = measurement_matrix(0, beams, &pilots, &selection, &g, &og, doppler, &s).unwrap();
    let f1 = measurement_matrix(1, beams, &pilots, &selection, &g, &og, doppler, &s).unwrap();
    for n in 0..g.n_bar() {
        let (u, _, _) = g.triple(n);
        let rot = unit(2.0 * PI * doppler * s.pilot_interval * g.user_angles[u]);
        let want = f0.column(n) * rot;
        assert!(max_abs_diff(f1.column(n).as_slice(), want.as_slice()) < 1e-12 * (1.0 + want.norm()));
    }
}

#[test]
fn measurement_matrix_rejects_mismatch() {
    let (s, g) = desk();
    let beams = &estimation_plan(&s, 1, 4)[0];
    let pilots = zc_pilot(3, 1).unwrap();
    assert!(measurement_matrix(0, beams, &pilots, &[0, 4], &g, &OffGridState::zeros(&g), 0.0, &s).is_err());
}

#[test]
fn comb_pattern_default() {
    let s = Scenario::full();
    let sel = comb_selection(&s, &GridConfig::default()).unwrap();
    assert_eq!(sel.len(), 31);
    assert_eq!(sel[0], 2);
    assert_eq!(sel[30], 122);
    assert!(comb_selection(&s, &GridConfig { comb_stride: 5, ..GridConfig::default() }).is_err());
}

#[test]
fn stacking_examples() {
    let a = CVec::from_fn(8, |i, _| C64::new(i as f64, 0.0));
    let b = CVec::from_fn(8, |i, _| C64::new(0.0, i as f64));
    assert_eq!(stack_observations(std::slice::from_ref(&a)).unwrap(), a);
    let y = stack_observations(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(y.len(), 16);
    assert_eq!(y.rows(0, 8).into_owned(), a);
    assert_eq!(y.rows(8, 8).into_owned(), b);
    assert_eq!(unstack_observations(&y, 2).unwrap(), vec![a.clone(), b]);
    assert!(stack_observations(&[a, CVec::zeros(3)]).is_err());
    assert!(unstack_observations(&y, 3).is_err());
}

proptest! {
    #[test]
    fn clamp_respects_half_spacing(seed in 0u64..1000) {
        let (_, g) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut og = OffGridState::zeros(&g);
        og.user.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        og.delay.iter_mut().for_each(|x| *x = rng.random_range(-1e-8..1e-8));
        og.polar_angle.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        og.polar_distance.iter_mut().for_each(|x| *x = rng.random_range(-1e3..1e3));
        og.clamp(&g);
        prop_assert!(og.user.iter().all(|x| x.abs() <= g.user_spacing() / 2.0));
        prop_assert!(og.delay.iter().all(|x| x.abs() <= g.delay_spacing() / 2.0));
        prop_assert!(og.polar_angle.iter().all(|x| x.abs() <= g.polar_spacing() / 2.0));
        for m in 0..g.n_bar_r() {
            prop_assert!(og.polar_distance[m].abs() <= g.ring_half_gap(m));
            prop_assert!(g.polar_distances[m] + og.polar_distance[m] > 0.0);
        }
    }

    #[test]
    fn stack_round_trip(p in 1usize..5, n in 1usize..9, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<CVec> = (0..p).map(|_| CVec::from_fn(n, |_, _| C64::new(rng.random(), rng.random()))).collect();
        let y = stack_observations(&ys).unwrap();
        prop_assert_eq!(unstack_observations(&y, p).unwrap(), ys);
    }
}
