use std::f64::consts::PI;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlirs::beamforming::estimation_plan;
use xlirs::channel::*;
use xlirs::tensor::{khatri_rao, max_abs_diff, CMat, C64};

fn wrap(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

fn lambda() -> f64 {
    SPEED_OF_LIGHT / 28e9
}

fn geometric_truth(seed: u64) -> (Scenario, FrameTruth) {
    let s = Scenario::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = generate_truth(&s, s.subcarriers as f64 / s.bandwidth, &mut rng).unwrap();
    (s, t)
}

#[test]
fn far_field_broadside_is_all_ones() {
    let a = far_field_arv(0.0, 8, lambda(), lambda() / 2.0);
    assert!(a.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
    assert_eq!(far_field_arv(0.3, 1, lambda(), lambda() / 2.0)[0], C64::new(1.0, 0.0));
}

#[test]
fn far_field_phase_progression() {
    let a = far_field_arv(0.5, 4, lambda(), lambda() / 2.0);
    for (i, want) in [0.0, -PI / 2.0, -PI, -1.5 * PI].iter().enumerate() {
        assert!((a[i] - unit(*want)).norm() < 1e-12, "element {i}");
    }
}

#[test]
fn near_field_single_element_and_bad_distance() {
    let a = near_field_arv(0.4, 3.0, 1, lambda(), lambda() / 2.0).unwrap();
    assert!((a[0] - C64::new(1.0, 0.0)).norm() < 1e-15);
    assert!(near_field_arv(0.4, 0.0, 4, lambda(), lambda() / 2.0).is_err());
}

#[test]
fn near_field_approaches_conjugate_plane_wave() {
    // The exact response carries the path-difference sign opposite to the
    // far-field steering vector, so the limit is its conjugate.
    let (l, d) = (lambda(), lambda() / 2.0);
    for phi in [-0.7, 0.0, 0.35, 0.9] {
        let near = near_field_arv(phi, 1e7, 64, l, d).unwrap();
        let far = far_field_arv(phi, 64, l, d);
        let err = near.iter().zip(far.iter()).map(|(a, b)| wrap(a.arg() - b.conj().arg()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "phi {phi}: {err}");
    }
}

#[test]
fn fresnel_error_shrinks_quadratically() {
    // The leading neglected term of the expansion scales as 1/r².
    let (l, d) = (lambda(), lambda() / 2.0);
    let err = |r: f64| {
        let a = near_field_arv(0.5, r, 64, l, d).unwrap();
        let b = fresnel_arv(0.5, r, 64, l, d);
        a.iter().zip(b.iter()).map(|(x, y)| wrap(x.arg() - y.arg()).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(20.0), err(40.0));
    assert!(e1 > 0.0 && e1 < 0.2, "{e1}");
    assert!((e1 / e2 - 4.0).abs() < 0.4, "ratio {}", e1 / e2);
}

#[test]
fn fresnel_delta_matches_exact_distance() {
    let d = lambda() / 2.0;
    for i in 0..16 {
        let exact = element_distance(0.3, 50.0, i, d) - 50.0;
        assert!((exact - fresnel_delta(0.3, 50.0, i, d)).abs() < 1e-7, "element {i}");
    }
}

#[test]
fn rayleigh_distance_examples() {
    let l = lambda();
    let d128 = rayleigh_distance(128, l, l / 2.0).unwrap();
    assert!((d128 - 86.2).abs() < 0.5, "{d128}");
    assert!((rayleigh_distance(2, l, l / 2.0).unwrap() - l / 2.0).abs() < 1e-15);
    let ratio = rayleigh_distance(64, l, l / 2.0).unwrap() / rayleigh_distance(32, l, l / 2.0).unwrap();
    assert!((ratio - (63.0f64 / 31.0).powi(2)).abs() < 1e-12);
    assert!(rayleigh_distance(1, l, l / 2.0).is_err());
}

#[test]
fn irs_user_channel_without_paths_is_zero() {
    let s = Scenario::default();
    let t = FrameTruth::empty(&s);
    let h = irs_user_channel(&t, 3, 1, &s);
    assert_eq!(h.shape(), (s.n_r, s.n_u));
    assert!(h.iter().all(|z| *z == C64::new(0.0, 0.0)));
}

#[test]
fn doppler_rotates_channel_between_pilots() {
    let s = Scenario::default();
    let mut t = FrameTruth::empty(&s);
    t.doppler = 700.0;
    t.push_effective(C64::new(0.7, -0.2), 0.4, 0.1, 12.0, 20e-9);
    let h0 = irs_user_channel(&t, 5, 2, &s);
    let h1 = irs_user_channel(&t, 5, 3, &s);
    let want = 2.0 * PI * t.doppler * s.pilot_interval * 0.4;
    for (a, b) in h0.iter().zip(h1.iter()) {
        assert!(wrap((b / a).arg() - want).abs() < 1e-9);
        assert!(((b / a).norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bs_irs_channel_is_rank_one() {
    let (s, t) = geometric_truth(4);
    let g = bs_irs_channel(&t, 7, &s);
    let scale = g.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    for i in 1..g.nrows() {
        for j in 1..g.ncols() {
            let minor = g[(0, 0)] * g[(i, j)] - g[(0, j)] * g[(i, 0)];
            assert!(minor.norm() < 1e-12 * scale);
        }
    }
}

#[test]
fn cascaded_slice_matches_khatri_rao_of_hops() {
    let (s, t) = geometric_truth(11);
    for p in [0, 3] {
        let r = cascaded_tensor(&t, p, &s);
        for k in [0, 9, s.subcarriers - 1] {
            let h = irs_user_channel(&t, k, p, &s);
            let g = bs_irs_channel(&t, k, &s);
            let oracle = khatri_rao(&h.transpose(), &g).unwrap();
            let slice = r.frontal_slice(k);
            let scale = oracle.iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(max_abs_diff(slice.as_slice(), oracle.as_slice()) < 1e-10 * scale, "p {p} k {k}");
        }
    }
}

#[test]
fn received_pilot_matches_cascaded_oracle() {
    let (s, t) = geometric_truth(2);
    let plan = estimation_plan(&s, 2, 8);
    let selection = [1usize, 6, 20];
    let pilots = zc_pilot(3, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = received_pilot(&t, 1, &plan[1], &pilots, &selection, &s, 0.0, &mut rng).unwrap();
    let r = cascaded_tensor(&t, 1, &s);
    let x = plan[1].x_matrix();
    for (j, &k) in selection.iter().enumerate() {
        let want = &x * (r.frontal_slice(k) * &plan[1].v) * (pilots[j] * s.transmit_power.sqrt());
        for row in 0..s.r_b {
            let got = y.get(row, 0, j);
            assert!((got - want[row]).norm() < 1e-10 * want[row].norm().max(1e-30));
        }
    }
}

#[test]
fn received_pilot_is_linear_in_gain() {
    let (s, t) = geometric_truth(5);
    let plan = estimation_plan(&s, 1, 2);
    let pilots = zc_pilot(s.pilot_subcarriers, 1).unwrap();
    let sel: Vec<usize> = (0..s.pilot_subcarriers).map(|i| i * 4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y1 = received_pilot(&t, 0, &plan[0], &pilots, &sel, &s, 0.0, &mut rng).unwrap();
    let mut t2 = t.clone();
    let c = C64::new(-1.5, 0.75);
    t2.beta *= c;
    let y2 = received_pilot(&t2, 0, &plan[0], &pilots, &sel, &s, 0.0, &mut rng).unwrap();
    let scaled = y1.scale(c);
    let scale = y2.norm_sqr().sqrt();
    assert!(max_abs_diff(y2.as_slice(), scaled.as_slice()) < 1e-12 * scale);
}

#[test]
fn received_noise_power_after_combiner() {
    let s = Scenario::default();
    let t = FrameTruth::empty(&s);
    let plan = estimation_plan(&s, 1, 3);
    let sel: Vec<usize> = (0..s.subcarriers).collect();
    let pilots = CMat::from_element(s.subcarriers, 1, C64::new(1.0, 0.0)).column(0).into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sigma2 = s.noise_power();
    let mut acc = 0.0;
    let draws = 2000;
    for _ in 0..draws {
        let y = received_pilot(&t, 0, &plan[0], &pilots, &sel, &s, sigma2, &mut rng).unwrap();
        acc += y.norm_sqr();
    }
    let col_energy: f64 = plan[0].w.iter().map(|z| z.norm_sqr()).sum();
    let want = sigma2 * col_energy * s.subcarriers as f64;
    let got = acc / draws as f64;
    assert!((got / want - 1.0).abs() < 0.03, "{got} vs {want}");
}

#[test]
fn received_pilot_rejects_mismatched_lengths() {
    let (s, t) = geometric_truth(1);
    let plan = estimation_plan(&s, 1, 1);
    let pilots = zc_pilot(3, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(received_pilot(&t, 0, &plan[0], &pilots, &[0, 1], &s, 0.0, &mut rng).is_err());
}

#[test]
fn zc_examples() {
    assert_eq!(zc_pilot(1, 1).unwrap()[0], C64::new(1.0, 0.0));
    let z3 = zc_pilot(3, 1).unwrap();
    for n in 0..3 {
        let want = unit(-PI * (n * (n + 1)) as f64 / 3.0);
        assert!((z3[n] - want).norm() < 1e-12);
    }
    assert!(zc_pilot(0, 1).is_err());
    assert!(zc_pilot(4, 2).is_err());
}

#[test]
fn zc_has_ideal_periodic_autocorrelation() {
    let n = 31;
    let z = zc_pilot(n, 7).unwrap();
    assert!(z.iter().all(|x| (x.norm() - 1.0).abs() < 1e-12));
    for lag in 1..n {
        let r: C64 = (0..n).map(|i| z[i] * z[(i + lag) % n].conj()).sum();
        assert!(r.norm() < 1e-9, "lag {lag}: {}", r.norm());
    }
}

#[test]
fn generated_truth_meets_target_snr() {
    let (s, t) = geometric_truth(9);
    assert_eq!(t.paths.len(), s.clusters.iter().sum::<usize>() + usize::from(s.los));
    assert!((snr_of(&t, &s) - s.snr_db).abs() < 1e-9);
    t.validate().unwrap();
}

#[test]
fn evolve_with_zero_speed_is_identity() {
    let (mut s, t) = geometric_truth(3);
    s.speed = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(evolve_frame(&t, &s, s.frame_duration, &mut rng).unwrap(), t);
}

#[test]
fn evolve_moves_user_and_keeps_scatterers() {
    let (s, t) = geometric_truth(6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let next = evolve_frame(&t, &s, s.frame_duration, &mut rng).unwrap();
    let (g0, g1) = (t.geometry.as_ref().unwrap(), next.geometry.as_ref().unwrap());
    let moved = ((g1.user[0] - g0.user[0]).powi(2) + (g1.user[1] - g0.user[1]).powi(2)).sqrt();
    assert!((moved - s.speed * s.frame_duration).abs() < 1e-12);
    assert_eq!(g0.scatterers, g1.scatterers);
    for (l, hop) in g1.scatterers.iter().enumerate() {
        // IRS-side geometry of a scattered path depends only on the scatterer.
        if hop.is_some() {
            assert_eq!(t.paths[l].irs_angle, next.paths[l].irs_angle);
            assert_eq!(t.paths[l].irs_distance, next.paths[l].irs_distance);
        }
        assert!(next.delay(l) > 0.0);
    }
    assert!((next.doppler - s.max_doppler()).abs() < 1e-12);
    assert!(next.doppler >= 0.0);
}

#[test]
fn evolve_needs_geometry() {
    let s = Scenario::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(evolve_frame(&FrameTruth::empty(&s), &s, 0.1, &mut rng).is_err());
}

#[test]
fn truth_text_round_trip() {
    let (_, t) = geometric_truth(8);
    let back = truth_from_text(&truth_to_text(&t)).unwrap();
    assert_eq!(back.paths.len(), t.paths.len());
    assert_eq!(back.model, t.model);
    for l in 0..t.paths.len() {
        assert!((back.gain(l) - t.gain(l)).norm() <= 1e-12 * t.gain(l).norm());
        assert!((back.delay(l) - t.delay(l)).abs() < 1e-20);
        assert!((back.paths[l].user_angle - t.paths[l].user_angle).abs() < 1e-14);
        assert!((back.paths[l].irs_distance - t.paths[l].irs_distance).abs() < 1e-10);
    }
    assert!(truth_from_text("nonsense").is_err());
}

#[test]
fn push_effective_round_trips_effective_parameters() {
    let s = Scenario::default();
    let mut t = FrameTruth::empty(&s);
    t.push_effective(C64::new(0.3, 0.1), -0.2, 0.45, 9.0, 15e-9);
    assert!((t.eff_angle(0) - 0.45).abs() < 1e-14);
    assert!((t.eff_distance(0) - 9.0).abs() < 1e-12);
    assert!((t.delay(0) - 15e-9).abs() < 1e-22);
    assert!((t.gain(0) - C64::new(0.3, 0.1)).norm() < 1e-15);
}

proptest! {
    #[test]
    fn steering_vectors_have_unit_modulus(theta in -1.0f64..1.0, r in 1.0f64..200.0, n in 1usize..40) {
        let (l, d) = (lambda(), lambda() / 2.0);
        for a in [far_field_arv(theta, n, l, d), near_field_arv(theta, r, n, l, d).unwrap(), fresnel_arv(theta, r, n, l, d)] {
            prop_assert_eq!(a.len(), n);
            prop_assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn zc_prime_lengths_have_unit_entries(root in 1usize..13) {
        let z = zc_pilot(13, root).unwrap();
        prop_assert!(z.iter().all(|x| (x.norm() - 1.0).abs() < 1e-12));
    }
}
