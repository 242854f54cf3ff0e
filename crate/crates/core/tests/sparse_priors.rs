use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xlirs::channel::{Scenario, SPEED_OF_LIGHT};
use xlirs::grid::{build_grids, GridConfig, GridSet, OffGridState};
use xlirs::priors::*;

fn desk_grid() -> GridSet {
    build_grids(&Scenario::default(), &GridConfig::default()).unwrap()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// `K₀(x) = ∫₀^∞ exp(-x cosh t) dt`.
fn k0_quadrature(x: f64) -> f64 {
    simpson(|t| (-x * t.cosh()).exp(), 0.0, 12.0, 20_000)
}

fn all_configs(n: usize) -> impl Iterator<Item = Vec<i8>> {
    (0..1usize << n).map(move |mask| (0..n).map(|i| if (mask >> i) & 1 == 1 { 1 } else { -1 }).collect())
}

#[test]
fn bessel_k0_matches_integral_representation() {
    for x in [0.01, 0.3, 1.0, 1.9, 2.0, 2.1, 4.0, 10.0] {
        let want = k0_quadrature(x);
        assert!((bessel_k0(x) / want - 1.0).abs() < 1e-7, "x {x}: {} vs {want}", bessel_k0(x));
    }
}

#[test]
fn cdg_pdf_integrates_to_one() {
    for (sh, sg) in [(1.0, 1.0), (0.5, 2.0), (3.0, 0.1)] {
        let total = simpson(|x| cdg_amplitude_pdf(x, sh, sg).unwrap(), 0.0, 40.0 * sh * sg, 400_000);
        assert!((total - 1.0).abs() < 1e-6, "({sh}, {sg}): {total}");
    }
}

#[test]
fn cdg_pdf_limits_and_errors() {
    assert_eq!(cdg_amplitude_pdf(0.0, 1.0, 1.0).unwrap(), 0.0);
    assert!(cdg_amplitude_pdf(1e-9, 1.0, 1.0).unwrap() < 1e-7);
    assert!(cdg_amplitude_pdf(-1.0, 1.0, 1.0).is_err());
    assert!(cdg_amplitude_pdf(1.0, 0.0, 1.0).is_err());
}

#[test]
fn cdg_matches_product_of_gaussians() {
    // Sample |u·v| with an in-test generator and compare with the CDF built by
    // integrating the density.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cn = |rng: &mut ChaCha8Rng| {
        let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        (a * a + b * b).sqrt() / 2f64.sqrt()
    };
    let n = 100_000;
    let mut xs: Vec<f64> = (0..n).map(|_| cn(&mut rng) * cn(&mut rng)).collect();
    xs.sort_by(f64::total_cmp);
    let (step, top) = (1e-4, 12.0);
    let cells = (top / step) as usize;
    let mut cdf = vec![0.0; cells + 1];
    for i in 1..=cells {
        let (a, b) = ((i - 1) as f64 * step, i as f64 * step);
        let mid = cdg_amplitude_pdf((a + b) / 2.0, 1.0, 1.0).unwrap();
        let ends = cdg_amplitude_pdf(a, 1.0, 1.0).unwrap() + cdg_amplitude_pdf(b, 1.0, 1.0).unwrap();
        cdf[i] = cdf[i - 1] + step * (4.0 * mid + ends) / 6.0;
    }
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf[((x / step) as usize).min(cells)];
            (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS {ks}");
}

#[test]
fn cdg_sampler_matches_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let mean = (0..n).map(|_| cdg_sample(&mut rng, 1.0, 1.0)).sum::<f64>() / n as f64;
    // E|u||v| = (√π/2)² for unit circular Gaussians.
    assert!((mean - PI / 4.0).abs() < 0.01, "{mean}");
}

#[test]
fn cdg_log_gradient_matches_finite_difference() {
    for x in [0.05, 0.4, 1.3, 5.0] {
        let h = 1e-6 * x;
        let fd = (cdg_log_pdf(x + h, 0.7) - cdg_log_pdf(x - h, 0.7)) / (2.0 * h);
        assert!((cdg_log_pdf_grad(x, 0.7) - fd).abs() < 1e-5 * (1.0 + fd.abs()));
    }
}

#[test]
fn amplitude_phase_prior_examples() {
    let on = amplitude_phase_log_prior(0.8, 0.1, true, 1.0);
    assert_eq!(on, amplitude_phase_log_prior(0.8, 5.9, true, 1.0));
    let direct = cdg_amplitude_pdf(0.8, 1.0, 1.0).unwrap().ln() - (2.0 * PI).ln();
    assert!((on - direct).abs() < 1e-12);
    assert!((amplitude_phase_log_prior(0.0, 0.0, false, 1.0) + (2.0 * PI).ln()).abs() < 1e-15);
}

#[test]
fn support_conditional_examples() {
    assert_eq!(support_conditional(true, [1, 1, 1], 0.8), 0.8);
    assert_eq!(support_conditional(true, [1, -1, 1], 0.8), 0.0);
    for parents in all_configs(3) {
        let p = [parents[0], parents[1], parents[2]];
        let total = support_conditional(true, p, 0.8) + support_conditional(false, p, 0.8);
        assert!((total - 1.0).abs() < 1e-15);
    }
}

#[test]
fn mrf_parameter_examples() {
    let g = desk_grid();
    let (rings, a) = (g.rings, g.angle_count / 2);
    // The desk angle grid is symmetric, so no point sits exactly at zero;
    // compare against the formula directly.
    let m1 = g.polar_index(a, 0);
    let m3 = g.polar_index(a, 2);
    let (b1, _) = mrf_parameters(m1, m1, &g, 0.4, 0.3);
    let (b3, _) = mrf_parameters(m3, m3, &g, 0.4, 0.3);
    assert!((b3 / b1 - 1.0 / 3.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (m, m2) = (rng.random_range(0..g.n_bar_r()), rng.random_range(0..g.n_bar_r()));
        let (t, t2) = (g.polar_angles[m], g.polar_angles[m2]);
        let (q, q2) = ((m % rings + 1) as f64, (m2 % rings + 1) as f64);
        let (b, i) = mrf_parameters(m, m2, &g, 0.4, 0.3);
        assert!((b - 0.4 * (1.0 - t * t) / q).abs() < 1e-15);
        assert!((i - 0.3 * (t * t * q + t2 * t2 * q2) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn ising_zero_parameters_vanish() {
    let g = desk_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s: Vec<i8> = (0..g.n_bar_r()).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
    assert_eq!(ising_log_prior(&s, &g, 0.0, 0.0), 0.0);
}

#[test]
fn ising_single_flip_local_field() {
    // Activating site m in an all-inactive field changes the value by
    // -2η̄_m - 2Σ η̌_{m,m'}: the bias enters with a minus sign.
    let g = desk_grid();
    let base = vec![-1i8; g.n_bar_r()];
    for m in [0, 7, 25, g.n_bar_r() - 1] {
        let mut s = base.clone();
        s[m] = 1;
        let delta = ising_log_prior(&s, &g, 0.4, 0.3) - ising_log_prior(&base, &g, 0.4, 0.3);
        let (bias, _) = mrf_parameters(m, m, &g, 0.4, 0.3);
        let inter: f64 = lattice_neighbors(m, g.angle_count, g.rings).iter().map(|&n| mrf_parameters(m, n, &g, 0.4, 0.3).1).sum();
        assert!((delta - (-2.0 * bias - 2.0 * inter)).abs() < 1e-12, "site {m}");
    }
}

#[test]
fn ising_two_site_alignment() {
    // Two angles with a single ring form a 1×2 lattice.
    let s = Scenario { n_r: 2, ..Scenario::default() };
    let g = build_grids(&s, &GridConfig { rings: 1, ..GridConfig::default() }).unwrap();
    assert_eq!(g.n_bar_r(), 2);
    let (_, c) = mrf_parameters(0, 1, &g, 0.0, 0.3);
    let aligned = ising_log_prior(&[1, 1], &g, 0.0, 0.3);
    let anti = ising_log_prior(&[1, -1], &g, 0.0, 0.3);
    assert!((aligned - anti - 2.0 * c).abs() < 1e-15);
}

#[test]
fn ising_gap_is_monotone_in_bias() {
    let g = desk_grid();
    let base = vec![-1i8; g.n_bar_r()];
    let mut on = base.clone();
    on[10] = 1;
    let gap = |eta: f64| ising_log_prior(&on, &g, eta, 0.3) - ising_log_prior(&base, &g, eta, 0.3);
    let gaps: Vec<f64> = [0.0, 0.2, 0.4, 0.8].iter().map(|&e| gap(e)).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn ising_normalizes_on_small_lattice() {
    let s = Scenario { n_r: 3, ..Scenario::default() };
    let g = build_grids(&s, &GridConfig { rings: 3, ..GridConfig::default() }).unwrap();
    let weights: Vec<f64> = all_configs(9).map(|c| ising_log_prior(&c, &g, 0.4, 0.3).exp()).collect();
    let z: f64 = weights.iter().sum();
    let total: f64 = weights.iter().map(|w| w / z).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(weights.iter().all(|w| w.is_finite() && *w > 0.0));
}

#[test]
fn markov_chain_examples() {
    assert!((steady_state(0.1, 0.4) - 0.2).abs() < 1e-15);
    assert!((markov_chain_log_prior(&[1], 0.1, 0.4).unwrap() - 0.2f64.ln()).abs() < 1e-15);
    assert!((markov_chain_log_prior(&[-1], 0.1, 0.4).unwrap() - 0.8f64.ln()).abs() < 1e-15);
    assert!(markov_chain_log_prior(&[1], 0.0, 0.4).is_err());
    for n in 1..=10 {
        let total: f64 = all_configs(n).map(|c| markov_chain_log_prior(&c, 0.1, 0.4).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "length {n}");
    }
}

#[test]
fn offgrid_prior_examples() {
    let g = desk_grid();
    let var = OffGridVariances { user: 0.01, polar_angle: 0.02, polar_distance: 4.0, delay: 1e-18 };
    let active = ActiveSets { user: vec![1], polar: vec![5], delay: vec![2] };
    let mut og = OffGridState::zeros(&g);
    let zero = offgrid_log_prior(&og, &active, &var);
    let norm = |v: f64| -0.5 * (2.0 * PI * v).ln();
    assert!((zero - (norm(0.01) + norm(0.02) + norm(4.0) + norm(1e-18))).abs() < 1e-9);
    og.user[1] = 0.1;
    assert!((zero - offgrid_log_prior(&og, &active, &var) - 0.5).abs() < 1e-12);
    // Entries outside the active sets do not contribute.
    og.user[0] = 3.0;
    assert!((zero - offgrid_log_prior(&og, &active, &var) - 0.5).abs() < 1e-12);
}

#[test]
fn offgrid_prior_term_by_term() {
    let g = desk_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let var = OffGridVariances { user: 0.03, polar_angle: 0.05, polar_distance: 2.0, delay: 3e-19 };
    let mut og = OffGridState::zeros(&g);
    og.user.iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
    og.polar_angle.iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
    og.polar_distance.iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
    og.delay.iter_mut().for_each(|x| *x = rng.random_range(-2e-9..2e-9));
    let active = ActiveSets { user: vec![0, 2], polar: vec![3, 17, 40], delay: vec![1, 6] };
    let term = |x: f64, v: f64| -0.5 * (2.0 * PI * v).ln() - x * x / (2.0 * v);
    let mut want = 0.0;
    for &u in &active.user {
        want += term(og.user[u], var.user);
    }
    for &m in &active.polar {
        want += term(og.polar_angle[m], var.polar_angle) + term(og.polar_distance[m], var.polar_distance);
    }
    for &k in &active.delay {
        want += term(og.delay[k], var.delay);
    }
    assert!((offgrid_log_prior(&og, &active, &var) - want).abs() < 1e-9 * want.abs());
}

#[test]
fn gauss_markov_limits() {
    assert_eq!(gauss_markov_step(2.5, 0.0, 1.0, 9.0), 2.5);
    assert_eq!(gauss_markov_step(2.5, 1.0, 1.0, 0.3), 1.3);
}

#[test]
fn gauss_markov_stationary_moments() {
    let (chi, mu, zeta) = (0.3, 2.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut x = mu;
    let n = 100_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        x = gauss_markov_sample(&mut rng, x, chi, mu, zeta);
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / n as f64;
    let var = s2 / n as f64 - mean * mean;
    let want = chi * chi * zeta / (1.0 - (1.0 - chi) * (1.0 - chi));
    assert!((mean / mu - 1.0).abs() < 0.01, "{mean}");
    assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
}

fn sample_posterior() -> FramePosterior {
    FramePosterior {
        atoms: vec![
            AtomPosterior { index: 4, magnitude: Gaussian { mean: 2.0, var: 0.1 }, phase: Gaussian { mean: 3.1, var: 0.05 }, support_on: 1.0 },
            AtomPosterior { index: 9, magnitude: Gaussian { mean: 0.5, var: 0.02 }, phase: Gaussian { mean: -3.0, var: 0.2 }, support_on: 0.3 },
        ],
        doppler: Gaussian { mean: 300.0, var: 25.0 },
        user: vec![(1, Gaussian { mean: 0.01, var: 1e-4 })],
        polar_angle: vec![(5, Gaussian { mean: -0.02, var: 1e-4 })],
        polar_distance: vec![(5, Gaussian { mean: 0.7, var: 0.1 })],
        delay: vec![(2, Gaussian { mean: 1e-10, var: 1e-21 })],
    }
}

#[test]
fn propagation_without_correlation_keeps_moments() {
    let g = desk_grid();
    let tp = TemporalPriorParams { chi_nu: 0.0, chi_omega: 0.0, chi_f: 0.0, ..TemporalPriorParams::default() };
    let prev = sample_posterior();
    let prior = propagate_posterior_to_prior(Some(&prev), &tp, &g).unwrap();
    for (a, (i, mag, ph, _)) in prev.atoms.iter().zip(&prior.atoms) {
        assert_eq!(a.index, *i);
        assert_eq!(a.magnitude, *mag);
        assert!((wrap_diff(a.phase.mean - ph.mean)).abs() < 1e-12);
        assert_eq!(a.phase.var, ph.var);
    }
    assert_eq!(prior.doppler, prev.doppler);
    assert!(propagate_posterior_to_prior(None, &tp, &g).is_err());
}

#[test]
fn support_propagation_example() {
    assert!((propagate_support(1.0, 0.0, 0.01, 0.05) - 0.95).abs() < 1e-15);
}

#[test]
fn propagation_matches_formula() {
    let g = desk_grid();
    let tp = TemporalPriorParams { chi_nu: 0.2, mu_nu: Some(1.5), ..TemporalPriorParams::default() };
    let prev = sample_posterior();
    let prior = propagate_posterior_to_prior(Some(&prev), &tp, &g).unwrap();
    for (a, (_, mag, ph, on)) in prev.atoms.iter().zip(&prior.atoms) {
        let zeta = (tp.nu_drift_rel * a.magnitude.mean / tp.chi_nu).powi(2);
        assert!((mag.mean - (0.8 * a.magnitude.mean + 0.2 * 1.5)).abs() < 1e-12);
        assert!((mag.var - (0.64 * a.magnitude.var + 0.04 * zeta)).abs() < 1e-12);
        let want_on = a.support_on * (1.0 - tp.support_off) + tp.support_on * (1.0 - a.support_on);
        assert!((on - want_on).abs() < 1e-15);
        // Phase stays on the canonical circle even for means near ±π.
        assert!((0.0..2.0 * PI).contains(&ph.mean));
    }
    let (_, walked) = prior.user[0];
    let half = g.user_spacing() / 2.0;
    assert!((walked.var - (1e-4 + (half * tp.offgrid_drift_frac).powi(2))).abs() < 1e-15);
    assert_eq!(walked.mean, 0.01);
}

#[test]
fn dfo_prior_examples() {
    let lambda = SPEED_OF_LIGHT / 28e9;
    let sp = SpatialPriorParams { max_speed: 5.0, ..SpatialPriorParams::default() };
    let fmax = sp.max_doppler(lambda);
    assert!((fmax - 466.7).abs() < 0.5, "{fmax}");
    let tp = TemporalPriorParams::default();
    let ce = dfo_prior(Phase::Estimation, fmax, None, &tp).unwrap();
    assert!((ce.log_pdf(10.0) + fmax.ln()).abs() < 1e-12);
    assert_eq!(ce.log_pdf(10.0), ce.log_pdf(400.0));
    assert_eq!(ce.log_pdf(-1.0), f64::NEG_INFINITY);
    let tp0 = TemporalPriorParams { chi_f: 0.0, ..tp.clone() };
    let prev = Gaussian { mean: 321.0, var: 4.0 };
    match dfo_prior(Phase::Tracking, fmax, Some(prev), &tp0).unwrap() {
        DfoPrior::Gaussian(g) => assert_eq!(g.mean, 321.0),
        other => panic!("unexpected {other:?}"),
    }
    assert!(dfo_prior(Phase::Estimation, 0.0, None, &tp).is_err());
    assert!(dfo_prior(Phase::Tracking, fmax, None, &tp).is_err());
}

proptest! {
    #[test]
    fn phase_wrapping_is_canonical(x in -100.0f64..100.0) {
        let w = wrap_phase(x);
        prop_assert!((0.0..2.0 * PI).contains(&w));
        prop_assert!(((x - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((x - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        let d = wrap_diff(x);
        prop_assert!(d > -PI - 1e-12 && d <= PI + 1e-12);
    }

    #[test]
    fn chain_log_prior_is_finite_and_negative(bits in proptest::collection::vec(any::<bool>(), 1..12), on in 0.01f64..0.99, off in 0.01f64..0.99) {
        let s: Vec<i8> = bits.iter().map(|&b| if b { 1 } else { -1 }).collect();
        let lp = markov_chain_log_prior(&s, on, off).unwrap();
        prop_assert!(lp.is_finite() && lp <= 0.0);
    }

    #[test]
    fn gauss_markov_conditional_mean(x in -5.0f64..5.0, chi in 0.0f64..1.0, mu in -3.0f64..3.0) {
        let m = gauss_markov_step(x, chi, mu, 0.0);
        prop_assert!((m - ((1.0 - chi) * x + chi * mu)).abs() < 1e-12);
    }
}
