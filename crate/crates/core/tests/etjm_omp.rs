use proptest::prelude::*;
use xlirs::beamforming::estimation_plan;
use xlirs::channel::{snr_scale, FrameTruth};
use xlirs::config::RunConfig;
use xlirs::grid::{on_grid_truth, GridSet, OffGridState};
use xlirs::model::{AtomGeom, ObservationModel};
use xlirs::omp::*;
use xlirs::pipeline::{simulate_observation, trial_truth, Setup};
use xlirs::tensor::C64;

fn setup() -> Setup {
    Setup::new(&RunConfig::default()).unwrap()
}

/// Noiseless (or noisy) observation of on-grid atoms at the configured SNR.
fn observe(st: &Setup, atoms: &[(usize, usize, usize, C64)], doppler: f64, noisy: bool) -> (FrameTruth, ObservationModel) {
    let s = st.scenario();
    let mut truth = on_grid_truth(s, &st.grids, atoms, doppler).unwrap();
    truth.beta *= snr_scale(&truth, s);
    let plan = estimation_plan(s, s.pilots_ce, 11);
    let model = simulate_observation(st, &truth, &plan, noisy, 5).unwrap();
    (truth, model)
}

fn response(model: &ObservationModel, g: &GridSet, og: &OffGridState, doppler: f64, (u, m, k): Triple) -> Vec<C64> {
    model.response(&AtomGeom::at(g, og, u, m, k), doppler)
}

fn zero_input(st: &Setup, threshold: f64) -> Stage1Input {
    Stage1Input {
        doppler: 0.0,
        offgrid: OffGridState::zeros(&st.grids),
        candidates: None,
        warm_start: Vec::new(),
        max_doppler: st.max_doppler,
        threshold,
    }
}

const TWO: [(usize, usize, usize, C64); 2] = [(1, 25, 2, C64::new(1.0, 2.0)), (3, 21, 5, C64::new(-3.0, 0.5))];

#[test]
fn tracking_set_covers_neighbors() {
    let st = setup();
    let g = &st.grids;
    let set = coarse_index_set_ct(&[(2, 25, 4)], g, 1).unwrap();
    assert_eq!(set.user, vec![1, 2, 3]);
    assert_eq!(set.delay, vec![3, 4, 5]);
    let mut polar = vec![22, 24, 25, 26, 28];
    polar.sort_unstable();
    assert_eq!(set.polar, polar);
    assert!(set.triples().contains(&(2, 25, 4)));
    assert!(coarse_index_set_ct(&[], g, 1).is_err());
}

#[test]
fn estimation_set_contains_true_triple() {
    let st = setup();
    let (_, model) = observe(&st, &TWO[..1], 0.0, false);
    let og = OffGridState::zeros(&st.grids);
    let t = ModeTables::new(&model, &st.grids, &og, 0.0);
    let set = coarse_index_set_ce(&model, &t, &model.data(), &st.grids, 4).unwrap();
    assert!(set.triples().contains(&(1, 25, 2)));
    let big = st.grids.n_bar_r().max(st.grids.n_u()).max(st.grids.n_f());
    let full = coarse_index_set_ce(&model, &t, &model.data(), &st.grids, big).unwrap();
    assert_eq!(full, CoarseIndexSet::full(&st.grids));
}

#[test]
fn matched_filter_selects_single_atom_with_its_energy() {
    let st = setup();
    let g = &st.grids;
    let (_, model) = observe(&st, &TWO[..1], 0.0, false);
    let og = OffGridState::zeros(g);
    let t = ModeTables::new(&model, g, &og, 0.0);
    let r = response(&model, g, &og, 0.0, (1, 25, 2));
    let (tr, score) = joint_mode_select(&model, &t, &r, &CoarseIndexSet::full(g), &[]).unwrap();
    assert_eq!(tr, (1, 25, 2));
    let energy = model.inner(&r, &r).re;
    assert!((score / energy - 1.0).abs() < 1e-9);
}

#[test]
fn zero_residual_ties_to_smallest_index() {
    let st = setup();
    let g = &st.grids;
    let (_, model) = observe(&st, &TWO[..1], 0.0, false);
    let og = OffGridState::zeros(g);
    let t = ModeTables::new(&model, g, &og, 0.0);
    let zero = vec![C64::new(0.0, 0.0); model.flat_len()];
    let set = CoarseIndexSet::full(g);
    assert!(score_candidates(&model, &t, &zero, &set).iter().all(|(_, s)| *s == 0.0));
    let (tr, _) = joint_mode_select(&model, &t, &zero, &set, &[]).unwrap();
    assert_eq!(tr, (0, 0, 0));
}

#[test]
fn scores_match_brute_force_objective() {
    let st = setup();
    let g = &st.grids;
    let (_, model) = observe(&st, &TWO, 0.0, true);
    let og = OffGridState::zeros(g);
    let t = ModeTables::new(&model, g, &og, 0.0);
    let set = CoarseIndexSet::full(g);
    let data = model.data();
    let scores = score_candidates(&model, &t, &data, &set);
    let mut best = ((0, 0, 0), f64::NEG_INFINITY);
    for &(tr, sc) in &scores {
        let a = response(&model, g, &og, 0.0, tr);
        let want = model.inner(&a, &data).norm_sqr() / model.inner(&a, &a).re;
        assert!((sc - want).abs() <= 1e-9 * want.max(1e-300), "{tr:?}");
        if want > best.1 {
            best = (tr, want);
        }
    }
    assert_eq!(joint_mode_select(&model, &t, &data, &set, &[]).unwrap().0, best.0);
}

#[test]
fn single_atom_gain_round_trip() {
    let st = setup();
    let g = &st.grids;
    let (truth, model) = observe(&st, &TWO[..1], 0.0, false);
    let og = OffGridState::zeros(g);
    let z = ls_gain_update(&model, g, &og, 0.0, &[(1, 25, 2)]).unwrap();
    assert!((z[0] - truth.gain(0)).norm() < 1e-8 * truth.gain(0).norm());
}

#[test]
fn ls_residual_is_orthogonal_to_selection() {
    let st = setup();
    let g = &st.grids;
    let (_, model) = observe(&st, &TWO, 0.0, true);
    let og = OffGridState::zeros(g);
    let sel = [(1, 25, 2), (3, 21, 5), (0, 4, 1)];
    let z = ls_gain_update(&model, g, &og, 0.0, &sel).unwrap();
    let resp: Vec<_> = sel.iter().map(|&tr| response(&model, g, &og, 0.0, tr)).collect();
    let r = model.residual(&resp, &z, &model.data());
    let rn = model.inner(&r, &r).re.sqrt();
    for a in &resp {
        let cos = model.inner(a, &r).norm() / (rn * model.inner(a, a).re.sqrt());
        assert!(cos < 1e-8, "{cos}");
    }
}

#[test]
fn orthogonal_and_zero_targets() {
    let st = setup();
    let (_, model) = observe(&st, &TWO[..1], 0.0, false);
    let n = model.flat_len();
    let unit = |i: usize| (0..n).map(|j| C64::new(if i == j { 1.0 } else { 0.0 }, 0.0)).collect::<Vec<_>>();
    let resp = vec![unit(0), unit(n - 1)];
    let y: Vec<C64> = (0..n).map(|j| C64::new(j as f64, 1.0)).collect();
    let z = model.ls_gains(&resp, &y).unwrap();
    assert!((z[0] - y[0]).norm() < 1e-12 && (z[1] - y[n - 1]).norm() < 1e-10);
    let zero = vec![C64::new(0.0, 0.0); n];
    assert!(model.ls_gains(&resp, &zero).unwrap().iter().all(|g| g.norm() < 1e-300));
    assert!(model.ls_gains(&[unit(0), unit(0)], &y).is_err());
}

#[test]
fn residual_update_examples() {
    let st = setup();
    let g = &st.grids;
    let (truth, model) = observe(&st, &TWO[..1], 0.0, false);
    let og = OffGridState::zeros(g);
    let a = response(&model, g, &og, 0.0, (1, 25, 2));
    let mut r = model.data();
    residual_update(&mut r, &a, C64::new(0.0, 0.0));
    assert_eq!(r, model.data());
    residual_update(&mut r, &a, truth.gain(0));
    assert!(model.energy(&r) < 1e-16 * model.data_energy());
}

#[test]
fn refinement_is_stationary_at_truth() {
    let st = setup();
    let g = &st.grids;
    let (truth, model) = observe(&st, &TWO[..1], 0.0, false);
    let mut rs = RefineState { doppler: 0.0, offgrid: OffGridState::zeros(g) };
    let tr = [(1, 25, 2)];
    let mut gains = vec![truth.gain(0)];
    let coords = active_coords(&tr, false, true);
    for &c in &coords {
        let d = ml_gradient(&model, g, &rs, &tr, &gains, c) * coord_box(c, g, st.max_doppler).2;
        assert!(d.abs() < 1e-10 * model.data_energy(), "{c:?}: {d}");
    }
    let before = rs.clone();
    ml_refine(&model, g, &mut rs, &tr, &mut gains, &coords, st.max_doppler, &st.cfg.stage1).unwrap();
    assert_eq!(rs, before);
}

#[test]
fn refinement_recovers_user_offset() {
    let st = setup();
    let g = &st.grids;
    let s = st.scenario();
    let mut truth = on_grid_truth(s, g, &TWO[..1], 0.0).unwrap();
    let offset = 0.3 * g.user_spacing();
    truth.paths[0].user_angle += offset;
    truth.beta *= snr_scale(&truth, s);
    let model = simulate_observation(&st, &truth, &estimation_plan(s, s.pilots_ce, 11), false, 5).unwrap();
    let tr = [(1, 25, 2)];
    let mut rs = RefineState { doppler: 0.0, offgrid: OffGridState::zeros(g) };
    let mut gains = ls_gain_update(&model, g, &rs.offgrid, 0.0, &tr).unwrap();
    let cfg = Stage1Config { max_sweeps: 200, tol: 1e-12, ..st.cfg.stage1.clone() };
    let rep = ml_refine(&model, g, &mut rs, &tr, &mut gains, &[Coord::User(1)], st.max_doppler, &cfg).unwrap();
    assert!((rs.offgrid.user[1] / offset - 1.0).abs() < 0.05, "{} vs {offset}", rs.offgrid.user[1]);
    assert!(rep.objective.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let st = setup();
    let g = &st.grids;
    let (_, model) = observe(&st, &TWO, 400.0, true);
    let tr = [(1, 25, 2), (3, 21, 5)];
    let mut rs = RefineState { doppler: 230.0, offgrid: OffGridState::zeros(g) };
    rs.offgrid.user[1] = 0.1 * g.user_spacing();
    rs.offgrid.polar_angle[21] = -0.2 * g.polar_spacing();
    rs.offgrid.polar_distance[25] = 0.3 * g.ring_half_gap(25);
    rs.offgrid.delay[5] = 0.25 * g.delay_spacing();
    let gains = vec![C64::new(1.0, 0.5), C64::new(-0.7, 0.2)];
    let gains: Vec<C64> = gains.iter().zip(&ls_gain_update(&model, g, &rs.offgrid, rs.doppler, &tr).unwrap()).map(|(a, b)| a * 0.3 + b).collect();
    for c in active_coords(&tr, true, true) {
        let (_, _, scale) = coord_box(c, g, st.max_doppler);
        let h = 1e-5 * scale;
        let x0 = rs.get(c);
        let mut p = rs.clone();
        p.set(c, x0 + h);
        let jp = ml_objective(&model, g, &p, &tr, &gains);
        p.set(c, x0 - h);
        let jm = ml_objective(&model, g, &p, &tr, &gains);
        let fd = (jp - jm) / (2.0 * h);
        let an = ml_gradient(&model, g, &rs, &tr, &gains, c);
        assert!((an - fd).abs() <= 1e-5 * an.abs().max(fd.abs()).max(1e-30), "{c:?}: {an} vs {fd}");
    }
}

#[test]
fn noiseless_two_paths_recovered_in_two_iterations() {
    let st = setup();
    let (_, model) = observe(&st, &TWO, 0.0, false);
    let mut cfg = st.cfg.stage1.plain();
    cfg.atom_budget = Some(6);
    let c = run_stage1(&model, &st.grids, &zero_input(&st, 1e-12), Selector::Joint, &cfg).unwrap();
    let mut found = c.triples.clone();
    found.sort_unstable();
    assert_eq!(found, vec![(1, 25, 2), (3, 21, 5)]);
    assert_eq!(c.stop, StopReason::Threshold);
    assert_eq!(c.history.len(), 3);
    assert!(c.residual_power < 1e-12);
}

#[test]
fn pure_noise_stops_at_budget() {
    let st = setup();
    let s = st.scenario();
    let model = simulate_observation(&st, &FrameTruth::empty(s), &estimation_plan(s, 6, 2), true, 9).unwrap();
    let mut cfg = st.cfg.stage1.plain();
    cfg.atom_budget = Some(4);
    let c = run_stage1(&model, &st.grids, &zero_input(&st, 1e-6), Selector::Joint, &cfg).unwrap();
    assert_eq!(c.stop, StopReason::Budget);
    assert_eq!(c.triples.len(), 4);
}

#[test]
fn desk_run_has_monotone_history_and_distinct_atoms() {
    let st = setup();
    let s = st.scenario();
    for seed in [1, 2] {
        let truth = trial_truth(&st, seed).unwrap();
        let model = simulate_observation(&st, &truth, &estimation_plan(s, s.pilots_ce, seed), true, seed).unwrap();
        for selector in [Selector::Joint, Selector::Sequential] {
            let c = run_stage1(&model, &st.grids, &zero_input(&st, st.threshold), selector, &st.cfg.stage1).unwrap();
            assert!(c.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{:?}", c.history);
            let mut t = c.triples.clone();
            t.sort_unstable();
            t.dedup();
            assert_eq!(t.len(), c.triples.len());
            assert!(c.magnitudes().iter().all(|m| *m >= 0.0));
            assert!(c.phases().iter().all(|p| (0.0..std::f64::consts::TAU).contains(p)));
            assert!((0.0..=st.max_doppler).contains(&c.doppler));
        }
    }
}

#[test]
fn history_table_format() {
    let t = residual_history_table(&[1.0, 0.25]);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0 1.0"));
    assert!(lines[2].starts_with("1 2.5"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn scores_ignore_unit_modulus_scaling(theta in 0.0f64..6.283) {
        let st = setup();
        let g = &st.grids;
        let (_, model) = observe(&st, &TWO, 0.0, true);
        let og = OffGridState::zeros(g);
        let t = ModeTables::new(&model, g, &og, 0.0);
        let set = coarse_index_set_ct(&[(1, 25, 2)], g, 1).unwrap();
        let data = model.data();
        let rot = C64::from_polar(1.0, theta);
        let turned: Vec<C64> = data.iter().map(|z| z * rot).collect();
        for ((_, a), (_, b)) in score_candidates(&model, &t, &data, &set).iter().zip(score_candidates(&model, &t, &turned, &set)) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
        }
    }
}

