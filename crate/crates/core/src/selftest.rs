//! Fast consistency checks behind the `selftest` subcommand. Each check is
//! self-contained and finishes well under a second.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beamforming::estimation_plan;
use crate::channel::{rayleigh_distance, snr_scale, Scenario, SPEED_OF_LIGHT};
use crate::config::RunConfig;
use crate::grid::{assign_to_grid, build_grids, default_delay_points, on_grid_truth, GridConfig, OffGridState};
use crate::omp::{run_stage1, Selector, Stage1Input};
use crate::pipeline::{simulate_observation, Setup};
use crate::spvbi::simplex_project;
use crate::support_mp::{chain_sum_product, from_on, normalize};
use crate::tensor::{khatri_rao, kron, max_abs_diff, CMat, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> CMat {
    CMat::from_fn(r, c, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn rayleigh() -> Check {
    let lambda = SPEED_OF_LIGHT / 28e9;
    let d = rayleigh_distance(128, lambda, lambda / 2.0).unwrap_or(f64::NAN);
    check("rayleigh distance", (d - 86.2).abs() <= 0.5, format!("{d:.2} m"))
}

fn grid_counts() -> Check {
    let s = Scenario::full();
    let cfg = GridConfig { delay_points: None, ..GridConfig::default() };
    match build_grids(&s, &cfg) {
        Ok(g) => {
            let nf = default_delay_points(128);
            check("grid counts", g.n_bar_r() == 384 && nf == 24, format!("polar {} delay {nf}", g.n_bar_r()))
        }
        Err(e) => check("grid counts", false, e.to_string()),
    }
}

fn mixed_product() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_mat(&mut rng, 3, 4), random_mat(&mut rng, 4, 5));
    let (c, d) = (random_mat(&mut rng, 2, 3), random_mat(&mut rng, 3, 5));
    let lhs = khatri_rao(&(&a * &b), &(&c * &d));
    let rhs = khatri_rao(&b, &d).map(|bd| kron(&a, &c) * bd);
    let err = match (lhs, rhs) {
        (Ok(l), Ok(r)) => max_abs_diff(l.as_slice(), r.as_slice()),
        _ => f64::INFINITY,
    };
    check("mixed-product identity", err < 1e-12, format!("max error {err:.2e}"))
}

fn chain_enumeration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 6;
    let priors: Vec<[f64; 2]> = (0..n).map(|_| from_on(rng.random_range(0.05..0.95))).collect();
    let edge = [[0.8, 0.2], [0.3, 0.7]];
    let init = from_on(0.4);
    let bp = chain_sum_product(&priors, init, &vec![edge; n - 1]);
    let mut marg = vec![[0.0f64; 2]; n];
    for mask in 0..1usize << n {
        let s: Vec<usize> = (0..n).map(|i| (mask >> i) & 1).collect();
        let mut p = init[s[0]];
        for i in 0..n {
            p *= priors[i][s[i]];
            if i > 0 {
                p *= edge[s[i - 1]][s[i]];
            }
        }
        for i in 0..n {
            marg[i][s[i]] += p;
        }
    }
    let err = marg
        .iter()
        .zip(&bp.beliefs)
        .map(|(m, b)| {
            let m = normalize(*m);
            (m[0] - b[0]).abs().max((m[1] - b[1]).abs())
        })
        .fold(0.0, f64::max);
    check("chain marginals", err < 1e-12, format!("max error {err:.2e}"))
}

fn simplex() -> Check {
    let p = simplex_project(&[10.0, 0.0], 0.01).unwrap_or_default();
    let ok = p.len() == 2 && (p[0] - 0.99).abs() < 1e-12 && (p[1] - 0.01).abs() < 1e-12;
    let q = simplex_project(&p, 0.01).unwrap_or_default();
    check("simplex projection", ok && q == p, format!("{p:?}"))
}

fn on_grid_recovery() -> Check {
    let cfg = RunConfig::default();
    let Ok(setup) = Setup::new(&cfg) else { return check("on-grid recovery", false, "setup failed".into()) };
    let s = setup.scenario();
    let g = &setup.grids;
    let atoms = [(1, 25, 2, C64::new(1.0, 2.0)), (3, 21, 5, C64::new(-3.0, 0.5))];
    let run = || -> crate::Result<f64> {
        let mut truth = on_grid_truth(s, g, &atoms, 0.0)?;
        truth.beta *= snr_scale(&truth, s);
        let plan = estimation_plan(s, 4, 3);
        let model = simulate_observation(&setup, &truth, &plan, false, 4)?;
        let input = Stage1Input {
            doppler: 0.0,
            offgrid: OffGridState::zeros(g),
            candidates: None,
            warm_start: Vec::new(),
            max_doppler: setup.max_doppler,
            threshold: 1e-20,
        };
        let mut c1 = cfg.stage1.plain();
        c1.atom_budget = Some(2);
        let c = run_stage1(&model, g, &input, Selector::Joint, &c1)?;
        let mut found = c.triples.clone();
        found.sort();
        if found != vec![(1, 25, 2), (3, 21, 5)] {
            return Ok(f64::INFINITY);
        }
        let truth_triples = assign_to_grid(&truth, g)?.triples;
        let mut err: f64 = 0.0;
        for (t, z) in c.triples.iter().zip(&c.gains) {
            let l = truth_triples.iter().position(|x| x == t).expect("selected atom is a path");
            let want = truth.gain(l);
            err = err.max((z - want).norm() / want.norm());
        }
        Ok(err)
    };
    match run() {
        Ok(err) => check("on-grid recovery", err < 1e-8, format!("relative gain error {err:.2e}")),
        Err(e) => check("on-grid recovery", false, e.to_string()),
    }
}

/// Runs every check in order.
pub fn run_all() -> Vec<(Check, f64)> {
    let checks: [fn() -> Check; 6] = [rayleigh, grid_counts, mixed_product, chain_enumeration, simplex, on_grid_recovery];
    checks
        .iter()
        .map(|f| {
            let t0 = Instant::now();
            let c = f();
            (c, t0.elapsed().as_secs_f64())
        })
        .collect()
}
