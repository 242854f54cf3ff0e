//! Frame-level orchestration: beam plans, observation synthesis, the two
//! estimation stages, reconstruction, metrics, baselines and sweeps.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::beamforming::{bs_combiner, estimation_plan, random_phase_irs, random_precoder, tracking_irs_beams, user_precoder};
use crate::channel::{bs_irs_angles, cascaded_tensor, evolve_frame, generate_truth, received_pilot, zc_pilot, FrameTruth, PilotBeams, Scenario};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{assign_to_grid, build_grids, comb_selection, GridSet, OffGridState};
use crate::model::ObservationModel;
use crate::omp::{active_coords, coarse_index_set_ct, ml_refine, run_stage1, RefineState, CoarseEstimate, Selector, Stage1Config, Stage1Input, Triple};
use crate::priors::{propagate_posterior_to_prior, FramePosterior};
use crate::spvbi::{
    frame_posterior, init_particles, posterior_estimate, run_module_a, EstimationPriors, JointModel, ModulePriors, PosteriorEstimate,
    TraceRow,
};
use crate::support_mp::{turbo_iterate, SupportMessages};
use crate::tensor::{CVec, ComplexTensor3, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    Tscet,
    Omp,
    TompSs,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Tscet, Algo::Omp, Algo::TompSs];
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Tscet => "tscet",
            Algo::Omp => "omp",
            Algo::TompSs => "tompss",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tscet" => Ok(Algo::Tscet),
            "omp" => Ok(Algo::Omp),
            "tompss" => Ok(Algo::TompSs),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Quantities shared by every frame of a run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cfg: RunConfig,
    pub grids: GridSet,
    pub selection: Vec<usize>,
    pub symbols: CVec,
    pub max_doppler: f64,
    /// Relative Stage I stopping threshold.
    pub threshold: f64,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.scenario;
        let grids = build_grids(s, &cfg.grids)?;
        let selection = comb_selection(s, &cfg.grids)?;
        let symbols = zc_pilot(selection.len(), 1)?;
        let max_doppler = cfg.priors.spatial.max_doppler(s.wavelength());
        let threshold = cfg.stage1.threshold(observation_snr_db(s));
        Ok(Self { cfg: cfg.clone(), grids, selection, symbols, max_doppler, threshold })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.cfg.scenario
    }

    /// Largest delay representable on the delay grid.
    pub fn max_delay(&self) -> f64 {
        *self.grids.delays.last().expect("non-empty delay grid")
    }
}

/// SNR after the BS combining gain, the level the residual threshold refers to.
pub fn observation_snr_db(s: &Scenario) -> f64 {
    s.snr_db + 10.0 * (s.n_b as f64).log10()
}

/// `splitmix64`-style mixing of a base seed with stream indices.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Synthesizes one observation per pilot of `plan`; `noisy = false` drops the noise.
pub fn simulate_observation(setup: &Setup, truth: &FrameTruth, plan: &[PilotBeams], noisy: bool, seed: u64) -> Result<ObservationModel> {
    let s = setup.scenario();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma2 = s.noise_power();
    let noise = if noisy { sigma2 } else { 0.0 };
    let ys = plan
        .iter()
        .enumerate()
        .map(|(p, b)| received_pilot(truth, p, b, &setup.symbols, &setup.selection, s, noise, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    ObservationModel::new(&ys, plan, &setup.symbols, &setup.selection, s, sigma2)
}

/// Tucker reconstruction of the active atoms at pilot `p`.
pub fn reconstruct_channel(est: &PosteriorEstimate, g: &GridSet, s: &Scenario, p: usize) -> ComplexTensor3 {
    let mut t = FrameTruth::empty(s);
    t.doppler = est.doppler;
    for (n, geom) in est.geometry(g).into_iter().enumerate() {
        if est.active[n] && est.gains[n] != C64::new(0.0, 0.0) {
            t.push_effective(est.gains[n], geom.user_angle, geom.polar_angle, geom.polar_distance, geom.delay);
        }
    }
    cascaded_tensor(&t, p, s)
}

/// `(1/P) Σ_p ‖R̂_p - R_p‖² / ‖R_p‖²`.
pub fn nmse_tensors(truth: &[ComplexTensor3], est: &[ComplexTensor3]) -> Result<f64> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} truth vs {} estimate tensors", truth.len(), est.len())));
    }
    let mut acc = 0.0;
    for (t, e) in truth.iter().zip(est) {
        if t.dims() != e.dims() {
            return Err(Error::DimensionMismatch("tensor shapes differ".into()));
        }
        let den = t.norm_sqr();
        if den == 0.0 {
            return Err(Error::InvalidParameter("zero-norm truth".into()));
        }
        acc += e.sub(t)?.norm_sqr() / den;
    }
    Ok(acc / truth.len() as f64)
}

pub fn nmse(truth: &FrameTruth, est: &PosteriorEstimate, g: &GridSet, s: &Scenario, pilots: usize) -> Result<f64> {
    let t: Vec<_> = (0..pilots).map(|p| cascaded_tensor(truth, p, s)).collect();
    let e: Vec<_> = (0..pilots).map(|p| reconstruct_channel(est, g, s, p)).collect();
    nmse_tensors(&t, &e)
}

/// Mean NMSE of the `frames - 1` tracking frames.
pub fn tnmse(tracking: &[f64], frames: usize) -> Result<f64> {
    if frames < 2 || tracking.len() != frames - 1 {
        return Err(Error::InvalidParameter(format!("{} tracking values for {frames} frames", tracking.len())));
    }
    Ok(tracking.iter().sum::<f64>() / tracking.len() as f64)
}

pub fn dbv(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    /// Stage I candidate scores.
    pub js_scores: usize,
    pub ssca_iterations: usize,
    pub log_joint_evals: usize,
    pub bp_sweeps: usize,
    pub module_a_runs: usize,
    /// Module A variables summed over runs.
    pub variables: usize,
}

impl Counters {
    fn add_module_a(&mut self, trace: &[TraceRow], vars: usize) {
        self.module_a_runs += 1;
        self.ssca_iterations += trace.len();
        self.log_joint_evals += trace.iter().map(|r| r.evaluations).sum::<usize>();
        self.variables += vars;
    }

    fn merge(&mut self, o: &Counters) {
        self.js_scores += o.js_scores;
        self.ssca_iterations += o.ssca_iterations;
        self.log_joint_evals += o.log_joint_evals;
        self.bp_sweeps += o.bp_sweeps;
        self.module_a_runs += o.module_a_runs;
        self.variables += o.variables;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub estimate: PosteriorEstimate,
    pub coarse: CoarseEstimate,
    /// Module A posterior summary; absent for the baselines.
    pub posterior: Option<FramePosterior>,
    pub nmse: f64,
    pub pilots: usize,
    pub kl_trace: Vec<TraceRow>,
    pub turbo_changes: Vec<f64>,
    pub counters: Counters,
}

pub fn coarse_as_estimate(c: &CoarseEstimate) -> PosteriorEstimate {
    PosteriorEstimate {
        triples: c.triples.clone(),
        gains: c.gains.clone(),
        active: vec![true; c.triples.len()],
        doppler: c.doppler,
        offgrid: c.offgrid.clone(),
    }
}

fn baseline_config(cfg: &Stage1Config) -> Stage1Config {
    cfg.plain()
}

/// Plain OMP over the full grids without DFO or off-grid refinement.
pub fn baseline_plain_omp(setup: &Setup, model: &ObservationModel) -> Result<CoarseEstimate> {
    run_baseline(setup, model, Selector::Joint)
}

/// Sequential per-mode search on the full grids, otherwise as plain OMP.
pub fn baseline_tomp_ss(setup: &Setup, model: &ObservationModel) -> Result<CoarseEstimate> {
    run_baseline(setup, model, Selector::Sequential)
}

fn run_baseline(setup: &Setup, model: &ObservationModel, selector: Selector) -> Result<CoarseEstimate> {
    let g = &setup.grids;
    let input = Stage1Input {
        doppler: 0.0,
        offgrid: OffGridState::zeros(g),
        candidates: Some(crate::omp::CoarseIndexSet::full(g)),
        warm_start: Vec::new(),
        max_doppler: setup.max_doppler,
        threshold: setup.threshold,
    };
    run_stage1(model, g, &input, selector, &baseline_config(&setup.cfg.stage1))
}

fn finish_baseline(setup: &Setup, truth: &FrameTruth, coarse: CoarseEstimate, pilots: usize) -> Result<FrameResult> {
    let estimate = coarse_as_estimate(&coarse);
    let nmse = nmse(truth, &estimate, &setup.grids, setup.scenario(), pilots)?;
    let counters = Counters { js_scores: coarse.scores, ..Counters::default() };
    Ok(FrameResult { estimate, coarse, posterior: None, nmse, pilots, kl_trace: Vec::new(), turbo_changes: Vec::new(), counters })
}

/// CDG scale from the coarse magnitudes: the CDG mean is `(π/4)·σ_H σ_G`.
pub fn cdg_scale_from(coarse: &CoarseEstimate) -> f64 {
    let mags = coarse.magnitudes();
    if mags.is_empty() {
        return 1.0;
    }
    4.0 / PI * mags.iter().sum::<f64>() / mags.len() as f64
}

/// Estimation frame: random beams, Stage I on the CE candidate set, then
/// turbo iterations of Module A and Module B.
pub fn run_ce_frame(setup: &Setup, truth: &FrameTruth, seed: u64, algo: Algo, noisy: bool) -> Result<FrameResult> {
    let s = setup.scenario();
    let pilots = s.pilots_ce;
    let plan = estimation_plan(s, pilots, derive_seed(seed, 1, 0));
    let model = simulate_observation(setup, truth, &plan, noisy, derive_seed(seed, 2, 0))?;
    match algo {
        Algo::Omp => return finish_baseline(setup, truth, baseline_plain_omp(setup, &model)?, pilots),
        Algo::TompSs => return finish_baseline(setup, truth, baseline_tomp_ss(setup, &model)?, pilots),
        Algo::Tscet => {}
    }
    let g = &setup.grids;
    let cfg = &setup.cfg;
    let input = Stage1Input {
        doppler: 0.0,
        offgrid: OffGridState::zeros(g),
        candidates: None,
        warm_start: Vec::new(),
        max_doppler: setup.max_doppler,
        threshold: setup.threshold,
    };
    let coarse = run_stage1(&model, g, &input, Selector::Joint, &cfg.stage1)?;
    let mut counters = Counters { js_scores: coarse.scores, ..Counters::default() };
    if coarse.triples.is_empty() {
        return finish_coarse_only(setup, truth, coarse, pilots, counters);
    }
    let scale = cdg_scale_from(&coarse);
    let coords = active_coords(&coarse.triples, cfg.stage1.refine_doppler, cfg.stage1.refine_offgrid);
    let spatial = &cfg.priors.spatial;
    let mut runs: Vec<(Vec<TraceRow>, usize)> = Vec::new();
    let report = turbo_iterate(g, spatial, &cfg.stage2.support, |priors: &SupportMessages, round| {
        let ep = EstimationPriors {
            scale,
            spatial: spatial.clone(),
            user_on: priors.user.clone(),
            polar_on: priors.polar.clone(),
            delay_on: priors.delay.clone(),
            max_doppler: setup.max_doppler,
        };
        let jm = JointModel::new(&model, g, &coarse, &coords, ModulePriors::Estimation(ep));
        let posts = init_particles(&jm, &coarse, &cfg.stage2, setup.max_doppler)?;
        let out = run_module_a(&jm, posts, &cfg.stage2, derive_seed(seed, 3, round as u64))?;
        runs.push((out.trace.clone(), jm.vars.len()));
        let est = polish_estimate(setup, &model, posterior_estimate(&jm, &out.posteriors, cfg.stage2.ls_gains), true)?;
        let fp = frame_posterior(&jm, &out.posteriors);
        let ext = SupportMessages { user: out.user_out.clone(), polar: out.polar_out.clone(), delay: out.delay_out.clone() };
        Ok(((est, fp, out.trace), ext))
    })?;
    for (trace, vars) in &runs {
        counters.add_module_a(trace, *vars);
    }
    counters.bp_sweeps = report.bp_sweeps;
    let (estimate, posterior, kl_trace) = report.last;
    let nmse = nmse(truth, &estimate, g, s, pilots)?;
    Ok(FrameResult { estimate, coarse, posterior: Some(posterior), nmse, pilots, kl_trace, turbo_changes: report.changes, counters })
}

fn finish_coarse_only(setup: &Setup, truth: &FrameTruth, coarse: CoarseEstimate, pilots: usize, counters: Counters) -> Result<FrameResult> {
    let mut r = finish_baseline(setup, truth, coarse, pilots)?;
    r.counters = counters;
    Ok(r)
}

/// Likelihood descent from the posterior point estimate over its active atoms.
pub fn polish_estimate(setup: &Setup, model: &ObservationModel, est: PosteriorEstimate, doppler: bool) -> Result<PosteriorEstimate> {
    let sweeps = setup.cfg.stage2.polish_sweeps;
    let on: Vec<usize> = (0..est.triples.len()).filter(|&n| est.active[n]).collect();
    if sweeps == 0 || on.is_empty() {
        return Ok(est);
    }
    let s1 = &setup.cfg.stage1;
    let tri: Vec<Triple> = on.iter().map(|&n| est.triples[n]).collect();
    let mut gains: Vec<C64> = on.iter().map(|&n| est.gains[n]).collect();
    let mut st = RefineState { doppler: est.doppler, offgrid: est.offgrid.clone() };
    let coords = active_coords(&tri, doppler && s1.refine_doppler, s1.refine_offgrid);
    let cfg = Stage1Config { max_sweeps: sweeps, ..s1.clone() };
    ml_refine(model, &setup.grids, &mut st, &tri, &mut gains, &coords, setup.max_doppler, &cfg)?;
    let mut out = est;
    for (&n, x) in on.iter().zip(gains) {
        out.gains[n] = x;
    }
    out.doppler = st.doppler;
    out.offgrid = st.offgrid;
    Ok(out)
}

fn active_triples(est: &PosteriorEstimate) -> Vec<Triple> {
    est.triples.iter().zip(&est.active).filter(|(_, a)| **a).map(|(t, _)| *t).collect()
}

/// Tracking-phase beam plan built from the previous frame's estimate.
pub fn tracking_plan(setup: &Setup, prev: &PosteriorEstimate, pilots: usize, seed: u64) -> Vec<PilotBeams> {
    let s = setup.scenario();
    let g = &setup.grids;
    let bc = &setup.cfg.beamforming;
    let (bs_angle, _) = bs_irs_angles(s);
    let w = bs_combiner(bs_angle, s, pilots, seed);
    let (f, v) = if bc.design_tracking {
        let mut user_angles: Vec<f64> = Vec::new();
        let mut polar: Vec<(usize, f64, f64)> = Vec::new();
        for (n, geom) in prev.geometry(g).into_iter().enumerate() {
            if !prev.active[n] {
                continue;
            }
            if !user_angles.iter().any(|a| (a - geom.user_angle).abs() < 1e-12) {
                user_angles.push(geom.user_angle);
            }
            let m = prev.triples[n].1;
            if !polar.iter().any(|p| p.0 == m) {
                polar.push((m, geom.polar_angle, geom.polar_distance));
            }
        }
        (
            user_precoder(&user_angles, g, s, pilots, bc, seed ^ 0x5151),
            tracking_irs_beams(&polar, g, s, pilots, bc, seed ^ 0xa3a3),
        )
    } else {
        (random_precoder(s.n_u, pilots, seed ^ 0x5151), random_phase_irs(s.n_r, pilots, seed ^ 0xa3a3))
    };
    w.into_iter().zip(f).zip(v).map(|((w, f), v)| PilotBeams { w, f, v }).collect()
}

/// Tracking frame: designed beams, Stage I around the previous support and
/// Module A with propagated priors. `track_nonideal = false` freezes the DFO
/// and off-grid parameters at the previous estimate.
pub fn run_ct_frame(setup: &Setup, truth: &FrameTruth, prev: &FrameResult, seed: u64, pilots: usize, track_nonideal: bool) -> Result<FrameResult> {
    let s = setup.scenario();
    let g = &setup.grids;
    let cfg = &setup.cfg;
    let plan = tracking_plan(setup, &prev.estimate, pilots, derive_seed(seed, 1, 0));
    let model = simulate_observation(setup, truth, &plan, true, derive_seed(seed, 2, 0))?;
    let mut c1 = cfg.stage1.clone();
    if !track_nonideal {
        c1.refine_doppler = false;
        c1.refine_offgrid = false;
    }
    // The DFO is weakly identified by few pilots; Module A tracks it under the temporal prior.
    c1.refine_doppler = false;
    c1.doppler_scan = 0;
    let previous = active_triples(&prev.estimate);
    let candidates = if previous.is_empty() { None } else { Some(coarse_index_set_ct(&previous, g, c1.neighborhood)?) };
    let input = Stage1Input {
        doppler: prev.estimate.doppler,
        offgrid: prev.estimate.offgrid.clone(),
        candidates,
        warm_start: if cfg.stage1.warm_start { previous.clone() } else { Vec::new() },
        max_doppler: setup.max_doppler,
        threshold: setup.threshold,
    };
    let mut coarse = run_stage1(&model, g, &input, Selector::Joint, &c1)?;
    let mut counters = Counters { js_scores: coarse.scores, ..Counters::default() };
    // Re-acquire over the full dictionary when the tracked neighbourhood cannot
    // explain the frame, so a lost support does not persist.
    if input.candidates.is_some() && coarse.residual_power > setup.threshold {
        let wide = Stage1Input { candidates: None, warm_start: Vec::new(), ..input };
        let fresh = run_stage1(&model, g, &wide, Selector::Joint, &c1)?;
        counters.js_scores += fresh.scores;
        if fresh.residual_power < coarse.residual_power {
            coarse = fresh;
        }
    }
    let Some(prev_post) = prev.posterior.as_ref() else {
        return finish_coarse_only(setup, truth, coarse, pilots, counters);
    };
    if coarse.triples.is_empty() {
        return finish_coarse_only(setup, truth, coarse, pilots, counters);
    }
    let prior = propagate_posterior_to_prior(Some(prev_post), &cfg.priors.temporal, g)?;
    let coords = if track_nonideal { active_coords(&coarse.triples, cfg.stage1.refine_doppler, cfg.stage1.refine_offgrid) } else { Vec::new() };
    let priors = ModulePriors::Tracking { prior, spatial: cfg.priors.spatial.clone(), support_on: cfg.priors.temporal.support_on };
    let jm = JointModel::new(&model, g, &coarse, &coords, priors);
    let posts = init_particles(&jm, &coarse, &cfg.stage2, setup.max_doppler)?;
    let out = run_module_a(&jm, posts, &cfg.stage2, derive_seed(seed, 3, 0))?;
    counters.add_module_a(&out.trace, jm.vars.len());
    let estimate = posterior_estimate(&jm, &out.posteriors, cfg.stage2.ls_gains);
    let mut posterior = frame_posterior(&jm, &out.posteriors);
    if !track_nonideal {
        posterior.doppler = prev_post.doppler;
    }
    let nmse = nmse(truth, &estimate, g, s, pilots)?;
    Ok(FrameResult { estimate, coarse, posterior: Some(posterior), nmse, pilots, kl_trace: out.trace, turbo_changes: Vec::new(), counters })
}

/// Baseline tracking frame: the baseline re-run on a fresh random-beam frame.
fn run_baseline_frame(setup: &Setup, truth: &FrameTruth, seed: u64, pilots: usize, algo: Algo) -> Result<FrameResult> {
    let s = setup.scenario();
    let plan = estimation_plan(s, pilots, derive_seed(seed, 1, 0));
    let model = simulate_observation(setup, truth, &plan, true, derive_seed(seed, 2, 0))?;
    let coarse = match algo {
        Algo::TompSs => baseline_tomp_ss(setup, &model)?,
        _ => baseline_plain_omp(setup, &model)?,
    };
    finish_baseline(setup, truth, coarse, pilots)
}

/// Draws allowed per trial when looking for a grid-resolvable truth.
const TRUTH_ATTEMPTS: usize = 10_000;

/// Ground truth of one trial: the first geometric draw whose paths occupy
/// distinct indices in every mode.
pub fn trial_truth(setup: &Setup, seed: u64) -> Result<FrameTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    for _ in 0..TRUTH_ATTEMPTS {
        let truth = generate_truth(setup.scenario(), setup.max_delay(), &mut rng)?;
        if assign_to_grid(&truth, &setup.grids)?.is_resolvable() {
            return Ok(truth);
        }
    }
    Err(Error::InvalidGeometry(format!("no grid-resolvable truth in {TRUTH_ATTEMPTS} draws")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub frames: Vec<FrameResult>,
    pub nmse: Vec<f64>,
    pub tnmse: f64,
}

/// One estimation frame followed by `frames - 1` tracking frames.
pub fn run_track(setup: &Setup, seed: u64, algo: Algo, frames: usize, pilots_ct: usize, track_nonideal: bool) -> Result<TrackResult> {
    let s = setup.scenario();
    let mut truth = trial_truth(setup, seed)?;
    let mut motion = ChaCha8Rng::seed_from_u64(derive_seed(seed, 9, 0));
    let mut out: Vec<FrameResult> = Vec::with_capacity(frames);
    for t in 0..frames.max(1) {
        if t > 0 {
            truth = evolve_frame(&truth, s, s.frame_duration, &mut motion)?;
        }
        let fseed = derive_seed(seed, 100 + t as u64, 0);
        let r = if t == 0 {
            run_ce_frame(setup, &truth, fseed, algo, true)?
        } else if algo == Algo::Tscet {
            run_ct_frame(setup, &truth, out.last().expect("previous frame"), fseed, pilots_ct, track_nonideal)?
        } else {
            run_baseline_frame(setup, &truth, fseed, pilots_ct, algo)?
        };
        out.push(r);
    }
    let nmse: Vec<f64> = out.iter().map(|r| r.nmse).collect();
    let tn = if frames >= 2 { tnmse(&nmse[1..], frames)? } else { f64::NAN };
    Ok(TrackResult { frames: out, nmse, tnmse: tn })
}

/// Runs `f(trial)` for each trial on scoped threads; results keep trial order.
pub fn parallel_trials<T: Send, F: Fn(usize) -> T + Sync>(trials: usize, f: F) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(trials.max(1));
    let mut slots: Vec<Option<T>> = (0..trials).map(|_| None).collect();
    std::thread::scope(|sc| {
        let chunks: Vec<_> = slots.chunks_mut(trials.div_ceil(workers).max(1)).collect();
        let mut start = 0;
        for chunk in chunks {
            let n = chunk.len();
            let f = &f;
            let first = start;
            sc.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(first + i));
                }
            });
            start += n;
        }
    });
    slots.into_iter().map(|s| s.expect("trial ran")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub algo: Algo,
    /// `10 log10` of the mean NMSE over successful trials.
    pub nmse_db: f64,
    /// Standard error of the mean, propagated to dB.
    pub stderr_db: f64,
    pub trials: usize,
    pub failures: usize,
}

pub fn summarize(axis: &str, value: f64, algo: Algo, samples: &[Result<f64>]) -> SweepRow {
    let ok: Vec<f64> = samples.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let n = ok.len();
    let mean = if n > 0 { ok.iter().sum::<f64>() / n as f64 } else { f64::NAN };
    let se = if n > 1 {
        (ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
    } else {
        0.0
    };
    SweepRow {
        axis: axis.into(),
        value,
        algo,
        nmse_db: dbv(mean),
        stderr_db: 10.0 / std::f64::consts::LN_10 * se / mean,
        trials: n,
        failures: samples.len() - n,
    }
}

/// CE-frame NMSE over the configured SNR axis.
pub fn sweep_snr(cfg: &RunConfig, algos: &[Algo]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, &snr) in cfg.sweep.snr_db.iter().enumerate() {
        let mut c = cfg.clone();
        c.scenario.snr_db = snr;
        let setup = Setup::new(&c)?;
        for &algo in algos {
            let samples = parallel_trials(cfg.sweep.trials, |t| {
                let seed = derive_seed(cfg.sweep.seed, i as u64, t as u64);
                let truth = trial_truth(&setup, seed)?;
                Ok(run_ce_frame(&setup, &truth, derive_seed(seed, 100, 0), algo, true)?.nmse)
            });
            rows.push(summarize("snr_db", snr, algo, &samples));
        }
    }
    Ok(rows)
}

/// TNMSE over the configured tracking pilot counts.
pub fn sweep_pilots(cfg: &RunConfig, algos: &[Algo]) -> Result<Vec<SweepRow>> {
    let setup = Setup::new(cfg)?;
    let mut rows = Vec::new();
    for &p in &cfg.sweep.pilots {
        for &algo in algos {
            let samples = parallel_trials(cfg.sweep.trials, |t| {
                let seed = derive_seed(cfg.sweep.seed, 0, t as u64);
                Ok(run_track(&setup, seed, algo, cfg.sweep.frames, p, cfg.sweep.track_nonideal)?.tnmse)
            });
            rows.push(summarize("pilots_ct", p as f64, algo, &samples));
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[SweepRow], hash: &str) -> String {
    let mut out = format!("# config-hash: {hash}\naxis,value,algorithm,nmse_db,stderr_db,trials,failures\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.4},{:.4},{},{}\n", r.axis, r.value, r.algo, r.nmse_db, r.stderr_db, r.trials, r.failures));
    }
    out
}

/// Two-column text table with the config-hash comment line.
pub fn two_column(hash: &str, header: &str, rows: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut out = format!("# config-hash: {hash}\n{header}\n");
    for (a, b) in rows {
        out.push_str(&format!("{a} {b:.9e}\n"));
    }
    out
}

/// Operation counts next to the asymptotic cost expression with the run's sizes substituted.
pub fn complexity_report(setup: &Setup, c: &Counters) -> String {
    let s = setup.scenario();
    let g = &setup.grids;
    let st = &setup.cfg.stage2;
    let l = setup.cfg.stage1.max_paths;
    let runs = c.module_a_runs.max(1) as f64;
    let j = c.variables as f64 / runs;
    let n_ssca = c.ssca_iterations as f64 / runs;
    let mut out = String::from("counter value\n");
    out.push_str(&format!("joint_search_scores {}\n", c.js_scores));
    out.push_str(&format!("ssca_iterations {}\n", c.ssca_iterations));
    out.push_str(&format!("log_joint_evaluations {}\n", c.log_joint_evals));
    out.push_str(&format!("bp_sweeps {}\n", c.bp_sweeps));
    out.push_str(&format!("module_a_runs {}\n", c.module_a_runs));
    out.push_str(&format!(
        "formula O(N_I (N_JS R_B Kbar L^3 + N_U^2 + Nbar_R^2 + N_f^2) + 2 J N_II N_SSCA (N_p B F_grad + N_p^3))\n\
         substituted O({ni} ({njs} * {rb} * {kb} * {l}^3 + {nu}^2 + {nr}^2 + {nf}^2) + 2 * {j:.1} * {nii} * {n_ssca:.1} * ({np} * {b} * F_grad + {np}^3))\n",
        ni = setup.cfg.stage1.outer_loops,
        njs = c.js_scores,
        rb = s.r_b,
        kb = setup.selection.len(),
        nu = g.n_u(),
        nr = g.n_bar_r(),
        nf = g.n_f(),
        nii = c.module_a_runs,
        np = st.particles,
        b = st.batch,
    ));
    out
}

impl Counters {
    pub fn merged(items: &[Counters]) -> Counters {
        let mut c = Counters::default();
        items.iter().for_each(|x| c.merge(x));
        c
    }
}
