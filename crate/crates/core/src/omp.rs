//! Stage I: greedy joint-mode atom selection on the reduced observation
//! model, joint least-squares gains and Armijo refinement of the DFO and the
//! off-grid perturbations of active grid points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSet, OffGridState};
use crate::model::{AtomGeom, ObservationModel, Param};
use crate::priors::{lattice_neighbors, wrap_phase};
use crate::tensor::C64;

pub type Triple = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    /// Outer select/refine rounds.
    pub outer_loops: usize,
    /// `L_max`; the atom budget defaults to twice this.
    pub max_paths: usize,
    pub atom_budget: Option<usize>,
    /// Per-mode candidate count of the coarse set; defaults to `4 L_max`.
    pub coarse_per_mode: Option<usize>,
    /// Relative residual threshold as a multiple of the observation noise fraction.
    pub eps_factor: f64,
    /// Explicit relative residual threshold overriding `eps_factor`.
    pub eps: Option<f64>,
    pub refine_doppler: bool,
    pub refine_offgrid: bool,
    /// Points of the initial DFO scan; 0 disables it.
    pub doppler_scan: usize,
    pub max_sweeps: usize,
    pub tol: f64,
    /// Refine DFO and off-grid offsets after every selection, not only
    /// after each greedy pass.
    pub refine_each: bool,
    /// Sweep cap of the per-selection refinement.
    pub refine_each_sweeps: usize,
    /// Grid radius of the tracking-phase candidate neighborhoods.
    pub neighborhood: usize,
    /// Start the tracking-phase search from the previous frame's support.
    pub warm_start: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            outer_loops: 3,
            max_paths: 3,
            atom_budget: None,
            coarse_per_mode: None,
            eps_factor: 1.5,
            eps: None,
            refine_doppler: true,
            refine_offgrid: true,
            doppler_scan: 21,
            max_sweeps: 60,
            tol: 1e-7,
            refine_each: true,
            refine_each_sweeps: 10,
            neighborhood: 1,
            warm_start: true,
        }
    }
}

impl Stage1Config {
    pub fn budget(&self) -> usize {
        self.atom_budget.unwrap_or(2 * self.max_paths)
    }

    pub fn per_mode(&self) -> usize {
        self.coarse_per_mode.unwrap_or(4 * self.max_paths)
    }

    /// Relative residual threshold for observation-level SNR `snr_obs_db`.
    pub fn threshold(&self, snr_obs_db: f64) -> f64 {
        self.eps.unwrap_or(self.eps_factor * 10f64.powf(-snr_obs_db / 10.0))
    }

    /// Plain OMP: one pass over the full grids, no DFO or off-grid modeling.
    pub fn plain(&self) -> Self {
        Self {
            outer_loops: 1,
            refine_doppler: false,
            refine_offgrid: false,
            doppler_scan: 0,
            refine_each: false,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoarseIndexSet {
    pub user: Vec<usize>,
    pub polar: Vec<usize>,
    pub delay: Vec<usize>,
}

impl CoarseIndexSet {
    pub fn full(g: &GridSet) -> Self {
        Self { user: (0..g.n_u()).collect(), polar: (0..g.n_bar_r()).collect(), delay: (0..g.n_f()).collect() }
    }

    pub fn len(&self) -> usize {
        self.user.len() * self.polar.len() * self.delay.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidate triples in ascending linear-index order.
    pub fn triples(&self) -> Vec<Triple> {
        let mut out = Vec::with_capacity(self.len());
        for &k in &self.delay {
            for &m in &self.polar {
                for &u in &self.user {
                    out.push((u, m, k));
                }
            }
        }
        out
    }
}

/// How each iteration picks its atom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// Joint maximization of the coherent score over the coarse set.
    Joint,
    /// Delay, then polar point, then user angle, one mode at a time.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    /// Atom budget reached before the residual fell below the threshold.
    Budget,
    RankDeficient,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEstimate {
    pub triples: Vec<Triple>,
    pub gains: Vec<C64>,
    pub doppler: f64,
    pub offgrid: OffGridState,
    /// Final residual energy relative to the observation energy.
    pub residual_power: f64,
    /// Relative residual energy after each selection of the final round,
    /// starting with the empty model, then once more after refinement.
    pub history: Vec<f64>,
    pub stop: StopReason,
    /// Candidate scores evaluated over all rounds.
    pub scores: usize,
}

impl CoarseEstimate {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.gains.iter().map(|z| z.norm()).collect()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.gains.iter().map(|z| wrap_phase(z.arg())).collect()
    }

    pub fn geometry(&self, g: &GridSet) -> Vec<AtomGeom> {
        self.triples.iter().map(|&(u, m, k)| AtomGeom::at(g, &self.offgrid, u, m, k)).collect()
    }
}

/// Per-mode coefficient tables for fixed DFO and off-grid state.
#[derive(Debug, Clone)]
pub struct ModeTables {
    user: Vec<Vec<C64>>,
    irs: Vec<Vec<C64>>,
    delay: Vec<Vec<C64>>,
    delay_norm: Vec<f64>,
}

impl ModeTables {
    pub fn new(model: &ObservationModel, g: &GridSet, og: &OffGridState, doppler: f64) -> Self {
        let np = model.pilot_count();
        let user = (0..np)
            .map(|p| (0..g.n_u()).map(|u| model.user_coeff(p, g.user_angles[u] + og.user[u], doppler).0).collect())
            .collect();
        let irs = (0..np)
            .map(|p| {
                (0..g.n_bar_r())
                    .map(|m| {
                        model.irs_coeff(p, g.polar_angles[m] + og.polar_angle[m], g.polar_distances[m] + og.polar_distance[m]).0
                    })
                    .collect()
            })
            .collect();
        let delay: Vec<Vec<C64>> = (0..g.n_f()).map(|k| model.delay_vec(g.delays[k] + og.delay[k]).0).collect();
        let delay_norm = delay.iter().map(|v| v.iter().map(|z| z.norm_sqr()).sum()).collect();
        Self { user, irs, delay, delay_norm }
    }

    /// `G[p][k] = ⟨uK_k, r_p⟩`.
    fn delay_correlations(&self, model: &ObservationModel, residual: &[C64]) -> Vec<Vec<C64>> {
        let kb = model.subcarrier_count();
        (0..model.pilot_count())
            .map(|p| {
                let r = &residual[p * kb..(p + 1) * kb];
                self.delay.iter().map(|d| d.iter().zip(r).map(|(a, b)| a.conj() * b).sum()).collect()
            })
            .collect()
    }
}

fn coherent_score(model: &ObservationModel, t: &ModeTables, corr: &[Vec<C64>], (u, m, k): Triple) -> f64 {
    let mut num = C64::new(0.0, 0.0);
    let mut den = 0.0;
    for (p, po) in model.pilots.iter().enumerate() {
        let a = t.user[p][u] * t.irs[p][m];
        num += a.conj() * corr[p][k] * po.weight;
        den += po.weight * a.norm_sqr() * t.delay_norm[k];
    }
    if den > 0.0 { num.norm_sqr() / den } else { 0.0 }
}

/// Coherent matched-filter score `|Σ_p ⟨atom_p, r_p⟩|² / Σ_p ‖atom_p‖²` of
/// every candidate, in ascending linear-index order.
pub fn score_candidates(model: &ObservationModel, t: &ModeTables, residual: &[C64], set: &CoarseIndexSet) -> Vec<(Triple, f64)> {
    let corr = t.delay_correlations(model, residual);
    set.triples().into_iter().map(|tr| (tr, coherent_score(model, t, &corr, tr))).collect()
}

/// Best candidate not in `exclude`; ties go to the smallest linear index.
pub fn joint_mode_select(
    model: &ObservationModel,
    t: &ModeTables,
    residual: &[C64],
    set: &CoarseIndexSet,
    exclude: &[Triple],
) -> Option<(Triple, f64)> {
    let mut best: Option<(Triple, f64)> = None;
    for (tr, score) in score_candidates(model, t, residual, set) {
        if exclude.contains(&tr) {
            continue;
        }
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((tr, score));
        }
    }
    best
}

fn top_indices(scores: &[f64], q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(q.max(1));
    idx.sort_unstable();
    idx
}

fn delay_energy(model: &ObservationModel, t: &ModeTables, corr: &[Vec<C64>], k: usize) -> f64 {
    let s: f64 = model.pilots.iter().enumerate().map(|(p, po)| po.weight * corr[p][k].norm_sqr()).sum();
    if t.delay_norm[k] > 0.0 { s / t.delay_norm[k] } else { 0.0 }
}

/// Pilot-incoherent energy of polar point `m` at delay `k`.
fn polar_energy(model: &ObservationModel, t: &ModeTables, corr: &[Vec<C64>], m: usize, k: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, po) in model.pilots.iter().enumerate() {
        num += po.weight * (t.irs[p][m].conj() * corr[p][k]).norm_sqr();
        den += po.weight * t.irs[p][m].norm_sqr() * t.delay_norm[k];
    }
    if den > 0.0 { num / den } else { 0.0 }
}

/// Estimation phase: per-mode top-`q` indices from a sequential scan of the
/// residual (delays by energy, then polar points at those delays, then user
/// angles at those polar points).
pub fn coarse_index_set_ce(model: &ObservationModel, t: &ModeTables, residual: &[C64], g: &GridSet, q: usize) -> Result<CoarseIndexSet> {
    let corr = t.delay_correlations(model, residual);
    let ek: Vec<f64> = (0..g.n_f()).map(|k| delay_energy(model, t, &corr, k)).collect();
    let delay = top_indices(&ek, q);
    let er: Vec<f64> = (0..g.n_bar_r())
        .map(|m| delay.iter().map(|&k| polar_energy(model, t, &corr, m, k)).fold(0.0, f64::max))
        .collect();
    let polar = top_indices(&er, q);
    let eu: Vec<f64> = (0..g.n_u())
        .map(|u| {
            let mut best: f64 = 0.0;
            for &k in &delay {
                for &m in &polar {
                    best = best.max(coherent_score(model, t, &corr, (u, m, k)));
                }
            }
            best
        })
        .collect();
    let user = top_indices(&eu, q);
    let set = CoarseIndexSet { user, polar, delay };
    if set.is_empty() { Err(Error::EmptyCandidates) } else { Ok(set) }
}

/// Tracking phase: previous indices and their per-mode neighbors within `radius`.
pub fn coarse_index_set_ct(previous: &[Triple], g: &GridSet, radius: usize) -> Result<CoarseIndexSet> {
    if previous.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let span = |i: usize, n: usize| i.saturating_sub(radius)..(i + radius + 1).min(n);
    let mut user = Vec::new();
    let mut polar = Vec::new();
    let mut delay = Vec::new();
    for &(u, m, k) in previous {
        user.extend(span(u, g.n_u()));
        delay.extend(span(k, g.n_f()));
        let mut frontier = vec![m];
        polar.push(m);
        for _ in 0..radius {
            let next: Vec<usize> = frontier.iter().flat_map(|&x| lattice_neighbors(x, g.angle_count, g.rings)).collect();
            polar.extend(&next);
            frontier = next;
        }
    }
    for v in [&mut user, &mut polar, &mut delay] {
        v.sort_unstable();
        v.dedup();
    }
    Ok(CoarseIndexSet { user, polar, delay })
}

fn sequential_select(model: &ObservationModel, t: &ModeTables, residual: &[C64], set: &CoarseIndexSet, exclude: &[Triple]) -> Option<(Triple, f64)> {
    let corr = t.delay_correlations(model, residual);
    let k = *set.delay.iter().max_by(|&&a, &&b| delay_energy(model, t, &corr, a).total_cmp(&delay_energy(model, t, &corr, b)).then(b.cmp(&a)))?;
    let m = *set.polar.iter().max_by(|&&a, &&b| {
        polar_energy(model, t, &corr, a, k).total_cmp(&polar_energy(model, t, &corr, b, k)).then(b.cmp(&a))
    })?;
    let mut best: Option<(Triple, f64)> = None;
    for &u in &set.user {
        let tr = (u, m, k);
        if exclude.contains(&tr) {
            continue;
        }
        let sc = coherent_score(model, t, &corr, tr);
        if best.is_none_or(|(_, b)| sc > b) {
            best = Some((tr, sc));
        }
    }
    // All user angles at this (m, k) taken: fall back to the joint rule.
    best.or_else(|| joint_mode_select(model, t, residual, set, exclude))
}

fn responses(model: &ObservationModel, g: &GridSet, og: &OffGridState, doppler: f64, triples: &[Triple]) -> Vec<Vec<C64>> {
    triples.iter().map(|&(u, m, k)| model.response(&AtomGeom::at(g, og, u, m, k), doppler)).collect()
}

/// Joint least-squares gains for the selected triples.
pub fn ls_gain_update(model: &ObservationModel, g: &GridSet, og: &OffGridState, doppler: f64, triples: &[Triple]) -> Result<Vec<C64>> {
    model.ls_gains(&responses(model, g, og, doppler, triples), &model.data())
}

/// Removes the rank-1 contribution `gain · atom` from `residual`.
pub fn residual_update(residual: &mut [C64], atom: &[C64], gain: C64) {
    for (r, a) in residual.iter_mut().zip(atom) {
        *r -= gain * a;
    }
}

/// One refinable coordinate in normalized units `value = scale · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coord {
    Doppler,
    User(usize),
    PolarAngle(usize),
    PolarDistance(usize),
    Delay(usize),
}

/// Continuous state refined by Stage I: DFO plus off-grid perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineState {
    pub doppler: f64,
    pub offgrid: OffGridState,
}

impl RefineState {
    pub fn get(&self, c: Coord) -> f64 {
        match c {
            Coord::Doppler => self.doppler,
            Coord::User(u) => self.offgrid.user[u],
            Coord::PolarAngle(m) => self.offgrid.polar_angle[m],
            Coord::PolarDistance(m) => self.offgrid.polar_distance[m],
            Coord::Delay(k) => self.offgrid.delay[k],
        }
    }

    pub fn set(&mut self, c: Coord, v: f64) {
        match c {
            Coord::Doppler => self.doppler = v,
            Coord::User(u) => self.offgrid.user[u] = v,
            Coord::PolarAngle(m) => self.offgrid.polar_angle[m] = v,
            Coord::PolarDistance(m) => self.offgrid.polar_distance[m] = v,
            Coord::Delay(k) => self.offgrid.delay[k] = v,
        }
    }
}

/// `(lo, hi, scale)` of a coordinate's box in raw units.
pub fn coord_box(c: Coord, g: &GridSet, max_doppler: f64) -> (f64, f64, f64) {
    let sym = |h: f64| (-h, h, h);
    match c {
        Coord::Doppler => (0.0, max_doppler, max_doppler),
        Coord::User(_) => sym(g.user_spacing() / 2.0),
        Coord::PolarAngle(_) => sym(g.polar_spacing() / 2.0),
        Coord::PolarDistance(m) => sym(g.ring_half_gap(m)),
        Coord::Delay(_) => sym(g.delay_spacing() / 2.0),
    }
}

/// Coordinates touched by the active triples.
pub fn active_coords(triples: &[Triple], doppler: bool, offgrid: bool) -> Vec<Coord> {
    let mut out = Vec::new();
    if doppler {
        out.push(Coord::Doppler);
    }
    if offgrid {
        let mut us: Vec<usize> = triples.iter().map(|t| t.0).collect();
        let mut ms: Vec<usize> = triples.iter().map(|t| t.1).collect();
        let mut ks: Vec<usize> = triples.iter().map(|t| t.2).collect();
        for v in [&mut us, &mut ms, &mut ks] {
            v.sort_unstable();
            v.dedup();
        }
        out.extend(us.into_iter().map(Coord::User));
        for m in ms {
            out.push(Coord::PolarAngle(m));
            out.push(Coord::PolarDistance(m));
        }
        out.extend(ks.into_iter().map(Coord::Delay));
    }
    out
}

/// Squared-error objective for fixed gains.
pub fn ml_objective(model: &ObservationModel, g: &GridSet, st: &RefineState, triples: &[Triple], gains: &[C64]) -> f64 {
    let resp = responses(model, g, &st.offgrid, st.doppler, triples);
    model.energy(&model.residual(&resp, gains, &model.data()))
}

/// Analytic derivative of [`ml_objective`] along raw coordinate `c`.
pub fn ml_gradient(model: &ObservationModel, g: &GridSet, st: &RefineState, triples: &[Triple], gains: &[C64], c: Coord) -> f64 {
    let resp = responses(model, g, &st.offgrid, st.doppler, triples);
    let r = model.residual(&resp, gains, &model.data());
    let mut grad = 0.0;
    for (l, &(u, m, k)) in triples.iter().enumerate() {
        let param = match c {
            Coord::Doppler => Param::Doppler,
            Coord::User(x) if x == u => Param::UserAngle,
            Coord::PolarAngle(x) if x == m => Param::PolarAngle,
            Coord::PolarDistance(x) if x == m => Param::PolarDistance,
            Coord::Delay(x) if x == k => Param::Delay,
            _ => continue,
        };
        let (_, d) = model.response_grad(&AtomGeom::at(g, &st.offgrid, u, m, k), st.doppler, param);
        let dz: Vec<C64> = d.iter().map(|x| x * gains[l]).collect();
        grad -= 2.0 * model.inner(&r, &dz).re;
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    /// Objective after every accepted step and every gain re-fit.
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

/// Per-coordinate Armijo descent in normalized box coordinates with a joint
/// gain re-fit after every sweep.
pub fn ml_refine(
    model: &ObservationModel,
    g: &GridSet,
    st: &mut RefineState,
    triples: &[Triple],
    gains: &mut Vec<C64>,
    coords: &[Coord],
    max_doppler: f64,
    cfg: &Stage1Config,
) -> Result<RefineReport> {
    if triples.is_empty() {
        return Err(Error::InvalidParameter("refinement needs a non-empty active set".into()));
    }
    let mut j = ml_objective(model, g, st, triples, gains);
    if !j.is_finite() {
        return Err(Error::NonFinite(format!("objective at doppler {} is {j}", st.doppler)));
    }
    let mut report = RefineReport { objective: vec![j], sweeps: 0 };
    let mut steps = vec![1.0f64; coords.len()];
    for _ in 0..cfg.max_sweeps {
        report.sweeps += 1;
        let start = j;
        let mut moved: f64 = 0.0;
        for (ci, &c) in coords.iter().enumerate() {
            let (lo, hi, scale) = coord_box(c, g, max_doppler);
            let x0 = st.get(c);
            let grad = ml_gradient(model, g, st, triples, gains, c) * scale;
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient along {c:?} at {x0}")));
            }
            if grad.abs() <= 1e-300 {
                continue;
            }
            let mut t = (2.0 * steps[ci]).min(1.0);
            let mut accepted = false;
            for _ in 0..=30 {
                let x1 = (x0 - t * grad.signum() * scale).clamp(lo, hi);
                let dx = (x1 - x0) / scale;
                if dx == 0.0 {
                    break;
                }
                st.set(c, x1);
                let j1 = ml_objective(model, g, st, triples, gains);
                if j1.is_finite() && j1 <= j - 1e-4 * grad.abs() * dx.abs() {
                    j = j1;
                    moved = moved.max(dx.abs());
                    accepted = true;
                    break;
                }
                st.set(c, x0);
                t *= 0.5;
            }
            steps[ci] = if accepted { t } else { t.max(1e-12) };
            if accepted {
                report.objective.push(j);
            }
        }
        if let Ok(z) = ls_gain_update(model, g, &st.offgrid, st.doppler, triples) {
            let jz = ml_objective(model, g, st, triples, &z);
            if jz <= j {
                *gains = z;
                j = jz;
                report.objective.push(j);
            }
        }
        if moved < cfg.tol || start - j <= 1e-12 * start {
            break;
        }
    }
    Ok(report)
}

/// Greedy selection with joint re-fit until the residual threshold or the
/// atom budget is reached. Returns triples, gains, history and stop reason.
fn greedy(
    model: &ObservationModel,
    g: &GridSet,
    st: &mut RefineState,
    set: Option<&CoarseIndexSet>,
    warm: &[Triple],
    selector: Selector,
    threshold: f64,
    max_doppler: f64,
    cfg: &Stage1Config,
) -> Result<(Vec<Triple>, Vec<C64>, Vec<f64>, StopReason, usize)> {
    let mut tables = ModeTables::new(model, g, &st.offgrid, st.doppler);
    let data = model.data();
    let total = model.energy(&data);
    let mut residual = data.clone();
    let mut triples: Vec<Triple> = Vec::new();
    let mut gains = Vec::new();
    let mut history = vec![1.0];
    if total <= 0.0 {
        return Ok((triples, gains, history, StopReason::Threshold, 0));
    }
    let owned;
    let set = match set {
        Some(s) => s,
        None => {
            owned = coarse_index_set_ce(model, &tables, &data, g, cfg.per_mode())?;
            &owned
        }
    };
    let mut scores = 0;
    if !warm.is_empty() {
        if let Ok(z) = ls_gain_update(model, g, &st.offgrid, st.doppler, warm) {
            triples = warm.to_vec();
            gains = z;
            let coords = active_coords(&triples, cfg.refine_doppler, cfg.refine_offgrid);
            if cfg.refine_each && !coords.is_empty() {
                let quick = Stage1Config { max_sweeps: cfg.refine_each_sweeps, ..cfg.clone() };
                ml_refine(model, g, st, &triples, &mut gains, &coords, max_doppler, &quick)?;
                tables = ModeTables::new(model, g, &st.offgrid, st.doppler);
            }
            let resp = responses(model, g, &st.offgrid, st.doppler, &triples);
            residual = model.residual(&resp, &gains, &data);
            history.push(model.energy(&residual) / total);
        }
    }
    let stop = loop {
        if model.energy(&residual) <= threshold * total {
            break StopReason::Threshold;
        }
        if triples.len() >= cfg.budget() {
            break StopReason::Budget;
        }
        scores += match selector {
            Selector::Joint => set.len(),
            Selector::Sequential => set.delay.len() + set.polar.len() + set.user.len(),
        };
        let pick = match selector {
            Selector::Joint => joint_mode_select(model, &tables, &residual, set, &triples),
            Selector::Sequential => sequential_select(model, &tables, &residual, set, &triples),
        };
        let Some((tr, _)) = pick else { break StopReason::Exhausted };
        triples.push(tr);
        match ls_gain_update(model, g, &st.offgrid, st.doppler, &triples) {
            Ok(z) => gains = z,
            Err(Error::RankDeficient) => {
                triples.pop();
                break StopReason::RankDeficient;
            }
            Err(e) => return Err(e),
        }
        let coords = active_coords(&triples, cfg.refine_doppler, cfg.refine_offgrid);
        if cfg.refine_each && !coords.is_empty() {
            if cfg.refine_doppler && cfg.doppler_scan > 1 {
                doppler_scan(model, g, st, &triples, &mut gains, max_doppler, cfg.doppler_scan);
            }
            let quick = Stage1Config { max_sweeps: cfg.refine_each_sweeps, ..cfg.clone() };
            ml_refine(model, g, st, &triples, &mut gains, &coords, max_doppler, &quick)?;
            tables = ModeTables::new(model, g, &st.offgrid, st.doppler);
        }
        let resp = responses(model, g, &st.offgrid, st.doppler, &triples);
        residual = model.residual(&resp, &gains, &data);
        history.push(model.energy(&residual) / total);
    };
    Ok((triples, gains, history, stop, scores))
}

/// Starting point and candidate restriction of a Stage I run.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Input {
    pub doppler: f64,
    pub offgrid: OffGridState,
    /// Tracking-phase candidate set; the estimation phase builds its own.
    pub candidates: Option<CoarseIndexSet>,
    /// Atoms selected before the greedy search starts.
    pub warm_start: Vec<Triple>,
    pub max_doppler: f64,
    pub threshold: f64,
}

pub fn run_stage1(model: &ObservationModel, g: &GridSet, input: &Stage1Input, selector: Selector, cfg: &Stage1Config) -> Result<CoarseEstimate> {
    let mut st = RefineState { doppler: input.doppler, offgrid: input.offgrid.clone() };
    let total = model.data_energy();
    let mut last = None;
    let mut scores = 0;
    for round in 0..cfg.outer_loops.max(1) {
        let (triples, mut gains, mut history, stop, n) =
            greedy(model, g, &mut st, input.candidates.as_ref(), &input.warm_start, selector, input.threshold, input.max_doppler, cfg)?;
        scores += n;
        let coords = active_coords(&triples, cfg.refine_doppler, cfg.refine_offgrid);
        if !triples.is_empty() && !coords.is_empty() {
            if round == 0 && cfg.refine_doppler && cfg.doppler_scan > 1 {
                doppler_scan(model, g, &mut st, &triples, &mut gains, input.max_doppler, cfg.doppler_scan);
            }
            ml_refine(model, g, &mut st, &triples, &mut gains, &coords, input.max_doppler, cfg)?;
            let j = ml_objective(model, g, &st, &triples, &gains);
            history.push((j / total).min(*history.last().expect("history starts at 1")));
        }
        last = Some((triples, gains, history, stop));
    }
    let (triples, gains, history, stop) = last.expect("at least one round");
    let residual_power = *history.last().expect("non-empty history");
    Ok(CoarseEstimate { triples, gains, doppler: st.doppler, offgrid: st.offgrid, residual_power, history, stop, scores })
}

/// Replaces the DFO by the best point of a uniform scan over `[0, max]` when
/// that lowers the re-fitted objective.
fn doppler_scan(model: &ObservationModel, g: &GridSet, st: &mut RefineState, triples: &[Triple], gains: &mut Vec<C64>, max: f64, points: usize) {
    let mut best = (ml_objective(model, g, st, triples, gains), st.doppler, gains.clone());
    let base = st.clone();
    for i in 0..points {
        let f = max * i as f64 / (points - 1) as f64;
        let mut trial = base.clone();
        trial.doppler = f;
        if let Ok(z) = ls_gain_update(model, g, &trial.offgrid, f, triples) {
            let j = ml_objective(model, g, &trial, triples, &z);
            if j < best.0 {
                best = (j, f, z);
            }
        }
    }
    st.doppler = best.1;
    *gains = best.2;
}

/// Two-column text table `iteration relative_residual`.
pub fn residual_history_table(history: &[f64]) -> String {
    let mut out = String::from("iteration relative_residual\n");
    for (i, h) in history.iter().enumerate() {
        out.push_str(&format!("{i} {h:.12e}\n"));
    }
    out
}
