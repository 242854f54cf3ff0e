//! Per-pilot beams: BS combiners aligned with the BS direction, random-phase
//! or multi-beam IRS reflections and user precoders.
//!
//! Reported beam gains use the convention `|vᵀa|² / N`, so a phase-matched
//! beam scores `N`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{bs_irs_angles, far_field_arv, unit, PilotBeams, Scenario};
use crate::error::{Error, Result};
use crate::grid::{polar_atom, GridSet};
use crate::priors::{lattice_neighbors, wrap_phase};
use crate::tensor::{CMat, CVec, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    /// Relative spread `(max - min) / max` allowed among target gains.
    pub spread: f64,
    pub restarts: usize,
    pub iterations: usize,
    pub penalty: f64,
    /// The penalty acts on `margin · spread` so accepted beams keep some slack.
    pub margin: f64,
    /// Lattice radius of the candidate expansion.
    pub radius: usize,
    /// Design tracking-phase IRS and user beams; random phases otherwise.
    pub design_tracking: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { spread: 0.5, restarts: 20, iterations: 300, penalty: 10.0, margin: 0.9, radius: 1, design_tracking: true }
    }
}

fn random_phases(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
}

/// `[W_p]_{:,r} = e^{jθ_{r,p}} a_B(ϑ_B)` with uniform random `θ`.
pub fn bs_combiner(bs_angle: f64, s: &Scenario, pilots: usize, seed: u64) -> Vec<CMat> {
    let ab = far_field_arv(bs_angle, s.n_b, s.wavelength(), s.spacing());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pilots)
        .map(|_| {
            let th = random_phases(&mut rng, s.r_b);
            CMat::from_fn(s.n_b, s.r_b, |i, r| ab[i] * unit(th[r]))
        })
        .collect()
}

pub fn random_phase_irs(n: usize, pilots: usize, seed: u64) -> Vec<CVec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pilots).map(|_| CVec::from_iterator(n, random_phases(&mut rng, n).into_iter().map(unit))).collect()
}

/// Active polar indices and their lattice neighbors within `radius`, sorted.
pub fn expand_candidates(active: &[usize], radius: usize, g: &GridSet) -> Vec<usize> {
    let mut set: BTreeSet<usize> = active.iter().copied().collect();
    let mut frontier: Vec<usize> = active.to_vec();
    for _ in 0..radius {
        let next: Vec<usize> = frontier
            .iter()
            .flat_map(|&m| lattice_neighbors(m, g.angle_count, g.rings))
            .filter(|m| !set.contains(m))
            .collect();
        set.extend(&next);
        frontier = next;
    }
    set.into_iter().collect()
}

/// Contiguous blocks of `⌊Q/P⌋` indices; the last block takes the remainder.
pub fn exploration_partition(remaining: &[usize], pilots: usize) -> Vec<Vec<usize>> {
    if pilots == 0 {
        return Vec::new();
    }
    let size = remaining.len() / pilots;
    (0..pilots)
        .map(|p| {
            let end = if p + 1 == pilots { remaining.len() } else { (p + 1) * size };
            remaining[p * size..end].to_vec()
        })
        .collect()
}

/// Normalized gains `|vᵀa_q|² / N` of every target.
pub fn beam_gains(v: &CVec, targets: &[CVec]) -> Vec<f64> {
    let n = v.len() as f64;
    targets.iter().map(|a| v.iter().zip(a.iter()).map(|(x, y)| x * y).sum::<C64>().norm_sqr() / n).collect()
}

/// `Σ g_q - λ Σ max(0, (1-ε) max g - g_q)²`.
fn multibeam_objective(gains: &[f64], spread: f64, penalty: f64) -> f64 {
    let top = gains.iter().cloned().fold(0.0, f64::max);
    let viol: f64 = gains.iter().map(|&g| ((1.0 - spread) * top - g).max(0.0).powi(2)).sum();
    gains.iter().sum::<f64>() - penalty * viol
}

fn multibeam_gradient(theta: &[f64], targets: &[CVec], spread: f64, penalty: f64) -> Vec<f64> {
    let n = theta.len();
    let v: Vec<C64> = theta.iter().map(|&t| unit(t)).collect();
    let c: Vec<C64> = targets.iter().map(|a| v.iter().zip(a.iter()).map(|(x, y)| x * y).sum()).collect();
    let gains: Vec<f64> = c.iter().map(|z| z.norm_sqr() / n as f64).collect();
    let (imax, top) = gains.iter().enumerate().fold((0, 0.0), |b, (i, &g)| if g > b.1 { (i, g) } else { b });
    // d objective / d g_q
    let mut w = vec![1.0; gains.len()];
    for (q, &g) in gains.iter().enumerate() {
        let viol = ((1.0 - spread) * top - g).max(0.0);
        if viol > 0.0 {
            w[q] += 2.0 * penalty * viol;
            w[imax] -= 2.0 * penalty * viol * (1.0 - spread);
        }
    }
    (0..n)
        .map(|i| {
            targets
                .iter()
                .enumerate()
                .map(|(q, a)| w[q] * 2.0 * (c[q].conj() * C64::new(0.0, 1.0) * v[i] * a[i]).re / n as f64)
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultibeamResult {
    pub beam: CVec,
    pub gains: Vec<f64>,
    pub objective: f64,
    /// Objective after every accepted ascent step of the winning restart.
    pub trace: Vec<f64>,
    pub restart: usize,
    pub spread_met: bool,
}

/// Unit-modulus beam with quasi-constant gain on every target, by entrywise
/// phase ascent from `cfg.restarts` random starts.
pub fn multibeam_design(targets: &[CVec], cfg: &BeamConfig, seed: u64) -> Result<MultibeamResult> {
    let n = targets.first().map(|a| a.len()).ok_or(Error::EmptyCandidates)?;
    if targets.len() > n {
        return Err(Error::Infeasible(format!("{} beams on {n} elements", targets.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<MultibeamResult> = None;
    let limit = cfg.spread * cfg.margin;
    for restart in 0..cfg.restarts.max(1) {
        // Restart 0 starts from the phases of the matched-beam superposition.
        let mut theta = if restart == 0 {
            (0..n).map(|i| wrap_phase(-targets.iter().map(|a| a[i] / a[i].norm()).sum::<C64>().arg())).collect()
        } else {
            random_phases(&mut rng, n)
        };
        let eval = |th: &[f64]| {
            let v = CVec::from_iterator(n, th.iter().map(|&t| unit(t)));
            multibeam_objective(&beam_gains(&v, targets), limit, cfg.penalty)
        };
        let mut obj = eval(&theta);
        let mut trace = vec![obj];
        let mut step = 0.5;
        for _ in 0..cfg.iterations {
            let grad = multibeam_gradient(&theta, targets, limit, cfg.penalty);
            let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            if gmax < 1e-12 {
                break;
            }
            let mut accepted = false;
            while step > 1e-9 {
                let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| wrap_phase(t + step * g / gmax)).collect();
                let o = eval(&trial);
                if o >= obj {
                    theta = trial;
                    obj = o;
                    trace.push(obj);
                    accepted = true;
                    step = (step * 1.5).min(1.0);
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let better = best.as_ref().is_none_or(|b| obj > b.objective);
        if better {
            let beam = CVec::from_iterator(n, theta.iter().map(|&t| unit(t)));
            let gains = beam_gains(&beam, targets);
            let top = gains.iter().cloned().fold(0.0, f64::max);
            let low = gains.iter().cloned().fold(f64::INFINITY, f64::min);
            let spread_met = top - low <= cfg.spread * top;
            best = Some(MultibeamResult { beam, gains, objective: obj, trace, restart, spread_met });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Random unit-modulus precoders for the estimation phase.
pub fn random_precoder(n_u: usize, pilots: usize, seed: u64) -> Vec<CVec> {
    random_phase_irs(n_u, pilots, seed)
}

/// User-side target `a_U*(φ)`, matching the precoder's `f_pᵀ a_U*(φ)` coupling.
pub fn user_target(phi: f64, s: &Scenario) -> CVec {
    far_field_arv(phi, s.n_u, s.wavelength(), s.spacing()).map(|z| z.conj())
}

/// Tracking-phase precoders: multi-beam over the estimated user angles plus
/// a per-pilot share of the remaining grid angles.
pub fn user_precoder(angles: &[f64], g: &GridSet, s: &Scenario, pilots: usize, cfg: &BeamConfig, seed: u64) -> Vec<CVec> {
    if angles.is_empty() {
        return random_precoder(s.n_u, pilots, seed);
    }
    let known: Vec<usize> = angles.iter().map(|&a| crate::grid::nearest(&g.user_angles, a)).collect();
    let rest: Vec<usize> = (0..g.n_u()).filter(|u| !known.contains(u)).collect();
    let blocks = exploration_partition(&rest, pilots);
    (0..pilots)
        .map(|p| {
            let mut targets: Vec<CVec> = angles.iter().map(|&a| user_target(a, s)).collect();
            targets.extend(blocks[p].iter().map(|&u| user_target(g.user_angles[u], s)));
            match multibeam_design(&targets, cfg, seed.wrapping_add(p as u64)) {
                Ok(r) => r.beam,
                Err(_) => random_precoder(s.n_u, 1, seed.wrapping_add(p as u64)).remove(0),
            }
        })
        .collect()
}

/// Tracking-phase IRS beams from the previous active polar indices and
/// their refined positions. Falls back to random phases per pilot when the
/// beam budget is infeasible.
pub fn tracking_irs_beams(
    active: &[(usize, f64, f64)],
    g: &GridSet,
    s: &Scenario,
    pilots: usize,
    cfg: &BeamConfig,
    seed: u64,
) -> Vec<CVec> {
    let ms: Vec<usize> = active.iter().map(|a| a.0).collect();
    if ms.is_empty() {
        return random_phase_irs(s.n_r, pilots, seed);
    }
    let exploit = expand_candidates(&ms, cfg.radius, g);
    let rest: Vec<usize> = (0..g.n_bar_r()).filter(|m| exploit.binary_search(m).is_err()).collect();
    let blocks = exploration_partition(&rest, pilots);
    let target_of = |m: usize| match active.iter().find(|a| a.0 == m) {
        Some(&(_, angle, distance)) => polar_atom(angle, distance, s),
        None => polar_atom(g.polar_angles[m], g.polar_distances[m], s),
    };
    (0..pilots)
        .map(|p| {
            let mut targets: Vec<CVec> = exploit.iter().map(|&m| target_of(m)).collect();
            targets.extend(blocks[p].iter().map(|&m| target_of(m)));
            match multibeam_design(&targets, cfg, seed.wrapping_add(p as u64)) {
                Ok(r) => r.beam,
                Err(_) => random_phase_irs(s.n_r, 1, seed.wrapping_add(1000 + p as u64)).remove(0),
            }
        })
        .collect()
}

/// Estimation-phase plan: aligned combiners, random precoders and reflections.
pub fn estimation_plan(s: &Scenario, pilots: usize, seed: u64) -> Vec<PilotBeams> {
    let (bs_angle, _) = bs_irs_angles(s);
    let w = bs_combiner(bs_angle, s, pilots, seed);
    let f = random_precoder(s.n_u, pilots, seed ^ 0x5151);
    let v = random_phase_irs(s.n_r, pilots, seed ^ 0xa3a3);
    w.into_iter().zip(f).zip(v).map(|((w, f), v)| PilotBeams { w, f, v }).collect()
}

/// Text form: per pilot, combiner column phases then precoder and IRS element phases (rad).
pub fn plan_to_text(plan: &[PilotBeams], s: &Scenario) -> String {
    let (bs_angle, _) = bs_irs_angles(s);
    let ab0 = far_field_arv(bs_angle, s.n_b, s.wavelength(), s.spacing())[0];
    let join = |v: Vec<f64>| v.iter().map(|x| format!("{x:.15}")).collect::<Vec<_>>().join(" ");
    let mut out = String::from("# gain convention |v^T a|^2 / N\n");
    for (p, b) in plan.iter().enumerate() {
        out.push_str(&format!("pilot {p}\n"));
        out.push_str(&format!("w {}\n", join((0..b.w.ncols()).map(|r| wrap_phase((b.w[(0, r)] / ab0).arg())).collect())));
        out.push_str(&format!("f {}\n", join(b.f.iter().map(|z| wrap_phase(z.arg())).collect())));
        out.push_str(&format!("v {}\n", join(b.v.iter().map(|z| wrap_phase(z.arg())).collect())));
    }
    out
}

pub fn plan_from_text(text: &str, s: &Scenario) -> Result<Vec<PilotBeams>> {
    let (bs_angle, _) = bs_irs_angles(s);
    let ab = far_field_arv(bs_angle, s.n_b, s.wavelength(), s.spacing());
    let bad = |m: &str| Error::InvalidParameter(format!("beam plan text: {m}"));
    let parse = |line: &str, key: &str| -> Result<Vec<f64>> {
        let rest = line.strip_prefix(key).ok_or_else(|| bad(&format!("expected {key}")))?;
        rest.split_whitespace().map(|t| t.parse::<f64>().map_err(|_| bad("phase"))).collect()
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).collect();
    if lines.len() % 4 != 0 {
        return Err(bad("truncated plan"));
    }
    lines
        .chunks(4)
        .map(|c| {
            let w = parse(c[1], "w ")?;
            let f = parse(c[2], "f ")?;
            let v = parse(c[3], "v ")?;
            Ok(PilotBeams {
                w: CMat::from_fn(s.n_b, w.len(), |i, r| ab[i] * unit(w[r])),
                f: CVec::from_iterator(f.len(), f.into_iter().map(unit)),
                v: CVec::from_iterator(v.len(), v.into_iter().map(unit)),
            })
        })
        .collect()
}
