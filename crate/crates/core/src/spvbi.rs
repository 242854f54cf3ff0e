//! Stage II Module A: particle-based mean-field posterior over gains,
//! supports, DFO and off-grid perturbations, optimized by stochastic
//! successive convex approximation.
//!
//! Continuous particles live in a box `center ± half`; updates run in the
//! normalized coordinate `x = (p - center) / half ∈ [-1, 1]`. Support
//! variables have the two fixed positions `(+1, -1)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSet, OffGridState};
use crate::model::{AtomGeom, ObservationModel, Param};
use crate::omp::{ls_gain_update, CoarseEstimate, Coord, RefineState, Triple};
use crate::priors::{
    amplitude_phase_log_prior, cdg_log_pdf_grad, support_conditional, wrap_diff, wrap_phase, AtomPosterior,
    FramePosterior, FramePrior, Gaussian, SpatialPriorParams, LOG_FLOOR,
};
use crate::support_mp::SupportConfig;
use crate::tensor::C64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpvbiConfig {
    pub particles: usize,
    pub batch: usize,
    pub omega_p: f64,
    pub omega_w: f64,
    pub eps_w: f64,
    /// Box half-width `max(box_rel·|κ̇|, box_floor·unit)`.
    pub box_rel: f64,
    pub box_floor: f64,
    pub max_iterations: usize,
    pub min_iterations: usize,
    pub kl_window: usize,
    pub kl_tol: f64,
    pub kl_samples: usize,
    /// Module B and turbo-loop settings.
    pub support: SupportConfig,
    /// Skip gain updates of atoms whose support MAP is inactive.
    pub gate_by_support: bool,
    /// Scale the position step by the Gauss-Newton curvature.
    pub curvature_scaled: bool,
    /// Replace the particle-mean gains of active atoms by the least-squares
    /// fit at the posterior coordinates.
    pub ls_gains: bool,
    /// Likelihood-descent sweeps applied to the point estimate of active
    /// atoms; 0 reports the posterior means unchanged.
    pub polish_sweeps: usize,
}

impl Default for SpvbiConfig {
    fn default() -> Self {
        Self {
            particles: 10,
            batch: 15,
            omega_p: 1.0,
            omega_w: 1.0,
            eps_w: 1e-3,
            box_rel: 0.1,
            box_floor: 0.05,
            max_iterations: 40,
            min_iterations: 5,
            kl_window: 5,
            kl_tol: 0.01,
            kl_samples: 16,
            support: SupportConfig::default(),
            gate_by_support: true,
            curvature_scaled: true,
            ls_gains: true,
            polish_sweeps: 20,
        }
    }
}

/// `ρ⁽ⁱ⁾ = 5 / (5 + (i-1)^0.9)` for 1-based `i`.
pub fn rho(i: usize) -> f64 {
    5.0 / (5.0 + ((i.max(1) - 1) as f64).powf(0.9))
}

/// `γ⁽ⁱ⁾ = 5 / (15 + (i-1))` for 1-based `i`.
pub fn gamma(i: usize) -> f64 {
    5.0 / (15.0 + (i.max(1) - 1) as f64)
}

/// Euclidean projection onto `{w : Σw = 1, w ≥ floor}`.
pub fn simplex_project(v: &[f64], floor: f64) -> Result<Vec<f64>> {
    let n = v.len();
    if n == 0 || floor < 0.0 || floor * n as f64 >= 1.0 {
        return Err(Error::Infeasible(format!("floor {floor} with {n} particles")));
    }
    // Feasible points are returned bit-for-bit, which makes the map idempotent.
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= floor) && (sum - 1.0).abs() <= 8.0 * f64::EPSILON * n as f64 {
        return Ok(v.to_vec());
    }
    let c = 1.0 - floor * n as f64;
    let mut y: Vec<f64> = v.iter().map(|x| x - floor).collect();
    y.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &yj) in y.iter().enumerate() {
        cum += yj;
        let t = (cum - c) / (j + 1) as f64;
        if yj - t > 0.0 {
            theta = t;
        }
    }
    Ok(v.iter().map(|x| (x - floor - theta).max(0.0) + floor).collect())
}

/// `(Σ p w, Σ p² w - mean²)`.
pub fn gaussian_moments(positions: &[f64], weights: &[f64]) -> (f64, f64) {
    let mean: f64 = positions.iter().zip(weights).map(|(p, w)| p * w).sum();
    let second: f64 = positions.iter().zip(weights).map(|(p, w)| p * p * w).sum();
    (mean, (second - mean * mean).max(0.0))
}

/// Extrinsic `q(+1)/g(+1)` against `q(-1)/g(-1)`, renormalized; returns the `+1` mass.
pub fn extrinsic_message(q_on: f64, incoming_on: f64) -> f64 {
    let a = q_on.max(LOG_FLOOR) / incoming_on.max(LOG_FLOOR);
    let b = (1.0 - q_on).max(LOG_FLOOR) / (1.0 - incoming_on).max(LOG_FLOOR);
    a / (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarKind {
    AtomSupport(usize),
    Magnitude(usize),
    Phase(usize),
    UserSupport(usize),
    PolarSupport(usize),
    DelaySupport(usize),
    Continuous(Coord),
}

impl VarKind {
    pub fn is_binary(&self) -> bool {
        matches!(self, VarKind::AtomSupport(_) | VarKind::UserSupport(_) | VarKind::PolarSupport(_) | VarKind::DelaySupport(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub kind: VarKind,
    pub positions: Vec<f64>,
    pub weights: Vec<f64>,
    pub center: f64,
    pub half: f64,
    /// Gradient trackers, positions in normalized units.
    pub fp: Vec<f64>,
    pub fw: Vec<f64>,
    /// Tracked Gauss-Newton curvature per particle, normalized units.
    pub fh: Vec<f64>,
}

impl ParticleSet {
    /// `p_k = center - (2Δ/N)((N+1)/2 - k)` with uniform weights.
    pub fn continuous(kind: VarKind, center: f64, half: f64, n: usize) -> Result<Self> {
        if !(half > 0.0) || n == 0 {
            return Err(Error::InvalidParameter(format!("zero box width for {kind:?}")));
        }
        let nf = n as f64;
        let positions = (1..=n).map(|k| center - 2.0 * half / nf * ((nf + 1.0) / 2.0 - k as f64)).collect();
        Ok(Self { kind, positions, weights: vec![1.0 / nf; n], center, half, fp: vec![0.0; n], fw: vec![0.0; n], fh: vec![0.0; n] })
    }

    /// Positions `(+1, -1)` with `q(+1) = p_on`, kept strictly inside `(eps, 1-eps)`.
    pub fn binary(kind: VarKind, p_on: f64, eps: f64) -> Self {
        let lo = 2.0 * eps;
        let on = p_on.clamp(lo, 1.0 - lo);
        Self { kind, positions: vec![1.0, -1.0], weights: vec![on, 1.0 - on], center: 0.0, half: 1.0, fp: vec![0.0; 2], fw: vec![0.0; 2], fh: vec![0.0; 2] }
    }

    pub fn moments(&self) -> (f64, f64) {
        gaussian_moments(&self.positions, &self.weights)
    }

    pub fn prob_on(&self) -> f64 {
        self.weights[0]
    }

    pub fn map(&self) -> f64 {
        let k = (0..self.weights.len()).max_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b])).expect("non-empty");
        self.positions[k]
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }

    pub fn entropy(&self) -> f64 {
        -self.weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.len() - 1
    }

    /// Circular mean and spread, for phase variables.
    pub fn circular_moments(&self) -> (f64, f64) {
        let z: C64 = self.positions.iter().zip(&self.weights).map(|(p, w)| C64::from_polar(*w, *p)).sum();
        let mean = wrap_phase(z.arg());
        let var = self.positions.iter().zip(&self.weights).map(|(p, w)| w * wrap_diff(p - mean).powi(2)).sum();
        (mean, var)
    }
}

/// Estimation-phase priors. Support probabilities are full-grid vectors of
/// `q(+1)` messages from Module B.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationPriors {
    /// CDG scale `σ_H σ_G`.
    pub scale: f64,
    pub spatial: SpatialPriorParams,
    pub user_on: Vec<f64>,
    pub polar_on: Vec<f64>,
    pub delay_on: Vec<f64>,
    pub max_doppler: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModulePriors {
    Estimation(EstimationPriors),
    Tracking { prior: FramePrior, spatial: SpatialPriorParams, support_on: f64 },
}

/// Per-atom Tracking priors resolved against the current support.
#[derive(Debug, Clone, PartialEq)]
struct AtomTrackPrior {
    magnitude: Gaussian,
    phase: Gaussian,
    on: f64,
}

impl AtomTrackPrior {
    /// Complex-Gaussian summary `(m e^{jω̄}, Σ_ν + m² Σ_ω)` to first order.
    fn gain_prior(&self) -> (C64, f64) {
        let m = self.magnitude.mean;
        let var = self.magnitude.var + m * m * self.phase.var;
        (C64::from_polar(m, self.phase.mean), var.max(f64::MIN_POSITIVE))
    }
}

/// Log-joint of the current frame over a fixed active atom list.
#[derive(Debug, Clone)]
pub struct JointModel<'a> {
    pub model: &'a ObservationModel,
    pub g: &'a GridSet,
    pub triples: Vec<Triple>,
    pub vars: Vec<VarKind>,
    /// Values of coordinates that are not variables.
    pub base: RefineState,
    priors: ModulePriors,
    atom_vars: Vec<[usize; 3]>,
    atom_coords: Vec<[Option<usize>; 4]>,
    atom_parents: Vec<[Option<usize>; 3]>,
    doppler_var: Option<usize>,
    deps: Vec<Vec<usize>>,
    track: Vec<AtomTrackPrior>,
    coord_prior: Vec<Option<Gaussian>>,
    ln_norm: f64,
}

fn coord_key(c: Coord) -> (u8, usize) {
    match c {
        Coord::Doppler => (0, 0),
        Coord::User(u) => (1, u),
        Coord::PolarAngle(m) => (2, m),
        Coord::PolarDistance(m) => (3, m),
        Coord::Delay(k) => (4, k),
    }
}

impl<'a> JointModel<'a> {
    /// Builds the variable list in sweep order: supports, magnitudes and
    /// phases, off-grid coordinates, DFO. `coords` are the continuous
    /// coordinates treated as variables; the others stay at `coarse`.
    pub fn new(model: &'a ObservationModel, g: &'a GridSet, coarse: &CoarseEstimate, coords: &[Coord], priors: ModulePriors) -> Self {
        let triples = coarse.triples.clone();
        let l = triples.len();
        let mut vars = Vec::new();
        vars.extend((0..l).map(VarKind::AtomSupport));
        let uniq = |f: &dyn Fn(&Triple) -> usize| {
            let mut v: Vec<usize> = triples.iter().map(f).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let (us, ms, ks) = (uniq(&|t| t.0), uniq(&|t| t.1), uniq(&|t| t.2));
        let estimation = matches!(priors, ModulePriors::Estimation(_));
        if estimation {
            vars.extend(us.iter().map(|&u| VarKind::UserSupport(u)));
            vars.extend(ms.iter().map(|&m| VarKind::PolarSupport(m)));
            vars.extend(ks.iter().map(|&k| VarKind::DelaySupport(k)));
        }
        for n in 0..l {
            vars.push(VarKind::Magnitude(n));
            vars.push(VarKind::Phase(n));
        }
        let mut cs: Vec<Coord> = coords.to_vec();
        cs.sort_by_key(|&c| {
            let (a, b) = coord_key(c);
            // DFO last.
            (if a == 0 { 9 } else { a }, b)
        });
        vars.extend(cs.iter().map(|&c| VarKind::Continuous(c)));
        let find = |kind: VarKind| vars.iter().position(|v| *v == kind);
        let atom_vars = (0..l)
            .map(|n| {
                [
                    find(VarKind::AtomSupport(n)).expect("support var"),
                    find(VarKind::Magnitude(n)).expect("magnitude var"),
                    find(VarKind::Phase(n)).expect("phase var"),
                ]
            })
            .collect();
        let atom_coords = triples
            .iter()
            .map(|&(u, m, k)| {
                [
                    find(VarKind::Continuous(Coord::User(u))),
                    find(VarKind::Continuous(Coord::PolarAngle(m))),
                    find(VarKind::Continuous(Coord::PolarDistance(m))),
                    find(VarKind::Continuous(Coord::Delay(k))),
                ]
            })
            .collect();
        let atom_parents = triples
            .iter()
            .map(|&(u, m, k)| [find(VarKind::UserSupport(u)), find(VarKind::PolarSupport(m)), find(VarKind::DelaySupport(k))])
            .collect();
        let doppler_var = find(VarKind::Continuous(Coord::Doppler));
        let deps = vars
            .iter()
            .map(|v| match *v {
                VarKind::AtomSupport(n) | VarKind::Magnitude(n) | VarKind::Phase(n) => vec![n],
                VarKind::Continuous(Coord::Doppler) => (0..l).collect(),
                VarKind::Continuous(Coord::User(u)) => (0..l).filter(|&n| triples[n].0 == u).collect(),
                VarKind::Continuous(Coord::PolarAngle(m)) | VarKind::Continuous(Coord::PolarDistance(m)) => {
                    (0..l).filter(|&n| triples[n].1 == m).collect()
                }
                VarKind::Continuous(Coord::Delay(k)) => (0..l).filter(|&n| triples[n].2 == k).collect(),
                _ => Vec::new(),
            })
            .collect();
        let (track, coord_prior) = resolve_priors(&priors, g, &triples, coarse, &vars);
        let ln_norm = -(model.observations as f64) * (PI * model.noise_power).ln();
        Self {
            model,
            g,
            triples,
            vars,
            base: RefineState { doppler: coarse.doppler, offgrid: coarse.offgrid.clone() },
            priors,
            atom_vars,
            atom_coords,
            atom_parents,
            doppler_var,
            deps,
            track,
            coord_prior,
            ln_norm,
        }
    }

    pub fn priors(&self) -> &ModulePriors {
        &self.priors
    }

    pub fn var_index(&self, kind: VarKind) -> Option<usize> {
        self.vars.iter().position(|v| *v == kind)
    }

    pub fn doppler(&self, a: &[f64]) -> f64 {
        self.doppler_var.map_or(self.base.doppler, |i| a[i])
    }

    pub fn atom_geom(&self, a: &[f64], n: usize) -> AtomGeom {
        let (u, m, k) = self.triples[n];
        let og = &self.base.offgrid;
        let c = &self.atom_coords[n];
        let val = |slot: usize, fallback: f64| c[slot].map_or(fallback, |i| a[i]);
        AtomGeom {
            user_angle: self.g.user_angles[u] + val(0, og.user[u]),
            polar_angle: self.g.polar_angles[m] + val(1, og.polar_angle[m]),
            polar_distance: self.g.polar_distances[m] + val(2, og.polar_distance[m]),
            delay: self.g.delays[k] + val(3, og.delay[k]),
        }
    }

    pub fn atom_gain(&self, a: &[f64], n: usize) -> C64 {
        let [s, nu, om] = self.atom_vars[n];
        if a[s] > 0.0 { C64::from_polar(a[nu], a[om]) } else { C64::new(0.0, 0.0) }
    }

    fn residual(&self, a: &[f64]) -> (Vec<Vec<C64>>, Vec<C64>, Vec<C64>) {
        let fd = self.doppler(a);
        let resp: Vec<Vec<C64>> = (0..self.triples.len()).map(|n| self.model.response(&self.atom_geom(a, n), fd)).collect();
        let z: Vec<C64> = (0..self.triples.len()).map(|n| self.atom_gain(a, n)).collect();
        let r = self.model.residual(&resp, &z, &self.model.data());
        (resp, z, r)
    }

    /// Gaussian log-likelihood including its normalizer.
    pub fn log_likelihood(&self, a: &[f64]) -> f64 {
        let (_, _, r) = self.residual(a);
        self.ln_norm - self.model.energy(&r) / self.model.noise_power
    }

    pub fn log_likelihood_of_energy(&self, energy: f64) -> f64 {
        self.ln_norm - energy / self.model.noise_power
    }

    pub fn log_prior(&self, a: &[f64]) -> f64 {
        let mut total = 0.0;
        let bern = |on: f64, s: f64| if s > 0.0 { on.max(LOG_FLOOR).ln() } else { (1.0 - on).max(LOG_FLOOR).ln() };
        for n in 0..self.triples.len() {
            let [s, nu, om] = self.atom_vars[n];
            let active = a[s] > 0.0;
            match &self.priors {
                ModulePriors::Estimation(ep) => {
                    total += amplitude_phase_log_prior(a[nu], a[om], active, ep.scale);
                    let parents = self.atom_parents[n].map(|p| p.map_or(1, |i| if a[i] > 0.0 { 1i8 } else { -1 }));
                    total += support_conditional(active, parents, ep.spatial.p_s).max(LOG_FLOOR).ln();
                }
                ModulePriors::Tracking { .. } => {
                    let tp = &self.track[n];
                    total += if active {
                        tp.magnitude.log_pdf(a[nu]) + Gaussian { mean: 0.0, var: tp.phase.var }.log_pdf(wrap_diff(a[om] - tp.phase.mean))
                    } else {
                        -tp.magnitude.mean.abs().max(f64::MIN_POSITIVE).ln() - (2.0 * PI).ln()
                    };
                    total += bern(tp.on, a[s]);
                }
            }
        }
        for (i, v) in self.vars.iter().enumerate() {
            match (*v, &self.priors) {
                (VarKind::UserSupport(u), ModulePriors::Estimation(ep)) => total += bern(ep.user_on[u], a[i]),
                (VarKind::PolarSupport(m), ModulePriors::Estimation(ep)) => total += bern(ep.polar_on[m], a[i]),
                (VarKind::DelaySupport(k), ModulePriors::Estimation(ep)) => total += bern(ep.delay_on[k], a[i]),
                (VarKind::Continuous(Coord::Doppler), ModulePriors::Estimation(ep)) => {
                    total += if (0.0..=ep.max_doppler).contains(&a[i]) { -ep.max_doppler.ln() } else { LOG_FLOOR.ln() * 1e3 };
                }
                (VarKind::Continuous(_), _) => {
                    if let Some(gp) = self.coord_prior[i] {
                        total += gp.log_pdf(a[i]);
                    }
                }
                _ => {}
            }
        }
        total
    }

    pub fn log_joint(&self, a: &[f64]) -> f64 {
        self.log_likelihood(a) + self.log_prior(a)
    }

    /// Derivative of the log-prior along continuous variable `i`.
    fn prior_grad(&self, a: &[f64], i: usize) -> f64 {
        match self.vars[i] {
            VarKind::Magnitude(n) => {
                let active = a[self.atom_vars[n][0]] > 0.0;
                match &self.priors {
                    ModulePriors::Estimation(ep) if active => cdg_log_pdf_grad(a[i], ep.scale),
                    ModulePriors::Tracking { .. } if active => self.track[n].magnitude.grad_log_pdf(a[i]),
                    _ => 0.0,
                }
            }
            VarKind::Phase(n) => match &self.priors {
                ModulePriors::Tracking { .. } if a[self.atom_vars[n][0]] > 0.0 => {
                    -wrap_diff(a[i] - self.track[n].phase.mean) / self.track[n].phase.var
                }
                _ => 0.0,
            },
            VarKind::Continuous(_) => self.coord_prior[i].map_or(0.0, |gp| gp.grad_log_pdf(a[i])),
            _ => 0.0,
        }
    }

    /// Curvature of the negative log-prior along continuous variable `i`;
    /// zero for the CDG amplitude term.
    fn prior_curvature(&self, a: &[f64], i: usize) -> f64 {
        match self.vars[i] {
            VarKind::Magnitude(n) | VarKind::Phase(n) => match &self.priors {
                ModulePriors::Tracking { .. } if a[self.atom_vars[n][0]] > 0.0 => {
                    let gp = if matches!(self.vars[i], VarKind::Magnitude(_)) { self.track[n].magnitude } else { self.track[n].phase };
                    1.0 / gp.var
                }
                _ => 0.0,
            },
            VarKind::Continuous(_) => self.coord_prior[i].map_or(0.0, |gp| 1.0 / gp.var),
            _ => 0.0,
        }
    }

    /// `d ln p / dκ_i` along continuous variable `i`.
    pub fn log_joint_grad(&self, a: &[f64], i: usize) -> f64 {
        let (resp, z, r) = self.residual(a);
        self.likelihood_grad(a, i, &resp, &z, &r).0 + self.prior_grad(a, i)
    }

    /// Likelihood derivative along `i` and its Gauss-Newton curvature
    /// `(2/σ²)‖∂μ/∂κ_i‖²`.
    fn likelihood_grad(&self, a: &[f64], i: usize, resp: &[Vec<C64>], z: &[C64], r: &[C64]) -> (f64, f64) {
        let s2 = self.model.noise_power;
        let fd = self.doppler(a);
        let both = |d: &[C64]| (2.0 / s2 * self.model.inner(r, d).re, 2.0 / s2 * self.model.inner(d, d).re);
        match self.vars[i] {
            VarKind::Magnitude(n) => {
                let [s, _, om] = self.atom_vars[n];
                if a[s] <= 0.0 {
                    return (0.0, 0.0);
                }
                let e = C64::from_polar(1.0, a[om]);
                let d: Vec<C64> = resp[n].iter().map(|x| x * e).collect();
                both(&d)
            }
            VarKind::Phase(n) => {
                let d: Vec<C64> = resp[n].iter().map(|x| x * z[n] * C64::new(0.0, 1.0)).collect();
                both(&d)
            }
            VarKind::Continuous(c) => {
                let param = match c {
                    Coord::Doppler => Param::Doppler,
                    Coord::User(_) => Param::UserAngle,
                    Coord::PolarAngle(_) => Param::PolarAngle,
                    Coord::PolarDistance(_) => Param::PolarDistance,
                    Coord::Delay(_) => Param::Delay,
                };
                let mut sum = vec![C64::new(0.0, 0.0); r.len()];
                for &n in &self.deps[i] {
                    if z[n] == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let (_, d) = self.model.response_grad(&self.atom_geom(a, n), fd, param);
                    for (acc, x) in sum.iter_mut().zip(&d) {
                        *acc += x * z[n];
                    }
                }
                both(&sum)
            }
            _ => (0.0, 0.0),
        }
    }

    /// `(ln p, d ln p/dκ_i, curvature)` with variable `i` set to each of
    /// `values`, all other variables as in `a`. Derivatives are zero unless `grad`.
    pub fn eval_variable(&self, a: &mut [f64], i: usize, values: &[f64], grad: bool) -> Vec<(f64, f64, f64)> {
        let (resp, z, r) = self.residual(a);
        let keep = a[i];
        let is_coord = matches!(self.vars[i], VarKind::Continuous(_));
        let mut out = Vec::with_capacity(values.len());
        for &v in values {
            a[i] = v;
            let mut r2 = r.clone();
            let mut resp2: Vec<Vec<C64>> = Vec::new();
            let mut z2 = z.clone();
            let fd = self.doppler(a);
            for &n in &self.deps[i] {
                let zn = self.atom_gain(a, n);
                let new_resp = if is_coord { self.model.response(&self.atom_geom(a, n), fd) } else { resp[n].clone() };
                for j in 0..r2.len() {
                    r2[j] += z[n] * resp[n][j] - zn * new_resp[j];
                }
                z2[n] = zn;
                resp2.push(new_resp);
            }
            let lp = self.log_likelihood_of_energy(self.model.energy(&r2)) + self.log_prior(a);
            let (gr, h) = if grad {
                let mut full = resp.clone();
                for (slot, &n) in self.deps[i].iter().enumerate() {
                    full[n] = resp2[slot].clone();
                }
                let (lg, lh) = self.likelihood_grad(a, i, &full, &z2, &r2);
                (lg + self.prior_grad(a, i), lh + self.prior_curvature(a, i))
            } else {
                (0.0, 0.0)
            };
            out.push((lp, gr, h));
        }
        a[i] = keep;
        out
    }
}

fn resolve_priors(
    priors: &ModulePriors,
    g: &GridSet,
    triples: &[Triple],
    coarse: &CoarseEstimate,
    vars: &[VarKind],
) -> (Vec<AtomTrackPrior>, Vec<Option<Gaussian>>) {
    let spatial = match priors {
        ModulePriors::Estimation(ep) => &ep.spatial,
        ModulePriors::Tracking { spatial, .. } => spatial,
    };
    let static_var = |c: Coord| {
        let m = match c {
            Coord::PolarAngle(m) | Coord::PolarDistance(m) => m,
            _ => 0,
        };
        let v = spatial.offgrid_variances(g, m);
        match c {
            Coord::Doppler => None,
            Coord::User(_) => Some(Gaussian { mean: 0.0, var: v.user }),
            Coord::PolarAngle(_) => Some(Gaussian { mean: 0.0, var: v.polar_angle }),
            Coord::PolarDistance(_) => Some(Gaussian { mean: 0.0, var: v.polar_distance }),
            Coord::Delay(_) => Some(Gaussian { mean: 0.0, var: v.delay }),
        }
    };
    match priors {
        ModulePriors::Estimation(_) => {
            let cp = vars.iter().map(|v| if let VarKind::Continuous(c) = *v { static_var(c) } else { None }).collect();
            (Vec::new(), cp)
        }
        ModulePriors::Tracking { prior, support_on, .. } => {
            let track = triples
                .iter()
                .enumerate()
                .map(|(n, &(u, m, k))| {
                    let idx = g.linear_index(u, m, k);
                    match prior.atoms.iter().find(|a| a.0 == idx) {
                        Some(&(_, mag, ph, on)) => AtomTrackPrior { magnitude: mag, phase: ph, on },
                        None => {
                            let nu = coarse.gains[n].norm();
                            AtomTrackPrior {
                                magnitude: Gaussian { mean: nu, var: nu * nu },
                                phase: Gaussian { mean: wrap_phase(coarse.gains[n].arg()), var: 1e4 },
                                on: *support_on,
                            }
                        }
                    }
                })
                .collect();
            let lookup = |list: &[(usize, Gaussian)], i: usize| list.iter().find(|e| e.0 == i).map(|e| e.1);
            let cp = vars
                .iter()
                .map(|v| match *v {
                    VarKind::Continuous(Coord::Doppler) => Some(prior.doppler),
                    VarKind::Continuous(c @ Coord::User(u)) => lookup(&prior.user, u).or_else(|| static_var(c)),
                    VarKind::Continuous(c @ Coord::PolarAngle(m)) => lookup(&prior.polar_angle, m).or_else(|| static_var(c)),
                    VarKind::Continuous(c @ Coord::PolarDistance(m)) => lookup(&prior.polar_distance, m).or_else(|| static_var(c)),
                    VarKind::Continuous(c @ Coord::Delay(k)) => lookup(&prior.delay, k).or_else(|| static_var(c)),
                    _ => None,
                })
                .collect();
            (track, cp)
        }
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub kl: f64,
    pub max_entropy: f64,
    /// Log-joint evaluations spent in this iteration.
    pub evaluations: usize,
    /// Variables updated in this iteration and the sum of their particle counts.
    pub updated: usize,
    pub particle_sum: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleAOutput {
    pub posteriors: Vec<ParticleSet>,
    pub trace: Vec<TraceRow>,
    /// First iteration at which the KL window met the tolerance.
    pub converged_at: Option<usize>,
    /// Extrinsic `+1` messages toward Module B over the full grids; 0.5 where
    /// Module A holds no variable.
    pub user_out: Vec<f64>,
    pub polar_out: Vec<f64>,
    pub delay_out: Vec<f64>,
}

/// Point estimate extracted from Module A posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub triples: Vec<Triple>,
    pub gains: Vec<C64>,
    pub active: Vec<bool>,
    pub doppler: f64,
    pub offgrid: OffGridState,
}

impl PosteriorEstimate {
    pub fn geometry(&self, g: &GridSet) -> Vec<AtomGeom> {
        self.triples.iter().map(|&(u, m, k)| AtomGeom::at(g, &self.offgrid, u, m, k)).collect()
    }
}

/// Box centers, half-widths and unit scales for each variable.
fn box_for(jm: &JointModel, coarse: &CoarseEstimate, kind: VarKind, cfg: &SpvbiConfig, max_doppler: f64) -> (f64, f64) {
    let g = jm.g;
    let rule = |center: f64, unit: f64| (center, (cfg.box_rel * center.abs()).max(cfg.box_floor * unit));
    match kind {
        VarKind::Magnitude(n) => {
            let nu = coarse.gains[n].norm();
            rule(nu, nu)
        }
        VarKind::Phase(n) => rule(wrap_phase(coarse.gains[n].arg()), PI),
        VarKind::Continuous(c) => {
            let center = jm.base.get(c);
            let unit = match c {
                Coord::Doppler => max_doppler,
                Coord::User(_) => g.user_spacing() / 2.0,
                Coord::PolarAngle(_) => g.polar_spacing() / 2.0,
                Coord::PolarDistance(m) => g.ring_half_gap(m),
                Coord::Delay(_) => g.delay_spacing() / 2.0,
            };
            rule(center, unit)
        }
        _ => (0.0, 1.0),
    }
}

/// Initial particle sets: uniform spreads around the coarse estimate and
/// support weights from the phase priors.
pub fn init_particles(jm: &JointModel, coarse: &CoarseEstimate, cfg: &SpvbiConfig, max_doppler: f64) -> Result<Vec<ParticleSet>> {
    jm.vars
        .iter()
        .map(|&kind| {
            if kind.is_binary() {
                let on = match (kind, jm.priors()) {
                    (VarKind::AtomSupport(_), ModulePriors::Estimation(ep)) => ep.spatial.p_s,
                    (VarKind::AtomSupport(n), ModulePriors::Tracking { .. }) => jm.track[n].on,
                    (VarKind::UserSupport(u), ModulePriors::Estimation(ep)) => ep.user_on[u],
                    (VarKind::PolarSupport(m), ModulePriors::Estimation(ep)) => ep.polar_on[m],
                    (VarKind::DelaySupport(k), ModulePriors::Estimation(ep)) => ep.delay_on[k],
                    _ => 0.5,
                };
                Ok(ParticleSet::binary(kind, on, cfg.eps_w))
            } else {
                let (c, h) = box_for(jm, coarse, kind, cfg, max_doppler);
                ParticleSet::continuous(kind, c, h, cfg.particles)
            }
        })
        .collect()
}

fn draw(posts: &[ParticleSet], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let idx: Vec<usize> = posts.iter().map(|p| p.sample_index(rng)).collect();
    (posts.iter().zip(&idx).map(|(p, &k)| p.positions[k]).collect(), idx)
}

/// Fixed-seed Monte-Carlo estimate of `E_q[ln q - ln p(y, κ)]`.
pub fn sampled_kl(jm: &JointModel, posts: &[ParticleSet], samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples.max(1) {
        let (a, idx) = draw(posts, &mut rng);
        let lq: f64 = posts.iter().zip(&idx).map(|(p, &k)| p.weights[k].ln()).sum();
        acc += lq - jm.log_joint(&a);
    }
    acc / samples.max(1) as f64
}

/// Minibatch of co-variable samples with the gating rule applied.
fn minibatch(jm: &JointModel, posts: &[ParticleSet], i: usize, b: usize, gate: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            let (mut a, _) = draw(posts, rng);
            if gate {
                if let VarKind::Magnitude(n) | VarKind::Phase(n) = jm.vars[i] {
                    a[jm.atom_vars[n][0]] = 1.0;
                }
            }
            a
        })
        .collect()
}

/// Tracker and surrogate step on the positions of continuous variable `i`.
pub fn position_update(jm: &JointModel, posts: &mut [ParticleSet], i: usize, batch: &mut [Vec<f64>], it: usize, cfg: &SpvbiConfig) -> usize {
    let np = posts[i].positions.len();
    let half = posts[i].half;
    let mut grad = vec![0.0; np];
    let mut curv = vec![0.0; np];
    for a in batch.iter_mut() {
        let vals = jm.eval_variable(a, i, &posts[i].positions, true);
        for k in 0..np {
            grad[k] += -posts[i].weights[k] * vals[k].1 * half;
            curv[k] += posts[i].weights[k] * vals[k].2 * half * half;
        }
    }
    let b = batch.len().max(1) as f64;
    grad.iter_mut().chain(curv.iter_mut()).for_each(|x| *x /= b);
    apply_position_step(&mut posts[i], &grad, &curv, it, cfg);
    np * batch.len()
}

/// `f ← (1-ρ)f + ρ ĝ`, `x̄ = clamp(x - f/(2Ω))`, `x ← (1-γ)x + γx̄`. With
/// `curvature_scaled`, `Ω` is raised to half the tracked curvature so the
/// surrogate never undercuts the local quadratic model.
pub fn apply_position_step(ps: &mut ParticleSet, grad: &[f64], curv: &[f64], it: usize, cfg: &SpvbiConfig) {
    let (r, gm) = (rho(it), gamma(it));
    for k in 0..ps.positions.len() {
        ps.fp[k] = (1.0 - r) * ps.fp[k] + r * grad[k];
        ps.fh[k] = (1.0 - r) * ps.fh[k] + r * curv[k];
        let omega = if cfg.curvature_scaled { cfg.omega_p.max(ps.fh[k] / 2.0) } else { cfg.omega_p };
        let x = (ps.positions[k] - ps.center) / ps.half;
        let xbar = (x - ps.fp[k] / (2.0 * omega)).clamp(-1.0, 1.0);
        let xn = ((1.0 - gm) * x + gm * xbar).clamp(-1.0, 1.0);
        ps.positions[k] = ps.center + ps.half * xn;
    }
}

/// Tracker, simplex-projected surrogate step and convex combination on the weights.
pub fn weight_update(jm: &JointModel, posts: &mut [ParticleSet], i: usize, batch: &mut [Vec<f64>], it: usize, cfg: &SpvbiConfig) -> Result<usize> {
    let np = posts[i].positions.len();
    let mut mean_lp = vec![0.0; np];
    for a in batch.iter_mut() {
        let vals = jm.eval_variable(a, i, &posts[i].positions, false);
        for k in 0..np {
            mean_lp[k] += vals[k].0;
        }
    }
    let b = batch.len().max(1) as f64;
    let grad: Vec<f64> = (0..np).map(|k| posts[i].weights[k].ln() + 1.0 - mean_lp[k] / b).collect();
    apply_weight_step(&mut posts[i], &grad, it, cfg)?;
    Ok(np * batch.len())
}

pub fn apply_weight_step(ps: &mut ParticleSet, grad: &[f64], it: usize, cfg: &SpvbiConfig) -> Result<()> {
    let (r, gm) = (rho(it), gamma(it));
    for k in 0..ps.weights.len() {
        ps.fw[k] = (1.0 - r) * ps.fw[k] + r * grad[k];
    }
    let trial: Vec<f64> = ps.weights.iter().zip(&ps.fw).map(|(w, f)| w - f / (2.0 * cfg.omega_w)).collect();
    let wbar = simplex_project(&trial, cfg.eps_w)?;
    for k in 0..ps.weights.len() {
        ps.weights[k] = (1.0 - gm) * ps.weights[k] + gm * wbar[k];
    }
    let sum: f64 = ps.weights.iter().sum();
    ps.weights.iter_mut().for_each(|w| *w /= sum);
    Ok(())
}

fn gated_out(jm: &JointModel, posts: &[ParticleSet], i: usize) -> bool {
    let active = |n: usize| posts[jm.atom_vars[n][0]].prob_on() >= 0.5;
    match jm.vars[i] {
        VarKind::Magnitude(n) | VarKind::Phase(n) => !active(n),
        VarKind::Continuous(_) => !jm.deps[i].iter().any(|&n| active(n)),
        _ => false,
    }
}

/// SSCA sweeps until the sampled-KL window stabilizes or the cap is hit.
pub fn run_module_a(jm: &JointModel, posts: Vec<ParticleSet>, cfg: &SpvbiConfig, seed: u64) -> Result<ModuleAOutput> {
    let mut posts = posts;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kl_seed = seed ^ 0x6b6c_6b6c;
    let mut trace = Vec::new();
    let mut converged_at = None;
    for it in 1..=cfg.max_iterations.max(1) {
        let mut evaluations = 0;
        let mut updated = 0;
        let mut particle_sum = 0;
        for i in 0..posts.len() {
            if cfg.gate_by_support && gated_out(jm, &posts, i) {
                continue;
            }
            let gate = cfg.gate_by_support;
            if jm.vars[i].is_binary() {
                let mut batch = minibatch(jm, &posts, i, 2 * cfg.batch, false, &mut rng);
                evaluations += weight_update(jm, &mut posts, i, &mut batch, it, cfg)?;
            } else {
                let mut batch = minibatch(jm, &posts, i, cfg.batch, gate, &mut rng);
                evaluations += position_update(jm, &mut posts, i, &mut batch, it, cfg);
                let mut batch = minibatch(jm, &posts, i, cfg.batch, gate, &mut rng);
                evaluations += weight_update(jm, &mut posts, i, &mut batch, it, cfg)?;
            }
            updated += 1;
            particle_sum += posts[i].positions.len();
        }
        let kl = sampled_kl(jm, &posts, cfg.kl_samples, kl_seed);
        if !kl.is_finite() {
            return Err(Error::NonFinite(format!("sampled KL at iteration {it}")));
        }
        let max_entropy = posts.iter().map(|p| p.entropy()).fold(0.0, f64::max);
        trace.push(TraceRow { iteration: it, kl, max_entropy, evaluations, updated, particle_sum });
        if converged_at.is_none() && it >= cfg.min_iterations.max(cfg.kl_window) && kl_window_stable(&trace, cfg.kl_window, cfg.kl_tol) {
            converged_at = Some(it);
            break;
        }
    }
    let mut user_out = vec![0.5; jm.g.n_u()];
    let mut polar_out = vec![0.5; jm.g.n_bar_r()];
    let mut delay_out = vec![0.5; jm.g.n_f()];
    if let ModulePriors::Estimation(ep) = jm.priors() {
        for p in &posts {
            match p.kind {
                VarKind::UserSupport(u) => user_out[u] = extrinsic_message(p.prob_on(), ep.user_on[u]),
                VarKind::PolarSupport(m) => polar_out[m] = extrinsic_message(p.prob_on(), ep.polar_on[m]),
                VarKind::DelaySupport(k) => delay_out[k] = extrinsic_message(p.prob_on(), ep.delay_on[k]),
                _ => {}
            }
        }
    }
    Ok(ModuleAOutput { posteriors: posts, trace, converged_at, user_out, polar_out, delay_out })
}

/// `(max - min) / |mean| < tol` over the trailing `window` KL values.
pub fn kl_window_stable(trace: &[TraceRow], window: usize, tol: f64) -> bool {
    if window == 0 || trace.len() < window {
        return false;
    }
    let tail = &trace[trace.len() - window..];
    let hi = tail.iter().map(|r| r.kl).fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().map(|r| r.kl).fold(f64::INFINITY, f64::min);
    let mean = tail.iter().map(|r| r.kl).sum::<f64>() / window as f64;
    (hi - lo) <= tol * mean.abs()
}

/// MAP supports with posterior-mean magnitudes and circular-mean phases.
pub fn posterior_estimate(jm: &JointModel, posts: &[ParticleSet], ls_gains: bool) -> PosteriorEstimate {
    let mut st = jm.base.clone();
    let mut gains = Vec::with_capacity(jm.triples.len());
    let mut active = Vec::with_capacity(jm.triples.len());
    for n in 0..jm.triples.len() {
        let [s, nu, om] = jm.atom_vars[n];
        let on = posts[s].prob_on() >= 0.5;
        let mag = posts[nu].moments().0;
        let (ph, _) = posts[om].circular_moments();
        active.push(on);
        gains.push(if on { C64::from_polar(mag, ph) } else { C64::new(0.0, 0.0) });
    }
    for p in posts {
        if let VarKind::Continuous(c) = p.kind {
            st.set(c, p.moments().0);
        }
    }
    if ls_gains {
        let on: Vec<usize> = (0..gains.len()).filter(|&n| active[n]).collect();
        let tri: Vec<Triple> = on.iter().map(|&n| jm.triples[n]).collect();
        let fit = match jm.priors {
            ModulePriors::Estimation(_) => ls_gain_update(jm.model, jm.g, &st.offgrid, st.doppler, &tri),
            ModulePriors::Tracking { .. } => {
                let prior: Vec<(C64, f64)> = on.iter().map(|&n| jm.track[n].gain_prior()).collect();
                let resp: Vec<Vec<C64>> = tri.iter().map(|&(u, m, k)| jm.model.response(&AtomGeom::at(jm.g, &st.offgrid, u, m, k), st.doppler)).collect();
                jm.model.map_gains(&resp, &jm.model.data(), &prior)
            }
        };
        if let Ok(fit) = fit {
            for (&n, x) in on.iter().zip(fit) {
                gains[n] = x;
            }
        }
    }
    PosteriorEstimate { triples: jm.triples.clone(), gains, active, doppler: st.doppler, offgrid: st.offgrid }
}

/// Gaussian summaries of the active atoms and coordinates for the next frame.
pub fn frame_posterior(jm: &JointModel, posts: &[ParticleSet]) -> FramePosterior {
    let mut atoms = Vec::new();
    for n in 0..jm.triples.len() {
        let [s, nu, om] = jm.atom_vars[n];
        let (m, v) = posts[nu].moments();
        let (pm, pv) = posts[om].circular_moments();
        let (u, mm, k) = jm.triples[n];
        atoms.push(AtomPosterior {
            index: jm.g.linear_index(u, mm, k),
            magnitude: Gaussian { mean: m, var: v.max(1e-6 * m * m).max(f64::MIN_POSITIVE) },
            phase: Gaussian { mean: pm, var: pv.max(1e-6) },
            support_on: posts[s].prob_on(),
        });
    }
    let mut fp = FramePosterior {
        atoms,
        doppler: Gaussian { mean: jm.base.doppler, var: 1.0 },
        user: Vec::new(),
        polar_angle: Vec::new(),
        polar_distance: Vec::new(),
        delay: Vec::new(),
    };
    let floor = |v: f64, scale: f64| v.max(1e-6 * scale * scale).max(f64::MIN_POSITIVE);
    for p in posts {
        if let VarKind::Continuous(c) = p.kind {
            let (m, v) = p.moments();
            let gs = Gaussian { mean: m, var: floor(v, p.half) };
            match c {
                Coord::Doppler => fp.doppler = gs,
                Coord::User(u) => fp.user.push((u, gs)),
                Coord::PolarAngle(x) => fp.polar_angle.push((x, gs)),
                Coord::PolarDistance(x) => fp.polar_distance.push((x, gs)),
                Coord::Delay(k) => fp.delay.push((k, gs)),
            }
        }
    }
    fp
}

/// Convergence trace as a text table.
pub fn trace_table(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration sampled_kl max_weight_entropy evaluations\n");
    for r in trace {
        out.push_str(&format!("{} {:.9e} {:.6} {}\n", r.iteration, r.kl, r.max_entropy, r.evaluations));
    }
    out
}
