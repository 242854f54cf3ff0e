//! Prior densities for the sparse core and its hyperparameters, together with
//! the temporal transition models used while tracking.
//!
//! Support bits of the mode vectors are `±1`; the core support bit is
//! `true`/`false`. Inactive continuous variables are never evaluated as Dirac
//! densities: an inactive atom drops out of the continuous state and its
//! amplitude/phase contribution is the point-mass convention value of
//! [`amplitude_phase_log_prior`].

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSet;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Wraps an angle to `[0, 2π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y >= 2.0 * PI { 0.0 } else { y }
}

/// Wraps an angle difference to `[-π, π)`.
pub fn wrap_diff(x: f64) -> f64 {
    wrap_phase(x + PI) - PI
}

/// `(e^x K₀(x), e^x K₁(x))` for `x > 0`.
pub fn bessel_k01_scaled(x: f64) -> (f64, f64) {
    assert!(x > 0.0, "bessel K needs a positive argument");
    if x <= 2.0 {
        let (k0, k1) = bessel_k01_series(x);
        let e = x.exp();
        (k0 * e, k1 * e)
    } else {
        bessel_k01_cf(x)
    }
}

pub fn bessel_k0(x: f64) -> f64 {
    if x <= 2.0 { bessel_k01_series(x).0 } else { bessel_k01_cf(x).0 * (-x).exp() }
}

pub fn bessel_k1(x: f64) -> f64 {
    if x <= 2.0 { bessel_k01_series(x).1 } else { bessel_k01_cf(x).1 * (-x).exp() }
}

/// `ln K₀(x)`, finite for large `x`.
pub fn ln_bessel_k0(x: f64) -> f64 {
    bessel_k01_scaled(x).0.ln() - x
}

fn bessel_k01_series(x: f64) -> (f64, f64) {
    let y = x * x / 4.0;
    let ln_half = (x / 2.0).ln();
    let mut term = 1.0; // y^k / (k!)^2
    let mut i0 = 0.0;
    let mut tail0 = 0.0;
    let mut harmonic = 0.0;
    let mut term1 = 1.0; // y^k / (k! (k+1)!)
    let mut i1 = 0.0;
    let mut tail1 = 0.0;
    let mut psi_k1 = -EULER_GAMMA; // ψ(k+1)
    for k in 0..60 {
        let kf = k as f64;
        if k > 0 {
            term *= y / (kf * kf);
            term1 *= y / (kf * (kf + 1.0));
            harmonic += 1.0 / kf;
            psi_k1 += 1.0 / kf;
        }
        i0 += term;
        tail0 += harmonic * term;
        i1 += term1;
        let psi_k2 = psi_k1 + 1.0 / (kf + 1.0);
        tail1 += (psi_k1 + psi_k2) * term1;
        if term < 1e-18 * i0 && k > 2 {
            break;
        }
    }
    let k0 = -(ln_half + EULER_GAMMA) * i0 + tail0;
    let i1 = i1 * x / 2.0;
    let k1 = 1.0 / x + ln_half * i1 - x / 4.0 * tail1;
    (k0, k1)
}

/// Steed's continued fraction for `K₀, K₁` at order zero, scaled by `e^x`.
fn bessel_k01_cf(x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-16 {
            break;
        }
    }
    let h = a1 * h;
    let k0 = (PI / (2.0 * x)).sqrt() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

fn check_scale(sigma_h: f64, sigma_g: f64) -> Result<f64> {
    if !(sigma_h > 0.0 && sigma_g > 0.0) {
        return Err(Error::InvalidParameter("gain standard deviations must be positive".into()));
    }
    Ok(sigma_h * sigma_g)
}

/// Density of `|αβ|` for independent `α ~ CN(0, σ_H²)`, `β ~ CN(0, σ_G²)`.
pub fn cdg_amplitude_pdf(x: f64, sigma_h: f64, sigma_g: f64) -> Result<f64> {
    let s = check_scale(sigma_h, sigma_g)?;
    if x < 0.0 {
        return Err(Error::InvalidParameter("magnitude must be non-negative".into()));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    Ok(4.0 * x / (s * s) * bessel_k0(2.0 * x / s))
}

/// `ln f_A(x)` parameterized by the scale `σ_H σ_G`.
pub fn cdg_log_pdf(x: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    (4.0 * x / (scale * scale)).ln() + ln_bessel_k0(2.0 * x / scale)
}

/// `d/dx ln f_A(x)`.
pub fn cdg_log_pdf_grad(x: f64, scale: f64) -> f64 {
    let z = 2.0 * x / scale;
    let (k0, k1) = bessel_k01_scaled(z);
    1.0 / x - 2.0 / scale * k1 / k0
}

/// Draws `|uv|` with `u ~ CN(0, σ_H²)`, `v ~ CN(0, σ_G²)`.
pub fn cdg_sample<R: Rng + ?Sized>(rng: &mut R, sigma_h: f64, sigma_g: f64) -> f64 {
    let u = crate::channel::complex_normal(rng, sigma_h * sigma_h);
    let v = crate::channel::complex_normal(rng, sigma_g * sigma_g);
    (u * v).norm()
}

/// Amplitude and phase log-prior of one core entry with CDG scale `scale`.
///
/// An inactive entry contributes `-ln(scale) - ln(2π)`, so the active/inactive
/// log-ratio is the dimensionless `ln(scale · f_A(ν))`.
pub fn amplitude_phase_log_prior(nu: f64, _omega: f64, active: bool, scale: f64) -> f64 {
    let phase = -(2.0 * PI).ln();
    if active { cdg_log_pdf(nu, scale) + phase } else { -scale.ln() + phase }
}

/// `p(s | s_U, s_R, s_K)`.
pub fn support_conditional(s: bool, parents: [i8; 3], p_s: f64) -> f64 {
    let gate = parents.iter().all(|&b| b > 0);
    match (gate, s) {
        (true, true) => p_s,
        (true, false) => 1.0 - p_s,
        (false, true) => 0.0,
        (false, false) => 1.0,
    }
}

/// `(η̄_m, η̌_{m,m'})` for 0-based polar indices.
pub fn mrf_parameters(m: usize, m2: usize, g: &GridSet, eta_bias: f64, eta_inter: f64) -> (f64, f64) {
    let q = |i: usize| (i % g.rings + 1) as f64;
    let t = |i: usize| g.polar_angles[i];
    let bias = eta_bias * (1.0 - t(m) * t(m)) / q(m);
    let inter = eta_inter * (t(m) * t(m) * q(m) + t(m2) * t(m2) * q(m2)) / 2.0;
    (bias, inter)
}

/// 4-neighbors of polar index `m` on the `N_R × S` lattice.
pub fn lattice_neighbors(m: usize, angles: usize, rings: usize) -> Vec<usize> {
    let (a, q) = (m / rings, m % rings);
    let mut out = Vec::with_capacity(4);
    if a > 0 {
        out.push(m - rings);
    }
    if a + 1 < angles {
        out.push(m + rings);
    }
    if q > 0 {
        out.push(m - 1);
    }
    if q + 1 < rings {
        out.push(m + 1);
    }
    out
}

/// Unnormalized Ising log-prior of `s_R ∈ {±1}^{N̄_R}`.
pub fn ising_log_prior(s_r: &[i8], g: &GridSet, eta_bias: f64, eta_inter: f64) -> f64 {
    let mut total = 0.0;
    for m in 0..s_r.len() {
        let sm = s_r[m] as f64;
        let (bias, _) = mrf_parameters(m, m, g, eta_bias, eta_inter);
        total -= bias * sm;
        for m2 in lattice_neighbors(m, g.angle_count, g.rings) {
            let (_, inter) = mrf_parameters(m, m2, g, eta_bias, eta_inter);
            total += 0.5 * inter * sm * s_r[m2] as f64;
        }
    }
    total
}

/// Steady-state activation probability of a two-state chain.
pub fn steady_state(on: f64, off: f64) -> f64 {
    on / (on + off)
}

/// `[[p(-1→-1), p(-1→+1)], [p(+1→-1), p(+1→+1)]]` indexed by `(s+1)/2`.
pub fn chain_transitions(on: f64, off: f64) -> [[f64; 2]; 2] {
    [[1.0 - on, on], [off, 1.0 - off]]
}

pub fn markov_chain_log_prior(s: &[i8], on: f64, off: f64) -> Result<f64> {
    if !(on > 0.0 && on < 1.0 && off > 0.0 && off < 1.0) {
        return Err(Error::InvalidParameter("transition probabilities must lie in (0, 1)".into()));
    }
    let Some(&first) = s.first() else { return Ok(0.0) };
    let pi = steady_state(on, off);
    let mut total = if first > 0 { pi.ln() } else { (1.0 - pi).ln() };
    let t = chain_transitions(on, off);
    for w in s.windows(2) {
        let (a, b) = (((w[0] + 1) / 2) as usize, ((w[1] + 1) / 2) as usize);
        total += t[a][b].ln();
    }
    Ok(total)
}

pub fn gaussian_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

/// Off-grid prior variances in absolute units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffGridVariances {
    pub user: f64,
    pub polar_angle: f64,
    pub polar_distance: f64,
    pub delay: f64,
}

/// Indices of the grid points whose off-grid entries are part of the state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActiveSets {
    pub user: Vec<usize>,
    pub polar: Vec<usize>,
    pub delay: Vec<usize>,
}

pub fn offgrid_log_prior(og: &crate::grid::OffGridState, active: &ActiveSets, var: &OffGridVariances) -> f64 {
    let mut total = 0.0;
    for &u in &active.user {
        total += gaussian_log_pdf(og.user[u], 0.0, var.user);
    }
    for &m in &active.polar {
        total += gaussian_log_pdf(og.polar_angle[m], 0.0, var.polar_angle);
        total += gaussian_log_pdf(og.polar_distance[m], 0.0, var.polar_distance);
    }
    for &k in &active.delay {
        total += gaussian_log_pdf(og.delay[k], 0.0, var.delay);
    }
    total
}

/// `(1-χ)(x_prev-μ) + χ ε + μ`.
pub fn gauss_markov_step(x_prev: f64, chi: f64, mu: f64, eps: f64) -> f64 {
    (1.0 - chi) * (x_prev - mu) + chi * eps + mu
}

/// Draws a Gauss-Markov step with innovation variance `zeta`.
pub fn gauss_markov_sample<R: Rng + ?Sized>(rng: &mut R, x_prev: f64, chi: f64, mu: f64, zeta: f64) -> f64 {
    let e: f64 = StandardNormal.sample(rng);
    gauss_markov_step(x_prev, chi, mu, e * zeta.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialPriorParams {
    /// `p(s = 1 | all parents active)`.
    pub p_s: f64,
    pub eta_bias: f64,
    pub eta_inter: f64,
    /// Chain activation probability `λ_{-1,1}` for both mode chains.
    pub chain_on: f64,
    /// Explicit deactivation probabilities; derived from `expected_paths` when unset.
    pub user_chain_off: Option<f64>,
    pub delay_chain_off: Option<f64>,
    /// Expected path count used to set the chains' steady state.
    pub expected_paths: f64,
    /// Off-grid prior standard deviations as fractions of the clamp half-widths.
    pub offgrid_std_frac: f64,
    /// Prior bound on the user speed; `f_{d,max} = max_speed / λ`.
    pub max_speed: f64,
}

impl Default for SpatialPriorParams {
    fn default() -> Self {
        Self {
            p_s: 0.9,
            eta_bias: 0.4,
            eta_inter: 0.3,
            chain_on: 0.05,
            user_chain_off: None,
            delay_chain_off: None,
            expected_paths: 3.0,
            offgrid_std_frac: 0.5,
            max_speed: 10.0,
        }
    }
}

impl SpatialPriorParams {
    fn chain_off(&self, len: usize, explicit: Option<f64>) -> f64 {
        explicit.unwrap_or_else(|| {
            let pi = (self.expected_paths / len as f64).clamp(0.01, 0.99);
            (self.chain_on * (1.0 - pi) / pi).min(0.99)
        })
    }

    pub fn user_chain(&self, g: &GridSet) -> (f64, f64) {
        (self.chain_on, self.chain_off(g.n_u(), self.user_chain_off))
    }

    pub fn delay_chain(&self, g: &GridSet) -> (f64, f64) {
        (self.chain_on, self.chain_off(g.n_f(), self.delay_chain_off))
    }

    pub fn offgrid_variances(&self, g: &GridSet, m: usize) -> OffGridVariances {
        let f2 = self.offgrid_std_frac * self.offgrid_std_frac;
        let sq = |h: f64| h * h * f2;
        OffGridVariances {
            user: sq(g.user_spacing() / 2.0),
            polar_angle: sq(g.polar_spacing() / 2.0),
            polar_distance: sq(g.ring_half_gap(m)),
            delay: sq(g.delay_spacing() / 2.0),
        }
    }

    pub fn max_doppler(&self, wavelength: f64) -> f64 {
        self.max_speed / wavelength
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_s, self.chain_on];
        if probs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidParameter("prior probabilities must lie in (0, 1)".into()));
        }
        if !(self.offgrid_std_frac > 0.0 && self.max_speed > 0.0) {
            return Err(Error::InvalidParameter("prior scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalPriorParams {
    pub chi_nu: f64,
    pub chi_omega: f64,
    pub chi_f: f64,
    /// Steady-state means; the previous posterior mean is used when unset.
    pub mu_nu: Option<f64>,
    pub mu_omega: Option<f64>,
    pub mu_f: Option<f64>,
    /// Expected per-frame drift of the magnitude, relative to the magnitude.
    pub nu_drift_rel: f64,
    /// Expected per-frame phase drift (rad).
    pub omega_drift: f64,
    /// Expected per-frame DFO drift (Hz).
    pub doppler_drift: f64,
    /// Off-grid random-walk standard deviations as fractions of the clamp half-widths.
    pub offgrid_drift_frac: f64,
    /// Support transitions `λ_{-1,1}`, `λ_{1,-1}` between frames.
    pub support_on: f64,
    pub support_off: f64,
}

impl Default for TemporalPriorParams {
    fn default() -> Self {
        Self {
            chi_nu: 0.1,
            chi_omega: 0.1,
            chi_f: 0.05,
            mu_nu: None,
            mu_omega: None,
            mu_f: None,
            nu_drift_rel: 0.1,
            omega_drift: 0.2,
            doppler_drift: 20.0,
            offgrid_drift_frac: 0.3,
            support_on: 0.01,
            support_off: 0.05,
        }
    }
}

impl TemporalPriorParams {
    pub fn validate(&self) -> Result<()> {
        for chi in [self.chi_nu, self.chi_omega, self.chi_f] {
            if !(0.0..=1.0).contains(&chi) {
                return Err(Error::InvalidParameter("correlation controls must lie in [0, 1]".into()));
            }
        }
        for p in [self.support_on, self.support_off] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidParameter("support transitions must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn log_pdf(&self, x: f64) -> f64 {
        gaussian_log_pdf(x, self.mean, self.var)
    }

    pub fn grad_log_pdf(&self, x: f64) -> f64 {
        -(x - self.mean) / self.var
    }
}

/// `N((1-χ)m̂ + χμ, (1-χ)²Σ̂ + χ²ζ)`.
pub fn propagate_gauss_markov(prev: Gaussian, chi: f64, mu: f64, zeta: f64) -> Gaussian {
    Gaussian {
        mean: (1.0 - chi) * prev.mean + chi * mu,
        var: (1.0 - chi) * (1.0 - chi) * prev.var + chi * chi * zeta,
    }
}

/// Same as [`propagate_gauss_markov`] with the mean difference taken on the circle.
pub fn propagate_phase(prev: Gaussian, chi: f64, mu: f64, zeta: f64) -> Gaussian {
    Gaussian {
        mean: wrap_phase(mu + (1.0 - chi) * wrap_diff(prev.mean - mu)),
        var: (1.0 - chi) * (1.0 - chi) * prev.var + chi * chi * zeta,
    }
}

pub fn propagate_random_walk(prev: Gaussian, zeta: f64) -> Gaussian {
    Gaussian { mean: prev.mean, var: prev.var + zeta }
}

/// `π̂ = w₁(1-λ_{1,-1}) + λ_{-1,1} w₂` with `w₁ = q(s=1)`, `w₂ = q(s=-1)`.
pub fn propagate_support(w_on: f64, w_off: f64, on: f64, off: f64) -> f64 {
    w_on * (1.0 - off) + on * w_off
}

/// Posterior summaries of one tracked atom.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomPosterior {
    pub index: usize,
    pub magnitude: Gaussian,
    pub phase: Gaussian,
    pub support_on: f64,
}

/// Posterior summaries carried from one frame to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosterior {
    pub atoms: Vec<AtomPosterior>,
    pub doppler: Gaussian,
    pub user: Vec<(usize, Gaussian)>,
    pub polar_angle: Vec<(usize, Gaussian)>,
    pub polar_distance: Vec<(usize, Gaussian)>,
    pub delay: Vec<(usize, Gaussian)>,
}

/// Priors for frame `t` derived from the frame `t-1` posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrior {
    pub atoms: Vec<(usize, Gaussian, Gaussian, f64)>,
    pub doppler: Gaussian,
    pub user: Vec<(usize, Gaussian)>,
    pub polar_angle: Vec<(usize, Gaussian)>,
    pub polar_distance: Vec<(usize, Gaussian)>,
    pub delay: Vec<(usize, Gaussian)>,
}

pub fn propagate_posterior_to_prior(
    prev: Option<&FramePosterior>,
    tp: &TemporalPriorParams,
    g: &GridSet,
) -> Result<FramePrior> {
    let prev = prev.ok_or_else(|| Error::MissingPosterior("tracking needs the previous frame posterior".into()))?;
    let zeta = |drift: f64, chi: f64| if chi > 0.0 { (drift / chi).powi(2) } else { 0.0 };
    let atoms = prev
        .atoms
        .iter()
        .map(|a| {
            let mu_nu = tp.mu_nu.unwrap_or(a.magnitude.mean);
            let mu_om = tp.mu_omega.unwrap_or(a.phase.mean);
            let mag = propagate_gauss_markov(a.magnitude, tp.chi_nu, mu_nu, zeta(tp.nu_drift_rel * a.magnitude.mean, tp.chi_nu));
            let ph = propagate_phase(a.phase, tp.chi_omega, mu_om, zeta(tp.omega_drift, tp.chi_omega));
            let on = propagate_support(a.support_on, 1.0 - a.support_on, tp.support_on, tp.support_off);
            (a.index, mag, ph, on)
        })
        .collect();
    let mu_f = tp.mu_f.unwrap_or(prev.doppler.mean);
    let doppler = propagate_gauss_markov(prev.doppler, tp.chi_f, mu_f, zeta(tp.doppler_drift, tp.chi_f));
    let f2 = tp.offgrid_drift_frac * tp.offgrid_drift_frac;
    let walk = |list: &[(usize, Gaussian)], half: &dyn Fn(usize) -> f64| {
        list.iter().map(|&(i, gs)| (i, propagate_random_walk(gs, half(i).powi(2) * f2))).collect::<Vec<_>>()
    };
    Ok(FramePrior {
        atoms,
        doppler,
        user: walk(&prev.user, &|_| g.user_spacing() / 2.0),
        polar_angle: walk(&prev.polar_angle, &|_| g.polar_spacing() / 2.0),
        polar_distance: walk(&prev.polar_distance, &|m| g.ring_half_gap(m)),
        delay: walk(&prev.delay, &|_| g.delay_spacing() / 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Estimation,
    Tracking,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DfoPrior {
    Uniform { max: f64 },
    Gaussian(Gaussian),
}

impl DfoPrior {
    pub fn log_pdf(&self, f: f64) -> f64 {
        match *self {
            DfoPrior::Uniform { max } => {
                if (0.0..=max).contains(&f) { -max.ln() } else { f64::NEG_INFINITY }
            }
            DfoPrior::Gaussian(g) => g.log_pdf(f),
        }
    }

    pub fn grad_log_pdf(&self, f: f64) -> f64 {
        match *self {
            DfoPrior::Uniform { .. } => 0.0,
            DfoPrior::Gaussian(g) => g.grad_log_pdf(f),
        }
    }
}

pub fn dfo_prior(phase: Phase, max: f64, prev: Option<Gaussian>, tp: &TemporalPriorParams) -> Result<DfoPrior> {
    if max <= 0.0 {
        return Err(Error::InvalidParameter("maximum DFO must be positive".into()));
    }
    match phase {
        Phase::Estimation => Ok(DfoPrior::Uniform { max }),
        Phase::Tracking => {
            let prev = prev.ok_or_else(|| Error::MissingPosterior("DFO posterior of the previous frame".into()))?;
            let zeta = if tp.chi_f > 0.0 { (tp.doppler_drift / tp.chi_f).powi(2) } else { 0.0 };
            Ok(DfoPrior::Gaussian(propagate_gauss_markov(prev, tp.chi_f, tp.mu_f.unwrap_or(prev.mean), zeta)))
        }
    }
}
