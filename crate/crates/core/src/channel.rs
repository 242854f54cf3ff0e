//! Ground-truth channel synthesis: array responses, the IRS-user and BS-IRS
//! links, the cascaded channel tensor, pilot observations and frame-to-frame
//! kinematics.
//!
//! Phase conventions follow the far-field response `exp(-j2π/λ (n-1) d ϑ)`
//! and the near-field response `exp(-j2π/λ (r⁽ⁿ⁾ - r))` with element `n` at
//! `(n-1)d` along the array axis. The near-field linear term therefore has the
//! opposite sign of the far-field one, which is what makes the effective IRS
//! angle of a cascaded path `ϑ_U + φ_B`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::wrap_phase;
use crate::tensor::{CMat, CVec, ComplexTensor3, C64};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub n_b: usize,
    pub n_u: usize,
    pub n_r: usize,
    pub r_b: usize,
    /// Total subcarrier count `K`.
    pub subcarriers: usize,
    /// Pilot subcarriers `K̄`.
    pub pilot_subcarriers: usize,
    /// Bandwidth `f_s` in Hz.
    pub bandwidth: f64,
    /// Carrier frequency in Hz.
    pub carrier: f64,
    /// Pilot interval `T_s` in s.
    pub pilot_interval: f64,
    pub pilots_ce: usize,
    pub pilots_ct: usize,
    /// Frame duration in s (time between consecutive frames).
    pub frame_duration: f64,
    /// User speed in m/s; the user moves along -y, away from the IRS.
    pub speed: f64,
    pub noise_power_dbm: f64,
    /// Transmit power `p_T` in W.
    pub transmit_power: f64,
    /// SNR at the combiner input in dB.
    pub snr_db: f64,
    pub bs: [f64; 2],
    pub irs: [f64; 2],
    pub user: [f64; 2],
    /// Paths per scatterer cluster.
    pub clusters: Vec<usize>,
    /// Adds the direct user-IRS path in front of the scatterer paths.
    pub los: bool,
    /// Range of IRS-side spatial angles for cluster centers.
    pub cluster_angle_range: [f64; 2],
    /// Range of IRS-scatterer distances for cluster centers (m).
    pub cluster_distance_range: [f64; 2],
    /// Half-width of the positional spread inside a cluster (m).
    pub cluster_spread: f64,
    pub path_loss_exponent: f64,
    /// Timing guard ahead of the reference path, in delay bins `1/f_s`.
    pub sync_guard_bins: f64,
    /// Gauss-Markov correlation of path gains per meter of user displacement.
    pub gain_chi_per_m: f64,
    /// Gain perturbation standard deviation relative to the mean magnitude.
    pub gain_rel_std: f64,
    /// Phase perturbation standard deviation (rad).
    pub phase_std: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::desk()
    }
}

impl Scenario {
    /// Small arrays that run in seconds.
    pub fn desk() -> Self {
        Self {
            n_b: 8,
            n_u: 4,
            n_r: 16,
            r_b: 1,
            subcarriers: 32,
            pilot_subcarriers: 8,
            bandwidth: 200e6,
            carrier: 28e9,
            pilot_interval: 50e-6,
            pilots_ce: 20,
            pilots_ct: 6,
            frame_duration: 0.02,
            speed: 5.0,
            noise_power_dbm: -91.0,
            transmit_power: 0.1,
            snr_db: 10.0,
            bs: [0.0, 0.0],
            irs: [60.0, 30.0],
            user: [64.0, 24.0],
            clusters: vec![1, 1, 1],
            los: false,
            cluster_angle_range: [-0.05, 0.95],
            cluster_distance_range: [3.0, 15.0],
            cluster_spread: 0.3,
            path_loss_exponent: 2.2,
            sync_guard_bins: 1.0,
            gain_chi_per_m: 0.5,
            gain_rel_std: 0.2,
            phase_std: 0.3,
        }
    }

    /// Full-size arrays of the reference deployment.
    pub fn full() -> Self {
        Self {
            n_b: 32,
            n_u: 16,
            n_r: 128,
            r_b: 4,
            subcarriers: 128,
            pilot_subcarriers: 31,
            clusters: vec![4, 2, 2],
            ..Self::desk()
        }
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier
    }

    pub fn spacing(&self) -> f64 {
        self.wavelength() / 2.0
    }

    pub fn noise_power(&self) -> f64 {
        1e-3 * 10f64.powf(self.noise_power_dbm / 10.0)
    }

    pub fn n_bu(&self) -> usize {
        self.n_b * self.n_u
    }

    /// Subcarrier frequency offset `f_k` for 0-based `k`.
    pub fn subcarrier_freq(&self, k: usize) -> f64 {
        let kk = self.subcarriers as f64;
        self.bandwidth / kk * (k as f64 - (kk - 1.0) / 2.0)
    }

    /// Maximum Doppler `v/λ`.
    pub fn max_doppler(&self) -> f64 {
        self.speed / self.wavelength()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_b,
            self.n_u,
            self.n_r,
            self.r_b,
            self.subcarriers,
            self.pilot_subcarriers,
            self.pilots_ce,
            self.pilots_ct,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParameter("all counts must be positive".into()));
        }
        if self.r_b > self.n_b {
            return Err(Error::InvalidParameter("r_b must not exceed n_b".into()));
        }
        if self.pilot_subcarriers > self.subcarriers {
            return Err(Error::InvalidParameter("pilot_subcarriers must not exceed subcarriers".into()));
        }
        if self.pilots_ct >= self.pilots_ce {
            return Err(Error::InvalidParameter("pilots_ct must be smaller than pilots_ce".into()));
        }
        if !(self.bandwidth > 0.0 && self.carrier > 0.0 && self.pilot_interval >= 0.0) {
            return Err(Error::InvalidParameter("bandwidth, carrier and pilot interval must be positive".into()));
        }
        Ok(())
    }
}

/// Which distance model the IRS response uses when synthesizing truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArrayModel {
    Exact,
    Fresnel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathTruth {
    /// IRS-user gain `α_l`.
    pub alpha: C64,
    /// User-side spatial angle `φ_U`.
    pub user_angle: f64,
    /// IRS-side spatial angle `ϑ_U`.
    pub irs_angle: f64,
    /// IRS-side distance `r_U` (m).
    pub irs_distance: f64,
    /// IRS-user delay `τ_U` (s, relative to the timing reference).
    pub user_delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub user: [f64; 2],
    /// First-hop point seen by the IRS for each path (the user itself for LoS).
    pub scatterers: Vec<Option<[f64; 2]>>,
    /// Mean magnitude of each `α_l` under the path-loss model.
    pub gain_means: Vec<f64>,
    /// Path length of the timing reference (m).
    pub reference_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub paths: Vec<PathTruth>,
    /// BS-IRS gain `β`.
    pub beta: C64,
    /// Maximum DFO `f_d` (Hz).
    pub doppler: f64,
    /// BS-side angle `ϑ_B`.
    pub bs_angle: f64,
    /// IRS-side angle towards the BS `φ_B`.
    pub irs_bs_angle: f64,
    /// BS-IRS delay `τ_B` (s, relative to the timing reference).
    pub bs_delay: f64,
    pub model: ArrayModel,
    pub geometry: Option<Geometry>,
}

impl FrameTruth {
    pub fn gain(&self, l: usize) -> C64 {
        self.paths[l].alpha * self.beta
    }

    pub fn eff_angle(&self, l: usize) -> f64 {
        self.paths[l].irs_angle + self.irs_bs_angle
    }

    pub fn eff_distance(&self, l: usize) -> f64 {
        let p = &self.paths[l];
        let eff = self.eff_angle(l);
        p.irs_distance * (1.0 - eff * eff) / (1.0 - p.irs_angle * p.irs_angle)
    }

    pub fn delay(&self, l: usize) -> f64 {
        self.paths[l].user_delay + self.bs_delay
    }

    /// Builds a path from effective (cascaded) parameters.
    pub fn push_effective(&mut self, gain: C64, user_angle: f64, eff_angle: f64, eff_distance: f64, delay: f64) {
        let irs_angle = eff_angle - self.irs_bs_angle;
        let irs_distance = eff_distance * (1.0 - irs_angle * irs_angle) / (1.0 - eff_angle * eff_angle);
        self.paths.push(PathTruth {
            alpha: gain / self.beta,
            user_angle,
            irs_angle,
            irs_distance,
            user_delay: delay - self.bs_delay,
        });
    }

    /// Truth without paths sharing the BS-IRS link of `s`.
    pub fn empty(s: &Scenario) -> Self {
        let (bs_angle, irs_bs_angle) = bs_irs_angles(s);
        Self {
            paths: Vec::new(),
            beta: C64::new(1.0, 0.0),
            doppler: 0.0,
            bs_angle,
            irs_bs_angle,
            bs_delay: s.sync_guard_bins / s.bandwidth,
            model: ArrayModel::Fresnel,
            geometry: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (l, p) in self.paths.iter().enumerate() {
            if !(p.user_angle.abs() < 1.0 && p.irs_angle.abs() < 1.0 && self.eff_angle(l).abs() < 1.0) {
                return Err(Error::InvalidGeometry(format!("path {l} has a spatial angle outside (-1, 1)")));
            }
            if self.delay(l) <= 0.0 {
                return Err(Error::InvalidGeometry(format!("path {l} has a non-positive delay")));
            }
            if p.irs_distance <= 0.0 {
                return Err(Error::InvalidGeometry(format!("path {l} has a non-positive distance")));
            }
        }
        Ok(())
    }
}

pub fn far_field_arv(theta: f64, n: usize, lambda: f64, d: f64) -> CVec {
    let k = 2.0 * PI / lambda;
    CVec::from_fn(n, |i, _| C64::from_polar(1.0, -k * i as f64 * d * theta))
}

/// Exact element distance `r⁽ⁿ⁾` for 0-based element `i`.
pub fn element_distance(phi: f64, r: f64, i: usize, d: f64) -> f64 {
    let off = i as f64 * d;
    let perp = r * (1.0 - phi * phi).max(0.0).sqrt();
    (perp * perp + (r * phi - off) * (r * phi - off)).sqrt()
}

pub fn near_field_arv(phi: f64, r: f64, n: usize, lambda: f64, d: f64) -> Result<CVec> {
    if r <= 0.0 {
        return Err(Error::InvalidParameter(format!("distance must be positive, got {r}")));
    }
    let k = 2.0 * PI / lambda;
    Ok(CVec::from_fn(n, |i, _| C64::from_polar(1.0, -k * (element_distance(phi, r, i, d) - r))))
}

/// Fresnel path difference `-d i φ + d² i² (1-φ²)/(2r)` for 0-based `i`.
#[inline]
pub fn fresnel_delta(phi: f64, r: f64, i: usize, d: f64) -> f64 {
    let x = i as f64 * d;
    -x * phi + x * x * (1.0 - phi * phi) / (2.0 * r)
}

pub fn fresnel_arv(phi: f64, r: f64, n: usize, lambda: f64, d: f64) -> CVec {
    let k = 2.0 * PI / lambda;
    CVec::from_fn(n, |i, _| C64::from_polar(1.0, -k * fresnel_delta(phi, r, i, d)))
}

pub fn rayleigh_distance(n: usize, lambda: f64, d: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidParameter("rayleigh distance needs at least two elements".into()));
    }
    let aperture = (n - 1) as f64 * d;
    Ok(2.0 * aperture * aperture / lambda)
}

/// `[e^{-j2πf_k τ}]_k` over all `K` subcarriers.
pub fn delay_response(s: &Scenario, tau: f64) -> CVec {
    CVec::from_fn(s.subcarriers, |k, _| C64::from_polar(1.0, -2.0 * PI * s.subcarrier_freq(k) * tau))
}

fn irs_path_response(truth: &FrameTruth, l: usize, s: &Scenario) -> CVec {
    let p = &truth.paths[l];
    let (lambda, d) = (s.wavelength(), s.spacing());
    match truth.model {
        ArrayModel::Exact => near_field_arv(p.irs_angle, p.irs_distance, s.n_r, lambda, d)
            .expect("validated positive distance"),
        ArrayModel::Fresnel => fresnel_arv(p.irs_angle, p.irs_distance, s.n_r, lambda, d),
    }
}

fn doppler_phase(truth: &FrameTruth, l: usize, p: usize, s: &Scenario) -> f64 {
    2.0 * PI * truth.doppler * p as f64 * s.pilot_interval * truth.paths[l].user_angle
}

/// `H_{k,p}` (N_R × N_U) for 0-based subcarrier `k` and pilot `p`.
pub fn irs_user_channel(truth: &FrameTruth, k: usize, p: usize, s: &Scenario) -> CMat {
    let mut h = CMat::zeros(s.n_r, s.n_u);
    for (l, path) in truth.paths.iter().enumerate() {
        let phase = -2.0 * PI * s.subcarrier_freq(k) * path.user_delay + doppler_phase(truth, l, p, s);
        let c = path.alpha * C64::from_polar(1.0, phase);
        let ar = irs_path_response(truth, l, s);
        let au = far_field_arv(path.user_angle, s.n_u, s.wavelength(), s.spacing());
        h += (ar * au.adjoint()) * c;
    }
    h
}

/// `G_k` (N_B × N_R).
pub fn bs_irs_channel(truth: &FrameTruth, k: usize, s: &Scenario) -> CMat {
    let c = truth.beta * C64::from_polar(1.0, -2.0 * PI * s.subcarrier_freq(k) * truth.bs_delay);
    let ab = far_field_arv(truth.bs_angle, s.n_b, s.wavelength(), s.spacing());
    let ar = far_field_arv(truth.irs_bs_angle, s.n_r, s.wavelength(), s.spacing());
    (ab * ar.adjoint()) * c
}

/// `(a_U*(φ) ⊗ a_B(ϑ_B)) e^{jψ}` for user angle `phi` and raw Doppler phase
/// `psi_rate = 2π f_d (p-1) T_s`.
pub fn bu_response(phi: f64, bs_angle: f64, psi_rate: f64, s: &Scenario) -> CVec {
    let au = far_field_arv(phi, s.n_u, s.wavelength(), s.spacing());
    let ab = far_field_arv(bs_angle, s.n_b, s.wavelength(), s.spacing());
    let rot = C64::from_polar(1.0, psi_rate * phi);
    CVec::from_fn(s.n_bu(), |i, _| au[i / s.n_b].conj() * ab[i % s.n_b] * rot)
}

/// Cascaded tensor `𝓡_p` (N_BU × N_R × K) for 0-based pilot `p`.
pub fn cascaded_tensor(truth: &FrameTruth, p: usize, s: &Scenario) -> ComplexTensor3 {
    let mut t = ComplexTensor3::zeros([s.n_bu(), s.n_r, s.subcarriers]);
    let ar_bs = far_field_arv(truth.irs_bs_angle, s.n_r, s.wavelength(), s.spacing());
    let psi_rate = 2.0 * PI * truth.doppler * p as f64 * s.pilot_interval;
    for l in 0..truth.paths.len() {
        let bu = bu_response(truth.paths[l].user_angle, truth.bs_angle, psi_rate, s);
        let ar = irs_path_response(truth, l, s).component_mul(&ar_bs.map(|z| z.conj()));
        let af = delay_response(s, truth.delay(l));
        let g = truth.gain(l);
        let data = t.as_mut_slice();
        let (nbu, nr) = (s.n_bu(), s.n_r);
        for k in 0..s.subcarriers {
            for m in 0..nr {
                let c = g * ar[m] * af[k];
                let base = nbu * (m + nr * k);
                for i in 0..nbu {
                    data[base + i] += bu[i] * c;
                }
            }
        }
    }
    t
}

/// Per-pilot beams: combiner `W_p`, user precoder `f_p`, IRS reflection `v_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotBeams {
    pub w: CMat,
    pub f: CVec,
    pub v: CVec,
}

impl PilotBeams {
    /// `X_p = f_pᵀ ⊗ W_p^H` (R_B × N_BU).
    pub fn x_matrix(&self) -> CMat {
        let wh = self.w.adjoint();
        let (rb, nb) = wh.shape();
        CMat::from_fn(rb, self.f.len() * nb, |r, c| self.f[c / nb] * wh[(r, c % nb)])
    }
}

/// Standard Zadoff-Chu sequence of length `len`.
pub fn zc_pilot(len: usize, root: usize) -> Result<CVec> {
    if len == 0 {
        return Err(Error::InvalidParameter("pilot length must be positive".into()));
    }
    if len > 1 && (root == 0 || root >= len || gcd(root, len) != 1) {
        return Err(Error::InvalidParameter(format!("root {root} is not coprime with {len}")));
    }
    let n = len as f64;
    let u = root as f64;
    Ok(CVec::from_fn(len, |i, _| {
        let i = i as f64;
        let arg = if len % 2 == 1 { i * (i + 1.0) } else { i * i };
        C64::from_polar(1.0, -PI * u * arg / n)
    }))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Circular complex Gaussian sample with total variance `var`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

/// Received pilot tensor `𝒴_p` (R_B × 1 × K̄) for 0-based pilot `p`.
///
/// Noise `n ~ CN(0, σ²I)` is drawn per selected subcarrier before the
/// combiner and enters as `W_p^H n`.
pub fn received_pilot<R: Rng + ?Sized>(
    truth: &FrameTruth,
    p: usize,
    beams: &PilotBeams,
    pilots: &CVec,
    selection: &[usize],
    s: &Scenario,
    noise_power: f64,
    rng: &mut R,
) -> Result<ComplexTensor3> {
    if pilots.len() != selection.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} pilots for {} selected subcarriers",
            pilots.len(),
            selection.len()
        )));
    }
    if beams.w.nrows() != s.n_b || beams.f.len() != s.n_u || beams.v.len() != s.n_r {
        return Err(Error::DimensionMismatch("beam dimensions do not match the scenario".into()));
    }
    let rb = beams.w.ncols();
    let kb = selection.len();
    let x = beams.x_matrix();
    let ar_bs = far_field_arv(truth.irs_bs_angle, s.n_r, s.wavelength(), s.spacing());
    let psi_rate = 2.0 * PI * truth.doppler * p as f64 * s.pilot_interval;
    let sqrt_pt = s.transmit_power.sqrt();
    let mut y = ComplexTensor3::zeros([rb, 1, kb]);
    for l in 0..truth.paths.len() {
        let uu = &x * bu_response(truth.paths[l].user_angle, truth.bs_angle, psi_rate, s);
        let ar = irs_path_response(truth, l, s).component_mul(&ar_bs.map(|z| z.conj()));
        let ur = beams.v.transpose() * ar;
        let g = truth.gain(l) * ur[(0, 0)];
        let tau = truth.delay(l);
        for (j, &k) in selection.iter().enumerate() {
            let uk = pilots[j] * sqrt_pt * C64::from_polar(1.0, -2.0 * PI * s.subcarrier_freq(k) * tau);
            for r in 0..rb {
                let cur = y.get(r, 0, j);
                y.set(r, 0, j, cur + g * uu[r] * uk);
            }
        }
    }
    if noise_power > 0.0 {
        let wh = beams.w.adjoint();
        for j in 0..kb {
            let n = CVec::from_fn(s.n_b, |_, _| complex_normal(rng, noise_power));
            let nb = &wh * n;
            for r in 0..rb {
                let cur = y.get(r, 0, j);
                y.set(r, 0, j, cur + nb[r]);
            }
        }
    }
    Ok(y)
}

fn spatial_angle(from: [f64; 2], to: [f64; 2]) -> (f64, f64) {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    let r = (dx * dx + dy * dy).sqrt();
    (dx / r, r)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `(ϑ_B, φ_B)`: spatial angles of the BS-IRS link at the BS and the IRS.
pub fn bs_irs_angles(s: &Scenario) -> (f64, f64) {
    (spatial_angle(s.bs, s.irs).0, spatial_angle(s.irs, s.bs).0)
}

fn path_from_geometry(s: &Scenario, user: [f64; 2], hop: Option<[f64; 2]>, reference: f64, alpha: C64) -> PathTruth {
    let first = hop.unwrap_or(s.irs);
    let (user_angle, _) = spatial_angle(user, first);
    let (irs_angle, irs_distance) = spatial_angle(s.irs, hop.unwrap_or(user));
    let length = match hop {
        Some(h) => dist(user, h) + dist(h, s.irs),
        None => dist(user, s.irs),
    };
    PathTruth { alpha, user_angle, irs_angle, irs_distance, user_delay: (length - reference) / SPEED_OF_LIGHT }
}

/// Draws a geometric frame: scatterer clusters placed around the IRS with
/// log-distance path loss, scaled so the configured SNR holds exactly under
/// random-phase beams (see [`snr_scale`]).
pub fn generate_truth<R: Rng + ?Sized>(s: &Scenario, max_delay: f64, rng: &mut R) -> Result<FrameTruth> {
    let mut truth = FrameTruth::empty(s);
    truth.model = ArrayModel::Exact;
    truth.doppler = s.max_doppler();
    let reference = dist(s.user, s.irs);
    let mut hops: Vec<Option<[f64; 2]>> = Vec::new();
    if s.los {
        hops.push(None);
    }
    let margin = 0.02;
    for &count in &s.clusters {
        let mut placed = false;
        for _attempt in 0..1000 {
            let theta = rng.random_range(s.cluster_angle_range[0]..s.cluster_angle_range[1]);
            let r = rng.random_range(s.cluster_distance_range[0]..s.cluster_distance_range[1]);
            let center = [s.irs[0] + r * theta, s.irs[1] - r * (1.0 - theta * theta).sqrt()];
            let members: Vec<[f64; 2]> = (0..count)
                .map(|_| {
                    [
                        center[0] + rng.random_range(-s.cluster_spread..=s.cluster_spread),
                        center[1] + rng.random_range(-s.cluster_spread..=s.cluster_spread),
                    ]
                })
                .collect();
            let ok = members.iter().all(|&h| {
                let p = path_from_geometry(s, s.user, Some(h), reference, C64::new(1.0, 0.0));
                let eff = p.irs_angle + truth.irs_bs_angle;
                let tau = p.user_delay + truth.bs_delay;
                p.irs_angle.abs() < 1.0 - margin
                    && eff.abs() < 1.0 - margin
                    && p.user_angle.abs() < 1.0 - margin
                    && tau < max_delay
            });
            if ok {
                hops.extend(members.into_iter().map(Some));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidGeometry("could not place a scatterer cluster inside the delay grid".into()));
        }
    }
    let mut gain_means = Vec::with_capacity(hops.len());
    for &hop in &hops {
        let length = match hop {
            Some(h) => dist(s.user, h) * dist(h, s.irs),
            None => dist(s.user, s.irs),
        };
        let var = length.powf(-s.path_loss_exponent);
        let alpha = complex_normal(rng, var);
        gain_means.push(var.sqrt() * (PI / 4.0).sqrt());
        truth.paths.push(path_from_geometry(s, s.user, hop, reference, alpha));
    }
    truth.beta = complex_normal(rng, 1.0);
    let scale = snr_scale(&truth, s);
    truth.beta *= scale;
    truth.geometry = Some(Geometry { user: s.user, scatterers: hops, gain_means, reference_length: reference });
    truth.validate()?;
    Ok(truth)
}

/// Factor that sets `p_T N_U N_R Σ|γ_l|² / σ² = 10^{SNR/10}`, the mean
/// per-antenna signal-to-noise ratio at the combiner input under random-phase
/// user and IRS beams.
pub fn snr_scale(truth: &FrameTruth, s: &Scenario) -> f64 {
    let power: f64 = (0..truth.paths.len()).map(|l| truth.gain(l).norm_sqr()).sum();
    if power == 0.0 {
        return 1.0;
    }
    let target = 10f64.powf(s.snr_db / 10.0) * s.noise_power() / (s.transmit_power * (s.n_u * s.n_r) as f64);
    (target / power).sqrt()
}

/// SNR of `truth` under the random-beam definition of [`snr_scale`].
pub fn snr_of(truth: &FrameTruth, s: &Scenario) -> f64 {
    let power: f64 = (0..truth.paths.len()).map(|l| truth.gain(l).norm_sqr()).sum();
    10.0 * (s.transmit_power * (s.n_u * s.n_r) as f64 * power / s.noise_power()).log10()
}

/// Advances a geometric frame by `dt`: the user moves `speed·dt` along -y,
/// angles/distances/delays are recomputed from positions, scatterers stay put
/// and path gains take one Gauss-Markov step whose correlation grows with the
/// displacement.
pub fn evolve_frame<R: Rng + ?Sized>(prev: &FrameTruth, s: &Scenario, dt: f64, rng: &mut R) -> Result<FrameTruth> {
    let geo = prev
        .geometry
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("frame evolution needs a geometric truth".into()))?;
    let step = s.speed * dt;
    if step == 0.0 {
        return Ok(prev.clone());
    }
    let user = [geo.user[0], geo.user[1] - step];
    if geo.scatterers.iter().any(|h| dist(user, h.unwrap_or(s.irs)) <= 0.0) {
        return Err(Error::InvalidGeometry("user reached a scatterer or the IRS".into()));
    }
    let chi = (s.gain_chi_per_m * step.abs()).min(1.0);
    let mut next = prev.clone();
    for (l, hop) in geo.scatterers.iter().enumerate() {
        let old = prev.paths[l].alpha;
        let mu = geo.gain_means[l];
        let eps: f64 = Normal::new(0.0, s.gain_rel_std * mu).expect("finite std").sample(rng);
        let nu = crate::priors::gauss_markov_step(old.norm(), chi, mu, eps).abs();
        let phase_eps: f64 = Normal::new(0.0, s.phase_std).expect("finite std").sample(rng);
        let omega = wrap_phase(old.arg() + chi * phase_eps);
        let alpha = C64::from_polar(nu, omega);
        next.paths[l] = path_from_geometry(s, user, *hop, geo.reference_length, alpha);
    }
    next.doppler = s.max_doppler();
    if let Some(g) = next.geometry.as_mut() {
        g.user = user;
    }
    next.validate()?;
    Ok(next)
}

/// Line-oriented text form of a frame truth.
pub fn truth_to_text(truth: &FrameTruth) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "frame paths={} doppler={:.12e} bs_angle={:.15} irs_bs_angle={:.15} bs_delay={:.15e} beta={:.15e},{:.15e} model={:?}\n",
        truth.paths.len(),
        truth.doppler,
        truth.bs_angle,
        truth.irs_bs_angle,
        truth.bs_delay,
        truth.beta.re,
        truth.beta.im,
        truth.model
    ));
    for (l, p) in truth.paths.iter().enumerate() {
        let g = truth.gain(l);
        out.push_str(&format!(
            "path {l} gain={:.15e},{:.15e} user_angle={:.15} eff_angle={:.15} eff_distance={:.15e} delay={:.15e} irs_angle={:.15} irs_distance={:.15e}\n",
            g.re,
            g.im,
            p.user_angle,
            truth.eff_angle(l),
            truth.eff_distance(l),
            truth.delay(l),
            p.irs_angle,
            p.irs_distance
        ));
    }
    out
}

/// Parses [`truth_to_text`] output (geometry is not round-tripped).
pub fn truth_from_text(text: &str) -> Result<FrameTruth> {
    let bad = |m: &str| Error::InvalidParameter(format!("frame text: {m}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let head = lines.next().ok_or_else(|| bad("missing header"))?;
    let kv = |line: &str, key: &str| -> Result<String> {
        line.split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{key}=")).map(str::to_string))
            .ok_or_else(|| bad(&format!("missing {key}")))
    };
    let num = |v: String| v.parse::<f64>().map_err(|_| bad("number"));
    let cplx = |v: String| -> Result<C64> {
        let (a, b) = v.split_once(',').ok_or_else(|| bad("complex"))?;
        Ok(C64::new(a.parse().map_err(|_| bad("complex"))?, b.parse().map_err(|_| bad("complex"))?))
    };
    let model = match kv(head, "model")?.as_str() {
        "Exact" => ArrayModel::Exact,
        "Fresnel" => ArrayModel::Fresnel,
        _ => return Err(bad("model")),
    };
    let mut truth = FrameTruth {
        paths: Vec::new(),
        beta: cplx(kv(head, "beta")?)?,
        doppler: num(kv(head, "doppler")?)?,
        bs_angle: num(kv(head, "bs_angle")?)?,
        irs_bs_angle: num(kv(head, "irs_bs_angle")?)?,
        bs_delay: num(kv(head, "bs_delay")?)?,
        model,
        geometry: None,
    };
    for line in lines {
        let irs_angle = num(kv(line, "irs_angle")?)?;
        truth.paths.push(PathTruth {
            alpha: cplx(kv(line, "gain")?)? / truth.beta,
            user_angle: num(kv(line, "user_angle")?)?,
            irs_angle,
            irs_distance: num(kv(line, "irs_distance")?)?,
            user_delay: num(kv(line, "delay")?)? - truth.bs_delay,
        });
    }
    Ok(truth)
}

pub fn unit(theta: f64) -> Complex64 {
    Complex64::from_polar(1.0, theta)
}
