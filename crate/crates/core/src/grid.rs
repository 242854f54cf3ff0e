//! Angle, delay and polar grids, off-grid perturbations, per-mode
//! dictionaries and the vectorized measurement operator.
//!
//! All indices are 0-based. The polar grid is angle-major: point `m` has
//! angle index `m / S` and ring index `m % S`; ring 0 is the far-field ring.
//! The linear index of a core entry is `n = k·N̄_R·N_U + m·N_U + u`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::{
    delay_response, far_field_arv, fresnel_arv, FrameTruth, PilotBeams, Scenario,
};
use crate::error::{Error, Result};
use crate::tensor::{kron, CMat, CVec, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Distance rings per polar angle `S`.
    pub rings: usize,
    /// Threshold distance `Z_Δ` in meters; defaults to Rayleigh distance / 8.
    pub z_delta: Option<f64>,
    /// Delay grid size `N_f`; defaults to `3·L_cp/4` with `L_cp = K/4`.
    pub delay_points: Option<usize>,
    /// Far-field ring distance as a multiple of the Rayleigh distance.
    pub far_ring_factor: f64,
    /// Comb pattern: 1-based subcarrier `stride·n + offset` for `n = 1..K̄`.
    pub comb_stride: usize,
    pub comb_offset: i64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rings: 3, z_delta: None, delay_points: Some(8), far_ring_factor: 64.0, comb_stride: 4, comb_offset: -1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSet {
    pub user_angles: Vec<f64>,
    pub delays: Vec<f64>,
    pub polar_angles: Vec<f64>,
    pub polar_distances: Vec<f64>,
    /// Number of polar angles (`N_R`).
    pub angle_count: usize,
    pub rings: usize,
    pub z_delta: f64,
    pub far_distance: f64,
    pub bandwidth: f64,
}

impl GridSet {
    pub fn n_u(&self) -> usize {
        self.user_angles.len()
    }

    pub fn n_bar_r(&self) -> usize {
        self.polar_angles.len()
    }

    pub fn n_f(&self) -> usize {
        self.delays.len()
    }

    pub fn n_bar(&self) -> usize {
        self.n_u() * self.n_bar_r() * self.n_f()
    }

    pub fn linear_index(&self, u: usize, m: usize, k: usize) -> usize {
        k * self.n_bar_r() * self.n_u() + m * self.n_u() + u
    }

    pub fn triple(&self, n: usize) -> (usize, usize, usize) {
        let nu = self.n_u();
        let plane = nu * self.n_bar_r();
        (n % nu, (n % plane) / nu, n / plane)
    }

    pub fn polar_index(&self, angle: usize, ring: usize) -> usize {
        angle * self.rings + ring
    }

    pub fn user_spacing(&self) -> f64 {
        2.0 / self.n_u() as f64
    }

    pub fn polar_spacing(&self) -> f64 {
        2.0 / self.angle_count as f64
    }

    pub fn delay_spacing(&self) -> f64 {
        1.0 / self.bandwidth
    }

    /// Half the gap to the nearest other ring at the same angle.
    pub fn ring_half_gap(&self, m: usize) -> f64 {
        let a = m / self.rings;
        let r = self.polar_distances[m];
        let gap = (0..self.rings)
            .filter(|&q| a * self.rings + q != m)
            .map(|q| (self.polar_distances[a * self.rings + q] - r).abs())
            .fold(f64::INFINITY, f64::min);
        if gap.is_finite() { gap / 2.0 } else { r / 2.0 }
    }
}

pub fn build_grids(s: &Scenario, cfg: &GridConfig) -> Result<GridSet> {
    if cfg.rings == 0 {
        return Err(Error::InvalidParameter("at least one distance ring is required".into()));
    }
    let rayleigh = crate::channel::rayleigh_distance(s.n_r, s.wavelength(), s.spacing())?;
    let z_delta = cfg.z_delta.unwrap_or(rayleigh / 8.0);
    if z_delta <= 0.0 {
        return Err(Error::InvalidParameter("z_delta must be positive".into()));
    }
    let n_f = cfg.delay_points.unwrap_or(default_delay_points(s.subcarriers));
    if n_f == 0 {
        return Err(Error::InvalidParameter("delay grid must be non-empty".into()));
    }
    let nu = s.n_u as f64;
    let user_angles = (1..=s.n_u).map(|u| 2.0 / nu * (u as f64 - (nu + 1.0) / 2.0)).collect();
    let delays = (1..=n_f).map(|k| (k as f64 - 0.5) / s.bandwidth).collect();
    let nr = s.n_r as f64;
    let far_distance = cfg.far_ring_factor * rayleigh;
    let mut polar_angles = Vec::with_capacity(s.n_r * cfg.rings);
    let mut polar_distances = Vec::with_capacity(s.n_r * cfg.rings);
    for m in 0..s.n_r * cfg.rings {
        let theta = 2.0 / nr * ((m / cfg.rings) as f64 - (nr - 1.0) / 2.0);
        let q = m % cfg.rings;
        polar_angles.push(theta);
        polar_distances.push(if q == 0 { far_distance } else { z_delta * (1.0 - theta * theta) / q as f64 });
    }
    Ok(GridSet {
        user_angles,
        delays,
        polar_angles,
        polar_distances,
        angle_count: s.n_r,
        rings: cfg.rings,
        z_delta,
        far_distance,
        bandwidth: s.bandwidth,
    })
}

/// `3·L_cp/4` with cyclic prefix `L_cp = K/4`.
pub fn default_delay_points(subcarriers: usize) -> usize {
    3 * (subcarriers / 4) / 4
}

/// 0-based comb subcarrier indices.
pub fn comb_selection(s: &Scenario, cfg: &GridConfig) -> Result<Vec<usize>> {
    (1..=s.pilot_subcarriers as i64)
        .map(|n| {
            let one_based = cfg.comb_stride as i64 * n + cfg.comb_offset;
            if one_based < 1 || one_based > s.subcarriers as i64 {
                Err(Error::InvalidParameter(format!("comb subcarrier {one_based} outside 1..={}", s.subcarriers)))
            } else {
                Ok(one_based as usize - 1)
            }
        })
        .collect()
}

/// Law-of-cosines distance between two polar points `(ϑ, r)`.
pub fn polar_distance(p1: (f64, f64), p2: (f64, f64)) -> Result<f64> {
    if p1.0.abs() > 1.0 || p2.0.abs() > 1.0 {
        return Err(Error::InvalidParameter("spatial angle outside [-1, 1]".into()));
    }
    let (t1, t2) = (p1.0.acos(), p2.0.acos());
    let v = p1.1 * p1.1 + p2.1 * p2.1 - 2.0 * p1.1 * p2.1 * (t2 - t1).cos();
    Ok(v.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffGridState {
    pub user: Vec<f64>,
    pub delay: Vec<f64>,
    pub polar_angle: Vec<f64>,
    pub polar_distance: Vec<f64>,
}

impl OffGridState {
    pub fn zeros(g: &GridSet) -> Self {
        Self {
            user: vec![0.0; g.n_u()],
            delay: vec![0.0; g.n_f()],
            polar_angle: vec![0.0; g.n_bar_r()],
            polar_distance: vec![0.0; g.n_bar_r()],
        }
    }

    /// Projects every entry onto its clamp box.
    pub fn clamp(&mut self, g: &GridSet) {
        let hu = g.user_spacing() / 2.0;
        let hp = g.polar_spacing() / 2.0;
        let hd = g.delay_spacing() / 2.0;
        self.user.iter_mut().for_each(|x| *x = x.clamp(-hu, hu));
        self.delay.iter_mut().for_each(|x| *x = x.clamp(-hd, hd));
        self.polar_angle.iter_mut().for_each(|x| *x = x.clamp(-hp, hp));
        for (m, x) in self.polar_distance.iter_mut().enumerate() {
            let h = g.ring_half_gap(m);
            *x = x.clamp(-h, h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAssignment {
    pub triples: Vec<(usize, usize, usize)>,
    pub offgrid: OffGridState,
    /// Pairs of paths mapped to the same triple.
    pub collisions: Vec<(usize, usize)>,
}

impl GridAssignment {
    /// Every mode index is used by at most one path, so each path owns its
    /// off-grid offsets.
    pub fn is_resolvable(&self) -> bool {
        let distinct = |f: fn(&(usize, usize, usize)) -> usize| {
            let mut v: Vec<usize> = self.triples.iter().map(f).collect();
            v.sort_unstable();
            v.dedup();
            v.len() == self.triples.len()
        };
        distinct(|t| t.0) && distinct(|t| t.1) && distinct(|t| t.2)
    }
}

pub fn nearest(values: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if (v - x).abs() < (values[best] - x).abs() {
            best = i;
        }
    }
    best
}

pub fn nearest_polar(g: &GridSet, angle: f64, distance: f64) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for m in 0..g.n_bar_r() {
        let d = polar_distance((angle, distance), (g.polar_angles[m], g.polar_distances[m]))?;
        if d < best.1 {
            best = (m, d);
        }
    }
    Ok(best.0)
}

pub fn assign_to_grid(truth: &FrameTruth, g: &GridSet) -> Result<GridAssignment> {
    let max = *g.delays.last().expect("non-empty delay grid");
    let mut og = OffGridState::zeros(g);
    let mut triples = Vec::with_capacity(truth.paths.len());
    let mut set_u = vec![false; g.n_u()];
    let mut set_m = vec![false; g.n_bar_r()];
    let mut set_k = vec![false; g.n_f()];
    for l in 0..truth.paths.len() {
        let tau = truth.delay(l);
        if tau >= max {
            return Err(Error::DelayOutOfRange { delay: tau, max });
        }
        let phi = truth.paths[l].user_angle;
        let (angle, distance) = (truth.eff_angle(l), truth.eff_distance(l));
        let u = nearest(&g.user_angles, phi);
        let k = nearest(&g.delays, tau);
        let m = nearest_polar(g, angle, distance)?;
        if !set_u[u] {
            og.user[u] = phi - g.user_angles[u];
            set_u[u] = true;
        }
        if !set_k[k] {
            og.delay[k] = tau - g.delays[k];
            set_k[k] = true;
        }
        if !set_m[m] {
            og.polar_angle[m] = angle - g.polar_angles[m];
            og.polar_distance[m] = distance - g.polar_distances[m];
            set_m[m] = true;
        }
        triples.push((u, m, k));
    }
    let mut collisions = Vec::new();
    for a in 0..triples.len() {
        for b in a + 1..triples.len() {
            if triples[a] == triples[b] {
                collisions.push((a, b));
            }
        }
    }
    Ok(GridAssignment { triples, offgrid: og, collisions })
}

/// `ã_BU,p(φ) = (a_U*(φ) ⊗ a_B(ϑ_B)) e^{j2π f_d p T_s φ}` for 0-based `p`.
pub fn bu_atom(phi: f64, p: usize, doppler: f64, s: &Scenario) -> CVec {
    let (bs_angle, _) = crate::channel::bs_irs_angles(s);
    crate::channel::bu_response(phi, bs_angle, 2.0 * PI * doppler * p as f64 * s.pilot_interval, s)
}

pub fn polar_atom(angle: f64, distance: f64, s: &Scenario) -> CVec {
    fresnel_arv(angle, distance, s.n_r, s.wavelength(), s.spacing())
}

/// Per-mode dictionaries `(Ã_BU,p, A_R, A_f)` for 0-based pilot `p`.
pub fn build_dictionaries(g: &GridSet, og: &OffGridState, p: usize, doppler: f64, s: &Scenario) -> (CMat, CMat, CMat) {
    let nbu = s.n_bu();
    let mut abu = CMat::zeros(nbu, g.n_u());
    for u in 0..g.n_u() {
        abu.set_column(u, &bu_atom(g.user_angles[u] + og.user[u], p, doppler, s));
    }
    let mut ar = CMat::zeros(s.n_r, g.n_bar_r());
    for m in 0..g.n_bar_r() {
        let atom = polar_atom(g.polar_angles[m] + og.polar_angle[m], g.polar_distances[m] + og.polar_distance[m], s);
        ar.set_column(m, &atom);
    }
    let mut af = CMat::zeros(s.subcarriers, g.n_f());
    for k in 0..g.n_f() {
        af.set_column(k, &delay_response(s, g.delays[k] + og.delay[k]));
    }
    (abu, ar, af)
}

/// `√p_T diag(x) S A_f`.
pub fn delay_projection(af: &CMat, pilots: &CVec, selection: &[usize], s: &Scenario) -> CMat {
    let sqrt_pt = s.transmit_power.sqrt();
    CMat::from_fn(selection.len(), af.ncols(), |j, k| af[(selection[j], k)] * pilots[j] * sqrt_pt)
}

pub fn measurement_matrix(
    p: usize,
    beams: &PilotBeams,
    pilots: &CVec,
    selection: &[usize],
    g: &GridSet,
    og: &OffGridState,
    doppler: f64,
    s: &Scenario,
) -> Result<CMat> {
    if pilots.len() != selection.len() {
        return Err(Error::DimensionMismatch("pilot and selection lengths differ".into()));
    }
    if beams.v.len() != s.n_r || beams.f.len() != s.n_u || beams.w.nrows() != s.n_b {
        return Err(Error::DimensionMismatch("beam dimensions do not match the scenario".into()));
    }
    let (abu, ar, af) = build_dictionaries(g, og, p, doppler, s);
    let uk = delay_projection(&af, pilots, selection, s);
    let ur = CMat::from_row_slice(1, ar.ncols(), (beams.v.transpose() * &ar).as_slice());
    let uu = beams.x_matrix() * abu;
    Ok(kron(&kron(&uk, &ur), &uu))
}

pub fn stack_observations(ys: &[CVec]) -> Result<CVec> {
    if let Some(first) = ys.first() {
        if ys.iter().any(|y| y.len() != first.len()) {
            return Err(Error::DimensionMismatch("ragged per-pilot observations".into()));
        }
    }
    let data: Vec<C64> = ys.iter().flat_map(|y| y.iter().copied()).collect();
    Ok(CVec::from_vec(data))
}

pub fn unstack_observations(y: &CVec, pilots: usize) -> Result<Vec<CVec>> {
    if pilots == 0 || y.len() % pilots != 0 {
        return Err(Error::DimensionMismatch(format!("{} entries do not split into {pilots} pilots", y.len())));
    }
    let n = y.len() / pilots;
    Ok((0..pilots).map(|p| y.rows(p * n, n).into_owned()).collect())
}

/// On-grid truth with Fresnel IRS responses: one path per `(u, m, k, gain)`.
pub fn on_grid_truth(s: &Scenario, g: &GridSet, atoms: &[(usize, usize, usize, C64)], doppler: f64) -> Result<FrameTruth> {
    let mut truth = FrameTruth::empty(s);
    truth.doppler = doppler;
    for &(u, m, k, gain) in atoms {
        truth.push_effective(gain, g.user_angles[u], g.polar_angles[m], g.polar_distances[m], g.delays[k]);
    }
    truth.validate()?;
    Ok(truth)
}

/// Far-field IRS response used for the BS direction.
pub fn bs_direction_arv(s: &Scenario) -> CVec {
    let (_, irs_bs) = crate::channel::bs_irs_angles(s);
    far_field_arv(irs_bs, s.n_r, s.wavelength(), s.spacing())
}
