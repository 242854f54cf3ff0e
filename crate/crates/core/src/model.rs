//! Reduced observation model shared by both estimation stages.
//!
//! Every combiner column points at the BS direction, so pilot `p`'s signal
//! and noise both live in the span of `b_p = W_p^H a_B`. After whitening with
//! `(W_p^H W_p)^{-1/2}` the noise is white and the per-subcarrier observation
//! splits into an in-span scalar `t_p[j] = b̃_p^H ỹ_p[j] / β_p` with weight
//! `β_p = ‖b̃_p‖²` and an orthogonal remainder that no atom can explain:
//!
//! `Σ_j ‖ỹ_p[j] - b̃_p m_p[j]‖² = outside_p + β_p ‖t_p - m_p‖²`.
//!
//! An atom `(φ, ϑ̄, r̄, τ)` contributes `m_p[j] = a_p · uK[j]` with
//! `a_p = (f_pᵀ a_U*(φ) e^{j2π f_d p T_s φ}) (v_pᵀ a_R(ϑ̄, r̄))` and
//! `uK[j] = √p_T x_j e^{-j2π f_j τ}`.

use std::f64::consts::PI;

use nalgebra::SymmetricEigen;

use crate::channel::{far_field_arv, fresnel_delta, PilotBeams, Scenario};
use crate::error::{Error, Result};
use crate::grid::{GridSet, OffGridState};
use crate::tensor::{CMat, CVec, ComplexTensor3, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq)]
pub struct PilotObs {
    pub data: Vec<C64>,
    pub weight: f64,
    pub user_beam: CVec,
    pub irs_beam: CVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub pilots: Vec<PilotObs>,
    /// Energy of the whitened observation outside every pilot's signal span.
    pub outside_energy: f64,
    pub noise_power: f64,
    /// Number of whitened complex observations.
    pub observations: usize,
    freqs: Vec<f64>,
    symbols: Vec<C64>,
    wavenumber: f64,
    spacing: f64,
    pilot_interval: f64,
}

/// Continuous parameters of one atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomGeom {
    pub user_angle: f64,
    pub polar_angle: f64,
    pub polar_distance: f64,
    pub delay: f64,
}

impl AtomGeom {
    pub fn at(g: &GridSet, og: &OffGridState, u: usize, m: usize, k: usize) -> Self {
        Self {
            user_angle: g.user_angles[u] + og.user[u],
            polar_angle: g.polar_angles[m] + og.polar_angle[m],
            polar_distance: g.polar_distances[m] + og.polar_distance[m],
            delay: g.delays[k] + og.delay[k],
        }
    }
}

/// Continuous parameter an atom response can be differentiated by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Doppler,
    UserAngle,
    PolarAngle,
    PolarDistance,
    Delay,
}

impl ObservationModel {
    /// Builds the reduced model from per-pilot tensors `R_B × 1 × K̄`.
    pub fn new(
        ys: &[ComplexTensor3],
        beams: &[PilotBeams],
        pilots: &CVec,
        selection: &[usize],
        s: &Scenario,
        noise_power: f64,
    ) -> Result<Self> {
        if ys.len() != beams.len() || ys.is_empty() {
            return Err(Error::DimensionMismatch(format!("{} observations for {} beams", ys.len(), beams.len())));
        }
        if pilots.len() != selection.len() {
            return Err(Error::DimensionMismatch("pilot and selection lengths differ".into()));
        }
        if noise_power <= 0.0 {
            return Err(Error::InvalidParameter("noise power must be positive".into()));
        }
        let (bs_angle, _) = crate::channel::bs_irs_angles(s);
        let ab = far_field_arv(bs_angle, s.n_b, s.wavelength(), s.spacing());
        let kb = selection.len();
        let mut out = Vec::with_capacity(ys.len());
        let mut outside = 0.0;
        let mut observations = 0;
        for (y, bm) in ys.iter().zip(beams) {
            let rb = bm.w.ncols();
            if y.dims() != [rb, 1, kb] {
                return Err(Error::DimensionMismatch(format!("observation dims {:?}", y.dims())));
            }
            let gram = bm.w.adjoint() * &bm.w;
            let eig = SymmetricEigen::new(gram);
            let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let keep: Vec<usize> = (0..rb).filter(|&i| eig.eigenvalues[i] > 1e-10 * top).collect();
            if keep.is_empty() {
                return Err(Error::RankDeficient);
            }
            // Whitening map Λ^{-1/2} Q^H restricted to the kept eigenvectors.
            let white = CMat::from_fn(keep.len(), rb, |r, c| {
                eig.eigenvectors[(c, keep[r])].conj() / eig.eigenvalues[keep[r]].sqrt()
            });
            let b = &white * (bm.w.adjoint() * &ab);
            let beta = b.norm_squared();
            let mut data = Vec::with_capacity(kb);
            for j in 0..kb {
                let col = CVec::from_fn(rb, |r, _| y.get(r, 0, j));
                let yw = &white * col;
                let t = b.dotc(&yw) / beta;
                outside += (yw - &b * t).norm_squared();
                data.push(t);
            }
            observations += keep.len() * kb;
            out.push(PilotObs { data, weight: beta, user_beam: bm.f.clone(), irs_beam: bm.v.clone() });
        }
        let sqrt_pt = s.transmit_power.sqrt();
        Ok(Self {
            pilots: out,
            outside_energy: outside,
            noise_power,
            observations,
            freqs: selection.iter().map(|&k| s.subcarrier_freq(k)).collect(),
            symbols: pilots.iter().map(|x| x * sqrt_pt).collect(),
            wavenumber: 2.0 * PI / s.wavelength(),
            spacing: s.spacing(),
            pilot_interval: s.pilot_interval,
        })
    }

    pub fn pilot_count(&self) -> usize {
        self.pilots.len()
    }

    pub fn subcarrier_count(&self) -> usize {
        self.freqs.len()
    }

    /// Length of flattened per-pilot vectors (`P · K̄`).
    pub fn flat_len(&self) -> usize {
        self.pilots.len() * self.freqs.len()
    }

    pub fn data(&self) -> Vec<C64> {
        self.pilots.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Weighted energy `outside + Σ_p β_p ‖r_p‖²` of an in-span residual.
    pub fn energy(&self, residual: &[C64]) -> f64 {
        let kb = self.freqs.len();
        let inside: f64 = self
            .pilots
            .iter()
            .enumerate()
            .map(|(p, po)| po.weight * residual[p * kb..(p + 1) * kb].iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum();
        self.outside_energy + inside
    }

    pub fn data_energy(&self) -> f64 {
        self.energy(&self.data())
    }

    /// Expected energy of pure noise.
    pub fn noise_energy(&self) -> f64 {
        self.noise_power * self.observations as f64
    }

    /// `f_pᵀ a_U*(φ) e^{j2π f_d p T_s φ}` and its derivatives in `φ` and `f_d`.
    pub fn user_coeff(&self, p: usize, phi: f64, doppler: f64) -> (C64, C64, C64) {
        let f = &self.pilots[p].user_beam;
        let mut c = ZERO;
        let mut dc = ZERO;
        for i in 0..f.len() {
            let a = self.wavenumber * i as f64 * self.spacing;
            let e = f[i] * C64::from_polar(1.0, a * phi);
            c += e;
            dc += e * C64::new(0.0, a);
        }
        let rate = 2.0 * PI * p as f64 * self.pilot_interval;
        let rot = C64::from_polar(1.0, rate * doppler * phi);
        let value = c * rot;
        let d_phi = dc * rot + value * C64::new(0.0, rate * doppler);
        let d_doppler = value * C64::new(0.0, rate * phi);
        (value, d_phi, d_doppler)
    }

    /// `v_pᵀ a_R(ϑ̄, r̄)` and its derivatives in `ϑ̄` and `r̄`.
    pub fn irs_coeff(&self, p: usize, angle: f64, distance: f64) -> (C64, C64, C64) {
        let v = &self.pilots[p].irs_beam;
        let k = self.wavenumber;
        let mut c = ZERO;
        let mut da = ZERO;
        let mut dr = ZERO;
        for n in 0..v.len() {
            let x = n as f64 * self.spacing;
            let e = v[n] * C64::from_polar(1.0, -k * fresnel_delta(angle, distance, n, self.spacing));
            c += e;
            // d/dϑ of δ is -x - x²ϑ/r; d/dr is -x²(1-ϑ²)/(2r²).
            da += e * C64::new(0.0, -k * (-x - x * x * angle / distance));
            dr += e * C64::new(0.0, -k * (-x * x * (1.0 - angle * angle) / (2.0 * distance * distance)));
        }
        (c, da, dr)
    }

    /// `uK(τ)` and `duK/dτ`.
    pub fn delay_vec(&self, tau: f64) -> (Vec<C64>, Vec<C64>) {
        let mut v = Vec::with_capacity(self.freqs.len());
        let mut dv = Vec::with_capacity(self.freqs.len());
        for (f, x) in self.freqs.iter().zip(&self.symbols) {
            let e = x * C64::from_polar(1.0, -2.0 * PI * f * tau);
            v.push(e);
            dv.push(e * C64::new(0.0, -2.0 * PI * f));
        }
        (v, dv)
    }

    /// `f_pᵀ a_U*(φ) e^{j2π f_d p T_s φ}` for every pilot.
    pub fn user_coeffs(&self, phi: f64, doppler: f64) -> Vec<C64> {
        let n = self.pilots[0].user_beam.len();
        let arv: Vec<C64> = (0..n).map(|i| C64::from_polar(1.0, self.wavenumber * i as f64 * self.spacing * phi)).collect();
        let step = 2.0 * PI * self.pilot_interval * doppler * phi;
        self.pilots
            .iter()
            .enumerate()
            .map(|(p, po)| po.user_beam.iter().zip(&arv).map(|(f, a)| f * a).sum::<C64>() * C64::from_polar(1.0, step * p as f64))
            .collect()
    }

    /// `v_pᵀ a_R(ϑ̄, r̄)` for every pilot.
    pub fn irs_coeffs(&self, angle: f64, distance: f64) -> Vec<C64> {
        let n = self.pilots[0].irs_beam.len();
        let k = self.wavenumber;
        let arv: Vec<C64> = (0..n).map(|i| C64::from_polar(1.0, -k * fresnel_delta(angle, distance, i, self.spacing))).collect();
        self.pilots.iter().map(|po| po.irs_beam.iter().zip(&arv).map(|(v, a)| v * a).sum()).collect()
    }

    /// Flattened response for per-pilot coefficients and a delay vector.
    pub fn combine(&self, user: &[C64], irs: &[C64], uk: &[C64]) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (cu, cr) in user.iter().zip(irs) {
            let c = cu * cr;
            out.extend(uk.iter().map(|x| c * x));
        }
        out
    }

    /// Flattened unit-gain response of one atom.
    pub fn response(&self, a: &AtomGeom, doppler: f64) -> Vec<C64> {
        let (uk, _) = self.delay_vec(a.delay);
        self.combine(&self.user_coeffs(a.user_angle, doppler), &self.irs_coeffs(a.polar_angle, a.polar_distance), &uk)
    }

    /// Unit-gain response and its derivative along `param`.
    pub fn response_grad(&self, a: &AtomGeom, doppler: f64, param: Param) -> (Vec<C64>, Vec<C64>) {
        let (uk, duk) = self.delay_vec(a.delay);
        let n = self.flat_len();
        let mut out = Vec::with_capacity(n);
        let mut dout = Vec::with_capacity(n);
        for p in 0..self.pilots.len() {
            let (cu, cu_phi, cu_f) = self.user_coeff(p, a.user_angle, doppler);
            let (cr, cr_a, cr_r) = self.irs_coeff(p, a.polar_angle, a.polar_distance);
            let c = cu * cr;
            let dc = match param {
                Param::Doppler => cu_f * cr,
                Param::UserAngle => cu_phi * cr,
                Param::PolarAngle => cu * cr_a,
                Param::PolarDistance => cu * cr_r,
                Param::Delay => ZERO,
            };
            for j in 0..uk.len() {
                out.push(c * uk[j]);
                dout.push(if param == Param::Delay { c * duk[j] } else { dc * uk[j] });
            }
        }
        (out, dout)
    }

    /// `Σ_p β_p ⟨x_p, y_p⟩` with `⟨x, y⟩ = Σ conj(x) y`.
    pub fn inner(&self, x: &[C64], y: &[C64]) -> C64 {
        let kb = self.freqs.len();
        let mut acc = ZERO;
        for (p, po) in self.pilots.iter().enumerate() {
            let mut s = ZERO;
            for j in p * kb..(p + 1) * kb {
                s += x[j].conj() * y[j];
            }
            acc += s * po.weight;
        }
        acc
    }

    /// Weighted least-squares gains for fixed responses.
    pub fn ls_gains(&self, responses: &[Vec<C64>], target: &[C64]) -> Result<Vec<C64>> {
        if responses.is_empty() {
            return Ok(Vec::new());
        }
        let kb = self.freqs.len();
        let n = self.flat_len();
        let sw: Vec<f64> = (0..n).map(|i| self.pilots[i / kb].weight.sqrt()).collect();
        let a = CMat::from_fn(n, responses.len(), |i, l| responses[l][i] * sw[i]);
        let b = CVec::from_fn(n, |i, _| target[i] * sw[i]);
        let svd = a.svd(true, true);
        let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let low = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(top > 0.0) || low < 1e-9 * top {
            return Err(Error::RankDeficient);
        }
        let x = svd.solve(&b, 0.0).map_err(|e| Error::NonFinite(e.to_string()))?;
        Ok(x.iter().copied().collect())
    }

    /// Posterior-mean gains for fixed responses under independent complex
    /// Gaussian priors `(mean, variance)`: least squares on the whitened rows
    /// stacked with one prior row per gain.
    pub fn map_gains(&self, responses: &[Vec<C64>], target: &[C64], prior: &[(C64, f64)]) -> Result<Vec<C64>> {
        if responses.is_empty() {
            return Ok(Vec::new());
        }
        if prior.len() != responses.len() || prior.iter().any(|&(_, v)| !(v > 0.0)) {
            return Err(Error::InvalidParameter("one positive-variance prior per gain".into()));
        }
        let kb = self.freqs.len();
        let n = self.flat_len();
        let l = responses.len();
        let sd = self.noise_power.sqrt();
        let sw: Vec<f64> = (0..n).map(|i| self.pilots[i / kb].weight.sqrt() / sd).collect();
        let a = CMat::from_fn(n + l, l, |i, j| {
            if i < n {
                responses[j][i] * sw[i]
            } else if i - n == j {
                C64::new(1.0 / prior[j].1.sqrt(), 0.0)
            } else {
                ZERO
            }
        });
        let b = CVec::from_fn(n + l, |i, _| if i < n { target[i] * sw[i] } else { prior[i - n].0 / prior[i - n].1.sqrt() });
        let x = a.svd(true, true).solve(&b, 0.0).map_err(|e| Error::NonFinite(e.to_string()))?;
        Ok(x.iter().copied().collect())
    }

    /// `target - Σ_l z_l r_l`.
    pub fn residual(&self, responses: &[Vec<C64>], gains: &[C64], target: &[C64]) -> Vec<C64> {
        let mut r = target.to_vec();
        for (resp, z) in responses.iter().zip(gains) {
            for (ri, x) in r.iter_mut().zip(resp) {
                *ri -= z * x;
            }
        }
        r
    }
}
