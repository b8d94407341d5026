//! Two photons in four modes (path ⊗ polarization).
//!
//! The coherent part is stored as amplitudes over the ten symmetric
//! occupation states. Partial distinguishability is carried by a second,
//! classically mixed component of two independent photons.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::elements::{waveplate_jones, WaveplateConfig};
use crate::error::{Error, Result};
use crate::fit::{sinusoid_fit, FitPoint, SinusoidFit, SinusoidModel};
use crate::polmath::{cr, Mat2, Mat4, C64};
use crate::router::{arm_paths_full, ModeTransfer, Port, RouterConfig};

pub const MODES: usize = 4;
pub const BASIS_LEN: usize = 10;

pub fn mode_index(path: Port, vertical: bool) -> usize {
    2 * path.index() + usize::from(vertical)
}

/// Occupied modes of each basis state, `(m, n)` with `m ≤ n`.
pub fn basis() -> [(usize, usize); BASIS_LEN] {
    let mut out = [(0, 0); BASIS_LEN];
    let mut k = 0;
    for m in 0..MODES {
        for n in m..MODES {
            out[k] = (m, n);
            k += 1;
        }
    }
    out
}

pub fn basis_index(m: usize, n: usize) -> usize {
    let (m, n) = if m <= n { (m, n) } else { (n, m) };
    basis().iter().position(|&b| b == (m, n)).expect("modes < 4")
}

/// One term of the distinguishable component: two photons in independent
/// single-photon mode states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistinguishablePair {
    pub weight: f64,
    pub first: [C64; MODES],
    pub second: [C64; MODES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhotonState {
    /// Coherent amplitudes; squared norm is the indistinguishable weight.
    pub amplitudes: [C64; BASIS_LEN],
    pub distinguishable: Vec<DistinguishablePair>,
}

fn unit(mode: usize) -> [C64; MODES] {
    let mut v = [C64::new(0.0, 0.0); MODES];
    v[mode] = cr(1.0);
    v
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Usage(format!("indistinguishability must lie in [0,1], got {mu}")));
    }
    Ok(())
}

/// Two mutually distinguishable, unpolarized photons in `path`, total weight `w`.
fn unpolarized_pair(path: Port, w: f64) -> Vec<DistinguishablePair> {
    if w == 0.0 {
        return Vec::new();
    }
    let (h, v) = (mode_index(path, false), mode_index(path, true));
    let mut out = Vec::with_capacity(4);
    for a in [h, v] {
        for b in [h, v] {
            out.push(DistinguishablePair { weight: 0.25 * w, first: unit(a), second: unit(b) });
        }
    }
    out
}

/// One H and one V photon in path 1, indistinguishable with weight `mu`.
pub fn spdc_pair_state(mu: f64) -> Result<TwoPhotonState> {
    check_mu(mu)?;
    let mut amplitudes = [C64::new(0.0, 0.0); BASIS_LEN];
    amplitudes[basis_index(0, 1)] = cr(mu.sqrt());
    Ok(TwoPhotonState { amplitudes, distinguishable: unpolarized_pair(Port::One, 1.0 - mu) })
}

/// The pair re-expressed in the diagonal basis, (|2⟩_D − |2⟩_A)/√2.
///
/// Identical to [`spdc_pair_state`] as a state; the name records its role.
pub fn noon_state(mu: f64) -> Result<TwoPhotonState> {
    spdc_pair_state(mu)
}

impl TwoPhotonState {
    pub fn coherent_weight(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn distinguishable_weight(&self) -> f64 {
        self.distinguishable
            .iter()
            .map(|p| {
                let n1: f64 = p.first.iter().map(|a| a.norm_sqr()).sum();
                let n2: f64 = p.second.iter().map(|a| a.norm_sqr()).sum();
                p.weight * n1 * n2
            })
            .sum()
    }

    /// Probability that both photons are still present.
    pub fn norm(&self) -> f64 {
        self.coherent_weight() + self.distinguishable_weight()
    }

    pub fn amplitude(&self, m: usize, n: usize) -> C64 {
        self.amplitudes[basis_index(m, n)]
    }

    /// Coherent amplitudes of path-1 states on (|2_D⟩, |1_D 1_A⟩, |2_A⟩).
    pub fn diagonal_amplitudes(&self, path: Port) -> [C64; 3] {
        let s = 0.5f64.sqrt();
        let to_diag = Mat2::new(cr(s), cr(s), cr(s), cr(-s));
        let mut t = Mat4::identity();
        let o = 2 * path.index();
        for i in 0..2 {
            for j in 0..2 {
                t[(o + i, o + j)] = to_diag[(i, j)];
            }
        }
        let moved = evolve_amplitudes(&self.amplitudes, &t);
        let (d, a) = (mode_index(path, false), mode_index(path, true));
        [moved[basis_index(d, d)], moved[basis_index(d, a)], moved[basis_index(a, a)]]
    }
}

/// S' = T S Tᵀ on the symmetric amplitude tensor.
fn evolve_amplitudes(c: &[C64; BASIS_LEN], t: &Mat4) -> [C64; BASIS_LEN] {
    let mut s = Mat4::zeros();
    for (k, &(m, n)) in basis().iter().enumerate() {
        if m == n {
            s[(m, m)] = c[k] / 2f64.sqrt();
        } else {
            s[(m, n)] = c[k] * 0.5;
            s[(n, m)] = c[k] * 0.5;
        }
    }
    let s2 = t * s * t.transpose();
    let mut out = [C64::new(0.0, 0.0); BASIS_LEN];
    for (k, &(m, n)) in basis().iter().enumerate() {
        out[k] = if m == n { s2[(m, m)] * 2f64.sqrt() } else { s2[(m, n)] + s2[(n, m)] };
    }
    out
}

fn apply_vec(t: &Mat4, v: &[C64; MODES]) -> [C64; MODES] {
    let mut out = [C64::new(0.0, 0.0); MODES];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..MODES).map(|j| t[(i, j)] * v[j]).sum();
    }
    out
}

/// Propagates both components through a linear-optical network.
pub fn apply_mode_transform(state: &TwoPhotonState, t: &ModeTransfer) -> Result<TwoPhotonState> {
    let t = ModeTransfer::new(*t.matrix())?;
    let m = t.matrix();
    Ok(TwoPhotonState {
        amplitudes: evolve_amplitudes(&state.amplitudes, m),
        distinguishable: state
            .distinguishable
            .iter()
            .map(|p| DistinguishablePair {
                weight: p.weight,
                first: apply_vec(m, &p.first),
                second: apply_vec(m, &p.second),
            })
            .collect(),
    })
}

/// A statistical mixture of two-photon states.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhotonMixture(pub Vec<(f64, TwoPhotonState)>);

impl From<TwoPhotonState> for TwoPhotonMixture {
    fn from(s: TwoPhotonState) -> Self {
        TwoPhotonMixture(vec![(1.0, s)])
    }
}

/// Sends a two-photon state through the router at drive voltage `voltage`.
///
/// Reduced mode overlap acts as a random π phase on arm 1 shared by both
/// photons (they occupy the same spatial mode), which leaves the single-photon
/// statistics of [`crate::router::route_single_photon`] unchanged.
pub fn route_two_photon(
    cfg: &RouterConfig,
    state: &TwoPhotonState,
    voltage: f64,
) -> Result<TwoPhotonMixture> {
    let (u1, u2) = cfg.eom_voltages(voltage);
    let mu = cfg.overlap_at(u1, u2);
    let mut out = Vec::with_capacity(2);
    for (weight, sign) in [(0.5 * (1.0 + mu), 1.0), (0.5 * (1.0 - mu), -1.0)] {
        if weight == 0.0 {
            continue;
        }
        let t = ModeTransfer::new(arm_paths_full(cfg, u1, u2, sign))?;
        out.push((weight, apply_mode_transform(state, &t)?));
    }
    Ok(TwoPhotonMixture(out))
}

/// Half-wave plate followed by a polarizing beam splitter on one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Analyzer {
    pub path: Port,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FringeScan {
    /// (HWP angle in rad, coincidence probability)
    pub points: Vec<(f64, f64)>,
}

impl FringeScan {
    /// CSV with rates scaled to `peak_rate` counts/s and √N errors over `duration` s.
    pub fn to_csv(&self, peak_rate: f64, duration: f64) -> String {
        let max = self.points.iter().map(|p| p.1).fold(0.0, f64::max);
        let scale = if max > 0.0 { peak_rate / max } else { 0.0 };
        let mut out = String::from("hwp_deg,coincidence_rate,poisson_err\n");
        for &(theta, p) in &self.points {
            let rate = p * scale;
            let err = (rate * duration).sqrt() / duration;
            writeln!(out, "{:.4},{:.9e},{:.9e}", theta.to_degrees(), rate, err).unwrap();
        }
        out
    }
}

fn coincidence(state: &TwoPhotonState, hwp: &Mat2, path: Port) -> f64 {
    let mut t = Mat4::identity();
    let o = 2 * path.index();
    for i in 0..2 {
        for j in 0..2 {
            t[(o + i, o + j)] = hwp[(i, j)];
        }
    }
    let (h, v) = (mode_index(path, false), mode_index(path, true));
    let coh = evolve_amplitudes(&state.amplitudes, &t)[basis_index(h, v)].norm_sqr();
    let dist: f64 = state
        .distinguishable
        .iter()
        .map(|p| {
            let a = apply_vec(&t, &p.first);
            let b = apply_vec(&t, &p.second);
            p.weight * (a[h].norm_sqr() * b[v].norm_sqr() + a[v].norm_sqr() * b[h].norm_sqr())
        })
        .sum();
    coh + dist
}

/// Coincidence probability between the two PBS outputs versus HWP angle.
pub fn coincidence_fringe(
    state: &TwoPhotonMixture,
    angles: &[f64],
    analyzer: Analyzer,
) -> Result<FringeScan> {
    let plates = angles
        .iter()
        .map(|&a| waveplate_jones(&WaveplateConfig::half_wave(a)))
        .collect::<Result<Vec<_>>>()?;
    let points = angles
        .par_iter()
        .zip(plates.par_iter())
        .map(|(&a, hwp)| {
            let p: f64 = state.0.iter().map(|(w, s)| w * coincidence(s, hwp, analyzer.path)).sum();
            (a, p.max(0.0))
        })
        .collect();
    Ok(FringeScan { points })
}

/// Fringe frequency (rad⁻¹ of HWP angle) of the ideal pair at the analyzer,
/// found from a fine scan of brute-force permanent amplitudes and a DFT peak.
pub fn oracle_fringe_frequency() -> f64 {
    let n = 720;
    let span = PI;
    let samples: Vec<f64> = (0..n)
        .map(|k| {
            let theta = span * k as f64 / n as f64;
            let hwp = waveplate_jones(&WaveplateConfig::half_wave(theta)).expect("half-wave plate");
            let sub = [[hwp[(0, 0)], hwp[(0, 1)]], [hwp[(1, 0)], hwp[(1, 1)]]];
            // |1_H 1_V⟩ → |1_H 1_V⟩ amplitude is the permanent of the full 2×2 block.
            (sub[0][0] * sub[1][1] + sub[0][1] * sub[1][0]).norm_sqr()
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let power = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, s) in samples.iter().enumerate() {
            let ph = -2.0 * PI * (k * j) as f64 / n as f64;
            re += (s - mean) * ph.cos();
            im += (s - mean) * ph.sin();
        }
        re * re + im * im
    };
    let peak = (1..n / 2).max_by(|&a, &b| power(a).total_cmp(&power(b))).expect("n ≥ 4");
    2.0 * PI * peak as f64 / span
}

/// Visibility from a fit of A·(1 − V·cos(ωθ + φ0)), seeded at the oracle frequency.
pub fn fringe_visibility(scan: &FringeScan, sigmas: Option<&[f64]>) -> Result<SinusoidFit> {
    let omega = oracle_fringe_frequency();
    let (lo, hi) = scan
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    if scan.points.len() < 4 || hi - lo < 2.0 * PI / omega * (1.0 - 1e-9) {
        return Err(Error::Analysis(format!(
            "scan must cover a full fringe period ({:.4} rad), covers {:.4} rad with {} points",
            2.0 * PI / omega,
            hi - lo,
            scan.points.len()
        )));
    }
    let points: Vec<FitPoint> = scan
        .points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| FitPoint { x, y, sigma: sigmas.map_or(1.0, |s| s[i]) })
        .collect();
    sinusoid_fit(&points, SinusoidModel::Cosine, Some(omega))
}

/// Default analyzer angle grid: 5° steps over one fringe period.
pub fn default_angles() -> Vec<f64> {
    let period = 2.0 * PI / oracle_fringe_frequency();
    let step = 5f64.to_radians();
    let n = (period / step).round() as usize;
    (0..=n).map(|k| k as f64 * step).collect()
}
