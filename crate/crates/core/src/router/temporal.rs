//! Time response of the router to a gated drive pulse.
//!
//! Each modulator sees a pulse with Gaussian-CDF edges; the second one is
//! triggered `delay_mismatch` later. The routed fraction at a given delay is
//! the port-1 probability for an H photon at the instantaneous voltages.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{half_wave_voltage, route_split, Port, RouterConfig};
use crate::error::{Error, Result};
use crate::polmath::PolLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalEdgeConfig {
    /// Target 10–90 rise of the routed rate, s.
    pub rise_10_90: f64,
    /// Target 90–10 fall of the routed rate, s.
    pub fall_10_90: f64,
    /// Trigger delay of EOM2 relative to EOM1, s.
    pub delay_mismatch: f64,
    pub gate_width: f64,
}

impl TemporalEdgeConfig {
    /// Measured 3.3 ns rise and 3.1 ns fall over a 10 ns gate.
    ///
    /// The trigger mismatch is not reported; 3 ns is the smallest round
    /// value that leaves a resolvable mid-edge plateau on both edges.
    pub fn calibrated() -> Self {
        TemporalEdgeConfig {
            rise_10_90: 3.3e-9,
            fall_10_90: 3.1e-9,
            delay_mismatch: 3.0e-9,
            gate_width: 10e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rise_10_90, self.fall_10_90, self.delay_mismatch, self.gate_width];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("edge parameters must be finite and non-negative".into()));
        }
        if self.gate_width <= 0.0 {
            return Err(Error::Config("gate width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemporalPoint {
    pub delay: f64,
    pub rate: f64,
}

pub fn temporal_csv(points: &[TemporalPoint]) -> String {
    let mut out = String::from("delay_ns,rate_norm\n");
    for p in points {
        writeln!(out, "{:.4},{:.12e}", p.delay * 1e9, p.rate).unwrap();
    }
    out
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn edge(t: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        if t >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        gauss_cdf(t / sigma)
    }
}

fn envelope(t: f64, start: f64, stop: f64, sr: f64, sf: f64) -> f64 {
    (edge(t - start, sr) - edge(t - stop, sf)).max(0.0)
}

struct Drive<'a> {
    cfg: &'a RouterConfig,
    u_pi: f64,
    edges: &'a TemporalEdgeConfig,
    sigma_rise: f64,
    sigma_fall: f64,
}

impl Drive<'_> {
    fn rate(&self, t: f64) -> f64 {
        let e = self.edges;
        let e1 = envelope(t, 0.0, e.gate_width, self.sigma_rise, self.sigma_fall);
        let e2 = envelope(
            t,
            e.delay_mismatch,
            e.gate_width + e.delay_mismatch,
            self.sigma_rise,
            self.sigma_fall,
        );
        let (u1, u2) = if self.cfg.push_pull {
            (0.5 * self.u_pi * e1, -0.5 * self.u_pi * e2)
        } else {
            (self.u_pi * e1, 0.0)
        };
        let rho = PolLabel::H.jones().density();
        route_split(self.cfg, &rho, Port::One, u1, u2).relative(Port::One)
    }

    fn curve(&self, delays: &[f64]) -> Vec<TemporalPoint> {
        delays.par_iter().map(|&t| TemporalPoint { delay: t, rate: self.rate(t) }).collect()
    }

    /// Dense curve around the pulse, for measuring its edges.
    fn probe(&self) -> Vec<TemporalPoint> {
        let e = self.edges;
        let margin = 2.0 * e.rise_10_90.max(e.fall_10_90) + 4.0 * self.sigma_rise.max(self.sigma_fall);
        let (t0, t1) = (-margin, e.gate_width + e.delay_mismatch + margin);
        let n = 4000;
        let grid: Vec<f64> = (0..=n).map(|k| t0 + (t1 - t0) * k as f64 / n as f64).collect();
        self.curve(&grid)
    }
}

/// Edge widths σ (rise, fall) of the drive that reproduce the configured
/// 10–90 times of the routed rate.
pub fn edge_widths(cfg: &RouterConfig, edges: &TemporalEdgeConfig) -> Result<(f64, f64)> {
    edges.validate()?;
    let u_pi = half_wave_voltage(cfg)?;
    let mut drive = Drive { cfg, u_pi, edges, sigma_rise: 0.0, sigma_fall: 0.0 };
    // A Gaussian-CDF edge alone spans 2.563σ between 10 % and 90 %.
    drive.sigma_rise = edges.rise_10_90 / 2.563;
    drive.sigma_fall = edges.fall_10_90 / 2.563;
    for _ in 0..3 {
        drive.sigma_rise = solve_width(&mut drive, true)?;
        drive.sigma_fall = solve_width(&mut drive, false)?;
    }
    Ok((drive.sigma_rise, drive.sigma_fall))
}

fn solve_width(drive: &mut Drive<'_>, rising: bool) -> Result<f64> {
    let target = if rising { drive.edges.rise_10_90 } else { drive.edges.fall_10_90 };
    if target == 0.0 {
        return Ok(0.0);
    }
    let mut measure = |sigma: f64| -> Result<f64> {
        if rising {
            drive.sigma_rise = sigma;
        } else {
            drive.sigma_fall = sigma;
        }
        let (r, f) = extract_10_90(&drive.probe())?;
        Ok(if rising { r } else { f })
    };
    let (mut lo, mut hi) = (0.0, target);
    if measure(lo)? > target {
        return Err(Error::Analysis(format!(
            "trigger mismatch alone exceeds the {} 10-90 target of {target:e} s",
            if rising { "rise" } else { "fall" }
        )));
    }
    while measure(hi)? < target {
        hi *= 2.0;
        if hi > 1e3 * target {
            return Err(Error::Analysis("edge width search diverged".into()));
        }
    }
    while hi - lo > 1e-6 * target {
        let mid = 0.5 * (lo + hi);
        if measure(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Normalized routed rate versus photon delay relative to the EOM1 trigger.
pub fn temporal_response(
    cfg: &RouterConfig,
    edges: &TemporalEdgeConfig,
    delays: &[f64],
) -> Result<Vec<TemporalPoint>> {
    let (sigma_rise, sigma_fall) = edge_widths(cfg, edges)?;
    let u_pi = half_wave_voltage(cfg)?;
    let drive = Drive { cfg, u_pi, edges, sigma_rise, sigma_fall };
    Ok(drive.curve(delays))
}

fn crossing(a: &TemporalPoint, b: &TemporalPoint, level: f64) -> f64 {
    a.delay + (level - a.rate) * (b.delay - a.delay) / (b.rate - a.rate)
}

/// 10–90 rise and 90–10 fall times of a single pulse, by linear
/// interpolation between samples.
pub fn extract_10_90(curve: &[TemporalPoint]) -> Result<(f64, f64)> {
    let (min, max) = curve.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.rate), hi.max(p.rate))
    });
    if curve.len() < 2 || !(max > min) {
        return Err(Error::Analysis("curve has no pulse (max ≤ min)".into()));
    }
    let lo = min + 0.1 * (max - min);
    let hi = min + 0.9 * (max - min);
    let missing = |what: &str| Error::Analysis(format!("{what} threshold not crossed"));
    let up = |level: f64, from: usize| {
        (from..curve.len() - 1)
            .find(|&i| curve[i].rate < level && curve[i + 1].rate >= level)
            .map(|i| (i, crossing(&curve[i], &curve[i + 1], level)))
    };
    let down = |level: f64, from: usize| {
        (from..curve.len() - 1)
            .find(|&i| curve[i].rate >= level && curve[i + 1].rate < level)
            .map(|i| (i, crossing(&curve[i], &curve[i + 1], level)))
    };
    let (i10, t10) = up(lo, 0).ok_or_else(|| missing("rising 10 %"))?;
    let (i90, t90) = up(hi, i10).ok_or_else(|| missing("rising 90 %"))?;
    let (j90, s90) = down(hi, i90).ok_or_else(|| missing("falling 90 %"))?;
    let (_, s10) = down(lo, j90).ok_or_else(|| missing("falling 10 %"))?;
    Ok((t90 - t10, s10 - s90))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlateauReport {
    pub on_rise: bool,
    pub on_fall: bool,
}

impl PlateauReport {
    pub fn any(&self) -> bool {
        self.on_rise || self.on_fall
    }
}

/// A plateau is a stall in the middle of an edge: the slope between the 5 %
/// and 95 % crossings has two peaks separated by a dip below half the
/// smaller one.
pub fn detect_plateaus(curve: &[TemporalPoint]) -> Result<PlateauReport> {
    if curve.len() < 5 {
        return Err(Error::Analysis("curve too short for plateau detection".into()));
    }
    let (min, max) = curve.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.rate), hi.max(p.rate))
    });
    if !(max > min) {
        return Err(Error::Analysis("curve has no pulse (max ≤ min)".into()));
    }
    let lo = min + 0.05 * (max - min);
    let hi = min + 0.95 * (max - min);
    let slope: Vec<f64> = curve
        .windows(2)
        .map(|w| (w[1].rate - w[0].rate) / (w[1].delay - w[0].delay))
        .collect();
    let start = curve.iter().position(|p| p.rate >= lo).unwrap_or(0);
    let top = (start..curve.len()).find(|&i| curve[i].rate >= hi).unwrap_or(curve.len() - 1);
    let end_top = (top..curve.len()).rev().find(|&i| curve[i].rate >= hi).unwrap_or(top);
    let end = (end_top..curve.len()).find(|&i| curve[i].rate < lo).unwrap_or(curve.len() - 1);
    let rise: Vec<f64> = slope[start.saturating_sub(1)..top.min(slope.len())].to_vec();
    let fall: Vec<f64> =
        slope[end_top.min(slope.len())..end.min(slope.len())].iter().map(|s| -s).collect();
    Ok(PlateauReport { on_rise: has_stall(&rise), on_fall: has_stall(&fall) })
}

fn has_stall(slope: &[f64]) -> bool {
    let peaks: Vec<usize> = (1..slope.len().saturating_sub(1))
        .filter(|&i| slope[i] > slope[i - 1] && slope[i] >= slope[i + 1] && slope[i] > 0.0)
        .collect();
    for (a, &i) in peaks.iter().enumerate() {
        for &j in &peaks[a + 1..] {
            let dip = slope[i..=j].iter().copied().fold(f64::INFINITY, f64::min);
            if dip < 0.5 * slope[i].min(slope[j]) {
                return true;
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::function::erf::erf;

    fn grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|k| t0 + (t1 - t0) * k as f64 / n as f64).collect()
    }

    fn sample(ts: &[f64], f: impl Fn(f64) -> f64) -> Vec<TemporalPoint> {
        ts.iter().map(|&t| TemporalPoint { delay: t, rate: f(t) }).collect()
    }

    #[test]
    fn linear_ramp_rise_is_eight_tenths() {
        let ts = grid(-2.0, 6.0, 8000);
        let curve = sample(&ts, |t| {
            let up = t.clamp(0.0, 1.0);
            let down = (4.0 - t).clamp(0.0, 1.0);
            up.min(down)
        });
        let (r, f) = extract_10_90(&curve).unwrap();
        assert_abs_diff_eq!(r, 0.8, epsilon = 1e-9);
        assert_abs_diff_eq!(f, 0.8, epsilon = 1e-9);
    }

    /// 10–90 width of ½(1+erf(t/(2σ))) found by inverting erf directly.
    fn erf_edge_oracle(sigma: f64) -> f64 {
        let inv = |y: f64| {
            let (mut a, mut b) = (-10.0, 10.0);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if 0.5 * (1.0 + erf(m)) < y {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        2.0 * sigma * (inv(0.9) - inv(0.1))
    }

    #[test]
    fn erf_edge_width() {
        let sigma = 0.7;
        let ts = grid(-10.0, 30.0, 40_000);
        let curve = sample(&ts, |t| {
            0.5 * (1.0 + erf(t / (2.0 * sigma))) - 0.5 * (1.0 + erf((t - 15.0) / (2.0 * sigma)))
        });
        let (r, f) = extract_10_90(&curve).unwrap();
        let want = erf_edge_oracle(sigma);
        assert!((r - want).abs() < 0.01 * want);
        assert!((r - 2.0 * 1.8124 * sigma).abs() < 0.01 * r);
        assert_abs_diff_eq!(r, f, epsilon = 2e-3);
    }

    #[test]
    fn flat_curve_is_rejected() {
        let curve = sample(&grid(0.0, 1.0, 10), |_| 0.3);
        assert!(matches!(extract_10_90(&curve), Err(Error::Analysis(_))));
        let step = sample(&grid(0.0, 1.0, 10), |t| t);
        assert!(extract_10_90(&step).is_err());
    }

    fn ns_grid() -> Vec<f64> {
        grid(-10e-9, 25e-9, 3500)
    }

    #[test]
    fn measured_edges_are_reproduced_with_plateau() {
        let cfg = RouterConfig::ideal();
        let edges = TemporalEdgeConfig::calibrated();
        let curve = temporal_response(&cfg, &edges, &ns_grid()).unwrap();
        let (r, f) = extract_10_90(&curve).unwrap();
        assert_abs_diff_eq!(r, 3.3e-9, epsilon = 0.1e-9);
        assert_abs_diff_eq!(f, 3.1e-9, epsilon = 0.1e-9);
        let p = detect_plateaus(&curve).unwrap();
        assert!(p.on_rise && p.on_fall, "{p:?}");
    }

    #[test]
    fn matched_triggers_give_single_edges() {
        let cfg = RouterConfig::ideal();
        let edges = TemporalEdgeConfig { delay_mismatch: 0.0, ..TemporalEdgeConfig::calibrated() };
        let curve = temporal_response(&cfg, &edges, &ns_grid()).unwrap();
        assert!(!detect_plateaus(&curve).unwrap().any());
        let (r, f) = extract_10_90(&curve).unwrap();
        assert_abs_diff_eq!(r, 3.3e-9, epsilon = 0.1e-9);
        assert_abs_diff_eq!(f, 3.1e-9, epsilon = 0.1e-9);
        let peak = curve.iter().position(|p| p.rate > 0.999).unwrap();
        assert!(curve[..peak].windows(2).all(|w| w[1].rate >= w[0].rate - 1e-15));
    }

    #[test]
    fn far_delays_sit_at_baseline() {
        let cfg = RouterConfig::calibrated();
        let edges = TemporalEdgeConfig::calibrated();
        let pts = temporal_response(&cfg, &edges, &[-1e-6, 1e-6]).unwrap();
        let rho = PolLabel::H.jones().density();
        let base = super::super::route_single_photon(&cfg, &rho, Port::One, 0.0).relative(Port::One);
        for p in pts {
            assert_abs_diff_eq!(p.rate, base, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_edges_are_rejected() {
        let bad = TemporalEdgeConfig { gate_width: 0.0, ..TemporalEdgeConfig::calibrated() };
        assert!(bad.validate().is_err());
        let bad = TemporalEdgeConfig { rise_10_90: -1.0, ..TemporalEdgeConfig::calibrated() };
        assert!(bad.validate().is_err());
    }
}
