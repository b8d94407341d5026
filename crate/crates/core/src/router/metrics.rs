//! Switching curves, extinction ratio / visibility and the loss budget.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::{route_single_photon, Port, RouterConfig};
use crate::elements::loss_to_db;
use crate::error::{Error, Result};
use crate::polmath::PolLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchingPoint {
    pub voltage: f64,
    pub p1: f64,
    pub p2: f64,
}

/// Relative detection probabilities P_i = p_i/(p_1+p_2) over a voltage grid.
pub fn switching_curve(
    cfg: &RouterConfig,
    label: PolLabel,
    in_port: Port,
    voltages: &[f64],
) -> Vec<SwitchingPoint> {
    let rho = label.jones().density();
    voltages
        .par_iter()
        .map(|&u| {
            let r = route_single_photon(cfg, &rho, in_port, u);
            SwitchingPoint { voltage: u, p1: r.relative(Port::One), p2: r.relative(Port::Two) }
        })
        .collect()
}

pub fn switching_csv(points: &[SwitchingPoint]) -> String {
    let mut out = String::from("U_volts,P1,P2\n");
    for p in points {
        writeln!(out, "{},{:.15e},{:.15e}", p.voltage, p.p1, p.p2).unwrap();
    }
    out
}

/// Extinction ratio in dB and single-photon visibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SerVisibility {
    /// `f64::INFINITY` when the weaker port saw nothing.
    pub e_db: f64,
    pub v1: f64,
}

impl SerVisibility {
    /// Extinction ratio implied by a visibility.
    pub fn from_visibility(v1: f64) -> Self {
        let e_db = if v1 >= 1.0 {
            f64::INFINITY
        } else {
            10.0 * ((1.0 + v1) / (1.0 - v1)).log10()
        };
        SerVisibility { e_db, v1 }
    }
}

pub fn ser_and_visibility(s1: f64, s2: f64) -> Result<SerVisibility> {
    if !(s1 >= 0.0 && s2 >= 0.0) || !s1.is_finite() || !s2.is_finite() {
        return Err(Error::Usage(format!("counts must be finite and non-negative, got ({s1}, {s2})")));
    }
    if s1 == 0.0 && s2 == 0.0 {
        return Err(Error::Usage("both count rates are zero".into()));
    }
    let (hi, lo) = if s1 >= s2 { (s1, s2) } else { (s2, s1) };
    let e_db = if lo == 0.0 { f64::INFINITY } else { 10.0 * (hi / lo).log10() };
    Ok(SerVisibility { e_db, v1: (hi - lo) / (hi + lo) })
}

/// One row of the per-port extinction table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PortMetrics {
    pub label: PolLabel,
    pub port: Port,
    pub voltage: f64,
    pub s1: f64,
    pub s2: f64,
    pub metrics: SerVisibility,
}

/// Extinction and visibility for H, D, R into port 1, routed to port 1 at
/// U_π and to port 2 at U = 0, from exact detection probabilities.
pub fn table_metrics(cfg: &RouterConfig, u_pi: f64) -> Result<Vec<PortMetrics>> {
    let mut rows = Vec::new();
    for port in Port::BOTH {
        let voltage = match port {
            Port::One => u_pi,
            Port::Two => 0.0,
        };
        for label in [PolLabel::H, PolLabel::D, PolLabel::R] {
            let r = route_single_photon(cfg, &label.jones().density(), Port::One, voltage);
            let metrics = ser_and_visibility(r.p_out1, r.p_out2)?;
            rows.push(PortMetrics { label, port, voltage, s1: r.p_out1, s2: r.p_out2, metrics });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBudget {
    /// (element, dB) for every element of the router.
    pub elements: Vec<(String, f64)>,
    pub eom_average_db: f64,
    /// Splitters and mirror along one path.
    pub passive_path_db: f64,
    /// Loss seen by a photon: one path of passive optics plus the mean modulator.
    pub total_db: f64,
}

impl LossBudget {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("element,loss_db\n");
        for (name, db) in &self.elements {
            writeln!(out, "{name},{db:.6}").unwrap();
        }
        writeln!(out, "eom_average,{:.6}", self.eom_average_db).unwrap();
        writeln!(out, "passive_path,{:.6}", self.passive_path_db).unwrap();
        writeln!(out, "total,{:.6}", self.total_db).unwrap();
        out
    }
}

/// A photon crosses both splitters, one mirror and one of the two modulators,
/// so the router's loss is the passive path plus the average modulator loss.
pub fn insertion_loss_budget(cfg: &RouterConfig) -> LossBudget {
    let bs_in = loss_to_db(cfg.bs_in.loss);
    let bs_out = loss_to_db(cfg.bs_out.loss);
    let mirror = loss_to_db(cfg.mirror_loss);
    let eom1 = loss_to_db(cfg.eom1.loss);
    let eom2 = loss_to_db(cfg.eom2.loss);
    let eom_average_db = 0.5 * (eom1 + eom2);
    let passive_path_db = bs_in + mirror + bs_out;
    LossBudget {
        elements: vec![
            ("bs_in".into(), bs_in),
            ("mirror".into(), mirror),
            ("bs_out".into(), bs_out),
            ("eom1".into(), eom1),
            ("eom2".into(), eom2),
        ],
        eom_average_db,
        passive_path_db,
        total_db: passive_path_db + eom_average_db,
    }
}
