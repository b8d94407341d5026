//! The semi-common-path Mach-Zehnder router.
//!
//! Modes are ordered (path1⊗H, path1⊗V, path2⊗H, path2⊗V). Each arm holds
//! one mirror and one modulator. Output port 1 leaves through an extra
//! lossless fold reflection, so its net number of reflections is even and
//! only port 2 carries the horizontal-phase flip.

mod metrics;
mod temporal;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{
    insertion_loss_budget, ser_and_visibility, switching_csv, switching_curve, table_metrics,
    LossBudget, PortMetrics, SerVisibility, SwitchingPoint,
};
pub use temporal::{
    detect_plateaus, edge_widths, extract_10_90, temporal_csv, temporal_response, PlateauReport,
    TemporalEdgeConfig, TemporalPoint,
};

use crate::elements::{
    bs_operator, calibrate_eo_scale, db_to_loss, eom_jones, mirror_operator, BsConfig, EomConfig,
    MaterialTable, Polarization,
};
use crate::error::{Error, Result};
use crate::polmath::{cr, ComplexMatrix, DensityMatrix2, Mat2, Mat4, ProcessMatrix, C64};

/// Measured half-wave voltage of the push-pull pair, V.
pub const MEASURED_U_PI: f64 = 960.0;

/// Per-element insertion losses of the built router, dB.
pub mod element_losses {
    pub const EOM1_DB: f64 = 0.017;
    pub const EOM2_DB: f64 = 0.035;
    /// Passive optics along one path (input splitter, mirror, output
    /// splitter) total 0.031 dB.
    pub const BS_DB: f64 = 0.010;
    pub const MIRROR_DB: f64 = 0.011;
}

/// Misalignment and mode overlap, which differ between driven and idle modulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Imperfections {
    pub misalignment_eps: f64,
    pub mode_overlap: f64,
    #[serde(default)]
    pub drive_distortion: f64,
}

/// Interferometer input/output port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Port {
    One,
    Two,
}

impl Port {
    pub const BOTH: [Port; 2] = [Port::One, Port::Two];

    pub fn index(self) -> usize {
        match self {
            Port::One => 0,
            Port::Two => 1,
        }
    }

    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Port::One),
            2 => Ok(Port::Two),
            _ => Err(Error::Usage(format!("port must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        self.index() as u32 + 1
    }
}

impl FromStr for Port {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("port must be 1 or 2, got {s:?}")))?;
        Self::from_number(n)
    }
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub bs_in: BsConfig,
    pub bs_out: BsConfig,
    pub eom1: EomConfig,
    pub eom2: EomConfig,
    pub mirror_loss: f64,
    /// EOM1 at +U/2 and EOM2 at −U/2; otherwise EOM1 alone at U.
    pub push_pull: bool,
    /// Inter-arm coherence factor μ_m in [0,1].
    pub mode_overlap: f64,
    /// Static arm imbalance, rad.
    pub phase_offset: f64,
    /// Loss of mode overlap per kV² of total drive, from beam distortion in
    /// the driven crystals.
    #[serde(default)]
    pub drive_distortion: f64,
    /// Slow linear drift of the arm imbalance, rad/hour.
    #[serde(default)]
    pub drift_rate: f64,
    /// Values that replace misalignment and mode overlap when the modulators are idle.
    #[serde(default)]
    pub idle: Option<Imperfections>,
}

impl RouterConfig {
    /// Lossless, perfectly aligned router calibrated to `MEASURED_U_PI`.
    pub fn ideal() -> Self {
        let mut eom = EomConfig::from_material(&MaterialTable::builtin());
        eom.eo_scale = calibrate_eo_scale(&eom, MEASURED_U_PI).expect("material table is valid");
        RouterConfig {
            bs_in: BsConfig::balanced(),
            bs_out: BsConfig::balanced(),
            eom1: eom,
            eom2: eom,
            mirror_loss: 0.0,
            push_pull: true,
            mode_overlap: 1.0,
            drive_distortion: 0.0,
            phase_offset: 0.0,
            drift_rate: 0.0,
            idle: None,
        }
    }

    /// The built router: measured element losses and the calibrated
    /// imperfection sets (see [`calibrate_imperfections`]).
    pub fn calibrated() -> Self {
        let mut cfg = Self::ideal();
        cfg.bs_in.loss = db_to_loss(element_losses::BS_DB);
        cfg.bs_out.loss = db_to_loss(element_losses::BS_DB);
        cfg.mirror_loss = db_to_loss(element_losses::MIRROR_DB);
        cfg.eom1.loss = db_to_loss(element_losses::EOM1_DB);
        cfg.eom2.loss = db_to_loss(element_losses::EOM2_DB);
        cfg.set_imperfections(CALIBRATED_ACTIVE);
        cfg.idle = Some(CALIBRATED_IDLE);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.bs_in.validate()?;
        self.bs_out.validate()?;
        self.eom1.validate()?;
        self.eom2.validate()?;
        if !(0.0..1.0).contains(&self.mirror_loss) {
            return Err(Error::Config(format!("mirror loss {} outside [0,1)", self.mirror_loss)));
        }
        if !(0.0..=1.0).contains(&self.mode_overlap) {
            return Err(Error::Config(format!(
                "mode overlap {} outside [0,1]",
                self.mode_overlap
            )));
        }
        if !(self.drive_distortion >= 0.0) {
            return Err(Error::Config("drive distortion must be non-negative".into()));
        }
        if let Some(idle) = self.idle {
            if !(0.0..=1.0).contains(&idle.mode_overlap)
                || !(idle.misalignment_eps.abs() < 0.1)
                || !(idle.drive_distortion >= 0.0)
            {
                return Err(Error::Config("idle imperfection set out of range".into()));
            }
        }
        if !self.phase_offset.is_finite() || !self.drift_rate.is_finite() {
            return Err(Error::Config("phase offset and drift must be finite".into()));
        }
        Ok(())
    }

    pub fn set_imperfections(&mut self, imp: Imperfections) {
        self.eom1.misalignment_eps = imp.misalignment_eps;
        self.eom2.misalignment_eps = imp.misalignment_eps;
        self.mode_overlap = imp.mode_overlap;
        self.drive_distortion = imp.drive_distortion;
    }

    pub fn imperfections(&self) -> Imperfections {
        Imperfections {
            misalignment_eps: self.eom1.misalignment_eps,
            mode_overlap: self.mode_overlap,
            drive_distortion: self.drive_distortion,
        }
    }

    /// Inter-arm coherence with the given voltages on the two modulators.
    pub fn overlap_at(&self, u1: f64, u2: f64) -> f64 {
        let kv = (u1.abs() + u2.abs()) * 1e-3;
        (self.mode_overlap - self.drive_distortion * kv * kv).clamp(0.0, 1.0)
    }

    /// The configuration with the modulators switched off (idle set applied).
    pub fn with_eoms_idle(&self) -> Self {
        let mut cfg = *self;
        if let Some(idle) = self.idle {
            cfg.set_imperfections(idle);
        }
        cfg
    }

    /// Configuration after `hours` of linear phase drift.
    pub fn at_time(&self, hours: f64) -> Self {
        RouterConfig { phase_offset: self.phase_offset + self.drift_rate * hours, ..*self }
    }

    /// Voltages on (EOM1, EOM2) for a drive voltage `u`.
    pub fn eom_voltages(&self, u: f64) -> (f64, f64) {
        if self.push_pull {
            (0.5 * u, -0.5 * u)
        } else {
            (u, 0.0)
        }
    }
}

/// Drive voltage giving a π phase difference between the arms.
pub fn half_wave_voltage(cfg: &RouterConfig) -> Result<f64> {
    let diff = |u: f64| {
        let (u1, u2) = cfg.eom_voltages(u);
        cfg.eom1.eo_phase(Polarization::H, u1) - cfg.eom2.eo_phase(Polarization::H, u2)
    };
    let slope = diff(1.0) - diff(0.0);
    if slope == 0.0 || !slope.is_finite() {
        return Err(Error::Config("modulators have no electro-optic response".into()));
    }
    Ok(std::f64::consts::PI / slope.abs())
}

/// Calibrated imperfections while the modulators are driven.
///
/// Output of [`calibrate_imperfections`] for [`CalibrationTargets::calibrated`],
/// frozen here; a unit test re-derives them.
pub const CALIBRATED_ACTIVE: Imperfections = Imperfections {
    misalignment_eps: 0.036_721_548_675_137_6,
    mode_overlap: 0.995_235_470_367_519,
    drive_distortion: 0.005_156_150_951_093_3,
};

/// Modulators idle: visibility above 99.8 % and extinction above 30 dB.
pub const CALIBRATED_IDLE: Imperfections =
    Imperfections { misalignment_eps: 0.0, mode_overlap: 0.999, drive_distortion: 0.0 };

/// 4×4 transfer matrix on (path ⊗ polarization) modes. No gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeTransfer(Mat4);

impl ModeTransfer {
    pub fn new(m: Mat4) -> Result<Self> {
        let dm = ComplexMatrix::from_fn(4, 4, |i, j| m[(i, j)]);
        let top = crate::polmath::spectral_norm(&dm);
        if top > 1.0 + 1e-12 {
            return Err(Error::Domain(format!(
                "transfer matrix has gain (largest singular value {top})"
            )));
        }
        Ok(ModeTransfer(m))
    }

    /// Skips the gain check, for matrices built from passive elements.
    pub(crate) fn unchecked(m: Mat4) -> Self {
        ModeTransfer(m)
    }

    pub fn identity() -> Self {
        ModeTransfer(Mat4::identity())
    }

    /// Lifts a path operator P and a polarization operator J to P ⊗ J.
    pub fn from_parts(path: &Mat2, pol: &Mat2) -> Result<Self> {
        Self::new(kron(path, pol))
    }

    /// Polarization operator on one path, identity on the other.
    pub fn on_path(port: Port, pol: &Mat2) -> Result<Self> {
        let mut m = Mat4::identity();
        let o = 2 * port.index();
        for i in 0..2 {
            for j in 0..2 {
                m[(o + i, o + j)] = pol[(i, j)];
            }
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    /// Polarization block from `input` path to `output` path.
    pub fn block(&self, output: Port, input: Port) -> Mat2 {
        let (o, i) = (2 * output.index(), 2 * input.index());
        Mat2::new(self.0[(o, i)], self.0[(o, i + 1)], self.0[(o + 1, i)], self.0[(o + 1, i + 1)])
    }

    pub fn then(&self, next: &ModeTransfer) -> ModeTransfer {
        ModeTransfer(next.0 * self.0)
    }
}

pub fn kron(a: &Mat2, b: &Mat2) -> Mat4 {
    Mat4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

/// Polarization operators of the two arm paths from `input` to `output`:
/// exit · BS_out[o,a] · arm_a · BS_in[a,i].
pub(crate) fn arm_paths(cfg: &RouterConfig, u1: f64, u2: f64, input: Port, output: Port) -> [Mat2; 2] {
    let b_in = bs_operator(&cfg.bs_in).expect("validated beam splitter");
    let b_out = bs_operator(&cfg.bs_out).expect("validated beam splitter");
    let mirror = mirror_operator(cfg.mirror_loss).expect("validated mirror");
    let exit = match output {
        Port::One => mirror_operator(0.0).expect("lossless fold"),
        Port::Two => Mat2::identity(),
    };
    let arm1 = eom_jones(&cfg.eom1, u1)
        * mirror
        * cr((1.0 - cfg.eom1.loss).sqrt())
        * C64::from_polar(1.0, cfg.phase_offset);
    let arm2 = eom_jones(&cfg.eom2, u2) * mirror * cr((1.0 - cfg.eom2.loss).sqrt());
    let (i, o) = (input.index(), output.index());
    [
        exit * arm1 * (b_out[(o, 0)] * b_in[(0, i)]),
        exit * arm2 * (b_out[(o, 1)] * b_in[(1, i)]),
    ]
}

/// Full 4×4 transfer with explicit voltages; `arm1_sign` = −1 adds a π
/// phase to arm 1.
pub fn arm_paths_full(cfg: &RouterConfig, u1: f64, u2: f64, arm1_sign: f64) -> Mat4 {
    let mut m = Mat4::zeros();
    for input in Port::BOTH {
        for output in Port::BOTH {
            let [a, b] = arm_paths(cfg, u1, u2, input, output);
            let blk = a * cr(arm1_sign) + b;
            let (o, i) = (2 * output.index(), 2 * input.index());
            for r in 0..2 {
                for c in 0..2 {
                    m[(o + r, i + c)] = blk[(r, c)];
                }
            }
        }
    }
    m
}

/// Transfer matrix with explicit voltages on each modulator.
pub fn router_transfer_split(cfg: &RouterConfig, u1: f64, u2: f64) -> ModeTransfer {
    ModeTransfer::unchecked(arm_paths_full(cfg, u1, u2, 1.0))
}

/// Coherent transfer matrix of the whole interferometer at drive voltage `u`.
pub fn router_transfer(cfg: &RouterConfig, voltage: f64) -> ModeTransfer {
    let (u1, u2) = cfg.eom_voltages(voltage);
    router_transfer_split(cfg, u1, u2)
}

/// Outcome of sending one photon through the router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingResult {
    pub p_out1: f64,
    pub p_out2: f64,
    pub loss_prob: f64,
    /// Conditional output polarization; `None` when the port is never reached.
    pub rho_out1: Option<DensityMatrix2>,
    pub rho_out2: Option<DensityMatrix2>,
}

impl RoutingResult {
    pub fn probability(&self, port: Port) -> f64 {
        match port {
            Port::One => self.p_out1,
            Port::Two => self.p_out2,
        }
    }

    /// P_i = p_i / (p_1 + p_2).
    pub fn relative(&self, port: Port) -> f64 {
        self.probability(port) / (self.p_out1 + self.p_out2)
    }
}

/// Unnormalized output operator at `output` for input state `rho`.
///
/// The mode-overlap factor scales only the cross terms between the arms.
pub(crate) fn output_operator(
    cfg: &RouterConfig,
    u1: f64,
    u2: f64,
    rho: &Mat2,
    input: Port,
    output: Port,
) -> Mat2 {
    let [a, b] = arm_paths(cfg, u1, u2, input, output);
    let direct = a * rho * a.adjoint() + b * rho * b.adjoint();
    let cross = a * rho * b.adjoint() + b * rho * a.adjoint();
    direct + cross * cr(cfg.overlap_at(u1, u2))
}

pub(crate) fn route_split(
    cfg: &RouterConfig,
    rho: &DensityMatrix2,
    input: Port,
    u1: f64,
    u2: f64,
) -> RoutingResult {
    let out1 = output_operator(cfg, u1, u2, rho.matrix(), input, Port::One);
    let out2 = output_operator(cfg, u1, u2, rho.matrix(), input, Port::Two);
    let p1 = out1.trace().re.max(0.0);
    let p2 = out2.trace().re.max(0.0);
    let cond = |m: &Mat2, p: f64| {
        if p > 1e-300 {
            DensityMatrix2::from_unnormalized(&hermitize(m)).ok()
        } else {
            None
        }
    };
    RoutingResult {
        p_out1: p1,
        p_out2: p2,
        loss_prob: 1.0 - p1 - p2,
        rho_out1: cond(&out1, p1),
        rho_out2: cond(&out2, p2),
    }
}

fn hermitize(m: &Mat2) -> Mat2 {
    (m + m.adjoint()) * cr(0.5)
}

pub fn route_single_photon(
    cfg: &RouterConfig,
    rho_in: &DensityMatrix2,
    in_port: Port,
    voltage: f64,
) -> RoutingResult {
    let (u1, u2) = cfg.eom_voltages(voltage);
    route_split(cfg, rho_in, in_port, u1, u2)
}

/// Kraus operators of the (unnormalized) map from `input` to `output`.
pub fn conditional_kraus(cfg: &RouterConfig, input: Port, output: Port, voltage: f64) -> Vec<Mat2> {
    let (u1, u2) = cfg.eom_voltages(voltage);
    let [a, b] = arm_paths(cfg, u1, u2, input, output);
    let mu = cfg.overlap_at(u1, u2);
    let mut kraus = vec![(a + b) * cr(mu.sqrt())];
    if mu < 1.0 {
        let w = cr((1.0 - mu).sqrt());
        kraus.push(a * w);
        kraus.push(b * w);
    }
    kraus
}

/// Polarization process from `input` to `output`, normalized to unit trace
/// (postselected on the photon leaving through `output`).
pub fn router_channel(cfg: &RouterConfig, input: Port, output: Port, voltage: f64) -> Result<ProcessMatrix> {
    ProcessMatrix::from_kraus(&conditional_kraus(cfg, input, output, voltage))
}

/// Drive voltage that routes `input` to `output`: 0 for crossing to the other
/// index, U_π for staying on the same index.
pub fn routing_voltage(input: Port, output: Port, u_pi: f64) -> f64 {
    if input == output {
        u_pi
    } else {
        0.0
    }
}

/// Single-photon visibilities (mean over H, D, R inputs from port 1) at
/// port 1 (U = U_π) and port 2 (U = 0).
pub fn mean_port_visibilities(cfg: &RouterConfig, u_pi: f64) -> (f64, f64) {
    let labels = [crate::polmath::PolLabel::H, crate::polmath::PolLabel::D, crate::polmath::PolLabel::R];
    let mut v1 = 0.0;
    let mut v2 = 0.0;
    for l in labels {
        let rho = l.jones().density();
        let r = route_single_photon(cfg, &rho, Port::One, u_pi);
        v1 += (r.p_out1 - r.p_out2) / (r.p_out1 + r.p_out2);
        let r = route_single_photon(cfg, &rho, Port::One, 0.0);
        v2 += (r.p_out2 - r.p_out1) / (r.p_out1 + r.p_out2);
    }
    (v1 / 3.0, v2 / 3.0)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return Err(Error::Analysis(format!(
            "calibration target not bracketed on [{lo}, {hi}] (f = {flo:e}, {fhi:e})"
        )));
    }
    let rising = fhi > flo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sign flip of the H amplitude that undoes the single net reflection on
/// port 2, so both ports are described in the same coordinates.
pub fn h_inversion(output: Port) -> Mat2 {
    match output {
        Port::One => Mat2::identity(),
        Port::Two => crate::polmath::Pauli::Z.matrix(),
    }
}

/// Port channel expressed in the common frame (see [`h_inversion`]).
pub fn router_channel_common_frame(
    cfg: &RouterConfig,
    input: Port,
    output: Port,
    voltage: f64,
) -> Result<ProcessMatrix> {
    let flip = h_inversion(output);
    let kraus: Vec<Mat2> =
        conditional_kraus(cfg, input, output, voltage).into_iter().map(|k| flip * k).collect();
    ProcessMatrix::from_kraus(&kraus)
}

/// Process fidelity to identity for every (input, output) pair, each at its
/// routing voltage; indexed `[input][output]`.
pub fn port_fidelities(cfg: &RouterConfig, u_pi: f64) -> Result<[[f64; 2]; 2]> {
    let mut out = [[0.0; 2]; 2];
    let ideal = ProcessMatrix::identity();
    for input in Port::BOTH {
        for output in Port::BOTH {
            let v = routing_voltage(input, output, u_pi);
            let chi = router_channel_common_frame(cfg, input, output, v)?;
            out[input.index()][output.index()] = crate::polmath::process_fidelity(&ideal, &chi)?;
        }
    }
    Ok(out)
}

fn mean_fidelity(cfg: &RouterConfig, u_pi: f64) -> f64 {
    let f = port_fidelities(cfg, u_pi).expect("validated configuration");
    f.iter().flatten().sum::<f64>() / 4.0
}

/// Measured quantities the imperfection model is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    /// Mean single-photon visibility at port 1 (U = U_π).
    pub port1_visibility: f64,
    /// Mean single-photon visibility at port 2 (U = 0).
    pub port2_visibility: f64,
    /// Mean process fidelity to identity over the four port pairs.
    pub mean_fidelity: f64,
}

impl CalibrationTargets {
    /// Means over the H, D, R rows of the visibility table and over the four
    /// reconstructed router processes.
    pub fn calibrated() -> Self {
        CalibrationTargets {
            port1_visibility: (0.9880 + 0.9907 + 0.9890) / 3.0,
            port2_visibility: (0.9944 + 0.9970 + 0.9943) / 3.0,
            mean_fidelity: (0.9956 + 0.9968 + 0.9932 + 0.9961) / 4.0,
        }
    }
}

/// Fits mode overlap, crystal misalignment and drive distortion.
///
/// At U = 0 both arms carry identical modulators, so port 2's visibility
/// depends only on the static overlap. Misalignment sets the polarization
/// error and hence the fidelity. Whatever port 1 lacks after that is
/// attributed to beam distortion under drive.
pub fn calibrate_imperfections(
    base: &RouterConfig,
    u_pi: f64,
    targets: &CalibrationTargets,
) -> Result<Imperfections> {
    let with = |imp: Imperfections| {
        let mut cfg = *base;
        cfg.set_imperfections(imp);
        cfg
    };
    let mut imp = Imperfections { misalignment_eps: 0.0, mode_overlap: 1.0, drive_distortion: 0.0 };
    for _ in 0..4 {
        let cur = imp;
        imp.mode_overlap = bisect(0.9, 1.0, |mu| {
            let cfg = with(Imperfections { mode_overlap: mu, ..cur });
            mean_port_visibilities(&cfg, u_pi).1 - targets.port2_visibility
        })?;
        let cur = imp;
        imp.misalignment_eps = bisect(0.0, 0.0999, |e| {
            let cfg = with(Imperfections { misalignment_eps: e, ..cur });
            mean_fidelity(&cfg, u_pi) - targets.mean_fidelity
        })?;
        let cur = imp;
        imp.drive_distortion = bisect(0.0, 1.0, |k| {
            let cfg = with(Imperfections { drive_distortion: k, ..cur });
            mean_port_visibilities(&cfg, u_pi).0 - targets.port1_visibility
        })?;
    }
    Ok(imp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polmath::{process_fidelity, PolLabel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ideal_router_routes_fully() {
        let cfg = RouterConfig::ideal();
        let t0 = router_transfer(&cfg, 0.0);
        let to2 = t0.block(Port::Two, Port::One);
        assert_abs_diff_eq!((to2.adjoint() * to2).trace().re / 2.0, 1.0, epsilon = 1e-12);
        let tpi = router_transfer(&cfg, MEASURED_U_PI);
        let to1 = tpi.block(Port::One, Port::One);
        assert_abs_diff_eq!((to1.adjoint() * to1).trace().re / 2.0, 1.0, epsilon = 1e-12);
        for u in [0.0, 137.0, 480.0, 960.0, 1200.0] {
            let m = router_transfer(&cfg, u).0;
            assert!((m.adjoint() * m - Mat4::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn balanced_split_at_half_voltage() {
        let cfg = RouterConfig::ideal();
        for l in PolLabel::ALL {
            let r = route_single_photon(&cfg, &l.jones().density(), Port::One, 480.0);
            assert_abs_diff_eq!(r.p_out1, 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(r.p_out2, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn polarization_is_maintained_on_port_one() {
        let cfg = RouterConfig::ideal();
        let d = PolLabel::D.jones().density();
        let r = route_single_photon(&cfg, &d, Port::One, MEASURED_U_PI);
        let out = r.rho_out1.unwrap();
        assert!((out.matrix() - d.matrix()).norm() < 1e-12);
        assert!(r.rho_out2.is_none() || r.p_out2 < 1e-24);
    }

    #[test]
    fn mode_overlap_sets_visibility() {
        let mut cfg = RouterConfig::ideal();
        cfg.mode_overlap = 0.97;
        let h = PolLabel::H.jones().density();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for k in 0..=400 {
            let u = k as f64 * 2400.0 / 400.0;
            let p2 = route_single_photon(&cfg, &h, Port::One, u).p_out2;
            lo = lo.min(p2);
            hi = hi.max(p2);
        }
        assert_abs_diff_eq!((hi - lo) / (hi + lo), 0.97, epsilon = 1e-9);
    }

    #[test]
    fn invalid_port_is_rejected() {
        assert!(matches!(Port::from_number(3), Err(Error::Usage(_))));
        assert!("0".parse::<Port>().is_err());
        assert_eq!("2".parse::<Port>().unwrap(), Port::Two);
    }

    #[test]
    fn gain_is_rejected() {
        assert!(ModeTransfer::new(Mat4::identity() * cr(1.01)).is_err());
    }

    #[test]
    fn port_two_carries_the_reflection_flip() {
        let cfg = RouterConfig::ideal();
        let chi = router_channel(&cfg, Port::One, Port::Two, 0.0).unwrap();
        let z = ProcessMatrix::pauli_channel(crate::polmath::Pauli::Z);
        assert!(process_fidelity(&z, &chi).unwrap() > 1.0 - 1e-12);
        let chi = router_channel(&cfg, Port::Two, Port::One, 0.0).unwrap();
        assert!(process_fidelity(&ProcessMatrix::identity(), &chi).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn frozen_imperfections_match_calibration() {
        let mut base = RouterConfig::calibrated();
        base.idle = None;
        let targets = CalibrationTargets::calibrated();
        let imp = calibrate_imperfections(&base, MEASURED_U_PI, &targets).unwrap();
        assert_abs_diff_eq!(imp.mode_overlap, CALIBRATED_ACTIVE.mode_overlap, epsilon = 1e-9);
        assert_abs_diff_eq!(imp.misalignment_eps, CALIBRATED_ACTIVE.misalignment_eps, epsilon = 1e-9);
        assert_abs_diff_eq!(imp.drive_distortion, CALIBRATED_ACTIVE.drive_distortion, epsilon = 1e-9);
        let (v1, v2) = mean_port_visibilities(&RouterConfig::calibrated(), MEASURED_U_PI);
        assert_abs_diff_eq!(v1, targets.port1_visibility, epsilon = 1e-8);
        assert_abs_diff_eq!(v2, targets.port2_visibility, epsilon = 1e-8);
        let f = port_fidelities(&RouterConfig::calibrated(), MEASURED_U_PI).unwrap();
        assert!(f.iter().flatten().all(|&x| x >= 0.993), "{f:?}");
    }

    #[test]
    fn idle_regime_is_cleaner() {
        let cfg = RouterConfig::calibrated().with_eoms_idle();
        let (_, v2) = mean_port_visibilities(&cfg, MEASURED_U_PI);
        assert!(v2 > 0.998);
    }

    #[test]
    fn drift_moves_phase_offset() {
        let mut cfg = RouterConfig::ideal();
        cfg.drift_rate = 0.1;
        assert_abs_diff_eq!(cfg.at_time(2.0).phase_offset, 0.2);
    }

    fn random_rho(a: f64, b: f64, c: f64, mix: f64) -> DensityMatrix2 {
        let psi = crate::polmath::JonesVector::normalize(
            C64::new(a, 0.0),
            C64::new(b, c),
        )
        .unwrap();
        let m = psi.outer() * cr(1.0 - mix) + Mat2::identity() * cr(0.5 * mix);
        DensityMatrix2::new(m).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn probability_is_conserved(
            a in 0.1..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, mix in 0.0..1.0f64,
            u in -1500.0..1500.0f64, mu in 0.0..=1.0f64, eps in -0.09..0.09f64,
            phase in -3.0..3.0f64, two in any::<bool>()
        ) {
            let mut cfg = RouterConfig::calibrated();
            cfg.mode_overlap = mu;
            cfg.eom1.misalignment_eps = eps;
            cfg.eom2.misalignment_eps = -eps;
            cfg.phase_offset = phase;
            let port = if two { Port::Two } else { Port::One };
            let r = route_single_photon(&cfg, &random_rho(a, b, c, mix), port, u);
            prop_assert!((r.p_out1 + r.p_out2 + r.loss_prob - 1.0).abs() < 1e-10);
            prop_assert!(r.loss_prob > 0.0);
        }

        #[test]
        fn transfer_has_no_gain(u in -1500.0..1500.0f64, eps in -0.09..0.09f64) {
            let mut cfg = RouterConfig::calibrated();
            cfg.eom1.misalignment_eps = eps;
            let t = router_transfer(&cfg, u);
            prop_assert!(ModeTransfer::new(t.0).is_ok());
        }
    }
}
