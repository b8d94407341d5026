//! Jones and path operators for the individual router components.
//!
//! The modulator is a pair of RTP crystals with their Y/Z axes swapped, so
//! that both the static and the electro-optic birefringence of the first
//! crystal are undone by the second. A residual rotation `misalignment_eps`
//! of the second crystal breaks that compensation slightly.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polmath::{c, cr, Mat2, C64};

/// Crystallographic axis lying along horizontal polarization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrystalAxis {
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
}

/// One RTP crystal with a field applied along Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtpCrystal {
    /// Optical path length, m.
    pub length: f64,
    /// Electrode gap, m.
    pub width: f64,
    pub n_y: f64,
    pub n_z: f64,
    /// Electro-optic coefficients, m/V.
    pub r23: f64,
    pub r33: f64,
    pub h_axis: CrystalAxis,
}

#[derive(Debug, Deserialize)]
struct MaterialFile {
    version: u32,
    rtp: MaterialRtp,
    geometry: MaterialGeometry,
    source: MaterialSource,
}

#[derive(Debug, Deserialize)]
struct MaterialRtp {
    n_y: f64,
    n_z: f64,
    r23_pm_per_volt: f64,
    r33_pm_per_volt: f64,
}

#[derive(Debug, Deserialize)]
struct MaterialGeometry {
    length_mm: f64,
    width_mm: f64,
}

#[derive(Debug, Deserialize)]
struct MaterialSource {
    wavelength_nm: f64,
}

const MATERIAL_TABLE: &str = include_str!("../data/rtp_material.toml");

/// Material constants shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialTable {
    pub version: u32,
    pub crystal: RtpCrystal,
    pub wavelength: f64,
}

impl MaterialTable {
    pub fn builtin() -> Self {
        Self::parse(MATERIAL_TABLE).expect("bundled material table is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: MaterialFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("material table: {e}")))?;
        let crystal = RtpCrystal {
            length: f.geometry.length_mm * 1e-3,
            width: f.geometry.width_mm * 1e-3,
            n_y: f.rtp.n_y,
            n_z: f.rtp.n_z,
            r23: f.rtp.r23_pm_per_volt * 1e-12,
            r33: f.rtp.r33_pm_per_volt * 1e-12,
            h_axis: CrystalAxis::Y,
        };
        crystal.validate()?;
        Ok(MaterialTable {
            version: f.version,
            crystal,
            wavelength: f.source.wavelength_nm * 1e-9,
        })
    }
}

impl RtpCrystal {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::Config("crystal length and width must be positive".into()));
        }
        if !(self.n_y >= 1.0 && self.n_z >= 1.0) {
            return Err(Error::Config("refractive indices must be >= 1".into()));
        }
        if !(self.r23 > 0.0 && self.r33 > 0.0) {
            return Err(Error::Config("electro-optic coefficients must be positive".into()));
        }
        Ok(())
    }

    /// The same crystal turned by 90° about the beam.
    pub fn cross_aligned(&self) -> Self {
        let h_axis = match self.h_axis {
            CrystalAxis::Y => CrystalAxis::Z,
            CrystalAxis::Z => CrystalAxis::Y,
        };
        RtpCrystal { h_axis, ..*self }
    }

    /// (n, r) seen by light polarized along `pol`.
    pub fn index_and_coefficient(&self, pol: Polarization) -> (f64, f64) {
        let along_y = matches!(
            (self.h_axis, pol),
            (CrystalAxis::Y, Polarization::H) | (CrystalAxis::Z, Polarization::V)
        );
        if along_y {
            (self.n_y, self.r23)
        } else {
            (self.n_z, self.r33)
        }
    }
}

/// Static and voltage-dependent parts of the phase from one crystal.
///
/// The static part is reduced modulo 2π. It is kept separate from the
/// voltage-dependent part so that differences between arms can be formed
/// without cancelling two numbers of order 10⁴ rad.
pub fn rtp_phase_parts(
    c: &RtpCrystal,
    pol: Polarization,
    voltage: f64,
    wavelength: f64,
    eo_scale: f64,
) -> (f64, f64) {
    let (n, r) = c.index_and_coefficient(pol);
    let k = TAU / wavelength;
    let static_part = (k * c.length * n).rem_euclid(TAU);
    let eo_part = -k * c.length * 0.5 * r * n.powi(3) * eo_scale * voltage / c.width;
    (static_part, eo_part)
}

/// φ = (2π/λ)·l·(n − ½·r·n³·s·U/d) for the selected polarization.
pub fn rtp_phase(
    c: &RtpCrystal,
    pol: Polarization,
    voltage: f64,
    wavelength: f64,
    eo_scale: f64,
) -> f64 {
    let (n, r) = c.index_and_coefficient(pol);
    (TAU / wavelength) * c.length * (n - 0.5 * r * n.powi(3) * eo_scale * voltage / c.width)
}

/// A birefringence-compensated modulator made of two cross-aligned crystals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EomConfig {
    pub crystal1: RtpCrystal,
    pub crystal2: RtpCrystal,
    /// m
    pub wavelength: f64,
    /// Residual rotation of crystal 2 relative to crystal 1, rad.
    pub misalignment_eps: f64,
    /// Multiplies the electro-optic term; fixed by [`calibrate_eo_scale`].
    pub eo_scale: f64,
    /// Insertion loss as a power fraction.
    #[serde(default)]
    pub loss: f64,
}

impl EomConfig {
    /// A matched crystal pair from the bundled material table.
    pub fn from_material(table: &MaterialTable) -> Self {
        let crystal1 = RtpCrystal { h_axis: CrystalAxis::Y, ..table.crystal };
        EomConfig {
            crystal1,
            crystal2: crystal1.cross_aligned(),
            wavelength: table.wavelength,
            misalignment_eps: 0.0,
            eo_scale: 1.0,
            loss: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.crystal1.validate()?;
        self.crystal2.validate()?;
        if !(self.wavelength > 0.0) {
            return Err(Error::Config("wavelength must be positive".into()));
        }
        if !(self.misalignment_eps.abs() < 0.1) {
            return Err(Error::Config(format!(
                "crystal misalignment {} rad is outside |eps| < 0.1",
                self.misalignment_eps
            )));
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(Error::Config(format!("EOM loss {} outside [0,1)", self.loss)));
        }
        Ok(())
    }

    /// Voltage-dependent phase for one polarization summed over both crystals,
    /// for equal voltage on the two crystals.
    pub fn eo_phase(&self, pol: Polarization, voltage: f64) -> f64 {
        let (_, e1) = rtp_phase_parts(&self.crystal1, pol, voltage, self.wavelength, self.eo_scale);
        let (_, e2) = rtp_phase_parts(&self.crystal2, pol, voltage, self.wavelength, self.eo_scale);
        e1 + e2
    }
}

fn rotation(theta: f64) -> Mat2 {
    let (s, co) = theta.sin_cos();
    Mat2::new(cr(co), cr(-s), cr(s), cr(co))
}

fn crystal_jones(cfg: &EomConfig, crystal: &RtpCrystal, voltage: f64) -> Mat2 {
    let phase = |pol| {
        let (s, e) = rtp_phase_parts(crystal, pol, voltage, cfg.wavelength, cfg.eo_scale);
        C64::from_polar(1.0, s) * C64::from_polar(1.0, e)
    };
    Mat2::new(phase(Polarization::H), cr(0.0), cr(0.0), phase(Polarization::V))
}

/// Lossless Jones matrix of the modulator with `voltage` on both crystals.
///
/// For `misalignment_eps == 0` this is a scalar phase times the identity.
pub fn eom_jones(cfg: &EomConfig, voltage: f64) -> Mat2 {
    let j1 = crystal_jones(cfg, &cfg.crystal1, voltage);
    let j2 = crystal_jones(cfg, &cfg.crystal2, voltage);
    if cfg.misalignment_eps == 0.0 {
        return j2 * j1;
    }
    let rot = rotation(cfg.misalignment_eps);
    rot * j2 * rot.transpose() * j1
}

/// Differential arm phase of a push-pull pair: `first` at +U/2, `second` at −U/2,
/// for horizontal polarization.
pub fn push_pull_phase(first: &EomConfig, second: &EomConfig, voltage: f64) -> f64 {
    first.eo_phase(Polarization::H, 0.5 * voltage) - second.eo_phase(Polarization::H, -0.5 * voltage)
}

/// Scale that makes a matched push-pull pair reach a π differential phase
/// at `target_u_pi`.
///
/// The phase is affine in voltage, so this is a closed-form solve. The H and
/// V responses are averaged, which matters only for unmatched crystals.
pub fn calibrate_eo_scale(cfg: &EomConfig, target_u_pi: f64) -> Result<f64> {
    if !(target_u_pi > 0.0) {
        return Err(Error::Config(format!("half-wave voltage {target_u_pi} must be positive")));
    }
    let unit = EomConfig { eo_scale: 1.0, ..*cfg };
    // Push-pull at ±U/2 on identical modulators gives slope equal to one modulator at U.
    let slope = 0.5
        * (unit.eo_phase(Polarization::H, 1.0) + unit.eo_phase(Polarization::V, 1.0));
    if !(slope.abs() > 0.0) || !slope.is_finite() {
        return Err(Error::Config("modulator has no electro-optic response".into()));
    }
    Ok(PI / (slope.abs() * target_u_pi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveplateConfig {
    /// rad; π for a half-wave plate, π/2 for a quarter-wave plate.
    pub retardance: f64,
    /// Fast-axis angle from H, rad.
    pub axis_angle: f64,
}

impl WaveplateConfig {
    pub fn half_wave(axis_angle: f64) -> Self {
        WaveplateConfig { retardance: PI, axis_angle }
    }

    pub fn quarter_wave(axis_angle: f64) -> Self {
        WaveplateConfig { retardance: 0.5 * PI, axis_angle }
    }
}

/// Retarder R(θ)·diag(e^{−iΓ/2}, e^{iΓ/2})·R(−θ).
pub fn waveplate_jones(cfg: &WaveplateConfig) -> Result<Mat2> {
    if !(cfg.retardance > 0.0 && cfg.retardance < TAU) {
        return Err(Error::Config(format!(
            "retardance {} outside (0, 2π)",
            cfg.retardance
        )));
    }
    let half = 0.5 * cfg.retardance;
    let d = Mat2::new(c(half.cos(), -half.sin()), cr(0.0), cr(0.0), c(half.cos(), half.sin()));
    let r = rotation(cfg.axis_angle);
    Ok(r * d * r.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsConfig {
    pub transmittance: f64,
    /// Power loss fraction, applied uniformly to both outputs.
    #[serde(default)]
    pub loss: f64,
}

impl BsConfig {
    pub fn balanced() -> Self {
        BsConfig { transmittance: 0.5, loss: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.transmittance) {
            return Err(Error::Config(format!(
                "transmittance {} outside [0,1]",
                self.transmittance
            )));
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(Error::Config(format!("beam splitter loss {} outside [0,1)", self.loss)));
        }
        Ok(())
    }
}

/// Path-mode operator √(1−loss)·[[√T, i√(1−T)], [i√(1−T), √T]].
pub fn bs_operator(cfg: &BsConfig) -> Result<Mat2> {
    cfg.validate()?;
    let amp = (1.0 - cfg.loss).sqrt();
    let t = cfg.transmittance.sqrt() * amp;
    let r = (1.0 - cfg.transmittance).sqrt() * amp;
    Ok(Mat2::new(cr(t), c(0.0, r), c(0.0, r), cr(t)))
}

/// Near-normal reflection: H picks up a π phase relative to V.
pub fn mirror_operator(loss: f64) -> Result<Mat2> {
    if !(0.0..1.0).contains(&loss) {
        return Err(Error::Config(format!("mirror loss {loss} outside [0,1)")));
    }
    let a = (1.0 - loss).sqrt();
    Ok(Mat2::new(cr(-a), cr(0.0), cr(0.0), cr(a)))
}

/// Power fraction lost for an insertion loss given in dB.
pub fn db_to_loss(db: f64) -> f64 {
    1.0 - 10f64.powf(-db / 10.0)
}

pub fn loss_to_db(loss: f64) -> f64 {
    -10.0 * (1.0 - loss).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polmath::{process_fidelity, PolLabel, ProcessMatrix};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn built_eom() -> EomConfig {
        let mut cfg = EomConfig::from_material(&MaterialTable::builtin());
        cfg.eo_scale = calibrate_eo_scale(&cfg, 960.0).unwrap();
        cfg
    }

    fn same_up_to_phase(a: &crate::polmath::JonesVector, b: &crate::polmath::JonesVector) -> bool {
        (a.inner(b).norm() - 1.0).abs() < 1e-12
    }

    #[test]
    fn material_table_loads() {
        let t = MaterialTable::builtin();
        assert_eq!(t.version, 1);
        assert_abs_diff_eq!(t.crystal.length, 0.010);
        assert_abs_diff_eq!(t.crystal.width, 0.003);
        assert!(MaterialTable::parse("version = 1").is_err());
    }

    #[test]
    fn field_free_phase_is_static_index() {
        let c = MaterialTable::builtin().crystal;
        let lam = 1.57e-6;
        assert_abs_diff_eq!(
            rtp_phase(&c, Polarization::H, 0.0, lam, 1.0),
            TAU / lam * c.length * c.n_y
        );
        assert_abs_diff_eq!(
            rtp_phase(&c, Polarization::V, 0.0, lam, 1.0),
            TAU / lam * c.length * c.n_z
        );
    }

    #[test]
    fn phase_is_affine_in_voltage() {
        let c = MaterialTable::builtin().crystal;
        let lam = 1.57e-6;
        let (_, e1) = rtp_phase_parts(&c, Polarization::V, 300.0, lam, 1.3);
        let (_, e2) = rtp_phase_parts(&c, Polarization::V, 600.0, lam, 1.3);
        assert_abs_diff_eq!(e2, 2.0 * e1, epsilon = 1e-12);
    }

    #[test]
    fn cross_aligned_pair_compensates() {
        let cfg = built_eom();
        let lam = cfg.wavelength;
        for &u in &[0.0, 250.0, -480.0, 960.0] {
            let h = rtp_phase(&cfg.crystal1, Polarization::H, u, lam, cfg.eo_scale)
                + rtp_phase(&cfg.crystal2, Polarization::H, u, lam, cfg.eo_scale);
            let v = rtp_phase(&cfg.crystal1, Polarization::V, u, lam, cfg.eo_scale)
                + rtp_phase(&cfg.crystal2, Polarization::V, u, lam, cfg.eo_scale);
            assert_abs_diff_eq!(h, v, epsilon = 1e-12 * h.abs());
        }
    }

    #[test]
    fn compensated_eom_is_scalar() {
        let cfg = built_eom();
        for &u in &[0.0, 123.0, 960.0, -700.0] {
            let j = eom_jones(&cfg, u);
            assert!(j[(0, 1)].norm() < 1e-14 && j[(1, 0)].norm() < 1e-14);
            assert_eq!(j[(0, 0)], j[(1, 1)]);
        }
    }

    #[test]
    fn push_pull_reaches_pi_at_half_wave_voltage() {
        let cfg = built_eom();
        assert_abs_diff_eq!(push_pull_phase(&cfg, &cfg, 960.0).abs(), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(push_pull_phase(&cfg, &cfg, 480.0).abs(), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_scales_inversely_with_response() {
        let cfg = EomConfig::from_material(&MaterialTable::builtin());
        let s1 = calibrate_eo_scale(&cfg, 960.0).unwrap();
        let mut doubled = cfg;
        for c in [&mut doubled.crystal1, &mut doubled.crystal2] {
            c.r23 *= 2.0;
            c.r33 *= 2.0;
        }
        let s2 = calibrate_eo_scale(&doubled, 960.0).unwrap();
        assert_abs_diff_eq!(s2, 0.5 * s1, epsilon = 1e-12 * s1);
        assert!(calibrate_eo_scale(&cfg, 0.0).is_err());
        let mut dead = cfg;
        for c in [&mut dead.crystal1, &mut dead.crystal2] {
            c.r23 = 1e-300;
            c.r33 = 1e-300;
        }
        dead.crystal1.width = 1e300;
        dead.crystal2.width = 1e300;
        assert!(matches!(calibrate_eo_scale(&dead, 960.0), Err(Error::Config(_))));
    }

    #[test]
    fn small_misalignment_is_nearly_identity() {
        let mut cfg = built_eom();
        cfg.misalignment_eps = 0.01;
        let j = eom_jones(&cfg, 480.0);
        let chi = ProcessMatrix::from_unitary(&j).unwrap();
        let f = process_fidelity(&ProcessMatrix::identity(), &chi).unwrap();
        assert!(f < 1.0 && f > 0.999, "fidelity {f}");
    }

    #[test]
    fn waveplate_identities() {
        let h = PolLabel::H.jones();
        let hwp0 = waveplate_jones(&WaveplateConfig::half_wave(0.0)).unwrap();
        assert!(same_up_to_phase(&h.apply(&hwp0), &h));
        let hwp = waveplate_jones(&WaveplateConfig::half_wave(PI / 8.0)).unwrap();
        assert!(same_up_to_phase(&h.apply(&hwp), &PolLabel::D.jones()));
        let qwp = waveplate_jones(&WaveplateConfig::quarter_wave(PI / 4.0)).unwrap();
        let out = h.apply(&qwp);
        assert_abs_diff_eq!(out.h.norm(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(out.v.norm(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!(waveplate_jones(&WaveplateConfig { retardance: 0.0, axis_angle: 0.0 }).is_err());
    }

    #[test]
    fn beam_splitter_cases() {
        let b = bs_operator(&BsConfig::balanced()).unwrap();
        assert!((b.adjoint() * b - Mat2::identity()).norm() < 1e-15);
        let full = bs_operator(&BsConfig { transmittance: 1.0, loss: 0.04 }).unwrap();
        assert!((full - Mat2::identity() * cr(0.96f64.sqrt())).norm() < 1e-15);
        let lossy = bs_operator(&BsConfig { transmittance: 0.5, loss: 0.01 }).unwrap();
        assert!((lossy.adjoint() * lossy - Mat2::identity() * cr(0.99)).norm() < 1e-15);
        assert!(bs_operator(&BsConfig { transmittance: 1.5, loss: 0.0 }).is_err());
    }

    #[test]
    fn mirror_flips_horizontal_phase() {
        let m = mirror_operator(0.0).unwrap();
        assert!(same_up_to_phase(&PolLabel::D.jones().apply(&m), &PolLabel::A.jones()));
        assert!(same_up_to_phase(&PolLabel::H.jones().apply(&m), &PolLabel::H.jones()));
        let lossy = mirror_operator(0.02).unwrap();
        assert!((lossy * lossy - Mat2::identity() * cr(0.98)).norm() < 1e-15);
        assert!(mirror_operator(1.0).is_err());
    }

    #[test]
    fn db_conversions() {
        assert_abs_diff_eq!(loss_to_db(db_to_loss(0.057)), 0.057, epsilon = 1e-14);
        assert_eq!(db_to_loss(0.0), 0.0);
    }

    fn eq12(c: &RtpCrystal, pol: Polarization, u: f64, lam: f64, s: f64) -> f64 {
        // Written out independently from the two lookup tables.
        let k = 2.0 * PI / lam;
        match (c.h_axis, pol) {
            (CrystalAxis::Y, Polarization::V) | (CrystalAxis::Z, Polarization::H) => {
                k * c.length * (c.n_z - 0.5 * c.r33 * c.n_z * c.n_z * c.n_z * s * u / c.width)
            }
            _ => k * c.length * (c.n_y - 0.5 * c.r23 * c.n_y * c.n_y * c.n_y * s * u / c.width),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn phase_matches_direct_formula(
            l in 1e-3..0.05f64, d in 1e-3..0.01f64, ny in 1.0..2.5f64, nz in 1.0..2.5f64,
            r23 in 1e-12..5e-11f64, r33 in 1e-12..5e-11f64, u in -2000.0..2000.0f64,
            lam in 4e-7..2e-6f64, s in 0.5..2.0f64, zaxis in any::<bool>(), vpol in any::<bool>()
        ) {
            let c = RtpCrystal {
                length: l, width: d, n_y: ny, n_z: nz, r23, r33,
                h_axis: if zaxis { CrystalAxis::Z } else { CrystalAxis::Y },
            };
            let pol = if vpol { Polarization::V } else { Polarization::H };
            let got = rtp_phase(&c, pol, u, lam, s);
            let want = eq12(&c, pol, u, lam, s);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }

        #[test]
        fn lossless_elements_are_unitary(
            ret in 0.01..6.2f64, ang in -3.2..3.2f64, t in 0.0..=1.0f64,
            eps in -0.09..0.09f64, u in -1500.0..1500.0f64
        ) {
            let id = Mat2::identity();
            let w = waveplate_jones(&WaveplateConfig { retardance: ret, axis_angle: ang }).unwrap();
            prop_assert!((w.adjoint() * w - id).norm() < 1e-12);
            let b = bs_operator(&BsConfig { transmittance: t, loss: 0.0 }).unwrap();
            prop_assert!((b.adjoint() * b - id).norm() < 1e-12);
            let mut e = built_eom();
            e.misalignment_eps = eps;
            let j = eom_jones(&e, u);
            prop_assert!((j.adjoint() * j - id).norm() < 1e-12);
        }
    }
}
