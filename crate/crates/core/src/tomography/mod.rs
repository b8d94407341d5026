//! Qubit state and process tomography.
//!
//! Estimates are parametrized through a lower-triangular T with
//! χ = T†T / tr(T†T), which keeps every candidate Hermitian, positive and of
//! unit trace without projection.

mod deconvolve;
mod mle;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

pub use deconvolve::{deconvolution_cost, deconvolve_fiber, DeconvolveOptions};
pub use mle::{mle_process_tomography, mle_state_tomography, MleOptions};

use crate::error::{Error, Result};
use crate::polmath::{
    cr, pauli_basis, DensityMatrix2, Mat2, Mat4, MatrixJson, Pauli, PolLabel, ProcessMatrix, C64,
};

/// Real parameters of a lower-triangular d×d matrix: d real diagonal
/// entries, then (re, im) of each strictly-lower entry row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularParams(pub Vec<f64>);

impl TriangularParams {
    pub fn len_for(dim: usize) -> usize {
        dim * dim
    }

    pub fn dim(&self) -> Result<usize> {
        match self.0.len() {
            4 => Ok(2),
            16 => Ok(4),
            n => Err(Error::Usage(format!("expected 4 or 16 parameters, got {n}"))),
        }
    }

    pub fn to_matrix(&self) -> Result<nalgebra::DMatrix<C64>> {
        let d = self.dim()?;
        let mut t = nalgebra::DMatrix::zeros(d, d);
        for i in 0..d {
            t[(i, i)] = cr(self.0[i]);
        }
        let mut k = d;
        for r in 1..d {
            for c in 0..r {
                t[(r, c)] = C64::new(self.0[k], self.0[k + 1]);
                k += 2;
            }
        }
        Ok(t)
    }

    /// Parameters whose χ (or ρ) equals `target`, up to the gauge τ = 1.
    pub fn from_psd(target: &nalgebra::DMatrix<C64>) -> Result<Self> {
        let d = target.nrows();
        // With P the index reversal, P·target·P = L L† gives target = U U†
        // for the upper-triangular U = P L P, so T = U† is lower triangular
        // with a real positive diagonal.
        let rev = nalgebra::DMatrix::from_fn(d, d, |i, j| target[(d - 1 - i, d - 1 - j)]);
        let reg = &rev + nalgebra::DMatrix::<C64>::identity(d, d) * cr(1e-13);
        let chol = nalgebra::linalg::Cholesky::new(reg)
            .ok_or_else(|| Error::Domain("matrix is not positive semidefinite".into()))?;
        let l = chol.l();
        let t = nalgebra::DMatrix::from_fn(d, d, |i, j| l[(d - 1 - i, d - 1 - j)]).adjoint();
        let mut p = vec![0.0; d * d];
        for i in 0..d {
            p[i] = t[(i, i)].re;
        }
        let mut k = d;
        for r in 1..d {
            for c in 0..r {
                p[k] = t[(r, c)].re;
                p[k + 1] = t[(r, c)].im;
                k += 2;
            }
        }
        Ok(TriangularParams(p))
    }
}

fn normalized_gram(t: &nalgebra::DMatrix<C64>) -> Result<nalgebra::DMatrix<C64>> {
    let g = t.adjoint() * t;
    let tau = g.trace().re;
    if !(tau > 0.0) {
        return Err(Error::Degenerate("all triangular parameters are zero".into()));
    }
    Ok(g / cr(tau))
}

pub fn chi_from_params(t: &TriangularParams) -> Result<ProcessMatrix> {
    if t.0.len() != 16 {
        return Err(Error::Usage(format!("process parametrization needs 16 values, got {}", t.0.len())));
    }
    let g = normalized_gram(&t.to_matrix()?)?;
    ProcessMatrix::new(Mat4::from_fn(|i, j| g[(i, j)]))
}

pub fn rho_from_params(t: &TriangularParams) -> Result<DensityMatrix2> {
    if t.0.len() != 4 {
        return Err(Error::Usage(format!("state parametrization needs 4 values, got {}", t.0.len())));
    }
    let g = normalized_gram(&t.to_matrix()?)?;
    DensityMatrix2::new(Mat2::from_fn(|i, j| g[(i, j)]))
}

/// Result of applying a process matrix to a state.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessOutput {
    pub matrix: Mat2,
    pub trace: f64,
    /// Set when χ is not trace preserving.
    pub warning: Option<String>,
}

impl ProcessOutput {
    /// The output as a density matrix; a non-unit trace is an error unless
    /// `renormalize` is set.
    pub fn state(&self, renormalize: bool) -> Result<DensityMatrix2> {
        if renormalize {
            DensityMatrix2::from_unnormalized(&self.matrix)
        } else {
            DensityMatrix2::new(self.matrix)
        }
    }
}

/// ρ_out = Σ χ_ij σ_i ρ σ_j†.
pub fn apply_process(chi: &ProcessMatrix, rho: &DensityMatrix2) -> ProcessOutput {
    let matrix = chi.apply_raw(rho.matrix());
    let trace = matrix.trace().re;
    let warning = (!chi.is_trace_preserving()).then(|| {
        format!("process is not trace preserving (residual {:.3e})", chi.tp_residual())
    });
    ProcessOutput { matrix, trace, warning }
}

/// Coefficients c such that σ_a σ_b = Σ_m c[a][b][m] σ_m.
fn pauli_products() -> [[[C64; 4]; 4]; 4] {
    let s = pauli_basis();
    let mut out = [[[C64::new(0.0, 0.0); 4]; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            let prod = s[a] * s[b];
            for m in 0..4 {
                out[a][b][m] = (s[m] * prod).trace() * 0.5;
            }
        }
    }
    out
}

/// χ of ρ ↦ outer(inner(ρ)). Exact for trace-preserving inputs; otherwise
/// the result is rescaled to unit trace like any conditional channel.
pub fn compose_processes(outer: &ProcessMatrix, inner: &ProcessMatrix) -> ProcessMatrix {
    let c = pauli_products();
    let (a, b) = (outer.matrix(), inner.matrix());
    let mut out = Mat4::zeros();
    for k in 0..4 {
        for l in 0..4 {
            let akl = a[(k, l)];
            if akl == C64::new(0.0, 0.0) {
                continue;
            }
            for i in 0..4 {
                for j in 0..4 {
                    let w = akl * b[(i, j)];
                    for m in 0..4 {
                        let cm = c[k][i][m];
                        if cm == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for n in 0..4 {
                            out[(m, n)] += w * cm * c[l][j][n].conj();
                        }
                    }
                }
            }
        }
    }
    ProcessMatrix::from_unnormalized(&out).expect("composition of valid processes")
}

/// Unitary rotation exp(−iθ n·σ/2) as a process.
pub fn rotation_channel(axis: [f64; 3], angle: f64) -> Result<ProcessMatrix> {
    let [x, y, z] = axis;
    let n = (x * x + y * y + z * z).sqrt();
    if !(n > 0.0) {
        return Err(Error::Usage("rotation axis must be non-zero".into()));
    }
    let s = pauli_basis();
    let gen = (s[1] * cr(x) + s[2] * cr(y) + s[3] * cr(z)) / cr(n);
    let u = Mat2::identity() * cr((angle / 2.0).cos()) - gen * C64::new(0.0, (angle / 2.0).sin());
    ProcessMatrix::from_unitary(&u)
}

/// Random trace-preserving channel of Kraus rank `rank` (1–4): Gaussian
/// Kraus operators K_i, then K_i S^{−1/2} with S = Σ K_i†K_i.
pub fn random_tp_channel<R: rand::Rng + ?Sized>(rng: &mut R, rank: usize) -> Result<ProcessMatrix> {
    if !(1..=4).contains(&rank) {
        return Err(Error::Usage(format!("Kraus rank must be 1..4, got {rank}")));
    }
    let normal = rand_distr::StandardNormal;
    let kraus: Vec<Mat2> = (0..rank)
        .map(|_| Mat2::from_fn(|_, _| C64::new(rng.sample(normal), rng.sample(normal))))
        .collect();
    let sum: Mat2 = kraus.iter().map(|k| k.adjoint() * k).sum();
    let (ev, vecs) = crate::polmath::hermitian_eigen(&crate::polmath::to_dynamic2(&sum));
    let mut inv_sqrt = Mat2::zeros();
    for (k, &l) in ev.iter().enumerate() {
        let v = nalgebra::Vector2::new(vecs[(0, k)], vecs[(1, k)]);
        inv_sqrt += v * v.adjoint() * cr(1.0 / l.sqrt());
    }
    let fixed: Vec<Mat2> = kraus.iter().map(|k| k * inv_sqrt).collect();
    ProcessMatrix::from_kraus(&fixed)
}

/// Redefines the output H axis as −H, undoing a single reflection.
pub fn invert_h_coordinate(chi: &ProcessMatrix) -> ProcessMatrix {
    compose_processes(&ProcessMatrix::pauli_channel(Pauli::Z), chi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyRecord {
    pub input_label: PolLabel,
    pub projector_label: PolLabel,
    /// Integer in sampled data; expected value in analytic mode.
    pub counts: f64,
    pub shots: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TomographyDataset {
    pub records: Vec<TomographyRecord>,
}

impl TomographyDataset {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if !(r.shots > 0.0) || !(r.counts >= 0.0) || r.counts > r.shots {
                return Err(Error::Usage(format!(
                    "record {}→{} needs 0 ≤ counts ≤ shots and shots > 0",
                    r.input_label, r.projector_label
                )));
            }
        }
        Ok(())
    }

    /// Complete 36-setting process dataset.
    pub fn require_process(&self) -> Result<()> {
        self.validate()?;
        for i in PolLabel::ALL {
            for p in PolLabel::ALL {
                if !self.records.iter().any(|r| r.input_label == i && r.projector_label == p) {
                    return Err(Error::Usage(format!("missing setting {i}→{p}")));
                }
            }
        }
        Ok(())
    }

    /// All six projectors present.
    pub fn require_state(&self) -> Result<()> {
        self.validate()?;
        for p in PolLabel::ALL {
            if !self.records.iter().any(|r| r.projector_label == p) {
                return Err(Error::Usage(format!("missing projector {p}")));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("input_label,projector_label,counts,shots\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.input_label, r.projector_label, r.counts, r.shots).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["input_label", "projector_label", "counts", "shots"] {
            return Err(Error::Parse(format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("line {}: expected 4 fields", n + 2)));
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number {s:?}", n + 2)))
            };
            records.push(TomographyRecord {
                input_label: f[0].parse()?,
                projector_label: f[1].parse()?,
                counts: num(f[2])?,
                shots: num(f[3])?,
            });
        }
        let ds = TomographyDataset { records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    /// Expected counts, no noise.
    Analytic,
    /// Binomial counts from a seeded generator.
    Binomial { seed: u64 },
}

fn projector(label: PolLabel) -> Mat2 {
    label.jones().outer()
}

fn born_probability(rho: &Mat2, label: PolLabel) -> f64 {
    (projector(label) * rho).trace().re.clamp(0.0, 1.0)
}

/// Counts for all 36 (input, projector) settings.
pub fn simulate_tomography(
    channel: &ProcessMatrix,
    shots_per_setting: u64,
    sampling: Sampling,
) -> Result<TomographyDataset> {
    if shots_per_setting == 0 {
        return Err(Error::Usage("shots per setting must be positive".into()));
    }
    let mut rng = match sampling {
        Sampling::Binomial { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Analytic => None,
    };
    let mut records = Vec::with_capacity(36);
    for input in PolLabel::ALL {
        let out = channel.apply_raw(input.jones().density().matrix());
        for proj in PolLabel::ALL {
            let p = born_probability(&out, proj);
            let n = shots_per_setting as f64;
            let counts = match rng.as_mut() {
                None => p * n,
                Some(rng) => Binomial::new(shots_per_setting, p)
                    .map_err(|e| Error::Domain(format!("binomial({shots_per_setting}, {p}): {e}")))?
                    .sample(rng) as f64,
            };
            records.push(TomographyRecord { input_label: input, projector_label: proj, counts, shots: n });
        }
    }
    Ok(TomographyDataset { records })
}

/// Six-projector counts for one state.
pub fn simulate_state_tomography(
    rho: &DensityMatrix2,
    shots_per_setting: u64,
    sampling: Sampling,
) -> Result<TomographyDataset> {
    if shots_per_setting == 0 {
        return Err(Error::Usage("shots per setting must be positive".into()));
    }
    let mut rng = match sampling {
        Sampling::Binomial { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Analytic => None,
    };
    let mut records = Vec::with_capacity(6);
    for proj in PolLabel::ALL {
        let p = born_probability(rho.matrix(), proj);
        let n = shots_per_setting as f64;
        let counts = match rng.as_mut() {
            None => p * n,
            Some(rng) => Binomial::new(shots_per_setting, p)
                .map_err(|e| Error::Domain(format!("binomial({shots_per_setting}, {p}): {e}")))?
                .sample(rng) as f64,
        };
        records.push(TomographyRecord { input_label: PolLabel::H, projector_label: proj, counts, shots: n });
    }
    Ok(TomographyDataset { records })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport<E> {
    pub estimate: E,
    /// Per-shot log-likelihood (MLE) of the returned estimate.
    pub log_likelihood: Option<f64>,
    /// Final cost (deconvolution).
    pub cost: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    pub tp_residual: Option<f64>,
    pub penalty_weight: Option<f64>,
    pub fidelity_to_target: Option<f64>,
    pub seed: u64,
}

impl ReconstructionReport<ProcessMatrix> {
    pub fn with_target(mut self, target: &ProcessMatrix) -> Result<Self> {
        self.fidelity_to_target = Some(crate::polmath::process_fidelity(target, &self.estimate)?);
        Ok(self)
    }

    /// χ with Pauli labels and the optimizer metadata.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "basis": ["I", "X", "Y", "Z"],
            "chi": MatrixJson::from_matrix(&self.estimate.to_dynamic()),
            "fidelity_to_identity": crate::polmath::process_fidelity(&ProcessMatrix::identity(), &self.estimate).ok(),
            "metadata": {
                "log_likelihood": self.log_likelihood,
                "cost": self.cost,
                "iterations": self.iterations,
                "converged": self.converged,
                "restarts": self.restarts,
                "tp_residual": self.tp_residual,
                "penalty_weight": self.penalty_weight,
                "fidelity_to_target": self.fidelity_to_target,
                "seed": self.seed,
            }
        })
    }
}

/// Reads the `chi` entry of a file written by [`ReconstructionReport::to_json`]
/// (or a bare matrix object).
pub fn read_chi_json(text: &str) -> Result<ProcessMatrix> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("χ JSON: {e}")))?;
    let m = v.get("chi").cloned().unwrap_or(v);
    let m: MatrixJson = serde_json::from_value(m).map_err(|e| Error::Parse(format!("χ JSON: {e}")))?;
    let d = m.to_matrix()?;
    if d.nrows() != 4 || d.ncols() != 4 {
        return Err(Error::Parse("χ must be 4×4".into()));
    }
    ProcessMatrix::from_unnormalized(&Mat4::from_fn(|i, j| d[(i, j)]))
}
