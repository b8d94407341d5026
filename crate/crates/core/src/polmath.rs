//! Small complex linear algebra and quantum-information metrics for a
//! single polarization qubit.
//!
//! Fixed-size `Matrix2`/`Matrix4` carry the domain types; the dynamically
//! sized [`ComplexMatrix`] is used by the generic helpers (square roots,
//! spectral norms, JSON I/O). Nothing here is meant for matrices larger than
//! about 10×10.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix2, Matrix4, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Mat2 = Matrix2<C64>;
pub type Mat4 = Matrix4<C64>;
pub type ComplexMatrix = DMatrix<C64>;

/// Numerical tolerance ladder shared by every invariant check.
pub mod tol {
    /// Construction of states and Jones vectors.
    pub const CONSTRUCTION: f64 = 1e-12;
    /// Hermiticity and positivity of process matrices.
    pub const PSD: f64 = 1e-10;
    /// Trace-preservation residual of process matrices.
    pub const TP: f64 = 1e-8;
}

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Pauli operator labels, in the order used to index process matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn matrix(self) -> Mat2 {
        let (z, o, i) = (cr(0.0), cr(1.0), c(0.0, 1.0));
        match self {
            Pauli::I => Mat2::new(o, z, z, o),
            Pauli::X => Mat2::new(z, o, o, z),
            Pauli::Y => Mat2::new(z, -i, i, z),
            Pauli::Z => Mat2::new(o, z, z, -o),
        }
    }
}

impl FromStr for Pauli {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" => Ok(Pauli::I),
            "X" => Ok(Pauli::X),
            "Y" => Ok(Pauli::Y),
            "Z" => Ok(Pauli::Z),
            other => Err(Error::Usage(format!("unknown Pauli label {other:?}"))),
        }
    }
}

impl fmt::Display for Pauli {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// The four Pauli matrices as an array indexed by [`Pauli::index`].
pub fn pauli_basis() -> [Mat2; 4] {
    Pauli::ALL.map(Pauli::matrix)
}

pub fn pauli(label: &str) -> Result<Mat2> {
    Ok(label.parse::<Pauli>()?.matrix())
}

/// Polarization states used as tomography inputs and projectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolLabel {
    H,
    V,
    D,
    A,
    R,
    L,
}

impl PolLabel {
    pub const ALL: [PolLabel; 6] = [
        PolLabel::H,
        PolLabel::V,
        PolLabel::D,
        PolLabel::A,
        PolLabel::R,
        PolLabel::L,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Jones vector for the label. R = (H − iV)/√2 and L = (H + iV)/√2.
    pub fn jones(self) -> JonesVector {
        let s = FRAC_1_SQRT_2;
        let (h, v) = match self {
            PolLabel::H => (cr(1.0), cr(0.0)),
            PolLabel::V => (cr(0.0), cr(1.0)),
            PolLabel::D => (cr(s), cr(s)),
            PolLabel::A => (cr(s), cr(-s)),
            PolLabel::R => (cr(s), c(0.0, -s)),
            PolLabel::L => (cr(s), c(0.0, s)),
        };
        JonesVector { h, v }
    }
}

impl FromStr for PolLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "H" => Ok(PolLabel::H),
            "V" => Ok(PolLabel::V),
            "D" => Ok(PolLabel::D),
            "A" => Ok(PolLabel::A),
            "R" => Ok(PolLabel::R),
            "L" => Ok(PolLabel::L),
            other => Err(Error::Usage(format!(
                "unknown polarization label {other:?}"
            ))),
        }
    }
}

impl fmt::Display for PolLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub fn state_from_label(label: &str) -> Result<JonesVector> {
    Ok(label.parse::<PolLabel>()?.jones())
}

/// Pure polarization state of one photon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    pub h: C64,
    pub v: C64,
}

impl JonesVector {
    /// Builds a unit-norm vector from unnormalized amplitudes.
    pub fn normalize(h: C64, v: C64) -> Result<Self> {
        let n = (h.norm_sqr() + v.norm_sqr()).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain("cannot normalize a zero Jones vector".into()));
        }
        Ok(JonesVector { h: h / n, v: v / n })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.h.norm_sqr() + self.v.norm_sqr()
    }

    pub fn as_vector(&self) -> Vector2<C64> {
        Vector2::new(self.h, self.v)
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &JonesVector) -> C64 {
        self.h.conj() * other.h + self.v.conj() * other.v
    }

    pub fn apply(&self, op: &Mat2) -> JonesVector {
        let w = op * self.as_vector();
        JonesVector { h: w[0], v: w[1] }
    }

    /// |ψ⟩⟨ψ| without normalization checks.
    pub fn outer(&self) -> Mat2 {
        let w = self.as_vector();
        w * w.adjoint()
    }

    pub fn density(&self) -> DensityMatrix2 {
        DensityMatrix2(self.outer() / cr(self.norm_sqr()))
    }
}

/// Mixed polarization state: Hermitian, positive semidefinite, unit trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix2(Mat2);

impl DensityMatrix2 {
    pub fn new(m: Mat2) -> Result<Self> {
        check_hermitian(&m, tol::CONSTRUCTION)?;
        let tr = m.trace();
        if (tr.re - 1.0).abs() > tol::CONSTRUCTION || tr.im.abs() > tol::CONSTRUCTION {
            return Err(Error::Domain(format!("density matrix trace {tr} != 1")));
        }
        let min = hermitian_eigenvalues2(&m).0;
        if min < -tol::CONSTRUCTION {
            return Err(Error::Domain(format!(
                "density matrix has negative eigenvalue {min:e}"
            )));
        }
        Ok(DensityMatrix2(m))
    }

    /// Normalizes a positive matrix by its trace before validating.
    pub fn from_unnormalized(m: &Mat2) -> Result<Self> {
        let tr = m.trace().re;
        if !(tr > 0.0) {
            return Err(Error::Domain(format!("cannot normalize trace {tr}")));
        }
        Self::new(m / cr(tr))
    }

    pub fn pure(psi: &JonesVector) -> Self {
        psi.density()
    }

    pub fn maximally_mixed() -> Self {
        DensityMatrix2(Mat2::identity() * cr(0.5))
    }

    pub fn matrix(&self) -> &Mat2 {
        &self.0
    }

    /// Tr(ρ Π) for a projector or any Hermitian observable.
    pub fn expectation(&self, op: &Mat2) -> f64 {
        (self.0 * op).trace().re
    }
}

/// 4×4 Pauli-basis process matrix χ with ρ_out = Σ χ_ij σ_i ρ σ_j†.
///
/// Always stored with unit trace. Trace preservation is checked separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessMatrix(Mat4);

impl ProcessMatrix {
    pub fn new(m: Mat4) -> Result<Self> {
        check_hermitian(&m, tol::PSD)?;
        let tr = m.trace();
        if (tr.re - 1.0).abs() > tol::PSD || tr.im.abs() > tol::PSD {
            return Err(Error::Domain(format!("process matrix trace {tr} != 1")));
        }
        let dm = to_dynamic4(&m);
        let min = hermitian_eigen(&dm).0.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -tol::PSD {
            return Err(Error::Domain(format!(
                "process matrix has negative eigenvalue {min:e}"
            )));
        }
        Ok(ProcessMatrix(m))
    }

    pub fn from_unnormalized(m: &Mat4) -> Result<Self> {
        let tr = m.trace().re;
        if !(tr > 0.0) {
            return Err(Error::Domain(format!("cannot normalize χ with trace {tr}")));
        }
        Self::new(m / cr(tr))
    }

    /// The identity channel: χ_II = 1.
    pub fn identity() -> Self {
        Self::pauli_channel(Pauli::I)
    }

    /// Conjugation by a single Pauli operator.
    pub fn pauli_channel(p: Pauli) -> Self {
        let mut m = Mat4::zeros();
        m[(p.index(), p.index())] = cr(1.0);
        ProcessMatrix(m)
    }

    pub fn depolarizing() -> Self {
        ProcessMatrix(Mat4::identity() * cr(0.25))
    }

    /// Pauli-basis coefficients c_i = Tr(σ_i K)/2 of an operator K = Σ c_i σ_i.
    pub fn pauli_coefficients(k: &Mat2) -> [C64; 4] {
        Pauli::ALL.map(|p| (p.matrix() * k).trace() * 0.5)
    }

    /// Process matrix of a channel given by Kraus operators, normalized to
    /// unit trace (sub-unitary sets give the conditional channel).
    pub fn from_kraus(kraus: &[Mat2]) -> Result<Self> {
        let mut m = Mat4::zeros();
        for k in kraus {
            let cvec = Self::pauli_coefficients(k);
            for i in 0..4 {
                for j in 0..4 {
                    m[(i, j)] += cvec[i] * cvec[j].conj();
                }
            }
        }
        Self::from_unnormalized(&m)
    }

    pub fn from_unitary(u: &Mat2) -> Result<Self> {
        Self::from_kraus(std::slice::from_ref(u))
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn element(&self, i: Pauli, j: Pauli) -> C64 {
        self.0[(i.index(), j.index())]
    }

    /// Σ χ_ij σ_i ρ σ_j† on an arbitrary 2×2 operator.
    pub fn apply_raw(&self, rho: &Mat2) -> Mat2 {
        let s = pauli_basis();
        let mut out = Mat2::zeros();
        for i in 0..4 {
            let left = s[i] * rho;
            for (j, sj) in s.iter().enumerate() {
                let x = self.0[(i, j)];
                if x != C64::new(0.0, 0.0) {
                    out += left * sj * x;
                }
            }
        }
        out
    }

    /// Σ χ_ij σ_j† σ_i, which equals the identity for a trace-preserving map.
    pub fn tp_operator(&self) -> Mat2 {
        let s = pauli_basis();
        let mut out = Mat2::zeros();
        for i in 0..4 {
            for j in 0..4 {
                out += s[j] * s[i] * self.0[(i, j)];
            }
        }
        out
    }

    /// Frobenius norm of `tp_operator() − I`.
    pub fn tp_residual(&self) -> f64 {
        (self.tp_operator() - Mat2::identity()).norm()
    }

    pub fn is_trace_preserving(&self) -> bool {
        self.tp_residual() < tol::TP
    }

    pub fn to_dynamic(&self) -> ComplexMatrix {
        to_dynamic4(&self.0)
    }
}

pub fn to_dynamic4(m: &Mat4) -> ComplexMatrix {
    ComplexMatrix::from_fn(4, 4, |i, j| m[(i, j)])
}

pub fn to_dynamic2(m: &Mat2) -> ComplexMatrix {
    ComplexMatrix::from_fn(2, 2, |i, j| m[(i, j)])
}

fn check_hermitian<R, S>(m: &nalgebra::Matrix<C64, R, R, S>, tol: f64) -> Result<()>
where
    R: nalgebra::Dim,
    S: nalgebra::RawStorage<C64, R, R>,
{
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    if dev > tol {
        return Err(Error::Domain(format!("matrix is not Hermitian (deviation {dev:e})")));
    }
    Ok(())
}

/// Eigenvalues (ascending) and eigenvectors of a Hermitian matrix.
pub fn hermitian_eigen(m: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    let herm = (m + m.adjoint()) * cr(0.5);
    let eig = herm.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = ComplexMatrix::from_fn(m.nrows(), order.len(), |i, j| {
        eig.eigenvectors[(i, order[j])]
    });
    (vals, vecs)
}

/// Closed-form eigenvalues (min, max) of a 2×2 Hermitian matrix.
pub fn hermitian_eigenvalues2(m: &Mat2) -> (f64, f64) {
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let b = m[(0, 1)];
    let mean = 0.5 * (a + d);
    let half = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
    (mean - half, mean + half)
}

/// Principal square root of a Hermitian positive semidefinite matrix.
///
/// Eigenvalues in `[-tol, 0)` are clipped to zero; anything more negative
/// is rejected.
pub fn matrix_sqrt_psd(m: &ComplexMatrix, tol: f64) -> Result<ComplexMatrix> {
    if !m.is_square() {
        return Err(Error::Domain(format!(
            "square root of a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    check_hermitian(m, tol.max(tol::PSD))?;
    let (vals, vecs) = hermitian_eigen(m);
    if let Some(&min) = vals.first() {
        if min < -tol {
            return Err(Error::Domain(format!(
                "matrix is not positive semidefinite (eigenvalue {min:e})"
            )));
        }
    }
    let n = m.nrows();
    let mut out = ComplexMatrix::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        let v = vecs.column(k);
        out += (v * v.adjoint()) * cr(s);
    }
    Ok(out)
}

/// Uhlmann-type fidelity [Tr √(√a b √a)]² between two unit-trace χ matrices.
pub fn process_fidelity(a: &ProcessMatrix, b: &ProcessMatrix) -> Result<f64> {
    psd_fidelity(&a.to_dynamic(), &b.to_dynamic(), tol::PSD)
}

/// Uhlmann fidelity between qubit states.
///
/// Uses the qubit identity F = Tr(ρσ) + 2√(det ρ det σ).
pub fn state_fidelity(a: &DensityMatrix2, b: &DensityMatrix2) -> Result<f64> {
    for m in [a.matrix(), b.matrix()] {
        let (min, _) = hermitian_eigenvalues2(m);
        if min < -tol::CONSTRUCTION {
            return Err(Error::Domain(format!("state has negative eigenvalue {min:e}")));
        }
    }
    let overlap = (a.matrix() * b.matrix()).trace().re;
    let da = a.matrix().determinant().re.max(0.0);
    let db = b.matrix().determinant().re.max(0.0);
    Ok((overlap + 2.0 * (da * db).sqrt()).clamp(0.0, 1.0))
}

/// Fidelity of two unit-trace PSD matrices of any (small) dimension.
///
/// When either argument is rank one within `tol`, the overlap ⟨v|other|v⟩ is
/// returned directly; this avoids square roots of round-off eigenvalues.
pub fn psd_fidelity(a: &ComplexMatrix, b: &ComplexMatrix, tol: f64) -> Result<f64> {
    let (va, ea) = hermitian_eigen(a);
    let (vb, eb) = hermitian_eigen(b);
    for vals in [&va, &vb] {
        if let Some(&min) = vals.first() {
            if min < -tol {
                return Err(Error::Domain(format!(
                    "fidelity argument is not positive semidefinite (eigenvalue {min:e})"
                )));
            }
        }
    }
    let rank_one = |vals: &[f64]| vals.last().is_some_and(|&top| top >= 1.0 - 1e-12);
    if rank_one(&va) {
        let v = ea.column(va.len() - 1);
        return Ok((v.adjoint() * b * v)[(0, 0)].re.clamp(0.0, 1.0));
    }
    if rank_one(&vb) {
        let v = eb.column(vb.len() - 1);
        return Ok((v.adjoint() * a * v)[(0, 0)].re.clamp(0.0, 1.0));
    }
    let sa = matrix_sqrt_psd(a, tol)?;
    let inner = &sa * b * &sa;
    let (vals, _) = hermitian_eigen(&inner);
    let tr: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok((tr * tr).clamp(0.0, 1.0))
}

/// Largest singular value.
pub fn spectral_norm(m: &ComplexMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Largest singular value of a 2×2 matrix in closed form.
pub fn spectral_norm2(m: &Mat2) -> f64 {
    let fro2 = m.norm_squared();
    let det2 = m.determinant().norm_sqr();
    let disc = (fro2 * fro2 - 4.0 * det2).max(0.0);
    (0.5 * (fro2 + disc.sqrt())).max(0.0).sqrt()
}

/// JSON form of a complex matrix: separate row-major `re` and `im` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl MatrixJson {
    pub fn from_matrix(m: &ComplexMatrix) -> Self {
        let rows = m.nrows();
        let cols = m.ncols();
        let re = (0..rows).map(|i| (0..cols).map(|j| m[(i, j)].re).collect()).collect();
        let im = (0..rows).map(|i| (0..cols).map(|j| m[(i, j)].im).collect()).collect();
        MatrixJson { rows, cols, re, im }
    }

    pub fn to_matrix(&self) -> Result<ComplexMatrix> {
        let shape_ok = self.re.len() == self.rows
            && self.im.len() == self.rows
            && self.re.iter().chain(self.im.iter()).all(|r| r.len() == self.cols);
        if !shape_ok || self.rows == 0 || self.cols == 0 {
            return Err(Error::Parse(format!(
                "matrix JSON does not match declared shape {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(ComplexMatrix::from_fn(self.rows, self.cols, |i, j| {
            c(self.re[i][j], self.im[i][j])
        }))
    }
}
