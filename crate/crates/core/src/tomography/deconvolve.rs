//! Recovery of the router process from a measurement taken through fiber.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ReconstructionReport, TriangularParams};
use crate::error::{Error, Result};
use crate::optimize::{levenberg_marquardt_with_jacobian, LmOptions, Minimum};
use crate::polmath::{
    cr, pauli_basis, spectral_norm2, to_dynamic4, Mat2, Mat4, PolLabel, ProcessMatrix, C64,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeconvolveOptions {
    pub restarts: usize,
    /// Above this final cost the result is flagged as not converged. Noisy
    /// measured processes leave a floor of a few 1e-3 per input.
    pub cost_threshold: f64,
    pub seed: u64,
    pub initial_tp_weight: f64,
    pub tp_tol: f64,
    /// Reweighting passes that move the squared-Frobenius fit toward the
    /// sum of spectral norms.
    pub irls_rounds: usize,
    pub max_iter: usize,
}

impl Default for DeconvolveOptions {
    fn default() -> Self {
        DeconvolveOptions {
            restarts: 8,
            cost_threshold: 0.05,
            seed: 0,
            initial_tp_weight: 1.0,
            tp_tol: 1e-6,
            irls_rounds: 3,
            max_iter: 5000,
        }
    }
}

const EXACT_COST: f64 = 1e-10;

fn fiducials() -> [Mat2; 6] {
    PolLabel::ALL.map(|l| *l.jones().density().matrix())
}

/// ε_T(ρ_k) − ε_F(ε_R(ρ_k)) for the six fiducial inputs.
fn differences(chi_t: &ProcessMatrix, chi_f: &ProcessMatrix, chi_r: &Mat4) -> [Mat2; 6] {
    let s = pauli_basis();
    let apply_r = |rho: &Mat2| {
        let mut out = Mat2::zeros();
        for i in 0..4 {
            for j in 0..4 {
                out += s[i] * rho * s[j].adjoint() * chi_r[(i, j)];
            }
        }
        out
    };
    fiducials().map(|rho| chi_t.apply_raw(&rho) - chi_f.apply_raw(&apply_r(&rho)))
}

/// Σ_k ‖ε_T(ρ_k) − ε_F(ε_R(ρ_k))‖₂ with uniform weights.
pub fn deconvolution_cost(chi_t: &ProcessMatrix, chi_f: &ProcessMatrix, chi_r: &ProcessMatrix) -> f64 {
    differences(chi_t, chi_f, chi_r.matrix()).iter().map(spectral_norm2).sum()
}

struct Problem {
    /// ε_T(ρ_k).
    base: [Mat2; 6],
    /// ε_F(σ_i ρ_k σ_j†) at index 4i + j; D_k = base_k − Σ χ_ij maps_k[4i+j].
    maps: [[Mat2; 16]; 6],
    terms: [[Mat2; 4]; 4],
}

/// Lower-triangular T from the 16 real parameters.
fn lower(x: &DVector<f64>) -> Mat4 {
    let mut t = Mat4::zeros();
    for i in 0..4 {
        t[(i, i)] = cr(x[i]);
    }
    let mut k = 4;
    for r in 1..4 {
        for c in 0..r {
            t[(r, c)] = C64::new(x[k], x[k + 1]);
            k += 2;
        }
    }
    t
}

/// ∂T/∂x_p.
fn lower_unit(p: usize) -> Mat4 {
    let mut e = Mat4::zeros();
    if p < 4 {
        e[(p, p)] = cr(1.0);
        return e;
    }
    let mut k = 4;
    for r in 1..4 {
        for c in 0..r {
            if p == k {
                e[(r, c)] = cr(1.0);
            } else if p == k + 1 {
                e[(r, c)] = C64::new(0.0, 1.0);
            }
            k += 2;
        }
    }
    e
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

fn push_hermitian(out: &mut Vec<f64>, d: &Mat2, w: f64) {
    out.extend([d[(0, 0)].re * w, d[(1, 1)].re * w, SQRT2 * d[(0, 1)].re * w, SQRT2 * d[(0, 1)].im * w]);
}

impl Problem {
    fn new(chi_t: &ProcessMatrix, chi_f: &ProcessMatrix) -> Self {
        let s = pauli_basis();
        let rhos = fiducials();
        Problem {
            base: rhos.map(|rho| chi_t.apply_raw(&rho)),
            maps: rhos.map(|rho| {
                std::array::from_fn(|ij| chi_f.apply_raw(&(s[ij / 4] * rho * s[ij % 4].adjoint())))
            }),
            terms: std::array::from_fn(|i| std::array::from_fn(|j| s[j] * s[i])),
        }
    }

    fn chi(&self, x: &DVector<f64>) -> (Mat4, f64) {
        let t = lower(x);
        let a = t.adjoint() * t;
        let tau = a.trace().re;
        (a / cr(tau), tau)
    }

    fn differences(&self, chi: &Mat4) -> [Mat2; 6] {
        std::array::from_fn(|k| {
            let mut d = self.base[k];
            for (ij, m) in self.maps[k].iter().enumerate() {
                d -= m * chi[(ij / 4, ij % 4)];
            }
            d
        })
    }

    fn tp_residual(&self, chi: &Mat4) -> Mat2 {
        let mut r = -Mat2::identity();
        for i in 0..4 {
            for j in 0..4 {
                r += self.terms[i][j] * chi[(i, j)];
            }
        }
        r
    }

    /// Hermitian entries (a, d, √2 Re b, √2 Im b) so that the squared
    /// residual norm equals the squared Frobenius norm.
    fn residuals(&self, x: &DVector<f64>, weights: &[f64; 6], tp_weight: f64, shift: &Mat2) -> DVector<f64> {
        let (chi, tau) = self.chi(x);
        let mut out = Vec::with_capacity(24 + 8 + 1);
        for (d, &w) in self.differences(&chi).iter().zip(weights) {
            push_hermitian(&mut out, d, w);
        }
        let r = self.tp_residual(&chi) + shift;
        let sw = tp_weight.sqrt();
        for v in r.iter() {
            out.extend([v.re * sw, v.im * sw]);
        }
        out.push(tau - 1.0);
        DVector::from_vec(out)
    }

    fn jacobian(&self, x: &DVector<f64>, weights: &[f64; 6], tp_weight: f64) -> DMatrix<f64> {
        let t = lower(x);
        let a = t.adjoint() * t;
        let tau = a.trace().re;
        let chi = a / cr(tau);
        let sw = tp_weight.sqrt();
        let mut j = DMatrix::zeros(33, 16);
        let mut col = Vec::with_capacity(33);
        for p in 0..16 {
            let e = lower_unit(p);
            let da = e.adjoint() * t + t.adjoint() * e;
            let dtau = da.trace().re;
            let dchi = (da - chi * cr(dtau)) / cr(tau);
            col.clear();
            for (k, &w) in weights.iter().enumerate() {
                let mut dd = Mat2::zeros();
                for (ij, m) in self.maps[k].iter().enumerate() {
                    dd -= m * dchi[(ij / 4, ij % 4)];
                }
                push_hermitian(&mut col, &dd, w);
            }
            let mut dr = Mat2::zeros();
            for i in 0..4 {
                for jj in 0..4 {
                    dr += self.terms[i][jj] * dchi[(i, jj)];
                }
            }
            for v in dr.iter() {
                col.extend([v.re * sw, v.im * sw]);
            }
            col.push(dtau);
            j.set_column(p, &DVector::from_column_slice(&col));
        }
        j
    }

    /// Weighted least squares with the trace-preserving penalty, driving the
    /// residual below tolerance by shift updates.
    fn fit(&self, x0: DVector<f64>, weights: &[f64; 6], opts: &DeconvolveOptions, max_iter: usize) -> (Minimum, usize) {
        let lm = LmOptions { max_iter, cost_tol: 1e-28, ..Default::default() };
        let run = |x: DVector<f64>, w: f64, shift: &Mat2| {
            levenberg_marquardt_with_jacobian(
                |x| self.residuals(x, weights, w, shift),
                |x, _| self.jacobian(x, weights, w),
                x,
                &lm,
            )
        };
        let mut tp_weight = opts.initial_tp_weight;
        let mut shift = Mat2::zeros();
        let mut m = run(x0, tp_weight, &shift);
        let mut iterations = m.iterations;
        let mut prev = f64::INFINITY;
        for _ in 0..60 {
            let r = self.tp_residual(&self.chi(&m.x).0);
            if r.norm() < opts.tp_tol {
                break;
            }
            shift += r;
            if r.norm() > 0.25 * prev {
                tp_weight *= 100.0;
                shift /= cr(100.0);
            }
            prev = r.norm();
            m = run(m.x, tp_weight, &shift);
            iterations += m.iterations;
        }
        (m, iterations)
    }

    fn solve(&self, x0: DVector<f64>, opts: &DeconvolveOptions) -> (Minimum, f64, usize) {
        let (m, iterations) = self.fit(x0, &[1.0; 6], opts, opts.max_iter);
        let cost = self.cost(&m.x);
        (m, cost, iterations)
    }

    /// Reweights the six inputs by 1/√‖D_k‖ so the squared residual tracks
    /// the sum of norms.
    fn refine(&self, mut best: (Minimum, f64, usize), opts: &DeconvolveOptions) -> (Minimum, f64, usize) {
        for _ in 0..opts.irls_rounds {
            if best.1 < EXACT_COST {
                break;
            }
            let d = self.differences(&self.chi(&best.0.x).0);
            let weights = d.map(|dk| 1.0 / spectral_norm2(&dk).max(1e-9).sqrt());
            let (next, it) = self.fit(best.0.x.clone(), &weights, opts, opts.max_iter.min(500));
            best.2 += it;
            let c = self.cost(&next.x);
            let tp = self.tp_residual(&self.chi(&next.x).0).norm();
            if !(c < best.1 && tp < opts.tp_tol) {
                break;
            }
            best = (next, c, best.2);
        }
        best
    }

    fn cost(&self, x: &DVector<f64>) -> f64 {
        self.differences(&self.chi(x).0).iter().map(spectral_norm2).sum()
    }
}

fn start_point(chi_t: &ProcessMatrix, seed: u64, index: usize) -> Result<DVector<f64>> {
    if index == 0 {
        let p = TriangularParams::from_psd(&to_dynamic4(chi_t.matrix()))?;
        return Ok(DVector::from_vec(p.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut x = DVector::from_fn(16, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    for i in 0..4 {
        x[i] = x[i].abs() + 0.1;
    }
    let n = x.norm();
    Ok(x / n)
}

/// Finds the trace-preserving χ_R with ε_T ≈ ε_F ∘ ε_R. The first start is
/// χ_T itself; the rest are random.
pub fn deconvolve_fiber(
    chi_t: &ProcessMatrix,
    chi_f: &ProcessMatrix,
    opts: &DeconvolveOptions,
) -> Result<ReconstructionReport<ProcessMatrix>> {
    if opts.restarts == 0 {
        return Err(Error::Usage("need at least one restart".into()));
    }
    let problem = Problem::new(chi_t, chi_f);
    let first = problem.solve(start_point(chi_t, opts.seed, 0)?, opts);
    // A vanishing cost is the global minimum; further starts cannot improve it.
    let mut runs = vec![first];
    let mut restarts = 1;
    if runs[0].1 > EXACT_COST {
        let starts: Vec<DVector<f64>> =
            (1..opts.restarts).map(|k| start_point(chi_t, opts.seed, k)).collect::<Result<_>>()?;
        restarts = opts.restarts;
        runs.extend(starts.into_par_iter().map(|x0| problem.solve(x0, opts)).collect::<Vec<_>>());
    }
    let others: usize = runs.iter().map(|r| r.2).sum();
    let best = runs
        .into_iter()
        .filter(|r| r.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Analysis("deconvolution produced no finite cost".into()))?;
    let own = best.2;
    let (best, cost, refined) = problem.refine(best, opts);
    let iterations = others + refined - own;
    let (chi, _) = problem.chi(&best.x);
    let estimate = ProcessMatrix::from_unnormalized(&chi)?;
    let tp = problem.tp_residual(estimate.matrix()).norm();
    Ok(ReconstructionReport {
        estimate,
        log_likelihood: None,
        cost: Some(cost),
        iterations,
        converged: cost <= opts.cost_threshold && tp < opts.tp_tol,
        restarts,
        tp_residual: Some(tp),
        penalty_weight: None,
        fidelity_to_target: None,
        seed: opts.seed,
    })
}
