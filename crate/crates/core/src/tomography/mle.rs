//! Maximum-likelihood reconstruction of ρ and χ.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{projector, ReconstructionReport, TomographyDataset, TriangularParams};
use crate::error::{Error, Result};
use crate::optimize::{bfgs, BfgsOptions, Minimum};
use crate::polmath::{cr, pauli_basis, DensityMatrix2, Mat2, Mat4, ProcessMatrix, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Enforce Σ χ_ij σ_j σ_i = I (process tomography only).
    pub trace_preserving: bool,
    pub initial_penalty: f64,
    /// Factor applied to the penalty weight while the TP residual is too large.
    pub penalty_growth: f64,
    pub tp_tol: f64,
    pub seed: u64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            restarts: 8,
            max_iter: 5000,
            grad_tol: 1e-8,
            trace_preserving: true,
            initial_penalty: 1.0,
            penalty_growth: 100.0,
            tp_tol: 1e-6,
            seed: 0,
        }
    }
}

/// One measurement setting: p = tr(X·B) for the estimated X (ρ or χ).
struct Setting {
    b: DMatrix<C64>,
    counts: f64,
    shots: f64,
}

struct Objective {
    dim: usize,
    settings: Vec<Setting>,
    total_shots: f64,
    /// σ_j σ_i for the TP operator, indexed [i][j].
    tp_terms: Option<[[Mat2; 4]; 4]>,
    penalty: f64,
    /// Accumulated residual shift U of the penalty w‖R + U‖².
    shift: Mat2,
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

impl Objective {
    fn estimate(&self, t: &DMatrix<C64>) -> (DMatrix<C64>, f64) {
        let a = t.adjoint() * t;
        let tau = a.trace().re;
        (a / cr(tau), tau)
    }

    fn probability(x: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        let d = x.nrows();
        let mut p = 0.0;
        for i in 0..d {
            for j in 0..d {
                p += (x[(i, j)] * b[(j, i)]).re;
            }
        }
        p
    }

    /// Per-shot log-likelihood.
    fn log_likelihood(&self, x: &DMatrix<C64>) -> f64 {
        let mut ll = 0.0;
        for s in &self.settings {
            let p = Self::probability(x, &s.b).clamp(1e-300, 1.0 - 1e-16);
            ll += xlogy(s.counts, p) + xlogy(s.shots - s.counts, 1.0 - p);
        }
        ll / self.total_shots
    }

    fn tp_residual(&self, x: &DMatrix<C64>) -> Option<Mat2> {
        let terms = self.tp_terms.as_ref()?;
        let mut r = -Mat2::identity();
        for i in 0..4 {
            for j in 0..4 {
                r += terms[i][j] * x[(i, j)];
            }
        }
        Some(r)
    }

    /// Value and gradient over the real parameter vector.
    fn eval(&self, params: &DVector<f64>) -> (f64, DVector<f64>) {
        let d = self.dim;
        let t = TriangularParams(params.as_slice().to_vec()).to_matrix().expect("fixed length");
        let (x, tau) = self.estimate(&t);
        let mut grad = DVector::zeros(params.len());
        if !(tau > 0.0) {
            return (f64::INFINITY, grad);
        }
        // Binomial deviance relative to the saturated model.
        let mut f = 0.0;
        let mut g = DMatrix::<C64>::zeros(d, d);
        for s in &self.settings {
            let p = Self::probability(&x, &s.b);
            let (n, m) = (s.counts, s.shots - s.counts);
            if (p <= 0.0 && n > 0.0) || (p >= 1.0 && m > 0.0) {
                return (f64::INFINITY, grad);
            }
            let fr = n / s.shots;
            f -= xlogy(n, p / fr) + if m > 0.0 { m * ((1.0 - p) / (1.0 - fr)).ln() } else { 0.0 };
            let mut dfdp = 0.0;
            if n > 0.0 {
                dfdp -= n / p;
            }
            if m > 0.0 {
                dfdp += m / (1.0 - p);
            }
            g += &s.b * cr(dfdp / self.total_shots);
        }
        f /= self.total_shots;
        if let (Some(r), Some(terms)) = (self.tp_residual(&x), self.tp_terms.as_ref()) {
            let r = r + self.shift;
            f += self.penalty * r.norm_squared();
            for i in 0..4 {
                for j in 0..4 {
                    g[(j, i)] += (r * terms[i][j]).trace() * (2.0 * self.penalty);
                }
            }
        }
        f += (tau - 1.0).powi(2);
        // df = 2 Re tr(G' T† dT) with G' = (G − tr(Gχ)) / τ.
        let gx = (0..d).map(|i| (0..d).map(|j| g[(i, j)] * x[(j, i)]).sum::<C64>()).sum::<C64>();
        let gp = (g - DMatrix::identity(d, d) * gx) / cr(tau);
        let mm = gp * t.adjoint();
        let gauge = 4.0 * (tau - 1.0);
        for a in 0..d {
            grad[a] = 2.0 * mm[(a, a)].re + gauge * t[(a, a)].re;
        }
        let mut k = d;
        for r in 1..d {
            for c in 0..r {
                grad[k] = 2.0 * mm[(c, r)].re + gauge * t[(r, c)].re;
                grad[k + 1] = -2.0 * mm[(c, r)].im + gauge * t[(r, c)].im;
                k += 2;
            }
        }
        (f, grad)
    }
}

fn start_point(dim: usize, seed: u64, index: usize) -> DVector<f64> {
    let n = dim * dim;
    let mut x = DVector::zeros(n);
    if index == 0 {
        // Maximally mixed estimate with τ = 1.
        for i in 0..dim {
            x[i] = 1.0 / (dim as f64).sqrt();
        }
        return x;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for i in 0..n {
        x[i] = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5;
    }
    for i in 0..dim {
        x[i] = x[i].abs() + 0.1;
    }
    let norm = x.norm();
    x / norm
}

/// Pulls an infeasible start toward the maximally mixed point.
fn feasible_start(obj: &Objective, x: DVector<f64>) -> DVector<f64> {
    let mm = start_point(obj.dim, 0, 0);
    let mut w = 1.0;
    loop {
        let cand = &x * w + &mm * (1.0 - w);
        if obj.eval(&cand).0.is_finite() || w < 1e-6 {
            return cand;
        }
        w *= 0.5;
    }
}

struct Fit {
    estimate: DMatrix<C64>,
    min: Minimum,
    log_likelihood: f64,
    tp_residual: Option<f64>,
    penalty: Option<f64>,
    iterations: usize,
}

fn run(mut obj: Objective, opts: &MleOptions) -> Result<Fit> {
    if opts.restarts == 0 {
        return Err(Error::Usage("need at least one restart".into()));
    }
    obj.penalty = opts.initial_penalty;
    let bopts = BfgsOptions { max_iter: opts.max_iter, grad_tol: opts.grad_tol };
    let runs: Vec<Minimum> = (0..opts.restarts)
        .into_par_iter()
        .map(|k| {
            let x0 = feasible_start(&obj, start_point(obj.dim, opts.seed, k));
            bfgs(|x| obj.eval(x), x0, &bopts)
        })
        .collect();
    let mut iterations: usize = runs.iter().map(|m| m.iterations).sum();
    let mut best = runs
        .into_iter()
        .filter(|m| m.value.is_finite())
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or_else(|| Error::Analysis("every restart ended at an infeasible point".into()))?;
    let residual = |obj: &Objective, x: &DVector<f64>| {
        let t = TriangularParams(x.as_slice().to_vec()).to_matrix().expect("fixed length");
        obj.tp_residual(&obj.estimate(&t).0).map(|r| r.norm())
    };
    if obj.tp_terms.is_some() {
        // Shift updates drive R to zero at a fixed weight; the weight grows
        // only when the residual stops shrinking fast enough.
        let mut prev = f64::INFINITY;
        for _ in 0..60 {
            let r = tp_matrix(&obj, &best.x);
            let norm = r.norm();
            if norm < opts.tp_tol {
                break;
            }
            obj.shift += r;
            if norm > 0.25 * prev {
                // Keep the implied multiplier 2wU fixed.
                obj.penalty *= opts.penalty_growth;
                obj.shift /= cr(opts.penalty_growth);
            }
            prev = norm;
            let next = bfgs(|x| obj.eval(x), best.x.clone(), &bopts);
            iterations += next.iterations;
            best = next;
        }
    }
    let t = TriangularParams(best.x.as_slice().to_vec()).to_matrix()?;
    let (estimate, _) = obj.estimate(&t);
    Ok(Fit {
        log_likelihood: obj.log_likelihood(&estimate),
        tp_residual: residual(&obj, &best.x),
        penalty: obj.tp_terms.as_ref().map(|_| obj.penalty),
        estimate,
        min: best,
        iterations,
    })
}

fn tp_matrix(obj: &Objective, x: &DVector<f64>) -> Mat2 {
    let t = TriangularParams(x.as_slice().to_vec()).to_matrix().expect("fixed length");
    obj.tp_residual(&obj.estimate(&t).0).unwrap_or_else(Mat2::zeros)
}

fn tp_terms() -> [[Mat2; 4]; 4] {
    let s = pauli_basis();
    std::array::from_fn(|i| std::array::from_fn(|j| s[j] * s[i]))
}

pub fn mle_process_tomography(
    data: &TomographyDataset,
    opts: &MleOptions,
) -> Result<ReconstructionReport<ProcessMatrix>> {
    data.require_process()?;
    let s = pauli_basis();
    let settings = data
        .records
        .iter()
        .map(|r| {
            let rho = r.input_label.jones().density();
            let pi = projector(r.projector_label);
            let m = Mat4::from_fn(|i, j| (pi * s[i] * rho.matrix() * s[j]).trace());
            Setting { b: DMatrix::from_fn(4, 4, |a, b| m[(b, a)]), counts: r.counts, shots: r.shots }
        })
        .collect();
    let obj = Objective {
        dim: 4,
        settings,
        total_shots: data.records.iter().map(|r| r.shots).sum(),
        tp_terms: opts.trace_preserving.then(tp_terms),
        penalty: 0.0,
        shift: Mat2::zeros(),
    };
    let fit = run(obj, opts)?;
    let chi = ProcessMatrix::new(Mat4::from_fn(|i, j| fit.estimate[(i, j)]))?;
    let tp_ok = fit.tp_residual.is_none_or(|r| r < opts.tp_tol);
    Ok(ReconstructionReport {
        estimate: chi,
        log_likelihood: Some(fit.log_likelihood),
        cost: None,
        iterations: fit.iterations,
        converged: fit.min.converged && tp_ok,
        restarts: opts.restarts,
        tp_residual: fit.tp_residual.or(Some(chi.tp_residual())),
        penalty_weight: fit.penalty,
        fidelity_to_target: None,
        seed: opts.seed,
    })
}

pub fn mle_state_tomography(
    data: &TomographyDataset,
    opts: &MleOptions,
) -> Result<ReconstructionReport<DensityMatrix2>> {
    data.require_state()?;
    let settings = data
        .records
        .iter()
        .map(|r| {
            let pi = projector(r.projector_label);
            Setting { b: DMatrix::from_fn(2, 2, |a, b| pi[(a, b)]), counts: r.counts, shots: r.shots }
        })
        .collect();
    let obj = Objective {
        dim: 2,
        settings,
        total_shots: data.records.iter().map(|r| r.shots).sum(),
        tp_terms: None,
        penalty: 0.0,
        shift: Mat2::zeros(),
    };
    let fit = run(obj, opts)?;
    let rho = DensityMatrix2::new(Mat2::from_fn(|i, j| fit.estimate[(i, j)]))?;
    Ok(ReconstructionReport {
        estimate: rho,
        log_likelihood: Some(fit.log_likelihood),
        cost: None,
        iterations: fit.iterations,
        converged: fit.min.converged,
        restarts: opts.restarts,
        tp_residual: None,
        penalty_weight: None,
        fidelity_to_target: None,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{random_tp_channel, simulate_state_tomography, simulate_tomography, Sampling};
    use super::*;
    use crate::polmath::{process_fidelity, state_fidelity, Pauli, PolLabel};

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chi = random_tp_channel(&mut rng, 2).unwrap();
        let data = simulate_tomography(&chi, 1000, Sampling::Binomial { seed: 1 }).unwrap();
        let s = pauli_basis();
        let settings = data
            .records
            .iter()
            .map(|r| {
                let rho = r.input_label.jones().density();
                let pi = projector(r.projector_label);
                let m = Mat4::from_fn(|i, j| (pi * s[i] * rho.matrix() * s[j]).trace());
                Setting { b: DMatrix::from_fn(4, 4, |a, b| m[(b, a)]), counts: r.counts, shots: r.shots }
            })
            .collect();
        let obj = Objective { dim: 4, settings, total_shots: 36_000.0, tp_terms: Some(tp_terms()), penalty: 3.0, shift: Mat2::identity() * cr(0.01) };
        let x = feasible_start(&obj, start_point(4, 11, 3));
        assert!(obj.eval(&x).0.is_finite());
        let (_, g) = obj.eval(&x);
        for k in 0..16 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (obj.eval(&xp).0 - obj.eval(&xm).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn exact_data_recovers_pauli_channels() {
        for (p, pauli) in [(0, Pauli::I), (1, Pauli::X)] {
            let chi = ProcessMatrix::pauli_channel(pauli);
            let data = simulate_tomography(&chi, 10_000, Sampling::Analytic).unwrap();
            let rep = mle_process_tomography(&data, &MleOptions::default()).unwrap();
            assert!(rep.estimate.matrix()[(p, p)].re >= 0.9999, "{:?}", rep.estimate);
            assert!(rep.tp_residual.unwrap() < 1e-6);
        }
    }

    #[test]
    fn random_channel_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let chi = random_tp_channel(&mut rng, 3).unwrap();
        let data = simulate_tomography(&chi, 10_000, Sampling::Analytic).unwrap();
        let rep = mle_process_tomography(&data, &MleOptions::default()).unwrap();
        assert!(process_fidelity(&chi, &rep.estimate).unwrap() > 1.0 - 1e-4);
        let noisy = simulate_tomography(&chi, 10_000, Sampling::Binomial { seed: 4 }).unwrap();
        let rep = mle_process_tomography(&noisy, &MleOptions::default()).unwrap();
        assert!(process_fidelity(&chi, &rep.estimate).unwrap() > 0.99);
    }

    #[test]
    fn state_examples() {
        let h = PolLabel::H.jones().density();
        let rep = mle_state_tomography(&simulate_state_tomography(&h, 10_000, Sampling::Analytic).unwrap(), &MleOptions::default()).unwrap();
        assert!(state_fidelity(&h, &rep.estimate).unwrap() > 1.0 - 1e-6);
        let mm = DensityMatrix2::maximally_mixed();
        let rep = mle_state_tomography(&simulate_state_tomography(&mm, 10_000, Sampling::Analytic).unwrap(), &MleOptions::default()).unwrap();
        assert!((rep.estimate.matrix() - mm.matrix()).norm() < 1e-6);
        let d = PolLabel::D.jones().density();
        let mut fids: Vec<f64> = (0..100)
            .map(|seed| {
                let data = simulate_state_tomography(&d, 10_000, Sampling::Binomial { seed }).unwrap();
                let rep = mle_state_tomography(&data, &MleOptions { seed, ..Default::default() }).unwrap();
                state_fidelity(&d, &rep.estimate).unwrap()
            })
            .collect();
        fids.sort_by(f64::total_cmp);
        assert!(fids[50] >= 0.999, "median {}", fids[50]);
    }

    #[test]
    fn incomplete_data_is_rejected() {
        let data = simulate_tomography(&ProcessMatrix::identity(), 100, Sampling::Analytic).unwrap();
        let partial = TomographyDataset { records: data.records[1..].to_vec() };
        assert!(mle_process_tomography(&partial, &MleOptions::default()).is_err());
    }
}
