//! Weighted least-squares sinusoid fitting.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SinusoidModel {
    /// y = A·(1 − V·cos(ωx + φ0))
    Cosine,
    /// y = A·((1 − V)/2 + V·sin²(ωx/2 + φ0))
    SinSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitPoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinusoidFit {
    pub model: SinusoidModel,
    pub amplitude: f64,
    pub visibility: f64,
    pub omega: f64,
    pub phase: f64,
    /// 1σ uncertainties of (amplitude, visibility, omega, phase).
    pub errors: [f64; 4],
    pub covariance: [[f64; 4]; 4],
    pub chi2: f64,
    pub dof: usize,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl SinusoidFit {
    pub fn reduced_chi2(&self) -> f64 {
        if self.dof == 0 {
            f64::NAN
        } else {
            self.chi2 / self.dof as f64
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.model {
            SinusoidModel::Cosine => {
                self.amplitude * (1.0 - self.visibility * (self.omega * x + self.phase).cos())
            }
            SinusoidModel::SinSquared => {
                let s = (0.5 * self.omega * x + self.phase).sin();
                self.amplitude * (0.5 * (1.0 - self.visibility) + self.visibility * s * s)
            }
        }
    }
}

fn cosine(p: &Vector4<f64>, x: f64) -> f64 {
    p[0] * (1.0 - p[1] * (p[2] * x + p[3]).cos())
}

fn cosine_grad(p: &Vector4<f64>, x: f64) -> Vector4<f64> {
    let arg = p[2] * x + p[3];
    let (s, c) = arg.sin_cos();
    Vector4::new(1.0 - p[1] * c, -p[0] * c, p[0] * p[1] * s * x, p[0] * p[1] * s)
}

fn chi2(points: &[FitPoint], p: &Vector4<f64>) -> f64 {
    points.iter().map(|q| ((q.y - cosine(p, q.x)) / q.sigma).powi(2)).sum()
}

/// Best linear fit a + b·cos ωx + c·sin ωx at fixed ω, as (χ², params).
fn linear_at(points: &[FitPoint], omega: f64) -> Option<(f64, Vector4<f64>)> {
    let n = points.len();
    let a = DMatrix::from_fn(n, 3, |i, j| {
        let q = &points[i];
        let v = match j {
            0 => 1.0,
            1 => (omega * q.x).cos(),
            _ => (omega * q.x).sin(),
        };
        v / q.sigma
    });
    let b = DVector::from_fn(n, |i, _| points[i].y / points[i].sigma);
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let r = &a * &sol - &b;
    let (a0, b0, c0) = (sol[0], sol[1], sol[2]);
    if a0 == 0.0 {
        return None;
    }
    let av = (b0 * b0 + c0 * c0).sqrt();
    let phase = c0.atan2(-b0);
    Some((r.norm_squared(), Vector4::new(a0, av / a0, omega, phase)))
}

/// Fits a sinusoid by Levenberg–Marquardt.
///
/// Without `omega_seed` the frequency is located by a grid search over the
/// range the sampling can resolve; with a seed the grid is confined to ±20 %
/// around it.
pub fn sinusoid_fit(
    points: &[FitPoint],
    model: SinusoidModel,
    omega_seed: Option<f64>,
) -> Result<SinusoidFit> {
    if points.len() < 4 {
        return Err(Error::Usage(format!("need at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|q| !(q.sigma > 0.0) || !q.x.is_finite() || !q.y.is_finite()) {
        return Err(Error::Usage("points need finite values and positive uncertainties".into()));
    }
    let (xmin, xmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q.x), b.max(q.x)));
    let span = xmax - xmin;
    if !(span > 0.0) {
        return Err(Error::Usage("points must span a range of x".into()));
    }
    let (lo, hi) = match omega_seed {
        Some(w) if w > 0.0 => (0.8 * w, 1.2 * w),
        Some(w) => return Err(Error::Usage(format!("frequency seed must be positive, got {w}"))),
        None => (std::f64::consts::PI / span, std::f64::consts::PI * points.len() as f64 / span),
    };
    let steps = 400;
    let mut best: Option<(f64, Vector4<f64>)> = None;
    for k in 0..=steps {
        let w = lo + (hi - lo) * k as f64 / steps as f64;
        if let Some(cand) = linear_at(points, w) {
            if best.as_ref().is_none_or(|b| cand.0 < b.0) {
                best = Some(cand);
            }
        }
    }
    let (_, start) = best.ok_or_else(|| {
        Error::Analysis(format!("no usable initial guess for ω in [{lo:.4e}, {hi:.4e}]"))
    })?;
    let (p, iterations) = levenberg_marquardt(points, start).map_err(|e| {
        Error::Analysis(format!(
            "{e}; initial guess A={:.6e} V={:.6e} ω={:.6e} φ0={:.6e}",
            start[0], start[1], start[2], start[3]
        ))
    })?;
    let jtj = normal_matrix(points, &p);
    let cov = jtj.try_inverse().ok_or_else(|| {
        Error::Analysis("singular normal matrix; parameters are not identifiable".into())
    })?;
    let residuals: Vec<f64> = points.iter().map(|q| q.y - cosine(&p, q.x)).collect();
    let chi2 = chi2(points, &p);
    let mut covariance = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            covariance[i][j] = cov[(i, j)];
        }
    }
    let mut errors = [0.0; 4];
    for i in 0..4 {
        errors[i] = cov[(i, i)].max(0.0).sqrt();
    }
    let (mut amplitude, visibility, omega, mut phase) = (p[0], p[1], p[2], p[3]);
    if model == SinusoidModel::SinSquared {
        // A(1 − V cos(ωx + φ)) = 2A·((1 − V)/2 + V sin²(ωx/2 + φ/2))
        amplitude *= 2.0;
        errors[0] *= 2.0;
        phase *= 0.5;
        errors[3] *= 0.5;
        for i in 0..4 {
            let si = [2.0, 1.0, 1.0, 0.5][i];
            for j in 0..4 {
                covariance[i][j] *= si * [2.0, 1.0, 1.0, 0.5][j];
            }
        }
    }
    Ok(SinusoidFit {
        model,
        amplitude,
        visibility,
        omega,
        phase,
        errors,
        covariance,
        chi2,
        dof: points.len().saturating_sub(4),
        residuals,
        iterations,
    })
}

fn normal_matrix(points: &[FitPoint], p: &Vector4<f64>) -> Matrix4<f64> {
    let mut jtj = Matrix4::zeros();
    for q in points {
        let g = cosine_grad(p, q.x) / q.sigma;
        jtj += g * g.transpose();
    }
    jtj
}

fn levenberg_marquardt(
    points: &[FitPoint],
    start: Vector4<f64>,
) -> std::result::Result<(Vector4<f64>, usize), String> {
    let mut p = start;
    let mut cost = chi2(points, &p);
    let mut lambda = 1e-3;
    for it in 1..=500 {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for q in points {
            let g = cosine_grad(&p, q.x) / q.sigma;
            let r = (q.y - cosine(&p, q.x)) / q.sigma;
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            for i in 0..4 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            let trial_cost = chi2(points, &trial);
            if trial_cost <= cost {
                let small = step.iter().zip(p.iter()).all(|(s, v)| s.abs() <= 1e-13 * (1.0 + v.abs()));
                let flat = cost - trial_cost <= 1e-16 * cost.max(1e-300);
                p = trial;
                cost = trial_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if small || (flat && cost < 1e-24) {
                    return Ok((p, it));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            if jtr.norm() <= 1e-8 * (1.0 + cost.sqrt()) || cost < 1e-24 {
                return Ok((p, it));
            }
            return Err(format!("damping diverged at χ² = {cost:.6e}"));
        }
    }
    Err(format!("no convergence in 500 iterations (χ² = {cost:.6e})"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn synth(a: f64, v: f64, w: f64, ph: f64, n: usize, span: f64) -> Vec<FitPoint> {
        (0..n)
            .map(|k| {
                let x = span * k as f64 / (n - 1) as f64;
                FitPoint { x, y: a * (1.0 - v * (w * x + ph).cos()), sigma: 0.01 }
            })
            .collect()
    }

    #[test]
    fn noiseless_round_trip() {
        let pts = synth(2.5, 0.5, 1.3, 0.4, 60, 12.0);
        let f = sinusoid_fit(&pts, SinusoidModel::Cosine, None).unwrap();
        assert_abs_diff_eq!(f.amplitude, 2.5, epsilon = 1e-9);
        assert_abs_diff_eq!(f.visibility, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(f.omega, 1.3, epsilon = 1e-9);
        assert_abs_diff_eq!(f.phase.sin(), 0.4f64.sin(), epsilon = 1e-9);
        assert!(f.chi2 < 1e-12);
    }

    #[test]
    fn seeded_fit_finds_high_frequency() {
        let pts = synth(0.5, 0.968, 8.0, std::f64::consts::PI, 73, std::f64::consts::PI);
        let f = sinusoid_fit(&pts, SinusoidModel::Cosine, Some(8.1)).unwrap();
        assert_abs_diff_eq!(f.visibility, 0.968, epsilon = 1e-9);
        assert_abs_diff_eq!(f.omega, 8.0, epsilon = 1e-9);
    }

    #[test]
    fn sin_squared_half_wave() {
        let u_pi = 960.0;
        let pts: Vec<FitPoint> = (0..49)
            .map(|k| {
                let x = 25.0 * k as f64;
                let y = (std::f64::consts::PI * x / (2.0 * u_pi)).sin().powi(2);
                FitPoint { x, y, sigma: 0.01 }
            })
            .collect();
        let f = sinusoid_fit(&pts, SinusoidModel::SinSquared, None).unwrap();
        assert_abs_diff_eq!(f.visibility, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(std::f64::consts::PI / f.omega, u_pi, epsilon = 1e-6);
        for q in &pts {
            assert_abs_diff_eq!(f.eval(q.x), q.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn bad_inputs() {
        let pts = synth(1.0, 0.5, 1.0, 0.0, 3, 5.0);
        assert!(matches!(sinusoid_fit(&pts, SinusoidModel::Cosine, None), Err(Error::Usage(_))));
        let mut pts = synth(1.0, 0.5, 1.0, 0.0, 10, 5.0);
        pts[0].sigma = 0.0;
        assert!(sinusoid_fit(&pts, SinusoidModel::Cosine, None).is_err());
    }
}
