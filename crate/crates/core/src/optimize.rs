//! Unconstrained local optimizers used by the reconstructions.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 5000, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// BFGS with an Armijo backtracking line search. `f` returns the value and
/// gradient; a non-finite value marks an infeasible point.
pub fn bfgs<F>(f: F, x0: DVector<f64>, opts: &BfgsOptions) -> Minimum
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if !fx.is_finite() {
            break;
        }
        if g.norm() < opts.grad_tol {
            return Minimum { grad_norm: g.norm(), x, value: fx, iterations, converged: true };
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = -g.norm_squared();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * step;
            let (fnew, gnew) = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            // No descent possible at machine precision.
            let gn = g.norm();
            return Minimum { converged: gn < opts.grad_tol.sqrt(), grad_norm: gn, x, value: fx, iterations };
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            if iterations == 1 {
                h *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * ((1.0 + rho * yhy) * rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = xn;
        fx = fnew;
        g = gnew;
    }
    let gn = g.norm();
    Minimum { converged: gn < opts.grad_tol, grad_norm: gn, x, value: fx, iterations }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop once ½‖r‖² falls below this.
    pub cost_tol: f64,
    /// Stop once a step changes every parameter by less than this (relative).
    pub step_tol: f64,
    /// Stop after 25 consecutive steps that each lower the cost by less than
    /// this fraction.
    pub stall_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iter: 2000, cost_tol: 1e-30, step_tol: 1e-15, stall_tol: 1e-6 }
    }
}

fn jacobian<F>(r: &F, x: &DVector<f64>, r0: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut j = DMatrix::zeros(r0.len(), x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let h = 1e-7 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let rp = r(&xp);
        xp[k] = x[k] - h;
        let rm = r(&xp);
        xp[k] = x[k];
        j.set_column(k, &((rp - rm) / (2.0 * h)));
    }
    j
}

/// Levenberg–Marquardt on ½‖r(x)‖² with a central-difference Jacobian.
pub fn levenberg_marquardt<F>(r: F, x0: DVector<f64>, opts: &LmOptions) -> Minimum
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    levenberg_marquardt_with_jacobian(&r, |x, r0| jacobian(&r, x, r0), x0, opts)
}

/// Levenberg–Marquardt with a caller-supplied Jacobian `jac(x, r(x))`.
pub fn levenberg_marquardt_with_jacobian<F, J>(r: F, jac: J, x0: DVector<f64>, opts: &LmOptions) -> Minimum
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64>,
{
    let mut x = x0;
    let mut res = r(&x);
    let mut cost = 0.5 * res.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut stalled = 0;
    while iterations < opts.max_iter && cost > opts.cost_tol {
        iterations += 1;
        let j = jac(&x, &res);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &res;
        grad_norm = g.norm();
        let mut moved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let xn = &x + &step;
            let rn = r(&xn);
            let cn = 0.5 * rn.norm_squared();
            if cn.is_finite() && cn < cost {
                let small = step.iter().zip(x.iter()).all(|(s, v)| s.abs() <= opts.step_tol * (1.0 + v.abs()));
                stalled = if cost - cn < opts.stall_tol * cost { stalled + 1 } else { 0 };
                x = xn;
                res = rn;
                cost = cn;
                lambda = (lambda / 3.0).max(1e-15);
                moved = !small && stalled < 25;
                break;
            }
            lambda *= 4.0;
        }
        if !moved {
            break;
        }
    }
    let converged = cost <= opts.cost_tol || grad_norm < 1e-12;
    Minimum { x, value: cost, grad_norm, iterations, converged }
}
