//! Quasi-Newton minimization with finite-difference derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfgsOptions {
    /// Stop once `‖∇f‖∞ ≤ grad_tol · max(1, |f|)`.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Relative finite-difference step: `h = fd_step · (1 + |x|)`.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-5,
            max_iters: 500,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    Converged,
    MaxIterations,
    /// No step along the search direction decreases the objective.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub status: OptimStatus,
    /// Objective value after every accepted step, starting with `f(x0)`.
    pub history: Vec<f64>,
}

impl OptimResult {
    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

/// Central-difference gradient, falling back to a one-sided difference
/// when one of the two probes is infeasible.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], fx: f64, rel_step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - fx) / h,
                (false, true) => (fx - fm) / h,
                (false, false) => f64::NAN,
            }
        })
        .collect()
}

/// Central-difference Hessian.
pub fn fd_hessian<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel_step * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut probe = x.to_vec();
    let mut eval = |shifts: &[(usize, f64)]| {
        for &(i, s) in shifts {
            probe[i] = x[i] + s;
        }
        let v = f(&probe);
        for &(i, _) in shifts {
            probe[i] = x[i];
        }
        v
    };
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let fp = eval(&[(i, h[i])]);
        let fm = eval(&[(i, -h[i])]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = eval(&[(i, h[i]), (j, h[j])]);
            let fpm = eval(&[(i, h[i]), (j, -h[j])]);
            let fmp = eval(&[(i, -h[i]), (j, h[j])]);
            let fmm = eval(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Minimizes `f` from `x0` with BFGS and a backtracking Armijo line search.
/// `f` may return a non-finite value to reject a point.
pub fn minimize<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<OptimResult> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::Optimizer("no free parameters".into()));
    }
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    if !fx.is_finite() {
        return Err(Error::Optimizer("objective is not finite at the starting point".into()));
    }
    let mut g = DVector::from_vec(fd_gradient(&mut f, x.as_slice(), fx, opts.fd_step));
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first_step = true;
    let mut history = vec![fx];
    let converged = |g: &DVector<f64>, fx: f64| g.amax() <= opts.grad_tol * fx.abs().max(1.0);

    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        if g.iter().any(|v| !v.is_finite()) {
            status = OptimStatus::Stalled;
            break;
        }
        if converged(&g, fx) {
            status = OptimStatus::Converged;
            break;
        }
        let mut d = -(&h_inv * &g);
        let mut slope = d.dot(&g);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(n, n);
            d = -g.clone();
            slope = d.dot(&g);
        }
        let mut accepted = None;
        for attempt in 0..2 {
            let mut t = 1.0;
            for _ in 0..60 {
                let xn = &x + t * &d;
                let fnew = f(xn.as_slice());
                if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                    accepted = Some((xn, fnew));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() || attempt == 1 {
                break;
            }
            // retry along steepest descent with a fresh curvature estimate
            h_inv = DMatrix::identity(n, n);
            d = -g.clone() / g.norm().max(1.0);
            slope = d.dot(&g);
        }
        let Some((xn, fnew)) = accepted else {
            status = OptimStatus::Stalled;
            break;
        };
        iterations += 1;
        let gn = DVector::from_vec(fd_gradient(&mut f, xn.as_slice(), fnew, opts.fd_step));
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_step {
                h_inv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first_step = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H⁺ = H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h_inv -= rho * (&hy * s.transpose() + &s * hy.transpose());
            h_inv += (rho * rho * yhy + rho) * (&s * s.transpose());
        }
        let stalled = (fx - fnew).abs() <= 1e-15 * fx.abs().max(1.0) && s.amax() <= 1e-14 * (1.0 + x.amax());
        x = xn;
        fx = fnew;
        g = gn;
        history.push(fx);
        if stalled && !converged(&g, fx) {
            status = OptimStatus::Stalled;
            break;
        }
    }
    if status == OptimStatus::MaxIterations && converged(&g, fx) {
        status = OptimStatus::Converged;
    }
    Ok(OptimResult {
        x: x.as_slice().to_vec(),
        f: fx,
        grad: g.as_slice().to_vec(),
        iterations,
        status,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn minimizes_rosenbrock() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert_eq!(r.status, OptimStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn quadratic_hessian() {
        let mut f = |x: &[f64]| 3.0 * x[0] * x[0] + x[0] * x[1] + 2.0 * x[1] * x[1];
        let h = fd_hessian(&mut f, &[0.3, -0.2], 1e-4);
        let expect = DMatrix::from_row_slice(2, 2, &[6.0, 1.0, 1.0, 4.0]);
        assert!((h - expect).abs().max() < 1e-6);
    }

    #[test]
    fn respects_infeasible_region() {
        // minimum of x − 2 ln x at x = 2, undefined for x ≤ 0
        let f = |x: &[f64]| if x[0] <= 0.0 { f64::INFINITY } else { x[0] - 2.0 * x[0].ln() };
        let r = minimize(f, &[0.1], &BfgsOptions::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn iteration_cap_reported() {
        let opts = BfgsOptions {
            max_iters: 2,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert_eq!(r.status, OptimStatus::MaxIterations);
        assert_eq!(r.iterations, 2);
    }
}
