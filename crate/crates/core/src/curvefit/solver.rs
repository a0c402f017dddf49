//! Bound-constrained nonlinear least squares.
//!
//! Levenberg-Marquardt trust region on column-scaled Jacobians. Steps that
//! leave the feasible box are reflected back off the violated bound, and
//! variables pinned at a bound whose gradient points outward are frozen for
//! the iteration.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquaresProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;
    fn residuals(&self, x: &[f64], out: &mut [f64]);
    /// Row-major: `out[(i, j)] = d r_i / d x_j`.
    fn jacobian(&self, x: &[f64], out: &mut DMatrix<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Mirrors out-of-box coordinates back across the violated bound.
    fn reflect(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            if *v > *hi {
                *v = *hi - (*v - *hi);
            } else if *v < *lo {
                *v = *lo + (*lo - *v);
            }
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iter: usize,
    pub xtol: f64,
    pub ftol: f64,
    pub gtol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iter: 500,
            xtol: 1e-10,
            ftol: 1e-10,
            gtol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ZeroResidual,
    SmallStep,
    SmallReduction,
    SmallGradient,
    MaxIterations,
    NonFinite,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::NonFinite)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    /// Sum of squared residuals at `x`.
    pub ssr: f64,
    pub iterations: usize,
    pub termination: Termination,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Minimizes the sum of squared residuals of `problem` inside `bounds`,
/// starting from the projection of `x0` onto the box.
pub fn solve<P: LeastSquaresProblem>(problem: &P, x0: &[f64], bounds: &Bounds, settings: &SolverSettings) -> Solution {
    let n = problem.n_params();
    let m = problem.n_residuals();
    assert_eq!(x0.len(), n, "start vector length");

    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut r = vec![0.0; m];
    problem.residuals(&x, &mut r);
    let mut ssr = sum_sq(&r);
    if !ssr.is_finite() {
        return Solution {
            x,
            ssr,
            iterations: 0,
            termination: Termination::NonFinite,
        };
    }

    let mut jac = DMatrix::zeros(m, n);
    let mut scale = vec![0.0f64; n];
    let mut lam = f64::NAN;
    let mut nu = 2.0;
    let mut r_trial = vec![0.0; m];
    let mut x_trial = vec![0.0; n];
    let mut projected = vec![0.0; n];
    let mut r_alt = vec![0.0; m];

    for iter in 0..settings.max_iter {
        if ssr == 0.0 {
            return Solution {
                x,
                ssr,
                iterations: iter,
                termination: Termination::ZeroResidual,
            };
        }
        problem.jacobian(&x, &mut jac);
        if jac.iter().any(|v| !v.is_finite()) {
            return Solution {
                x,
                ssr,
                iterations: iter,
                termination: Termination::NonFinite,
            };
        }
        let rv = DVector::from_column_slice(&r);
        let grad = jac.transpose() * &rv;
        let r_norm = ssr.sqrt();

        let mut scaled = jac.clone();
        let mut max_cos = 0.0f64;
        for j in 0..n {
            let col_norm = jac.column(j).norm();
            scale[j] = scale[j].max(col_norm);
            if scale[j] == 0.0 {
                scale[j] = 1.0;
            }
            let pinned_low = x[j] <= bounds.lower[j] && grad[j] > 0.0;
            let pinned_high = x[j] >= bounds.upper[j] && grad[j] < 0.0;
            if pinned_low || pinned_high {
                scaled.column_mut(j).fill(0.0);
                continue;
            }
            scaled.column_mut(j).scale_mut(1.0 / scale[j]);
            if col_norm > 0.0 {
                max_cos = max_cos.max(grad[j].abs() / (col_norm * r_norm));
            }
        }
        if max_cos <= settings.gtol {
            return Solution {
                x,
                ssr,
                iterations: iter,
                termination: Termination::SmallGradient,
            };
        }

        let svd = scaled.clone().svd(true, true);
        let (u, v_t) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
        let sigma = &svd.singular_values;
        let utr = u.transpose() * &rv;
        if lam.is_nan() {
            lam = 1e-3 * sigma.max().powi(2).max(f64::MIN_POSITIVE);
        }
        let x_norm: f64 = x.iter().zip(&scale).map(|(v, d)| (v * d).powi(2)).sum::<f64>().sqrt();

        loop {
            // z = -sum_i sigma_i / (sigma_i^2 + lambda) (u_i . r) v_i
            let mut z = DVector::zeros(n);
            for i in 0..sigma.len() {
                let s = sigma[i];
                if s == 0.0 {
                    continue;
                }
                let coef = -s / (s * s + lam) * utr[i];
                z.axpy(coef, &v_t.row(i).transpose(), 1.0);
            }
            for j in 0..n {
                x_trial[j] = x[j] + z[j] / scale[j];
            }
            projected.copy_from_slice(&x_trial);
            bounds.project(&mut projected);
            bounds.reflect(&mut x_trial);
            problem.residuals(&x_trial, &mut r_trial);
            let mut ssr_trial = sum_sq(&r_trial);
            if projected != x_trial {
                // The reflected point may bounce away from an optimum that
                // lies on the bound; keep whichever candidate is better.
                problem.residuals(&projected, &mut r_alt);
                let ssr_alt = sum_sq(&r_alt);
                if ssr_alt.is_finite() && (ssr_trial.is_nan() || ssr_trial > ssr_alt) {
                    x_trial.copy_from_slice(&projected);
                    std::mem::swap(&mut r_trial, &mut r_alt);
                    ssr_trial = ssr_alt;
                }
            }
            let step: Vec<f64> = x_trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let step_norm: f64 = step.iter().zip(&scale).map(|(s, d)| (s * d).powi(2)).sum::<f64>().sqrt();

            let predicted_r = &rv + &jac * DVector::from_column_slice(&step);
            let predicted = ssr - predicted_r.norm_squared();
            let actual = ssr - ssr_trial;
            let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };

            if ssr_trial.is_finite() && actual > 0.0 && rho > 1e-4 {
                let ssr_old = ssr;
                x.copy_from_slice(&x_trial);
                std::mem::swap(&mut r, &mut r_trial);
                ssr = ssr_trial;
                lam *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                if step_norm <= settings.xtol * (x_norm + settings.xtol) {
                    return Solution {
                        x,
                        ssr,
                        iterations: iter + 1,
                        termination: Termination::SmallStep,
                    };
                }
                if actual <= settings.ftol * ssr_old && predicted <= settings.ftol * ssr_old {
                    return Solution {
                        x,
                        ssr,
                        iterations: iter + 1,
                        termination: Termination::SmallReduction,
                    };
                }
                break;
            }

            if step_norm <= settings.xtol * (x_norm + settings.xtol) {
                return Solution {
                    x,
                    ssr,
                    iterations: iter + 1,
                    termination: Termination::SmallStep,
                };
            }
            lam *= nu;
            nu *= 2.0;
            if !lam.is_finite() {
                return Solution {
                    x,
                    ssr,
                    iterations: iter + 1,
                    termination: Termination::SmallStep,
                };
            }
        }
    }

    Solution {
        x,
        ssr,
        iterations: settings.max_iter,
        termination: Termination::MaxIterations,
    }
}
