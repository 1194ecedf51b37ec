//! Small numeric utilities shared across modules: rank decisions on small
//! dense matrices, a damped Gauss-Newton solver, Fornberg finite-difference
//! weights and a fixed-step RK4 stepper.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular matrix in linear solve")]
    Singular,
}

/// Relative singular-value threshold used for all rank decisions.
pub const RANK_REL_TOL: f64 = 1e-8;

/// Numerical rank with the relative threshold `RANK_REL_TOL * sigma_max`.
pub fn numeric_rank(mat: &DMatrix<f64>) -> usize {
    let svals = mat.clone().singular_values();
    let smax = svals.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svals.iter().filter(|&&s| s > RANK_REL_TOL * smax).count()
}

/// Smallest singular value (zero for an empty matrix).
pub fn sigma_min(mat: &DMatrix<f64>) -> f64 {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return 0.0;
    }
    mat.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn condition_number(mat: &DMatrix<f64>) -> f64 {
    let svals = mat.clone().singular_values();
    let smax = svals.iter().cloned().fold(0.0_f64, f64::max);
    let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tolerance: 1e-10,
            max_iterations: 50,
            max_halvings: 30,
        }
    }
}

/// Damped Gauss-Newton on a (possibly non-square) residual. Steps are
/// least-squares/least-norm via SVD, halved on residual increase. Converges
/// on `||r||_inf <= tolerance`, then polishes while the residual keeps
/// improving markedly.
pub fn newton_least_squares<F, J>(
    mut residual: F,
    mut jacobian: J,
    x0: DVector<f64>,
    opts: &NewtonOptions,
) -> Result<DVector<f64>, NumericError>
where
    F: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Option<DMatrix<f64>>,
{
    let mut x = x0;
    let mut r = residual(&x).ok_or(NumericError::Singular)?;
    let mut polishing = false;
    for iteration in 0..opts.max_iterations {
        let norm = r.amax();
        if norm <= opts.tolerance && !polishing {
            polishing = true;
        }
        if norm <= 1e-15 {
            return Ok(x);
        }
        let jac = jacobian(&x).ok_or(NumericError::Singular)?;
        let svd = jac.svd(true, true);
        let step = svd
            .solve(&r, RANK_REL_TOL * svd.singular_values.max())
            .map_err(|_| NumericError::Singular)?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let candidate = &x - &step * scale;
            if let Some(rc) = residual(&candidate) {
                if rc.amax() < norm || norm <= opts.tolerance {
                    let improved = rc.amax() < 0.5 * norm;
                    x = candidate;
                    r = rc;
                    accepted = true;
                    if polishing && !improved {
                        return Ok(x);
                    }
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            if polishing {
                return Ok(x);
            }
            return Err(NumericError::NoConvergence {
                iterations: iteration + 1,
                residual: norm,
            });
        }
    }
    if r.amax() <= opts.tolerance {
        Ok(x)
    } else {
        Err(NumericError::NoConvergence {
            iterations: opts.max_iterations,
            residual: r.amax(),
        })
    }
}

/// Fornberg weights for the `order`-th derivative at `z` from samples at
/// grid locations `x`. Returns one weight per grid point.
pub fn fd_weights(z: f64, x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    assert!(order < n, "need more than `order` sample points");
    let mut c = vec![vec![0.0_f64; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|row| row[order]).collect()
}

/// One fixed-step RK4 step of `x' = f(t, x)`; `f` may fail (solver errors
/// propagate out of the integrator).
pub fn rk4_step<E>(
    f: &mut impl FnMut(f64, &DVector<f64>) -> Result<DVector<f64>, E>,
    t: f64,
    x: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, E> {
    let k1 = f(t, x)?;
    let k2 = f(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)))?;
    let k3 = f(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)))?;
    let k4 = f(t + dt, &(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}
