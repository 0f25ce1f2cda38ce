//! Dense least-squares machinery: SVD-filtered ridge regression and an
//! active-set nonnegative least-squares solver.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Ridge parameter selection for [`RidgeSolver`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RidgeSelect {
    /// Discrete L-curve corner over a log-spaced grid of candidates.
    LCurve,
    /// Fixed value, in units of the largest squared singular value.
    FixedRel(f64),
}

/// SVD-based ridge solver for one design matrix and many right-hand sides.
///
/// Singular values below `cutoff_rel * s_max` are filtered out entirely; if
/// the spectrum collapses further than `fail_rel * s_max`, the system cannot
/// identify all unknowns and the solve fails, naming the smallest singular
/// value.
#[derive(Debug, Clone)]
pub struct RidgeSolver {
    u: DMatrix<f64>,
    vt: DMatrix<f64>,
    singular: DVector<f64>,
    pub s_max: f64,
    pub s_min: f64,
}

impl RidgeSolver {
    pub fn new(x: &DMatrix<f64>, cutoff_rel: f64, fail_rel: f64) -> Result<Self> {
        let svd = x
            .clone()
            .try_svd(true, true, f64::EPSILON, 1000)
            .ok_or_else(|| Error::Numeric("SVD failed to converge".into()))?;
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let singular = svd.singular_values;
        let s_max = singular.iter().cloned().fold(0.0_f64, f64::max);
        let s_min = singular.iter().cloned().fold(f64::INFINITY, f64::min);
        if s_max <= 0.0 || s_min < fail_rel * s_max {
            return Err(Error::IllConditioned {
                sv: s_min,
                cutoff: fail_rel * s_max,
            });
        }
        let mut solver = RidgeSolver {
            u,
            vt,
            singular,
            s_max,
            s_min,
        };
        // Apply the hard cutoff by zeroing filtered directions.
        let cut = cutoff_rel * s_max;
        for s in solver.singular.iter_mut() {
            if *s < cut {
                *s = 0.0;
            }
        }
        Ok(solver)
    }

    /// Solve `min |X b - y|^2 + lambda |b|^2` through the filter factors.
    pub fn solve(&self, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let uty = self.u.transpose() * y;
        let mut coeffs = DVector::zeros(self.singular.len());
        for i in 0..self.singular.len() {
            let s = self.singular[i];
            if s > 0.0 {
                coeffs[i] = s * uty[i] / (s * s + lambda);
            }
        }
        self.vt.transpose() * coeffs
    }

    /// Pick lambda by the discrete L-curve corner over all right-hand sides.
    ///
    /// The corner is the candidate farthest below the chord between the
    /// endpoints of the (log residual, log solution norm) curve; for
    /// effectively consistent systems this lands at the small end, leaving
    /// the fit essentially unregularized.
    pub fn lcurve_lambda(&self, x: &DMatrix<f64>, ys: &[DVector<f64>]) -> f64 {
        let s2 = self.s_max * self.s_max;
        let lambdas: Vec<f64> = (0..25)
            .map(|k| s2 * 10f64.powf(-14.0 + k as f64 * 0.5))
            .collect();
        let mut pts = Vec::with_capacity(lambdas.len());
        for &l in &lambdas {
            let mut res = 0.0;
            let mut norm = 0.0;
            for y in ys {
                let b = self.solve(y, l);
                res += (x * &b - y).norm_squared();
                norm += b.norm_squared();
            }
            pts.push(((res.max(1e-300)).ln(), (norm.max(1e-300)).ln()));
        }
        let (x0, y0) = pts[0];
        let (x1, y1) = pts[pts.len() - 1];
        let chord = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1e-12);
        let mut best = 0;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &(px, py)) in pts.iter().enumerate() {
            // Signed distance below the chord.
            let d = ((x1 - x0) * (y0 - py) - (x0 - px) * (y1 - y0)) / chord;
            if d > best_dist {
                best_dist = d;
                best = i;
            }
        }
        lambdas[best]
    }
}

/// Nonnegative least squares `min |A x - b|` s.t. `x >= 0`, by the
/// active-set method. Returns the solution and the residual norm.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let atb = a.transpose() * b;
    let scale = atb.amax().max(1e-300);
    nnls_with_tol(a, b, 1e-12 * scale)
}

/// [`nnls`] with an explicit dual-feasibility tolerance. Callers mixing rows
/// of very different scales (penalty rows next to data rows) must anchor the
/// tolerance to the part that carries the information, or the solver stops
/// as soon as the loud rows are satisfied.
pub fn nnls_with_tol(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, f64)> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::invalid("nnls: empty problem"));
    }
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let atb = a.transpose() * b;

    let max_outer = 3 * n + 30;
    let mut outer = 0;
    loop {
        outer += 1;
        if outer > max_outer {
            return Err(Error::Numeric("nnls: iteration cap reached".into()));
        }
        // Dual vector w = A^T (b - A x).
        let w = &atb - a.transpose() * (a * &x);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                if best.map(|(_, v)| w[j] > v).unwrap_or(true) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((enter, _)) = best else {
            let residual = (a * &x - b).norm();
            return Ok((x, residual));
        };
        passive[enter] = true;

        // Inner loop: solve on the passive set, stepping back when entries
        // would go negative.
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let ap = a.select_columns(idx.iter());
            let z = lstsq(&ap, b)?;
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = z[k];
                }
                break;
            }
            // Step toward z until the first passive entry hits zero.
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = x[j] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                return Err(Error::Numeric("nnls: degenerate step".into()));
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z[k] - x[j]);
                if x[j] <= tol * 1e-3 || (z[k] <= 0.0 && x[j] <= alpha * 1e-12) {
                    x[j] = 0.0;
                }
            }
            for &j in &idx {
                if x[j] == 0.0 {
                    passive[j] = false;
                }
            }
            if !passive[enter] {
                // The entering column immediately left again; accept the
                // current point and move on.
                break;
            }
        }
    }
}

/// Dense least squares via SVD; the subproblems here are small.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 1000)
        .ok_or_else(|| Error::Numeric("lstsq: SVD failed".into()))?;
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    svd.solve(b, 1e-13 * smax.max(1e-300))
        .map_err(|e| Error::Numeric(format!("lstsq: {e}")))
}

/// Nonnegative least squares with the extra constraint `sum(x) <= cap`,
/// imposed through a slack variable and a weighted equality row
/// `sum(x) + slack = cap`. Returns `(x, residual)` where the residual is for
/// the original rows only.
pub fn nnls_sum_capped(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cap: f64,
    weight: f64,
) -> Result<(DVector<f64>, f64)> {
    let (m, n) = a.shape();
    let mut aug = DMatrix::<f64>::zeros(m + 1, n + 1);
    aug.view_mut((0, 0), (m, n)).copy_from(a);
    for j in 0..n {
        aug[(m, j)] = weight;
    }
    aug[(m, n)] = weight;
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs.rows_mut(0, m).copy_from(b);
    rhs[m] = weight * cap;
    // Dual tolerance anchored to the data rows, not the penalty row.
    let data_scale = (a.transpose() * b).amax().max(1e-300);
    let (full, _) = nnls_with_tol(&aug, &rhs, 1e-12 * data_scale)?;
    let x = full.rows(0, n).into_owned();
    let residual = (a * &x - b).norm();
    Ok((x, residual))
}
