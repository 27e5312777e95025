//! Dense weighted least-squares kernel with rank-revealing column
//! elimination. Every estimator in this crate goes through [`wls_fit`].
//!
//! The solver orthogonalizes the weighted design column by column
//! (modified Gram-Schmidt with one reorthogonalization pass) instead of
//! forming normal equations. Columns are visited left to right; a column
//! whose component orthogonal to the previously kept columns is negligible
//! relative to its own norm is dropped. Earlier columns therefore win
//! collinearity ties, which keeps stratum dummies ahead of covariates and
//! covariates ahead of missingness indicators in every design we build.

use crate::mat::Matrix;
use thiserror::Error;

/// Default relative tolerance for declaring a column linearly dependent.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("insufficient rows: {rows} rows for rank-{rank} design")]
    InsufficientRows { rows: usize, rank: usize },
}

/// Observation weights for [`wls_fit`].
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Uniform,
    PerRow(Vec<f64>),
}

impl Weights {
    fn sqrt_at(&self, i: usize) -> f64 {
        match self {
            Weights::Uniform => 1.0,
            Weights::PerRow(w) => w[i].sqrt(),
        }
    }

    fn at(&self, i: usize) -> f64 {
        match self {
            Weights::Uniform => 1.0,
            Weights::PerRow(w) => w[i],
        }
    }
}

/// A solved weighted least-squares problem.
#[derive(Clone, Debug)]
pub struct RegressionFit {
    /// Coefficients for the kept columns, in kept order.
    pub coefficients: Vec<f64>,
    /// Indices (into the input design) of the columns that survived the
    /// rank guard.
    pub kept_columns: Vec<usize>,
    /// Raw residuals `y - X b` over all rows.
    pub residuals: Vec<f64>,
    /// `(X' W X)^-1` over the kept columns.
    pub xtx_inverse: Matrix,
    /// Weights the fit was computed with.
    pub weights: Weights,
    /// Residual degrees of freedom, `n - kept`.
    pub dof: usize,
    /// Weighted residual sum of squares.
    pub weighted_rss: f64,
}

impl RegressionFit {
    /// Coefficient of an input column, `None` if the column was dropped.
    pub fn coefficient(&self, column: usize) -> Option<f64> {
        self.kept_columns
            .iter()
            .position(|&c| c == column)
            .map(|p| self.coefficients[p])
    }

    /// Coefficients over all `total_cols` input columns, dropped columns
    /// reported as 0 (which leaves fitted values unchanged).
    pub fn full_coefficients(&self, total_cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; total_cols];
        for (pos, &col) in self.kept_columns.iter().enumerate() {
            out[col] = self.coefficients[pos];
        }
        out
    }

    /// Diagonal entry of `(X' W X)^-1` for an input column.
    pub fn var_factor(&self, column: usize) -> Option<f64> {
        self.kept_columns
            .iter()
            .position(|&c| c == column)
            .map(|p| self.xtx_inverse.get(p, p))
    }

    /// Classical variance estimate `s^2` with `s^2 = RSS_w / dof`.
    pub fn sigma2(&self) -> f64 {
        self.weighted_rss / self.dof as f64
    }
}

struct QrState {
    // Orthonormal columns of the weighted design, kept order.
    q: Vec<Vec<f64>>,
    // Upper-triangular factor, column by column (column j holds j+1 entries).
    r: Vec<Vec<f64>>,
    kept: Vec<usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalize the weighted design, dropping dependent columns.
fn weighted_qr(design: &Matrix, weights: &Weights, tolerance: f64) -> QrState {
    let n = design.rows();
    let mut state = QrState {
        q: Vec::new(),
        r: Vec::new(),
        kept: Vec::new(),
    };
    let mut v = vec![0.0; n];
    for j in 0..design.cols() {
        let col = design.col(j);
        for i in 0..n {
            v[i] = col[i] * weights.sqrt_at(i);
        }
        let own_norm = norm(&v);
        let mut coeffs = vec![0.0; state.q.len()];
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for (m, qm) in state.q.iter().enumerate() {
                let c = dot(qm, &v);
                coeffs[m] += c;
                for i in 0..n {
                    v[i] -= c * qm[i];
                }
            }
        }
        let rest = norm(&v);
        if own_norm == 0.0 || rest <= tolerance * own_norm {
            continue;
        }
        let inv = 1.0 / rest;
        state.q.push(v.iter().map(|x| x * inv).collect());
        coeffs.push(rest);
        state.r.push(coeffs);
        state.kept.push(j);
    }
    state
}

/// Greedy left-to-right rank guard: returns the indices of the columns a
/// weighted QR would keep at the given relative tolerance.
pub fn rank_guard(design: &Matrix, weights: &Weights, tolerance: f64) -> Vec<usize> {
    weighted_qr(design, weights, tolerance).kept
}

/// Weighted least squares of `response` on `design`, minimizing
/// `sum_i w_i (y_i - x_i' b)^2` over the columns kept by the rank guard.
pub fn wls_fit(
    design: &Matrix,
    response: &[f64],
    weights: &Weights,
    tolerance: f64,
) -> Result<RegressionFit, RegressError> {
    let n = design.rows();
    assert_eq!(response.len(), n, "response length mismatch");
    if let Weights::PerRow(w) = weights {
        assert_eq!(w.len(), n, "weights length mismatch");
        assert!(w.iter().all(|&x| x > 0.0), "weights must be positive");
    }

    let state = weighted_qr(design, weights, tolerance);
    let k = state.kept.len();
    if n <= k {
        return Err(RegressError::InsufficientRows { rows: n, rank: k });
    }

    // z = Q' (sqrt(w) y)
    let wy: Vec<f64> = (0..n).map(|i| response[i] * weights.sqrt_at(i)).collect();
    let z: Vec<f64> = state.q.iter().map(|qm| dot(qm, &wy)).collect();

    // Solve R b = z by back substitution. R column j holds entries (0..=j).
    let mut beta = vec![0.0; k];
    for j in (0..k).rev() {
        let mut acc = z[j];
        for m in (j + 1)..k {
            acc -= state.r[m][j] * beta[m];
        }
        beta[j] = acc / state.r[j][j];
    }

    // Residuals on the raw (unweighted) scale.
    let mut residuals = response.to_vec();
    for (pos, &col) in state.kept.iter().enumerate() {
        let b = beta[pos];
        let c = design.col(col);
        for i in 0..n {
            residuals[i] -= b * c[i];
        }
    }
    let weighted_rss = (0..n)
        .map(|i| weights.at(i) * residuals[i] * residuals[i])
        .sum();

    // (X'WX)^-1 = R^-1 R^-T from the triangular factor.
    let rinv = invert_upper(&state.r, k);
    let mut xtx_inverse = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut acc = 0.0;
            for m in a.max(b)..k {
                acc += rinv[m][a] * rinv[m][b];
            }
            xtx_inverse.set(a, b, acc);
        }
    }

    Ok(RegressionFit {
        coefficients: beta,
        kept_columns: state.kept,
        residuals,
        xtx_inverse,
        weights: weights.clone(),
        dof: n - k,
        weighted_rss,
    })
}

/// Ordinary least squares: [`wls_fit`] with uniform weights.
pub fn ols_fit(design: &Matrix, response: &[f64]) -> Result<RegressionFit, RegressError> {
    wls_fit(design, response, &Weights::Uniform, DEFAULT_RANK_TOLERANCE)
}

// Columns of R^-1, same storage layout as R (column j holds entries 0..=j).
fn invert_upper(r: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let mut inv: Vec<Vec<f64>> = vec![Vec::new(); k];
    for j in 0..k {
        let mut col = vec![0.0; j + 1];
        col[j] = 1.0 / r[j][j];
        for i in (0..j).rev() {
            let mut acc = 0.0;
            for m in (i + 1)..=j {
                acc += r[m][i] * col[m];
            }
            col[i] = -acc / r[i][i];
        }
        inv[j] = col;
    }
    inv
}

/// Solve the square, full-rank system `m x = v` via the same QR machinery.
/// Used by the closed-form estimator routes for their small moment systems.
pub fn solve_square(m: &Matrix, v: &[f64]) -> Option<Vec<f64>> {
    assert_eq!(m.rows(), m.cols());
    assert_eq!(v.len(), m.rows());
    if m.rows() == 0 {
        return Some(Vec::new());
    }
    let state = weighted_qr(m, &Weights::Uniform, 1e-13);
    if state.kept.len() != m.cols() {
        return None;
    }
    let z: Vec<f64> = state.q.iter().map(|qm| dot(qm, v)).collect();
    let k = m.cols();
    let mut x = vec![0.0; k];
    for j in (0..k).rev() {
        let mut acc = z[j];
        for mm in (j + 1)..k {
            acc -= state.r[mm][j] * x[mm];
        }
        x[j] = acc / state.r[j][j];
    }
    Some(x)
}
