//! Dense helpers: eigenvalue repair of working correlations, per-cluster
//! Gauss-Newton contributions, and rank checks.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Smallest eigenvalue allowed in a working correlation matrix that is
/// going to be factorized.
pub const EIGEN_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite")]
    SingularSystem,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Returns a correlation matrix whose eigenvalues are all at least
/// [`EIGEN_FLOOR`]. Matrices that already qualify are returned unchanged;
/// otherwise eigenvalues are clipped and the result rescaled to unit
/// diagonal, repeating until the floor holds.
pub fn repair_correlation(r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = r.nrows();
    if n <= 1 {
        return DMatrix::identity(n, n);
    }
    let mut current = symmetrize(r);
    let mut clip = EIGEN_FLOOR;
    for _ in 0..20 {
        let eig = current.clone().symmetric_eigen();
        if eig.eigenvalues.min() >= EIGEN_FLOOR {
            return current;
        }
        let clipped = eig.eigenvalues.map(|l| l.max(clip));
        let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        current = to_unit_diagonal(&symmetrize(&rebuilt));
        clip *= 2.0;
    }
    current
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn to_unit_diagonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)].sqrt()).collect();
    let mut out = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (d[i] * d[j]));
    for i in 0..m.nrows() {
        out[(i, i)] = 1.0;
    }
    out
}

/// V = A^{1/2} R A^{1/2} for diagonal A given as variances.
pub fn working_covariance(variances: &[f64], r: &DMatrix<f64>) -> DMatrix<f64> {
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| sd[i] * r[(i, j)] * sd[j])
}

/// One cluster's share of the Fisher-scoring system.
#[derive(Debug, Clone)]
pub struct Contribution {
    /// D' V^{-1} D
    pub information: DMatrix<f64>,
    /// D' V^{-1} (y - mu)
    pub score: DVector<f64>,
}

impl Contribution {
    pub fn zeros(p: usize) -> Self {
        Self {
            information: DMatrix::zeros(p, p),
            score: DVector::zeros(p),
        }
    }

    pub fn add(&mut self, other: &Contribution) {
        self.information += &other.information;
        self.score += &other.score;
    }
}

/// Computes D' V^{-1} D and D' V^{-1} r through a Cholesky factor of V.
pub fn cluster_contribution(
    jacobian: &DMatrix<f64>,
    covariance: &DMatrix<f64>,
    residual: &DVector<f64>,
) -> Result<Contribution, LinalgError> {
    let n = jacobian.nrows();
    if covariance.nrows() != n || covariance.ncols() != n || residual.len() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "D is {}x{}, V is {}x{}, r has {}",
            n,
            jacobian.ncols(),
            covariance.nrows(),
            covariance.ncols(),
            residual.len()
        )));
    }
    let chol = covariance.clone().cholesky().ok_or(LinalgError::SingularSystem)?;
    let vinv_d = chol.solve(jacobian);
    Ok(Contribution {
        information: jacobian.transpose() * &vinv_d,
        score: vinv_d.transpose() * residual,
    })
}

/// Sums cluster contributions in the given order.
pub fn reduce(contributions: &[Contribution], p: usize) -> Contribution {
    let mut total = Contribution::zeros(p);
    for c in contributions {
        total.add(c);
    }
    total
}

/// Solves `information * delta = score` by Cholesky.
pub fn solve_spd(information: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    if information.nrows() != rhs.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "system is {}x{}, rhs has {}",
            information.nrows(),
            information.ncols(),
            rhs.len()
        )));
    }
    let chol = information.clone().cholesky().ok_or(LinalgError::SingularSystem)?;
    let delta = chol.solve(rhs);
    if delta.iter().all(|v| v.is_finite()) {
        Ok(delta)
    } else {
        Err(LinalgError::SingularSystem)
    }
}

/// Gauss-Newton increment `(sum D'V^{-1}D)^{-1} sum D'V^{-1} r` over clusters
/// given as (D, V, r) triples.
pub fn solve_step(
    clusters: &[(DMatrix<f64>, DMatrix<f64>, DVector<f64>)],
) -> Result<DVector<f64>, LinalgError> {
    let p = clusters
        .first()
        .map(|c| c.0.ncols())
        .ok_or_else(|| LinalgError::DimensionMismatch("no clusters".into()))?;
    let mut total = Contribution::zeros(p);
    for (d, v, r) in clusters {
        if d.ncols() != p {
            return Err(LinalgError::DimensionMismatch(format!("D has {} columns, expected {p}", d.ncols())));
        }
        total.add(&cluster_contribution(d, v, r)?);
    }
    solve_spd(&total.information, &total.score)
}

/// Numerical rank from a column-pivoted QR.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let r = m.clone().col_piv_qr().r();
    let k = r.nrows().min(r.ncols());
    let lead = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if lead == 0.0 {
        return 0;
    }
    let tol = lead * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    (0..k).filter(|&i| r[(i, i)].abs() > tol).count()
}
