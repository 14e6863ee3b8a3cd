//! Mean functions, cell probabilities, variance blocks and Jacobians for the
//! presence (binary) and severity (cumulative-logit) pieces.
//!
//! The presence mean is the probability of a *zero* score,
//! `P(Y = 0 | x) = F(alpha + x'beta)`, so a negative slope marks a risk
//! factor. The severity piece models `P(W_S <= l | x) = F(alpha_l + gamma x'beta)`
//! for l = 1, 2 with cell probabilities `pi = (mu_1, mu_2 - mu_1, 1 - mu_2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to variances before they enter `A^{1/2} R A^{1/2}`.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cutpoints must be strictly increasing, got ({0}, {1})")]
    NonmonotoneCutpoints(f64, f64),
}

/// Logistic CDF, evaluated without overflow for large |u|.
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Whether the severity slope partials carry the `gamma` chain-rule factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaChainRule {
    /// d pi / d beta = gamma * (d pi / d eta) * x.
    #[default]
    Include,
    /// Drop the factor, i.e. d pi / d beta = (d pi / d eta) * x for any gamma.
    Omit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceParams {
    pub alpha: f64,
    pub beta: DVector<f64>,
}

impl PresenceParams {
    pub fn new(alpha: f64, beta: Vec<f64>) -> Self {
        Self { alpha, beta: DVector::from_vec(beta) }
    }

    pub fn zeros(q: usize) -> Self {
        Self { alpha: 0.0, beta: DVector::zeros(q) }
    }

    /// (alpha, beta) stacked.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(1 + self.beta.len());
        v[0] = self.alpha;
        v.rows_mut(1, self.beta.len()).copy_from(&self.beta);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self { alpha: v[0], beta: v.rows(1, v.len() - 1).into_owned() }
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.alpha + x.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityParams {
    /// (alpha_{1|2}, alpha_{2|3}).
    pub cutpoints: [f64; 2],
    pub beta: DVector<f64>,
    /// Amplifier; 1 for separately fitted severity models.
    pub gamma: f64,
}

impl SeverityParams {
    pub fn new(cutpoints: [f64; 2], beta: Vec<f64>) -> Self {
        Self { cutpoints, beta: DVector::from_vec(beta), gamma: 1.0 }
    }

    /// (alpha_1, alpha_2, beta) stacked.
    pub fn to_vector(&self) -> DVector<f64> {
        let q = self.beta.len();
        let mut v = DVector::zeros(2 + q);
        v[0] = self.cutpoints[0];
        v[1] = self.cutpoints[1];
        v.rows_mut(2, q).copy_from(&self.beta);
        v
    }

    pub fn from_vector(v: &DVector<f64>, gamma: f64) -> Self {
        Self {
            cutpoints: [v[0], v[1]],
            beta: v.rows(2, v.len() - 2).into_owned(),
            gamma,
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.cutpoints[0] < self.cutpoints[1]
    }

    /// gamma * x'beta.
    pub fn slope_term(&self, x: &[f64]) -> f64 {
        self.gamma * x.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Cumulative and cell probabilities of one severity observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProbabilities {
    /// (mu_1, mu_2) = (P(W <= 1), P(W <= 2)).
    pub cumulative: [f64; 2],
    pub pi: [f64; 3],
}

impl CellProbabilities {
    pub fn from_cumulative(mu1: f64, mu2: f64) -> Self {
        Self {
            cumulative: [mu1, mu2],
            pi: [mu1, (mu2 - mu1).max(0.0), 1.0 - mu2],
        }
    }

    /// d pi / d eta for each cell, where eta is the shared linear term.
    pub fn d_eta(&self) -> [f64; 3] {
        let d1 = self.cumulative[0] * (1.0 - self.cumulative[0]);
        let d2 = self.cumulative[1] * (1.0 - self.cumulative[1]);
        [d1, d2 - d1, -d2]
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// P(Y = 0 | x) under the presence model.
pub fn presence_mean(p: &PresenceParams, x: &[f64]) -> Result<f64, ModelError> {
    check_len(p.beta.len(), x.len())?;
    Ok(logistic(p.linear_predictor(x)))
}

/// Means for every row of a cluster design.
pub fn presence_means(p: &PresenceParams, design: &DMatrix<f64>) -> Result<Vec<f64>, ModelError> {
    check_len(p.beta.len(), design.ncols())?;
    let eta = design * &p.beta;
    Ok(eta.iter().map(|e| logistic(p.alpha + e)).collect())
}

/// n_i x (1 + q) matrix with rows mu (1 - mu) (1, x').
pub fn presence_jacobian(p: &PresenceParams, design: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let mu = presence_means(p, design)?;
    let (n, q) = design.shape();
    Ok(DMatrix::from_fn(n, 1 + q, |r, c| {
        let w = mu[r] * (1.0 - mu[r]);
        if c == 0 {
            w
        } else {
            w * design[(r, c - 1)]
        }
    }))
}

pub fn severity_cell_probs(s: &SeverityParams, x: &[f64]) -> Result<CellProbabilities, ModelError> {
    check_len(s.beta.len(), x.len())?;
    if !s.is_monotone() {
        return Err(ModelError::NonmonotoneCutpoints(s.cutpoints[0], s.cutpoints[1]));
    }
    let eta = s.slope_term(x);
    Ok(CellProbabilities::from_cumulative(
        logistic(s.cutpoints[0] + eta),
        logistic(s.cutpoints[1] + eta),
    ))
}

/// Cell probabilities for every row of a cluster design.
pub fn severity_cluster_probs(
    s: &SeverityParams,
    design: &DMatrix<f64>,
) -> Result<Vec<CellProbabilities>, ModelError> {
    check_len(s.beta.len(), design.ncols())?;
    if !s.is_monotone() {
        return Err(ModelError::NonmonotoneCutpoints(s.cutpoints[0], s.cutpoints[1]));
    }
    let eta = design * &s.beta;
    Ok(eta
        .iter()
        .map(|e| {
            let e = s.gamma * e;
            CellProbabilities::from_cumulative(logistic(s.cutpoints[0] + e), logistic(s.cutpoints[1] + e))
        })
        .collect())
}

/// (3 n_i) x (2 + q) Jacobian of the stacked cell probabilities with respect
/// to (alpha_1, alpha_2, beta). Rows for observation r are 3r..3r+3.
pub fn severity_jacobian(
    s: &SeverityParams,
    design: &DMatrix<f64>,
    chain: GammaChainRule,
) -> Result<DMatrix<f64>, ModelError> {
    let probs = severity_cluster_probs(s, design)?;
    let (n, q) = design.shape();
    let slope_factor = match chain {
        GammaChainRule::Include => s.gamma,
        GammaChainRule::Omit => 1.0,
    };
    let mut jac = DMatrix::zeros(3 * n, 2 + q);
    for (r, cp) in probs.iter().enumerate() {
        let d1 = cp.cumulative[0] * (1.0 - cp.cumulative[0]);
        let d2 = cp.cumulative[1] * (1.0 - cp.cumulative[1]);
        let alpha_rows = [[d1, 0.0], [-d1, d2], [0.0, -d2]];
        let deta = cp.d_eta();
        for l in 0..3 {
            jac[(3 * r + l, 0)] = alpha_rows[l][0];
            jac[(3 * r + l, 1)] = alpha_rows[l][1];
            for c in 0..q {
                jac[(3 * r + l, 2 + c)] = slope_factor * deta[l] * design[(r, c)];
            }
        }
    }
    Ok(jac)
}

/// diag(mu (1 - mu)).
pub fn presence_variance(mu: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(mu.len(), mu.iter().map(|m| m * (1.0 - m))))
}

/// 3x3 multinomial covariance of one indicator triple.
pub fn multinomial_covariance(pi: &[f64; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for l in 0..3 {
        for m in 0..3 {
            out[l][m] = if l == m { pi[l] * (1.0 - pi[l]) } else { -pi[l] * pi[m] };
        }
    }
    out
}

/// Block-diagonal (3 n_i) x (3 n_i) covariance of the stacked indicators.
pub fn severity_variance(probs: &[CellProbabilities]) -> DMatrix<f64> {
    let n = probs.len();
    let mut out = DMatrix::zeros(3 * n, 3 * n);
    for (r, cp) in probs.iter().enumerate() {
        let block = multinomial_covariance(&cp.pi);
        for l in 0..3 {
            for m in 0..3 {
                out[(3 * r + l, 3 * r + m)] = block[l][m];
            }
        }
    }
    out
}
