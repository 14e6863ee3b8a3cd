//! Synthetic zero-inflated clustered ordinal data with known truth, and
//! independence-model maximum-likelihood oracles.
//!
//! Each cluster-time draws a correlated Gaussian vector over its observed
//! positions; its uniform margin `u` decides presence: zero when
//! `u < P(zero)`. Nonzero cells take the severity level found by placing a
//! second, independently drawn copula uniform on the cumulative cell
//! probabilities, or `(u - P(zero)) / (1 - P(zero))` when the latent is
//! shared.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::correlation::{assemble_r_presence, CorrelationStructure, StructureKind};
use crate::data::{dummy_row, Dataset, Observation, Position, Tooth, Zone, DUMMY_COLUMNS, MAX_TIME};
use crate::mean_model::logistic;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("invalid truth spec: {0}")]
    InvalidSpec(String),
    #[error("correlation {rho} is infeasible for {kind} with {size} positions")]
    InfeasibleCorrelation { kind: StructureKind, rho: f64, size: usize },
    #[error("outcome is perfectly separated by the design")]
    Separation,
    #[error("severity level {0} is not observed")]
    MissingLevel(u8),
    #[error("oracle did not converge")]
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceTruth {
    pub alpha: f64,
    /// Slopes on the covariates, optionally followed by the six tooth and
    /// zone dummies (missing dummy effects are zero).
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityTruth {
    pub cutpoints: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Severity slopes set to `gamma` times the presence slopes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTruth {
    pub kind: StructureKind,
    #[serde(default)]
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateGenerator {
    pub name: String,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub sd: f64,
    /// Redrawn at every time instead of once per cluster.
    #[serde(default)]
    pub per_time: bool,
}

fn one() -> f64 {
    1.0
}

fn all_teeth() -> Vec<u8> {
    vec![7, 8, 9, 10]
}

fn all_zones() -> Vec<Zone> {
    Zone::ALL.to_vec()
}

/// Data-generating truth. Time t uses entry t-1 of `presence` and `severity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub n_clusters: usize,
    pub presence: Vec<PresenceTruth>,
    pub severity: Vec<SeverityTruth>,
    pub correlation: CorrelationTruth,
    #[serde(default = "all_teeth")]
    pub teeth: Vec<u8>,
    #[serde(default = "all_zones")]
    pub zones: Vec<Zone>,
    pub covariates: Vec<CovariateGenerator>,
    /// Probability that a single tooth-zone cell is unobserved.
    #[serde(default)]
    pub missing_prob: f64,
    /// Probability that a child attends a given visit.
    #[serde(default = "one")]
    pub attend_prob: f64,
    /// Reuse the presence uniform for the severity draw instead of a second,
    /// independent copula vector. Sharing makes which cells are nonzero
    /// informative about their severity.
    #[serde(default)]
    pub shared_latent: bool,
}

impl TruthSpec {
    pub fn from_json(text: &str) -> Result<Self, SimulationError> {
        let spec: TruthSpec =
            serde_json::from_str(text).map_err(|e| SimulationError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_times(&self) -> usize {
        self.presence.len()
    }

    pub fn n_design(&self) -> usize {
        self.covariates.len() + DUMMY_COLUMNS.len()
    }

    fn positions(&self) -> Result<Vec<Position>, SimulationError> {
        let mut out = Vec::new();
        for &t in &self.teeth {
            let tooth = Tooth::from_number(t).ok_or_else(|| SimulationError::InvalidSpec(format!("tooth {t}")))?;
            for &z in &self.zones {
                out.push(Position::new(tooth, z));
            }
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    fn full_beta(&self, beta: &[f64], what: &str) -> Result<Vec<f64>, SimulationError> {
        let p = self.covariates.len();
        if beta.len() == p {
            let mut b = beta.to_vec();
            b.extend([0.0; 6]);
            Ok(b)
        } else if beta.len() == self.n_design() {
            Ok(beta.to_vec())
        } else {
            Err(SimulationError::InvalidSpec(format!(
                "{what} has {} slopes; expected {p} or {}",
                beta.len(),
                self.n_design()
            )))
        }
    }

    /// Presence slopes over the full design for time index `t` (1-based).
    pub fn presence_beta(&self, t: usize) -> Result<Vec<f64>, SimulationError> {
        self.full_beta(&self.presence[t - 1].beta, "presence beta")
    }

    /// Severity slopes over the full design for time index `t` (1-based).
    pub fn severity_beta(&self, t: usize) -> Result<Vec<f64>, SimulationError> {
        let s = &self.severity[t - 1];
        match (&s.beta, s.gamma) {
            (Some(b), None) => self.full_beta(b, "severity beta"),
            (None, Some(g)) => Ok(self.presence_beta(t)?.iter().map(|b| g * b).collect()),
            _ => Err(SimulationError::InvalidSpec("severity needs exactly one of beta or gamma".into())),
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let invalid = |m: String| Err(SimulationError::InvalidSpec(m));
        if self.n_clusters == 0 {
            return invalid("n_clusters must be positive".into());
        }
        if self.presence.is_empty() || self.presence.len() > MAX_TIME as usize {
            return invalid(format!("between 1 and {MAX_TIME} times are required"));
        }
        if self.severity.len() != self.presence.len() {
            return invalid("presence and severity must list the same times".into());
        }
        if self.teeth.is_empty() || self.zones.is_empty() {
            return invalid("at least one tooth and one zone are required".into());
        }
        for (name, p) in [("missing_prob", self.missing_prob), ("attend_prob", self.attend_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.covariates.iter().any(|c| !(c.sd >= 0.0) || !c.mean.is_finite()) {
            return invalid("covariate sd must be non-negative".into());
        }
        for t in 1..=self.n_times() {
            self.presence_beta(t)?;
            self.severity_beta(t)?;
            let c = self.severity[t - 1].cutpoints;
            if !(c[0] < c[1]) {
                return invalid(format!("cutpoints at time {t} must increase"));
            }
        }
        let size = self.positions()?.len();
        let rho = self.correlation.rho;
        let kind = self.correlation.kind;
        let feasible = match kind {
            StructureKind::Independence => true,
            StructureKind::Exchangeable => rho < 1.0 && (size <= 1 || rho > -1.0 / (size as f64 - 1.0)),
            StructureKind::Ar1 => rho.abs() < 1.0,
            StructureKind::Jackknife => false,
        };
        if !feasible {
            return Err(SimulationError::InfeasibleCorrelation { kind, rho, size });
        }
        Ok(())
    }

    fn structure(&self) -> CorrelationStructure {
        let rho = self.correlation.rho;
        match self.correlation.kind {
            StructureKind::Exchangeable => CorrelationStructure::Exchangeable { rho },
            StructureKind::Ar1 => CorrelationStructure::Ar1 { rho },
            _ => CorrelationStructure::Independence,
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Symmetric square root via eigen-decomposition, tolerating singular
/// (positive semidefinite) correlation matrices.
fn psd_sqrt(r: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = r.clone().symmetric_eigen();
    let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws one dataset. Cluster ids are `s0000`, `s0001`, ...
pub fn generate_dataset(spec: &TruthSpec, seed: u64) -> Result<Dataset, SimulationError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = spec.positions()?;
    let structure = spec.structure();
    let width = (spec.n_clusters.max(1) - 1).to_string().len().max(4);
    let gens: Vec<Normal<f64>> = spec
        .covariates
        .iter()
        .map(|c| Normal::new(c.mean, c.sd).map_err(|e| SimulationError::InvalidSpec(e.to_string())))
        .collect::<Result<_, _>>()?;
    let pres_beta: Vec<Vec<f64>> = (1..=spec.n_times()).map(|t| spec.presence_beta(t)).collect::<Result<_, _>>()?;
    let sev_beta: Vec<Vec<f64>> = (1..=spec.n_times()).map(|t| spec.severity_beta(t)).collect::<Result<_, _>>()?;
    let mut sqrt_cache: std::collections::HashMap<u16, DMatrix<f64>> = std::collections::HashMap::new();

    let mut rows = Vec::new();
    for i in 0..spec.n_clusters {
        let id = format!("s{i:0width$}");
        let base: Vec<f64> = gens.iter().map(|g| g.sample(&mut rng)).collect();
        for t in 0..spec.n_times() {
            let attend = rng.random::<f64>() < spec.attend_prob;
            let per_time: Vec<f64> = gens.iter().map(|g| g.sample(&mut rng)).collect();
            if !attend {
                continue;
            }
            let covariates: Vec<f64> = spec
                .covariates
                .iter()
                .enumerate()
                .map(|(k, c)| if c.per_time { per_time[k] } else { base[k] })
                .collect();
            let kept: Vec<Position> =
                positions.iter().copied().filter(|_| rng.random::<f64>() >= spec.missing_prob).collect();
            if kept.is_empty() {
                continue;
            }
            let e = DVector::from_iterator(kept.len(), (0..kept.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let e2 = if spec.shared_latent {
                None
            } else {
                Some(DVector::from_iterator(kept.len(), (0..kept.len()).map(|_| rng.sample::<f64, _>(StandardNormal))))
            };
            let (z, w) = if structure.is_independence() {
                (e, e2)
            } else {
                let mask = kept.iter().fold(0u16, |m, p| m | (1 << p.index()));
                let root = sqrt_cache
                    .entry(mask)
                    .or_insert_with(|| psd_sqrt(&assemble_r_presence(&structure, &kept)));
                (&*root * e, e2.map(|e2| &*root * e2))
            };
            let sev = &spec.severity[t];
            for (k, pos) in kept.iter().enumerate() {
                let mut x = covariates.clone();
                x.extend(dummy_row(pos.tooth, pos.zone));
                let p_zero = logistic(spec.presence[t].alpha + dot(&x, &pres_beta[t]));
                let u = normal_cdf(z[k]);
                let fri = if u < p_zero {
                    0
                } else {
                    let v = match &w {
                        Some(w) => normal_cdf(w[k]),
                        None => (u - p_zero) / (1.0 - p_zero),
                    };
                    let eta = dot(&x, &sev_beta[t]);
                    let c1 = logistic(sev.cutpoints[0] + eta);
                    let c2 = logistic(sev.cutpoints[1] + eta);
                    if v < c1 {
                        1
                    } else if v < c2 {
                        2
                    } else {
                        3
                    }
                };
                rows.push(Observation {
                    cluster_id: id.clone(),
                    time: t as u8 + 1,
                    tooth: pos.tooth,
                    zone: pos.zone,
                    fri,
                    covariates: covariates.clone(),
                });
            }
        }
    }
    let names = spec.covariates.iter().map(|c| c.name.clone()).collect();
    Dataset::new(names, rows).map_err(|e| SimulationError::InvalidSpec(e.to_string()))
}

const ORACLE_TOL: f64 = 1e-10;
const ORACLE_MAX_ITER: usize = 200;

/// Pooled logistic maximum likelihood of `y` (1 = event) on `[1 | X]` by
/// iteratively reweighted least squares. Returns (intercept, slopes).
pub fn oracle_logistic_fit(x: &DMatrix<f64>, y: &[f64]) -> Result<DVector<f64>, SimulationError> {
    let (n, q) = x.shape();
    let design = DMatrix::from_fn(n, q + 1, |r, c| if c == 0 { 1.0 } else { x[(r, c - 1)] });
    let mut theta = DVector::zeros(q + 1);
    for _ in 0..ORACLE_MAX_ITER {
        let eta = &design * &theta;
        if eta.amax() > 35.0 {
            return Err(SimulationError::Separation);
        }
        let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
        // Working response z = eta + (y - mu) / w, solved as weighted LS.
        let mut xtwx = DMatrix::zeros(q + 1, q + 1);
        let mut xtwz = DVector::zeros(q + 1);
        for r in 0..n {
            let row = design.row(r);
            let z = eta[r] + (y[r] - mu[r]) / w[r];
            xtwx += w[r] * row.transpose() * row;
            xtwz += (w[r] * z) * row.transpose();
        }
        let next = xtwx.lu().solve(&xtwz).ok_or(SimulationError::Separation)?;
        let change = (&next - &theta).amax();
        theta = next;
        if change < ORACLE_TOL {
            return Ok(theta);
        }
    }
    Err(SimulationError::Separation)
}

fn po_loglik_grad(theta: &DVector<f64>, x: &DMatrix<f64>, levels: &[u8]) -> (f64, DVector<f64>) {
    let q = x.ncols();
    let mut ll = 0.0;
    let mut g = DVector::zeros(q + 2);
    for (r, &level) in levels.iter().enumerate() {
        let eta: f64 = (0..q).map(|j| x[(r, j)] * theta[2 + j]).sum();
        let f1 = logistic(theta[0] + eta);
        let f2 = logistic(theta[1] + eta);
        let (d1, d2) = (f1 * (1.0 - f1), f2 * (1.0 - f2));
        let (pi, ga1, ga2, geta) = match level {
            1 => (f1, d1, 0.0, d1),
            2 => (f2 - f1, -d1, d2, d2 - d1),
            _ => (1.0 - f2, 0.0, -d2, -d2),
        };
        ll += pi.ln();
        g[0] += ga1 / pi;
        g[1] += ga2 / pi;
        for j in 0..q {
            g[2 + j] += geta / pi * x[(r, j)];
        }
    }
    (ll, g)
}

/// Proportional-odds maximum likelihood, `P(W <= l) = F(alpha_l + x'beta)`,
/// by damped Newton with an analytic gradient and a finite-difference
/// Hessian. Returns (alpha_1, alpha_2, slopes).
pub fn oracle_proportional_odds_fit(x: &DMatrix<f64>, levels: &[u8]) -> Result<DVector<f64>, SimulationError> {
    let mut counts = [0usize; 3];
    for &l in levels {
        counts[l as usize - 1] += 1;
    }
    if let Some(l) = counts.iter().position(|&c| c == 0) {
        return Err(SimulationError::MissingLevel(l as u8 + 1));
    }
    let q = x.ncols();
    let n = levels.len() as f64;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut theta = DVector::zeros(q + 2);
    theta[0] = logit(counts[0] as f64 / n);
    theta[1] = logit((counts[0] + counts[1]) as f64 / n);
    let h = 1e-5;
    for _ in 0..ORACLE_MAX_ITER {
        let (ll, g) = po_loglik_grad(&theta, x, levels);
        let p = q + 2;
        let mut hess = DMatrix::zeros(p, p);
        for j in 0..p {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let col = (po_loglik_grad(&up, x, levels).1 - po_loglik_grad(&dn, x, levels).1) / (2.0 * h);
            hess.set_column(j, &col);
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let step = (-hess).cholesky().map(|c| c.solve(&g)).unwrap_or_else(|| g.clone() * 1e-2);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &theta + &step * t;
            if trial[0] < trial[1] {
                let (ll_new, _) = po_loglik_grad(&trial, x, levels);
                if ll_new.is_finite() && ll_new >= ll - 1e-12 {
                    theta = trial;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(SimulationError::NotConverged);
        }
        if (&step * t).amax() < ORACLE_TOL {
            return Ok(theta);
        }
    }
    Err(SimulationError::NotConverged)
}
