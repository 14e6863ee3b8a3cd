//! Fisher-scoring solver for the presence and severity estimating equations
//! at a single time point, alternating coefficient updates with moment
//! re-estimation of the dispersion and working correlation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{
    assemble_r_presence, assemble_r_severity, estimate_phi, estimate_structure, pearson_residuals_presence,
    pearson_residuals_severity, reduced_within_corr, CorrelationError, CorrelationStructure, JackknifePooling, Piece,
    ResidualSet, ScalingMode, StructureKind,
};
use crate::data::{indicator_triple, Position, PresenceView, SeverityView, SEVERITY_LEVELS};
use crate::linalg::{cluster_contribution, numerical_rank, repair_correlation, solve_spd, Contribution, LinalgError};
use crate::mean_model::{logistic, CellProbabilities, GammaChainRule, PresenceParams, SeverityParams, VARIANCE_FLOOR};

/// Linear predictors beyond this magnitude are treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 30.0;
const CONSTANT_COLUMN_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeeError {
    #[error("no clusters to fit")]
    NoClusters,
    #[error("design has rank {rank} but {columns} columns (including the intercept)")]
    RankDeficientDesign { rank: usize, columns: usize },
    #[error("severity level {0} is not observed")]
    MissingLevel(u8),
    #[error("estimating-equation information matrix is singular")]
    SingularSystem,
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
}

impl From<LinalgError> for GeeError {
    fn from(_: LinalgError) -> Self {
        GeeError::SingularSystem
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub step_halving: usize,
    pub structure: StructureKind,
    pub scaling: ScalingMode,
    pub pooling: JackknifePooling,
    pub chain: GammaChainRule,
    /// Holds the working correlation at this value instead of estimating it.
    pub fixed_correlation: Option<CorrelationStructure>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
            step_halving: 5,
            structure: StructureKind::Independence,
            scaling: ScalingMode::default(),
            pooling: JackknifePooling::default(),
            chain: GammaChainRule::default(),
            fixed_correlation: None,
        }
    }
}

impl FitSettings {
    pub fn with_structure(structure: StructureKind) -> Self {
        Self { structure, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GeeError> {
        if !(self.tol > 0.0) {
            return Err(GeeError::InvalidSettings(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(GeeError::InvalidSettings("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// One cluster's rows restricted to the active design columns.
#[derive(Debug, Clone)]
pub struct ClusterData {
    pub id: String,
    pub positions: Vec<Position>,
    /// Bit set of occupied positions, used to share correlation matrices.
    pub mask: u16,
    pub design: DMatrix<f64>,
    /// Presence: 1 for a zero score, else 0. Severity: level 1..=3.
    pub response: Vec<u8>,
}

impl ClusterData {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A view reduced to estimable columns, ready for fitting.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub piece: Piece,
    pub time: u8,
    pub design_names: Vec<String>,
    /// Indices into `design_names` of the columns kept for fitting.
    pub active: Vec<usize>,
    pub clusters: Vec<ClusterData>,
}

fn mask_of(positions: &[Position]) -> u16 {
    positions.iter().fold(0u16, |m, p| m | (1 << p.index()))
}

fn active_columns(designs: &[&DMatrix<f64>], q: usize) -> Vec<usize> {
    (0..q)
        .filter(|&c| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for d in designs {
                for v in d.column(c).iter() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
            }
            hi - lo > CONSTANT_COLUMN_TOL
        })
        .collect()
}

fn select_columns(design: &DMatrix<f64>, active: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(design.nrows(), active.len(), |r, c| design[(r, active[c])])
}

fn check_rank(clusters: &[ClusterData], q: usize) -> Result<(), GeeError> {
    let n: usize = clusters.iter().map(|c| c.len()).sum();
    let mut stacked = DMatrix::zeros(n, 1 + q);
    let mut row = 0;
    for c in clusters {
        for r in 0..c.len() {
            stacked[(row, 0)] = 1.0;
            for j in 0..q {
                stacked[(row, 1 + j)] = c.design[(r, j)];
            }
            row += 1;
        }
    }
    let rank = numerical_rank(&stacked);
    if rank < 1 + q {
        return Err(GeeError::RankDeficientDesign { rank, columns: 1 + q });
    }
    Ok(())
}

impl Prepared {
    pub fn presence(view: &PresenceView) -> Result<Self, GeeError> {
        if view.clusters.is_empty() {
            return Err(GeeError::NoClusters);
        }
        let designs: Vec<&DMatrix<f64>> = view.clusters.iter().map(|c| &c.block.design).collect();
        let active = active_columns(&designs, view.n_design());
        let clusters: Vec<ClusterData> = view
            .clusters
            .iter()
            .map(|c| ClusterData {
                id: c.block.id.clone(),
                mask: mask_of(&c.block.positions),
                positions: c.block.positions.clone(),
                design: select_columns(&c.block.design, &active),
                response: c.zero_indicator().map(|z| z as u8).collect(),
            })
            .collect();
        check_rank(&clusters, active.len())?;
        Ok(Self { piece: Piece::Presence, time: view.time, design_names: view.design_names.clone(), active, clusters })
    }

    pub fn severity(view: &SeverityView) -> Result<Self, GeeError> {
        if let Some(l) = view.level_counts().iter().position(|&n| n == 0) {
            return Err(GeeError::MissingLevel(l as u8 + 1));
        }
        let designs: Vec<&DMatrix<f64>> = view.clusters.iter().map(|c| &c.block.design).collect();
        let active = active_columns(&designs, view.n_design());
        let clusters: Vec<ClusterData> = view
            .clusters
            .iter()
            .map(|c| ClusterData {
                id: c.block.id.clone(),
                mask: mask_of(&c.block.positions),
                positions: c.block.positions.clone(),
                design: select_columns(&c.block.design, &active),
                response: c.levels.clone(),
            })
            .collect();
        check_rank(&clusters, active.len())?;
        Ok(Self { piece: Piece::Severity, time: view.time, design_names: view.design_names.clone(), active, clusters })
    }

    /// Severity rows restricted to a given column set (e.g. the presence
    /// model's), without a rank check of their own.
    pub fn severity_on_columns(view: &SeverityView, active: &[usize]) -> Self {
        let clusters = view
            .clusters
            .iter()
            .map(|c| ClusterData {
                id: c.block.id.clone(),
                mask: mask_of(&c.block.positions),
                positions: c.block.positions.clone(),
                design: select_columns(&c.block.design, active),
                response: c.levels.clone(),
            })
            .collect();
        Self {
            piece: Piece::Severity,
            time: view.time,
            design_names: view.design_names.clone(),
            active: active.to_vec(),
            clusters,
        }
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn n_intercepts(&self) -> usize {
        match self.piece {
            Piece::Presence => 1,
            Piece::Severity => 2,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_intercepts() + self.n_active()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    pub fn dropped_names(&self) -> Vec<String> {
        (0..self.design_names.len())
            .filter(|i| !self.active.contains(i))
            .map(|i| self.design_names[i].clone())
            .collect()
    }

    pub fn all_clusters(&self) -> Vec<&ClusterData> {
        self.clusters.iter().collect()
    }
}

/// Outcome of one fit. Slopes are indexed by the full design; dropped
/// columns hold 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub piece: Piece,
    pub time: u8,
    pub intercepts: Vec<f64>,
    pub beta: Vec<f64>,
    pub design_names: Vec<String>,
    pub active: Vec<bool>,
    pub correlation: CorrelationStructure,
    pub phi: f64,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
    /// Max-abs coefficient change of each accepted step.
    pub trace: Vec<f64>,
    /// Max-abs component of the estimating function at the returned estimate.
    pub score_max_abs: f64,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub residuals: Option<ResidualSet>,
}

impl FitResult {
    pub fn presence_params(&self) -> PresenceParams {
        PresenceParams::new(self.intercepts[0], self.beta.clone())
    }

    pub fn severity_params(&self) -> SeverityParams {
        SeverityParams::new([self.intercepts[0], self.intercepts[1]], self.beta.clone())
    }

    pub fn dropped(&self) -> Vec<String> {
        self.design_names
            .iter()
            .zip(&self.active)
            .filter(|(_, a)| !**a)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Parameter vector over active columns: intercepts then slopes.
    pub fn active_vector(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.intercepts.clone();
        v.extend(self.beta.iter().zip(&self.active).filter(|(_, a)| **a).map(|(b, _)| *b));
        DVector::from_vec(v)
    }
}

/// Working correlation matrices shared by clusters with the same position set.
pub struct PresenceRCache {
    structure: CorrelationStructure,
    by_mask: HashMap<u16, DMatrix<f64>>,
}

impl PresenceRCache {
    pub fn new(structure: &CorrelationStructure, clusters: &[&ClusterData]) -> Self {
        let mut by_mask = HashMap::new();
        if !structure.is_independence() {
            for c in clusters {
                by_mask
                    .entry(c.mask)
                    .or_insert_with(|| repair_correlation(&assemble_r_presence(structure, &c.positions)));
            }
        }
        Self { structure: structure.clone(), by_mask }
    }

    fn get(&self, c: &ClusterData) -> Option<&DMatrix<f64>> {
        if self.structure.is_independence() {
            None
        } else {
            self.by_mask.get(&c.mask)
        }
    }
}

/// (D, A, residual, R) pieces of one presence cluster with Jacobian columns
/// (alpha, beta).
fn presence_pieces(c: &ClusterData, alpha: f64, beta: &DVector<f64>) -> (DMatrix<f64>, Vec<f64>, DVector<f64>) {
    let eta = &c.design * beta;
    let n = c.len();
    let q = c.design.ncols();
    let mu: Vec<f64> = eta.iter().map(|e| logistic(alpha + e)).collect();
    let d = DMatrix::from_fn(n, 1 + q, |r, j| {
        let w = mu[r] * (1.0 - mu[r]);
        if j == 0 {
            w
        } else {
            w * c.design[(r, j - 1)]
        }
    });
    let var: Vec<f64> = mu.iter().map(|m| (m * (1.0 - m)).max(VARIANCE_FLOOR)).collect();
    let resid = DVector::from_iterator(n, c.response.iter().zip(&mu).map(|(&y, m)| y as f64 - m));
    (d, var, resid)
}

fn contribution_with(
    d: &DMatrix<f64>,
    var: &[f64],
    resid: &DVector<f64>,
    r: Option<&DMatrix<f64>>,
) -> Result<Contribution, GeeError> {
    match r {
        None => {
            // Diagonal working covariance.
            let mut scaled = d.clone();
            for (i, v) in var.iter().enumerate() {
                scaled.row_mut(i).scale_mut(1.0 / v);
            }
            Ok(Contribution { information: d.transpose() * &scaled, score: scaled.transpose() * resid })
        }
        Some(r) => {
            let v = crate::linalg::working_covariance(var, r);
            Ok(cluster_contribution(d, &v, resid)?)
        }
    }
}

/// Presence contribution with Jacobian columns (alpha, beta).
pub fn presence_contribution(
    c: &ClusterData,
    alpha: f64,
    beta: &DVector<f64>,
    cache: &PresenceRCache,
) -> Result<Contribution, GeeError> {
    let (d, var, resid) = presence_pieces(c, alpha, beta);
    contribution_with(&d, &var, &resid, cache.get(c))
}

/// Reduced-form severity pieces: rows 2r, 2r+1 hold categories 1 and 2 of
/// observation r; Jacobian columns are (alpha_1, alpha_2, beta) with the
/// slope columns multiplied by `slope_factor`.
pub(crate) struct SeverityPieces {
    pub d: DMatrix<f64>,
    pub var: Vec<f64>,
    pub resid: DVector<f64>,
    pub probs: Vec<CellProbabilities>,
}

pub(crate) fn severity_pieces(
    c: &ClusterData,
    cutpoints: [f64; 2],
    beta: &DVector<f64>,
    gamma: f64,
    slope_factor: f64,
) -> SeverityPieces {
    let eta = &c.design * beta;
    let n = c.len();
    let q = c.design.ncols();
    let probs: Vec<CellProbabilities> = eta
        .iter()
        .map(|e| {
            let e = gamma * e;
            CellProbabilities::from_cumulative(logistic(cutpoints[0] + e), logistic(cutpoints[1] + e))
        })
        .collect();
    let mut d = DMatrix::zeros(2 * n, 2 + q);
    let mut var = Vec::with_capacity(2 * n);
    let mut resid = DVector::zeros(2 * n);
    for (r, cp) in probs.iter().enumerate() {
        let d1 = cp.cumulative[0] * (1.0 - cp.cumulative[0]);
        let d2 = cp.cumulative[1] * (1.0 - cp.cumulative[1]);
        let deta = cp.d_eta();
        d[(2 * r, 0)] = d1;
        d[(2 * r + 1, 0)] = -d1;
        d[(2 * r + 1, 1)] = d2;
        for j in 0..q {
            let x = c.design[(r, j)];
            d[(2 * r, 2 + j)] = slope_factor * deta[0] * x;
            d[(2 * r + 1, 2 + j)] = slope_factor * deta[1] * x;
        }
        let z = indicator_triple(c.response[r]);
        for l in 0..2 {
            var.push((cp.pi[l] * (1.0 - cp.pi[l])).max(VARIANCE_FLOOR));
            resid[2 * r + l] = z[l] - cp.pi[l];
        }
    }
    SeverityPieces { d, var, resid, probs }
}

/// Reduced severity working correlation of one cluster, repaired when the
/// structure couples observations.
pub(crate) fn severity_r(structure: &CorrelationStructure, c: &ClusterData, probs: &[CellProbabilities]) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = probs
        .iter()
        .map(|cp| {
            let t = reduced_within_corr(cp);
            DMatrix::from_row_slice(2, 2, &[1.0, t, t, 1.0])
        })
        .collect();
    let r = assemble_r_severity(structure, &blocks, &c.positions).expect("one block per position");
    if structure.is_independence() || c.len() == 1 {
        r
    } else {
        repair_correlation(&shrink_coupling(r, &blocks))
    }
}

/// Smallest eigenvalue kept in the block-whitened severity correlation
/// before the between-observation part is scaled down.
pub const SEVERITY_COUPLING_MARGIN: f64 = 0.3;

/// Scales the between-observation entries of a reduced severity correlation
/// so that the matrix stays positive definite with some room to spare.
/// Writing R = D + C with D the 2x2 diagonal blocks, R is PD exactly when
/// the smallest eigenvalue mu of D^{-1/2} C D^{-1/2} exceeds -1; C is
/// multiplied by (1 - margin) / (-mu) whenever 1 + mu falls below the margin.
pub fn shrink_coupling(mut r: DMatrix<f64>, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.len();
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    for (a, b) in blocks.iter().enumerate() {
        let t = b[(0, 1)];
        let hi = (1.0 + t).max(crate::linalg::EIGEN_FLOOR).sqrt().recip();
        let lo = (1.0 - t).max(crate::linalg::EIGEN_FLOOR).sqrt().recip();
        let (d, o) = (0.5 * (hi + lo), 0.5 * (hi - lo));
        w.view_mut((2 * a, 2 * a), (2, 2)).copy_from_slice(&[d, o, o, d]);
    }
    let mut coupling = r.clone();
    for a in 0..n {
        coupling.view_mut((2 * a, 2 * a), (2, 2)).fill(0.0);
    }
    let mu = crate::linalg::min_eigenvalue(&(&w * &coupling * &w));
    if 1.0 + mu >= SEVERITY_COUPLING_MARGIN {
        return r;
    }
    let s = (1.0 - SEVERITY_COUPLING_MARGIN) / -mu;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let mut v = r.view_mut((2 * a, 2 * b), (2, 2));
                v *= s;
            }
        }
    }
    r
}

pub fn severity_contribution(
    c: &ClusterData,
    params: &SeverityParams,
    structure: &CorrelationStructure,
    chain: GammaChainRule,
) -> Result<Contribution, GeeError> {
    let factor = match chain {
        GammaChainRule::Include => params.gamma,
        GammaChainRule::Omit => 1.0,
    };
    let p = severity_pieces(c, params.cutpoints, &params.beta, params.gamma, factor);
    let r = severity_r(structure, c, &p.probs);
    let v = crate::linalg::working_covariance(&p.var, &r);
    Ok(cluster_contribution(&p.d, &v, &p.resid)?)
}

/// Clusters below this count are processed sequentially; thread hand-off
/// costs more than the work.
const PARALLEL_MIN_CLUSTERS: usize = 128;

/// Maps `f` over clusters, in parallel for large inputs, keeping order.
pub(crate) fn map_clusters<T: Send>(
    clusters: &[&ClusterData],
    f: impl Fn(&ClusterData) -> T + Sync + Send,
) -> Vec<T> {
    if clusters.len() >= PARALLEL_MIN_CLUSTERS {
        clusters.par_iter().map(|c| f(c)).collect()
    } else {
        clusters.iter().map(|c| f(c)).collect()
    }
}

/// Sums per-cluster contributions in cluster order.
pub(crate) fn reduce_ordered(
    parts: Vec<Result<Contribution, GeeError>>,
    p: usize,
) -> Result<Contribution, GeeError> {
    let mut total = Contribution::zeros(p);
    for part in parts {
        total.add(&part?);
    }
    Ok(total)
}

fn split_presence(theta: &DVector<f64>) -> (f64, DVector<f64>) {
    (theta[0], theta.rows(1, theta.len() - 1).into_owned())
}

fn split_severity(theta: &DVector<f64>) -> SeverityParams {
    SeverityParams::from_vector(theta, 1.0)
}

fn evaluate(
    prep: &Prepared,
    clusters: &[&ClusterData],
    theta: &DVector<f64>,
    structure: &CorrelationStructure,
    chain: GammaChainRule,
) -> Result<Contribution, GeeError> {
    let p = theta.len();
    match prep.piece {
        Piece::Presence => {
            let (alpha, beta) = split_presence(theta);
            let cache = PresenceRCache::new(structure, clusters);
            let parts = map_clusters(clusters, |c| presence_contribution(c, alpha, &beta, &cache));
            reduce_ordered(parts, p)
        }
        Piece::Severity => {
            let params = split_severity(theta);
            let parts = map_clusters(clusters, |c| severity_contribution(c, &params, structure, chain));
            reduce_ordered(parts, p)
        }
    }
}

fn residual_set(prep: &Prepared, clusters: &[&ClusterData], theta: &DVector<f64>) -> ResidualSet {
    match prep.piece {
        Piece::Presence => {
            let (alpha, beta) = split_presence(theta);
            let input: Vec<_> = clusters
                .iter()
                .map(|c| {
                    let eta = &c.design * &beta;
                    (
                        c.positions.clone(),
                        c.response.iter().map(|&y| y as f64).collect(),
                        eta.iter().map(|e| logistic(alpha + e)).collect(),
                    )
                })
                .collect();
            pearson_residuals_presence(&input)
        }
        Piece::Severity => {
            let params = split_severity(theta);
            let input: Vec<_> = clusters
                .iter()
                .map(|c| {
                    let p = severity_pieces(c, params.cutpoints, &params.beta, 1.0, 1.0);
                    (c.positions.clone(), c.response.iter().map(|&l| indicator_triple(l)).collect(), p.probs)
                })
                .collect();
            pearson_residuals_severity(&input)
        }
    }
}

fn feasible(prep: &Prepared, clusters: &[&ClusterData], theta: &DVector<f64>) -> bool {
    if theta.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let ordered = match prep.piece {
        Piece::Presence => true,
        Piece::Severity => theta[0] < theta[1],
    };
    ordered && max_abs_eta(prep, clusters, theta) <= DIVERGENCE_BOUND
}

fn max_abs_eta(prep: &Prepared, clusters: &[&ClusterData], theta: &DVector<f64>) -> f64 {
    let k = prep.n_intercepts();
    let beta = theta.rows(k, theta.len() - k).into_owned();
    let intercepts: Vec<f64> = theta.rows(0, k).iter().copied().collect();
    let mut m: f64 = 0.0;
    for c in clusters {
        for e in (&c.design * &beta).iter() {
            for a in &intercepts {
                m = m.max((a + e).abs());
            }
        }
    }
    m
}

fn initial_theta(prep: &Prepared, clusters: &[&ClusterData]) -> DVector<f64> {
    let logit = |p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        (p / (1.0 - p)).ln()
    };
    let mut theta = DVector::zeros(prep.n_params());
    match prep.piece {
        Piece::Presence => {
            let n: usize = clusters.iter().map(|c| c.len()).sum();
            let zeros: usize = clusters.iter().flat_map(|c| c.response.iter()).map(|&y| y as usize).sum();
            theta[0] = logit(zeros as f64 / n.max(1) as f64);
        }
        Piece::Severity => {
            let mut counts = [0usize; SEVERITY_LEVELS];
            for c in clusters {
                for &l in &c.response {
                    counts[l as usize - 1] += 1;
                }
            }
            let n = counts.iter().sum::<usize>().max(1) as f64;
            theta[0] = logit(counts[0] as f64 / n);
            theta[1] = logit((counts[0] + counts[1]) as f64 / n);
            if theta[1] <= theta[0] {
                theta[1] = theta[0] + 1e-3;
            }
        }
    }
    theta
}

/// Optional starting point for a fit, e.g. the full-data estimate when
/// refitting on a leave-one-out subset.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub theta: DVector<f64>,
    pub correlation: CorrelationStructure,
    pub phi: f64,
}

impl WarmStart {
    pub fn from_fit(fit: &FitResult) -> Self {
        Self { theta: fit.active_vector(), correlation: fit.correlation.clone(), phi: fit.phi }
    }
}

fn push_warning(warnings: &mut Vec<String>, w: String) {
    if !warnings.contains(&w) {
        warnings.push(w);
    }
}

/// Moment update of phi and the working correlation from current residuals.
fn update_nuisance(
    prep: &Prepared,
    clusters: &[&ClusterData],
    theta: &DVector<f64>,
    settings: &FitSettings,
    phi: &mut f64,
    structure: &mut CorrelationStructure,
    warnings: &mut Vec<String>,
) -> ResidualSet {
    let residuals = residual_set(prep, clusters, theta);
    match estimate_phi(&residuals) {
        Ok(d) if d.phi > 0.0 && d.phi.is_finite() => *phi = d.phi,
        Ok(_) | Err(_) => push_warning(warnings, "dispersion not estimable; kept previous value".into()),
    }
    if settings.fixed_correlation.is_none() {
        match estimate_structure(settings.structure, &residuals, *phi, settings.scaling, settings.pooling) {
            Ok((s, w)) => {
                *structure = s;
                if let Some(w) = w {
                    push_warning(warnings, w);
                }
            }
            Err(e) => push_warning(warnings, format!("correlation not re-estimated: {e}")),
        }
    }
    residuals
}

/// Fits the prepared problem on a subset of its clusters.
pub fn fit_clusters(
    prep: &Prepared,
    clusters: &[&ClusterData],
    settings: &FitSettings,
    start: Option<&WarmStart>,
) -> Result<FitResult, GeeError> {
    settings.validate()?;
    if clusters.is_empty() {
        return Err(GeeError::NoClusters);
    }
    let mut warnings = Vec::new();
    let (mut theta, mut structure, mut phi) = match start {
        Some(w) => (w.theta.clone(), w.correlation.clone(), w.phi),
        None => (initial_theta(prep, clusters), CorrelationStructure::initial(settings.structure), 1.0),
    };
    if let Some(fixed) = &settings.fixed_correlation {
        structure = fixed.clone();
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;

    for iter in 0..settings.max_iter {
        iterations = iter + 1;
        let current = match evaluate(prep, clusters, &theta, &structure, settings.chain) {
            Ok(c) => c,
            Err(GeeError::SingularSystem) if iter > 0 => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let delta = match solve_spd(&current.information, &current.score) {
            Ok(d) => d,
            Err(_) if iter > 0 => {
                diverged = true;
                break;
            }
            Err(_) => return Err(GeeError::SingularSystem),
        };
        let base_norm = current.score.amax();
        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=settings.step_halving {
            let trial = &theta + &step;
            if feasible(prep, clusters, &trial) {
                let better = match evaluate(prep, clusters, &trial, &structure, settings.chain) {
                    Ok(c) => c.score.amax() <= base_norm,
                    Err(_) => false,
                };
                if better {
                    accepted = Some(trial);
                    break;
                }
            }
            step *= 0.5;
        }
        // Without an improving step, take the smallest feasible one.
        let next = match accepted {
            Some(t) => t,
            None => {
                let t = &theta + &step;
                if feasible(prep, clusters, &t) {
                    t
                } else {
                    let t = &theta + &step;
                    if t.iter().all(|v| v.is_finite()) && max_abs_eta(prep, clusters, &t) > DIVERGENCE_BOUND {
                        diverged = true;
                    } else {
                        push_warning(&mut warnings, "no feasible step; iteration stopped".into());
                    }
                    break;
                }
            }
        };
        let change = step.amax();
        trace.push(change);
        theta = next;
        update_nuisance(prep, clusters, &theta, settings, &mut phi, &mut structure, &mut warnings);
        if change <= settings.tol {
            converged = true;
            break;
        }
    }

    let residuals = residual_set(prep, clusters, &theta);
    let score_max_abs = evaluate(prep, clusters, &theta, &structure, settings.chain)
        .map(|c| c.score.amax())
        .unwrap_or(f64::NAN);
    if diverged {
        push_warning(&mut warnings, "estimates diverged (separation or degenerate response)".into());
    } else if !converged {
        push_warning(&mut warnings, format!("no convergence after {} iterations", settings.max_iter));
    }

    let k = prep.n_intercepts();
    let mut beta = vec![0.0; prep.design_names.len()];
    for (j, &col) in prep.active.iter().enumerate() {
        beta[col] = theta[k + j];
    }
    let active = (0..prep.design_names.len()).map(|i| prep.active.contains(&i)).collect();
    Ok(FitResult {
        piece: prep.piece,
        time: prep.time,
        intercepts: theta.rows(0, k).iter().copied().collect(),
        beta,
        design_names: prep.design_names.clone(),
        active,
        correlation: structure,
        phi,
        converged: converged && !diverged,
        diverged,
        iterations,
        trace,
        score_max_abs,
        n_clusters: clusters.len(),
        n_obs: clusters.iter().map(|c| c.len()).sum(),
        warnings,
        residuals: Some(residuals),
    })
}

pub fn fit_prepared(prep: &Prepared, settings: &FitSettings) -> Result<FitResult, GeeError> {
    fit_clusters(prep, &prep.all_clusters(), settings, None)
}

pub fn fit_presence(view: &PresenceView, settings: &FitSettings) -> Result<FitResult, GeeError> {
    fit_prepared(&Prepared::presence(view)?, settings)
}

pub fn fit_severity(view: &SeverityView, settings: &FitSettings) -> Result<FitResult, GeeError> {
    fit_prepared(&Prepared::severity(view)?, settings)
}

/// Estimating function evaluated at a fitted result, over all clusters.
pub fn estimating_function(
    prep: &Prepared,
    fit: &FitResult,
    chain: GammaChainRule,
) -> Result<DVector<f64>, GeeError> {
    Ok(evaluate(prep, &prep.all_clusters(), &fit.active_vector(), &fit.correlation, chain)?.score)
}
