//! Working correlation structures and their moment estimators.
//!
//! Residuals are Pearson residuals. A presence observation carries one
//! residual; a severity observation carries the three indicator residuals,
//! and the cross-product of two severity observations is the average of
//! their same-category products.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Position, POSITIONS};
use crate::mean_model::{multinomial_covariance, CellProbabilities, VARIANCE_FLOOR};

/// Bound applied to every estimated correlation parameter.
pub const RHO_BOUND: f64 = 0.99;
/// Minimum number of positive cross-products for the AR(1) slope fit
/// before falling back to the exchangeable estimator.
pub const AR1_MIN_PAIRS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum CorrelationError {
    #[error("no residuals to estimate dispersion from")]
    Empty,
    #[error("no within-cluster pairs of observations")]
    NoPairs,
    #[error("fewer than two usable AR(1) pairs with distinct tooth distances")]
    InsufficientPairs,
    #[error("jackknife correlation needs at least two clusters, got {0}")]
    TooFewClusters(usize),
    #[error("severity category {0} has zero probability")]
    DegenerateCategory(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown correlation structure `{0}`")]
    UnknownStructure(String),
    #[error("unknown scaling mode `{0}`")]
    UnknownScaling(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureKind {
    Independence,
    Exchangeable,
    Ar1,
    Jackknife,
}

impl StructureKind {
    pub const ALL: [StructureKind; 4] = [
        StructureKind::Independence,
        StructureKind::Exchangeable,
        StructureKind::Ar1,
        StructureKind::Jackknife,
    ];

    /// Model-name code: 1 independence, 2 exchangeable, 3 AR(1), 4 jackknife.
    pub fn code(self) -> u8 {
        match self {
            StructureKind::Independence => 1,
            StructureKind::Exchangeable => 2,
            StructureKind::Ar1 => 3,
            StructureKind::Jackknife => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Independence => "independence",
            StructureKind::Exchangeable => "exchangeable",
            StructureKind::Ar1 => "ar1",
            StructureKind::Jackknife => "jackknife",
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureKind {
    type Err = CorrelationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if let Ok(code) = s.parse::<u8>() {
            return Self::from_code(code).ok_or(CorrelationError::UnknownStructure(s));
        }
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or(CorrelationError::UnknownStructure(s))
    }
}

/// How the dispersion enters the correlation moment estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    /// Mean cross-product multiplied by phi.
    Paper,
    /// Mean cross-product divided by phi.
    #[default]
    LiangZeger,
}

impl ScalingMode {
    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::Paper => "paper",
            ScalingMode::LiangZeger => "liang-zeger",
        }
    }

    fn apply(self, mean_product: f64, phi: f64) -> f64 {
        match self {
            ScalingMode::Paper => mean_product * phi,
            ScalingMode::LiangZeger => mean_product / phi,
        }
    }
}

impl FromStr for ScalingMode {
    type Err = CorrelationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(ScalingMode::Paper),
            "liang-zeger" | "liangzeger" | "lz" => Ok(ScalingMode::LiangZeger),
            other => Err(CorrelationError::UnknownScaling(other.to_string())),
        }
    }
}

/// Which cluster products feed the leave-one-out jackknife correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JackknifePooling {
    /// Products of residuals from the same cluster only.
    #[default]
    WithinCluster,
    /// Products over every ordered pair of remaining clusters (i*, i**),
    /// including different clusters.
    CrossCluster,
}

/// Symmetric 16 x 16 correlation over (tooth, zone) positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatrix {
    values: Vec<Vec<f64>>,
}

impl PairwiseMatrix {
    pub fn identity() -> Self {
        let values = (0..POSITIONS)
            .map(|a| (0..POSITIONS).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { values }
    }

    pub fn get(&self, a: Position, b: Position) -> f64 {
        self.values[a.index()][b.index()]
    }

    pub fn set(&mut self, a: Position, b: Position, v: f64) {
        self.values[a.index()][b.index()] = v;
        self.values[b.index()][a.index()] = v;
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let mut m: f64 = 0.0;
        for a in 0..POSITIONS {
            for b in 0..POSITIONS {
                if a != b {
                    m = m.max(self.values[a][b].abs());
                }
            }
        }
        m
    }
}

/// A structure with its estimated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorrelationStructure {
    Independence,
    Exchangeable { rho: f64 },
    Ar1 { rho: f64 },
    Jackknife { matrix: PairwiseMatrix },
}

impl CorrelationStructure {
    /// Starting value for a structure kind (all correlations zero).
    pub fn initial(kind: StructureKind) -> Self {
        match kind {
            StructureKind::Independence => CorrelationStructure::Independence,
            StructureKind::Exchangeable => CorrelationStructure::Exchangeable { rho: 0.0 },
            StructureKind::Ar1 => CorrelationStructure::Ar1 { rho: 0.0 },
            StructureKind::Jackknife => CorrelationStructure::Jackknife {
                matrix: PairwiseMatrix::identity(),
            },
        }
    }

    pub fn kind(&self) -> StructureKind {
        match self {
            CorrelationStructure::Independence => StructureKind::Independence,
            CorrelationStructure::Exchangeable { .. } => StructureKind::Exchangeable,
            CorrelationStructure::Ar1 { .. } => StructureKind::Ar1,
            CorrelationStructure::Jackknife { .. } => StructureKind::Jackknife,
        }
    }

    /// Scalar parameter for exchangeable and AR(1) structures.
    pub fn rho(&self) -> Option<f64> {
        match self {
            CorrelationStructure::Exchangeable { rho } | CorrelationStructure::Ar1 { rho } => Some(*rho),
            _ => None,
        }
    }

    pub fn is_independence(&self) -> bool {
        matches!(self, CorrelationStructure::Independence)
    }

    /// Between-observation correlation for two distinct observations.
    pub fn between(&self, a: Position, b: Position) -> f64 {
        match self {
            CorrelationStructure::Independence => 0.0,
            CorrelationStructure::Exchangeable { rho } => *rho,
            CorrelationStructure::Ar1 { rho } => {
                let d = a.tooth_distance(b);
                if d == 0 {
                    1.0
                } else {
                    rho.powi(d as i32)
                }
            }
            CorrelationStructure::Jackknife { matrix } => matrix.get(a, b),
        }
    }
}

/// Which model piece a set of residuals came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Piece {
    Presence,
    Severity,
}

impl Piece {
    pub fn name(self) -> &'static str {
        match self {
            Piece::Presence => "presence",
            Piece::Severity => "severity",
        }
    }
}

/// Pearson residuals of one cluster; `values` holds `width` entries per
/// observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResiduals {
    pub positions: Vec<Position>,
    pub values: Vec<f64>,
}

impl ClusterResiduals {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub piece: Piece,
    /// Residuals per observation: 1 for presence, 3 for severity.
    pub width: usize,
    pub clusters: Vec<ClusterResiduals>,
    /// Observations skipped because a variance was zero.
    pub skipped: usize,
}

impl ResidualSet {
    pub fn new(piece: Piece, width: usize) -> Self {
        Self { piece, width, clusters: Vec::new(), skipped: 0 }
    }

    fn residuals<'a>(&self, c: &'a ClusterResiduals, r: usize) -> &'a [f64] {
        &c.values[r * self.width..(r + 1) * self.width]
    }

    fn product(&self, c: &ClusterResiduals, a: usize, b: usize) -> f64 {
        self.cross(self.residuals(c, a), self.residuals(c, b))
    }

    fn cross(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() / self.width as f64
    }

    /// Weight of a cluster inside the dispersion average. Presence counts
    /// each squared residual once per observation in its cluster.
    fn phi_weight(&self, c: &ClusterResiduals) -> f64 {
        match self.piece {
            Piece::Presence => c.len() as f64,
            Piece::Severity => 1.0,
        }
    }

    fn phi_parts(&self, c: &ClusterResiduals) -> (f64, f64) {
        let w = self.phi_weight(c);
        let ss: f64 = c.values.iter().map(|r| r * r).sum();
        (w * ss, w * c.values.len() as f64)
    }
}

/// (w - mu) / sqrt(var).
pub fn pearson_residual(observed: f64, mean: f64, variance: f64) -> Option<f64> {
    if variance <= VARIANCE_FLOOR || !variance.is_finite() {
        None
    } else {
        Some((observed - mean) / variance.sqrt())
    }
}

/// Presence residuals from zero-indicators and fitted P(zero) per cluster.
pub fn pearson_residuals_presence(clusters: &[(Vec<Position>, Vec<f64>, Vec<f64>)]) -> ResidualSet {
    let mut set = ResidualSet::new(Piece::Presence, 1);
    for (positions, observed, means) in clusters {
        let mut out = ClusterResiduals { positions: Vec::new(), values: Vec::new() };
        for ((pos, y), mu) in positions.iter().zip(observed).zip(means) {
            match pearson_residual(*y, *mu, mu * (1.0 - mu)) {
                Some(r) => {
                    out.positions.push(*pos);
                    out.values.push(r);
                }
                None => set.skipped += 1,
            }
        }
        set.clusters.push(out);
    }
    set
}

/// Severity residuals from indicator triples and cell probabilities.
pub fn pearson_residuals_severity(
    clusters: &[(Vec<Position>, Vec<[f64; 3]>, Vec<CellProbabilities>)],
) -> ResidualSet {
    let mut set = ResidualSet::new(Piece::Severity, 3);
    for (positions, indicators, probs) in clusters {
        let mut out = ClusterResiduals { positions: Vec::new(), values: Vec::new() };
        'obs: for ((pos, z), cp) in positions.iter().zip(indicators).zip(probs) {
            let mut r = [0.0; 3];
            for l in 0..3 {
                match pearson_residual(z[l], cp.pi[l], cp.pi[l] * (1.0 - cp.pi[l])) {
                    Some(v) => r[l] = v,
                    None => {
                        set.skipped += 1;
                        continue 'obs;
                    }
                }
            }
            out.positions.push(*pos);
            out.values.extend_from_slice(&r);
        }
        set.clusters.push(out);
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionEstimate {
    pub phi: f64,
    pub piece: Piece,
}

pub fn estimate_phi(residuals: &ResidualSet) -> Result<DispersionEstimate, CorrelationError> {
    let (num, den) = residuals
        .clusters
        .iter()
        .map(|c| residuals.phi_parts(c))
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    if den == 0.0 {
        return Err(CorrelationError::Empty);
    }
    Ok(DispersionEstimate { phi: num / den, piece: residuals.piece })
}

fn clamp_rho(rho: f64) -> f64 {
    if rho.is_nan() {
        0.0
    } else {
        rho.clamp(-RHO_BOUND, RHO_BOUND)
    }
}

/// Scaled mean of within-cluster cross-products over distinct positions.
pub fn estimate_rho_exchangeable(
    residuals: &ResidualSet,
    phi: f64,
    scaling: ScalingMode,
) -> Result<f64, CorrelationError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in &residuals.clusters {
        let n = c.len();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    sum += residuals.product(c, a, b);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(CorrelationError::NoPairs);
    }
    Ok(clamp_rho(scaling.apply(sum / count as f64, phi)))
}

/// (tooth distance, log cross-product) for every within-cluster pair on
/// different teeth with a positive product.
fn ar1_points(residuals: &ResidualSet) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for c in &residuals.clusters {
        let n = c.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let d = c.positions[a].tooth_distance(c.positions[b]);
                if d == 0 {
                    continue;
                }
                let prod = residuals.product(c, a, b);
                if prod > 0.0 {
                    pts.push((d as f64, prod.ln()));
                }
            }
        }
    }
    pts
}

/// exp(slope) of the least-squares regression of log cross-products on
/// tooth distance. Non-positive products and same-tooth pairs are dropped.
pub fn estimate_rho_ar1(residuals: &ResidualSet) -> Result<f64, CorrelationError> {
    let pts = ar1_points(residuals);
    ar1_slope(&pts).map(|s| clamp_rho(s.exp()))
}

fn ar1_slope(pts: &[(f64, f64)]) -> Result<f64, CorrelationError> {
    if pts.len() < 2 {
        return Err(CorrelationError::InsufficientPairs);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(CorrelationError::InsufficientPairs);
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// AR(1) estimate as used during fitting: too few positive pairs falls back
/// to the exchangeable estimator. Returns the structure and an optional
/// warning.
pub fn estimate_ar1_or_fallback(
    residuals: &ResidualSet,
    phi: f64,
    scaling: ScalingMode,
) -> Result<(CorrelationStructure, Option<String>), CorrelationError> {
    let pts = ar1_points(residuals);
    if pts.len() >= AR1_MIN_PAIRS {
        if let Ok(slope) = ar1_slope(&pts) {
            return Ok((CorrelationStructure::Ar1 { rho: clamp_rho(slope.exp()) }, None));
        }
    }
    let rho = estimate_rho_exchangeable(residuals, phi, scaling)?;
    Ok((
        CorrelationStructure::Exchangeable { rho },
        Some(format!(
            "AR(1) estimation had {} usable pairs; used exchangeable estimate {rho:.4}",
            pts.len()
        )),
    ))
}

#[derive(Clone)]
struct PairSums {
    sum: Vec<f64>,
    count: Vec<f64>,
}

impl PairSums {
    fn new() -> Self {
        Self { sum: vec![0.0; POSITIONS * POSITIONS], count: vec![0.0; POSITIONS * POSITIONS] }
    }
}

/// Leave-one-cluster-out correlation per position pair, averaged over the
/// left-out cluster.
pub fn estimate_rho_jackknife(
    residuals: &ResidualSet,
    scaling: ScalingMode,
    pooling: JackknifePooling,
) -> Result<PairwiseMatrix, CorrelationError> {
    let clusters: Vec<&ClusterResiduals> = residuals.clusters.iter().filter(|c| !c.is_empty()).collect();
    let n = clusters.len();
    if n < 2 {
        return Err(CorrelationError::TooFewClusters(n));
    }
    let w = residuals.width;

    // Dispersion totals.
    let parts: Vec<(f64, f64)> = clusters.iter().map(|c| residuals.phi_parts(c)).collect();
    let phi_num: f64 = parts.iter().map(|p| p.0).sum();
    let phi_den: f64 = parts.iter().map(|p| p.1).sum();

    let mut acc = vec![0.0; POSITIONS * POSITIONS];
    let mut hits = vec![0usize; POSITIONS * POSITIONS];

    match pooling {
        JackknifePooling::WithinCluster => {
            let mut total = PairSums::new();
            let per_cluster: Vec<Vec<(usize, f64)>> = clusters
                .iter()
                .map(|c| {
                    let mut v = Vec::with_capacity(c.len() * c.len());
                    for a in 0..c.len() {
                        for b in 0..c.len() {
                            if a != b {
                                let idx = c.positions[a].index() * POSITIONS + c.positions[b].index();
                                v.push((idx, residuals.product(c, a, b)));
                            }
                        }
                    }
                    v
                })
                .collect();
            for items in &per_cluster {
                for &(idx, p) in items {
                    total.sum[idx] += p;
                    total.count[idx] += 1.0;
                }
            }
            let mut loo = total.clone();
            for (i, items) in per_cluster.iter().enumerate() {
                for &(idx, p) in items {
                    loo.sum[idx] -= p;
                    loo.count[idx] -= 1.0;
                }
                let phi = (phi_num - parts[i].0) / (phi_den - parts[i].1);
                for idx in 0..POSITIONS * POSITIONS {
                    if loo.count[idx] > 0.0 {
                        acc[idx] += clamp_rho(scaling.apply(loo.sum[idx] / loo.count[idx], phi));
                        hits[idx] += 1;
                    }
                }
                for &(idx, p) in items {
                    loo.sum[idx] += p;
                    loo.count[idx] += 1.0;
                }
            }
        }
        JackknifePooling::CrossCluster => {
            // Column sums of residuals by (position, category).
            let mut colsum = vec![0.0; POSITIONS * w];
            let mut colcount = vec![0.0; POSITIONS];
            for c in &clusters {
                for (r, pos) in c.positions.iter().enumerate() {
                    colcount[pos.index()] += 1.0;
                    for l in 0..w {
                        colsum[pos.index() * w + l] += c.values[r * w + l];
                    }
                }
            }
            for (i, c) in clusters.iter().enumerate() {
                let mut s = colsum.clone();
                let mut k = colcount.clone();
                for (r, pos) in c.positions.iter().enumerate() {
                    k[pos.index()] -= 1.0;
                    for l in 0..w {
                        s[pos.index() * w + l] -= c.values[r * w + l];
                    }
                }
                let phi = (phi_num - parts[i].0) / (phi_den - parts[i].1);
                for a in 0..POSITIONS {
                    for b in 0..POSITIONS {
                        let cnt = k[a] * k[b];
                        if a == b || cnt <= 0.0 {
                            continue;
                        }
                        let prod = residuals.cross(&s[a * w..(a + 1) * w], &s[b * w..(b + 1) * w]);
                        acc[a * POSITIONS + b] += clamp_rho(scaling.apply(prod / cnt, phi));
                        hits[a * POSITIONS + b] += 1;
                    }
                }
            }
        }
    }

    let mut matrix = PairwiseMatrix::identity();
    for a in 0..POSITIONS {
        for b in (a + 1)..POSITIONS {
            let ab = a * POSITIONS + b;
            let ba = b * POSITIONS + a;
            let mean_ab = if hits[ab] > 0 { acc[ab] / hits[ab] as f64 } else { 0.0 };
            let mean_ba = if hits[ba] > 0 { acc[ba] / hits[ba] as f64 } else { 0.0 };
            matrix.set(Position::from_index(a), Position::from_index(b), 0.5 * (mean_ab + mean_ba));
        }
    }
    Ok(matrix)
}

/// Re-estimates the parameters of `kind` from residuals.
pub fn estimate_structure(
    kind: StructureKind,
    residuals: &ResidualSet,
    phi: f64,
    scaling: ScalingMode,
    pooling: JackknifePooling,
) -> Result<(CorrelationStructure, Option<String>), CorrelationError> {
    match kind {
        StructureKind::Independence => Ok((CorrelationStructure::Independence, None)),
        StructureKind::Exchangeable => Ok((
            CorrelationStructure::Exchangeable { rho: estimate_rho_exchangeable(residuals, phi, scaling)? },
            None,
        )),
        StructureKind::Ar1 => estimate_ar1_or_fallback(residuals, phi, scaling),
        StructureKind::Jackknife => Ok((
            CorrelationStructure::Jackknife { matrix: estimate_rho_jackknife(residuals, scaling, pooling)? },
            None,
        )),
    }
}

/// 3x3 correlation of an indicator triple under the multinomial model.
pub fn within_obs_corr(cp: &CellProbabilities) -> Result<[[f64; 3]; 3], CorrelationError> {
    if let Some(l) = cp.pi.iter().position(|&p| p <= 0.0 || p >= 1.0) {
        return Err(CorrelationError::DegenerateCategory(l + 1));
    }
    let cov = multinomial_covariance(&cp.pi);
    let mut out = [[0.0; 3]; 3];
    for l in 0..3 {
        for m in 0..3 {
            out[l][m] = if l == m { 1.0 } else { cov[l][m] / (cov[l][l] * cov[m][m]).sqrt() };
        }
    }
    Ok(out)
}

/// Correlation between the first two indicators with variances floored,
/// bounded away from -1 so the 2x2 block stays invertible.
pub fn reduced_within_corr(cp: &CellProbabilities) -> f64 {
    let v1 = (cp.pi[0] * (1.0 - cp.pi[0])).max(VARIANCE_FLOOR);
    let v2 = (cp.pi[1] * (1.0 - cp.pi[1])).max(VARIANCE_FLOOR);
    (-cp.pi[0] * cp.pi[1] / (v1 * v2).sqrt()).max(-1.0 + crate::linalg::EIGEN_FLOOR)
}

/// Presence working correlation over a cluster's stacked positions.
pub fn assemble_r_presence(structure: &CorrelationStructure, positions: &[Position]) -> DMatrix<f64> {
    let n = positions.len();
    DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            1.0
        } else {
            structure.between(positions[a], positions[b])
        }
    })
}

/// Severity working correlation: within-observation entries come from the
/// blocks `B`, between-observation entries from the structure. Each block
/// is k x k, so the result has side k n_i.
pub fn assemble_r_severity(
    structure: &CorrelationStructure,
    blocks: &[DMatrix<f64>],
    positions: &[Position],
) -> Result<DMatrix<f64>, CorrelationError> {
    if blocks.len() != positions.len() {
        return Err(CorrelationError::DimensionMismatch(format!(
            "{} blocks for {} positions",
            blocks.len(),
            positions.len()
        )));
    }
    let k = blocks.first().map_or(0, |b| b.nrows());
    if blocks.iter().any(|b| b.nrows() != k || b.ncols() != k) {
        return Err(CorrelationError::DimensionMismatch("blocks differ in size".into()));
    }
    let n = positions.len();
    let mut r = DMatrix::zeros(k * n, k * n);
    for a in 0..n {
        for b in 0..n {
            if a == b {
                r.view_mut((k * a, k * a), (k, k)).copy_from(&blocks[a]);
            } else {
                let rho = structure.between(positions[a], positions[b]);
                r.view_mut((k * a, k * b), (k, k)).fill(rho);
            }
        }
    }
    Ok(r)
}
