//! Jackknife standard errors over clusters, positive-part James-Stein
//! shrinkage of standardized estimates across times, percentile cluster
//! bootstrap and significance flags.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combined::{combined_result, fit_combined_clusters, CombinedError, CombinedFit, Frozen};
use crate::correlation::{Piece, StructureKind};
use crate::data::{DataError, Dataset};
use crate::gee::{fit_clusters, ClusterData, FitResult, FitSettings, GeeError, Prepared, WarmStart};

/// Share of leave-one-out refits allowed to fail.
pub const JACKKNIFE_MAX_DROP: f64 = 0.05;
/// Share of bootstrap replicates allowed to fail.
pub const BOOTSTRAP_MAX_FAIL: f64 = 0.20;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("need at least two clusters, got {0}")]
    TooFewClusters(usize),
    #[error("{dropped} of {total} leave-one-out refits failed")]
    JackknifeUnstable { dropped: usize, total: usize },
    #[error("{failures} of {b} bootstrap replicates failed")]
    TooManyFailures { failures: usize, b: usize },
    #[error("bootstrap needs at least two replicates, got {0}")]
    InvalidReplicates(usize),
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),
    #[error("unknown James-Stein variant `{0}`")]
    UnknownVariant(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gee(#[from] GeeError),
    #[error(transparent)]
    Combined(#[from] CombinedError),
}

/// A: separate presence, B: separate severity, C: combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
    C,
}

impl Family {
    pub fn pieces(self) -> &'static [Piece] {
        match self {
            Family::A => &[Piece::Presence],
            Family::B => &[Piece::Severity],
            Family::C => &[Piece::Presence, Piece::Severity],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Family {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Family::A),
            "B" => Ok(Family::B),
            "C" => Ok(Family::C),
            _ => Err(InferenceError::UnknownFamily(s.to_string())),
        }
    }
}

/// Norm used in the James-Stein shrinkage factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JsVariant {
    /// 1 - (T-2) / sum(b^2).
    #[default]
    Paper,
    /// 1 - (T-2) / sum((b - mean)^2).
    Centered,
}

impl JsVariant {
    pub fn name(self) -> &'static str {
        match self {
            JsVariant::Paper => "paper",
            JsVariant::Centered => "centered",
        }
    }
}

impl FromStr for JsVariant {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(JsVariant::Paper),
            "centered" => Ok(JsVariant::Centered),
            other => Err(InferenceError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub presence_structure: StructureKind,
    pub severity_structure: StructureKind,
    pub settings: FitSettings,
}

impl ModelSpec {
    /// Separate model with one structure code for its piece.
    pub fn single(family: Family, structure: StructureKind, settings: FitSettings) -> Self {
        Self { family, presence_structure: structure, severity_structure: structure, settings }
    }

    /// Model name such as `A.1.3` or `C.4.4.1`.
    pub fn name(&self, time: u8) -> String {
        match self.family {
            Family::A => format!("A.{}.{time}", self.presence_structure.code()),
            Family::B => format!("B.{}.{time}", self.severity_structure.code()),
            Family::C => format!(
                "C.{}.{}.{time}",
                self.presence_structure.code(),
                self.severity_structure.code()
            ),
        }
    }

    fn piece_settings(&self, piece: Piece) -> FitSettings {
        let structure = match piece {
            Piece::Presence => self.presence_structure,
            Piece::Severity => self.severity_structure,
        };
        FitSettings { structure, ..self.settings.clone() }
    }
}

/// Prepared data for one time point.
pub struct TimeContext {
    pub time: u8,
    pub spec: ModelSpec,
    pub presence: Option<Prepared>,
    pub severity: Option<Prepared>,
    /// Severity rows on the presence columns, for the combined fit.
    pub severity_shared: Option<Prepared>,
}

/// Fits at one time on all clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullFit {
    pub presence: Option<FitResult>,
    pub severity: Option<FitResult>,
    pub combined: Option<CombinedFit>,
}

/// Reported slope vectors (full design) per piece.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimates {
    pub presence: Option<Vec<f64>>,
    pub severity: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub converged: bool,
}

impl PointEstimates {
    pub fn piece(&self, piece: Piece) -> Option<&Vec<f64>> {
        match piece {
            Piece::Presence => self.presence.as_ref(),
            Piece::Severity => self.severity.as_ref(),
        }
    }
}

impl FullFit {
    pub fn estimates(&self) -> PointEstimates {
        match &self.combined {
            Some(c) => PointEstimates {
                presence: Some(c.beta.clone()),
                severity: Some(c.severity_beta.clone()),
                gamma: Some(c.gamma),
                converged: c.converged
                    && self.presence.as_ref().is_some_and(|f| f.converged)
                    && self.severity.as_ref().is_some_and(|f| f.converged),
            },
            None => PointEstimates {
                presence: self.presence.as_ref().map(|f| f.beta.clone()),
                severity: self.severity.as_ref().map(|f| f.beta.clone()),
                gamma: None,
                converged: self.presence.iter().chain(self.severity.iter()).all(|f| f.converged),
            },
        }
    }

    /// Active-column mask of a reported piece.
    pub fn active(&self, piece: Piece) -> Option<Vec<bool>> {
        if let Some(c) = &self.combined {
            return Some(c.active.clone());
        }
        match piece {
            Piece::Presence => self.presence.as_ref().map(|f| f.active.clone()),
            Piece::Severity => self.severity.as_ref().map(|f| f.active.clone()),
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w: Vec<String> = Vec::new();
        for f in self.presence.iter().chain(self.severity.iter()) {
            w.extend(f.warnings.iter().map(|s| format!("{}: {s}", f.piece.name())));
        }
        if let Some(c) = &self.combined {
            w.extend(c.warnings.iter().cloned());
        }
        w
    }
}

fn subset<'a>(prep: &'a Prepared, exclude: Option<&str>) -> Vec<&'a ClusterData> {
    prep.clusters.iter().filter(|c| Some(c.id.as_str()) != exclude).collect()
}

impl TimeContext {
    pub fn new(dataset: &Dataset, spec: &ModelSpec, time: u8) -> Result<Self, InferenceError> {
        let mut ctx = Self { time, spec: spec.clone(), presence: None, severity: None, severity_shared: None };
        let needs_presence = matches!(spec.family, Family::A | Family::C);
        let needs_severity = matches!(spec.family, Family::B | Family::C);
        if needs_presence {
            ctx.presence = Some(Prepared::presence(&dataset.presence_view(time)?)?);
        }
        if needs_severity {
            let view = dataset.severity_view(time)?;
            ctx.severity = Some(Prepared::severity(&view)?);
            if let Some(p) = &ctx.presence {
                ctx.severity_shared = Some(Prepared::severity_on_columns(&view, &p.active));
            }
        }
        Ok(ctx)
    }

    /// Clusters whose removal changes the fit.
    pub fn cluster_ids(&self) -> Vec<String> {
        let prep = self.presence.as_ref().or(self.severity.as_ref()).expect("at least one piece");
        prep.clusters.iter().map(|c| c.id.clone()).collect()
    }

    fn fit(&self, exclude: Option<&str>, warm: Option<&FullFit>) -> Result<FullFit, InferenceError> {
        let mut out = FullFit { presence: None, severity: None, combined: None };
        let warm_p = warm.and_then(|w| w.presence.as_ref()).map(WarmStart::from_fit);
        let warm_s = warm.and_then(|w| w.severity.as_ref()).map(WarmStart::from_fit);
        if let Some(p) = &self.presence {
            let settings = self.spec.piece_settings(Piece::Presence);
            out.presence = Some(fit_clusters(p, &subset(p, exclude), &settings, warm_p.as_ref())?);
        }
        if let Some(s) = &self.severity {
            let settings = self.spec.piece_settings(Piece::Severity);
            out.severity = Some(fit_clusters(s, &subset(s, exclude), &settings, warm_s.as_ref())?);
        }
        if self.spec.family == Family::C {
            let pp = self.presence.as_ref().expect("presence prepared");
            let sc = self.severity_shared.as_ref().expect("severity prepared");
            let fp = out.presence.as_ref().expect("presence fit");
            let fs = out.severity.as_ref().expect("severity fit");
            let frozen = Frozen::from_fits(fp, fs)?;
            let start = match warm.and_then(|w| w.combined.as_ref()) {
                Some(c) => pp.active.iter().map(|&j| c.beta[j]).collect::<Vec<_>>(),
                None => pp.active.iter().map(|&j| fp.beta[j]).collect(),
            };
            let pres = subset(pp, exclude);
            let sev = subset(sc, exclude);
            let settings = self.spec.settings.clone();
            let (beta, state) =
                fit_combined_clusters(&pres, &sev, &frozen, DVector::from_vec(start), &settings)?;
            let n_obs = pres.iter().map(|c| c.len()).sum::<usize>() + sev.iter().map(|c| c.len()).sum::<usize>();
            out.combined = Some(combined_result(pp, &frozen, &beta, state, n_obs));
        }
        Ok(out)
    }

    pub fn fit_full(&self) -> Result<FullFit, InferenceError> {
        self.fit(None, None)
    }

    pub fn fit_without(&self, cluster: &str, warm: &FullFit) -> Result<PointEstimates, InferenceError> {
        Ok(self.fit(Some(cluster), Some(warm))?.estimates())
    }
}

/// Jackknife standard errors per piece (full design; inactive columns NaN).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeResult {
    pub presence: Option<Vec<f64>>,
    pub severity: Option<Vec<f64>>,
    pub replicates: usize,
    pub dropped: usize,
}

impl JackknifeResult {
    fn unavailable(full: &FullFit, dropped: usize) -> Self {
        let nan = |piece| full.active(piece).map(|a| vec![f64::NAN; a.len()]);
        Self { presence: nan(Piece::Presence), severity: nan(Piece::Severity), replicates: 0, dropped }
    }

    pub fn piece(&self, piece: Piece) -> Option<&Vec<f64>> {
        match piece {
            Piece::Presence => self.presence.as_ref(),
            Piece::Severity => self.severity.as_ref(),
        }
    }
}

/// sqrt((N-1)/N * sum_i (b_i - mean)^2) for each coordinate.
pub fn jackknife_from_replicates(reps: &[Vec<f64>]) -> Vec<f64> {
    let n = reps.len() as f64;
    let q = reps.first().map_or(0, |r| r.len());
    (0..q)
        .map(|g| {
            let mean = reps.iter().map(|r| r[g]).sum::<f64>() / n;
            let ss: f64 = reps.iter().map(|r| (r[g] - mean).powi(2)).sum();
            ((n - 1.0) / n * ss).sqrt()
        })
        .collect()
}

pub fn jackknife_se(ctx: &TimeContext, full: &FullFit) -> Result<JackknifeResult, InferenceError> {
    let ids = ctx.cluster_ids();
    if ids.len() < 2 {
        return Err(InferenceError::TooFewClusters(ids.len()));
    }
    let reps: Vec<Option<PointEstimates>> = ids
        .par_iter()
        .map(|id| ctx.fit_without(id, full).ok().filter(|e| e.converged))
        .collect();
    let kept: Vec<PointEstimates> = reps.into_iter().flatten().collect();
    let dropped = ids.len() - kept.len();
    if dropped as f64 > JACKKNIFE_MAX_DROP * ids.len() as f64 || kept.len() < 2 {
        return Err(InferenceError::JackknifeUnstable { dropped, total: ids.len() });
    }
    let se_for = |piece: Piece| -> Option<Vec<f64>> {
        let vals: Vec<Vec<f64>> = kept.iter().map(|e| e.piece(piece).cloned()).collect::<Option<_>>()?;
        let active = full.active(piece)?;
        let se = jackknife_from_replicates(&vals);
        Some(se.into_iter().zip(active).map(|(s, a)| if a { s } else { f64::NAN }).collect())
    };
    Ok(JackknifeResult {
        presence: se_for(Piece::Presence),
        severity: se_for(Piece::Severity),
        replicates: kept.len(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageResult {
    pub js_values: Vec<f64>,
    pub shrink_factor: f64,
}

/// Positive-part James-Stein shrinkage of `values` toward their mean.
/// Fewer than three values, or any non-finite value, gives NaN output.
pub fn james_stein(values: &[f64], variant: JsVariant) -> ShrinkageResult {
    let t = values.len();
    if t < 3 || values.iter().any(|v| !v.is_finite()) {
        return ShrinkageResult { js_values: vec![f64::NAN; t], shrink_factor: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    let norm: f64 = match variant {
        JsVariant::Paper => values.iter().map(|v| v * v).sum(),
        JsVariant::Centered => values.iter().map(|v| (v - mean).powi(2)).sum(),
    };
    let factor = if norm > 0.0 { (1.0 - (t as f64 - 2.0) / norm).max(0.0) } else { 0.0 };
    ShrinkageResult { js_values: values.iter().map(|v| mean + factor * (v - mean)).collect(), shrink_factor: factor }
}

/// Per-time, per-piece quantities from one run of the point pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PieceTrack {
    pub piece: Piece,
    /// Indexed [time position][coefficient].
    pub estimates: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub standardized: Vec<Vec<f64>>,
    pub js: Vec<Vec<f64>>,
    pub shrink_factors: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub times: Vec<u8>,
    pub design_names: Vec<String>,
    pub tracks: Vec<PieceTrack>,
    pub fits: Vec<FullFit>,
    pub jackknife: Vec<JackknifeResult>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    pub fn track(&self, piece: Piece) -> Option<&PieceTrack> {
        self.tracks.iter().find(|t| t.piece == piece)
    }
}

/// Fit, jackknife SE, standardize and shrink across `times`.
pub fn run_pipeline(
    dataset: &Dataset,
    spec: &ModelSpec,
    times: &[u8],
    js: JsVariant,
) -> Result<PipelineOutput, InferenceError> {
    let mut fits = Vec::new();
    let mut jackknife = Vec::new();
    let mut converged = true;
    let mut warnings = Vec::new();
    for &t in times {
        let ctx = TimeContext::new(dataset, spec, t)?;
        let full = ctx.fit_full()?;
        converged &= full.estimates().converged;
        let jk = match jackknife_se(&ctx, &full) {
            Ok(jk) => jk,
            // Reported with NaN standard errors; the run counts as not converged.
            Err(InferenceError::JackknifeUnstable { dropped, total }) => {
                converged = false;
                warnings.push(format!("{}: {dropped} of {total} leave-one-out refits failed", spec.name(t)));
                JackknifeResult::unavailable(&full, dropped)
            }
            Err(e) => return Err(e),
        };
        jackknife.push(jk);
        fits.push(full);
    }
    let mut tracks = Vec::new();
    for &piece in spec.family.pieces() {
        // Columns dropped at a time are reported as NaN.
        let estimates: Vec<Vec<f64>> = fits
            .iter()
            .map(|f| {
                let est = f.estimates().piece(piece).cloned().unwrap_or_default();
                let active = f.active(piece).unwrap_or_default();
                est.into_iter().zip(active).map(|(b, a)| if a { b } else { f64::NAN }).collect()
            })
            .collect();
        let se: Vec<Vec<f64>> = jackknife.iter().map(|j| j.piece(piece).cloned().unwrap_or_default()).collect();
        let standardized: Vec<Vec<f64>> = estimates
            .iter()
            .zip(&se)
            .map(|(b, s)| b.iter().zip(s).map(|(b, s)| b / s).collect())
            .collect();
        let q = estimates.first().map_or(0, |e| e.len());
        let mut js_by_time = vec![vec![f64::NAN; q]; times.len()];
        let mut shrink_factors = Vec::with_capacity(q);
        for g in 0..q {
            let track: Vec<f64> = standardized.iter().map(|s| s[g]).collect();
            let shrunk = james_stein(&track, js);
            for (k, v) in shrunk.js_values.into_iter().enumerate() {
                js_by_time[k][g] = v;
            }
            shrink_factors.push(shrunk.shrink_factor);
        }
        tracks.push(PieceTrack { piece, estimates, se, standardized, js: js_by_time, shrink_factors });
    }
    Ok(PipelineOutput {
        times: times.to_vec(),
        design_names: dataset.design_names(),
        tracks,
        fits,
        jackknife,
        converged,
        warnings,
    })
}

/// Sample quantile with linear interpolation between order statistics.
/// NaN inputs are ignored; an empty input gives NaN.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(deserialize_with = "crate::report::nan_from_null")]
    pub lower: f64,
    #[serde(deserialize_with = "crate::report::nan_from_null")]
    pub upper: f64,
}

impl Interval {
    pub fn from_replicates(values: &[f64]) -> Self {
        Self { lower: percentile(values, 0.025), upper: percentile(values, 0.975) }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Intervals for one piece, indexed [time position][coefficient].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceIntervals {
    pub piece: Piece,
    pub raw: Vec<Vec<Interval>>,
    pub standardized: Vec<Vec<Interval>>,
    pub js: Vec<Vec<Interval>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub b: usize,
    pub seeds: Vec<u64>,
    pub failures: usize,
    pub intervals: Vec<PieceIntervals>,
}

impl BootstrapResult {
    pub fn piece(&self, piece: Piece) -> Option<&PieceIntervals> {
        self.intervals.iter().find(|i| i.piece == piece)
    }
}

/// Cluster ids drawn with replacement for replicate seed `seed`.
pub fn draw_clusters(ids: &[String], seed: u64) -> Vec<&str> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ids.len()).map(|_| ids[rng.random_range(0..ids.len())].as_str()).collect()
}

/// Percentile cluster bootstrap of the full pipeline. Replicate r uses
/// seed `seed + r`.
pub fn cluster_bootstrap(
    dataset: &Dataset,
    spec: &ModelSpec,
    times: &[u8],
    js: JsVariant,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult, InferenceError> {
    if b < 2 {
        return Err(InferenceError::InvalidReplicates(b));
    }
    let ids = dataset.cluster_ids();
    let seeds: Vec<u64> = (0..b as u64).map(|r| seed.wrapping_add(r)).collect();
    let reps: Vec<Option<PipelineOutput>> = seeds
        .par_iter()
        .map(|&s| {
            let draws = draw_clusters(&ids, s);
            let resampled = dataset.resample_clusters(&draws);
            run_pipeline(&resampled, spec, times, js).ok().filter(|o| o.converged)
        })
        .collect();
    let kept: Vec<PipelineOutput> = reps.into_iter().flatten().collect();
    let failures = b - kept.len();
    if failures as f64 > BOOTSTRAP_MAX_FAIL * b as f64 || kept.len() < 2 {
        return Err(InferenceError::TooManyFailures { failures, b });
    }
    let q = dataset.n_design();
    let mut intervals = Vec::new();
    for &piece in spec.family.pieces() {
        let collect = |pick: &dyn Fn(&PieceTrack) -> &Vec<Vec<f64>>| -> Vec<Vec<Interval>> {
            (0..times.len())
                .map(|k| {
                    (0..q)
                        .map(|g| {
                            let vals: Vec<f64> =
                                kept.iter().map(|o| pick(o.track(piece).expect("piece"))[k][g]).collect();
                            Interval::from_replicates(&vals)
                        })
                        .collect()
                })
                .collect()
        };
        intervals.push(PieceIntervals {
            piece,
            raw: collect(&|t| &t.estimates),
            standardized: collect(&|t| &t.standardized),
            js: collect(&|t| &t.js),
        });
    }
    Ok(BootstrapResult { b, seeds, failures, intervals })
}

/// `*+` when the interval lies above zero, `*-` when below, else empty.
pub fn significance_flag(interval: &Interval) -> &'static str {
    if interval.lower > 0.0 {
        "*+"
    } else if interval.upper < 0.0 {
        "*-"
    } else {
        ""
    }
}
