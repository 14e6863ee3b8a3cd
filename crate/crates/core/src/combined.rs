//! Two-step combined model: the amplifier gamma is read off the separate
//! fits, then a shared slope vector is solved from the summed presence and
//! severity estimating equations with intercepts, gamma and working
//! correlations held at their separate-fit values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::CorrelationStructure;
use crate::gee::{
    map_clusters, presence_contribution, reduce_ordered, severity_pieces, severity_r, ClusterData, FitResult, FitSettings,
    GeeError, PresenceRCache, Prepared, DIVERGENCE_BOUND,
};
use crate::linalg::{cluster_contribution, solve_spd, Contribution};
use crate::mean_model::GammaChainRule;

/// Denominators of gamma below this magnitude are treated as zero.
pub const GAMMA_DENOMINATOR_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum CombinedError {
    #[error("sum of presence slopes is zero; gamma is undefined")]
    ZeroDenominator,
    #[error("presence and severity fits have different designs ({0} vs {1} columns)")]
    DesignMismatch(usize, usize),
    #[error(transparent)]
    Gee(#[from] GeeError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinedFit {
    pub time: u8,
    pub gamma: f64,
    /// Shared slopes, indexed by the full design; inactive columns hold 0.
    pub beta: Vec<f64>,
    /// gamma * beta, elementwise.
    pub severity_beta: Vec<f64>,
    pub presence_alpha: f64,
    pub severity_cutpoints: [f64; 2],
    pub design_names: Vec<String>,
    pub active: Vec<bool>,
    pub presence_correlation: CorrelationStructure,
    pub severity_correlation: CorrelationStructure,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<f64>,
    /// Max-abs component of the summed estimating function at the estimate.
    pub score_max_abs: f64,
    pub n_obs: usize,
    pub warnings: Vec<String>,
}

/// Ratio of summed severity slopes to summed presence slopes.
pub fn estimate_gamma(presence: &FitResult, severity: &FitResult) -> Result<f64, CombinedError> {
    if presence.beta.len() != severity.beta.len() {
        return Err(CombinedError::DesignMismatch(presence.beta.len(), severity.beta.len()));
    }
    let den: f64 = presence.beta.iter().sum();
    if den.abs() < GAMMA_DENOMINATOR_FLOOR {
        return Err(CombinedError::ZeroDenominator);
    }
    Ok(severity.beta.iter().sum::<f64>() / den)
}

/// Frozen quantities for the shared-slope iteration.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub gamma: f64,
    pub presence_alpha: f64,
    pub cutpoints: [f64; 2],
    pub presence_correlation: CorrelationStructure,
    pub severity_correlation: CorrelationStructure,
}

impl Frozen {
    pub fn from_fits(presence: &FitResult, severity: &FitResult) -> Result<Self, CombinedError> {
        Ok(Self {
            gamma: estimate_gamma(presence, severity)?,
            presence_alpha: presence.intercepts[0],
            cutpoints: [severity.intercepts[0], severity.intercepts[1]],
            presence_correlation: presence.correlation.clone(),
            severity_correlation: severity.correlation.clone(),
        })
    }
}

fn beta_block(c: Contribution, skip: usize) -> Contribution {
    let p = c.score.len() - skip;
    Contribution {
        information: c.information.view((skip, skip), (p, p)).into_owned(),
        score: c.score.rows(skip, p).into_owned(),
    }
}

/// Summed beta-block of the presence and severity systems.
pub fn combined_system(
    presence: &[&ClusterData],
    severity: &[&ClusterData],
    beta: &DVector<f64>,
    frozen: &Frozen,
    chain: GammaChainRule,
) -> Result<Contribution, GeeError> {
    let q = beta.len();
    let cache = PresenceRCache::new(&frozen.presence_correlation, presence);
    let pres = map_clusters(presence, |c| {
        presence_contribution(c, frozen.presence_alpha, beta, &cache).map(|k| beta_block(k, 1))
    });
    let factor = match chain {
        GammaChainRule::Include => frozen.gamma,
        GammaChainRule::Omit => 1.0,
    };
    let sev = map_clusters(severity, |c| {
        let p = severity_pieces(c, frozen.cutpoints, beta, frozen.gamma, factor);
        let r = severity_r(&frozen.severity_correlation, c, &p.probs);
        let v = crate::linalg::working_covariance(&p.var, &r);
        let d: DMatrix<f64> = p.d.columns(2, q).into_owned();
        Ok(cluster_contribution(&d, &v, &p.resid)?)
    });
    let mut total = reduce_ordered(pres, q)?;
    total.add(&reduce_ordered(sev, q)?);
    Ok(total)
}

/// Largest linear predictor magnitude over both pieces.
fn max_abs_eta(presence: &[&ClusterData], severity: &[&ClusterData], beta: &DVector<f64>, frozen: &Frozen) -> f64 {
    let pres = presence
        .iter()
        .flat_map(|c| (&c.design * beta).iter().map(|u| (frozen.presence_alpha + u).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let sev = severity
        .iter()
        .flat_map(|c| {
            (&c.design * beta)
                .iter()
                .map(|u| frozen.cutpoints.iter().map(|a| (a + frozen.gamma * u).abs()).fold(0.0, f64::max))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    pres.max(sev)
}

/// Increment `(H + psi psi')^{-1} psi` of the modified Newton-Raphson update.
pub fn modified_newton_step(system: &Contribution) -> Result<DVector<f64>, GeeError> {
    let psi = &system.score;
    let h = &system.information + psi * psi.transpose();
    Ok(solve_spd(&h, psi)?)
}

/// Above this Newton decrement the outer-product term shrinks the step by
/// more than half, and far from the root iterations crawl at a rate of
/// roughly 1/decrement. There the plain Newton step is taken instead.
pub const MODIFIED_STEP_DECREMENT: f64 = 1.0;

/// The modified step near the root, the plain Newton step far from it.
/// By Sherman-Morrison the modified step is the Newton step divided by
/// 1 + decrement, so the two agree as the score vanishes.
pub fn safeguarded_step(system: &Contribution) -> Result<DVector<f64>, GeeError> {
    let newton = solve_spd(&system.information, &system.score)?;
    let decrement = system.score.dot(&newton);
    if decrement > MODIFIED_STEP_DECREMENT {
        Ok(newton)
    } else {
        modified_newton_step(system)
    }
}

/// Combined fit on cluster subsets. `presence` and `severity` must share
/// the presence model's active columns; `start` is the initial slope vector
/// over those columns.
pub fn fit_combined_clusters(
    presence: &[&ClusterData],
    severity: &[&ClusterData],
    frozen: &Frozen,
    start: DVector<f64>,
    settings: &FitSettings,
) -> Result<(DVector<f64>, CombinedState), GeeError> {
    settings.validate()?;
    let mut beta = start;
    let mut state = CombinedState::default();
    for iter in 0..settings.max_iter {
        state.iterations = iter + 1;
        let system = combined_system(presence, severity, &beta, frozen, settings.chain)?;
        let base = system.score.amax();
        let mut step = safeguarded_step(&system)?;
        let mut accepted = false;
        for _ in 0..=settings.step_halving {
            let trial = &beta + &step;
            accepted = trial.iter().all(|v| v.is_finite())
                && max_abs_eta(presence, severity, &trial, frozen) <= DIVERGENCE_BOUND
                && combined_system(presence, severity, &trial, frozen, settings.chain)
                    .map(|s| s.score.amax() <= base)
                    .unwrap_or(false);
            if accepted {
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            state.stalled = true;
            break;
        }
        let change = step.amax();
        beta += &step;
        state.trace.push(change);
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(GeeError::SingularSystem);
        }
        if change <= settings.tol {
            state.converged = true;
            break;
        }
    }
    state.score_max_abs = combined_system(presence, severity, &beta, frozen, settings.chain)?.score.amax();
    Ok((beta, state))
}

#[derive(Debug, Clone, Default)]
pub struct CombinedState {
    pub converged: bool,
    /// No step reduced the score while keeping predictors bounded.
    pub stalled: bool,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub score_max_abs: f64,
}

/// Assembles the reported fit from the iteration output.
pub fn combined_result(
    presence_prep: &Prepared,
    frozen: &Frozen,
    beta_active: &DVector<f64>,
    state: CombinedState,
    n_obs: usize,
) -> CombinedFit {
    let q = presence_prep.design_names.len();
    let mut beta = vec![0.0; q];
    for (j, &col) in presence_prep.active.iter().enumerate() {
        beta[col] = beta_active[j];
    }
    let mut warnings = Vec::new();
    if state.stalled {
        warnings.push(format!("combined fit stalled after {} iterations: no feasible step", state.iterations));
    } else if !state.converged {
        warnings.push(format!("combined fit did not converge in {} iterations", state.iterations));
    }
    CombinedFit {
        time: presence_prep.time,
        gamma: frozen.gamma,
        severity_beta: beta.iter().map(|b| frozen.gamma * b).collect(),
        beta,
        presence_alpha: frozen.presence_alpha,
        severity_cutpoints: frozen.cutpoints,
        design_names: presence_prep.design_names.clone(),
        active: (0..q).map(|i| presence_prep.active.contains(&i)).collect(),
        presence_correlation: frozen.presence_correlation.clone(),
        severity_correlation: frozen.severity_correlation.clone(),
        converged: state.converged,
        iterations: state.iterations,
        trace: state.trace,
        score_max_abs: state.score_max_abs,
        n_obs,
        warnings,
    }
}

/// Full combined fit from separate fits. `severity_prep` must come from
/// [`Prepared::severity_on_columns`] with the presence active columns.
pub fn fit_combined(
    presence_prep: &Prepared,
    severity_prep: &Prepared,
    sep_presence: &FitResult,
    sep_severity: &FitResult,
    settings: &FitSettings,
) -> Result<CombinedFit, CombinedError> {
    let frozen = Frozen::from_fits(sep_presence, sep_severity)?;
    let start = DVector::from_iterator(
        presence_prep.active.len(),
        presence_prep.active.iter().map(|&c| sep_presence.beta[c]),
    );
    let pres = presence_prep.all_clusters();
    let sev = severity_prep.all_clusters();
    let (beta, state) = fit_combined_clusters(&pres, &sev, &frozen, start, settings)?;
    let n_obs = presence_prep.n_obs() + severity_prep.n_obs();
    Ok(combined_result(presence_prep, &frozen, &beta, state, n_obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::Piece;
    use crate::gee::fit_prepared;
    use crate::simulation::{
        generate_dataset, CorrelationTruth, CovariateGenerator, PresenceTruth, SeverityTruth, TruthSpec,
    };
    use crate::correlation::StructureKind;
    use approx::assert_abs_diff_eq;

    fn fit_with_beta(beta: Vec<f64>) -> FitResult {
        FitResult {
            piece: Piece::Presence,
            time: 1,
            intercepts: vec![0.0],
            active: vec![true; beta.len()],
            design_names: (0..beta.len()).map(|i| format!("x{i}")).collect(),
            beta,
            correlation: CorrelationStructure::Independence,
            phi: 1.0,
            converged: true,
            diverged: false,
            iterations: 1,
            trace: vec![],
            score_max_abs: 0.0,
            n_clusters: 1,
            n_obs: 1,
            warnings: vec![],
            residuals: None,
        }
    }

    #[test]
    fn gamma_ratio_examples() {
        let p = fit_with_beta(vec![1.0, 3.0]);
        let s = fit_with_beta(vec![0.5, 1.5]);
        assert_eq!(estimate_gamma(&p, &s).unwrap(), 0.5);
        let s = fit_with_beta(vec![0.7, 2.1]);
        assert_abs_diff_eq!(estimate_gamma(&p, &s).unwrap(), 0.7, epsilon = 1e-15);
        let zero = fit_with_beta(vec![1.0, -1.0]);
        assert_eq!(estimate_gamma(&zero, &s), Err(CombinedError::ZeroDenominator));
        assert!(matches!(estimate_gamma(&p, &fit_with_beta(vec![1.0])), Err(CombinedError::DesignMismatch(2, 1))));
    }

    fn dataset(seed: u64) -> crate::data::Dataset {
        let spec = TruthSpec {
            n_clusters: 150,
            presence: vec![PresenceTruth { alpha: 0.3, beta: vec![-0.6, -0.4] }],
            severity: vec![SeverityTruth { cutpoints: [0.0, 1.2], beta: None, gamma: Some(0.7) }],
            correlation: CorrelationTruth { kind: StructureKind::Exchangeable, rho: 0.2 },
            teeth: vec![7, 8],
            zones: crate::data::Zone::ALL.to_vec(),
            covariates: vec![
                CovariateGenerator { name: "a".into(), mean: 0.0, sd: 1.0, per_time: false },
                CovariateGenerator { name: "b".into(), mean: 0.0, sd: 1.0, per_time: false },
            ],
            missing_prob: 0.1,
            attend_prob: 1.0,
            shared_latent: false,
        };
        generate_dataset(&spec, seed).unwrap()
    }

    fn preps(ds: &crate::data::Dataset) -> (Prepared, Prepared, Prepared) {
        let pp = Prepared::presence(&ds.presence_view(1).unwrap()).unwrap();
        let sv = ds.severity_view(1).unwrap();
        let sp = Prepared::severity(&sv).unwrap();
        let sc = Prepared::severity_on_columns(&sv, &pp.active);
        (pp, sp, sc)
    }

    #[test]
    fn combined_fit_solves_summed_equation() {
        let ds = dataset(5);
        let (pp, sp, sc) = preps(&ds);
        for kind in [StructureKind::Independence, StructureKind::Exchangeable] {
            let settings = FitSettings::with_structure(kind);
            let fp = fit_prepared(&pp, &settings).unwrap();
            let fs = fit_prepared(&sp, &settings).unwrap();
            let c = fit_combined(&pp, &sc, &fp, &fs, &settings).unwrap();
            assert!(c.converged);
            assert!(c.score_max_abs <= 1e-5 * c.n_obs as f64);
            for (s, b) in c.severity_beta.iter().zip(&c.beta) {
                assert_eq!(*s, c.gamma * b);
            }
        }
    }

    #[test]
    fn augmentation_vanishes_at_root() {
        let ds = dataset(6);
        let (pp, sp, sc) = preps(&ds);
        let settings = FitSettings::default();
        let fp = fit_prepared(&pp, &settings).unwrap();
        let fs = fit_prepared(&sp, &settings).unwrap();
        let c = fit_combined(&pp, &sc, &fp, &fs, &settings).unwrap();
        let frozen = Frozen::from_fits(&fp, &fs).unwrap();
        let beta = DVector::from_iterator(pp.active.len(), pp.active.iter().map(|&j| c.beta[j]));
        let system = combined_system(&pp.all_clusters(), &sc.all_clusters(), &beta, &frozen, settings.chain).unwrap();
        let with = modified_newton_step(&system).unwrap();
        let without = solve_spd(&system.information, &system.score).unwrap();
        assert!((with - without).amax() <= settings.tol);
    }

    #[test]
    fn zero_gamma_reduces_to_presence() {
        let ds = dataset(7);
        let (pp, sp, sc) = preps(&ds);
        let settings = FitSettings::default();
        let fp = fit_prepared(&pp, &settings).unwrap();
        let fs = fit_prepared(&sp, &settings).unwrap();
        let mut frozen = Frozen::from_fits(&fp, &fs).unwrap();
        frozen.gamma = 0.0;
        let start = DVector::from_iterator(pp.active.len(), pp.active.iter().map(|&j| fp.beta[j] + 0.1));
        let (beta, state) =
            fit_combined_clusters(&pp.all_clusters(), &sc.all_clusters(), &frozen, start, &settings).unwrap();
        assert!(state.converged);
        for (j, &col) in pp.active.iter().enumerate() {
            assert_abs_diff_eq!(beta[j], fp.beta[col], epsilon = 1e-6);
        }
    }
}
