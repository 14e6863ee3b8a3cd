#![allow(dead_code)]

use hurdle_gee::correlation::StructureKind;
use hurdle_gee::data::{Dataset, Observation, Tooth, Zone};
use hurdle_gee::gee::Prepared;
use hurdle_gee::simulation::{CorrelationTruth, CovariateGenerator, PresenceTruth, SeverityTruth, TruthSpec};
use nalgebra::DMatrix;

pub fn covariate(name: &str) -> CovariateGenerator {
    CovariateGenerator { name: name.into(), mean: 0.0, sd: 1.0, per_time: false }
}

/// One time point, all 16 positions, two covariates, severity slopes
/// `gamma` times the presence slopes.
pub fn truth(n: usize, kind: StructureKind, rho: f64) -> TruthSpec {
    TruthSpec {
        n_clusters: n,
        presence: vec![PresenceTruth { alpha: 0.4, beta: vec![-0.6, 0.4] }],
        severity: vec![SeverityTruth { cutpoints: [-0.3, 1.2], beta: None, gamma: Some(0.7) }],
        correlation: CorrelationTruth { kind, rho },
        teeth: vec![7, 8, 9, 10],
        zones: Zone::ALL.to_vec(),
        covariates: vec![covariate("x1"), covariate("x2")],
        missing_prob: 0.0,
        attend_prob: 1.0,
        shared_latent: false,
    }
}

/// Pooled design (active columns) and responses of a prepared piece.
pub fn stack(prep: &Prepared) -> (DMatrix<f64>, Vec<u8>) {
    let n: usize = prep.clusters.iter().map(|c| c.design.nrows()).sum();
    let p = prep.clusters[0].design.ncols();
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for c in &prep.clusters {
        for i in 0..c.design.nrows() {
            x.row_mut(row).copy_from(&c.design.row(i));
            y.push(c.response[i]);
            row += 1;
        }
    }
    (x, y)
}

/// One observation per cluster with a single covariate.
pub fn single_rows(rows: &[(f64, u8)]) -> Dataset {
    let obs = rows
        .iter()
        .enumerate()
        .map(|(i, &(x, fri))| Observation {
            cluster_id: format!("c{i}"),
            time: 1,
            tooth: Tooth::from_number(7).unwrap(),
            zone: Zone::C,
            fri,
            covariates: vec![x],
        })
        .collect();
    Dataset::new(vec!["x".into()], obs).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
