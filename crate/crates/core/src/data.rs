//! Observation hierarchy (child, visit, tooth, zone), CSV ingestion, and the
//! presence / severity response views that each model piece consumes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of visits in the study design (ages 9, 13, 17, 23).
pub const MAX_TIME: u8 = 4;
/// Highest FRI category.
pub const MAX_FRI: u8 = 3;
/// Number of non-zero severity levels.
pub const SEVERITY_LEVELS: usize = 3;
/// Number of (tooth, zone) positions in a complete cluster.
pub const POSITIONS: usize = 16;

/// Scheduled age for each visit index.
pub fn age_of_time(time: u8) -> Option<u32> {
    match time {
        1 => Some(9),
        2 => Some(13),
        3 => Some(17),
        4 => Some(23),
        _ => None,
    }
}

/// The continuous covariates of the fluorosis cohort, in design order.
pub const DEFAULT_COVARIATES: [&str; 7] = [
    "dental_age",
    "Total_mgF",
    "SugarAddedBeverageOzPerDay",
    "BrushingFrequencyPerDay",
    "Avg_homeppm",
    "Prop_DentAppt",
    "Prop_FluorideTreatment",
];

/// Dummy columns appended after the continuous covariates.
pub const DUMMY_COLUMNS: [&str; 6] = ["Tooth8", "Tooth9", "Tooth10", "ZoneM", "ZoneI", "ZoneO"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: bad value `{value}` for {field}")]
    BadCategory {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: cannot parse `{value}` in column `{column}`")]
    Unparseable {
        line: usize,
        column: String,
        value: String,
    },
    #[error("duplicate cell (cluster {cluster}, time {time}, tooth {tooth}, zone {zone})")]
    DuplicateCell {
        cluster: String,
        time: u8,
        tooth: Tooth,
        zone: Zone,
    },
    #[error("observation has {got} covariates, dataset expects {expected}")]
    CovariateCount { expected: usize, got: usize },
    #[error("no observations at time {0}")]
    EmptyTime(u8),
    #[error("time index {0} outside 1..={MAX_TIME}")]
    BadTime(u8),
}

/// Maxillary incisor, universal numbering. Tooth 7 is the reference level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tooth {
    T7,
    T8,
    T9,
    T10,
}

impl Tooth {
    pub const ALL: [Tooth; 4] = [Tooth::T7, Tooth::T8, Tooth::T9, Tooth::T10];

    pub fn number(self) -> u8 {
        match self {
            Tooth::T7 => 7,
            Tooth::T8 => 8,
            Tooth::T9 => 9,
            Tooth::T10 => 10,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            7 => Some(Tooth::T7),
            8 => Some(Tooth::T8),
            9 => Some(Tooth::T9),
            10 => Some(Tooth::T10),
            _ => None,
        }
    }

    fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tooth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Buccal surface zone, from gum to tip. Zone C is the reference level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Zone {
    C,
    M,
    I,
    O,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::C, Zone::M, Zone::I, Zone::O];

    fn ordinal(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Zone::C => "C",
            Zone::M => "M",
            Zone::I => "I",
            Zone::O => "O",
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Zone {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "C" | "c" => Ok(Zone::C),
            "M" | "m" => Ok(Zone::M),
            "I" | "i" => Ok(Zone::I),
            "O" | "o" => Ok(Zone::O),
            _ => Err(()),
        }
    }
}

/// A (tooth, zone) location inside a cluster. Ordering is tooth-major,
/// zone-minor, which fixes the stacking order of every cluster vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    pub tooth: Tooth,
    pub zone: Zone,
}

impl Position {
    pub fn new(tooth: Tooth, zone: Zone) -> Self {
        Self { tooth, zone }
    }

    /// Index in 0..16.
    pub fn index(self) -> usize {
        self.tooth.ordinal() * 4 + self.zone.ordinal()
    }

    pub fn from_index(idx: usize) -> Self {
        Self {
            tooth: Tooth::ALL[idx / 4],
            zone: Zone::ALL[idx % 4],
        }
    }

    /// Tooth distance |j - j'| used by the AR(1) structure.
    pub fn tooth_distance(self, other: Position) -> usize {
        self.tooth.ordinal().abs_diff(other.tooth.ordinal())
    }

    pub fn all() -> impl Iterator<Item = Position> {
        (0..POSITIONS).map(Position::from_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cluster_id: String,
    pub time: u8,
    pub tooth: Tooth,
    pub zone: Zone,
    pub fri: u8,
    pub covariates: Vec<f64>,
}

impl Observation {
    pub fn position(&self) -> Position {
        Position::new(self.tooth, self.zone)
    }

    /// Continuous covariates followed by the tooth and zone dummies.
    pub fn design_row(&self) -> Vec<f64> {
        let mut row = self.covariates.clone();
        row.extend(dummy_row(self.tooth, self.zone));
        row
    }
}

/// Tooth8, Tooth9, Tooth10, ZoneM, ZoneI, ZoneO indicators.
pub fn dummy_row(tooth: Tooth, zone: Zone) -> [f64; 6] {
    let mut out = [0.0; 6];
    match tooth {
        Tooth::T7 => {}
        Tooth::T8 => out[0] = 1.0,
        Tooth::T9 => out[1] = 1.0,
        Tooth::T10 => out[2] = 1.0,
    }
    match zone {
        Zone::C => {}
        Zone::M => out[3] = 1.0,
        Zone::I => out[4] = 1.0,
        Zone::O => out[5] = 1.0,
    }
    out
}

/// Validated long-format dataset. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    observations: Vec<Observation>,
}

impl Dataset {
    /// Validates categories, covariate counts and cell uniqueness.
    pub fn new(
        covariate_names: Vec<String>,
        observations: Vec<Observation>,
    ) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for (line, obs) in observations.iter().enumerate() {
            if !(1..=MAX_TIME).contains(&obs.time) {
                return Err(DataError::BadCategory {
                    line: line + 1,
                    field: "time",
                    value: obs.time.to_string(),
                });
            }
            if obs.fri > MAX_FRI {
                return Err(DataError::BadCategory {
                    line: line + 1,
                    field: "fri",
                    value: obs.fri.to_string(),
                });
            }
            if obs.covariates.len() != covariate_names.len() {
                return Err(DataError::CovariateCount {
                    expected: covariate_names.len(),
                    got: obs.covariates.len(),
                });
            }
            if !seen.insert((obs.cluster_id.as_str(), obs.time, obs.tooth, obs.zone)) {
                return Err(DataError::DuplicateCell {
                    cluster: obs.cluster_id.clone(),
                    time: obs.time,
                    tooth: obs.tooth,
                    zone: obs.zone,
                });
            }
        }
        Ok(Self {
            covariate_names,
            observations,
        })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Full design column names: continuous covariates then dummies.
    pub fn design_names(&self) -> Vec<String> {
        self.covariate_names
            .iter()
            .cloned()
            .chain(DUMMY_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    }

    pub fn n_design(&self) -> usize {
        self.covariate_names.len() + DUMMY_COLUMNS.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Sorted distinct cluster ids.
    pub fn cluster_ids(&self) -> Vec<String> {
        self.observations
            .iter()
            .map(|o| o.cluster_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect()
    }

    /// Sorted distinct time indices present.
    pub fn times(&self) -> Vec<u8> {
        self.observations
            .iter()
            .map(|o| o.time)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Observations grouped by cluster id (sorted), each group in input order.
    pub fn by_cluster(&self) -> BTreeMap<&str, Vec<&Observation>> {
        let mut map: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
        for obs in &self.observations {
            map.entry(obs.cluster_id.as_str()).or_default().push(obs);
        }
        map
    }

    /// Copy of the dataset without one cluster.
    pub fn without_cluster(&self, cluster_id: &str) -> Dataset {
        Dataset {
            covariate_names: self.covariate_names.clone(),
            observations: self
                .observations
                .iter()
                .filter(|o| o.cluster_id != cluster_id)
                .cloned()
                .collect(),
        }
    }

    /// Builds a dataset from whole clusters drawn (possibly repeatedly) from
    /// this one. Draw `k` is relabeled `b{k}` so that ids stay unique.
    pub fn resample_clusters(&self, draws: &[&str]) -> Dataset {
        let groups = self.by_cluster();
        let width = draws.len().to_string().len();
        let mut observations = Vec::new();
        for (k, id) in draws.iter().enumerate() {
            if let Some(group) = groups.get(id) {
                let label = format!("b{k:0width$}");
                observations.extend(group.iter().map(|o| Observation {
                    cluster_id: label.clone(),
                    ..(*o).clone()
                }));
            }
        }
        Dataset {
            covariate_names: self.covariate_names.clone(),
            observations,
        }
    }

    pub fn presence_view(&self, time: u8) -> Result<PresenceView, DataError> {
        let clusters = self.cluster_blocks(time, |_| true)?;
        if clusters.is_empty() {
            return Err(DataError::EmptyTime(time));
        }
        let clusters = clusters
            .into_iter()
            .map(|(block, fris)| PresenceCluster {
                response: fris.iter().map(|&f| if f > 0 { 1.0 } else { 0.0 }).collect(),
                block,
            })
            .collect();
        Ok(PresenceView {
            time,
            design_names: self.design_names(),
            clusters,
        })
    }

    pub fn severity_view(&self, time: u8) -> Result<SeverityView, DataError> {
        if !(1..=MAX_TIME).contains(&time) {
            return Err(DataError::BadTime(time));
        }
        if !self.observations.iter().any(|o| o.time == time) {
            return Err(DataError::EmptyTime(time));
        }
        let clusters = self
            .cluster_blocks(time, |o| o.fri > 0)?
            .into_iter()
            .map(|(block, fris)| SeverityCluster { levels: fris, block })
            .collect();
        Ok(SeverityView {
            time,
            design_names: self.design_names(),
            clusters,
        })
    }

    fn cluster_blocks(
        &self,
        time: u8,
        keep: impl Fn(&Observation) -> bool,
    ) -> Result<Vec<(ClusterBlock, Vec<u8>)>, DataError> {
        if !(1..=MAX_TIME).contains(&time) {
            return Err(DataError::BadTime(time));
        }
        let q = self.n_design();
        let mut out = Vec::new();
        for (id, group) in self.by_cluster() {
            let mut rows: Vec<&Observation> = group
                .into_iter()
                .filter(|o| o.time == time && keep(o))
                .collect();
            if rows.is_empty() {
                continue;
            }
            rows.sort_by_key(|o| o.position());
            let design = DMatrix::from_fn(rows.len(), q, |r, c| {
                let obs = rows[r];
                let p = obs.covariates.len();
                if c < p {
                    obs.covariates[c]
                } else {
                    dummy_row(obs.tooth, obs.zone)[c - p]
                }
            });
            let block = ClusterBlock {
                id: id.to_string(),
                positions: rows.iter().map(|o| o.position()).collect(),
                design,
            };
            out.push((block, rows.iter().map(|o| o.fri).collect()));
        }
        Ok(out)
    }
}

/// One cluster's observations at a single time, stacked tooth-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBlock {
    pub id: String,
    pub positions: Vec<Position>,
    /// n_i x q design (no intercept column).
    pub design: DMatrix<f64>,
}

impl ClusterBlock {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresenceCluster {
    pub block: ClusterBlock,
    /// W_P = 1 when FRI > 0.
    pub response: Vec<f64>,
}

impl PresenceCluster {
    /// Indicator of a zero score, the event whose probability the presence
    /// mean model describes.
    pub fn zero_indicator(&self) -> impl Iterator<Item = f64> + '_ {
        self.response.iter().map(|w| 1.0 - w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresenceView {
    pub time: u8,
    pub design_names: Vec<String>,
    pub clusters: Vec<PresenceCluster>,
}

impl PresenceView {
    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.block.len()).sum()
    }

    pub fn n_design(&self) -> usize {
        self.design_names.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeverityCluster {
    pub block: ClusterBlock,
    /// Severity level in 1..=3 per observation.
    pub levels: Vec<u8>,
}

impl SeverityCluster {
    /// Indicator triple (I[W=1], I[W=2], I[W=3]) for observation `r`.
    pub fn indicators(&self, r: usize) -> [f64; SEVERITY_LEVELS] {
        indicator_triple(self.levels[r])
    }
}

pub fn indicator_triple(level: u8) -> [f64; SEVERITY_LEVELS] {
    let mut z = [0.0; SEVERITY_LEVELS];
    z[(level - 1) as usize] = 1.0;
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeverityView {
    pub time: u8,
    pub design_names: Vec<String>,
    pub clusters: Vec<SeverityCluster>,
}

impl SeverityView {
    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.block.len()).sum()
    }

    pub fn n_design(&self) -> usize {
        self.design_names.len()
    }

    /// Observation counts for levels 1, 2, 3.
    pub fn level_counts(&self) -> [usize; SEVERITY_LEVELS] {
        let mut counts = [0; SEVERITY_LEVELS];
        for c in &self.clusters {
            for &l in &c.levels {
                counts[(l - 1) as usize] += 1;
            }
        }
        counts
    }
}

/// Column names used when reading a CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub cluster: String,
    pub time: String,
    pub tooth: String,
    pub zone: String,
    pub fri: String,
    pub covariates: Vec<String>,
    /// Drop unparseable rows instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self::with_covariates(DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect())
    }
}

impl CsvSchema {
    pub fn with_covariates(covariates: Vec<String>) -> Self {
        Self {
            cluster: "cluster_id".into(),
            time: "time".into(),
            tooth: "tooth".into(),
            zone: "zone".into(),
            fri: "fri".into(),
            covariates,
            lenient: false,
        }
    }

    /// Schema taking every column after the five fixed ones as a covariate.
    pub fn from_header(header: &[&str]) -> Self {
        let fixed = ["cluster_id", "time", "tooth", "zone", "fri"];
        Self::with_covariates(
            header
                .iter()
                .filter(|h| !fixed.contains(h))
                .map(|s| s.to_string())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub dataset: Dataset,
    /// Rows dropped in lenient mode.
    pub dropped: usize,
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<IngestReport, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<IngestReport, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let i_cluster = col(&schema.cluster)?;
    let i_time = col(&schema.time)?;
    let i_tooth = col(&schema.tooth)?;
    let i_zone = col(&schema.zone)?;
    let i_fri = col(&schema.fri)?;
    let i_cov = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut observations = Vec::new();
    let mut dropped = 0;
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record?;
        match parse_row(&record, line, &headers, i_cluster, i_time, i_tooth, i_zone, i_fri, &i_cov) {
            Ok(obs) => observations.push(obs),
            Err(DataError::Unparseable { .. }) if schema.lenient => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    let dataset = Dataset::new(schema.covariates.clone(), observations)?;
    Ok(IngestReport { dataset, dropped })
}

#[allow(clippy::too_many_arguments)]
fn parse_row(
    record: &csv::StringRecord,
    line: usize,
    headers: &csv::StringRecord,
    i_cluster: usize,
    i_time: usize,
    i_tooth: usize,
    i_zone: usize,
    i_fri: usize,
    i_cov: &[usize],
) -> Result<Observation, DataError> {
    let field = |i: usize| record.get(i).unwrap_or("");
    let unparseable = |i: usize| DataError::Unparseable {
        line,
        column: headers.get(i).unwrap_or("").to_string(),
        value: field(i).to_string(),
    };
    let int = |i: usize| -> Result<i64, DataError> { field(i).parse::<i64>().map_err(|_| unparseable(i)) };

    let cluster_id = field(i_cluster).to_string();
    if cluster_id.is_empty() {
        return Err(unparseable(i_cluster));
    }
    let time = int(i_time)?;
    if !(1..=MAX_TIME as i64).contains(&time) {
        return Err(DataError::BadCategory { line, field: "time", value: time.to_string() });
    }
    let tooth_raw = int(i_tooth)?;
    let tooth = u8::try_from(tooth_raw)
        .ok()
        .and_then(Tooth::from_number)
        .ok_or_else(|| DataError::BadCategory { line, field: "tooth", value: tooth_raw.to_string() })?;
    let zone = field(i_zone).parse::<Zone>().map_err(|_| DataError::BadCategory {
        line,
        field: "zone",
        value: field(i_zone).to_string(),
    })?;
    let fri = int(i_fri)?;
    if !(0..=MAX_FRI as i64).contains(&fri) {
        return Err(DataError::BadCategory { line, field: "fri", value: fri.to_string() });
    }
    let covariates = i_cov
        .iter()
        .map(|&i| {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| unparseable(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Observation {
        cluster_id,
        time: time as u8,
        tooth,
        zone,
        fri: fri as u8,
        covariates,
    })
}

/// Writes the dataset in the ingest schema. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster_id", "time", "tooth", "zone", "fri"];
    header.extend(dataset.covariate_names.iter().map(String::as_str));
    wtr.write_record(&header)?;
    for obs in &dataset.observations {
        let mut rec = vec![
            obs.cluster_id.clone(),
            obs.time.to_string(),
            obs.tooth.to_string(),
            obs.zone.to_string(),
            obs.fri.to_string(),
        ];
        rec.extend(obs.covariates.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
