//! Command-line front end. Exit codes: 0 success, 1 hard error,
//! 2 soft non-convergence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correlation::{CorrelationError, JackknifePooling, Piece, ScalingMode, StructureKind};
use crate::data::{age_of_time, read_csv, write_csv, CsvSchema, DataError, Dataset, Zone};
use crate::gee::FitSettings;
use crate::inference::{
    cluster_bootstrap, run_pipeline, BootstrapResult, Family, FullFit, InferenceError, JackknifeResult,
    JsVariant, ModelSpec,
};
use crate::report::{build_tables, render_csv, render_report, Table};
use crate::simulation::{generate_dataset, SimulationError, TruthSpec};

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "HURDLE_GEE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset {0} has no observations")]
    EmptyDataset(PathBuf),
    #[error("no fit artifacts found in {0}")]
    MissingArtifact(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::NotConverged => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hurdle-gee", version, about = "Two-part GEE models for zero-inflated clustered ordinal scores")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a JSON truth spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model family over time points, with jackknife SE,
    /// shrinkage and bootstrap intervals.
    Fit(FitArgs),
    /// Render the tables stored in a fit output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        latex: bool,
    },
    /// Score counts by time, zone and FRI category.
    Distribution {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags override values from `--config`.
#[derive(Debug, Args, Default)]
pub struct FitArgs {
    /// JSON file with any of the fields of the run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// A, B or C.
    #[arg(long)]
    pub family: Option<String>,
    /// Structure code `c`, or `cP,cS` for family C (1 independence,
    /// 2 exchangeable, 3 AR-1, 4 jackknife).
    #[arg(long)]
    pub corr: Option<String>,
    /// Comma separated time indices; defaults to all present.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<u8>>,
    /// Bootstrap replicates; 0 skips the bootstrap.
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// paper or liang-zeger.
    #[arg(long)]
    pub scaling: Option<String>,
    /// paper or centered.
    #[arg(long)]
    pub js: Option<String>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Also write LaTeX subtables.
    #[arg(long)]
    pub latex: bool,
}

/// Fully resolved fit configuration, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub family: Family,
    pub corr: String,
    pub times: Option<Vec<u8>>,
    pub boot: usize,
    pub seed: u64,
    pub scaling: ScalingMode,
    pub js: JsVariant,
    pub pooling: JackknifePooling,
    pub max_iter: usize,
    pub tol: f64,
    pub step_halving: usize,
    pub latex: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = FitSettings::default();
        Self {
            input: None,
            out: None,
            family: Family::A,
            corr: "1".into(),
            times: None,
            boot: 100,
            seed: 0,
            scaling: s.scaling,
            js: JsVariant::default(),
            pooling: s.pooling,
            max_iter: s.max_iter,
            tol: s.tol,
            step_halving: s.step_halving,
            latex: false,
        }
    }
}

impl RunConfig {
    pub fn resolve(args: &FitArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path).map_err(io_err(path))?)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &args.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &args.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &args.family {
            cfg.family = v.parse()?;
        }
        if let Some(v) = &args.corr {
            cfg.corr = v.clone();
        }
        if let Some(v) = &args.times {
            cfg.times = Some(v.clone());
        }
        if let Some(v) = args.boot {
            cfg.boot = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(v) = &args.scaling {
            cfg.scaling = v.parse()?;
        }
        if let Some(v) = &args.js {
            cfg.js = v.parse()?;
        }
        if let Some(v) = args.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = args.tol {
            cfg.tol = v;
        }
        cfg.latex |= args.latex;
        cfg.model_spec()?;
        if cfg.input.is_none() {
            return Err(CliError::Config("missing --input".into()));
        }
        if cfg.out.is_none() {
            return Err(CliError::Config("missing --out".into()));
        }
        if cfg.boot == 1 {
            return Err(CliError::Config("--boot must be 0 or at least 2".into()));
        }
        Ok(cfg)
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let codes: Vec<StructureKind> =
            self.corr.split(',').map(|c| c.trim().parse()).collect::<Result<_, _>>()?;
        let (cp, cs) = match (self.family, codes.as_slice()) {
            (Family::C, [p, s]) => (*p, *s),
            (Family::C, [c]) => (*c, *c),
            (_, [c]) => (*c, *c),
            _ => {
                return Err(CliError::Config(format!(
                    "--corr `{}` needs one code, or two for family C",
                    self.corr
                )))
            }
        };
        let settings = FitSettings {
            max_iter: self.max_iter,
            tol: self.tol,
            step_halving: self.step_halving,
            scaling: self.scaling,
            pooling: self.pooling,
            ..FitSettings::default()
        };
        settings.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(ModelSpec { family: self.family, presence_structure: cp, severity_structure: cs, settings })
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let keyed = RunConfig { out: None, ..self.clone() };
        sha256_hex(&serde_json::to_vec(&keyed).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads a dataset whose covariates are the columns named in its header.
pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = fs::read(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(text.as_slice());
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let schema = CsvSchema::from_header(&header);
    Ok(read_csv(text.as_slice(), &schema)?.dataset)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let dataset = read_dataset(path)?;
    if dataset.is_empty() {
        return Err(CliError::EmptyDataset(path.to_path_buf()));
    }
    Ok(dataset)
}

/// Stored per (model, time). The report command reads only the tables.
#[derive(Debug, Serialize)]
struct FitArtifact<'a> {
    model: String,
    family: Family,
    time: u8,
    age: Option<u32>,
    converged: bool,
    tables: &'a [Table],
    shrink_factors: BTreeMap<&'static str, &'a [f64]>,
    jackknife: &'a JackknifeResult,
    fit: &'a FullFit,
    warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct StoredArtifact {
    time: u8,
    tables: Vec<Table>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    config_hash: String,
    input_sha256: String,
    seed: u64,
    structure: (StructureKind, StructureKind),
    scaling: ScalingMode,
    js: JsVariant,
    pooling: JackknifePooling,
    bootstrap: Option<BootstrapSummary>,
    config: RunConfig,
    artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
struct BootstrapSummary {
    replicates: usize,
    failures: usize,
    first_seed: u64,
}

fn piece_suffix(piece: Piece) -> &'static str {
    match piece {
        Piece::Presence => "presence",
        Piece::Severity => "severity",
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<Outcome, CliError> {
    let cfg = RunConfig::resolve(args)?;
    let spec = cfg.model_spec()?;
    let input = cfg.input.clone().expect("resolved");
    let out = cfg.out.clone().expect("resolved");
    let input_bytes = fs::read(&input).map_err(io_err(&input))?;
    let dataset = load_dataset(&input)?;
    let times = cfg.times.clone().unwrap_or_else(|| dataset.times());
    if times.is_empty() {
        return Err(CliError::Config("no time points to fit".into()));
    }
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let output = run_pipeline(&dataset, &spec, &times, cfg.js)?;
    let mut converged = output.converged;
    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    let boot: Option<BootstrapResult> = if cfg.boot >= 2 {
        match cluster_bootstrap(&dataset, &spec, &times, cfg.js, cfg.boot, cfg.seed) {
            Ok(b) => Some(b),
            Err(e @ InferenceError::TooManyFailures { .. }) => {
                eprintln!("warning: {e}; intervals omitted");
                converged = false;
                None
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    let tables = build_tables(&spec, &output, boot.as_ref());

    let mut artifacts = BTreeMap::new();
    let mut emit = |name: String, bytes: Vec<u8>| -> Result<(), CliError> {
        write_atomic(&out.join(&name), &bytes)?;
        artifacts.insert(name, sha256_hex(&bytes));
        Ok(())
    };
    let n_pieces = spec.family.pieces().len();
    for (k, &t) in times.iter().enumerate() {
        let model = spec.name(t);
        let fit = &output.fits[k];
        let these = &tables[k * n_pieces..(k + 1) * n_pieces];
        let warnings = fit.warnings();
        for w in &warnings {
            eprintln!("warning [{model}]: {w}");
        }
        let artifact = FitArtifact {
            model: model.clone(),
            family: spec.family,
            time: t,
            age: age_of_time(t),
            converged: fit.estimates().converged,
            tables: these,
            shrink_factors: output
                .tracks
                .iter()
                .map(|tr| (piece_suffix(tr.piece), tr.shrink_factors.as_slice()))
                .collect(),
            jackknife: &output.jackknife[k],
            fit,
            warnings,
        };
        emit(format!("{model}.fit.json"), serde_json::to_vec_pretty(&artifact)?)?;
        for table in these {
            let name = if spec.family == Family::C {
                format!("{model}.{}.csv", piece_suffix(table.piece))
            } else {
                format!("{model}.csv")
            };
            emit(name, render_csv(table)?.into_bytes())?;
        }
    }
    let markdown = render_report(&tables, false);
    emit("report.md".into(), markdown.clone().into_bytes())?;
    if cfg.latex {
        emit("report.tex".into(), render_report(&tables, true).into_bytes())?;
    }
    print!("{markdown}");

    let manifest = Manifest {
        tool: "hurdle-gee",
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        input_sha256: sha256_hex(&input_bytes),
        seed: cfg.seed,
        structure: (spec.presence_structure, spec.severity_structure),
        scaling: cfg.scaling,
        js: cfg.js,
        pooling: cfg.pooling,
        bootstrap: boot.as_ref().map(|b| BootstrapSummary {
            replicates: b.b,
            failures: b.failures,
            first_seed: cfg.seed,
        }),
        config: cfg.clone(),
        artifacts,
    };
    write_atomic(&out.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;

    Ok(if converged { Outcome::Success } else { Outcome::NotConverged })
}

/// Reads every `*.fit.json` under `dir` in time order.
pub fn load_tables(dir: &Path) -> Result<Vec<Table>, CliError> {
    let mut stored = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.to_string_lossy().ends_with(".fit.json") {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            stored.push(serde_json::from_str::<StoredArtifact>(&text)?);
        }
    }
    if stored.is_empty() {
        return Err(CliError::MissingArtifact(dir.to_path_buf()));
    }
    stored.sort_by_key(|a| a.time);
    Ok(stored.into_iter().flat_map(|a| a.tables).collect())
}

pub fn cmd_report(dir: &Path, latex: bool) -> Result<String, CliError> {
    Ok(render_report(&load_tables(dir)?, latex))
}

pub fn cmd_simulate(spec: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let truth = TruthSpec::from_json(&fs::read_to_string(spec).map_err(io_err(spec))?)?;
    let dataset = generate_dataset(&truth, seed)?;
    let mut buf = Vec::new();
    write_csv(&dataset, &mut buf)?;
    write_atomic(out, &buf)
}

/// Counts keyed by (time, zone, fri); only observed combinations appear.
pub fn distribution(dataset: &Dataset) -> BTreeMap<(u8, usize, u8), usize> {
    let mut counts = BTreeMap::new();
    for o in dataset.observations() {
        let zone = Zone::ALL.iter().position(|&z| z == o.zone).expect("known zone");
        *counts.entry((o.time, zone, o.fri)).or_insert(0) += 1;
    }
    counts
}

pub fn render_distribution(dataset: &Dataset) -> Result<String, CliError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["time", "age", "zone", "fri", "count"])?;
    for ((t, z, fri), n) in distribution(dataset) {
        let age = age_of_time(t).map(|a| a.to_string()).unwrap_or_default();
        wtr.write_record([t.to_string(), age, Zone::ALL[z].label().to_string(), fri.to_string(), n.to_string()])?;
    }
    let bytes = wtr.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn cmd_distribution(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let dataset = read_dataset(input)?;
    let text = render_distribution(&dataset)?;
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Sizes the global rayon pool from the environment, once.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    init_threads();
    match cli.command {
        Command::Simulate { spec, seed, out } => cmd_simulate(&spec, seed, &out).map(|_| Outcome::Success),
        Command::Fit(args) => cmd_fit(&args),
        Command::Report { dir, latex } => {
            print!("{}", cmd_report(&dir, latex)?);
            Ok(Outcome::Success)
        }
        Command::Distribution { input, out } => {
            cmd_distribution(&input, out.as_deref()).map(|_| Outcome::Success)
        }
    }
}

/// Entry point shared by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(outcome) => outcome.code(),
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
