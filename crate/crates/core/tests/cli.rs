use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hurdle-gee"));
    c.env("HURDLE_GEE_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

const TRUTH: &str = r#"{
  "n_clusters": 40,
  "presence": [{"alpha": 0.8, "beta": [-0.6, 0.4]}, {"alpha": 0.5, "beta": [-0.7, 0.3]}],
  "severity": [{"cutpoints": [0.2, 1.8], "gamma": 0.7}, {"cutpoints": [0.0, 1.6], "gamma": 0.7}],
  "correlation": {"kind": "exchangeable", "rho": 0.2},
  "teeth": [7, 8],
  "covariates": [{"name": "Avg_homeppm"}, {"name": "Brush", "per_time": true}]
}"#;

fn simulated(dir: &TempDir) -> String {
    let spec = path(dir, "truth.json");
    fs::write(&spec, TRUTH).unwrap();
    let data = path(dir, "data.csv");
    let out = run(&["simulate", "--spec", &spec, "--seed", "11", "--out", &data]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = simulated(&dir);
    let b = path(&dir, "again.csv");
    let out = run(&["simulate", "--spec", &path(&dir, "truth.json"), "--seed", "11", "--out", &b]);
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = path(&dir, "other.csv");
    run(&["simulate", "--spec", &path(&dir, "truth.json"), "--seed", "12", "--out", &c]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn simulate_rejects_invalid_spec() {
    let dir = TempDir::new().unwrap();
    let spec = path(&dir, "bad.json");
    fs::write(&spec, r#"{"n_clusters": 0}"#).unwrap();
    let out = run(&["simulate", "--spec", &spec, "--out", &path(&dir, "x.csv")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_606_children() {
    let dir = TempDir::new().unwrap();
    let spec = path(&dir, "truth.json");
    fs::write(&spec, TRUTH.replace("\"n_clusters\": 40", "\"n_clusters\": 606")).unwrap();
    let data = path(&dir, "data.csv");
    assert!(run(&["simulate", "--spec", &spec, "--out", &data]).status.success());
    let ds = hurdle_gee::cli::load_dataset(Path::new(&data)).unwrap();
    assert_eq!(ds.cluster_ids().len(), 606);
}

#[test]
fn fit_family_a_writes_one_table_per_time() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir);
    let out_dir = path(&dir, "fit");
    let out = run(&["fit", "--family", "A", "--corr", "1", "--input", &data, "--out", &out_dir, "--boot", "4", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for t in 1..=2 {
        assert!(Path::new(&out_dir).join(format!("A.1.{t}.fit.json")).exists());
        assert!(Path::new(&out_dir).join(format!("A.1.{t}.csv")).exists());
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("Model A.1.1 (age 9)"));
    assert!(stdout.contains("Model A.1.2 (age 13)"));
    // Only teeth 7 and 8 are observed, so the Tooth9 and Tooth10 columns drop.
    assert!(stdout.contains("| Tooth9 | NA | NA | NA |"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out_dir).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["bootstrap"]["replicates"], 4);

    let report = run(&["report", "--dir", &out_dir]);
    assert!(report.status.success());
    assert_eq!(String::from_utf8(report.stdout).unwrap(), stdout);
}

#[test]
fn fit_is_reproducible_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir);
    let args = |o: &str| {
        run(&["fit", "--family", "B", "--corr", "2", "--times", "1", "--input", &data, "--out", o, "--boot", "3", "--seed", "9", "--latex"])
    };
    let (a, b) = (path(&dir, "a"), path(&dir, "b"));
    assert!(args(&a).status.code().is_some_and(|c| c != 1));
    assert!(args(&b).status.code().is_some_and(|c| c != 1));
    for name in ["B.2.1.fit.json", "B.2.1.csv", "report.md", "report.tex", "manifest.json"] {
        let fa = fs::read(Path::new(&a).join(name)).unwrap();
        let fb = fs::read(Path::new(&b).join(name)).unwrap();
        if name == "manifest.json" {
            // Identical apart from the output path.
            let strip = |v: &[u8]| String::from_utf8_lossy(v).replace(&a, "").replace(&b, "");
            assert_eq!(strip(&fa), strip(&fb));
        } else {
            assert_eq!(fa, fb, "{name}");
        }
    }
}

#[test]
fn fit_family_c_caption_carries_gamma() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir);
    let out_dir = path(&dir, "fit");
    let out = run(&["fit", "--family", "C", "--corr", "2,2", "--times", "1", "--input", &data, "--out", &out_dir, "--boot", "0"]);
    assert_ne!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("Presence estimates"));
    assert!(stdout.contains("Severity estimates"));
    assert!(stdout.contains("Model C.2.2.1 (age 9), γ̂_1="));
    assert!(stdout.contains("ρ̂="));
    assert!(Path::new(&out_dir).join("C.2.2.1.presence.csv").exists());
    assert!(Path::new(&out_dir).join("C.2.2.1.severity.csv").exists());
}

#[test]
fn config_file_mirrors_flags() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir);
    let cfg = path(&dir, "cfg.json");
    let out_dir = path(&dir, "fit");
    fs::write(
        &cfg,
        serde_json::json!({"input": data, "out": out_dir, "family": "A", "corr": "3", "times": [2], "boot": 0, "js": "centered"})
            .to_string(),
    )
    .unwrap();
    let out = run(&["fit", "--config", &cfg]);
    assert_ne!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&out_dir).join("A.3.2.fit.json").exists());
    let bad = path(&dir, "bad.json");
    fs::write(&bad, r#"{"famly": "A"}"#).unwrap();
    assert_eq!(run(&["fit", "--config", &bad]).status.code(), Some(1));
}

#[test]
fn empty_dataset_is_a_hard_error() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "empty.csv");
    fs::write(&data, "cluster_id,time,tooth,zone,fri,x\n").unwrap();
    let out = run(&["fit", "--input", &data, "--out", &path(&dir, "o"), "--boot", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no observations"));
}

#[test]
fn bad_flags_are_hard_errors() {
    let dir = TempDir::new().unwrap();
    let data = simulated(&dir);
    let o = path(&dir, "o");
    assert_eq!(run(&["fit", "--input", &data, "--out", &o, "--corr", "7"]).status.code(), Some(1));
    assert_eq!(run(&["fit", "--input", &data, "--out", &o, "--family", "D"]).status.code(), Some(1));
    assert_eq!(run(&["fit", "--input", &data, "--out", &o, "--corr", "1,2"]).status.code(), Some(1));
    assert_eq!(run(&["fit", "--input", &data, "--out", &o, "--scaling", "other"]).status.code(), Some(1));
    assert_eq!(run(&["fit", "--input", &data, "--out", &o, "--boot", "1"]).status.code(), Some(1));
    assert_eq!(run(&["fit", "--out", &o]).status.code(), Some(1));
}

#[test]
fn report_without_artifacts_fails() {
    let dir = TempDir::new().unwrap();
    let out = run(&["report", "--dir", &dir.path().to_string_lossy()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn distribution_of_single_row() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "one.csv");
    fs::write(&data, "cluster_id,time,tooth,zone,fri\nc1,2,9,I,3\n").unwrap();
    let out = run(&["distribution", "--input", &data]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "time,age,zone,fri,count\n2,13,I,3,1\n");
}

#[test]
fn distribution_counts_sum_and_zero_share() {
    let dir = TempDir::new().unwrap();
    let spec = path(&dir, "truth.json");
    // logit(0.8) with no slopes: every cell is zero with probability 0.8.
    let alpha = (0.8f64 / 0.2).ln();
    fs::write(
        &spec,
        format!(
            r#"{{"n_clusters": 300, "presence": [{{"alpha": {alpha}, "beta": [0.0]}}],
                "severity": [{{"cutpoints": [0.0, 1.0], "beta": [0.0]}}],
                "correlation": {{"kind": "independence"}}, "covariates": [{{"name": "x"}}]}}"#
        ),
    )
    .unwrap();
    let data = path(&dir, "d.csv");
    assert!(run(&["simulate", "--spec", &spec, "--seed", "2", "--out", &data]).status.success());
    let counts = path(&dir, "counts.csv");
    assert!(run(&["distribution", "--input", &data, "--out", &counts]).status.success());
    let mut rdr = csv::Reader::from_path(&counts).unwrap();
    let (mut total, mut zeros) = (0usize, 0usize);
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let n: usize = rec[4].parse().unwrap();
        total += n;
        if &rec[3] == "0" {
            zeros += n;
        }
    }
    assert_eq!(total, 300 * 16);
    let share = zeros as f64 / total as f64;
    assert!((share - 0.8).abs() < 0.03, "zero share {share}");
}
