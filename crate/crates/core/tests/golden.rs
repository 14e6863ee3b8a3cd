use std::path::Path;

use hurdle_gee::cli::cmd_report;

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn artifact_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/artifact")
}

#[test]
fn markdown_report_matches_golden_bytes() {
    assert_eq!(cmd_report(&artifact_dir(), false).unwrap(), golden("A.1.1.md"));
}

#[test]
fn latex_report_matches_golden_bytes() {
    assert_eq!(cmd_report(&artifact_dir(), true).unwrap(), golden("A.1.1.tex"));
}

#[test]
fn published_row_carries_negative_markers_on_both_intervals() {
    let md = golden("A.1.1.md");
    let row = md.lines().find(|l| l.starts_with("| Avg_homeppm")).unwrap();
    assert_eq!(row, "| Avg_homeppm | -0.631 | 0.211 | -2.98 | (-4.969, -1.267)*- | -2.966 | (-4.795, -1.341)*- |");
    let tooth = md.lines().find(|l| l.starts_with("| Tooth8")).unwrap();
    assert!(!tooth.contains('*'));
}
