//! Coefficient tables: assembly from pipeline output and rendering as
//! Markdown, LaTeX subtables and CSV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationStructure, Piece};
use crate::data::age_of_time;
use crate::inference::{significance_flag, BootstrapResult, Family, Interval, ModelSpec, PipelineOutput};

pub const MARKDOWN_HEADER: &str =
    "| Variable | Estimate | SE | Standardized Estimate | 95% CI | James-Stein Estimate | 95% CI (James-Stein) |";
const MARKDOWN_RULE: &str = "|---|---|---|---|---|---|---|";

/// JSON has no NaN; serde_json writes it as null, so read null back as NaN.
pub(crate) fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variable: String,
    #[serde(deserialize_with = "nan_from_null")]
    pub estimate: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub se: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub standardized: f64,
    /// Bootstrap interval of the standardized estimate.
    pub ci: Option<Interval>,
    #[serde(deserialize_with = "nan_from_null")]
    pub js: f64,
    pub ci_js: Option<Interval>,
    /// Bootstrap interval of the raw estimate.
    #[serde(default)]
    pub ci_raw: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub model: String,
    pub piece: Piece,
    pub time: u8,
    /// Scale factor, combined models only.
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn caption(&self) -> String {
        let mut s = format!("Model {}", self.model);
        if let Some(age) = age_of_time(self.time) {
            write!(s, " (age {age})").unwrap();
        }
        if let Some(g) = self.gamma {
            write!(s, ", γ̂_{}={}", self.time, fmt_fixed(g, 2)).unwrap();
        }
        if let Some(r) = self.rho {
            write!(s, ", ρ̂={}", fmt_fixed(r, 4)).unwrap();
        }
        s
    }

    fn latex_caption(&self) -> String {
        let mut s = format!("Model {}", self.model);
        if let Some(age) = age_of_time(self.time) {
            write!(s, " (age {age})").unwrap();
        }
        if let Some(g) = self.gamma {
            write!(s, ", $\\hat{{\\gamma}}_{}={}$", self.time, fmt_fixed(g, 2)).unwrap();
        }
        if let Some(r) = self.rho {
            write!(s, ", $\\hat{{\\rho}}={}$", fmt_fixed(r, 4)).unwrap();
        }
        s
    }
}

/// Fixed-point formatting; NaN and infinities print as `NA`, and a value
/// that rounds to zero never carries a minus sign.
pub fn fmt_fixed(v: f64, decimals: usize) -> String {
    if !v.is_finite() {
        return "NA".into();
    }
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn fmt_interval(ci: &Option<Interval>) -> (String, &'static str) {
    match ci {
        Some(i) if i.lower.is_finite() && i.upper.is_finite() => {
            (format!("({}, {})", fmt_fixed(i.lower, 3), fmt_fixed(i.upper, 3)), significance_flag(i))
        }
        _ => ("NA".into(), ""),
    }
}

pub fn render_markdown(table: &Table) -> String {
    let mut out = String::new();
    writeln!(out, "{}", table.caption()).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "{MARKDOWN_HEADER}").unwrap();
    writeln!(out, "{MARKDOWN_RULE}").unwrap();
    for r in &table.rows {
        let (ci, flag) = fmt_interval(&r.ci);
        let (ci_js, flag_js) = fmt_interval(&r.ci_js);
        writeln!(
            out,
            "| {} | {} | {} | {} | {ci}{flag} | {} | {ci_js}{flag_js} |",
            r.variable,
            fmt_fixed(r.estimate, 3),
            fmt_fixed(r.se, 3),
            fmt_fixed(r.standardized, 2),
            fmt_fixed(r.js, 3),
        )
        .unwrap();
    }
    out
}

fn latex_escape(s: &str) -> String {
    s.replace('_', "\\_")
}

fn latex_flag(flag: &str) -> String {
    if flag.is_empty() {
        String::new()
    } else {
        format!("$^{{{flag}}}$")
    }
}

/// Subtable in the layout of the published tables.
pub fn render_latex(table: &Table) -> String {
    let mut out = String::new();
    writeln!(out, "\\begin{{subtable}}{{\\linewidth}}").unwrap();
    writeln!(out, "\\caption{{{}}}", table.latex_caption()).unwrap();
    writeln!(out, "\\begin{{tabular}}{{rlcccccl}}").unwrap();
    writeln!(
        out,
        "Variable & Estimate & SE & \\makecell{{Standardized\\\\Estimate}} & 95\\% CI & \\makecell{{James-Stein\\\\Estimate}} & \\makecell{{95\\% CI\\\\(James-Stein)}} \\\\"
    )
    .unwrap();
    writeln!(out, "  \\hline").unwrap();
    for r in &table.rows {
        let (ci, flag) = fmt_interval(&r.ci);
        let (ci_js, flag_js) = fmt_interval(&r.ci_js);
        writeln!(
            out,
            "{} & {} & {} & {} & {ci}{} & {} & {ci_js}{} \\\\",
            latex_escape(&r.variable),
            fmt_fixed(r.estimate, 3),
            fmt_fixed(r.se, 3),
            fmt_fixed(r.standardized, 2),
            latex_flag(flag),
            fmt_fixed(r.js, 3),
            latex_flag(flag_js),
        )
        .unwrap();
    }
    writeln!(out, "  \\hline").unwrap();
    writeln!(out, "\\end{{tabular}}").unwrap();
    writeln!(out, "\\end{{subtable}}").unwrap();
    out
}

fn csv_num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

/// Full-precision CSV of a table.
pub fn render_csv(table: &Table) -> Result<String, csv::Error> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "variable", "estimate", "se", "standardized", "ci_lower", "ci_upper", "ci_flag", "js", "js_lower",
        "js_upper", "js_flag", "raw_lower", "raw_upper",
    ])?;
    let parts = |ci: &Option<Interval>| match ci {
        Some(i) => (csv_num(i.lower), csv_num(i.upper), significance_flag(i).to_string()),
        None => ("NA".into(), "NA".into(), String::new()),
    };
    for r in &table.rows {
        let (lo, hi, flag) = parts(&r.ci);
        let (jlo, jhi, jflag) = parts(&r.ci_js);
        let (rlo, rhi, _) = parts(&r.ci_raw);
        wtr.write_record([
            r.variable.clone(),
            csv_num(r.estimate),
            csv_num(r.se),
            csv_num(r.standardized),
            lo,
            hi,
            flag,
            csv_num(r.js),
            jlo,
            jhi,
            jflag,
            rlo,
            rhi,
        ])?;
    }
    let bytes = wtr.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn scalar_rho(c: &CorrelationStructure) -> Option<f64> {
    c.rho()
}

/// One table per (time, piece) from pipeline output and optional bootstrap.
pub fn build_tables(spec: &ModelSpec, output: &PipelineOutput, boot: Option<&BootstrapResult>) -> Vec<Table> {
    let mut tables = Vec::new();
    for (k, &time) in output.times.iter().enumerate() {
        let fit = &output.fits[k];
        for &piece in spec.family.pieces() {
            let track = output.track(piece).expect("track for family piece");
            let intervals = boot.and_then(|b| b.piece(piece));
            let rho = match (spec.family, piece) {
                (Family::C, Piece::Presence) => fit.combined.as_ref().and_then(|c| scalar_rho(&c.presence_correlation)),
                (Family::C, Piece::Severity) => fit.combined.as_ref().and_then(|c| scalar_rho(&c.severity_correlation)),
                (_, Piece::Presence) => fit.presence.as_ref().and_then(|f| scalar_rho(&f.correlation)),
                (_, Piece::Severity) => fit.severity.as_ref().and_then(|f| scalar_rho(&f.correlation)),
            };
            let rows = output
                .design_names
                .iter()
                .enumerate()
                .map(|(g, name)| TableRow {
                    variable: name.clone(),
                    estimate: track.estimates[k][g],
                    se: track.se[k][g],
                    standardized: track.standardized[k][g],
                    ci: intervals.map(|i| i.standardized[k][g]),
                    js: track.js[k][g],
                    ci_js: intervals.map(|i| i.js[k][g]),
                    ci_raw: intervals.map(|i| i.raw[k][g]),
                })
                .collect();
            tables.push(Table {
                model: spec.name(time),
                piece,
                time,
                gamma: fit.combined.as_ref().map(|c| c.gamma),
                rho,
                rows,
            });
        }
    }
    tables
}

/// Renders a group of tables, headed by piece for combined models.
pub fn render_report(tables: &[Table], latex: bool) -> String {
    let mut out = String::new();
    let combined = tables.iter().any(|t| t.gamma.is_some());
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            writeln!(out).unwrap();
        }
        if combined {
            let label = match t.piece {
                Piece::Presence => "Presence estimates",
                Piece::Severity => "Severity estimates",
            };
            if latex {
                writeln!(out, "% {label}").unwrap();
            } else {
                writeln!(out, "{label}").unwrap();
                writeln!(out).unwrap();
            }
        }
        out.push_str(&if latex { render_latex(t) } else { render_markdown(t) });
    }
    out
}
