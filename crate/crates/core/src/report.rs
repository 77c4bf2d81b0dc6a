//! Result files: `iaa.csv`, `summary.json` and an `iaa.svg` line chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::orchestrator::{MethodId, RunRecord};

pub const CSV_HEADER: [&str; 5] = ["method", "scenario", "seed", "round", "iaa"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("malformed results in {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("no records to report")]
    Empty,
}

/// The IAA series of one `(method, scenario, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaaSeries {
    pub method: MethodId,
    pub scenario: String,
    pub seed: u64,
    pub iaa: Vec<f64>,
}

impl From<&RunRecord> for IaaSeries {
    fn from(r: &RunRecord) -> Self {
        IaaSeries {
            method: r.method,
            scenario: r.scenario.clone(),
            seed: r.seed,
            iaa: r.iaa.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: MethodId,
    pub scenario: String,
    pub seed: u64,
    pub aa: f64,
    pub afm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodId,
    pub scenario: String,
    pub seeds: usize,
    pub aa_mean: f64,
    /// Sample standard deviation; absent with a single seed.
    pub aa_std: Option<f64>,
    pub afm_mean: Option<f64>,
    pub afm_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<RunSummary>,
    pub methods: Vec<MethodSummary>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn sorted(series: &[IaaSeries]) -> Vec<IaaSeries> {
    let mut out = series.to_vec();
    out.sort_by(|a, b| {
        (a.method, &a.scenario, a.seed).cmp(&(b.method, &b.scenario, b.seed))
    });
    out
}

pub fn summarize(series: &[IaaSeries]) -> Result<Summary, ReportError> {
    if series.is_empty() {
        return Err(ReportError::Empty);
    }
    let series = sorted(series);
    let mut runs = Vec::with_capacity(series.len());
    for s in &series {
        let aa = metrics::aa(&s.iaa).map_err(|e| ReportError::Malformed {
            path: "<records>".into(),
            reason: e.to_string(),
        })?;
        runs.push(RunSummary {
            method: s.method,
            scenario: s.scenario.clone(),
            seed: s.seed,
            aa,
            afm: metrics::afm(&s.iaa).ok(),
        });
    }
    let mut groups: BTreeMap<(MethodId, String), Vec<&RunSummary>> = BTreeMap::new();
    for r in &runs {
        groups.entry((r.method, r.scenario.clone())).or_default().push(r);
    }
    let methods = groups
        .into_iter()
        .map(|((method, scenario), members)| {
            let aas: Vec<f64> = members.iter().map(|r| r.aa).collect();
            let afms: Vec<f64> = members.iter().filter_map(|r| r.afm).collect();
            let (aa_mean, aa_std) = mean_std(&aas);
            let (afm_mean, afm_std) = if afms.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&afms);
                (Some(m), s)
            };
            MethodSummary {
                method,
                scenario,
                seeds: members.len(),
                aa_mean,
                aa_std,
                afm_mean,
                afm_std,
            }
        })
        .collect();
    Ok(Summary { runs, methods })
}

/// Locale-independent, 17 significant digits; parses back to the same `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_iaa_csv(series: &[IaaSeries], path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(CSV_HEADER).map_err(csv_err(path))?;
    for s in sorted(series) {
        for (t, v) in s.iaa.iter().enumerate() {
            w.write_record([
                s.method.name().to_string(),
                s.scenario.clone(),
                s.seed.to_string(),
                (t + 1).to_string(),
                format_real(*v),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_iaa_csv(path: &Path) -> Result<Vec<IaaSeries>, ReportError> {
    let malformed = |reason: String| ReportError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(malformed(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut map: BTreeMap<(MethodId, String, u64), Vec<(usize, f64)>> = BTreeMap::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(csv_err(path))?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let method = MethodId::from_name(field(0))
            .ok_or_else(|| malformed(format!("row {}: unknown method {:?}", line + 2, field(0))))?;
        let seed: u64 = field(2).parse().map_err(|_| malformed(format!("row {}: bad seed", line + 2)))?;
        let round: usize = field(3).parse().map_err(|_| malformed(format!("row {}: bad round", line + 2)))?;
        let iaa: f64 = field(4).parse().map_err(|_| malformed(format!("row {}: bad iaa", line + 2)))?;
        map.entry((method, field(1).to_string(), seed)).or_default().push((round, iaa));
    }
    map.into_iter()
        .map(|((method, scenario, seed), mut points)| {
            points.sort_by_key(|p| p.0);
            if points.iter().enumerate().any(|(i, p)| p.0 != i + 1) {
                return Err(malformed(format!("{method}/{scenario}/seed {seed}: rounds are not 1..T")));
            }
            Ok(IaaSeries {
                method,
                scenario,
                seed,
                iaa: points.into_iter().map(|p| p.1).collect(),
            })
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// IAA against round, one polyline per method/scenario (mean over seeds).
pub fn render_svg(series: &[IaaSeries]) -> String {
    let (width, height) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 190.0, 20.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let mut groups: BTreeMap<(MethodId, String), Vec<&IaaSeries>> = BTreeMap::new();
    for s in series {
        groups.entry((s.method, s.scenario.clone())).or_default().push(s);
    }
    let rounds = series.iter().map(|s| s.iaa.len()).max().unwrap_or(1).max(1);
    let x_of = |t: usize| {
        if rounds == 1 {
            left + plot_w / 2.0
        } else {
            left + plot_w * (t - 1) as f64 / (rounds - 1) as f64
        }
    };
    let y_of = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    let ticks = rounds.min(10);
    for i in 0..ticks {
        let t = if ticks == 1 { 1 } else { 1 + i * (rounds - 1) / (ticks - 1) };
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            x_of(t),
            top + plot_h + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">FL round</text>"#,
        left + plot_w / 2.0,
        height - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">IAA</text>"#,
        top + plot_h / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for (i, ((method, scenario), members)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let len = members.iter().map(|s| s.iaa.len()).min().unwrap_or(0);
        let points: Vec<String> = (0..len)
            .map(|t| {
                let v = members.iter().map(|s| s.iaa[t]).sum::<f64>() / members.len() as f64;
                format!("{:.2},{:.2}", x_of(t + 1), y_of(v))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 8.0;
        let lx = left + plot_w + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{method} ({scenario})</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `iaa.csv`, `summary.json` and `iaa.svg` into `out_dir`.
pub fn write_outputs(series: &[IaaSeries], out_dir: &Path) -> Result<(Summary, Vec<PathBuf>), ReportError> {
    let summary = summarize(series)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("iaa.csv");
    write_iaa_csv(series, &csv_path)?;
    let json_path = out_dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    std::fs::write(&json_path, json).map_err(io_err(&json_path))?;
    let svg_path = out_dir.join("iaa.svg");
    std::fs::write(&svg_path, render_svg(&sorted(series))).map_err(io_err(&svg_path))?;
    Ok((summary, vec![csv_path, json_path, svg_path]))
}

pub fn emit_results(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let series: Vec<IaaSeries> = records.iter().map(IaaSeries::from).collect();
    Ok(write_outputs(&series, out_dir)?.1)
}

pub fn read_summary(path: &Path) -> Result<Summary, ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ReportError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
