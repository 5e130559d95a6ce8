//! Report rows, their CSV encoding, and merging reports into one table and chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fsutil::{read_artifact, write_atomic};

pub const COLUMNS: [&str; 7] = ["scenario", "method", "inv_r2_db", "mse_db", "sigma_db", "runtime_s", "checkpoint"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub method: String,
    pub inv_r2_db: f64,
    pub mse_db: f64,
    pub sigma_db: f64,
    /// Wall-clock inference time over the test split.
    pub runtime_s: Option<f64>,
    /// Content hash of the checkpoint a learned method was evaluated from.
    pub checkpoint: Option<String>,
}

/// Rows are written with fixed precision so reruns give identical bytes. Runtimes
/// vary between runs and are left empty unless `with_runtime` is set.
pub fn rows_to_csv(rows: &[ReportRow], with_runtime: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        let runtime = match (with_runtime, r.runtime_s) {
            (true, Some(s)) => format!("{s:.6}"),
            _ => String::new(),
        };
        w.write_record([
            r.scenario.clone(),
            r.method.clone(),
            format!("{:.2}", r.inv_r2_db),
            format!("{:.6}", r.mse_db),
            format!("{:.6}", r.sigma_db),
            runtime,
            r.checkpoint.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Format(format!("{what}: {field:?} is not a number")))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::Format(format!("report header {header:?} differs from {COLUMNS:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let opt = |i: usize| Some(rec[i].to_string()).filter(|s| !s.is_empty());
        rows.push(ReportRow {
            scenario: rec[0].to_string(),
            method: rec[1].to_string(),
            inv_r2_db: parse_f64(&rec[2], "inv_r2_db")?,
            mse_db: parse_f64(&rec[3], "mse_db")?,
            sigma_db: parse_f64(&rec[4], "sigma_db")?,
            runtime_s: opt(5).map(|s| parse_f64(&s, "runtime_s")).transpose()?,
            checkpoint: opt(6),
        });
    }
    Ok(rows)
}

/// Writes the report CSV and a JSON sidecar with the measured runtimes.
pub fn write_report(path: &Path, rows: &[ReportRow], with_runtime: bool) -> Result<()> {
    write_atomic(path, &rows_to_csv(rows, with_runtime)?)?;
    let timing: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "scenario": r.scenario, "method": r.method, "inv_r2_db": r.inv_r2_db, "runtime_s": r.runtime_s,
            })
        })
        .collect();
    let sidecar = path.with_extension("timing.json");
    write_atomic(&sidecar, serde_json::to_string_pretty(&timing).expect("json").as_bytes())
}

/// Writes `<report>.provenance.json` tying every row to the config and data
/// hashes and the base seeds it was produced from.
pub fn write_provenance(path: &Path, cfg: &ExperimentConfig, rows: &[ReportRow]) -> Result<()> {
    let entries: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "scenario": r.scenario, "method": r.method, "inv_r2_db": r.inv_r2_db, "checkpoint": r.checkpoint,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "config_hash": cfg.hash(),
        "data_hash": cfg.data_hash(),
        "seeds": cfg.seeds,
        "rows": entries,
    });
    let sidecar = path.with_extension("provenance.json");
    write_atomic(&sidecar, serde_json::to_string_pretty(&doc).expect("json").as_bytes())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    rows_from_csv(&read_artifact(path)?)
}

/// Per-trajectory linear MSE of every method, one row per (row, trajectory).
pub fn per_trajectory_csv(rows: &[(ReportRow, Vec<f64>)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "method", "inv_r2_db", "trajectory", "mse"])?;
    for (row, losses) in rows {
        for (k, v) in losses.iter().enumerate() {
            w.write_record([
                row.scenario.clone(),
                row.method.clone(),
                format!("{:.2}", row.inv_r2_db),
                k.to_string(),
                format!("{v:.9e}"),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn base_scenario(label: &str) -> &str {
    label.split('@').next().unwrap_or(label)
}

/// Concatenates reports in input order after checking they describe one scenario.
pub fn merge(reports: &[Vec<ReportRow>]) -> Result<Vec<ReportRow>> {
    let mut scenario: Option<&str> = None;
    for row in reports.iter().flatten() {
        let base = base_scenario(&row.scenario);
        match scenario {
            None => scenario = Some(base),
            Some(s) if s != base => {
                return Err(Error::Config(format!("cannot merge reports of scenarios {s:?} and {base:?}")));
            }
            Some(_) => {}
        }
    }
    Ok(reports.iter().flatten().cloned().collect())
}

/// Line chart of MSE [dB] against 1/r^2 [dB], one series per (scenario label, method).
pub fn svg_chart(rows: &[ReportRow]) -> String {
    let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.mse_db.is_finite()) {
        series.entry((r.scenario.clone(), r.method.clone())).or_default().push((r.inv_r2_db, r.mse_db));
    }
    for points in series.values_mut() {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let all: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0, 1.0, 0.0, 1.0);
    if !all.is_empty() {
        x0 = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    if x1 - x0 < 1e-9 {
        (x0, x1) = (x0 - 1.0, x1 + 1.0);
    }
    if y1 - y0 < 1e-9 {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">1/r^2 [dB]</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        out,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">MSE [dB]</text>"#,
        h / 2.0,
        h / 2.0
    );
    for v in [x0, x1] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{v:.1}</text>"#, sx(v), h - pad + 16.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, pad - 6.0, sy(v) + 4.0);
    }
    for (i, ((scenario, method), points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points.iter().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for (x, y) in points {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(*x), sy(*y));
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#,
            w - pad - 150.0,
            xml_escape(&format!("{method} ({scenario})"))
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Reads the reports, writes the merged CSV to `out` and the chart next to it.
pub fn compare(inputs: &[&Path], out: &Path) -> Result<Vec<ReportRow>> {
    let reports = inputs.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let merged = merge(&reports)?;
    let with_runtime = merged.iter().any(|r| r.runtime_s.is_some());
    write_atomic(out, &rows_to_csv(&merged, with_runtime)?)?;
    write_atomic(&out.with_extension("svg"), svg_chart(&merged).as_bytes())?;
    Ok(merged)
}
