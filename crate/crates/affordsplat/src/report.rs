//! Markdown tables and SVG plots from MetricReport files.
//!
//! Table cells hold the shortest decimal that parses back to the exact
//! `f64` in the report, so tables can be read back without loss.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use affordsplat_core::evalkit::{Aggregate, MetricReport, Summary, REPORT_SCHEMA_VERSION};
use affordsplat_core::train::EpochStats;

use crate::error::{Error, Result};

pub const METRICS: [&str; 5] = ["mIoU", "AUC", "SIM", "MAE", "KLD"];

fn summaries(a: &Aggregate) -> [Summary; 5] {
    [a.miou, a.auc, a.sim, a.mae, a.kld]
}

fn cell(s: &Summary) -> String {
    s.mean.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

/// Reads a MetricReport, rejecting other schema versions before decoding.
pub fn read_report(text: &str) -> Result<MetricReport> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Report(format!("not JSON: {e}")))?;
    match v.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(n) if n == REPORT_SCHEMA_VERSION as u64 => {}
        Some(n) => return Err(Error::Report(format!("schema version {n}, expected {REPORT_SCHEMA_VERSION}"))),
        None => return Err(Error::Report("missing schema_version".into())),
    }
    serde_json::from_value(v).map_err(|e| Error::Report(format!("malformed report: {e}")))
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_report(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
}

/// Column labels for a set of reports: the split name, numbered on repeats.
pub fn labels(reports: &[MetricReport]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| if seen.insert(r.split.clone()) { r.split.clone() } else { format!("{}#{}", r.split, i + 1) })
        .collect()
}

fn header(out: &mut String, first: &str, cols: &[&str]) {
    let _ = writeln!(out, "| {first} | {} |", cols.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(cols.len() + 1));
}

fn agg_row(out: &mut String, key: &str, a: &Aggregate) {
    let vals: Vec<String> = summaries(a).iter().map(cell).collect();
    let _ = writeln!(out, "| {key} | {} | {} |", a.count, vals.join(" | "));
}

pub fn render_markdown(reports: &[MetricReport]) -> String {
    let labels = labels(reports);
    let mut cols = vec!["samples"];
    cols.extend(METRICS);
    let mut out = String::from("# Affordance evaluation\n\n## Overall\n\n");
    header(&mut out, "split", &cols);
    for (l, r) in labels.iter().zip(reports) {
        agg_row(&mut out, l, &r.overall);
    }
    for (l, r) in labels.iter().zip(reports) {
        let _ = write!(out, "\n## Per affordance ({l})\n\n");
        header(&mut out, "affordance", &cols);
        for (k, a) in &r.by_affordance {
            agg_row(&mut out, k, a);
        }
        let _ = write!(out, "\n## Per object ({l})\n\n");
        header(&mut out, "category", &cols);
        for (k, a) in &r.by_category {
            agg_row(&mut out, k, a);
        }
    }
    if reports.len() >= 2 {
        out.push_str("\n## Split comparison\n\n");
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        header(&mut out, "metric", &refs);
        for (m, name) in METRICS.iter().enumerate() {
            let vals: Vec<String> = reports.iter().map(|r| cell(&summaries(&r.overall)[m])).collect();
            let _ = writeln!(out, "| {name} | {} |", vals.join(" | "));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkdownTable {
    /// Text of the nearest `##` heading above the table.
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Pipe tables in `md`, each with the heading it sits under.
pub fn parse_tables(md: &str) -> Vec<MarkdownTable> {
    let split = |l: &str| -> Vec<String> { l.trim().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect() };
    let mut tables = Vec::new();
    let mut title = String::new();
    let mut lines = md.lines().peekable();
    while let Some(line) = lines.next() {
        if let Some(t) = line.strip_prefix("## ") {
            title = t.trim().to_string();
        } else if line.starts_with('|') {
            let header = split(line);
            lines.next();
            let mut rows = Vec::new();
            while lines.peek().is_some_and(|l| l.starts_with('|')) {
                rows.push(split(lines.next().unwrap()));
            }
            tables.push(MarkdownTable { title: title.clone(), header, rows });
        }
    }
    tables
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 6] = ["#c0392b", "#2471a3", "#229954", "#b9770e", "#7d3c98", "#566573"];

/// Grouped bars of the overall metrics (KLD excluded: it is unbounded), one
/// colour per report.
pub fn metric_bars_svg(reports: &[MetricReport]) -> String {
    let labels = labels(reports);
    let shown = &METRICS[..4];
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let group_w = (w - 2.0 * pad) / shown.len() as f64;
    let bar_w = group_w * 0.8 / reports.len().max(1) as f64;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - pad, w - pad, h - pad);
    for (m, name) in shown.iter().enumerate() {
        let gx = pad + m as f64 * group_w;
        for (i, r) in reports.iter().enumerate() {
            let v = summaries(&r.overall)[m].mean.unwrap_or(0.0).clamp(0.0, 1.0);
            let bh = v * (h - 2.0 * pad);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                gx + group_w * 0.1 + i as f64 * bar_w,
                h - pad - bh,
                bar_w,
                bh,
                PALETTE[i % PALETTE.len()]
            );
        }
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{name}</text>", gx + group_w / 2.0, h - pad + 16.0);
    }
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>", pad, 16.0 + 14.0 * i as f64, PALETTE[i % PALETTE.len()], esc(l));
    }
    s.push_str("</svg>\n");
    s
}

/// Mean loss per epoch, one polyline per history, on a shared scale.
pub fn loss_curves_svg(histories: &[(String, Vec<EpochStats>)]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let max_epochs = histories.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2) as f64;
    let vals = histories.iter().flat_map(|(_, v)| v.iter().map(|e| e.mean_loss)).filter(|x| x.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", w - 2.0 * pad, h - 2.0 * pad);
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\">{hi:.4}</text>", pad - 4.0);
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\">{lo:.4}</text>", h - pad + 14.0);
    for (i, (name, hist)) in histories.iter().enumerate() {
        let pts: Vec<String> = hist
            .iter()
            .enumerate()
            .map(|(e, st)| {
                let x = pad + e as f64 / (max_epochs - 1.0) * (w - 2.0 * pad);
                let y = h - pad - (st.mean_loss - lo) / (hi - lo) * (h - 2.0 * pad);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>", w - pad - 150.0, pad + 14.0 * (i + 1) as f64, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub markdown: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `report.md`, `metrics.svg` and, given histories, `loss.svg` to `dir`.
pub fn run_report(reports: &[MetricReport], histories: &[(String, Vec<EpochStats>)], dir: &Path) -> Result<ReportFiles> {
    if reports.is_empty() {
        return Err(Error::Report("no reports given".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let markdown = write("report.md", render_markdown(reports))?;
    let mut plots = vec![write("metrics.svg", metric_bars_svg(reports))?];
    if !histories.is_empty() {
        plots.push(write("loss.svg", loss_curves_svg(histories))?);
    }
    Ok(ReportFiles { markdown, plots })
}
