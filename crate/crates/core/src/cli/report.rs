//! Metrics CSV, cross-file comparison and SVG convergence plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::RecognitionMetrics;
use crate::federated::LossSummary;

pub const METRICS_HEADER: [&str; 12] = [
    "seed",
    "mode",
    "round",
    "loss_lmc",
    "loss_kcl",
    "loss_bce",
    "loss_overall",
    "tar_far_1e-1",
    "tar_far_1e-2",
    "tpir_fpir_1e-1",
    "top1",
    "top5",
];

/// First column holding a numeric metric (everything after the id columns).
const VALUE_COLUMNS: usize = 3;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub seed: u64,
    pub mode: String,
    pub round: usize,
    pub losses: Option<LossSummary>,
    pub metrics: RecognitionMetrics,
}

impl MetricsRecord {
    fn values(&self) -> [Option<f64>; 9] {
        let l = self.losses;
        let m = self.metrics;
        [
            l.map(|l| l.lmc),
            l.map(|l| l.kcl),
            l.map(|l| l.bce),
            l.map(|l| l.overall),
            m.tar_far_1e1,
            m.tar_far_1e2,
            m.tpir_fpir_1e1,
            m.top1,
            m.top5,
        ]
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = METRICS_HEADER.join(",");
    out.push('\n');
    for r in records {
        let vals: Vec<String> = r.values().iter().map(|v| cell(*v)).collect();
        let _ = writeln!(out, "{},{},{},{}", r.seed, r.mode, r.round, vals.join(","));
    }
    out
}

/// A parsed metrics file: rows of `(seed, mode, round, values)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<(u64, String, usize, Vec<Option<f64>>)>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyInput)?;
        if header.split(',').collect::<Vec<_>>() != METRICS_HEADER {
            return Err(Error::SchemaMismatch(format!("unexpected header `{header}`")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != METRICS_HEADER.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} cells, got {}",
                    n + 2,
                    METRICS_HEADER.len(),
                    cells.len()
                )));
            }
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what}", n + 2));
            let seed = cells[0].parse().map_err(|_| bad("seed"))?;
            let round = cells[2].parse().map_err(|_| bad("round"))?;
            let vals = cells[VALUE_COLUMNS..]
                .iter()
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse().map(Some).map_err(|_| bad("value"))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((seed, cells[1].to_string(), round, vals));
        }
        Ok(Self { rows })
    }

    pub fn column(name: &str) -> Result<usize> {
        METRICS_HEADER[VALUE_COLUMNS..]
            .iter()
            .position(|&h| h == name)
            .ok_or_else(|| Error::UnknownMetric(name.to_string()))
    }

    /// Modes in first-appearance order.
    pub fn modes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, m, _, _) in &self.rows {
            if !out.contains(m) {
                out.push(m.clone());
            }
        }
        out
    }

    /// Seed-mean of one column per round for `mode`. Rounds where any seed
    /// lacks the value are reported as `None`.
    pub fn curve(&self, mode: &str, col: usize) -> Vec<(usize, Option<f64>)> {
        let mut by_round: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
        for (_, m, r, v) in &self.rows {
            if m == mode {
                by_round.entry(*r).or_default().push(v[col]);
            }
        }
        by_round
            .into_iter()
            .map(|(r, vs)| {
                let all: Option<Vec<f64>> = vs.iter().copied().collect();
                (r, all.map(|xs| xs.iter().sum::<f64>() / xs.len() as f64))
            })
            .collect()
    }

    pub fn seeds(&self, mode: &str) -> usize {
        let mut s: Vec<u64> = self.rows.iter().filter(|r| r.1 == mode).map(|r| r.0).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }
}

/// Seed-mean final-round values of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub source: String,
    pub mode: String,
    pub seeds: usize,
    pub final_round: usize,
    pub values: Vec<Option<f64>>,
    /// First round whose seed-mean TAR@FAR=1e-2 equals the best over rounds.
    pub rounds_to_best: Option<usize>,
}

pub fn summarize(table: &MetricsTable, source: &str) -> Vec<SummaryRow> {
    let tar = MetricsTable::column("tar_far_1e-2").unwrap();
    let width = METRICS_HEADER.len() - VALUE_COLUMNS;
    table
        .modes()
        .into_iter()
        .map(|mode| {
            let curves: Vec<Vec<(usize, Option<f64>)>> = (0..width).map(|c| table.curve(&mode, c)).collect();
            let final_round = curves[0].last().map_or(0, |p| p.0);
            let values = curves.iter().map(|c| c.last().and_then(|p| p.1)).collect();
            let best = curves[tar].iter().filter_map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let rounds_to_best = curves[tar].iter().find(|p| p.1 == Some(best)).map(|p| p.0);
            SummaryRow {
                source: source.to_string(),
                seeds: table.seeds(&mode),
                mode,
                final_round,
                values,
                rounds_to_best,
            }
        })
        .collect()
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut head = vec!["source", "mode", "seeds", "round"];
    head.extend_from_slice(&METRICS_HEADER[VALUE_COLUMNS + 4..]);
    head.push("rounds_to_best");
    let mut table: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let mut line = vec![
            r.source.clone(),
            r.mode.clone(),
            r.seeds.to_string(),
            r.final_round.to_string(),
        ];
        line.extend(
            r.values[4..]
                .iter()
                .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())),
        );
        line.push(r.rounds_to_best.map(|x| x.to_string()).unwrap_or_else(|| "-".into()));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &table {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Summaries of several metrics files. Every file must cover the same modes.
pub fn compare_modes(files: &[(String, String)]) -> Result<Vec<SummaryRow>> {
    if files.len() < 2 {
        return Err(Error::InsufficientData(
            "compare needs at least two metrics files".into(),
        ));
    }
    let tables = files
        .iter()
        .map(|(name, text)| MetricsTable::parse(text).map_err(|e| Error::SchemaMismatch(format!("{name}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<String> = Vec::new();
    for t in &tables {
        for m in t.modes() {
            if !all.contains(&m) {
                all.push(m);
            }
        }
    }
    for ((name, _), t) in files.iter().zip(&tables) {
        let have = t.modes();
        if let Some(missing) = all.iter().find(|m| !have.contains(m)) {
            return Err(Error::SchemaMismatch(format!("mode {missing} absent from {name}")));
        }
    }
    Ok(files
        .iter()
        .zip(&tables)
        .flat_map(|((name, _), t)| summarize(t, name))
        .collect())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Seed-mean curve of `metric` per mode as a standalone SVG document.
pub fn plot_curves(csv: &str, metric: &str) -> Result<String> {
    let col = MetricsTable::column(metric)?;
    let table = MetricsTable::parse(csv)?;
    if table.rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let modes = table.modes();
    let curves: Vec<Vec<(usize, f64)>> = modes
        .iter()
        .map(|m| {
            table
                .curve(m, col)
                .into_iter()
                .filter_map(|(r, v)| v.map(|v| (r, v)))
                .collect()
        })
        .collect();
    let points: Vec<&(usize, f64)> = curves.iter().flatten().collect();
    if points.is_empty() {
        return Err(Error::InsufficientData(format!("no values for {metric}")));
    }
    let max_round = points.iter().map(|p| p.0).max().unwrap().max(1) as f64;
    let (mut lo, mut hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 160.0, 30.0, 50.0);
    let px = |r: usize| left + (r as f64 / max_round) * (w - left - right);
    let py = |v: f64| top + (1.0 - (v - lo) / (hi - lo)) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, h - bottom, top);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for r in 0..=max_round as usize {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{r}</text>"#,
            px(r),
            y0 + 15.0
        );
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{v:.3}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">round</text>"#,
        (x0 + x1) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(metric)
    );
    for (i, (mode, curve)) in modes.iter().zip(&curves).enumerate() {
        if curve.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .iter()
            .map(|&(r, v)| format!("{:.2},{:.2}", px(r), py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 18.0 * i as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="12" fill="{color}">{}</text>"#,
            x1 + 12.0,
            xml_escape(mode)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
