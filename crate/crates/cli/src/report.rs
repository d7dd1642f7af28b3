//! Metrics tables, aggregate summaries and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adaseg_core::data::ShiftLevel;
use adaseg_core::pipeline::{aggregate, GroupSummary, IntensityStats, MeanStd, MetricsRow};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, IoContext, Result};

pub const ROWS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DICE_BAR_FILE: &str = "dice_bar.svg";
pub const DICE_BOX_FILE: &str = "dice_box.svg";
pub const INTENSITY_BOX_FILE: &str = "intensity_box.svg";

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    domain: String,
    shift: String,
    dice: Option<f64>,
    tpr: Option<f64>,
    intensity_mean: Option<f64>,
    intensity_q1: Option<f64>,
    intensity_median: Option<f64>,
    intensity_q3: Option<f64>,
}

impl From<&MetricsRow> for CsvRow {
    fn from(r: &MetricsRow) -> Self {
        let s = r.intensity;
        CsvRow {
            id: r.id.clone(),
            domain: r.domain.name().to_string(),
            shift: r.shift.as_str().to_string(),
            dice: r.dice,
            tpr: r.tpr,
            intensity_mean: s.map(|s| s.mean),
            intensity_q1: s.map(|s| s.q1),
            intensity_median: s.map(|s| s.median),
            intensity_q3: s.map(|s| s.q3),
        }
    }
}

impl TryFrom<CsvRow> for MetricsRow {
    type Error = CliError;

    fn try_from(r: CsvRow) -> Result<Self> {
        let intensity = match (
            r.intensity_mean,
            r.intensity_q1,
            r.intensity_median,
            r.intensity_q3,
        ) {
            (Some(mean), Some(q1), Some(median), Some(q3)) => Some(IntensityStats {
                mean,
                q1,
                median,
                q3,
            }),
            (None, None, None, None) => None,
            _ => {
                return Err(CliError::Data(format!(
                    "row {}: partial intensity statistics",
                    r.id
                )))
            }
        };
        Ok(MetricsRow {
            id: r.id,
            domain: r.domain.parse()?,
            shift: r.shift.parse::<ShiftLevel>()?,
            dice: r.dice,
            tpr: r.tpr,
            intensity,
        })
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow::from(r)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf8")
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.deserialize::<CsvRow>()
        .map(|r| {
            r.map_err(|e| CliError::Data(format!("metrics table: {e}")))
                .and_then(MetricsRow::try_from)
        })
        .collect()
}

fn mean_std_json(m: Option<MeanStd>) -> serde_json::Value {
    m.map_or(
        serde_json::Value::Null,
        |m| json!({ "mean": m.mean, "std": m.std, "n": m.n }),
    )
}

pub fn summary_json(groups: &[GroupSummary]) -> String {
    let gs: Vec<_> = groups
        .iter()
        .map(|g| {
            json!({
                "domain": g.domain.name(),
                "shift": g.shift.as_str(),
                "n": g.n,
                "dice": mean_std_json(g.dice),
                "tpr": mean_std_json(g.tpr),
                "intensity_mean": mean_std_json(g.intensity_mean),
            })
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&json!({ "groups": gs })).expect("json");
    s.push('\n');
    s
}

fn group_label(g: &GroupSummary) -> String {
    format!("{} / {}", g.domain.name(), g.shift.as_str())
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const BOTTOM: f64 = 60.0;
const TOP: f64 = 30.0;

struct Svg {
    body: String,
    lo: f64,
    hi: f64,
}

impl Svg {
    fn new(title: &str, lo: f64, hi: f64) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            body,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#,
            W / 2.0
        );
        let _ = writeln!(
            body,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
            H - BOTTOM
        );
        let _ = writeln!(
            body,
            r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
            H - BOTTOM,
            W - 10.0
        );
        let mut svg = Svg { body, lo, hi };
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            let y = svg.y(v);
            let _ = writeln!(
                svg.body,
                r#"<text x="{}" y="{y:.1}" text-anchor="end">{v:.2}</text>"#,
                LEFT - 4.0
            );
        }
        svg
    }

    fn y(&self, v: f64) -> f64 {
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        H - BOTTOM - t * (H - BOTTOM - TOP)
    }

    fn slot(&self, i: usize, n: usize) -> (f64, f64) {
        let span = (W - 10.0 - LEFT) / n.max(1) as f64;
        (LEFT + span * (i as f64 + 0.5), span * 0.5)
    }

    fn label(&mut self, x: f64, text: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{text}</text>"#,
            H - BOTTOM + 16.0
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// Mean ± std bars of Dice per group.
pub fn dice_bar_svg(groups: &[GroupSummary]) -> String {
    let mut s = Svg::new("Dice (mean ± std)", 0.0, 1.0);
    for (i, g) in groups.iter().enumerate() {
        let (x, w) = s.slot(i, groups.len());
        s.label(x, &group_label(g));
        let Some(d) = g.dice else { continue };
        let (y0, y) = (s.y(0.0), s.y(d.mean));
        let _ = writeln!(
            s.body,
            r##"<rect x="{:.1}" y="{y:.1}" width="{w:.1}" height="{:.1}" fill="#4c72b0"/>"##,
            x - w / 2.0,
            y0 - y
        );
        let (ya, yb) = (s.y(d.mean - d.std), s.y(d.mean + d.std));
        let _ = writeln!(
            s.body,
            r#"<line x1="{x:.1}" y1="{ya:.1}" x2="{x:.1}" y2="{yb:.1}" stroke="black"/>"#
        );
    }
    s.finish()
}

fn quartiles(mut v: Vec<f64>) -> Option<[f64; 5]> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

fn box_svg(
    title: &str,
    groups: &[GroupSummary],
    rows: &[MetricsRow],
    pick: fn(&MetricsRow) -> Option<f64>,
    lo: f64,
    hi: f64,
) -> String {
    let mut s = Svg::new(title, lo, hi);
    for (i, g) in groups.iter().enumerate() {
        let (x, w) = s.slot(i, groups.len());
        s.label(x, &group_label(g));
        let vals = rows
            .iter()
            .filter(|r| r.domain == g.domain && r.shift == g.shift)
            .filter_map(pick)
            .collect();
        let Some([min, q1, med, q3, max]) = quartiles(vals) else {
            continue;
        };
        let (ymin, y1, ym, y3, ymax) = (s.y(min), s.y(q1), s.y(med), s.y(q3), s.y(max));
        let _ = writeln!(
            s.body,
            r#"<line x1="{x:.1}" y1="{ymin:.1}" x2="{x:.1}" y2="{ymax:.1}" stroke="black"/>"#
        );
        let _ = writeln!(
            s.body,
            r##"<rect x="{:.1}" y="{y3:.1}" width="{w:.1}" height="{:.1}" fill="#dd8452" stroke="black"/>"##,
            x - w / 2.0,
            y1 - y3
        );
        let _ = writeln!(
            s.body,
            r#"<line x1="{:.1}" y1="{ym:.1}" x2="{:.1}" y2="{ym:.1}" stroke="black" stroke-width="2"/>"#,
            x - w / 2.0,
            x + w / 2.0
        );
    }
    s.finish()
}

/// Files written by [`emit_report`].
#[derive(Debug)]
pub struct ReportFiles {
    pub rows: PathBuf,
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn emit_report(rows: &[MetricsRow], dir: &Path) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(CliError::Data("no metrics rows to report".into()));
    }
    std::fs::create_dir_all(dir).at(dir)?;
    let groups = aggregate(rows);
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::write(&p, text).at(&p)?;
        Ok(p)
    };
    let rows_path = write(ROWS_FILE, rows_to_csv(rows))?;
    let summary = write(SUMMARY_FILE, summary_json(&groups))?;
    let plots = vec![
        write(DICE_BAR_FILE, dice_bar_svg(&groups))?,
        write(
            DICE_BOX_FILE,
            box_svg("Dice per sample", &groups, rows, |r| r.dice, 0.0, 1.0),
        )?,
        write(
            INTENSITY_BOX_FILE,
            box_svg(
                "Mean lung intensity",
                &groups,
                rows,
                |r| r.intensity.map(|s| s.mean),
                -1.0,
                1.0,
            ),
        )?,
    ];
    Ok(ReportFiles {
        rows: rows_path,
        summary,
        plots,
    })
}
