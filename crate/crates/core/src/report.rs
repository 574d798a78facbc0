//! Evaluation report files and the lambda ablation table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalReport;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_SVG: &str = "report.svg";

const BASE_FILL: &str = "#4c78a8";
const NOVEL_FILL: &str = "#f58518";
const ALL_FILL: &str = "#54a24b";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `report.csv` and `report.svg` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write(&dir.join(REPORT_JSON), &json)?;
    write(&dir.join(REPORT_CSV), &report.to_csv())?;
    write(&dir.join(REPORT_SVG), &report_svg(report))
}

fn svg_open(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

/// Horizontal gridlines at AP 0, 0.25, ..., 1 for a plot of height `plot_h`
/// whose baseline sits at `base_y`.
fn axis(out: &mut String, left: usize, right: usize, base_y: f64, plot_h: f64) {
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = base_y - v * plot_h;
        let _ = writeln!(
            out,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{right}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            left - 4,
            y + 4.0
        );
    }
}

/// Per-class AP bars colored by group, with the group means in the title.
pub fn report_svg(report: &EvalReport) -> String {
    let bar = 36usize;
    let gap = 14usize;
    let left = 50usize;
    let plot_h = 200.0;
    let top = 40.0;
    let width = left + report.per_class.len().max(1) * (bar + gap) + 20;
    let height = 300usize;
    let base_y = top + plot_h;
    let mut out = svg_open(width, height);
    let _ = writeln!(
        out,
        "<text x=\"{left}\" y=\"20\">AP@{} base {:.3} novel {:.3} all {:.3} ECES {:.3}</text>",
        report.iou_threshold, report.map_base, report.map_novel, report.map_all, report.em_ap
    );
    axis(&mut out, left, width - 10, base_y, plot_h);
    for (i, c) in report.per_class.iter().enumerate() {
        let x = left + gap / 2 + i * (bar + gap);
        let fill = if c.novel { NOVEL_FILL } else { BASE_FILL };
        match c.ap {
            Some(ap) => {
                let h = ap * plot_h;
                let _ = writeln!(
                    out,
                    "<rect x=\"{x}\" y=\"{:.1}\" width=\"{bar}\" height=\"{h:.1}\" fill=\"{fill}\"/>",
                    base_y - h
                );
            }
            None => {
                let _ = writeln!(out, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">n/a</text>", x + bar / 2, base_y - 4.0);
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x + bar / 2,
            base_y + 16.0,
            c.class
        );
    }
    let _ = writeln!(
        out,
        "<rect x=\"{left}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{BASE_FILL}\"/><text x=\"{}\" y=\"{:.1}\">base</text>\
         <rect x=\"{}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{NOVEL_FILL}\"/><text x=\"{}\" y=\"{:.1}\">novel</text>",
        base_y + 30.0,
        left + 14,
        base_y + 39.0,
        left + 70,
        base_y + 30.0,
        left + 84,
        base_y + 39.0
    );
    out.push_str("</svg>\n");
    out
}

/// One lambda value averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub map_base: f64,
    pub map_novel: f64,
    pub map_all: f64,
    pub em_ap: f64,
}

impl AblationRow {
    /// Means over per-seed reports of one lambda value.
    pub fn from_reports(lambda: f64, seeds: &[u64], reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() || reports.len() != seeds.len() {
            return Err(Error::InvalidArgument(format!(
                "need one report per seed, got {} reports for {} seeds",
                reports.len(),
                seeds.len()
            )));
        }
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        Ok(Self {
            lambda,
            seeds: seeds.to_vec(),
            map_base: mean(|r| r.map_base),
            map_novel: mean(|r| r.map_novel),
            map_all: mean(|r| r.map_all),
            em_ap: mean(|r| r.em_ap),
        })
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("lambda,seeds,map_base,map_novel,map_all,em_ap\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.lambda,
            seeds.join(";"),
            r.map_base,
            r.map_novel,
            r.map_all,
            r.em_ap
        );
    }
    out
}

/// Grouped bars (base, novel, all) per lambda value.
pub fn ablation_svg(rows: &[AblationRow]) -> String {
    let bar = 18usize;
    let group = 3 * bar + 24;
    let left = 50usize;
    let plot_h = 200.0;
    let top = 40.0;
    let width = left + rows.len().max(1) * group + 20;
    let base_y = top + plot_h;
    let mut out = svg_open(width, 300);
    let _ = writeln!(out, "<text x=\"{left}\" y=\"20\">mAP@0.5 by lambda (base, novel, all)</text>");
    axis(&mut out, left, width - 10, base_y, plot_h);
    for (i, r) in rows.iter().enumerate() {
        let x0 = left + 12 + i * group;
        for (k, (v, fill)) in [(r.map_base, BASE_FILL), (r.map_novel, NOVEL_FILL), (r.map_all, ALL_FILL)]
            .into_iter()
            .enumerate()
        {
            let h = v * plot_h;
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{:.1}\" width=\"{bar}\" height=\"{h:.1}\" fill=\"{fill}\"/>",
                x0 + k * bar,
                base_y - h
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x0 + 3 * bar / 2,
            base_y + 16.0,
            r.lambda
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("ablation.csv"), &ablation_csv(rows))?;
    write(&dir.join("ablation.svg"), &ablation_svg(rows))
}
