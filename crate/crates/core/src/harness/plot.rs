//! Self-contained SVG line charts of per-epoch metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::metrics::{read_metrics, EpochMetrics};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One named series of (epoch, value) points. NaN values leave gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    ((x0, x1), (y0, y1))
}

/// Renders a line chart with axes, five ticks per axis and a legend.
pub fn line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let ((x0, x1), (y0, y1)) = bounds(series);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{xv:.0}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{yv:.3}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in &s.points {
            if !y.is_finite() {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, sx(x), sy(y));
            pen_down = true;
        }
        let _ = writeln!(
            svg,
            r#"<path class="series" data-name="{}" data-points="{}" d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&s.name),
            s.points.len(),
            d.trim_end()
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn series_of(runs: &[(String, Vec<EpochMetrics>)], f: impl Fn(&EpochMetrics) -> f64) -> Vec<Series> {
    runs.iter()
        .map(|(name, rows)| Series {
            name: name.clone(),
            points: rows.iter().map(|r| (r.epoch as f64, f(r))).collect(),
        })
        .collect()
}

/// Reads `metrics.csv` from each run directory and writes `test_acc.svg`,
/// `schedule_scale.svg` and `cos_theta.svg` into `out_dir`, one series per
/// run. Nothing is written unless every input parses and is non-empty.
pub fn emit_plots(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("no run directories given".into()));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let path = dir.join("metrics.csv");
        let rows = read_metrics(&path)?;
        if rows.is_empty() {
            return Err(Error::Csv {
                path,
                reason: "no epoch rows".into(),
            });
        }
        runs.push((run_name(dir), rows));
    }
    let charts = [
        (
            "test_acc.svg",
            line_chart("Test accuracy", "test_acc", &series_of(&runs, |r| r.test_acc)),
        ),
        (
            "schedule_scale.svg",
            line_chart(
                "Compensation scale s(t)",
                "schedule_scale",
                &series_of(&runs, |r| r.schedule_scale),
            ),
        ),
        (
            "cos_theta.svg",
            line_chart(
                "Clean vs biased gradient cosine",
                "mean_cos_theta",
                &series_of(&runs, |r| r.mean_cos_theta),
            ),
        ),
    ];

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(charts.len());
    for (name, svg) in &charts {
        let tmp = out_dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, svg).map_err(|e| Error::io(&tmp, e))?;
        written.push((tmp, out_dir.join(name)));
    }
    for (tmp, dst) in &written {
        fs::rename(tmp, dst).map_err(|e| Error::io(dst, e))?;
    }
    Ok(written.into_iter().map(|(_, dst)| dst).collect())
}
