use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use simmatch_core::data;
use simmatch_core::model::predict;
use simmatch_core::{MetricsRecord, Tensor};

use crate::commands::load_model;
use crate::{io_error, CliError, CliResult};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 220.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const GRID: usize = 80;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Metric series drawn per file, with their dash patterns.
const SERIES: [(&str, &str); 3] = [
    ("validation", "none"),
    ("unlabeled", "6,3"),
    ("pseudo-label", "2,3"),
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn read_records(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<MetricsRecord>(l)
                .map_err(|e| CliError::usage(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if records.is_empty() {
        return Err(CliError::usage(format!("{}: no records", path.display())));
    }
    Ok(records)
}

fn series_values(records: &[MetricsRecord], which: usize) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| {
            let v = match which {
                0 => r.validation_accuracy,
                1 => r.unlabeled_accuracy,
                _ => r.pseudo_label_accuracy,
            };
            v.map(|v| (r.step as f64, v))
        })
        .collect()
}

fn svg_open(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_width() / 2.0,
        escape(title)
    );
}

fn plot_width() -> f64 {
    WIDTH - MARGIN_LEFT - MARGIN_RIGHT
}

fn plot_height() -> f64 {
    HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
}

fn write_svg(path: &Path, svg: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, svg).map_err(|e| io_error(path, e))
}

/// Accuracy curves of one or more metrics files.
pub(crate) fn curves(metrics: &[PathBuf], out: &Path) -> CliResult<()> {
    if metrics.is_empty() {
        return Err(CliError::usage("no metrics files given"));
    }
    let runs = metrics
        .iter()
        .map(|p| read_records(p).map(|r| (p, r)))
        .collect::<CliResult<Vec<_>>>()?;
    let max_step = runs
        .iter()
        .flat_map(|(_, r)| r.iter().map(|m| m.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let (pw, ph) = (plot_width(), plot_height());
    let x_of = |s: f64| MARGIN_LEFT + s / max_step * pw;
    let y_of = |a: f64| MARGIN_TOP + (1.0 - a.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    svg_open(&mut svg, "accuracy");
    svg.push_str("<g class=\"axes\" stroke=\"#444\" fill=\"none\">\n");
    let _ = writeln!(svg, r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}"/>"#);
    svg.push_str("</g>\n<g class=\"ticks\" fill=\"#444\">\n");
    for k in 0..=5 {
        let a = k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{a:.1}</text>"##,
            MARGIN_LEFT,
            MARGIN_LEFT + pw,
            MARGIN_LEFT - 6.0,
            y_of(a) + 4.0,
            y = y_of(a),
        );
        let s = max_step * a;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{:.0}</text>"#,
            x_of(s),
            MARGIN_TOP + ph + 18.0,
            s
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    svg.push_str("</g>\n");

    for (r, (_, records)) in runs.iter().enumerate() {
        let color = PALETTE[r % PALETTE.len()];
        let _ = writeln!(svg, r#"<g class="run" stroke="{color}" fill="none" stroke-width="1.5">"#);
        for (s, (name, dash)) in SERIES.iter().enumerate() {
            let points = series_values(records, s);
            if points.is_empty() {
                continue;
            }
            let coords: Vec<String> = points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", x_of(x), y_of(y)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="series" data-series="{name}" stroke-dasharray="{dash}" points="{}"/>"#,
                coords.join(" ")
            );
        }
        svg.push_str("</g>\n");
    }

    let lx = WIDTH - MARGIN_RIGHT + 16.0;
    svg.push_str("<g class=\"legend\">\n");
    for (r, (path, _)) in runs.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 18.0 * r as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry"><line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            PALETTE[r % PALETTE.len()],
            lx + 26.0,
            y + 4.0,
            escape(&path.display().to_string())
        );
    }
    let base = MARGIN_TOP + 30.0 + 18.0 * runs.len() as f64;
    for (s, (name, dash)) in SERIES.iter().enumerate() {
        let y = base + 18.0 * s as f64;
        let _ = writeln!(
            svg,
            r##"<g class="series-key"><line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="#444" stroke-dasharray="{dash}" stroke-width="1.5"/><text x="{}" y="{}">{name}</text></g>"##,
            lx + 20.0,
            lx + 26.0,
            y + 4.0
        );
    }
    svg.push_str("</g>\n</svg>\n");
    write_svg(out, &svg)
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = ((hi - lo) * 0.1).max(1e-3);
    (lo - pad, hi + pad)
}

/// Predicted classes of a checkpoint over the bounding box of 2-D data,
/// with the data points on top.
pub(crate) fn boundary(checkpoint: Option<&Path>, data_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let checkpoint = checkpoint.ok_or_else(|| CliError::usage("--kind boundary needs --checkpoint"))?;
    let data_path = data_path.ok_or_else(|| CliError::usage("--kind boundary needs --data"))?;
    let (params, feature_norm) = load_model(checkpoint)?;
    let dataset = data::load_csv(data_path).map_err(CliError::usage)?;
    if dataset.dim() != 2 {
        return Err(CliError::usage(format!(
            "{}: boundary plots need 2-D data, got {} features",
            data_path.display(),
            dataset.dim()
        )));
    }
    let f = &dataset.features;
    let (x0, x1) = bounds((0..f.rows()).map(|i| f.get(i, 0)));
    let (y0, y1) = bounds((0..f.rows()).map(|i| f.get(i, 1)));
    let grid = Tensor::from_fn(GRID * GRID, 2, |k, j| {
        let (gx, gy) = (k % GRID, k / GRID);
        if j == 0 {
            x0 + (gx as f64 + 0.5) / GRID as f64 * (x1 - x0)
        } else {
            y1 - (gy as f64 + 0.5) / GRID as f64 * (y1 - y0)
        }
    });
    let probs = predict(&params, &grid, feature_norm)?;

    let (pw, ph) = (plot_width(), plot_height());
    let (cw, ch) = (pw / GRID as f64, ph / GRID as f64);
    let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg_open(&mut svg, "decision boundary");
    svg.push_str("<g class=\"regions\" stroke=\"none\">\n");
    for k in 0..GRID * GRID {
        let c = probs.argmax_row(k);
        let confidence = probs.get(k, c);
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="{:.3}"/>"#,
            MARGIN_LEFT + (k % GRID) as f64 * cw,
            MARGIN_TOP + (k / GRID) as f64 * ch,
            cw + 0.05,
            ch + 0.05,
            PALETTE[c % PALETTE.len()],
            0.15 + 0.35 * confidence
        );
    }
    svg.push_str("</g>\n<g class=\"points\" stroke=\"#222\" stroke-width=\"0.5\">\n");
    for i in 0..f.rows() {
        let fill = dataset.labels[i].map_or("#bbbbbb", |c| PALETTE[c % PALETTE.len()]);
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{fill}"/>"#,
            px(f.get(i, 0)),
            py(f.get(i, 1))
        );
    }
    svg.push_str("</g>\n<g class=\"legend\">\n");
    let lx = WIDTH - MARGIN_RIGHT + 16.0;
    for c in 0..dataset.classes {
        let y = MARGIN_TOP + 10.0 + 18.0 * c as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry"><rect x="{lx}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">class {c}</text></g>"#,
            y - 6.0,
            PALETTE[c % PALETTE.len()],
            lx + 18.0,
            y + 4.0
        );
    }
    svg.push_str("</g>\n</svg>\n");
    write_svg(out, &svg)
}
