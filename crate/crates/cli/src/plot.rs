//! Minimal SVG bar charts of success rate by distance and by pitch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camo_core::eval::EvalSummary;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bars for `values` (rates in [0, 1]) sorted by numeric key.
pub fn bar_chart(title: &str, x_label: &str, values: &BTreeMap<String, f64>) -> String {
    let mut bars: Vec<(f64, &str, f64)> = values
        .iter()
        .map(|(k, &v)| (k.parse::<f64>().unwrap_or(f64::NAN), k.as_str(), v))
        .collect();
    bars.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));

    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let slot = plot_w / bars.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        MARGIN / 2.0,
        escape(title)
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = HEIGHT - MARGIN - v * plot_h;
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}%</text>"##,
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y + 4.0,
            v * 100.0
        );
    }
    for (i, (_, key, v)) in bars.iter().enumerate() {
        let h = v.clamp(0.0, 1.0) * plot_h;
        let x = MARGIN + i as f64 * slot + slot * 0.2;
        let y = HEIGHT - MARGIN - h;
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="#3b6ea8"><title>{}: {:.1}%</title></rect>"##,
            slot * 0.6,
            escape(key),
            v * 100.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="middle">{:.1}%</text>"#,
            x + slot * 0.3,
            HEIGHT - MARGIN + 16.0,
            escape(key),
            x + slot * 0.3,
            y - 4.0,
            v * 100.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes `success_by_distance.svg` and `success_by_pitch.svg` into `out_dir`.
pub fn plot_summary(summary: &EvalSummary, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if summary.success_by_distance.is_empty() && summary.success_by_pitch.is_empty() {
        bail!("the report has no per-distance or per-pitch rates");
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let charts = [
        ("success_by_distance.svg", "Attack success by distance", "distance (m)", &summary.success_by_distance),
        ("success_by_pitch.svg", "Attack success by pitch", "pitch (deg)", &summary.success_by_pitch),
    ];
    let mut written = Vec::new();
    for (file, title, x_label, values) in charts {
        let path = out_dir.join(file);
        std::fs::write(&path, bar_chart(title, x_label, values)).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
