//! Deterministic CSV and SVG output. All numbers print with Rust's shortest
//! round-trip formatting, so identical runs emit byte-identical files.

use super::marching::GridValues2D;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub const SVG_WIDTH: f64 = 800.0;
pub const SVG_HEIGHT: f64 = 600.0;

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, content).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// CSV from a header row and numeric rows.
pub fn csv_string(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn svg_header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{t}</text>\n"
        ),
        w = SVG_WIDTH,
        h = SVG_HEIGHT,
        t = title
    )
}

const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Line chart of one or more series over an integer x-axis (iterations).
/// Positive data spanning more than three decades is drawn on a log10 y-axis
/// (noted in the axis label).
pub fn svg_line_chart(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let margin = 60.0;
    let (px0, px1) = (margin, SVG_WIDTH - 20.0);
    let (py0, py1) = (SVG_HEIGHT - 40.0, 40.0);
    let mut finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    if finite.is_empty() {
        finite.push(0.0);
    }
    let raw_min = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw_max = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_scale = raw_min > 0.0 && raw_max / raw_min > 1e3;
    let map_v = |v: f64| if log_scale { v.log10() } else { v };
    let (mut vmin, mut vmax) = (map_v(raw_min), map_v(raw_max));
    if vmax - vmin < 1e-12 {
        vmax = vmin + 1.0;
        vmin -= 1.0;
    }
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);

    let mut out = svg_header(title);
    let _ = write!(
        out,
        "<text x=\"10\" y=\"35\" font-family=\"monospace\" font-size=\"11\">y-axis: {}</text>\n",
        if log_scale { "log10" } else { "linear" }
    );
    let _ = write!(
        out,
        "<line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px1}\" y2=\"{py0}\" stroke=\"black\"/>\n\
         <line x1=\"{px0}\" y1=\"{py0}\" x2=\"{px0}\" y2=\"{py1}\" stroke=\"black\"/>\n"
    );
    let _ = write!(
        out,
        "<text x=\"{px0}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{raw_min}</text>\n\
         <text x=\"{px0}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{raw_max}</text>\n",
        py0 + 14.0,
        py1 - 4.0
    );
    for (si, (name, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let mut path = String::new();
        let mut pen_down = false;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || (log_scale && v <= 0.0) {
                pen_down = false;
                continue;
            }
            let x = px0 + (px1 - px0) * i as f64 / (max_len - 1) as f64;
            let y = py0 + (py1 - py0) * (map_v(v) - vmin) / (vmax - vmin);
            let _ = write!(path, "{}{x},{y} ", if pen_down { "L" } else { "M" });
            pen_down = true;
        }
        let _ = write!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.trim_end()
        );
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            px1 - 150.0,
            py1 + 16.0 * si as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap of grid values: one rect per cell, colored on a linear
/// blue (minimum) to red (maximum) ramp through white.
pub fn svg_heatmap(title: &str, grid: &GridValues2D) -> String {
    let margin = 40.0;
    let (px0, px1) = (margin, SVG_WIDTH - margin);
    let (py0, py1) = (SVG_HEIGHT - margin, 50.0);
    let vmin = grid.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = grid
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (vmax - vmin).max(1e-300);
    let cw = (px1 - px0) / grid.nx as f64;
    let ch = (py0 - py1) / grid.ny as f64;
    let mut out = svg_header(title);
    let _ = write!(
        out,
        "<text x=\"10\" y=\"35\" font-family=\"monospace\" font-size=\"11\">blue={vmin} red={vmax}</text>\n"
    );
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let v = grid.values[iy * grid.nx + ix];
            let t = ((v - vmin) / span).clamp(0.0, 1.0);
            // Blue -> white -> red diverging ramp.
            let (r, g, b) = if t < 0.5 {
                let u = t * 2.0;
                (
                    (255.0 * u) as u8,
                    (255.0 * u) as u8,
                    255u8,
                )
            } else {
                let u = (t - 0.5) * 2.0;
                (
                    255u8,
                    (255.0 * (1.0 - u)) as u8,
                    (255.0 * (1.0 - u)) as u8,
                )
            };
            let x = px0 + cw * ix as f64;
            let y = py0 - ch * (iy + 1) as f64;
            let _ = write!(
                out,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"rgb({r},{g},{b})\"/>\n"
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Polylines (and optional scatter points) in data coordinates, mapped into
/// the fixed canvas preserving aspect ratio.
pub fn svg_polylines(
    title: &str,
    bounds: (f64, f64, f64, f64),
    polylines: &[Vec<[f64; 2]>],
    points: &[[f64; 2]],
) -> String {
    let (x0, y0, x1, y1) = bounds;
    let margin = 40.0;
    let avail_w = SVG_WIDTH - 2.0 * margin;
    let avail_h = SVG_HEIGHT - 2.0 * margin - 20.0;
    let scale = (avail_w / (x1 - x0)).min(avail_h / (y1 - y0));
    let map = |p: &[f64; 2]| -> (f64, f64) {
        (
            margin + (p[0] - x0) * scale,
            SVG_HEIGHT - margin - (p[1] - y0) * scale,
        )
    };
    let mut out = svg_header(title);
    for poly in polylines {
        if poly.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (i, p) in poly.iter().enumerate() {
            let (x, y) = map(p);
            let _ = write!(d, "{}{x},{y} ", if i == 0 { "M" } else { "L" });
        }
        let _ = write!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1.2\"/>\n",
            d.trim_end()
        );
    }
    for p in points {
        let (x, y) = map(p);
        let _ = write!(
            out,
            "<circle cx=\"{x}\" cy=\"{y}\" r=\"2\" fill=\"#d6a21a\"/>\n"
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_even_when_empty() {
        let csv = csv_string(&["iter", "loss"], &[]);
        assert_eq!(csv, "iter,loss\n");
        let csv = csv_string(&["a"], &[vec![0.5], vec![1.5]]);
        assert_eq!(csv, "a\n0.5\n1.5\n");
    }

    #[test]
    fn emitters_are_deterministic() {
        let series = vec![("loss".to_string(), vec![3.0, 2.0, 1.0])];
        assert_eq!(
            svg_line_chart("t", &series),
            svg_line_chart("t", &series)
        );
        let grid = GridValues2D::new(2, 2, 0.0, 0.0, 1.0, 1.0, vec![0.0, 1.0, 2.0, 3.0])
            .unwrap();
        assert_eq!(svg_heatmap("h", &grid), svg_heatmap("h", &grid));
    }

    #[test]
    fn heatmap_emits_one_rect_per_cell() {
        let grid = GridValues2D::new(2, 2, 0.0, 0.0, 1.0, 1.0, vec![0.0, 1.0, 2.0, 3.0])
            .unwrap();
        let svg = svg_heatmap("h", &grid);
        // 4 cells + 1 background rect.
        assert_eq!(svg.matches("<rect").count(), 5);
        // Extremes documented in the legend and mapped blue -> red.
        assert!(svg.contains("blue=0 red=3"));
        assert!(svg.contains("rgb(0,0,255)"));
        assert!(svg.contains("rgb(255,0,0)"));
    }

    #[test]
    fn line_chart_switches_to_log_for_wide_ranges() {
        let series = vec![("cond".to_string(), vec![1.0, 1e6])];
        assert!(svg_line_chart("t", &series).contains("log10"));
        let series = vec![("loss".to_string(), vec![1.0, 2.0])];
        assert!(svg_line_chart("t", &series).contains("linear"));
    }
}
