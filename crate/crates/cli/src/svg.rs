//! Minimal SVG line and bar charts arranged in a grid of panels.

use std::fmt::Write;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 280.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Style {
    Line,
    Bars,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

impl Series {
    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            style: Style::Line,
        }
    }

    pub fn bars(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            style: Style::Bars,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(panel: &Panel) -> (f64, f64, f64, f64) {
    let pts = panel.series.iter().flat_map(|s| {
        let bars = s.style == Style::Bars;
        s.points
            .iter()
            .copied()
            .chain(bars.then(|| s.points.iter().map(|&(x, _)| (x, 0.0))).into_iter().flatten())
    });
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    (x0, x1, y0 - pad, y1 + pad)
}

fn render_panel(out: &mut String, panel: &Panel, ox: f64, oy: f64) {
    let (x0, x1, y0, y1) = bounds(panel);
    let (pw, ph) = (PANEL_W - 1.5 * MARGIN, PANEL_H - 1.6 * MARGIN);
    let (left, top) = (ox + MARGIN, oy + 0.6 * MARGIN);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let w = |out: &mut String, s: String| out.push_str(&s);
    w(out, format!(
        "<rect x=\"{left:.2}\" y=\"{top:.2}\" width=\"{pw:.2}\" height=\"{ph:.2}\" fill=\"none\" stroke=\"#444\"/>\n"
    ));
    w(out, format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        left + pw / 2.0,
        oy + 0.4 * MARGIN,
        escape(&panel.title)
    ));
    w(out, format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
        left + pw / 2.0,
        top + ph + 30.0,
        escape(&panel.x_label)
    ));
    w(out, format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 {:.2} {:.2})\">{}</text>\n",
        ox + 14.0,
        top + ph / 2.0,
        ox + 14.0,
        top + ph / 2.0,
        escape(&panel.y_label)
    ));
    for (v, anchor, x, y) in [
        (x0, "start", sx(x0), top + ph + 14.0),
        (x1, "end", sx(x1), top + ph + 14.0),
    ] {
        w(out, format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-size=\"10\">{}</text>\n",
            tick(v)
        ));
    }
    for v in [y0, y1] {
        w(out, format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>\n",
            left - 4.0,
            sy(v) + 4.0,
            tick(v)
        ));
    }

    let bar_series = panel.series.iter().filter(|s| s.style == Style::Bars).count().max(1);
    let mut bar_index = 0;
    for (k, s) in panel.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        match s.style {
            Style::Line => {
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                    .collect();
                if !pts.is_empty() {
                    w(out, format!(
                        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                        pts.join(" ")
                    ));
                }
            }
            Style::Bars => {
                let slot = pw / (s.points.len().max(1) as f64 + 1.0) / bar_series as f64;
                for &(x, y) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                    let (a, b) = (sy(y.max(0.0)), sy(y.min(0.0)));
                    w(out, format!(
                        "<rect x=\"{:.2}\" y=\"{a:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n",
                        sx(x) - slot / 2.0 + bar_index as f64 * slot,
                        slot * 0.9,
                        b - a
                    ));
                }
                bar_index += 1;
            }
        }
        w(out, format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"{color}\">{}</text>\n",
            left + pw - 110.0,
            top + 12.0 + 12.0 * k as f64,
            escape(&s.label)
        ));
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Lays `panels` out row by row, `columns` per row.
pub fn render(panels: &[Panel], columns: usize) -> String {
    let columns = columns.max(1);
    let rows = panels.len().div_ceil(columns).max(1);
    let (width, height) = (PANEL_W * columns as f64, PANEL_H * rows as f64);
    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )
    .expect("writing to a String");
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / columns, i % columns);
        render_panel(&mut out, p, c as f64 * PANEL_W, r as f64 * PANEL_H);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_escaped() {
        let p = Panel {
            title: "a < b & c".into(),
            series: vec![Series::line("q\"0\"", vec![(0.0, 1.0), (1.0, 2.0)])],
            ..Default::default()
        };
        let svg = render(&[p], 1);
        assert!(svg.contains("a &lt; b &amp; c"));
        assert!(svg.contains("q&quot;0&quot;"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn degenerate_ranges_do_not_produce_nan() {
        let p = Panel {
            series: vec![
                Series::line("flat", vec![(1.0, 3.0), (1.0, 3.0)]),
                Series::bars("nan", vec![(0.0, f64::NAN)]),
            ],
            ..Default::default()
        };
        let empty = Panel::default();
        let svg = render(&[p, empty], 2);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
