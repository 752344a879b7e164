//! Static SVG charts for sweep and ablation outputs.
//!
//! Deliberately minimal: categorical x axis, linear y axis from zero, no
//! interactivity and no external assets, so the files render anywhere and
//! diff cleanly between runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;

use crate::Failure;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 48.0;
const BOTTOM: f64 = 120.0;

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    svg: String,
    plot_w: f64,
    plot_h: f64,
    y_max: f64,
}

impl Canvas {
    fn new(title: &str, y_label: &str, y_max: f64) -> Self {
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let y_max = if y_max > 0.0 { y_max * 1.08 } else { 1.0 };
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">"#
        );
        let _ = write!(
            svg,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/><text x="{x}" y="24" font-size="16" text-anchor="middle">{t}</text>"#,
            x = WIDTH / 2.0,
            t = escape(title)
        );
        // y axis label, ticks, and gridlines
        let _ = write!(
            svg,
            r#"<text x="16" y="{y}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {y})">{t}</text>"#,
            y = TOP + plot_h / 2.0,
            t = escape(y_label)
        );
        let mut canvas = Self { svg, plot_w, plot_h, y_max };
        for tick in 0..=4 {
            let value = canvas.y_max * tick as f64 / 4.0;
            let y = canvas.y_pos(value);
            let _ = write!(
                canvas.svg,
                r##"<line x1="{LEFT}" y1="{y}" x2="{x2}" y2="{y}" stroke="#dddddd"/><text x="{xt}" y="{yt:.2}" font-size="11" text-anchor="end">{value:.3}</text>"##,
                x2 = LEFT + plot_w,
                xt = LEFT - 6.0,
                yt = y + 4.0,
            );
        }
        let _ = write!(
            canvas.svg,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{y2}" stroke="black"/><line x1="{LEFT}" y1="{y2}" x2="{x2}" y2="{y2}" stroke="black"/>"#,
            y2 = TOP + plot_h,
            x2 = LEFT + plot_w,
        );
        canvas
    }

    fn y_pos(&self, value: f64) -> f64 {
        TOP + self.plot_h * (1.0 - value / self.y_max)
    }

    fn x_center(&self, index: usize, count: usize) -> f64 {
        LEFT + self.plot_w * (index as f64 + 0.5) / count as f64
    }

    fn x_tick_labels(&mut self, labels: &[String]) {
        let baseline = TOP + self.plot_h;
        for (i, label) in labels.iter().enumerate() {
            let x = self.x_center(i, labels.len());
            let _ = write!(
                self.svg,
                r#"<text x="{x:.2}" y="{y:.2}" font-size="11" text-anchor="end" transform="rotate(-35 {x:.2} {y:.2})">{t}</text>"#,
                y = baseline + 16.0,
                t = escape(label)
            );
        }
    }

    fn finish(mut self, path: &Path) -> Result<(), Failure> {
        self.svg.push_str("</svg>\n");
        fs::write(path, self.svg).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Line chart over a categorical x axis, one polyline per series.
pub fn line_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    x_labels: &[String],
    series: &[(String, Vec<f64>)],
) -> Result<(), Failure> {
    let y_max = series
        .iter()
        .flat_map(|(_, values)| values.iter().copied())
        .fold(0.0_f64, f64::max);
    let mut canvas = Canvas::new(title, y_label, y_max);
    canvas.x_tick_labels(x_labels);
    for (s, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                format!("{:.2},{:.2}", canvas.x_center(i, x_labels.len()), canvas.y_pos(v))
            })
            .collect();
        let _ = write!(
            canvas.svg,
            r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts = points.join(" ")
        );
        for point in &points {
            let (x, y) = point.split_once(',').expect("point format");
            let _ = write!(
                canvas.svg,
                r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#
            );
        }
        // legend, one line per series in the top-right corner
        let ly = TOP + 14.0 * s as f64;
        let _ = write!(
            canvas.svg,
            r#"<line x1="{x1}" y1="{ly:.2}" x2="{x2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{xt}" y="{yt:.2}" font-size="11">{t}</text>"#,
            x1 = WIDTH - 170.0,
            x2 = WIDTH - 146.0,
            xt = WIDTH - 140.0,
            yt = ly + 4.0,
            t = escape(name)
        );
    }
    canvas.finish(path)
}

/// Bar chart over a categorical x axis.
pub fn bar_chart(
    path: &Path,
    title: &str,
    y_label: &str,
    labels: &[String],
    values: &[f64],
) -> Result<(), Failure> {
    assert_eq!(labels.len(), values.len(), "one value per bar");
    let y_max = values.iter().copied().fold(0.0_f64, f64::max);
    let mut canvas = Canvas::new(title, y_label, y_max);
    canvas.x_tick_labels(labels);
    let slot = canvas.plot_w / labels.len() as f64;
    let bar_w = slot * 0.6;
    for (i, &value) in values.iter().enumerate() {
        let x = canvas.x_center(i, labels.len()) - bar_w / 2.0;
        let y = canvas.y_pos(value);
        let h = TOP + canvas.plot_h - y;
        let _ = write!(
            canvas.svg,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{c}"/>"#,
            c = PALETTE[0]
        );
    }
    canvas.finish(path)
}
