//! Self-contained SVG line charts with a log2 `n` axis and one-std error
//! bars. Every plotted point carries its source values as `data-*`
//! attributes, formatted exactly as in the result CSV.

use std::fmt::Write;

use crate::experiments::{ResultRow, ResultTable};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub n: u32,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub class_id: usize,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    QueueingProbability,
    ScaledCount,
}

impl Metric {
    fn pick(self, r: &ResultRow) -> (f64, f64) {
        match self {
            Metric::QueueingProbability => (r.p_queue_mean, r.p_queue_std),
            Metric::ScaledCount => (r.scaled_count_mean, r.scaled_count_std),
        }
    }

    fn axis_label(self) -> &'static str {
        match self {
            Metric::QueueingProbability => "queueing probability",
            Metric::ScaledCount => "X_i / lambda_i",
        }
    }
}

fn series_for(table: &ResultTable, class_id: usize, metric: Metric, label: String) -> Vec<Series> {
    let mut reps: Vec<u32> = table.rows.iter().map(|r| r.replication).collect();
    reps.sort_unstable();
    reps.dedup();
    let multi = reps.len() > 1;
    reps.into_iter()
        .map(|rep| Series {
            label: if multi { format!("{label} (rep {rep})") } else { label.clone() },
            class_id,
            points: table
                .rows
                .iter()
                .filter(|r| r.class_id == class_id && r.replication == rep)
                .map(|r| {
                    let (mean, std) = metric.pick(r);
                    Point { n: r.n, mean, std }
                })
                .collect(),
        })
        .collect()
}

/// One curve per class.
pub fn per_class_figure(table: &ResultTable, metric: Metric, title: &str) -> Figure {
    let series = (1..=table.num_classes())
        .flat_map(|c| series_for(table, c, metric, format!("class {c}")))
        .collect();
    Figure {
        title: title.to_string(),
        y_label: metric.axis_label().to_string(),
        series,
    }
}

/// One curve per table for a single class, e.g. the largest class under
/// several need profiles.
pub fn class_comparison_figure(tables: &[(String, &ResultTable)], class_id: usize, metric: Metric, title: &str) -> Figure {
    let series = tables
        .iter()
        .flat_map(|(label, t)| series_for(t, class_id, metric, label.clone()))
        .collect();
    Figure {
        title: title.to_string(),
        y_label: format!("class {class_id} {}", metric.axis_label()),
        series,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render(fig: &Figure) -> String {
    let points = || fig.series.iter().flat_map(|s| &s.points);
    let log_n = |n: u32| f64::from(n).log2();
    let (mut x_lo, mut x_hi) = points().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(log_n(p.n)), hi.max(log_n(p.n)))
    });
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (6.0, 12.0);
    }
    if x_hi - x_lo < 1.0 {
        x_lo -= 1.0;
        x_hi += 1.0;
    }
    let y_top = points().map(|p| p.mean + p.std).fold(0.0f64, f64::max);
    let y_hi = if y_top > 0.0 { y_top * 1.1 } else { 1.0 };
    let y_lo = points().map(|p| p.mean - p.std).fold(0.0f64, f64::min);

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&fig.title)
    );

    // axes
    let (x0, x1, y0, y1) = (LEFT, LEFT + plot_w, TOP + plot_h, TOP);
    let _ = writeln!(w, r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#);
    let mut ticks: Vec<u32> = points().map(|p| p.n).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for &n in &ticks {
        let x = sx(log_n(n));
        let exp = log_n(n);
        let label = if exp.fract() == 0.0 {
            format!(r#"2<tspan baseline-shift="super" font-size="9">{exp}</tspan>"#)
        } else {
            n.to_string()
        };
        let _ = writeln!(w, r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(w, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, y0 + 20.0);
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">n (servers, log scale)</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    );
    for k in 0..=5 {
        let y = y_lo + (y_hi - y_lo) * f64::from(k) / 5.0;
        let py = sy(y);
        let _ = writeln!(w, r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(
            w,
            r##"<line x1="{x0:.2}" y1="{py:.2}" x2="{x1:.2}" y2="{py:.2}" stroke="#dddddd"/>"##
        );
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 8.0, py + 4.0, tick_label(y));
    }
    let _ = writeln!(
        w,
        r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(&fig.y_label)
    );

    for (idx, s) in fig.series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let _ = writeln!(w, r#"<g class="series" data-label="{}" data-class="{}">"#, escape(&s.label), s.class_id);
        let path: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(log_n(p.n)), sy(p.mean)))
            .collect();
        if path.len() > 1 {
            let _ = writeln!(w, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        }
        for p in &s.points {
            let x = sx(log_n(p.n));
            let (lo, hi) = (sy(p.mean - p.std), sy(p.mean + p.std));
            let _ = writeln!(
                w,
                r#"<path d="M{x:.2},{lo:.2} L{x:.2},{hi:.2} M{:.2},{lo:.2} L{:.2},{lo:.2} M{:.2},{hi:.2} L{:.2},{hi:.2}" stroke="{color}"/>"#,
                x - 4.0,
                x + 4.0,
                x - 4.0,
                x + 4.0
            );
            let _ = writeln!(
                w,
                r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}" data-n="{}" data-mean="{}" data-std="{}"/>"#,
                sy(p.mean),
                p.n,
                p.mean,
                p.std
            );
        }
        let ly = TOP + 10.0 + 18.0 * idx as f64;
        let _ = writeln!(w, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, x1 + 12.0, x1 + 32.0);
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x1 + 38.0, ly + 4.0, escape(&s.label));
        let _ = writeln!(w, "</g>");
    }
    let _ = writeln!(w, "</svg>");
    out
}

fn tick_label(y: f64) -> String {
    let s = format!("{y:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}
