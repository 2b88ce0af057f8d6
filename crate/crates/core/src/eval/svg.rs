//! Minimal deterministic SVG charts. Output depends only on the inputs.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 14.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y,
            color(i),
            x + 14.0,
            y + 9.0,
            escape(n)
        );
    }
}

fn axes(out: &mut String, xlabel: &str, ylabel: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let (px0, px1, py0, py1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{px0:.1},{py1:.1} V{py0:.1} H{px1:.1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = px0 + f * (px1 - px0);
        let y = py0 + f * (py1 - py0);
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            py0 + 14.0,
            tick(x0 + f * (x1 - x0))
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            px0 - 4.0,
            y + 4.0,
            tick(y0 + f * (y1 - y0))
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (px0 + px1) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (py0 + py1) / 2.0,
        (py0 + py1) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline (with point markers) per series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xs = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let ys = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    axes(&mut out, xlabel, ylabel, xs, ys);
    let px = |x: f64| LEFT + (x - xs.0) / (xs.1 - xs.0) * (W - RIGHT - LEFT);
    let py = |y: f64| H - BOTTOM - (y - ys.0) / (ys.1 - ys.0) * (H - BOTTOM - TOP);
    for (i, (name, pts)) in series.iter().enumerate() {
        let pts: Vec<_> = pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        let path: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            escape(name),
            path.join(" "),
            color(i)
        );
        if pts.len() <= 40 {
            for p in pts {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                    px(p.0),
                    py(p.1),
                    color(i)
                );
            }
        }
    }
    let names: Vec<String> = series.iter().map(|s| s.0.clone()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Stacked bars: `bars[b]` lists `(segment, mass)`; one rectangle per
/// nonzero segment, coloured by segment index.
pub fn stacked_bars(title: &str, xlabel: &str, bars: &[Vec<(usize, f64)>], segment_names: &[String]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let ymax = bars
        .iter()
        .map(|b| b.iter().map(|s| s.1).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1.0);
    axes(&mut out, xlabel, "items", (0.0, bars.len() as f64), (0.0, ymax));
    let width = (W - RIGHT - LEFT) / bars.len().max(1) as f64;
    let scale = (H - BOTTOM - TOP) / ymax;
    for (b, segs) in bars.iter().enumerate() {
        let mut y = H - BOTTOM;
        for &(seg, mass) in segs.iter().filter(|s| s.1 > 0.0) {
            let h = mass * scale;
            y -= h;
            let _ = writeln!(
                out,
                r#"<rect class="segment" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                LEFT + b as f64 * width + 0.1 * width,
                y,
                0.8 * width,
                h,
                color(seg)
            );
        }
    }
    legend(&mut out, segment_names);
    out.push_str("</svg>\n");
    out
}
