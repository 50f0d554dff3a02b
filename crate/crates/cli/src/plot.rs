// SPDX-License-Identifier: Apache-2.0

//! Minimal SVG line charts.

use std::fmt::Write;

use cart_core::sim::{RolloutTrace, SweepRow};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{} L{},{} M{PAD},{} L{PAD},{PAD}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            sx(xv),
            H - PAD + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            PAD - 4.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .enumerate()
            .map(|(k, &(x, y))| format!("{}{:.2},{:.2}", if k == 0 { 'M' } else { 'L' }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, d.join(" "));
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#,
            W - PAD - 110.0,
            ly - 9.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, W - PAD - 96.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Total RMS vibration against Δq, one line per speed.
pub fn sweep_chart(rows: &[SweepRow]) -> String {
    let mut speeds: Vec<f64> = rows.iter().map(|r| r.speed).collect();
    speeds.sort_by(f64::total_cmp);
    speeds.dedup();
    let series: Vec<Series> = speeds
        .iter()
        .map(|&v| Series {
            name: format!("{v} m/s"),
            points: rows.iter().filter(|r| r.speed == v).map(|r| (r.deltaq, r.rms_total)).collect(),
        })
        .collect();
    line_chart("Vibration vs slip displacement", "Δq (m)", "total RMS rate (rad/s)", &series)
}

/// Roll, pitch and yaw rates over time.
pub fn trace_chart(label: &str, t: &RolloutTrace) -> String {
    let series: Vec<Series> = ["roll", "pitch", "yaw"]
        .iter()
        .enumerate()
        .map(|(a, name)| Series {
            name: (*name).into(),
            points: t.time.iter().zip(&t.orientation_rates).map(|(&x, r)| (x, r[a])).collect(),
        })
        .collect();
    line_chart(&format!("Base rates: {label}"), "time (s)", "rate (rad/s)", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed() {
        let s = line_chart(
            "a<b",
            "x",
            "y",
            &[Series {
                name: "one".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b") && s.contains("M56.00,"));
        assert!(!s.contains("NaN"));
    }

    #[test]
    fn empty_series_do_not_panic() {
        let s = line_chart("t", "x", "y", &[]);
        assert!(s.contains("</svg>"));
    }
}
