//! Minimal static SVG line charts with a logarithmic y-axis.

use std::fmt::Write as _;

pub struct Series<'a> {
    pub label: &'a str,
    pub colour: &'a str,
    pub dashed: bool,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

/// Render `series` with `log10` y-scale; nonpositive and non-finite points are skipped.
pub fn log_chart(title: &str, x_label: &str, series: &[Series<'_>]) -> String {
    let points = series
        .iter()
        .flat_map(|s| s.x.iter().zip(s.y.iter()))
        .filter(|(x, y)| x.is_finite() && y.is_finite() && **y > 0.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y.log10());
        y1 = y1.max(y.log10());
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, -1.0, 0.0);
    }
    let y0 = y0.floor();
    let y1 = y1.ceil().max(y0 + 1.0);
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |ly: f64| TOP + (y1 - ly) / (y1 - y0) * (H - TOP - BOTTOM);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    let step = ((y1 - y0) / 8.0).ceil().max(1.0);
    let mut d = y0;
    while d <= y1 {
        let y = py(d);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, W - RIGHT);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">1e{}</text>"#, LEFT - 6.0, y + 4.0, d as i64);
        d += step;
    }
    for i in 0..=5 {
        let x = x0 + (x1 - x0) * i as f64 / 5.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(x), H - BOTTOM + 18.0, fmt_tick(x));
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (LEFT + W - RIGHT) / 2.0, H - 10.0, escape(x_label));
    for (k, s) in series.iter().enumerate() {
        let mut path = String::new();
        for (&x, &y) in s.x.iter().zip(s.y.iter()) {
            if x.is_finite() && y.is_finite() && y > 0.0 {
                let ly = y.log10().clamp(y0, y1);
                let _ = write!(path, "{:.2},{:.2} ", px(x), py(ly));
            }
        }
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.6"{dash} points="{}"/>"#,
            s.colour,
            path.trim_end()
        );
        let ly = TOP + 16.0 + 16.0 * k as f64;
        let lx = W - RIGHT - 190.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            s.colour,
            lx + 30.0,
            ly + 4.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(x: f64) -> String {
    if x == x.round() { format!("{x:.0}") } else { format!("{x:.2}") }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polyline_per_series() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 0.1, 0.0];
        let svg = log_chart("gap", "t", &[Series { label: "a<b", colour: "red", dashed: false, x: &x, y: &y }]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("a&lt;b"));
    }
}
