//! Static SVG plot of eigenvalue trajectories across simplification steps.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: [f64; 4] = [60.0, 20.0, 30.0, 50.0]; // left, right, top, bottom

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.4}")
    }
}

/// `series[s][i]` is `λ_i` after step `s` (step 0 is the initial spectrum).
pub fn trajectory_svg(title: &str, series: &[Vec<f64>]) -> String {
    let steps = series.len();
    let count = series.iter().map(Vec::len).max().unwrap_or(0);
    let values = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = WIDTH - MARGIN[0] - MARGIN[1];
    let plot_h = HEIGHT - MARGIN[2] - MARGIN[3];
    let x = |s: usize| MARGIN[0] + if steps > 1 { plot_w * s as f64 / (steps - 1) as f64 } else { 0.5 * plot_w };
    let y = |v: f64| MARGIN[2] + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, WIDTH / 2.0);
    let (x0, x1, y0, y1) = (MARGIN[0], WIDTH - MARGIN[1], MARGIN[2], HEIGHT - MARGIN[3]);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{x0}" x2="{x1}" y1="{yy:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            x0 - 4.0,
            y(v) + 4.0,
            tick(v),
            yy = y(v)
        );
    }
    for s in 0..steps {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{s}</text>"#,
            x(s),
            y1 + 16.0
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (x0 + x1) / 2.0, HEIGHT - 8.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">eigenvalue</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2"];
    for i in 0..count {
        let colour = palette[i % palette.len()];
        let pts: Vec<String> = series
            .iter()
            .enumerate()
            .filter_map(|(s, row)| row.get(i).map(|&v| format!("{:.2},{:.2}", x(s), y(v))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').unwrap();
            let _ = writeln!(svg, r#"<circle cx="{px}" cy="{py}" r="2.5" fill="{colour}"/>"#);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_one_polyline_per_eigenvalue() {
        let svg = trajectory_svg("t", &[vec![1.0, 2.0, 2.0], vec![1.0, 1.9, 2.1]]);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn handles_flat_and_empty_input() {
        assert!(trajectory_svg("flat", &[vec![1.0], vec![1.0]]).contains("<polyline"));
        assert!(!trajectory_svg("empty", &[]).contains("<polyline"));
    }
}
