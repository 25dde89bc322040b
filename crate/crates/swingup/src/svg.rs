//! Minimal hand-rolled SVG heatmap for the two-color scan; no plotting
//! dependency, output is a single self-contained file.

use std::fmt::Write as _;

use crate::protocols::ScanGrid;

const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 90.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 420.0;

/// Perceptually ordered dark-blue-to-yellow anchors, interpolated to a
/// 256-step lookup table.
const ANCHORS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [72.0, 40.0, 120.0],
    [62.0, 74.0, 137.0],
    [49.0, 104.0, 142.0],
    [38.0, 130.0, 142.0],
    [31.0, 158.0, 137.0],
    [53.0, 183.0, 121.0],
    [109.0, 205.0, 89.0],
    [253.0, 231.0, 37.0],
];

fn colormap(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let x = v * (ANCHORS.len() - 1) as f64;
    let i = (x.floor() as usize).min(ANCHORS.len() - 2);
    let f = x - i as f64;
    let mix = |k: usize| (ANCHORS[i][k] * (1.0 - f) + ANCHORS[i + 1][k] * f).round() as u8;
    (mix(0), mix(1), mix(2))
}

fn quantized_color(v: f64) -> (u8, u8, u8) {
    let step = ((v.clamp(0.0, 1.0) * 255.0).round()) / 255.0;
    colormap(step)
}

fn tick_positions(min: f64, max: f64, target: usize) -> Vec<f64> {
    let span = max - min;
    if !(span > 0.0) {
        return vec![min];
    }
    let raw = span / target as f64;
    let mag = 10.0_f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(mag * 10.0);
    let mut t = (min / step).ceil() * step;
    let mut out = Vec::new();
    while t <= max + 1.0e-9 * span {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == v.round() && v.abs() < 1.0e6 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.3}")
    }
}

/// Render the scan as an SVG heatmap: detuning on x (GHz), scanned-color
/// amplitude on y, normalized inversion as color.
pub fn render_scan_heatmap(grid: &ScanGrid, title: &str) -> String {
    let nx = grid.detuning_ghz.len();
    let ny = grid.amplitude.len();
    let width = MARGIN_LEFT + PLOT_W + MARGIN_RIGHT;
    let height = MARGIN_TOP + PLOT_H + MARGIN_BOTTOM;
    let cell_w = PLOT_W / nx as f64;
    let cell_h = PLOT_H / ny as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(s, r#"<rect width="{width:.0}" height="{height:.0}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + PLOT_W / 2.0,
        xml_escape(title)
    );

    // cells: amplitude increases upward, so row j maps to the bottom edge
    for (j, row) in grid.inversion.iter().enumerate() {
        let y = MARGIN_TOP + PLOT_H - (j + 1) as f64 * cell_h;
        for (i, &v) in row.iter().enumerate() {
            let (r, g, b) = quantized_color(v);
            let x = MARGIN_LEFT + i as f64 * cell_w;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},{g},{b})"/>"#,
                cell_w + 0.5,
                cell_h + 0.5
            );
        }
    }

    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT:.1}" y="{MARGIN_TOP:.1}" width="{PLOT_W:.1}" height="{PLOT_H:.1}" fill="none" stroke="black"/>"#
    );

    // x axis: detuning in GHz
    let (x0, x1) = (grid.detuning_ghz[0], grid.detuning_ghz[nx - 1]);
    for t in tick_positions(x0, x1, 8) {
        let px = MARGIN_LEFT + (t - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * PLOT_W;
        let y0 = MARGIN_TOP + PLOT_H;
        let _ = writeln!(s, r#"<line x1="{px:.1}" y1="{y0:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            y0 + 19.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">scanned-color detuning (GHz)</text>"#,
        MARGIN_LEFT + PLOT_W / 2.0,
        MARGIN_TOP + PLOT_H + 42.0
    );

    // y axis: amplitude in pi-equivalent units; axis may be log-spaced, so
    // ticks sit at the actual sample values
    let tick_every = (ny / 6).max(1);
    for (j, &a) in grid.amplitude.iter().enumerate() {
        if j % tick_every != 0 && j != ny - 1 {
            continue;
        }
        let py = MARGIN_TOP + PLOT_H - (j as f64 + 0.5) * cell_h;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{py:.1}" x2="{MARGIN_LEFT:.1}" y2="{py:.1}" stroke="black"/>"#,
            MARGIN_LEFT - 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="end">{:.2}</text>"#,
            MARGIN_LEFT - 8.0,
            py + 4.0,
            a
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {:.1})">scanned-color amplitude (pi units)</text>"#,
        MARGIN_TOP + PLOT_H / 2.0,
        MARGIN_TOP + PLOT_H / 2.0
    );

    // colorbar
    let bar_x = MARGIN_LEFT + PLOT_W + 20.0;
    let bar_w = 18.0;
    let steps = 64;
    let step_h = PLOT_H / steps as f64;
    for k in 0..steps {
        let v = (k as f64 + 0.5) / steps as f64;
        let (r, g, b) = colormap(v);
        let y = MARGIN_TOP + PLOT_H - (k + 1) as f64 * step_h;
        let _ = writeln!(
            s,
            r#"<rect x="{bar_x:.1}" y="{y:.2}" width="{bar_w:.1}" height="{:.2}" fill="rgb({r},{g},{b})"/>"#,
            step_h + 0.5
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{bar_x:.1}" y="{MARGIN_TOP:.1}" width="{bar_w:.1}" height="{PLOT_H:.1}" fill="none" stroke="black"/>"#
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let py = MARGIN_TOP + PLOT_H * (1.0 - t);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="start">{t:.2}</text>"#,
            bar_x + bar_w + 5.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">inversion</text>"#,
        bar_x + bar_w / 2.0,
        MARGIN_TOP - 8.0
    );

    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_grid() -> ScanGrid {
        ScanGrid {
            detuning_ghz: vec![150.0, 200.0, 250.0, 300.0],
            amplitude: vec![0.5, 1.0, 2.0],
            inversion: vec![
                vec![0.0, 0.1, 0.2, 0.1],
                vec![0.2, 0.5, 0.4, 0.3],
                vec![0.3, 0.9, 0.6, 0.2],
            ],
            fixed_detuning_ghz: 116.6,
            fixed_amplitude: 7.0,
            normalization: 1.0,
            failures: Vec::new(),
        }
    }

    #[test]
    fn colormap_endpoints_and_order() {
        assert_eq!(colormap(0.0), (68, 1, 84));
        assert_eq!(colormap(1.0), (253, 231, 37));
        let (r_lo, ..) = colormap(0.1);
        let (r_hi, ..) = colormap(0.95);
        assert!(r_hi > r_lo);
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(7.0), colormap(1.0));
    }

    #[test]
    fn tick_positions_are_round_and_cover_range() {
        let t = tick_positions(150.0, 400.0, 8);
        assert!(t.len() >= 4 && t.len() <= 9);
        assert!(t.first().unwrap() >= &150.0);
        assert!(t.last().unwrap() <= &400.0);
        for w in t.windows(2) {
            assert!((w[1] - w[0] - (t[1] - t[0])).abs() < 1.0e-9);
        }
    }

    #[test]
    fn heatmap_contains_cells_axes_and_labels() {
        let svg = render_scan_heatmap(&toy_grid(), "two-color scan");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("rgb(").count() >= 4 * 3 + 64, true);
        assert!(svg.contains("detuning (GHz)"));
        assert!(svg.contains("amplitude"));
        assert!(svg.contains("inversion"));
        assert!(svg.contains("two-color scan"));
    }

    #[test]
    fn heatmap_output_is_deterministic() {
        let g = toy_grid();
        assert_eq!(render_scan_heatmap(&g, "t"), render_scan_heatmap(&g, "t"));
    }
}
