//! Minimal deterministic SVG plots. Coordinates are printed with two
//! decimals so regenerated files are byte-stable.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#2a9d3f", "#edae49", "#6a4c93", "#444444"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64)) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black" fill="none"><line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}"/><line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}"/></g>"#
    );
    for (v, px) in [(x.0, x0), (x.1, x1)] {
        let _ = writeln!(
            out,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 16.0,
            tick(v)
        );
    }
    for (v, py) in [(y.0, y0), (y.1, y1)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

fn span(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        None
    } else if lo == hi {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

/// One polyline per series, with a legend. Empty input draws axes only.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], y_range: Option<(f64, f64)>) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let xr = span(pts().map(|p| p.0)).unwrap_or((0.0, 1.0));
    let yr = y_range.or_else(|| span(pts().map(|p| p.1))).unwrap_or((0.0, 1.0));
    axes(&mut out, x_label, y_label, xr, yr);
    let sx = |x: f64| LEFT + (x - xr.0) / (xr.1 - xr.0) * (W - LEFT - RIGHT);
    let sy = |y: f64| (H - BOTTOM) - (y - yr.0) / (yr.1 - yr.0) * (H - BOTTOM - TOP);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.label),
            coords.join(" ")
        );
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}" text-anchor="end">{}</text>"#,
            W - RIGHT - 4.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bars with error whiskers: `(label, mean, std)`.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let hi = bars.iter().map(|b| b.1 + b.2.max(0.0)).fold(0.0f64, f64::max);
    let yr = (0.0, if hi > 0.0 { hi * 1.1 } else { 1.0 });
    axes(&mut out, "", y_label, (0.0, bars.len() as f64), yr);
    let sy = |y: f64| (H - BOTTOM) - (y - yr.0) / (yr.1 - yr.0) * (H - BOTTOM - TOP);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (label, mean, std)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = LEFT + slot * (i as f64 + 0.2);
        let top = sy(*mean);
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-label="{}" x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
            escape(label),
            slot * 0.6,
            (H - BOTTOM) - top
        );
        let cx = x + slot * 0.3;
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            sy(mean + std),
            sy((mean - std).max(0.0))
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// sRGB gray level for lightness `l` in `[0, 100]` (CIE L*), so equal steps
/// in count look like equal steps in brightness.
pub fn lightness_gray(l: f64) -> u8 {
    let l = l.clamp(0.0, 100.0);
    let y = if l > 8.0 {
        ((l + 16.0) / 116.0).powi(3)
    } else {
        l / 903.3
    };
    let s = if y <= 0.003_130_8 {
        12.92 * y
    } else {
        1.055 * y.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Cell grid with counts mapped to a grayscale ramp (dark = rare, bright =
/// frequent), blocked cells hatched in dark red, and an optional dashed path.
pub fn grid_heatmap(
    title: &str,
    width: usize,
    height: usize,
    counts: &[usize],
    blocked: &[bool],
    overlay: Option<&[(usize, usize)]>,
) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let cell = ((W - 40.0) / width as f64).min((H - 60.0) / height as f64);
    let ox = (W - cell * width as f64) / 2.0;
    let oy = 40.0;
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    out.push_str("<g class=\"cells\" shape-rendering=\"crispEdges\">\n");
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let fill = if blocked[i] {
                "#5a1e1e".to_string()
            } else {
                let g = lightness_gray(100.0 * counts[i] as f64 / max);
                format!("#{g:02x}{g:02x}{g:02x}")
            };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{fill}"/>"#,
                ox + cell * x as f64,
                oy + cell * y as f64
            );
        }
    }
    out.push_str("</g>\n");
    if let Some(path) = overlay {
        let pts: Vec<String> = path
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    ox + cell * (*x as f64 + 0.5),
                    oy + cell * (*y as f64 + 0.5)
                )
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="final-path" fill="none" stroke="{}" stroke-width="2" stroke-dasharray="4 3" points="{}"/>"#,
            PALETTE[1],
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_ramp_is_monotone() {
        let g: Vec<u8> = (0..=100).map(|l| lightness_gray(l as f64)).collect();
        assert_eq!(g[0], 0);
        assert_eq!(g[100], 255);
        assert!(g.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn one_polyline_per_series_and_stable_output() {
        let s = vec![
            Series {
                label: "a".into(),
                points: vec![(1.0, 0.2), (2.0, 0.4)],
            },
            Series {
                label: "b<c".into(),
                points: vec![(1.0, 0.5)],
            },
        ];
        let a = line_chart("t", "x", "y", &s, Some((0.0, 1.0)));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("b&lt;c"));
        assert_eq!(a, line_chart("t", "x", "y", &s, Some((0.0, 1.0))));
        let empty = line_chart("t", "x", "y", &[], None);
        assert!(empty.contains("class=\"axes\"") && !empty.contains("<polyline"));
    }
}
