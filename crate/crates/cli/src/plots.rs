//! Self-contained SVG plots of operating points with marginal histograms.

use std::fmt::Write;

use opgrain_core::metrics::{kde_density, CurveSpace, OperatingCurve};

pub const HISTOGRAM_BINS: usize = 50;
const KDE_GRID: usize = 200;

const MAIN: f64 = 400.0;
const MARGIN: f64 = 100.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;
const GAP: f64 = 10.0;

/// Counts of `values` in equal-width bins over [0, 1].
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        if (0.0..=1.0).contains(&v) {
            let i = ((v * bins as f64).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
    }
    counts
}

/// Histogram as a density on [0, 1] and the KDE on a regular grid.
fn marginal(values: &[f64]) -> (Vec<f64>, Vec<(f64, f64)>) {
    let n = values.len().max(1) as f64;
    let width = 1.0 / HISTOGRAM_BINS as f64;
    let hist = histogram(values, HISTOGRAM_BINS)
        .into_iter()
        .map(|c| c as f64 / (n * width))
        .collect();
    let grid: Vec<f64> = (0..=KDE_GRID).map(|i| i as f64 / KDE_GRID as f64).collect();
    let kde = kde_density(values, &grid)
        .map(|d| grid.iter().copied().zip(d).collect())
        .unwrap_or_default();
    (hist, kde)
}

fn axis_labels(space: CurveSpace) -> (&'static str, &'static str) {
    match space {
        CurveSpace::Pr => ("recall", "precision"),
        CurveSpace::Roc => ("false positive rate", "true positive rate"),
    }
}

/// Operating points of `curve` inside [0, 1]², with histograms and KDE of
/// each coordinate along the top and right edges.
pub fn curve_svg(curve: &OperatingCurve, title: &str) -> String {
    let points: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.x, p.y))
        .filter(|(x, y)| (0.0..=1.0).contains(x) && (0.0..=1.0).contains(y))
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (hx, kx) = marginal(&xs);
    let (hy, ky) = marginal(&ys);
    let peak = hx
        .iter()
        .chain(&hy)
        .copied()
        .chain(kx.iter().chain(&ky).map(|p| p.1))
        .fold(0.0_f64, f64::max)
        .max(1e-12);

    let main_top = TOP + MARGIN + GAP;
    let main_right = LEFT + MAIN;
    let width = main_right + GAP + MARGIN + 20.0;
    let height = main_top + MAIN + 50.0;
    let px = |x: f64| LEFT + x * MAIN;
    let py = |y: f64| main_top + (1.0 - y) * MAIN;
    let (xlabel, ylabel) = axis_labels(curve.space);
    let bin = MAIN / HISTOGRAM_BINS as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#, escape(title));

    let _ = writeln!(s, r##"<g id="top-histogram" fill="#9ab">"##);
    for (i, d) in hx.iter().enumerate() {
        let h = d / peak * MARGIN;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
            LEFT + i as f64 * bin,
            TOP + MARGIN - h,
            bin,
            h
        );
    }
    let _ = writeln!(s, "</g>");
    if !kx.is_empty() {
        let path: Vec<String> = kx
            .iter()
            .map(|(g, d)| format!("{:.2},{:.2}", px(*g), TOP + MARGIN - d / peak * MARGIN))
            .collect();
        let _ = writeln!(s, r##"<polyline id="top-kde" fill="none" stroke="#c33" points="{}"/>"##, path.join(" "));
    }

    let right_left = main_right + GAP;
    let _ = writeln!(s, r##"<g id="right-histogram" fill="#9ab">"##);
    for (i, d) in hy.iter().enumerate() {
        let w = d / peak * MARGIN;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
            right_left,
            main_top + MAIN - (i + 1) as f64 * bin,
            w,
            bin
        );
    }
    let _ = writeln!(s, "</g>");
    if !ky.is_empty() {
        let path: Vec<String> = ky
            .iter()
            .map(|(g, d)| format!("{:.2},{:.2}", right_left + d / peak * MARGIN, py(*g)))
            .collect();
        let _ = writeln!(s, r##"<polyline id="right-kde" fill="none" stroke="#c33" points="{}"/>"##, path.join(" "));
    }

    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{main_top}" width="{MAIN}" height="{MAIN}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v}</text>"#,
            px(v),
            main_top + MAIN + 16.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v}</text>"#, LEFT - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#,
        px(0.5),
        main_top + MAIN + 36.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">{ylabel}</text>"#,
        py(0.5)
    );
    let _ = writeln!(s, r##"<g id="points" fill="#246" fill-opacity="0.6">"##);
    for (x, y) in &points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, px(*x), py(*y));
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use opgrain_core::metrics::{build_curve, ScoredDataset};

    #[test]
    fn histogram_bins_edges() {
        let h = histogram(&[0.0, 0.01, 0.5, 1.0, 1.5], 50);
        assert_eq!(h.iter().sum::<usize>(), 4);
        assert_eq!(h[0], 2);
        assert_eq!(h[49], 1);
        assert_eq!(h[25], 1);
    }

    #[test]
    fn svg_has_points_and_marginals() {
        let data = ScoredDataset::from_binary(&[1, 0, 1, 0, 1], &[0.9, 0.2, 0.7, 0.4, 0.3]).unwrap();
        let curve = build_curve(&data, CurveSpace::Roc).unwrap();
        let svg = curve_svg(&curve, "ROC <test>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), curve.points.len());
        assert!(svg.contains("top-kde") && svg.contains("right-histogram"));
        assert!(svg.contains("ROC &lt;test&gt;"));
    }
}
