//! Tiny SVG scatter plots of 2-D samples colored by oracle class.

use crate::error::Result;
use crate::universe::ConceptUniverse;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Render points as an SVG document; each point is colored by its oracle
/// class. Output is deterministic.
pub fn scatter_svg(points: &[Vec<f64>], universe: &ConceptUniverse, title: &str) -> Result<String> {
    let size = 640.0;
    let margin = 40.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        for &v in p.iter().take(2) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = -1.0;
        hi = 1.0;
    }
    let span = (hi - lo).max(1e-9);
    let map = |v: f64| margin + (v - lo) / span * (size - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{size}\" height=\"{size}\" fill=\"white\" stroke=\"#cccccc\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{margin}\" y=\"24\" font-family=\"monospace\" font-size=\"14\">{title}</text>\n"
    ));
    for p in points {
        let class = universe.classify(p)?;
        let color = PALETTE[class % PALETTE.len()];
        let cx = map(p[0]);
        // SVG y axis points down.
        let cy = size - map(p[1]);
        svg.push_str(&format!(
            "  <circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let u = ConceptUniverse::canonical();
        let mut rng = stream(1, 0);
        let points: Vec<Vec<f64>> =
            (0..50).map(|i| u.sample(i % 10, &mut rng).unwrap()).collect();
        let a = scatter_svg(&points, &u, "samples").unwrap();
        let b = scatter_svg(&points, &u, "samples").unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<circle").count(), 50);
    }
}
