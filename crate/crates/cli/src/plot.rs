//! Minimal per-node SVG traces.

use std::fmt::Write as _;
use std::ops::Range;

use grin::tensor::Tensor;

const WIDTH: f64 = 800.0;
const PANEL: f64 = 160.0;
const PAD: f64 = 24.0;

/// Ground truth, evaluation mask and imputation of one node.
pub struct NodeTrace<'a> {
    pub node: &'a str,
    pub features: &'a [String],
    /// `[T x N x d]` tensors sharing one shape.
    pub truth: &'a Tensor,
    pub observed: &'a Tensor,
    pub eval: &'a Tensor,
    pub imputed: &'a Tensor,
    pub index: usize,
}

/// Runs of consecutive steps where `on(t)` holds.
fn runs(steps: Range<usize>, on: impl Fn(usize) -> bool) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for t in steps {
        if !on(t) {
            continue;
        }
        match out.last_mut() {
            Some(r) if r.end == t => r.end = t + 1,
            _ => out.push(t..t + 1),
        }
    }
    out
}

/// One panel per feature: eval-masked spans shaded, ground truth in grey
/// (dashed inside masked spans), imputation in blue.
pub fn node_svg(tr: &NodeTrace<'_>, steps: Range<usize>) -> String {
    let [_, n, d] = [tr.truth.shape()[0], tr.truth.shape()[1], tr.truth.shape()[2]];
    let at = |t: &Tensor, s: usize, f: usize| t.data()[(s * n + tr.index) * d + f];
    let height = PAD + d as f64 * (PANEL + PAD);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let span = (steps.len().max(2) - 1) as f64;
    let x = |s: usize| PAD + (s - steps.start) as f64 / span * (WIDTH - 2.0 * PAD);
    for f in 0..d {
        let top = PAD + f as f64 * (PANEL + PAD);
        let mut vals = Vec::new();
        for s in steps.clone() {
            vals.push(at(tr.imputed, s, f));
            if at(tr.observed, s, f) == 1.0 {
                vals.push(at(tr.truth, s, f));
            }
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, lo.max(0.0) + 1.0) };
        let y = |v: f64| top + PANEL - (v - lo) / (hi - lo) * PANEL;
        let _ = writeln!(
            svg,
            r#"<text x="{PAD}" y="{:.1}">{} {}</text>"#,
            top - 6.0,
            xml_escape(tr.node),
            xml_escape(&tr.features[f])
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{PAD}" y="{top:.1}" width="{:.1}" height="{PANEL}" fill="none" stroke="#999"/>"##,
            WIDTH - 2.0 * PAD
        );
        let half = 0.5 / span * (WIDTH - 2.0 * PAD);
        for r in runs(steps.clone(), |s| at(tr.eval, s, f) == 1.0) {
            let _ = writeln!(
                svg,
                r##"<rect class="masked" x="{:.2}" y="{top:.1}" width="{:.2}" height="{PANEL}" fill="#f4a261" fill-opacity="0.3"/>"##,
                x(r.start) - half,
                x(r.end - 1) - x(r.start) + 2.0 * half
            );
        }
        for masked in [false, true] {
            let keep = |s| at(tr.observed, s, f) == 1.0 && (at(tr.eval, s, f) == 1.0) == masked;
            for part in runs(steps.clone(), keep) {
                let pts = part.map(|s| (x(s), y(at(tr.truth, s, f))));
                let _ = writeln!(svg, "{}", polyline(pts, "truth", "#555", masked));
            }
        }
        let _ = writeln!(svg, "{}", polyline(steps.clone().map(|s| (x(s), y(at(tr.imputed, s, f)))), "imputed", "#1d4ed8", false));
    }
    svg.push_str("</svg>\n");
    svg
}

fn polyline(points: impl Iterator<Item = (f64, f64)>, class: &str, color: &str, dashed: bool) -> String {
    let pts: Vec<String> = points.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { r#" stroke-dasharray="3 2""# } else { "" };
    format!(
        r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1.2"{dash}/>"#,
        pts.join(" ")
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_split_on_gaps() {
        let on = [false, true, true, false, true];
        assert_eq!(runs(0..5, |t| on[t]), vec![1..3, 4..5]);
        assert!(runs(0..0, |_| true).is_empty());
    }

    #[test]
    fn masked_spans_are_shaded_once_per_run() {
        let t = 10;
        let truth = Tensor::new([t, 1, 1], (0..t).map(|s| s as f64).collect()).unwrap();
        let observed = Tensor::ones([t, 1, 1]);
        let mut e = vec![0.0; t];
        e[2] = 1.0;
        e[3] = 1.0;
        e[7] = 1.0;
        let eval = Tensor::new([t, 1, 1], e).unwrap();
        let features = vec!["x".to_string()];
        let svg = node_svg(
            &NodeTrace { node: "a<b", features: &features, truth: &truth, observed: &observed, eval: &eval, imputed: &truth, index: 0 },
            0..t,
        );
        assert_eq!(svg.matches(r#"class="masked""#).count(), 2);
        assert_eq!(svg.matches(r#"class="imputed""#).count(), 1);
        assert!(svg.contains("a&lt;b x"));
        assert!(svg.contains("stroke-dasharray"));
    }
}
