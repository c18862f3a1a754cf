use std::fmt::Write;

use super::{point_at, EvalReport, OPERATING_DISTANCE};

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn x(recall: f64) -> f64 {
    PAD + recall * (W - 2.0 * PAD)
}

fn y(precision: f64) -> f64 {
    H - PAD - precision * (H - 2.0 * PAD)
}

/// Step-wise PR curves, one polyline per labelled report, with the
/// similarity-0.80 operating point marked as a black dot.
pub fn pr_curve_svg(series: &[(&str, &EvalReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for tick in 0..=5 {
        let v = f64::from(tick) / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x(v),
            H - PAD + 16.0,
            PAD - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">recall</text><text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">precision</text>"#,
        W / 2.0,
        H - 10.0,
        H / 2.0,
        H / 2.0
    );
    for (n, (label, report)) in series.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let mut pts = String::new();
        let mut prev: Option<(f64, f64)> = None;
        for p in &report.curve {
            if let Some((_, py)) = prev {
                let _ = write!(pts, "{:.2},{:.2} ", x(p.recall), py);
            }
            let _ = write!(pts, "{:.2},{:.2} ", x(p.recall), y(p.precision));
            prev = Some((x(p.recall), y(p.precision)));
        }
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##,
            pts.trim_end()
        );
        let op = point_at(&report.curve, OPERATING_DISTANCE);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
            x(op.recall),
            y(op.precision)
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" fill="{color}">{} (AUCPR {:.3})</text>"##,
            W - PAD - 150.0,
            PAD + 16.0 + 14.0 * n as f64,
            escape(label),
            report.aucpr
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, GroundTruth};
    use crate::retrieval::{Candidate, MatchPrediction};

    #[test]
    fn svg_contains_series_and_marker() {
        let preds = vec![MatchPrediction {
            query_offer_id: "q".into(),
            candidates: vec![Candidate {
                index_offer_id: "i".into(),
                distance: 0.1,
                similarity: 0.9,
                accepted: true,
            }],
            threshold: 0.2,
        }];
        let report = evaluate(&preds, &GroundTruth::from_pairs([("q", "i")]), &[1]).unwrap();
        let svg = pr_curve_svg(&[("dress <in>", &report)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("<circle"));
        assert!(svg.contains("dress &lt;in&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
