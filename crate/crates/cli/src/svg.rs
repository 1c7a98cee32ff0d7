//! SVG bar chart of an evaluation report.

use std::fmt::Write;

use phenokit_core::eval::EvalReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 320.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 270.0;
const BAR: f64 = 44.0;

/// Smallest of 1, 2, 5 × 10^k that is at least `v`.
fn nice_ceiling(v: f64) -> f64 {
    if v.is_nan() || v <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

fn panel(svg: &mut String, x0: f64, title: &str, axis_max: f64, bars: &[(String, f64)]) {
    let span = BOTTOM - TOP;
    let width = bars.len() as f64 * (BAR + 16.0) + 16.0;
    let _ = writeln!(svg, r#"  <g class="panel">"#);
    let _ = writeln!(svg, r#"    <text x="{x0:.1}" y="24" font-size="14">{title}</text>"#);
    let _ = writeln!(svg, r#"    <line x1="{x0:.1}" y1="{TOP:.1}" x2="{x0:.1}" y2="{BOTTOM:.1}" stroke="black"/>"#);
    let _ = writeln!(
        svg,
        r#"    <line x1="{x0:.1}" y1="{BOTTOM:.1}" x2="{:.1}" y2="{BOTTOM:.1}" stroke="black"/>"#,
        x0 + width
    );
    for tick in [0.0, 0.5, 1.0] {
        let y = BOTTOM - tick * span;
        let _ = writeln!(
            svg,
            r#"    <text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{:.3}</text>"#,
            x0 - 4.0,
            y + 3.0,
            tick * axis_max
        );
    }
    for (i, (name, value)) in bars.iter().enumerate() {
        let x = x0 + 16.0 + i as f64 * (BAR + 16.0);
        let h = (value / axis_max).clamp(0.0, 1.0) * span;
        let _ = writeln!(
            svg,
            r##"    <rect class="bar" data-metric="{name}" x="{x:.1}" y="{:.1}" width="{BAR:.1}" height="{h:.1}" fill="#4a78b0"/>"##,
            BOTTOM - h
        );
        let _ = writeln!(
            svg,
            r#"    <text class="value" data-metric="{name}" x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{value:.3}</text>"#,
            x + BAR / 2.0,
            BOTTOM - h - 4.0
        );
        let _ = writeln!(
            svg,
            r#"    <text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{name}</text>"#,
            x + BAR / 2.0,
            BOTTOM + 16.0
        );
    }
    let _ = writeln!(svg, "  </g>");
}

/// One bar per metric: FoE on its own axis, MAP and recall@K on `[0, 1]`.
/// Values are printed with three decimals.
pub fn emit_report_svg(report: &EvalReport) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"  <rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut svg, 50.0, "Folds of enrichment", nice_ceiling(report.foe), &[("FoE".into(), report.foe)]);
    let mut retrieval = vec![("MAP".to_string(), report.map)];
    retrieval.extend(report.recalls().into_iter().map(|(k, v)| (format!("recall@{k}"), v)));
    panel(&mut svg, 200.0, "Retrieval", 1.0, &retrieval);
    if let Some(imad) = report.imad {
        let _ = writeln!(
            svg,
            r#"  <text class="value" data-metric="IMAD" x="50.0" y="{:.1}" font-size="12">IMAD {imad:.3}</text>"#,
            HEIGHT - 12.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
