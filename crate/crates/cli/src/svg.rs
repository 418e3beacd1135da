use std::fmt::Write;

use tdcal::metrics::ReliabilityDiagram;

const SIZE: f64 = 400.0;
const MARGIN: f64 = 40.0;

fn x(v: f64) -> f64 {
    MARGIN + v.clamp(0.0, 1.0) * SIZE
}

fn y(v: f64) -> f64 {
    MARGIN + (1.0 - v.clamp(0.0, 1.0)) * SIZE
}

/// Accuracy bars per bin against the diagonal of perfect calibration.
pub fn reliability_svg(d: &ReliabilityDiagram) -> String {
    let full = SIZE + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(s, r#"<title>Reliability diagram (ECE = {:.4})</title>"#, d.ece());
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#
    );
    for r in &d.rows {
        if let (Some(acc), Some(conf)) = (r.acc, r.avg_conf) {
            let (x0, x1) = (x(r.low), x(r.high));
            let _ = writeln!(
                s,
                r##"<rect class="acc" x="{x0:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#4477aa" stroke="#223355"/>"##,
                y(acc),
                x1 - x0,
                y(0.0) - y(acc)
            );
            let _ = writeln!(
                s,
                r##"<line class="conf" x1="{x0:.3}" y1="{yc:.3}" x2="{x1:.3}" y2="{yc:.3}" stroke="#cc3311"/>"##,
                yc = y(conf)
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<line class="diagonal" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="gray" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">confidence</text>"#,
        MARGIN + SIZE / 2.0,
        full - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" font-size="14" transform="rotate(-90 14 {:.1})">accuracy</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}
