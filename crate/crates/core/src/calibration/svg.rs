//! Reliability diagram: observed per-bin recall against the expected level,
//! with the identity diagonal for reference.

use std::fmt::Write;

use super::CalibrationReport;

const SIZE: f64 = 320.0;
const PAD: f64 = 40.0;

pub fn reliability_svg(report: &CalibrationReport) -> String {
    let plot = SIZE - 2.0 * PAD;
    let x = |v: f64| PAD + v * plot;
    let y = |v: f64| SIZE - PAD - v * plot;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let bar = plot / report.bins.len().max(1) as f64 * 0.6;
    for b in &report.bins {
        if let Some(obs) = b.observed {
            let cx = x(b.expected);
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{bar:.2}" height="{:.2}" fill="#4a78b5" fill-opacity="0.75"><title>bin {} n={} recall={obs:.4}</title></rect>"##,
                cx - bar / 2.0,
                y(obs),
                obs * plot,
                b.index,
                b.count
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">expected level C(B)</text>"#,
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">observed</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="13" text-anchor="middle">{} @{}  ECE={:.4}</text>"#,
        SIZE / 2.0,
        report.method,
        report.k,
        report.ece
    );
    s.push_str("</svg>\n");
    s
}
