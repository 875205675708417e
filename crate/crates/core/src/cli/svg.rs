//! Minimal SVG plots for CLI outputs.

use std::fmt::Write as _;

use crate::pipesim::{Stream, Timeline};
use crate::toymodel::SpectrumReport;

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn open(s: &mut String) {
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="monospace" font-size="10">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
}

/// TTFT against `r` as a polyline.
pub fn curve(points: &[(f64, f64, usize)]) -> String {
    let mut s = String::new();
    open(&mut s);
    if let (Some(first), Some(last)) = (points.first(), points.last()) {
        let (x0, x1) = (first.0, last.0.max(first.0 + 1e-12));
        let y1 = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-12);
        let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - y / y1 * (H - 2.0 * PAD);
        let path: Vec<String> = points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}">r {x0:.2}..{x1:.2}</text>"#, H - 10.0);
        let _ = writeln!(s, r#"<text x="{PAD}" y="20">ttft max {y1:.4e} s</text>"#);
    }
    s.push_str("</svg>\n");
    s
}

/// One lane per stream.
pub fn gantt(tl: &Timeline) -> String {
    let mut s = String::new();
    open(&mut s);
    let end = tl.ttft_s.max(1e-12);
    let lane_h = (H - 2.0 * PAD) / 3.0;
    for (i, stream) in [Stream::Forward, Stream::Transfer, Stream::Recompute].into_iter().enumerate() {
        let y = PAD + i as f64 * lane_h;
        let _ = writeln!(s, r#"<text x="2" y="{:.1}">{}</text>"#, y + lane_h / 2.0, stream.name());
        let colour = ["#4c72b0", "#dd8452", "#55a868"][i];
        for e in tl.events.iter().filter(|e| e.stream == stream && e.duration() > 0.0) {
            let x = PAD + 30.0 + e.start_s / end * (W - 2.0 * PAD - 30.0);
            let w = (e.duration() / end * (W - 2.0 * PAD - 30.0)).max(0.5);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="{colour}" stroke="white" stroke-width="0.3"><title>{}</title></rect>"#,
                y + 4.0,
                lane_h - 8.0,
                e.label
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">ttft {:.4e} s</text>"#, H - 10.0, tl.ttft_s);
    s.push_str("</svg>\n");
    s
}

/// Paired bars per decile, keys left and values right.
pub fn bars(rep: &SpectrumReport) -> String {
    let mut s = String::new();
    open(&mut s);
    let n = rep.keys.len().max(1) as f64;
    let top = rep.keys.iter().chain(&rep.values).copied().fold(0.0, f64::max).max(1e-12);
    let slot = (W - 2.0 * PAD) / n;
    for (i, (k, v)) in rep.keys.iter().zip(&rep.values).enumerate() {
        for (j, (val, colour)) in [(k, "#4c72b0"), (v, "#dd8452")].into_iter().enumerate() {
            let h = val / top * (H - 2.0 * PAD);
            let x = PAD + i as f64 * slot + j as f64 * slot / 2.0;
            let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{colour}"/>"#, H - PAD - h, slot / 2.0 - 2.0);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}">{}</text>"#, PAD + i as f64 * slot + slot / 3.0, H - PAD + 14.0, i + 1);
    }
    let _ = writeln!(s, r#"<text x="{PAD}" y="20">energy per decile: keys (blue), values (orange)</text>"#);
    s.push_str("</svg>\n");
    s
}
