//! Hand-written SVG and PGM emitters.

use std::fmt::Write as _;

use crate::alignment::AlignmentMatrix;
use crate::cf::SweepTrace;
use crate::format::g9;
use crate::stats::CorrelationMatrix;

const CELL: f64 = 56.0;
const LABEL: f64 = 120.0;
const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Diverging blue-white-red fill for `v` clamped to `[-1, 1]`; grey for NaN.
pub fn diverging_color(v: f64) -> String {
    if !v.is_finite() {
        return "#cccccc".into();
    }
    let t = v.clamp(-1.0, 1.0);
    let (end, a) = if t >= 0.0 {
        ((178.0, 24.0, 43.0), t)
    } else {
        ((33.0, 102.0, 172.0), -t)
    };
    let mix = |e: f64| (255.0 + (e - 255.0) * a).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(end.0), mix(end.1), mix(end.2))
}

/// Two-decimal label for a value as it appears in the CSV reports.
pub fn annotation(v: f64) -> String {
    let printed: f64 = g9(v).parse().unwrap_or(f64::NAN);
    if printed.is_finite() {
        format!("{printed:.2}")
    } else {
        "n/a".into()
    }
}

/// Heatmap of `values` with rows and columns labelled and cells annotated.
pub fn heatmap_svg(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let w = LABEL + CELL * cols.len() as f64 + 10.0;
    let h = LABEL + CELL * rows.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="16" font-size="13">{}</text>"#, escape(title));
    for (j, c) in cols.iter().enumerate() {
        let x = LABEL + CELL * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" transform="rotate(-45 {x} {y})">{}</text>"#,
            escape(c),
            y = LABEL - 6.0
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = LABEL + CELL * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LABEL - 6.0,
            y + CELL * 0.5 + 4.0,
            escape(r)
        );
        for (j, v) in values[i].iter().enumerate() {
            let x = LABEL + CELL * j as f64;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#ffffff"/>"##,
                diverging_color(*v)
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" class="cell">{}</text>"#,
                x + CELL * 0.5,
                y + CELL * 0.5 + 4.0,
                annotation(*v)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn alignment_svg(title: &str, m: &AlignmentMatrix) -> String {
    heatmap_svg(title, &m.base_names, &m.downstream_names, &m.mean)
}

pub fn correlation_svg(title: &str, m: &CorrelationMatrix) -> String {
    heatmap_svg(title, &m.names, &m.names, &m.values)
}

/// Every downstream prediction plotted against the base prediction.
pub fn sweep_svg(trace: &SweepTrace) -> String {
    let (w, h, pad) = (480.0, 360.0, 50.0);
    let all = trace.base.iter().chain(trace.downstream.iter().flatten()).copied();
    let (mut lo, mut hi) = all.fold((0.0f64, 1.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let sx = |v: f64| pad + (v - lo) / (hi - lo) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="#000000"/>"##,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.2}</text>"#, sx(v), h - pad + 14.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, pad - 4.0, sy(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{} (base)</text>"#,
        w / 2.0,
        h - 10.0,
        escape(&trace.base_name)
    );
    for (k, (name, col)) in trace.downstream_names.iter().zip(&trace.downstream).enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = trace
            .base
            .iter()
            .zip(col)
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            w - pad + 4.0 - 100.0,
            pad + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary 8-bit PGM of a row-major `side x side` image in `[0, 1]`.
pub fn pgm(pixels: &[f64], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| to_byte(*v)));
    out
}

/// Grid of grayscale images, one row per entry of `rows`, drawn as pixel rects.
pub fn montage_svg(col_titles: &[&str], rows: &[(String, Vec<&[f64]>)], side: usize) -> String {
    let scale = 4.0;
    let tile = side as f64 * scale;
    let gap = 8.0;
    let left = 90.0;
    let top = 24.0;
    let ncols = col_titles.len();
    let w = left + (tile + gap) * ncols as f64;
    let h = top + (tile + gap) * rows.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11" shape-rendering="crispEdges">"#
    );
    for (j, t) in col_titles.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="16">{}</text>"#, left + (tile + gap) * j as f64, escape(t));
    }
    for (i, (label, images)) in rows.iter().enumerate() {
        let y0 = top + (tile + gap) * i as f64;
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y0 + tile / 2.0, escape(label));
        for (j, img) in images.iter().enumerate() {
            let x0 = left + (tile + gap) * j as f64;
            for (p, v) in img.iter().enumerate() {
                let g = to_byte(*v);
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="#{g:02x}{g:02x}{g:02x}"/>"##,
                    x0 + (p % side) as f64 * scale,
                    y0 + (p / side) as f64 * scale
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
