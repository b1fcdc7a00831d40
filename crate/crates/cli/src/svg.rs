//! Minimal Bland-Altman scatter plot as standalone SVG.

use std::fmt::Write as _;

use pdvseg::metrics::BlandAltman;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;

pub fn bland_altman_svg(title: &str, ba: &BlandAltman) -> String {
    let xs: Vec<f64> = ba.pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = ba.pairs.iter().map(|p| p.1).chain([ba.lower, ba.upper]).collect();
    let (x0, x1) = padded_range(&xs);
    let (y0, y1) = padded_range(&ys);
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let _ = write!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for (y, label, dash) in [(ba.bias, "bias", ""), (ba.lower, "-1.96 SD", "4 3"), (ba.upper, "+1.96 SD", "4 3")] {
        let (x2, yy, tx, ty) = (W - PAD, py(y), W - PAD - 2.0, py(y) - 3.0);
        let _ = write!(
            s,
            r#"<line x1="{PAD}" x2="{x2}" y1="{yy:.2}" y2="{yy:.2}" stroke="grey" stroke-dasharray="{dash}"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{label} {y:.2}</text>"#
        );
    }
    for &(m, d) in &ba.pairs {
        let _ = write!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, px(m), py(d));
    }
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">mean of volumes (ml)</text>"#, W / 2.0, H - 15.0);
    let _ = write!(
        s,
        r#"<text x="15" y="{0}" text-anchor="middle" transform="rotate(-90 15 {0})">difference (ml)</text>"#,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn padded_range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-6);
    (lo - 0.1 * span, hi + 0.1 * span)
}
