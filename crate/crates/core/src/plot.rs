//! Minimal SVG line plots for 1D predictions.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 40.0;

/// Predictive mean with a `±1.96·std` band, the exact curve and sensor
/// markers.
pub fn band_svg(title: &str, x: &[f64], mean: &[f64], std: &[f64], exact: &[f64], sensors: &[(f64, f64)]) -> String {
    let lo: Vec<f64> = mean.iter().zip(std).map(|(m, s)| m - 1.96 * s).collect();
    let hi: Vec<f64> = mean.iter().zip(std).map(|(m, s)| m + 1.96 * s).collect();
    let ys = lo.iter().chain(&hi).chain(exact).chain(sensors.iter().map(|(_, y)| y)).copied();
    let (mut ymin, mut ymax) = ys.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !ymin.is_finite() || ymax - ymin < 1e-12 {
        ymin = ymin.min(0.0) - 1.0;
        ymax = ymax.max(0.0) + 1.0;
    }
    let xmin = x.first().copied().unwrap_or(0.0);
    let xmax = x.last().copied().unwrap_or(1.0).max(xmin + 1e-12);
    let px = |v: f64| PAD + (v - xmin) / (xmax - xmin) * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - ymin) / (ymax - ymin) * (H - 2.0 * PAD);
    let path = |ys: &[f64]| {
        let mut s = String::new();
        for (i, (&a, &b)) in x.iter().zip(ys).enumerate() {
            let _ = write!(s, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(a), py(b));
        }
        s
    };
    let mut band = String::new();
    for (i, (&a, &b)) in x.iter().zip(&hi).enumerate() {
        let _ = write!(band, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(a), py(b));
    }
    for (&a, &b) in x.iter().zip(&lo).rev() {
        let _ = write!(band, "L{:.2},{:.2} ", px(a), py(b));
    }
    band.push('Z');
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{title}  [{ymin:.3}, {ymax:.3}]</text>"#);
    let _ = writeln!(s, r##"<path d="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##);
    let _ = writeln!(s, r##"<path d="{}" fill="none" stroke="#444" stroke-dasharray="5,4"/>"##, path(exact));
    let _ = writeln!(s, r##"<path d="{}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##, path(mean));
    for &(a, b) in sensors {
        let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#d62728"/>"##, px(a), py(b));
    }
    s.push_str("</svg>\n");
    s
}
