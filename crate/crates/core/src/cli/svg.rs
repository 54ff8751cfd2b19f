//! Minimal SVG line plot of a ROC curve.

use std::fmt::Write as _;

use crate::openset::RocPoint;

const SIZE: f64 = 320.0;
const PAD: f64 = 40.0;

pub fn roc_svg(points: &[RocPoint], title: &str) -> String {
    let plot = SIZE - 2.0 * PAD;
    let xy = |fpr: f64, tpr: f64| (PAD + fpr * plot, SIZE - PAD - tpr * plot);
    let mut path = String::new();
    for p in points {
        let (x, y) = xy(p.fpr, p.tpr);
        write!(path, "{x:.2},{y:.2} ").unwrap();
    }
    let (x0, y0) = xy(0.0, 0.0);
    let (x1, y1) = xy(1.0, 1.0);
    let title = title
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">
<rect x="{x0}" y="{y1}" width="{plot}" height="{plot}" fill="none" stroke="#888"/>
<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#ccc" stroke-dasharray="4 4"/>
<polyline points="{}" fill="none" stroke="#1f5fbf" stroke-width="2"/>
<text x="{}" y="{}" font-size="12" text-anchor="middle">{title}</text>
<text x="{}" y="{}" font-size="11" text-anchor="middle">false positive rate</text>
<text x="12" y="{}" font-size="11" text-anchor="middle" transform="rotate(-90 12 {})">true positive rate</text>
</svg>
"##,
        path.trim_end(),
        SIZE / 2.0,
        PAD / 2.0,
        SIZE / 2.0,
        SIZE - 10.0,
        SIZE / 2.0,
        SIZE / 2.0,
    )
}
