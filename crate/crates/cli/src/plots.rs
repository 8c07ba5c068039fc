//! Static SVG line charts of metric columns.

use std::fmt::Write as _;
use std::path::Path;

use ngfn_core::eval::{MetricsRecord, CSV_HEADER};

use crate::error::{io_err, CliResult};

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

/// One chart: points `(x, y)`, non-finite values skipped.
pub fn line_chart(title: &str, points: &[(f64, f64)]) -> Option<String> {
    let pts: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if pts.is_empty() {
        return None;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let m = y0.abs().max(1.0) * 0.05;
        y0 -= m;
        y1 += m;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#, W / 2.0).unwrap();
    writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    )
    .unwrap();
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.4}</text>"#, PAD - 4.0, y + 3.0).unwrap();
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{v}</text>"#, H - PAD + 14.0).unwrap();
    }
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#, path.join(" ")).unwrap();
    s.push_str("</svg>\n");
    Some(s)
}

/// Write `<column>.svg` for every metric column with a finite value.
/// Returns the files written.
pub fn emit_plots(records: &[MetricsRecord], dir: &Path) -> CliResult<Vec<String>> {
    let names: Vec<&str> = CSV_HEADER.split(',').skip(1).collect();
    let mut written = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.values()[i])).collect();
        if let Some(svg) = line_chart(name, &pts) {
            let file = format!("{name}.svg");
            let path = dir.join(&file);
            std::fs::write(&path, svg).map_err(|e| io_err(&path, e))?;
            written.push(file);
        }
    }
    Ok(written)
}
