//! Static plot files: SVG line charts and grayscale PNG mosaics.

use std::fmt::Write as _;
use std::path::Path;

use tmra_core::metrics::SSoSImage;

use crate::Result;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
}

/// Writes a line chart of `series` against the frame index.
pub fn line_chart_svg(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 30.0, 40.0);
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let px = |i: usize| left + (w - left - right) * i as f64 / (n.max(2) - 1) as f64;
    let py = |v: f64| top + (h - top - bottom) * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="black" points="{left},{top} {left},{} {},{}"/>"#,
        h - bottom,
        w - right,
        h - bottom
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">frame</text>"#, (left + w - right) / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, h / 2.0, h / 2.0, escape(y_label));
    for (v, anchor) in [(lo, h - bottom), (hi, top)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, left - 4.0, anchor + 4.0);
    }
    for (k, series) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = series
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let ly = top + 16.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 34.0, ly + 4.0, escape(series.label));
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s)?;
    Ok(())
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tiles the images in one row, each scaled to `[0, 255]` by the largest
/// value over all tiles.
pub fn mosaic_png(path: &Path, tiles: &[&SSoSImage]) -> Result<()> {
    let Some(first) = tiles.first() else { return Ok(()) };
    let (h, w) = first.dims();
    if tiles.iter().any(|t| t.dims() != (h, w)) {
        return crate::format_err("mosaic tiles differ in size");
    }
    let gap = 2;
    let scale = tiles.iter().map(|t| t.max()).fold(0.0, f64::max);
    let width = tiles.len() * w + (tiles.len() - 1) * gap;
    let mut img = image::GrayImage::new(width as u32, h as u32);
    for (k, tile) in tiles.iter().enumerate() {
        for ((i, j), &v) in tile.data.indexed_iter() {
            let g = if scale > 0.0 { (255.0 * v / scale).round().clamp(0.0, 255.0) as u8 } else { 0 };
            img.put_pixel((k * (w + gap) + j) as u32, i as u32, image::Luma([g]));
        }
    }
    img.save(path)?;
    Ok(())
}
