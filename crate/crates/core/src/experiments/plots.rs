//! File-based figures: PNG heatmaps and panels, SVG line and box plots.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::CrossDomainMatrix;
use crate::types::{Image, LabelMap};

const LABEL_COLORS: [[u8; 3]; 4] = [[0, 0, 0], [230, 60, 60], [60, 200, 90], [70, 110, 240]];
const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Piecewise-linear dark-blue → teal → yellow ramp over `[0, 1]`.
fn ramp(v: f64) -> [u8; 3] {
    let stops = [(0.0, [40.0, 20.0, 90.0]), (0.5, [30.0, 150.0, 140.0]), (1.0, [250.0, 230.0, 40.0])];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let (lo, hi) = if v <= 0.5 { (stops[0], stops[1]) } else { (stops[1], stops[2]) };
    let t = (v - lo.0) / (hi.0 - lo.0);
    std::array::from_fn(|i| (lo.1[i] + t * (hi.1[i] - lo.1[i])).round() as u8)
}

fn hex_color(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Square-cell PNG heatmap of a cross-domain matrix, rows = training domain.
pub fn heatmap_png(m: &CrossDomainMatrix, path: &Path) -> Result<()> {
    const CELL: u32 = 64;
    let d = m.domains.len() as u32;
    let img = RgbImage::from_fn(d * CELL, d * CELL, |x, y| {
        let (r, c) = ((y / CELL) as usize, (x / CELL) as usize);
        if x % CELL == 0 || y % CELL == 0 {
            Rgb([255, 255, 255])
        } else {
            Rgb(ramp(m.values[r][c]))
        }
    });
    save_png(&img, path)
}

/// Annotated SVG heatmap of a cross-domain matrix.
pub fn heatmap_svg(m: &CrossDomainMatrix, title: &str, path: &Path) -> Result<()> {
    let d = m.domains.len();
    let (cell, left, top) = (90.0, 120.0, 60.0);
    let (w, h) = (left + cell * d as f64 + 20.0, top + cell * d as f64 + 40.0);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title)).unwrap();
    for (i, name) in m.domains.iter().enumerate() {
        let c = left + cell * (i as f64 + 0.5);
        writeln!(s, r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, escape(name)).unwrap();
        let r = top + cell * (i as f64 + 0.5);
        writeln!(s, r#"<text x="{}" y="{r}" text-anchor="end">{}</text>"#, left - 6.0, escape(name)).unwrap();
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            let fill = hex_color(ramp(*v));
            let ink = if *v > 0.6 { "black" } else { "white" };
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>"#).unwrap();
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.3}</text>"#, x + cell / 2.0, y + cell / 2.0 + 4.0).unwrap();
        }
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">test domain (columns), training domain (rows)</text>"#, w / 2.0, h - 12.0).unwrap();
    s.push_str("</svg>\n");
    write_file(path, &s)
}

/// One named series of `(x, mean, std)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

struct Frame {
    w: f64,
    h: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0).max(1e-12) * (self.w - self.left - self.right)
    }

    fn py(&self, y: f64) -> f64 {
        self.h - self.bottom - (y - self.y.0) / (self.y.1 - self.y.0).max(1e-12) * (self.h - self.top - self.bottom)
    }

    fn axes(&self, s: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (x0, x1, y0, y1) = (self.left, self.w - self.right, self.top, self.h - self.bottom);
        writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, self.w / 2.0, escape(title)).unwrap();
        writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#).unwrap();
        writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
        for k in 0..=5 {
            let v = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 5.0;
            let y = self.py(v);
            writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##).unwrap();
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 5.0, y + 4.0).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, self.h - 8.0, escape(xlabel)).unwrap();
        writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        )
        .unwrap();
    }
}

fn svg_open(w: f64, h: f64) -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#) + "\n"
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line plot with ±std error bars; `y_range` fixes the vertical axis when given.
pub fn line_plot_svg(series: &[Series], title: &str, xlabel: &str, ylabel: &str, y_range: Option<(f64, f64)>, path: &Path) -> Result<()> {
    let xs = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = y_range.unwrap_or_else(|| bounds(series.iter().flat_map(|s| s.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]))));
    let f = Frame { w: 560.0, h: 360.0, left: 60.0, right: 150.0, top: 40.0, bottom: 45.0, x: xs, y: ys };
    let mut s = svg_open(f.w, f.h);
    f.axes(&mut s, title, xlabel, ylabel);
    let mut xticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xticks.sort_by(f64::total_cmp);
    xticks.dedup();
    if xticks.len() <= 12 {
        for x in xticks {
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#, f.px(x), f.h - f.bottom + 15.0).unwrap();
        }
    }
    for (k, ser) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", f.px(p.0), f.py(p.1))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#, pts.join(" ")).unwrap();
        for &(x, m, sd) in &ser.points {
            let (cx, lo, hi) = (f.px(x), f.py(m - sd), f.py(m + sd));
            if sd > 0.0 {
                writeln!(s, r#"<line x1="{cx}" y1="{lo}" x2="{cx}" y2="{hi}" stroke="{color}"/>"#).unwrap();
                for y in [lo, hi] {
                    writeln!(s, r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}"/>"#, cx - 3.0, cx + 3.0).unwrap();
                }
            }
            writeln!(s, r#"<circle cx="{cx}" cy="{}" r="2.5" fill="{color}"/>"#, f.py(m)).unwrap();
        }
        let ly = f.top + 16.0 * k as f64 + 8.0;
        let lx = f.w - f.right + 12.0;
        writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/>"#, ly - 8.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 14.0, escape(&ser.name)).unwrap();
    }
    s.push_str("</svg>\n");
    write_file(path, &s)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, t) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - t) + sorted[i + 1] * t
    } else {
        sorted[i]
    }
}

/// Grouped box plots: one group per category, one box per model inside it.
pub fn box_plot_svg(categories: &[String], models: &[String], values: &[Vec<Vec<f64>>], title: &str, path: &Path) -> Result<()> {
    let ys = (0.0, 1.0);
    let f = Frame {
        w: 140.0 + 130.0 * categories.len() as f64,
        h: 360.0,
        left: 60.0,
        right: 150.0,
        top: 40.0,
        bottom: 45.0,
        x: (0.0, categories.len() as f64),
        y: ys,
    };
    let mut s = svg_open(f.w, f.h);
    f.axes(&mut s, title, "class", "Dice");
    let slot = 1.0 / (models.len() as f64 + 1.0);
    for (ci, cat) in categories.iter().enumerate() {
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, f.px(ci as f64 + 0.5), f.h - f.bottom + 15.0, escape(cat)).unwrap();
        for (mi, vals) in values[ci].iter().enumerate() {
            if vals.is_empty() {
                continue;
            }
            let color = SERIES_COLORS[mi % SERIES_COLORS.len()];
            let mut v = vals.clone();
            v.sort_by(f64::total_cmp);
            let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
            let iqr = q3 - q1;
            let lo = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(v[0]);
            let hi = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(v[v.len() - 1]);
            let cx = f.px(ci as f64 + slot * (mi as f64 + 1.0));
            let half = (f.px(slot) - f.px(0.0)) * 0.35;
            writeln!(s, r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="{color}"/>"#, f.py(lo), f.py(hi)).unwrap();
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{color}" fill-opacity="0.35" stroke="{color}"/>"#,
                cx - half,
                f.py(q3),
                2.0 * half,
                (f.py(q1) - f.py(q3)).max(0.5)
            )
            .unwrap();
            writeln!(s, r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, cx - half, cx + half, y = f.py(med)).unwrap();
            for &x in v.iter().filter(|&&x| x < lo || x > hi) {
                writeln!(s, r#"<circle cx="{cx}" cy="{}" r="2" fill="none" stroke="{color}"/>"#, f.py(x)).unwrap();
            }
        }
    }
    for (mi, m) in models.iter().enumerate() {
        let color = SERIES_COLORS[mi % SERIES_COLORS.len()];
        let (lx, ly) = (f.w - f.right + 12.0, f.top + 16.0 * mi as f64 + 8.0);
        writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/>"#, ly - 8.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 14.0, escape(m)).unwrap();
    }
    s.push_str("</svg>\n");
    write_file(path, &s)
}

/// One tile of a qualitative panel.
pub enum Tile<'a> {
    Image(&'a Image),
    Labels(&'a LabelMap),
}

/// Rows of equally sized tiles, upscaled by `zoom`, with a 2-pixel white gutter.
pub fn panels_png(rows: &[Vec<Tile<'_>>], zoom: u32, path: &Path) -> Result<()> {
    const GUTTER: u32 = 2;
    let side = |t: &Tile<'_>| match t {
        Tile::Image(i) => i.dims(),
        Tile::Labels(l) => l.dims(),
    };
    let (th, tw) = rows.first().and_then(|r| r.first()).map(side).ok_or_else(|| Error::Empty("panel rows".into()))?;
    if rows.iter().flatten().any(|t| side(t) != (th, tw)) {
        return Err(Error::Shape("panel tiles differ in size".into()));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (cw, ch) = (tw as u32 * zoom + GUTTER, th as u32 * zoom + GUTTER);
    let mut img = RgbImage::from_pixel(cols * cw + GUTTER, rows.len() as u32 * ch + GUTTER, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            for y in 0..th as u32 * zoom {
                for x in 0..tw as u32 * zoom {
                    let (py, px) = ((y / zoom) as usize, (x / zoom) as usize);
                    let color = match tile {
                        Tile::Image(i) => {
                            let v = (i.get(py, px).clamp(0.0, 1.0) * 255.0).round() as u8;
                            [v, v, v]
                        }
                        Tile::Labels(l) => LABEL_COLORS[(l.get(py, px) as usize).min(LABEL_COLORS.len() - 1)],
                    };
                    img.put_pixel(GUTTER + c as u32 * cw + x, GUTTER + r as u32 * ch + y, Rgb(color));
                }
            }
        }
    }
    save_png(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_clamping() {
        assert_eq!(ramp(0.0), [40, 20, 90]);
        assert_eq!(ramp(1.0), [250, 230, 40]);
        assert_eq!(ramp(2.0), ramp(1.0));
        assert_eq!(ramp(f64::NAN), ramp(0.0));
    }

    #[test]
    fn writes_all_figure_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let m = CrossDomainMatrix { domains: vec!["a".into(), "b".into()], values: vec![vec![0.9, 0.2], vec![0.3, 0.8]] };
        heatmap_png(&m, &dir.path().join("h.png")).unwrap();
        let png = image::open(dir.path().join("h.png")).unwrap();
        assert_eq!((png.width(), png.height()), (128, 128));
        heatmap_svg(&m, "t", &dir.path().join("h.svg")).unwrap();
        let series = [Series { name: "x<y".into(), points: vec![(0.0, 0.5, 0.1), (1.0, 0.7, 0.0)] }];
        line_plot_svg(&series, "t", "x", "y", None, &dir.path().join("l.svg")).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("l.svg")).unwrap();
        assert!(svg.contains("x&lt;y") && svg.ends_with("</svg>\n"));
        box_plot_svg(&["LV".into()], &["m".into()], &[vec![vec![0.1, 0.5, 0.9]]], "t", &dir.path().join("b.svg")).unwrap();
        let img = Image::filled(4, 4, 0.5);
        let lab = LabelMap::filled(4, 4, 2);
        panels_png(&[vec![Tile::Image(&img), Tile::Labels(&lab)]], 3, &dir.path().join("p.png")).unwrap();
        let p = image::open(dir.path().join("p.png")).unwrap().into_rgb8();
        assert_eq!(p.dimensions(), (2 * 14 + 2, 14 + 2));
        assert_eq!(p.get_pixel(2 + 14, 2).0, LABEL_COLORS[2]);
    }
}
