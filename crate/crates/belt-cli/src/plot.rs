//! Static PNG renderers for the report stage: no plotting toolkit, just
//! pixels into an `image` buffer. Good enough for shape-of-the-curve
//! inspection, which is all the reports promise.

use std::path::Path;

use anyhow::{bail, Context, Result};
use belt_core::defense::ReversedTrigger;
use image::{Rgb, RgbImage};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const SERIES_A: Rgb<u8> = Rgb([31, 119, 180]);
const SERIES_B: Rgb<u8> = Rgb([214, 39, 40]);

/// 3x5 bitmap glyphs for the characters plots need (digits and `.-%exn/a `).
fn glyph(c: char) -> Option<[u8; 5]> {
    // Each row is 3 bits, MSB left.
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        'x' => [0b000, 0b101, 0b010, 0b101, 0b101],
        'n' => [0b000, 0b110, 0b101, 0b101, 0b101],
        '/' => [0b001, 0b001, 0b010, 0b100, 0b100],
        'a' => [0b000, 0b111, 0b011, 0b101, 0b111],
        ' ' => [0; 5],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) != 0 {
                        let (px, py) = (cx + dx, y + dy as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
        cx += 4;
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (a.0 - b.0).abs().max((a.1 - b.1).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

fn blend(img: &mut RgbImage, x: u32, y: u32, color: Rgb<u8>, alpha: f64) {
    if x >= img.width() || y >= img.height() {
        return;
    }
    let old = img.get_pixel(x, y);
    let mix = |o: u8, n: u8| (o as f64 * (1.0 - alpha) + n as f64 * alpha).round() as u8;
    img.put_pixel(
        x,
        y,
        Rgb([
            mix(old[0], color[0]),
            mix(old[1], color[1]),
            mix(old[2], color[2]),
        ]),
    );
}

struct Frame {
    width: u32,
    height: u32,
    left: u32,
    right: u32,
    top: u32,
    bottom: u32,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        let px = self.left as f64 + fx * (self.width - self.left - self.right) as f64;
        let py = (self.height - self.bottom) as f64 - fy * (self.height - self.top - self.bottom) as f64;
        (px, py)
    }

    fn draw_axes(&self, img: &mut RgbImage, x_ticks: &[f64], y_ticks: &[f64]) {
        let (x0, y0) = (self.left, self.top);
        let (x1, y1) = (self.width - self.right, self.height - self.bottom);
        for &t in y_ticks {
            let (_, py) = self.to_px(self.x_range.0, t);
            draw_line(img, (x0 as f64, py), (x1 as f64, py), GRID);
            draw_text(img, 2, py as u32 - 2, &format_tick(t), AXIS);
        }
        for &t in x_ticks {
            let (px, _) = self.to_px(t, self.y_range.0);
            draw_line(img, (px, y0 as f64), (px, y1 as f64), GRID);
            draw_text(img, px as u32 - 6, y1 + 4, &format_tick(t), AXIS);
        }
        draw_line(img, (x0 as f64, y1 as f64), (x1 as f64, y1 as f64), AXIS);
        draw_line(img, (x0 as f64, y0 as f64), (x0 as f64, y1 as f64), AXIS);
    }
}

fn format_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 && v.abs() < 1e6 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

fn spread_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| lo + (hi - lo) * k as f64 / n as f64)
        .collect()
}

/// Polyline-with-markers plot of `(x, y)` points, sorted by x.
pub fn write_line_plot(points: &[(f64, f64)], path: &Path) -> Result<()> {
    if points.len() < 2 {
        bail!("line plot needs at least 2 points, got {}", points.len());
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut x_lo, mut x_hi) = (pts[0].0, pts[pts.len() - 1].0);
    let mut y_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut y_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if x_hi - x_lo < 1e-12 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    let pad = ((y_hi - y_lo) * 0.1).max(1e-3);
    y_lo -= pad;
    y_hi += pad;

    let frame = Frame {
        width: 480,
        height: 320,
        left: 46,
        right: 12,
        top: 12,
        bottom: 26,
        x_range: (x_lo, x_hi),
        y_range: (y_lo, y_hi),
    };
    let mut img = RgbImage::from_pixel(frame.width, frame.height, BG);
    frame.draw_axes(
        &mut img,
        &spread_ticks(x_lo, x_hi, 4),
        &spread_ticks(y_lo, y_hi, 4),
    );
    for pair in pts.windows(2) {
        draw_line(&mut img, frame.to_px(pair[0].0, pair[0].1), frame.to_px(pair[1].0, pair[1].1), SERIES_A);
    }
    for &(x, y) in &pts {
        let (px, py) = frame.to_px(x, y);
        fill_rect(
            &mut img,
            (px as u32).saturating_sub(2),
            (py as u32).saturating_sub(2),
            px as u32 + 3,
            py as u32 + 3,
            SERIES_A,
        );
    }
    img.save(path)
        .with_context(|| format!("write plot {}", path.display()))
}

/// Two overlaid, semi-transparent histograms on a shared binning — the
/// standard clean-vs-triggered entropy picture.
pub fn write_dual_histogram(a: &[f64], b: &[f64], bins: usize, path: &Path) -> Result<()> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        bail!("histogram needs nonempty samples and bins");
    }
    let lo = a.iter().chain(b).fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = a.iter().chain(b).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let (lo, hi) = if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let count = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &v in xs {
            let idx = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            c[idx.min(bins - 1)] += 1;
        }
        c
    };
    let (ca, cb) = (count(a), count(b));
    let y_hi = ca.iter().chain(&cb).copied().max().unwrap_or(1).max(1) as f64;

    let frame = Frame {
        width: 480,
        height: 320,
        left: 46,
        right: 12,
        top: 12,
        bottom: 26,
        x_range: (lo, hi),
        y_range: (0.0, y_hi * 1.05),
    };
    let mut img = RgbImage::from_pixel(frame.width, frame.height, BG);
    frame.draw_axes(
        &mut img,
        &spread_ticks(lo, hi, 4),
        &spread_ticks(0.0, y_hi, 4),
    );
    for (counts, color) in [(&ca, SERIES_A), (&cb, SERIES_B)] {
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let bx0 = lo + (hi - lo) * i as f64 / bins as f64;
            let bx1 = lo + (hi - lo) * (i + 1) as f64 / bins as f64;
            let (px0, py) = frame.to_px(bx0, c as f64);
            let (px1, base) = frame.to_px(bx1, 0.0);
            for y in py as u32..base as u32 {
                for x in px0 as u32..px1 as u32 {
                    blend(&mut img, x, y, color, 0.45);
                }
            }
        }
    }
    img.save(path)
        .with_context(|| format!("write plot {}", path.display()))
}

/// Renders a reversed trigger as mask (left) and mask-weighted pattern
/// (right) panels.
pub fn write_reversed_trigger_png(reversed: &ReversedTrigger, path: &Path) -> Result<()> {
    let (c, h, w) = reversed.pattern.dim();
    let (mh, mw) = reversed.mask.dim();
    if (mh, mw) != (h, w) {
        bail!("mask {:?} does not match pattern {:?}", (mh, mw), (h, w));
    }
    let gap = 2u32;
    let mut img = RgbImage::from_pixel((2 * w as u32) + gap, h as u32, Rgb([128, 128, 128]));
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..h {
        for j in 0..w {
            let m = reversed.mask[(i, j)];
            img.put_pixel(j as u32, i as u32, Rgb([to_u8(m); 3]));
            let px = |ch: usize| to_u8(reversed.pattern[(ch.min(c - 1), i, j)] * m);
            img.put_pixel(
                w as u32 + gap + j as u32,
                i as u32,
                Rgb([px(0), px(1), px(2)]),
            );
        }
    }
    img.save(path)
        .with_context(|| format!("write trigger image {}", path.display()))
}
