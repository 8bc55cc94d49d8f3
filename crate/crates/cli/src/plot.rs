//! Static PNG rendering for matrices and training curves. No text: axis
//! order follows the CSV written next to each image.

use image::{Rgb, RgbImage};
use ndarray::Array2;

const CELL: u32 = 20;
const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const BLUE: [f64; 3] = [33.0, 102.0, 172.0];
const RED: [f64; 3] = [178.0, 24.0, 43.0];
const DARK_BLUE: [f64; 3] = [8.0, 48.0, 107.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    /// `[0, 1]` from white to dark blue.
    Sequential,
    /// Signed, scaled by the largest magnitude: blue above zero, red below.
    Diverging,
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let c = |i: usize| (a[i] + (b[i] - a[i]) * t).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

pub fn cell_color(v: f64, palette: Palette, scale: f64) -> Rgb<u8> {
    match palette {
        Palette::Sequential => mix(WHITE, DARK_BLUE, v),
        Palette::Diverging if scale == 0.0 => mix(WHITE, BLUE, 0.0),
        Palette::Diverging if v >= 0.0 => mix(WHITE, BLUE, v / scale),
        Palette::Diverging => mix(WHITE, RED, -v / scale),
    }
}

/// One square cell per entry, rows top to bottom, with a 1-pixel gap.
pub fn heatmap(values: &Array2<f64>, palette: Palette) -> RgbImage {
    let (rows, cols) = values.dim();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut img = RgbImage::from_pixel(cols as u32 * CELL + 1, rows as u32 * CELL + 1, Rgb([200, 200, 200]));
    for ((r, c), &v) in values.indexed_iter() {
        let color = cell_color(v, palette, scale);
        for y in 1..CELL {
            for x in 1..CELL {
                img.put_pixel(c as u32 * CELL + x, r as u32 * CELL + y, color);
            }
        }
    }
    img
}

const CURVE_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart of several series sharing one x axis (epochs) and one y range.
/// Missing values break the line.
pub fn curves(series: &[Vec<Option<f64>>]) -> RgbImage {
    let (w, h, margin) = (480i64, 280i64, 20i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let axis = Rgb([90, 90, 90]);
    draw_line(&mut img, (margin, margin), (margin, h - margin), axis);
    draw_line(&mut img, (margin, h - margin), (w - margin, h - margin), axis);
    let finite = series.iter().flatten().flatten().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    if len == 0 || lo > hi {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |i: usize, v: f64| -> (i64, i64) {
        let x = margin + ((w - 2 * margin) as f64 * i as f64 / (len.max(2) - 1) as f64).round() as i64;
        let y = h - margin - ((h - 2 * margin) as f64 * (v - lo) / span).round() as i64;
        (x, y)
    };
    for (s, values) in series.iter().enumerate() {
        let color = Rgb(CURVE_COLORS[s % CURVE_COLORS.len()]);
        for i in 1..values.len() {
            if let (Some(a), Some(b)) = (values[i - 1], values[i]) {
                if a.is_finite() && b.is_finite() {
                    draw_line(&mut img, px(i - 1, a), px(i, b), color);
                }
            }
        }
    }
    img
}
