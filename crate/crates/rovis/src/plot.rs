//! Raster precision-recall plots: fixed-size PPM images with axes, 0.25
//! gridlines, digit tick labels, and one colored staircase per curve. Display
//! only — no interactive UI.

use crate::data::{write_ppm, Frame};
use crate::error::{Error, Result};
use crate::metrics::PrCurve;
use std::path::Path;

pub const PLOT_WIDTH: usize = 320;
pub const PLOT_HEIGHT: usize = 256;

const LEFT: usize = 36;
const RIGHT: usize = 10;
const TOP: usize = 10;
const BOTTOM: usize = 20;

const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
const BLACK: [f64; 3] = [0.0, 0.0, 0.0];
const GRID: [f64; 3] = [0.85, 0.85, 0.85];

/// Curve colors, cycled.
pub fn palette(i: usize) -> [f64; 3] {
    const COLORS: [[f64; 3]; 6] = [
        [0.85, 0.20, 0.20],
        [0.20, 0.35, 0.85],
        [0.15, 0.65, 0.30],
        [0.90, 0.60, 0.10],
        [0.60, 0.30, 0.70],
        [0.10, 0.60, 0.60],
    ];
    COLORS[i % COLORS.len()]
}

/// A polyline in unit coordinates ((0,0) bottom-left, (1,1) top-right) with a
/// legend label drawn in the 3x5 digit font (digits and '.' only).
#[derive(Debug, Clone)]
pub struct Curve {
    pub label: String,
    pub color: [f64; 3],
    pub points: Vec<(f64, f64)>,
}

fn to_px(x: f64, y: f64) -> (i64, i64) {
    let w = (PLOT_WIDTH - LEFT - RIGHT - 1) as f64;
    let h = (PLOT_HEIGHT - TOP - BOTTOM - 1) as f64;
    let px = LEFT as f64 + x.clamp(0.0, 1.0) * w;
    let py = TOP as f64 + (1.0 - y.clamp(0.0, 1.0)) * h;
    (px.round() as i64, py.round() as i64)
}

fn put(frame: &mut Frame, x: i64, y: i64, color: [f64; 3]) {
    if (0..frame.width as i64).contains(&x) && (0..frame.height as i64).contains(&y) {
        frame.set(y as usize, x as usize, color);
    }
}

/// Bresenham line, inclusive of both endpoints.
fn line(frame: &mut Frame, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [f64; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(frame, x, y, color);
        if x == x1 && y == y1 {
            return;
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

/// 3x5 glyphs for "0123456789."; each row is 3 bits, MSB leftmost.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

/// Draw `text` with its top-left corner at (x, y); unknown chars are skipped
/// but still advance, keeping columns aligned.
fn draw_text(frame: &mut Frame, x: i64, y: i64, text: &str, color: [f64; 3]) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + (i as i64) * 4;
        if let Some(rows) = glyph(c) {
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if row >> (2 - rx) & 1 == 1 {
                        put(frame, gx + rx as i64, y + ry as i64, color);
                    }
                }
            }
        }
    }
}

fn text_width(text: &str) -> i64 {
    (text.chars().count() as i64) * 4 - 1
}

/// Render curves over unit axes: white background, gray gridlines every 0.25,
/// black frame, tick labels, and a legend swatch + label per curve.
pub fn render_curves(curves: &[Curve]) -> Frame {
    let mut frame = Frame::new(PLOT_HEIGHT, PLOT_WIDTH);
    for y in 0..PLOT_HEIGHT {
        for x in 0..PLOT_WIDTH {
            frame.set(y, x, WHITE);
        }
    }
    for i in 1..4 {
        let v = i as f64 / 4.0;
        line(&mut frame, to_px(v, 0.0), to_px(v, 1.0), GRID);
        line(&mut frame, to_px(0.0, v), to_px(1.0, v), GRID);
    }
    for c in curves {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &c.points {
            let p = to_px(x, y);
            match prev {
                Some(q) => line(&mut frame, q, p, c.color),
                None => put(&mut frame, p.0, p.1, c.color),
            }
            prev = Some(p);
        }
    }
    // Axis frame drawn after the curves so the box stays crisp.
    let (x0, y1) = to_px(0.0, 0.0);
    let (x1, y0) = to_px(1.0, 1.0);
    line(&mut frame, (x0, y0), (x1, y0), BLACK);
    line(&mut frame, (x0, y1), (x1, y1), BLACK);
    line(&mut frame, (x0, y0), (x0, y1), BLACK);
    line(&mut frame, (x1, y0), (x1, y1), BLACK);
    for (v, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let (tx, _) = to_px(v, 0.0);
        draw_text(&mut frame, tx - text_width(label) / 2, y1 + 4, label, BLACK);
        let (_, ty) = to_px(0.0, v);
        draw_text(&mut frame, x0 - text_width(label) - 5, ty - 2, label, BLACK);
    }
    for (i, c) in curves.iter().enumerate() {
        let ly = y0 + 4 + (i as i64) * 8;
        let lx = x1 - 46;
        for dy in 0..5 {
            line(&mut frame, (lx, ly + dy), (lx + 6, ly + dy), c.color);
        }
        draw_text(&mut frame, lx + 10, ly, &c.label, BLACK);
    }
    frame
}

/// Group PR curves by category into one image each, one colored staircase per
/// IoU threshold (legend label = threshold). Each staircase starts at the
/// conventional (recall 0, precision 1) anchor. Returns (file stem, image)
/// pairs, stems sanitized to [A-Za-z0-9_-].
pub fn pr_plot_images(curves: &[PrCurve]) -> Vec<(String, Frame)> {
    let mut by_cat: Vec<(&str, Vec<&PrCurve>)> = Vec::new();
    for c in curves {
        match by_cat.iter_mut().find(|(name, _)| *name == c.category) {
            Some((_, list)) => list.push(c),
            None => by_cat.push((&c.category, vec![c])),
        }
    }
    by_cat
        .into_iter()
        .map(|(name, list)| {
            let styled: Vec<Curve> = list
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut points = vec![(0.0, 1.0)];
                    points.extend(c.points.iter().copied());
                    Curve { label: format!("{:.2}", c.threshold), color: palette(i), points }
                })
                .collect();
            let stem: String = format!("pr_{name}")
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            (stem, render_curves(&styled))
        })
        .collect()
}

pub fn save_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ppm(frame, &mut file).map_err(|e| Error::io(path, e))
}
