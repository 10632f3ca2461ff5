//! Minimal raster charts for reports.

use image::{Rgb, RgbImage};

/// Pixels per grid cell in heat maps.
pub const CELL_PX: u32 = 16;

const LOW: [f64; 3] = [255.0, 255.0, 229.0];
const MID: [f64; 3] = [254.0, 153.0, 41.0];
const HIGH: [f64; 3] = [102.0, 37.0, 6.0];

fn ramp(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let (a, b, u) = if t < 0.5 { (LOW, MID, t * 2.0) } else { (MID, HIGH, t * 2.0 - 1.0) };
    Rgb([0, 1, 2].map(|i| (a[i] + (b[i] - a[i]) * u).round() as u8))
}

/// Row-major values as a `cols × rows` block image, scaled to their range.
pub fn heatmap(values: &[f64], rows: usize, cols: usize) -> RgbImage {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(cols as u32 * CELL_PX, rows as u32 * CELL_PX, |x, y| {
        let (r, c) = ((y / CELL_PX) as usize, (x / CELL_PX) as usize);
        values.get(r * cols + c).map_or(Rgb([0, 0, 0]), |v| ramp((v - lo) / span))
    })
}

const WIDTH: u32 = 480;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 20;

/// Polyline of `values` against their index, y scaled to the value range.
pub fn line_chart(values: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, axis);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let point = |i: usize, v: f64| {
        let x = MARGIN as f64 + if values.len() > 1 { i as f64 / (values.len() - 1) as f64 * w } else { 0.0 };
        let y = (HEIGHT - MARGIN) as f64 - (v - lo) / span * h;
        (x, y)
    };
    let line = Rgb([31, 119, 180]);
    let mut prev: Option<(f64, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let cur = point(i, v);
        let from = prev.unwrap_or(cur);
        let steps = ((cur.0 - from.0).abs().max((cur.1 - from.1).abs()).ceil() as usize).max(1);
        for k in 0..=steps {
            let u = k as f64 / steps as f64;
            let (x, y) = (from.0 + (cur.0 - from.0) * u, from.1 + (cur.1 - from.1) * u);
            img.put_pixel((x.round() as u32).min(WIDTH - 1), (y.round() as u32).min(HEIGHT - 1), line);
        }
        prev = Some(cur);
    }
    img
}
