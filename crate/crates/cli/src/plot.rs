//! Minimal PNG figures: a line plot and a grayscale image panel.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use dualdomain::{Error, Result};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
];

fn save_err(path: &Path, e: image::ImageError) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Plots each series against its index, all sharing one y range, with a
/// square marker per point. The caller supplies the data as CSV separately.
pub fn line_plot(series: &[&[f64]], path: &Path) -> Result<()> {
    let (w, h, margin) = (640i64, 400i64, 40i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, WHITE);
    let values = series.iter().flat_map(|s| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let n = series.iter().map(|s| s.len()).max().unwrap_or(0).max(2);
    let px = |i: usize| margin + (i as i64) * (w - 2 * margin) / (n as i64 - 1);
    let py = |v: f64| h - margin - ((v - lo) / (hi - lo) * (h - 2 * margin) as f64).round() as i64;

    for k in 0..=4 {
        let y = margin + k * (h - 2 * margin) / 4;
        line(&mut img, (margin, y), (w - margin, y), GRID);
    }
    line(&mut img, (margin, margin), (margin, h - margin), AXIS);
    line(&mut img, (margin, h - margin), (w - margin, h - margin), AXIS);
    for i in 0..n {
        line(&mut img, (px(i), h - margin), (px(i), h - margin + 4), AXIS);
    }

    for (s, data) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points: Vec<(i64, i64)> = data
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (px(i), py(v)))
            .collect();
        for pair in points.windows(2) {
            line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &points {
            for d in -2..=2 {
                line(&mut img, (x - 2, y + d), (x + 2, y + d), color);
            }
        }
    }
    img.save(path).map_err(|e| save_err(path, e))
}

/// Places the images side by side, each scaled by `zoom` and windowed to
/// `[0, white]`.
pub fn image_panel(images: &[&Array2<f64>], white: f64, zoom: u32, path: &Path) -> Result<()> {
    let (h, w) = images.first().map(|i| i.dim()).unwrap_or((1, 1));
    let gap = 4;
    let total_w = images.len() as u32 * (w as u32 * zoom + gap) - gap;
    let mut img = GrayImage::from_pixel(total_w.max(1), h as u32 * zoom, Luma([0]));
    let white = if white > 0.0 { white } else { 1.0 };
    for (k, im) in images.iter().enumerate() {
        let x0 = k as u32 * (w as u32 * zoom + gap);
        for ((y, x), &v) in im.indexed_iter() {
            let level = (v / white).clamp(0.0, 1.0) * 255.0;
            for dy in 0..zoom {
                for dx in 0..zoom {
                    img.put_pixel(x0 + x as u32 * zoom + dx, y as u32 * zoom + dy, Luma([level.round() as u8]));
                }
            }
        }
    }
    img.save(path).map_err(|e| save_err(path, e))
}

/// Binary mask preview: sampled locations white.
pub fn mask_preview(pattern: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = pattern.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([pattern[[y as usize, x as usize]] * 255]));
    img.save(path).map_err(|e| save_err(path, e))
}
