use std::path::Path;

use image::{Rgb, RgbImage};

use super::metrics::RocPoint;
use crate::data_pipeline::{ImageTensor, PreprocessConfig, Rect};
use crate::{Error, Result};

pub const GT_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([230, 30, 30]);

const PALETTE: [[u8; 3]; 14] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [0, 0, 128],
    [128, 0, 0],
    [0, 128, 128],
    [80, 80, 0],
];

/// Grey rendering of a preprocessed image (first channel, normalisation undone).
pub fn image_to_rgb(image: &ImageTensor, cfg: &PreprocessConfig) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let (m, s) = (cfg.mean[0] as f32, cfg.std[0] as f32);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image.tensor().data()[y as usize * w + x as usize] * s + m;
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Outline of a box, one pixel wide.
pub fn draw_rect(img: &mut RgbImage, r: &Rect, c: Rgb<u8>) {
    let (x0, y0) = (r.x.round() as i64, r.y.round() as i64);
    let (x1, y1) = ((r.right().round() as i64 - 1).max(x0), (r.bottom().round() as i64 - 1).max(y0));
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

fn draw_line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Image with the ground-truth box in green and the predicted box in red.
pub fn overlay(image: &ImageTensor, cfg: &PreprocessConfig, gt: &Rect, predicted: &Rect) -> RgbImage {
    let mut img = image_to_rgb(image, cfg);
    draw_rect(&mut img, gt, GT_COLOR);
    draw_rect(&mut img, predicted, PRED_COLOR);
    img
}

/// All ROC curves on one white canvas: x = 1 − specificity, y = sensitivity,
/// with the chance diagonal in grey. Colours follow the disease order.
pub fn roc_plot(curves: &[(usize, Vec<RocPoint>)], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let margin = (size / 16) as i64;
    let span = size as i64 - 2 * margin;
    let to_px = |fpr: f64, tpr: f64| {
        (margin + (fpr * span as f64).round() as i64, size as i64 - 1 - margin - (tpr * span as f64).round() as i64)
    };
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), black);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), black);
    draw_line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([200, 200, 200]));
    for (class, curve) in curves {
        let c = Rgb(PALETTE[class % PALETTE.len()]);
        for w in curve.windows(2) {
            draw_line(
                &mut img,
                to_px(1.0 - w[0].specificity, w[0].sensitivity),
                to_px(1.0 - w[1].specificity, w[1].sensitivity),
                c,
            );
        }
    }
    img
}

/// PNG-encodes and atomically writes an RGB raster.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    cxr_tensor::io::atomic_write(path, &bytes)?;
    Ok(())
}
