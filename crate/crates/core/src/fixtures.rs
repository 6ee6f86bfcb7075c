//! Synthetic desk-scale datasets: ellipse anatomy for the segmenter and
//! blob findings for the classifier, with known masks and boxes.

use std::fmt::Write as _;
use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::core_ops::{merge_masks, BinaryMask, Disease, LabelVector};
use crate::data_pipeline::{preprocess, save_mask, PreprocessConfig, Rect};
use crate::segmentation::{SegSample, STRUCTURES};
use crate::{Error, Result};

/// The findings drawn into classification fixtures.
pub const ACTIVE_CLASSES: [Disease; 3] = [Disease::Atelectasis, Disease::Effusion, Disease::Nodule];

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Layout in units of a 64-pixel image, scaled to `size`.
struct Anatomy {
    body: Ellipse,
    /// Left lung (image right), right lung (image left), heart.
    parts: [Ellipse; 3],
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    rng.random_range(-amount..=amount)
}

fn anatomy(size: usize, rng: &mut ChaCha8Rng) -> Anatomy {
    let s = size as f64 / 64.0;
    let mut e = |cx: f64, cy: f64, rx: f64, ry: f64, j: f64| Ellipse {
        cx: (cx + jitter(rng, j)) * s,
        cy: (cy + jitter(rng, j)) * s,
        rx: (rx + jitter(rng, j / 2.0)) * s,
        ry: (ry + jitter(rng, j / 2.0)) * s,
    };
    let body = e(32.0, 34.0, 28.0, 29.0, 1.0);
    let left = e(44.0, 29.0, 8.0, 14.0, 2.0);
    let right = e(20.0, 29.0, 8.0, 14.0, 2.0);
    let heart = e(36.0, 50.0, 9.0, 6.0, 1.5);
    Anatomy { body, parts: [left, right, heart] }
}

/// One raw fixture image with its per-structure masks.
pub struct RawAnatomy {
    pub image: GrayImage,
    pub masks: [BinaryMask; 3],
}

fn draw(size: usize, a: &Anatomy, rng: &mut ChaCha8Rng, extra: impl Fn(usize, usize) -> Option<f64>) -> RawAnatomy {
    let lungs = |x, y| a.parts[0].contains(x, y) || a.parts[1].contains(x, y);
    let masks = [
        BinaryMask::from_fn(size, size, |y, x| a.parts[0].contains(x, y)),
        BinaryMask::from_fn(size, size, |y, x| a.parts[1].contains(x, y)),
        BinaryMask::from_fn(size, size, |y, x| a.parts[2].contains(x, y) && !lungs(x, y)),
    ];
    let image = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let base = if let Some(v) = extra(x, y) {
            v
        } else if masks[2].get(y, x) {
            185.0
        } else if lungs(x, y) {
            45.0
        } else if a.body.contains(x, y) {
            115.0
        } else {
            10.0
        };
        Luma([(base + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0) as u8])
    });
    RawAnatomy { image, masks }
}

/// Ellipse anatomy images of side `size`.
pub fn seg_fixture(n: usize, size: usize, seed: u64) -> Vec<RawAnatomy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a = anatomy(size, &mut rng);
            draw(size, &a, &mut rng, |_, _| None)
        })
        .collect()
}

/// Preprocessed segmentation samples built in memory.
pub fn seg_samples(n: usize, size: usize, seed: u64, cfg: &PreprocessConfig) -> Result<Vec<SegSample>> {
    if cfg.resize != size || cfg.crop != size {
        return Err(Error::Config(format!("in-memory fixture needs resize = crop = {size}")));
    }
    seg_fixture(n, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, raw)| {
            let image = preprocess(&DynamicImage::ImageLuma8(raw.image), cfg)?;
            SegSample::new(format!("seg{i:03}"), image, raw.masks)
        })
        .collect()
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    cxr_tensor::io::atomic_write(path, &bytes)?;
    Ok(())
}

/// Writes the segmentation fixture as `images/` plus `masks/<structure>/`.
pub fn write_seg_fixture(dir: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    for (i, raw) in seg_fixture(n, size, seed).into_iter().enumerate() {
        let id = format!("seg{i:03}");
        save_png(&raw.image, &dir.join("images").join(format!("{id}.png")))?;
        for (s, m) in STRUCTURES.iter().zip(&raw.masks) {
            save_mask(m, &dir.join("masks").join(s).join(format!("{id}.png")))?;
        }
    }
    Ok(())
}

/// One classification fixture image.
pub struct ClsItem {
    pub id: String,
    pub image: GrayImage,
    pub labels: LabelVector,
    /// Union of lungs and heart.
    pub mask: BinaryMask,
    /// Finding boxes in image pixels.
    pub boxes: Vec<(Disease, Rect)>,
}

/// Anatomy images with bright disks for the active findings. Sample `i`
/// carries finding `k` when bit `k` of `i mod 8` is set, so every
/// combination appears equally often.
pub fn cls_fixture(n: usize, size: usize, seed: u64) -> Vec<ClsItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64 / 64.0;
    (0..n)
        .map(|i| {
            let a = anatomy(size, &mut rng);
            let pattern = i % 8;
            // blob centres sit inside the lung they belong to
            let spots = [
                (a.parts[1].cx + jitter(&mut rng, 1.5) * s, a.parts[1].cy + (jitter(&mut rng, 2.0) - 3.0) * s, 4.5 * s),
                (a.parts[0].cx + jitter(&mut rng, 1.5) * s, a.parts[0].cy + (jitter(&mut rng, 1.5) + 6.0) * s, 4.0 * s),
                (a.parts[0].cx + jitter(&mut rng, 1.0) * s, a.parts[0].cy + (jitter(&mut rng, 1.0) - 7.0) * s, 2.5 * s),
            ];
            let present: Vec<usize> = (0..3).filter(|k| pattern & (1 << k) != 0).collect();
            let disks: Vec<Ellipse> =
                present.iter().map(|&k| Ellipse { cx: spots[k].0, cy: spots[k].1, rx: spots[k].2, ry: spots[k].2 }).collect();
            let raw = draw(size, &a, &mut rng, |x, y| disks.iter().any(|d| d.contains(x, y)).then_some(235.0));
            let boxes = present
                .iter()
                .zip(&disks)
                .map(|(&k, d)| {
                    let pix: Vec<(usize, usize)> =
                        (0..size * size).map(|p| (p % size, p / size)).filter(|&(x, y)| d.contains(x, y)).collect();
                    let x0 = pix.iter().map(|p| p.0).min().unwrap_or(0);
                    let x1 = pix.iter().map(|p| p.0).max().unwrap_or(0);
                    let y0 = pix.iter().map(|p| p.1).min().unwrap_or(0);
                    let y1 = pix.iter().map(|p| p.1).max().unwrap_or(0);
                    (ACTIVE_CLASSES[k], Rect::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64))
                })
                .collect();
            let mask = merge_masks(&raw.masks).expect("three equal-size masks");
            ClsItem {
                id: format!("cls{i:03}.png"),
                image: raw.image,
                labels: LabelVector::from_diseases(present.iter().map(|&k| ACTIVE_CLASSES[k])),
                mask,
                boxes,
            }
        })
        .collect()
}

/// Writes the classification fixture: `images/`, `masks/` (the mask
/// cache), `labels.csv`, `train_list.txt`, `test_list.txt` and `boxes.csv`.
/// Both lists name every image, so evaluation runs on the training images.
pub fn write_cls_fixture(dir: &Path, items: &[ClsItem]) -> Result<()> {
    let mut labels = String::from("Image Index,Finding Labels,Patient ID\n");
    let mut list = String::new();
    let mut boxes = String::from("Image Index,Finding Label,x,y,w,h\n");
    for (i, it) in items.iter().enumerate() {
        save_png(&it.image, &dir.join("images").join(&it.id))?;
        save_mask(&it.mask, &dir.join("masks").join(&it.id))?;
        let _ = writeln!(labels, "{},{},p{i:03}", it.id, it.labels.to_label_string());
        let _ = writeln!(list, "{}", it.id);
        for (d, r) in &it.boxes {
            let _ = writeln!(boxes, "{},{},{},{},{},{}", it.id, d.token(), r.x, r.y, r.w, r.h);
        }
    }
    for (name, text) in
        [("labels.csv", &labels), ("train_list.txt", &list), ("test_list.txt", &list), ("boxes.csv", &boxes)]
    {
        cxr_tensor::io::atomic_write(&dir.join(name), text.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_ops::downsample_mask;

    #[test]
    fn seg_structures_are_disjoint_and_non_empty() {
        for raw in seg_fixture(8, 64, 1) {
            for m in &raw.masks {
                assert!(m.count() > 50);
            }
            let total: usize = raw.masks.iter().map(BinaryMask::count).sum();
            assert_eq!(merge_masks(&raw.masks).unwrap().count(), total);
        }
    }

    #[test]
    fn cls_masks_zero_enough_feature_positions() {
        for it in cls_fixture(16, 64, 2) {
            let m = downsample_mask(&it.mask, 8, 8).unwrap();
            assert!(m.count() as f64 <= 0.7 * 64.0, "{} of 64 feature cells kept", m.count());
            assert!(!m.is_empty());
        }
    }

    #[test]
    fn cls_boxes_lie_inside_the_anatomy() {
        for it in cls_fixture(16, 64, 3) {
            assert_eq!(it.boxes.len(), it.labels.diseases().count());
            for (_, r) in &it.boxes {
                let (cx, cy) = ((r.x + r.w / 2.0) as usize, (r.y + r.h / 2.0) as usize);
                assert!(it.mask.get(cy, cx));
            }
        }
    }
}
