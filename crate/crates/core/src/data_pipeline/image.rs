use std::path::Path;

use cxr_tensor::Tensor;
use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::core_ops::BinaryMask;
use crate::{Error, Result};

/// A preprocessed `C×H×W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor<f32>,
}

impl ImageTensor {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        match tensor.shape() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => {}
            s => return Err(Error::contract(format!("image tensor must be c×h×w with positive dims, got {s:?}"))),
        }
        if !tensor.all_finite() {
            return Err(Error::contract("image tensor contains non-finite values"));
        }
        Ok(Self { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    /// The image with a leading batch axis of 1.
    pub fn batched(&self) -> Tensor<f32> {
        self.tensor.clone().reshape(&[1, self.channels(), self.height(), self.width()])
    }

    /// Stacks images of identical shape into `N×C×H×W`.
    pub fn batch(images: &[&ImageTensor]) -> Tensor<f32> {
        let parts: Vec<_> = images.iter().map(|i| i.batched()).collect();
        Tensor::stack(&parts)
    }
}

/// Resize, center crop and per-channel normalisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Side length after the (square) resize.
    pub resize: usize,
    /// Side length of the centered crop taken from the resized image.
    pub crop: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { resize: 256, crop: 224, mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!("crop {} must be in 1..={}", self.crop, self.resize)));
        }
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalisation mean must be finite and std positive".into()));
        }
        Ok(())
    }

    /// Top-left corner of the crop inside the resized image.
    pub fn crop_offset(&self) -> usize {
        (self.resize - self.crop) / 2
    }
}

/// Decodes an image file.
pub fn load_image(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

type Plane = ImageBuffer<Luma<f32>, Vec<f32>>;

fn plane_from(w: u32, h: u32, data: Vec<f32>) -> Plane {
    ImageBuffer::from_raw(w, h, data).expect("plane length matches dims")
}

fn scaled<S: Copy + Into<f32>>(samples: &[S], stride: usize, offset: usize, scale: f32) -> Vec<f32> {
    samples.iter().skip(offset).step_by(stride).map(|&v| v.into() * scale).collect()
}

/// Splits an image into one (grey) or three (colour) planes scaled to `[0, 1]`.
/// 8-bit samples are divided by 255; 16-bit samples by the image's own maximum.
fn unit_planes(img: &DynamicImage) -> Vec<Plane> {
    let (w, h) = (img.width(), img.height());
    let max_scale = |m: u16| if m == 0 { 0.0 } else { 1.0 / m as f32 };
    match img {
        DynamicImage::ImageLuma8(b) => vec![plane_from(w, h, scaled(b.as_raw(), 1, 0, 1.0 / 255.0))],
        DynamicImage::ImageLumaA8(b) => vec![plane_from(w, h, scaled(b.as_raw(), 2, 0, 1.0 / 255.0))],
        DynamicImage::ImageLuma16(b) => {
            let s = max_scale(b.as_raw().iter().copied().max().unwrap_or(0));
            vec![plane_from(w, h, scaled(b.as_raw(), 1, 0, s))]
        }
        DynamicImage::ImageLumaA16(b) => {
            let s = max_scale(b.as_raw().iter().step_by(2).copied().max().unwrap_or(0));
            vec![plane_from(w, h, scaled(b.as_raw(), 2, 0, s))]
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            let s = max_scale(rgb.as_raw().iter().copied().max().unwrap_or(0));
            (0..3).map(|c| plane_from(w, h, scaled(rgb.as_raw(), 3, c, s))).collect()
        }
        _ => {
            let rgb = img.to_rgb8();
            (0..3).map(|c| plane_from(w, h, scaled(rgb.as_raw(), 3, c, 1.0 / 255.0))).collect()
        }
    }
}

/// Bilinear resize to `resize×resize` followed by the centered crop.
fn resize_crop(plane: &Plane, cfg: &PreprocessConfig) -> Vec<f32> {
    let r = cfg.resize as u32;
    let resized = imageops::resize(plane, r, r, FilterType::Triangle);
    let off = cfg.crop_offset();
    let mut out = Vec::with_capacity(cfg.crop * cfg.crop);
    for y in 0..cfg.crop {
        let row = (y + off) * cfg.resize + off;
        out.extend_from_slice(&resized.as_raw()[row..row + cfg.crop]);
    }
    out
}

/// Resize, crop, replicate grey to three channels and normalise.
pub fn preprocess(img: &DynamicImage, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::contract("cannot preprocess an empty image"));
    }
    let planes: Vec<Vec<f32>> = unit_planes(img).iter().map(|p| resize_crop(p, cfg)).collect();
    let n = cfg.crop * cfg.crop;
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        let src = &planes[if planes.len() == 1 { 0 } else { c }];
        let (m, s) = (cfg.mean[c] as f32, cfg.std[c] as f32);
        data.extend(src.iter().map(|&v| (v - m) / s));
    }
    ImageTensor::new(Tensor::new(&[3, cfg.crop, cfg.crop], data))
}

/// Loads and preprocesses an image file.
pub fn load_preprocessed(path: &Path, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    preprocess(&load_image(path)?, cfg)
}

/// Brings an 8-bit annotation image into the preprocessed frame and
/// thresholds it: a pixel is foreground when its resampled value is at
/// least 128.
pub fn annotation_to_mask(img: &DynamicImage, cfg: &PreprocessConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let grey = img.to_luma8();
    let plane = plane_from(grey.width(), grey.height(), grey.as_raw().iter().map(|&v| v as f32).collect());
    let data = resize_crop(&plane, cfg).iter().map(|&v| u8::from(v >= 128.0)).collect();
    BinaryMask::new(cfg.crop, cfg.crop, data)
}

/// Writes a mask as an 8-bit PNG (0 / 255).
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let img = image::GrayImage::from_raw(w as u32, h as u32, mask.data().iter().map(|&v| v * 255).collect())
        .expect("mask length matches dims");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    cxr_tensor::io::atomic_write(path, &bytes)?;
    Ok(())
}

/// Reads a mask PNG written by [`save_mask`] (any pixel ≥ 128 is foreground).
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let grey = load_image(path)?.to_luma8();
    BinaryMask::new(
        grey.height() as usize,
        grey.width() as usize,
        grey.as_raw().iter().map(|&v| u8::from(v >= 128)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    #[test]
    fn output_shape_is_three_by_crop() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(300, 280, Luma([7])));
        let t = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(t.tensor().shape(), &[3, 224, 224]);
        let rgb = DynamicImage::ImageRgb8(RgbImage::new(100, 50));
        assert_eq!(preprocess(&rgb, &PreprocessConfig::default()).unwrap().tensor().shape(), &[3, 224, 224]);
    }

    #[test]
    fn constant_image_gives_affine_constant() {
        let cfg = PreprocessConfig::default();
        let v = 200u8;
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(512, 512, Luma([v])));
        let t = preprocess(&img, &cfg).unwrap();
        for c in 0..3 {
            let want = ((v as f64 / 255.0 - cfg.mean[c]) / cfg.std[c]) as f32;
            let plane = &t.tensor().data()[c * 224 * 224..(c + 1) * 224 * 224];
            assert!(plane.iter().all(|&x| (x - want).abs() < 1e-5), "channel {c}");
        }
    }

    #[test]
    fn sixteen_bit_is_scaled_by_its_max() {
        let cfg = PreprocessConfig { resize: 4, crop: 4, mean: [0.0; 3], std: [1.0; 3] };
        let mut b = ImageBuffer::<Luma<u16>, Vec<u16>>::new(4, 4);
        b.put_pixel(0, 0, Luma([4000]));
        b.put_pixel(1, 0, Luma([1000]));
        let t = preprocess(&DynamicImage::ImageLuma16(b), &cfg).unwrap();
        assert_eq!(t.tensor().data()[0], 1.0);
        assert_eq!(t.tensor().data()[1], 0.25);
    }

    #[test]
    fn corners_are_cropped_away() {
        // Bright 24-pixel corner blocks on a dark 512 image vanish after the
        // 256 resize and 224 crop, which keeps source rows/cols 32..480.
        let img = GrayImage::from_fn(512, 512, |x, y| {
            let edge = |v: u32| !(24..488).contains(&v);
            Luma([if edge(x) && edge(y) { 255 } else { 0 }])
        });
        let t = preprocess(&DynamicImage::ImageLuma8(img), &PreprocessConfig::default()).unwrap();
        let floor = ((0.0 - 0.485) / 0.229) as f32;
        assert!(t.tensor().data()[..224 * 224].iter().all(|&v| (v - floor).abs() < 1e-6));
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(5, 7, |r, c| (r + c) % 3 == 0);
        let p = dir.path().join("m.png");
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn unreadable_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
