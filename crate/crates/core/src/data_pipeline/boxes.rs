use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::PreprocessConfig;
use crate::core_ops::Disease;
use crate::{Error, Result};

/// Axis-aligned box `(x, y, width, height)`; covers `[x, x+w) × [y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// One ground-truth box in original-image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub disease: Disease,
    pub rect: Rect,
}

/// A ground-truth box mapped into the preprocessed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBox {
    pub image_id: String,
    pub disease: Disease,
    pub rect: Rect,
    /// The mapped box extended past the frame and was clipped.
    pub clipped: bool,
}

/// Reads `image id, disease, x, y, w, h` rows. A header row is skipped when
/// present; extra trailing columns are ignored.
pub fn load_boxes(path: &Path) -> Result<Vec<BoxAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(path, e.to_string()))?;
        let line = i + 1;
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let nums: Vec<Option<f64>> = (2..6).map(|c| rec.get(c).and_then(|v| v.trim().parse().ok())).collect();
        if i == 0 && nums.iter().all(Option::is_none) {
            continue;
        }
        let bad = |msg: String| Error::data(path, format!("line {line}: {msg}"));
        if rec.len() < 6 || nums.iter().any(Option::is_none) {
            return Err(bad("expected image id, disease, x, y, w, h".into()));
        }
        let [x, y, w, h] = [nums[0].unwrap(), nums[1].unwrap(), nums[2].unwrap(), nums[3].unwrap()];
        let disease = Disease::parse(&rec[1]).ok_or_else(|| bad(format!("unknown disease {:?}", &rec[1])))?;
        if !Disease::BOX_SET.contains(&disease) {
            return Err(bad(format!("{disease} has no box annotations in this benchmark")));
        }
        if !(w > 0.0 && h > 0.0) || x < 0.0 || y < 0.0 || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(bad(format!("invalid box {x},{y},{w},{h}")));
        }
        out.push(BoxAnnotation { image_id: rec[0].trim().to_string(), disease, rect: Rect::new(x, y, w, h) });
    }
    Ok(out)
}

/// Maps a box from an `orig_w×orig_h` image into the preprocessed frame:
/// scale by `resize/orig`, shift by the crop offset, clip to `[0, crop]`.
pub fn to_frame(ann: &BoxAnnotation, orig_w: u32, orig_h: u32, cfg: &PreprocessConfig) -> FrameBox {
    let sx = cfg.resize as f64 / orig_w as f64;
    let sy = cfg.resize as f64 / orig_h as f64;
    let off = cfg.crop_offset() as f64;
    let crop = cfg.crop as f64;
    let x0 = ann.rect.x * sx - off;
    let y0 = ann.rect.y * sy - off;
    let x1 = ann.rect.right() * sx - off;
    let y1 = ann.rect.bottom() * sy - off;
    let c = |v: f64| v.clamp(0.0, crop);
    let clipped = [x0, y0, x1, y1].iter().any(|&v| v < 0.0 || v > crop)
        || ann.rect.right() > orig_w as f64
        || ann.rect.bottom() > orig_h as f64;
    let (cx0, cy0, cx1, cy1) = (c(x0), c(y0), c(x1), c(y1));
    FrameBox {
        image_id: ann.image_id.clone(),
        disease: ann.disease,
        rect: Rect::new(cx0, cy0, cx1 - cx0, cy1 - cy0),
        clipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(x: f64, y: f64, w: f64, h: f64) -> BoxAnnotation {
        BoxAnnotation { image_id: "a.png".into(), disease: Disease::Mass, rect: Rect::new(x, y, w, h) }
    }

    #[test]
    fn full_image_box_fills_frame() {
        let f = to_frame(&ann(0.0, 0.0, 1024.0, 1024.0), 1024, 1024, &PreprocessConfig::default());
        assert_eq!(f.rect, Rect::new(0.0, 0.0, 224.0, 224.0));
        assert!(f.clipped);
    }

    #[test]
    fn interior_box_scales_and_shifts() {
        // 1024 → 256 is a factor 1/4; the 224 crop starts at 16.
        let f = to_frame(&ann(200.0, 400.0, 100.0, 80.0), 1024, 1024, &PreprocessConfig::default());
        assert_eq!(f.rect, Rect::new(34.0, 84.0, 25.0, 20.0));
        assert!(!f.clipped);
    }

    #[test]
    fn box_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(
            &p,
            "Image Index,Finding Label,Bbox [x,y,w,h],,,\n\
             0001.png,Infiltrate,10,20,30.5,40,,\n\
             0002.png,Atelectasis,1,2,3,4\n",
        )
        .unwrap();
        let b = load_boxes(&p).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].disease, Disease::Infiltration);
        assert_eq!(b[0].rect, Rect::new(10.0, 20.0, 30.5, 40.0));
        std::fs::write(&p, "0001.png,Edema,1,2,3,4\n").unwrap();
        assert!(matches!(load_boxes(&p), Err(Error::Data { .. })));
        std::fs::write(&p, "0001.png,Mass,1,2,0,4\n").unwrap();
        assert!(load_boxes(&p).is_err());
    }
}
