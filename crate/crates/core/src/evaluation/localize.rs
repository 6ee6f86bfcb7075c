use std::collections::VecDeque;
use std::fmt::Write as _;

use cxr_tensor::Tensor;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::core_ops::{Disease, FeatureMap, ProbabilityMap};
use crate::data_pipeline::{FrameBox, Rect};
use crate::{Error, Result};

/// Class activation map before normalisation:
/// `out[j,k] = Σ_i weights[class,i] · F[i,j,k]`, returned as `(h, w, values)`.
pub fn cam_raw(feature: &FeatureMap<f32>, head_weights: &Tensor<f32>, class: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (rows, cols) = head_weights.dims2();
    if class >= rows {
        return Err(Error::contract(format!("class index {class} out of range 0..{rows}")));
    }
    let c = feature.channels();
    if cols != c {
        return Err(Error::contract(format!("head has {cols} inputs, feature map has {c} channels")));
    }
    let (h, w) = (feature.height(), feature.width());
    let wrow = &head_weights.data()[class * cols..(class + 1) * cols];
    let mut out = vec![0.0f64; h * w];
    for (i, &wi) in wrow.iter().enumerate() {
        let plane = &feature.tensor().data()[i * h * w..(i + 1) * h * w];
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += wi as f64 * v as f64;
        }
    }
    Ok((h, w, out))
}

/// Min-max normalises to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_heatmap(h: usize, w: usize, values: &[f64]) -> ProbabilityMap {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 && span.is_finite() {
        values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; values.len()]
    };
    ProbabilityMap::new(h, w, data).expect("normalised values lie in [0, 1]")
}

/// Normalised class activation map.
pub fn cam(feature: &FeatureMap<f32>, head_weights: &Tensor<f32>, class: usize) -> Result<ProbabilityMap> {
    let (h, w, raw) = cam_raw(feature, head_weights, class)?;
    Ok(normalize_heatmap(h, w, &raw))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatBox {
    pub disease: Disease,
    pub rect: Rect,
    /// Maximum of the upsampled heatmap.
    pub peak: f64,
}

/// Bilinear upsampling of a heatmap to `frame×frame`.
pub fn upsample(heat: &ProbabilityMap, frame: usize) -> Vec<f32> {
    let (h, w) = heat.dims();
    if (h, w) == (frame, frame) {
        return heat.data().iter().map(|&v| v as f32).collect();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, heat.data().iter().map(|&v| v as f32).collect())
            .expect("heatmap length matches dims");
    imageops::resize(&buf, frame as u32, frame as u32, FilterType::Triangle).into_raw()
}

/// Bounding box of the largest 4-connected region of pixels at or above
/// `fraction · max` after upsampling to the frame. Ties between equally
/// large regions go to the one found first in raster order.
pub fn heatmap_to_box(heat: &ProbabilityMap, frame: usize, fraction: f64, disease: Disease) -> Result<HeatBox> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("threshold fraction {fraction} outside [0, 1]")));
    }
    let up = upsample(heat, frame);
    let (argmax, peak) = up
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let cut = (fraction * peak as f64) as f32;
    let on: Vec<bool> = up.iter().map(|&v| v >= cut).collect();
    let mut seen = vec![false; on.len()];
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut queue = VecDeque::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        let mut bb = [usize::MAX, usize::MAX, 0, 0]; // x0, y0, x1, y1 inclusive
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / frame, p % frame);
            bb = [bb[0].min(x), bb[1].min(y), bb[2].max(x), bb[3].max(y)];
            let mut visit = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < frame {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - frame);
            }
            if y + 1 < frame {
                visit(p + frame);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bb));
        }
    }
    let rect = match best {
        Some((_, [x0, y0, x1, y1])) => Rect::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64),
        None => Rect::new((argmax % frame) as f64, (argmax / frame) as f64, 1.0, 1.0),
    };
    Ok(HeatBox { disease, rect, peak: peak as f64 })
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Heatmap whose foreground is exactly the ground-truth box, at frame
/// resolution. Used to self-test the box extraction path.
pub fn oracle_feature(gt: &Rect, frame: usize) -> FeatureMap<f32> {
    let data = (0..frame * frame)
        .map(|i| {
            let (y, x) = ((i / frame) as f64 + 0.5, (i % frame) as f64 + 0.5);
            if x > gt.x && x < gt.right() && y > gt.y && y < gt.bottom() {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    FeatureMap::new(Tensor::new(&[1, frame, frame], data)).expect("finite oracle map")
}

/// One scored ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationItem {
    pub gt: FrameBox,
    pub predicted: HeatBox,
    pub iou: f64,
}

/// Mean IoU per box-set disease for one model (one table row).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationRow {
    pub label: String,
    pub per_disease: [Option<f64>; 8],
    pub items: Vec<LocalizationItem>,
    /// Ground-truth boxes whose image could not be scored.
    pub skipped: usize,
}

impl LocalizationRow {
    pub fn from_items(label: &str, items: Vec<LocalizationItem>, skipped: usize) -> Self {
        let mut sums = [(0.0, 0usize); 8];
        for it in &items {
            if let Some(k) = Disease::BOX_SET.iter().position(|d| *d == it.gt.disease) {
                sums[k].0 += it.iou;
                sums[k].1 += 1;
            }
        }
        let per_disease = sums.map(|(s, n)| (n > 0).then(|| s / n as f64));
        Self { label: label.to_string(), per_disease, items, skipped }
    }

    /// Mean over diseases that had at least one box.
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_disease.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Scores every ground-truth box against the box extracted from the
/// heatmap `heatmap_for(gt)`. `Ok(None)` from the callback means the image
/// was unavailable and the box is skipped.
pub fn evaluate_localization(
    label: &str,
    gts: &[FrameBox],
    frame: usize,
    fraction: f64,
    mut heatmap_for: impl FnMut(&FrameBox) -> Result<Option<ProbabilityMap>>,
) -> Result<LocalizationRow> {
    let mut items = Vec::with_capacity(gts.len());
    let mut skipped = 0;
    for gt in gts {
        match heatmap_for(gt)? {
            Some(heat) => {
                let predicted = heatmap_to_box(&heat, frame, fraction, gt.disease)?;
                let score = iou(&predicted.rect, &gt.rect);
                items.push(LocalizationItem { gt: gt.clone(), predicted, iou: score });
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{label}: skipped {skipped} boxes with missing images");
    }
    Ok(LocalizationRow::from_items(label, items, skipped))
}

/// Tab-separated IoU table, one row per model.
pub fn localization_table(rows: &[LocalizationRow]) -> String {
    let mut s = String::from("model");
    for d in Disease::BOX_SET {
        let _ = write!(s, "\t{}", d.name());
    }
    s.push_str("\tMean\tscored\tskipped\n");
    let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into());
    for r in rows {
        s.push_str(&r.label);
        for v in r.per_disease {
            let _ = write!(s, "\t{}", f(v));
        }
        let _ = writeln!(s, "\t{}\t{}\t{}", f(r.mean()), r.items.len(), r.skipped);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Rect::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &Rect::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn cam_examples() {
        let f = FeatureMap::new(Tensor::from_fn(&[3, 2, 2], |i| i as f32)).unwrap();
        let mut w = Tensor::zeros(&[14, 3]);
        w.data_mut()[0] = 1.0;
        let m = cam(&f, &w, 0).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let zero = FeatureMap::new(Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(cam(&zero, &w, 0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(cam(&f, &w, 14), Err(Error::Contract(_))));
    }

    #[test]
    fn single_cell_upsample_footprint() {
        // Cell 3 of 7 covers frame pixels 96..128 at scale 32; bilinear
        // weights exceed half the peak exactly on that span.
        let mut v = vec![0.0; 49];
        v[3 * 7 + 3] = 1.0;
        let heat = ProbabilityMap::new(7, 7, v).unwrap();
        let b = heatmap_to_box(&heat, 224, 0.5, Disease::Mass).unwrap();
        assert_eq!(b.rect, Rect::new(96.0, 96.0, 32.0, 32.0));
    }

    #[test]
    fn uniform_heatmap_gives_full_frame() {
        let heat = ProbabilityMap::uniform(7, 7, 0.0).unwrap();
        let b = heatmap_to_box(&heat, 224, 0.5, Disease::Mass).unwrap();
        assert_eq!(b.rect, Rect::new(0.0, 0.0, 224.0, 224.0));
    }

    #[test]
    fn largest_component_wins() {
        let mut v = vec![0.0; 100];
        for i in 0..5 {
            v[i] = 1.0; // 5 pixels on row 0
        }
        for r in 4..8 {
            for c in 3..8 {
                v[r * 10 + c] = 1.0; // 20 pixels
            }
        }
        let heat = ProbabilityMap::new(10, 10, v).unwrap();
        let b = heatmap_to_box(&heat, 10, 0.5, Disease::Nodule).unwrap();
        assert_eq!(b.rect, Rect::new(3.0, 4.0, 5.0, 4.0));
    }

    #[test]
    fn oracle_round_trip_is_exact() {
        let gt = Rect::new(10.0, 20.0, 15.0, 9.0);
        let f = oracle_feature(&gt, 64);
        let mut w = Tensor::zeros(&[14, 1]);
        w.data_mut()[4] = 1.0;
        let heat = cam(&f, &w, 4).unwrap();
        let b = heatmap_to_box(&heat, 64, 0.5, Disease::Mass).unwrap();
        assert_eq!(iou(&b.rect, &gt), 1.0);
    }

    #[test]
    fn empty_annotation_list() {
        let row = evaluate_localization("m", &[], 224, 0.5, |_| Ok(None)).unwrap();
        assert!(row.items.is_empty());
        assert_eq!(row.mean(), None);
    }
}
