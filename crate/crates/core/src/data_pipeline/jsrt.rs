use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::image::{annotation_to_mask, load_image, preprocess, PreprocessConfig};
use crate::segmentation::{SegSample, STRUCTURES};
use crate::{Error, Result};

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads a segmentation set laid out as `images/<id>.*` plus
/// `masks/{left_lung,right_lung,heart}/<id>.*`. Annotation pixels at or
/// above 128 are foreground. Images and masks go through the same
/// resize/crop so they stay aligned.
pub fn load_seg_dataset(root: &Path, cfg: &PreprocessConfig) -> Result<Vec<SegSample>> {
    let images = stems(&root.join("images"))?;
    let masks: Vec<_> = STRUCTURES
        .iter()
        .map(|s| stems(&root.join("masks").join(s)))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(images.len());
    for (id, img_path) in &images {
        let mut parts = Vec::with_capacity(3);
        for (s, m) in STRUCTURES.iter().zip(&masks) {
            let p = m.get(id).ok_or_else(|| Error::data(img_path, format!("no {s} annotation for {id}")))?;
            let ann = load_image(p)?;
            parts.push(annotation_to_mask(&ann, cfg)?);
        }
        let image = preprocess(&load_image(img_path)?, cfg)?;
        out.push(SegSample::new(id.clone(), image, [parts[0].clone(), parts[1].clone(), parts[2].clone()])?);
    }
    if out.is_empty() {
        return Err(Error::data(root.join("images"), "no images found"));
    }
    Ok(out)
}
