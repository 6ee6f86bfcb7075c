use std::path::{Path, PathBuf};

use cxr_core::attention::AttentionConfig;
use cxr_core::classifier::ClassifierConfig;
use cxr_core::data_pipeline::{ManifestSources, PreprocessConfig};
use cxr_core::segmentation::SegConfig;
use cxr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV with image ids, pipe-separated findings and patient ids.
    pub labels: Option<PathBuf>,
    pub train_list: Option<PathBuf>,
    pub test_list: Option<PathBuf>,
    pub boxes: Option<PathBuf>,
    pub images: Option<PathBuf>,
    /// Segmentation set: `images/` plus `masks/{left_lung,right_lung,heart}/`.
    pub seg_data: Option<PathBuf>,
    /// Directory of per-image anatomy masks; misses are segmented and stored.
    pub mask_cache: Option<PathBuf>,
    /// Share of each disease moved to validation. Zero validates on the
    /// training images themselves.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            labels: None,
            train_list: None,
            test_list: None,
            boxes: None,
            images: None,
            seg_data: None,
            mask_cache: None,
            val_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn sources(&self) -> ManifestSources {
        ManifestSources {
            labels: self.labels.clone(),
            train_list: self.train_list.clone(),
            test_list: self.test_list.clone(),
            boxes: self.boxes.clone(),
            images: self.images.clone(),
        }
    }
}

/// Which feature map class activation maps read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamSource {
    /// The mask-weighted map.
    Local,
    /// The backbone output before weighting.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Heatmap pixels at or above this share of the peak form the box.
    pub threshold_fraction: f64,
    pub cam_source: CamSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold_fraction: 0.5, cam_source: CamSource::Local }
    }
}

/// Everything one invocation needs. Written beside every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random choice; copied into the component configs.
    pub seed: u64,
    pub out: PathBuf,
    /// Require the label files to reproduce the benchmark split counts.
    pub strict_counts: bool,
    pub deterministic: bool,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub attention: AttentionConfig,
    pub segmentation: SegConfig,
    pub classifier: ClassifierConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            strict_counts: false,
            deterministic: false,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            attention: AttentionConfig::default(),
            segmentation: SegConfig::default(),
            classifier: ClassifierConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut cfg.data;
        for p in [
            &mut d.labels,
            &mut d.train_list,
            &mut d.test_list,
            &mut d.boxes,
            &mut d.images,
            &mut d.seg_data,
            &mut d.mask_cache,
            &mut cfg.classifier.pretrained,
        ] {
            rebase(base, p);
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    /// Copies the global seed into the components and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.segmentation.seed = self.seed;
        self.classifier.seed = self.seed;
        self.preprocess.validate()?;
        self.attention.validate()?;
        self.segmentation.validate()?;
        self.classifier.validate()?;
        if self.classifier.image_size != self.preprocess.crop {
            return Err(Error::Config(format!(
                "classifier image_size {} differs from the preprocessing crop {}",
                self.classifier.image_size, self.preprocess.crop
            )));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.data.val_fraction)));
        }
        let f = self.evaluation.threshold_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("threshold_fraction {f} outside (0, 1]")));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap().resolve().unwrap();
        assert_eq!(c.classifier.lr, 1e-3);
        assert_eq!(c.classifier.batch_size, 512);
        assert_eq!(c.preprocess.crop, 224);
        assert_eq!(c.evaluation.threshold_fraction, 0.5);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[classifier]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::parse("[data]\nlabel = 'x'").is_err());
    }

    #[test]
    fn seed_reaches_components() {
        let c = RunConfig::parse("seed = 9").unwrap().resolve().unwrap();
        assert_eq!((c.segmentation.seed, c.classifier.seed), (9, 9));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "out = 'o'\n[data]\nlabels = 'l.csv'\nimages = '/abs'\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.out, dir.path().join("o"));
        assert_eq!(c.data.labels, Some(dir.path().join("l.csv")));
        assert_eq!(c.data.images, Some(PathBuf::from("/abs")));
    }

    #[test]
    fn serialised_config_parses_back() {
        let c = RunConfig::parse("seed = 4\n[data]\nlabels = 'a'").unwrap().resolve().unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn mismatched_image_size_is_rejected() {
        assert!(RunConfig::parse("[classifier]\nimage_size = 64").unwrap().resolve().is_err());
    }
}
