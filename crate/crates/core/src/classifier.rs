//! End-to-end classifier: attention gate, backbone, anatomical feature
//! weighting, channel-wise average pooling and a linear 14-way head.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cxr_tensor::io::{load_tensors, save_tensors};
use cxr_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MultiScaleAttention};
use crate::backbone::{self, Backbone, BackboneKind};
use crate::core_ops::{
    bce_loss_slices, downsample_mask, pool_mask, BinaryMask, Disease, FeatureMap, LabelVector, ProbabilityMap,
    ProbabilityVector, BCE_EPS, NUM_CLASSES,
};
use crate::data_pipeline::{load_mask, load_preprocessed, save_mask, DatasetManifest, ImageTensor, ManifestEntry, PreprocessConfig};
use crate::evaluation::MetricReport;
use crate::nn::{apply_buffer_updates, Ctx, Linear};
use crate::segmentation::Segmenter;
use crate::{epoch_rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: BackboneKind,
    /// ImageNet weights for the densenet backbone (safetensors). Random
    /// initialisation when absent.
    pub pretrained: Option<PathBuf>,
    pub image_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Weight features by the pooled mask fraction instead of the
    /// re-binarised mask.
    pub mask_soft: bool,
    /// Gate the image with the multi-scale attention module first.
    pub use_attention: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Densenet121,
            pretrained: None,
            image_size: 224,
            batch_size: 512,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 50,
            seed: 0,
            mask_soft: false,
            use_attention: true,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("classifier batch size and epochs must be positive".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("classifier lr and weight decay must be non-negative".into());
        }
        let min = match self.backbone {
            BackboneKind::Densenet121 => 32,
            BackboneKind::Tiny => 8,
        };
        if self.image_size < min || self.image_size % min != 0 {
            return bad(format!("image size {} must be a positive multiple of {min} for this backbone", self.image_size));
        }
        if self.pretrained.is_some() && self.backbone != BackboneKind::Densenet121 {
            return bad("pretrained weights are only available for the densenet121 backbone".into());
        }
        Ok(())
    }
}

/// Which spatial weights multiply the final feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Lung/heart masks from the source.
    Anatomical,
    /// Every position kept, but the weighting step still runs.
    AllOnes,
    /// Weighting skipped entirely.
    Off,
}

/// The assembled network. Parameters live in a separate [`ParamStore`].
pub struct Classifier {
    config: ClassifierConfig,
    attention: Option<MultiScaleAttention>,
    backbone: Box<dyn Backbone>,
    head: Linear,
}

/// Intermediate tensors of one forward pass.
pub struct Forward<'t> {
    /// `N×14` sigmoid outputs.
    pub probs: Var<'t, f32>,
    /// Backbone output `F_g`, `N×C×h×w`.
    pub global: Var<'t, f32>,
    /// Weighted map `F_l` (equal to `global` when weighting is off).
    pub local: Var<'t, f32>,
    /// Attention gate `N×1×S×S`, when attention is on.
    pub gate: Option<Var<'t, f32>>,
}

impl Classifier {
    /// Registers attention (`attention.*`), backbone (`backbone.*`) and head
    /// (`head.*`) parameters. Pretrained weights are not loaded here.
    pub fn new(store: &mut ParamStore<f32>, cfg: &ClassifierConfig, att: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let attention = if cfg.use_attention {
            Some(MultiScaleAttention::new(store, "attention", att, 3, &mut rng)?)
        } else {
            None
        };
        let backbone = backbone::build(cfg.backbone, store, cfg.seed.wrapping_add(1));
        let mut head_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        let head = Linear::new(store, "head", backbone.out_channels(), NUM_CLASSES, &mut head_rng);
        Ok(Self { config: cfg.clone(), attention, backbone, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Side of the square final feature map.
    pub fn feature_size(&self) -> usize {
        self.backbone.feature_size(self.config.image_size)
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.out_channels()
    }

    /// Head weights `14×C`, used for class activation maps.
    pub fn head_weights(&self, store: &ParamStore<f32>) -> Tensor<f32> {
        store.get(self.head.weight).clone()
    }

    /// `weights` is `N×1×h×w` on the feature grid; `None` skips weighting.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, f32>, images: Var<'t, f32>, weights: Option<Var<'t, f32>>) -> Forward<'t> {
        let (x, gate) = match &self.attention {
            Some(a) => {
                let (gated, gate) = a.forward(ctx, images);
                (gated, Some(gate))
            }
            None => (images, None),
        };
        let global = self.backbone.forward(ctx, x);
        let local = match weights {
            Some(w) => global.mul_spatial(w),
            None => global,
        };
        let probs = self.head.forward(ctx, local.global_avg_pool()).sigmoid();
        Forward { probs, global, local, gate }
    }

    fn check_images(&self, images: &[&ImageTensor]) -> Result<()> {
        let s = self.config.image_size;
        match images.iter().find(|i| i.tensor().shape() != [3, s, s]) {
            Some(i) => Err(Error::contract(format!("classifier expects 3×{s}×{s}, got {:?}", i.tensor().shape()))),
            None => Ok(()),
        }
    }

    /// Feature-grid weights for a batch, or `None` when weighting is off.
    fn weight_tensor(&self, masks: &[Option<&BinaryMask>], mode: MaskMode) -> Result<Option<Tensor<f32>>> {
        let f = self.feature_size();
        let maps: Vec<ProbabilityMap> = match mode {
            MaskMode::Off => return Ok(None),
            MaskMode::AllOnes => vec![ProbabilityMap::uniform(f, f, 1.0)?; masks.len()],
            MaskMode::Anatomical => masks
                .iter()
                .map(|m| {
                    let m = m.ok_or_else(|| Error::contract("anatomical weighting needs a mask for every image"))?;
                    mask_weights(m, self.config.image_size, f, self.config.mask_soft)
                })
                .collect::<Result<_>>()?,
        };
        let data = maps.iter().flat_map(|m| m.data().iter().map(|&v| v as f32)).collect();
        Ok(Some(Tensor::new(&[masks.len(), 1, f, f], data)))
    }
}

/// Feature-grid weights for one image-resolution mask: the re-binarised
/// adaptive pool, or the raw window fractions when `soft`.
pub fn mask_weights(mask: &BinaryMask, image_size: usize, feature_size: usize, soft: bool) -> Result<ProbabilityMap> {
    if mask.dims() != (image_size, image_size) {
        return Err(Error::contract(format!(
            "mask is {:?}, expected {image_size}×{image_size}",
            mask.dims()
        )));
    }
    if soft {
        pool_mask(mask, feature_size, feature_size)
    } else {
        Ok(downsample_mask(mask, feature_size, feature_size)?.to_prob_map())
    }
}

/// One in-memory training or evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsSample {
    pub id: String,
    pub image: ImageTensor,
    pub labels: LabelVector,
    pub mask: Option<BinaryMask>,
}

/// Random access to labelled images and their anatomical masks.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn id(&self, i: usize) -> &str;
    fn labels(&self, i: usize) -> &LabelVector;
    /// The preprocessed image and its mask, when one is available.
    fn load(&self, i: usize) -> Result<(ImageTensor, Option<BinaryMask>)>;
}

impl SampleSource for Vec<ClsSample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn id(&self, i: usize) -> &str {
        &self[i].id
    }

    fn labels(&self, i: usize) -> &LabelVector {
        &self[i].labels
    }

    fn load(&self, i: usize) -> Result<(ImageTensor, Option<BinaryMask>)> {
        Ok((self[i].image.clone(), self[i].mask.clone()))
    }
}

/// Masks read from a directory of PNGs; misses are segmented and written back.
pub struct MaskCache {
    dir: PathBuf,
    segmenter: Option<Segmenter>,
}

impl MaskCache {
    pub fn new(dir: impl Into<PathBuf>, segmenter: Option<Segmenter>) -> Self {
        Self { dir: dir.into(), segmenter }
    }

    pub fn path(&self, image_id: &str) -> PathBuf {
        self.dir.join(Path::new(image_id).with_extension("png"))
    }

    /// Returns the mask and whether the empty-segmentation fallback fired.
    pub fn get(&self, image_id: &str, image: &ImageTensor) -> Result<(BinaryMask, bool)> {
        let path = self.path(image_id);
        if path.exists() {
            return Ok((load_mask(&path)?, false));
        }
        let seg = self.segmenter.as_ref().ok_or_else(|| {
            Error::data(&path, "mask not cached and no segmentation checkpoint was given")
        })?;
        let generated = seg.generate_mask(image)?;
        if generated.fallback {
            log::warn!("{image_id}: segmentation found no anatomy, using the all-ones mask");
        }
        save_mask(&generated.mask, &path)?;
        Ok((generated.mask, generated.fallback))
    }
}

/// Manifest entries read from disk on demand.
pub struct DiskSource<'a> {
    entries: Vec<ManifestEntry>,
    manifest: &'a DatasetManifest,
    preprocess: PreprocessConfig,
    masks: Option<&'a MaskCache>,
}

impl<'a> DiskSource<'a> {
    pub fn new(
        manifest: &'a DatasetManifest,
        entries: Vec<ManifestEntry>,
        preprocess: PreprocessConfig,
        masks: Option<&'a MaskCache>,
    ) -> Self {
        Self { entries, manifest, preprocess, masks }
    }
}

impl SampleSource for DiskSource<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.entries[i].image_id
    }

    fn labels(&self, i: usize) -> &LabelVector {
        &self.entries[i].labels
    }

    fn load(&self, i: usize) -> Result<(ImageTensor, Option<BinaryMask>)> {
        let id = &self.entries[i].image_id;
        let image = load_preprocessed(&self.manifest.image_path(id), &self.preprocess)?;
        let mask = match self.masks {
            Some(cache) => Some(cache.get(id, &image)?.0),
            None => None,
        };
        Ok((image, mask))
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-image BCE over the epoch's training batches.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean over classes with both labels present in validation.
    pub val_mean_auroc: Option<f64>,
    pub undefined_classes: usize,
}

/// Tab-separated training history.
pub fn history_table(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tval_loss\tval_mean_auroc\tundefined_classes\n");
    for r in history {
        let auc = r.val_mean_auroc.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{auc}\t{}", r.epoch, r.train_loss, r.val_loss, r.undefined_classes);
    }
    s
}

/// Trained weights plus everything needed to rebuild and audit the model.
#[derive(Clone, Debug)]
pub struct ClassifierCheckpoint {
    pub config: ClassifierConfig,
    pub attention: AttentionConfig,
    pub mask_mode: MaskMode,
    pub store: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_auroc: Option<f64>,
    /// Youden-optimal operating points on validation at the best epoch.
    pub thresholds: [f64; NUM_CLASSES],
}

#[derive(Serialize, Deserialize)]
struct ClsRecord {
    config: ClassifierConfig,
    attention: AttentionConfig,
    mask_mode: MaskMode,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_auroc: Option<f64>,
    thresholds: Vec<f64>,
}

impl ClassifierCheckpoint {
    fn record(&self) -> ClsRecord {
        ClsRecord {
            config: self.config.clone(),
            attention: self.attention.clone(),
            mask_mode: self.mask_mode,
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            best_auroc: self.best_auroc,
            thresholds: self.thresholds.to_vec(),
        }
    }

    /// Writes a safetensors archive; `extra` adds provenance metadata.
    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("kind".to_string(), "classifier".to_string());
        meta.insert("record".to_string(), serde_json::to_string(&self.record()).expect("record serialises"));
        for (k, v) in extra {
            meta.insert(k.to_string(), v.clone());
        }
        let tensors: Vec<_> = self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        save_tensors(path, &tensors, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = load_tensors::<f32>(path)?;
        let err = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
        if loaded.metadata.get("kind").map(String::as_str) != Some("classifier") {
            return Err(err("not a classifier checkpoint".into()));
        }
        let record: ClsRecord = serde_json::from_str(loaded.metadata.get("record").map(String::as_str).unwrap_or(""))
            .map_err(|e| err(format!("bad record: {e}")))?;
        let thresholds: [f64; NUM_CLASSES] =
            record.thresholds.try_into().map_err(|_| err("expected 14 thresholds".into()))?;
        let mut store = ParamStore::new();
        Classifier::new(&mut store, &record.config, &record.attention).map_err(|e| err(e.to_string()))?;
        if loaded.tensors.len() != store.len() {
            return Err(err(format!("expected {} tensors, found {}", store.len(), loaded.tensors.len())));
        }
        store.load_named(&loaded.tensors).map_err(err)?;
        Ok(Self {
            config: record.config,
            attention: record.attention,
            mask_mode: record.mask_mode,
            store,
            history: record.history,
            best_epoch: record.best_epoch,
            best_auroc: record.best_auroc,
            thresholds,
        })
    }
}

/// Per-image outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub probs: ProbabilityVector,
    pub global: FeatureMap<f32>,
    pub local: FeatureMap<f32>,
}

/// Read-only inference wrapper around a checkpoint.
pub struct Predictor {
    model: Classifier,
    store: ParamStore<f32>,
    mask_mode: MaskMode,
    thresholds: [f64; NUM_CLASSES],
}

impl Predictor {
    pub fn new(ckpt: &ClassifierCheckpoint) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let model = Classifier::new(&mut scratch, &ckpt.config, &ckpt.attention)?;
        Ok(Self { model, store: ckpt.store.clone(), mask_mode: ckpt.mask_mode, thresholds: ckpt.thresholds })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    pub fn thresholds(&self) -> &[f64; NUM_CLASSES] {
        &self.thresholds
    }

    pub fn head_weights(&self) -> Tensor<f32> {
        self.model.head_weights(&self.store)
    }

    fn run(&self, images: &[&ImageTensor], masks: &[Option<&BinaryMask>]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        self.model.check_images(images)?;
        if images.len() != masks.len() {
            return Err(Error::contract("one mask slot per image expected"));
        }
        let weights = self.model.weight_tensor(masks, self.mask_mode)?;
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.store, false);
        let out = self.model.forward(&ctx, tape.constant(ImageTensor::batch(images)), weights.map(|w| tape.constant(w)));
        let (p, g, l) = (out.probs.value(), out.global.value(), out.local.value());
        Ok(((*p).clone(), (*g).clone(), (*l).clone()))
    }

    /// Class probabilities for a batch of preprocessed images.
    pub fn probabilities(&self, images: &[&ImageTensor], masks: &[Option<&BinaryMask>]) -> Result<Vec<ProbabilityVector>> {
        let (p, _, _) = self.run(images, masks)?;
        p.data().chunks(NUM_CLASSES).map(|row| ProbabilityVector::new(&row.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect()
    }

    /// Probabilities together with `F_g` and `F_l` for each image.
    pub fn inspect(&self, images: &[&ImageTensor], masks: &[Option<&BinaryMask>]) -> Result<Vec<Inspection>> {
        let (p, g, l) = self.run(images, masks)?;
        let (_, c, h, w) = g.dims4();
        let plane = c * h * w;
        (0..images.len())
            .map(|i| {
                let probs = ProbabilityVector::new(
                    &p.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].iter().map(|&v| v as f64).collect::<Vec<_>>(),
                )?;
                let slice = |t: &Tensor<f32>| FeatureMap::new(Tensor::new(&[c, h, w], t.data()[i * plane..(i + 1) * plane].to_vec()));
                Ok(Inspection { probs, global: slice(&g)?, local: slice(&l)? })
            })
            .collect()
    }

    /// Preprocess, mask, classify and threshold one image file.
    pub fn predict_path(
        &self,
        path: &Path,
        preprocess: &PreprocessConfig,
        segmenter: Option<&Segmenter>,
    ) -> Result<PredictionRecord> {
        let image = load_preprocessed(path, preprocess)?;
        let (mask, fallback) = match self.mask_mode {
            MaskMode::Anatomical => {
                let seg = segmenter
                    .ok_or_else(|| Error::Config("this checkpoint needs a segmentation checkpoint".into()))?;
                let g = seg.generate_mask(&image)?;
                if g.fallback {
                    log::warn!("{}: segmentation found no anatomy, using the all-ones mask", path.display());
                }
                (Some(g.mask), g.fallback)
            }
            _ => (None, false),
        };
        let probs = self.probabilities(&[&image], &[mask.as_ref()])?.remove(0);
        let positive = std::array::from_fn(|k| probs.values()[k] >= self.thresholds[k]);
        let image_id = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(PredictionRecord { image_id, probs, positive, mask_fallback: fallback })
    }
}

/// One line of batch prediction output.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub probs: ProbabilityVector,
    /// Probability at or above the stored operating threshold.
    pub positive: [bool; NUM_CLASSES],
    pub mask_fallback: bool,
}

impl PredictionRecord {
    pub fn header() -> String {
        let mut s = String::from("image_id\tstatus");
        for d in Disease::ALL {
            let _ = write!(s, "\t{}", d.name());
        }
        s.push_str("\tpositive\tmask_fallback");
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\tok", self.image_id);
        for p in self.probs.values() {
            let _ = write!(s, "\t{p:.6}");
        }
        let called: Vec<&str> = Disease::ALL.iter().filter(|d| self.positive[d.index()]).map(|d| d.token()).collect();
        let called = if called.is_empty() { "No Finding".to_string() } else { called.join("|") };
        let _ = write!(s, "\t{called}\t{}", self.mask_fallback);
        s
    }
}

/// Knobs of one training invocation that are not hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub mask_mode: MaskMode,
    /// Resume state rewritten after every epoch.
    pub state_path: Option<PathBuf>,
    /// Continue from `state_path` if it exists.
    pub resume: bool,
    /// Return after this many epochs of this invocation.
    pub stop_after: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { mask_mode: MaskMode::Anatomical, state_path: None, resume: false, stop_after: None }
    }
}

pub struct TrainOutcome {
    /// Best-epoch weights so far.
    pub checkpoint: ClassifierCheckpoint,
    /// False when `stop_after` cut the run short.
    pub completed: bool,
}

struct Best {
    epoch: usize,
    auroc: Option<f64>,
    val_loss: f64,
    thresholds: [f64; NUM_CLASSES],
    store: ParamStore<f32>,
}

fn better(auroc: Option<f64>, loss: f64, best: &Best) -> bool {
    match (auroc, best.auroc) {
        (Some(a), Some(b)) if a != b => a > b,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        _ => loss < best.val_loss,
    }
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    config: ClassifierConfig,
    attention: AttentionConfig,
    mask_mode: MaskMode,
    epochs_done: usize,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_auroc: Option<f64>,
    best_val_loss: f64,
    thresholds: Vec<f64>,
}

fn load_batch(
    source: &dyn SampleSource,
    idx: &[usize],
) -> Result<(Vec<ImageTensor>, Vec<Option<BinaryMask>>, Tensor<f32>)> {
    let mut images = Vec::with_capacity(idx.len());
    let mut masks = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len() * NUM_CLASSES);
    for &i in idx {
        let (img, mask) = source.load(i)?;
        images.push(img);
        masks.push(mask);
        targets.extend(source.labels(i).values().iter().map(|&v| v as f32));
    }
    Ok((images, masks, Tensor::new(&[idx.len(), NUM_CLASSES], targets)))
}

fn per_sample_bce(probs: &Tensor<f32>, targets: &Tensor<f32>) -> Result<Vec<f64>> {
    probs
        .data()
        .chunks(NUM_CLASSES)
        .zip(targets.data().chunks(NUM_CLASSES))
        .map(|(p, y)| {
            let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = y.iter().map(|&v| v as f64).collect();
            bce_loss_slices(&y, &p)
        })
        .collect()
}

/// Scores every sample of `source` in eval mode. Returns per-sample BCE and
/// the metric report.
pub fn evaluate(
    model: &Classifier,
    store: &ParamStore<f32>,
    source: &dyn SampleSource,
    mode: MaskMode,
    batch: usize,
) -> Result<(Vec<f64>, Vec<[f64; NUM_CLASSES]>, MetricReport)> {
    let mut losses = Vec::with_capacity(source.len());
    let mut scores = Vec::with_capacity(source.len());
    let mut labels = Vec::with_capacity(source.len());
    let idx: Vec<usize> = (0..source.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, masks, targets) = load_batch(source, chunk)?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        model.check_images(&refs)?;
        let weights = model.weight_tensor(&masks.iter().map(Option::as_ref).collect::<Vec<_>>(), mode)?;
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, store, false);
        let probs = model.forward(&ctx, tape.constant(ImageTensor::batch(&refs)), weights.map(|w| tape.constant(w))).probs.value();
        losses.extend(per_sample_bce(&probs, &targets)?);
        for (row, &i) in probs.data().chunks(NUM_CLASSES).zip(chunk) {
            scores.push(std::array::from_fn(|k| row[k] as f64));
            labels.push(*source.labels(i).as_bools());
        }
    }
    let report = MetricReport::compute(&scores, &labels)?;
    Ok((losses, scores, report))
}

/// Trains with the mean BCE loss, keeps the weights of the epoch with the
/// highest validation mean AUROC (ties: lower validation loss) and the
/// Youden thresholds measured there.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    att: &AttentionConfig,
    train: &dyn SampleSource,
    val: &dyn SampleSource,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let mut store = ParamStore::new();
    let model = Classifier::new(&mut store, cfg, att)?;
    if let Some(p) = &cfg.pretrained {
        let n = backbone::load_pretrained(&mut store, p)?;
        log::info!("loaded {n} pretrained backbone tensors from {}", p.display());
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() });
    let mut history = Vec::new();
    let mut best: Option<Best> = None;
    let mut start = 1;

    if let (true, Some(path)) = (opts.resume, &opts.state_path) {
        if path.exists() {
            let (done, hist, b) = restore_state(path, cfg, att, opts.mask_mode, &mut store, &mut adam)?;
            log::info!("resuming after epoch {done}");
            start = done + 1;
            history = hist;
            best = b;
        }
    }

    let mut ran = 0;
    for epoch in start..=cfg.epochs {
        if opts.stop_after.is_some_and(|n| ran >= n) {
            let checkpoint = finish(cfg, att, opts.mask_mode, &store, history, best);
            return Ok(TrainOutcome { checkpoint, completed: false });
        }
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut losses = vec![0.0; train.len()];
        for chunk in perm.chunks(cfg.batch_size) {
            let (images, masks, targets) = load_batch(train, chunk)?;
            let refs: Vec<&ImageTensor> = images.iter().collect();
            model.check_images(&refs)?;
            let weights = model.weight_tensor(&masks.iter().map(Option::as_ref).collect::<Vec<_>>(), opts.mask_mode)?;
            let tape = Tape::new();
            let grads = {
                let ctx = Ctx::new(&tape, &store, true);
                let out = model.forward(&ctx, tape.constant(ImageTensor::batch(&refs)), weights.map(|w| tape.constant(w)));
                for (&i, l) in chunk.iter().zip(per_sample_bce(&out.probs.value(), &targets)?) {
                    losses[i] = l;
                }
                let loss = out.probs.bce(&targets, BCE_EPS as f32);
                tape.backward(loss).params(&store)
            };
            adam.step(&mut store, &grads);
            apply_buffer_updates(&tape, &mut store);
        }
        let train_loss = losses.iter().sum::<f64>() / train.len() as f64;
        let (val_losses, _, report) = evaluate(&model, &store, val, opts.mask_mode, cfg.batch_size)?;
        let val_loss = val_losses.iter().sum::<f64>() / val_losses.len() as f64;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::Runtime(format!("classifier loss diverged at epoch {epoch}")));
        }
        let auroc = report.mean();
        if report.undefined() > 0 && epoch == start {
            log::info!("{} classes lack positives or negatives in validation and are excluded", report.undefined());
        }
        log::info!(
            "train epoch {epoch}: loss {train_loss:.5} val {val_loss:.5} auroc {}",
            auroc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "NA".into())
        );
        history.push(EpochRecord { epoch, train_loss, val_loss, val_mean_auroc: auroc, undefined_classes: report.undefined() });
        if best.as_ref().is_none_or(|b| better(auroc, val_loss, b)) {
            best = Some(Best { epoch, auroc, val_loss, thresholds: report.thresholds, store: store.clone() });
        }
        ran += 1;
        if let Some(path) = &opts.state_path {
            save_state(path, cfg, att, opts.mask_mode, epoch, &history, best.as_ref(), &store, &adam)?;
        }
    }
    let checkpoint = finish(cfg, att, opts.mask_mode, &store, history, best);
    Ok(TrainOutcome { checkpoint, completed: true })
}

fn finish(
    cfg: &ClassifierConfig,
    att: &AttentionConfig,
    mode: MaskMode,
    current: &ParamStore<f32>,
    history: Vec<EpochRecord>,
    best: Option<Best>,
) -> ClassifierCheckpoint {
    let (best_epoch, best_auroc, thresholds, store) = match best {
        Some(b) => (b.epoch, b.auroc, b.thresholds, b.store),
        None => (0, None, [0.5; NUM_CLASSES], current.clone()),
    };
    ClassifierCheckpoint {
        config: cfg.clone(),
        attention: att.clone(),
        mask_mode: mode,
        store,
        history,
        best_epoch,
        best_auroc,
        thresholds,
    }
}

#[allow(clippy::too_many_arguments)]
fn save_state(
    path: &Path,
    cfg: &ClassifierConfig,
    att: &AttentionConfig,
    mode: MaskMode,
    epochs_done: usize,
    history: &[EpochRecord],
    best: Option<&Best>,
    store: &ParamStore<f32>,
    adam: &Adam<f32>,
) -> Result<()> {
    let record = StateRecord {
        config: cfg.clone(),
        attention: att.clone(),
        mask_mode: mode,
        epochs_done,
        history: history.to_vec(),
        best_epoch: best.map_or(0, |b| b.epoch),
        best_auroc: best.and_then(|b| b.auroc),
        best_val_loss: best.map_or(f64::INFINITY, |b| b.val_loss),
        thresholds: best.map_or(vec![0.5; NUM_CLASSES], |b| b.thresholds.to_vec()),
    };
    let mut tensors: Vec<(String, Tensor<f32>)> = store.iter().map(|(n, t)| (format!("model.{n}"), t.clone())).collect();
    if let Some(b) = best {
        tensors.extend(b.store.iter().map(|(n, t)| (format!("best.{n}"), t.clone())));
    }
    tensors.extend(adam.state(store));
    let mut meta = HashMap::new();
    meta.insert("kind".to_string(), "classifier-state".to_string());
    meta.insert("record".to_string(), serde_json::to_string(&record).expect("record serialises"));
    save_tensors(path, &tensors, meta)?;
    Ok(())
}

type Restored = (usize, Vec<EpochRecord>, Option<Best>);

fn restore_state(
    path: &Path,
    cfg: &ClassifierConfig,
    att: &AttentionConfig,
    mode: MaskMode,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
) -> Result<Restored> {
    let loaded = load_tensors::<f32>(path)?;
    let err = |msg: String| Error::Checkpoint { path: path.to_path_buf(), msg };
    if loaded.metadata.get("kind").map(String::as_str) != Some("classifier-state") {
        return Err(err("not a classifier resume state".into()));
    }
    let rec: StateRecord = serde_json::from_str(loaded.metadata.get("record").map(String::as_str).unwrap_or(""))
        .map_err(|e| err(format!("bad record: {e}")))?;
    if rec.config != *cfg || rec.attention != *att || rec.mask_mode != mode {
        return Err(Error::Config(format!(
            "{}: resume state was written with a different configuration",
            path.display()
        )));
    }
    let mut model = Vec::new();
    let mut best = Vec::new();
    let mut opt = Vec::new();
    for (name, t) in loaded.tensors {
        if let Some(n) = name.strip_prefix("model.") {
            model.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix("best.") {
            best.push((n.to_string(), t));
        } else {
            opt.push((name, t));
        }
    }
    if model.len() != store.len() {
        return Err(err(format!("expected {} model tensors, found {}", store.len(), model.len())));
    }
    store.load_named(&model).map_err(err)?;
    adam.load_state(store, &opt).map_err(err)?;
    let best = if best.is_empty() {
        None
    } else {
        let mut bs = store.clone();
        bs.load_named(&best).map_err(err)?;
        let thresholds = rec.thresholds.clone().try_into().map_err(|_| err("expected 14 thresholds".into()))?;
        Some(Best { epoch: rec.best_epoch, auroc: rec.best_auroc, val_loss: rec.best_val_loss, thresholds, store: bs })
    };
    Ok((rec.epochs_done, rec.history, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_ops::feature_weight;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig { backbone: BackboneKind::Tiny, image_size: 16, batch_size: 4, epochs: 2, ..Default::default() }
    }

    fn samples(n: usize) -> Vec<ClsSample> {
        (0..n)
            .map(|i| {
                let t = Tensor::from_fn(&[3, 16, 16], |k| ((k * (i + 3)) % 17) as f32 / 17.0 - 0.5);
                let labels = LabelVector::from_diseases(Disease::ALL.into_iter().filter(|d| (d.index() + i) % 3 == 0));
                let mask = BinaryMask::from_fn(16, 16, |r, c| (r + c + i) % 5 != 0 && r < 12);
                ClsSample { id: format!("s{i}"), image: ImageTensor::new(t).unwrap(), labels, mask: Some(mask) }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierConfig::default().validate().is_ok());
        assert!(ClassifierConfig { image_size: 20, ..tiny_cfg() }.validate().is_err());
        assert!(ClassifierConfig { batch_size: 0, ..tiny_cfg() }.validate().is_err());
        assert!(ClassifierConfig { pretrained: Some("w".into()), ..tiny_cfg() }.validate().is_err());
    }

    #[test]
    fn all_ones_weighting_matches_no_weighting_exactly() {
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &tiny_cfg(), &AttentionConfig::default()).unwrap();
        let s = samples(3);
        let imgs: Vec<&ImageTensor> = s.iter().map(|x| &x.image).collect();
        let masks: Vec<Option<&BinaryMask>> = s.iter().map(|x| x.mask.as_ref()).collect();
        let run = |mode| {
            let w = model.weight_tensor(&masks, mode).unwrap();
            let tape = Tape::no_grad();
            let ctx = Ctx::new(&tape, &store, false);
            let out = model.forward(&ctx, tape.constant(ImageTensor::batch(&imgs)), w.map(|w| tape.constant(w)));
            ((*out.probs.value()).clone(), (*out.local.value()).clone(), (*out.global.value()).clone())
        };
        let off = run(MaskMode::Off);
        let ones = run(MaskMode::AllOnes);
        assert_eq!(off.0.data(), ones.0.data());
        let masked = run(MaskMode::Anatomical);
        assert_ne!(off.0.data(), masked.0.data());
        // F_l equals the hard zeroing of F_g on every image
        for (i, m) in masks.iter().enumerate() {
            let f = model.feature_size();
            let c = model.feature_channels();
            let g = FeatureMap::new(Tensor::new(&[c, f, f], masked.2.data()[i * c * f * f..(i + 1) * c * f * f].to_vec())).unwrap();
            let expected = feature_weight(&g, &downsample_mask(m.unwrap(), f, f).unwrap()).unwrap();
            assert_eq!(expected.tensor().data(), &masked.1.data()[i * c * f * f..(i + 1) * c * f * f]);
        }
    }

    #[test]
    fn probabilities_depend_on_the_mask_only_through_its_downsampling() {
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &tiny_cfg(), &AttentionConfig::default()).unwrap();
        // 16 → 2×2 grid: windows are 8×8; flipping one pixel keeps every majority
        let a = BinaryMask::from_fn(16, 16, |r, _| r < 8);
        let b = BinaryMask::from_fn(16, 16, |r, c| r < 8 && !(r == 0 && c == 0));
        let wa = model.weight_tensor(&[Some(&a)], MaskMode::Anatomical).unwrap();
        let wb = model.weight_tensor(&[Some(&b)], MaskMode::Anatomical).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn wrong_mask_resolution_is_a_contract_error() {
        assert!(matches!(mask_weights(&BinaryMask::ones(8, 8), 16, 2, false), Err(Error::Contract(_))));
    }

    #[test]
    fn soft_weights_are_window_fractions() {
        let m = BinaryMask::from_fn(4, 4, |r, c| r == 0 && c < 2);
        let w = mask_weights(&m, 4, 2, true).unwrap();
        assert_eq!(w.data(), &[0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_probabilities() {
        let s = samples(8);
        let out = train_classifier(&tiny_cfg(), &AttentionConfig::default(), &s, &s, &TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        out.checkpoint.save(&path, &[]).unwrap();
        let back = ClassifierCheckpoint::load(&path).unwrap();
        assert_eq!(back.history, out.checkpoint.history);
        assert_eq!(back.thresholds, out.checkpoint.thresholds);
        let imgs: Vec<&ImageTensor> = s.iter().map(|x| &x.image).collect();
        let masks: Vec<Option<&BinaryMask>> = s.iter().map(|x| x.mask.as_ref()).collect();
        let p1 = Predictor::new(&out.checkpoint).unwrap().probabilities(&imgs, &masks).unwrap();
        let p2 = Predictor::new(&back).unwrap().probabilities(&imgs, &masks).unwrap();
        assert_eq!(p1, p2);
        // re-running validation reproduces the stored best AUROC
        let pred = Predictor::new(&back).unwrap();
        let (_, _, report) = evaluate(pred.model(), &back.store, &s, back.mask_mode, 4).unwrap();
        assert_eq!(report.mean(), back.best_auroc);
    }

    #[test]
    fn record_lists_called_diseases() {
        let mut positive = [false; NUM_CLASSES];
        positive[2] = true;
        let r = PredictionRecord {
            image_id: "a.png".into(),
            probs: ProbabilityVector::new(&[0.25; NUM_CLASSES]).unwrap(),
            positive,
            mask_fallback: false,
        };
        let line = r.to_tsv();
        assert!(line.starts_with("a.png\tok\t0.250000"));
        assert!(line.ends_with("\tEffusion\tfalse"));
        assert_eq!(line.split('\t').count(), PredictionRecord::header().split('\t').count());
    }
}
