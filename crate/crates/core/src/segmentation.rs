//! U-Net segmenter for the left lung, right lung and heart, and the merged
//! anatomy mask used to weight classifier features.

use std::collections::HashMap;
use std::path::Path;

use cxr_tensor::io::{load_tensors, save_tensors};
use cxr_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core_ops::{binarize, dice_coefficient, dice_loss, merge_masks, BinaryMask, ProbabilityMap, DICE_SMOOTH, MASK_THRESHOLD};
use crate::data_pipeline::ImageTensor;
use crate::nn::{apply_buffer_updates, BatchNorm2d, Conv2d, Ctx, UpConv};
use crate::{epoch_rng, Error, Result};

/// Output channel order of the segmenter.
pub const STRUCTURES: [&str; 3] = ["left_lung", "right_lung", "heart"];

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: ImageTensor,
    /// Left lung, right lung, heart.
    pub masks: [BinaryMask; 3],
}

impl SegSample {
    pub fn new(id: String, image: ImageTensor, masks: [BinaryMask; 3]) -> Result<Self> {
        let dims = (image.height(), image.width());
        if let Some(m) = masks.iter().find(|m| m.dims() != dims) {
            return Err(Error::contract(format!("{id}: mask {:?} does not match image {dims:?}", m.dims())));
        }
        Ok(Self { id, image, masks })
    }

    fn target(&self) -> Tensor<f32> {
        let (h, w) = (self.image.height(), self.image.width());
        let data = self.masks.iter().flat_map(|m| m.data().iter().map(|&v| v as f32)).collect();
        Tensor::new(&[1, 3, h, w], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Number of down/up-sampling levels.
    pub depth: usize,
    /// Channels of the first level; doubles per level.
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Share of samples held out for checkpoint selection. Zero selects on
    /// the training samples themselves.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_width: 32,
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.depth > 6 {
            return bad(format!("segmenter depth {} outside 1..=6", self.depth));
        }
        if self.base_width == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("segmenter width, batch size and epochs must be positive".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("segmenter lr and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    na: BatchNorm2d,
    b: Conv2d,
    nb: BatchNorm2d,
}

impl DoubleConv {
    fn new(store: &mut ParamStore<f32>, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.0"), c_in, c_out, 3, 1, 1, false, rng),
            na: BatchNorm2d::new(store, &format!("{name}.0.norm"), c_out),
            b: Conv2d::new(store, &format!("{name}.1"), c_out, c_out, 3, 1, 1, false, rng),
            nb: BatchNorm2d::new(store, &format!("{name}.1.norm"), c_out),
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_, f32>, x: Var<'t, f32>) -> Var<'t, f32> {
        let h = self.na.forward(ctx, self.a.forward(ctx, x)).relu();
        self.nb.forward(ctx, self.b.forward(ctx, h)).relu()
    }
}

/// Encoder/decoder with skip connections and three sigmoid outputs.
#[derive(Clone, Debug)]
pub struct UNet {
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<(UpConv, DoubleConv)>,
    head: Conv2d,
    depth: usize,
}

impl UNet {
    pub fn new(store: &mut ParamStore<f32>, cfg: &SegConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths: Vec<usize> = (0..=cfg.depth).map(|l| cfg.base_width << l).collect();
        let mut down = Vec::new();
        let mut c_in = 3;
        for (l, &w) in widths[..cfg.depth].iter().enumerate() {
            down.push(DoubleConv::new(store, &format!("unet.down{l}"), c_in, w, &mut rng));
            c_in = w;
        }
        let bottom = DoubleConv::new(store, "unet.bottom", c_in, widths[cfg.depth], &mut rng);
        let mut up = Vec::new();
        for l in (0..cfg.depth).rev() {
            let (hi, lo) = (widths[l + 1], widths[l]);
            up.push((
                UpConv::new(store, &format!("unet.up{l}.upconv"), hi, lo, &mut rng),
                DoubleConv::new(store, &format!("unet.up{l}.conv"), 2 * lo, lo, &mut rng),
            ));
        }
        let head = Conv2d::new(store, "unet.head", widths[0], 3, 1, 1, 0, true, &mut rng);
        Self { down, bottom, up, head, depth: cfg.depth }
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// `N×3×H×W` images to `N×3×H×W` probabilities.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, f32>, x: Var<'t, f32>) -> Var<'t, f32> {
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for block in &self.down {
            let s = block.forward(ctx, h);
            skips.push(s);
            h = s.max_pool2d(2, 2, 0);
        }
        h = self.bottom.forward(ctx, h);
        for (up, conv) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = conv.forward(ctx, Var::concat_channels(&[skip, up.forward(ctx, h)]));
        }
        self.head.forward(ctx, h).sigmoid()
    }
}

/// One row of the segmentation training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Binarized dice per structure on the selection samples.
    pub val_dice: [f64; 3],
}

/// Tab-separated training curve.
pub fn curve_table(curve: &[SegEpoch]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tval_loss\tdice_left_lung\tdice_right_lung\tdice_heart\n");
    for e in curve {
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_dice[0], e.val_dice[1], e.val_dice[2]
        ));
    }
    s
}

/// Trained segmenter weights plus the record of how they were chosen.
#[derive(Clone, Debug)]
pub struct SegCheckpoint {
    pub config: SegConfig,
    /// Side length of the square training images.
    pub input_size: usize,
    pub store: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_dice: [f64; 3],
    pub curve: Vec<SegEpoch>,
}

#[derive(Serialize, Deserialize)]
struct SegRecord {
    config: SegConfig,
    input_size: usize,
    best_epoch: usize,
    best_val_loss: f64,
    best_dice: [f64; 3],
    curve: Vec<SegEpoch>,
}

impl SegCheckpoint {
    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let record = SegRecord {
            config: self.config.clone(),
            input_size: self.input_size,
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
            best_dice: self.best_dice,
            curve: self.curve.clone(),
        };
        let mut meta = HashMap::new();
        meta.insert("kind".to_string(), "segmenter".to_string());
        meta.insert("record".to_string(), serde_json::to_string(&record).expect("record serialises"));
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
        if loaded.metadata.get("kind").map(String::as_str) != Some("segmenter") {
            return Err(err("not a segmenter checkpoint".into()));
        }
        let record: SegRecord = serde_json::from_str(loaded.metadata.get("record").map(String::as_str).unwrap_or(""))
            .map_err(|e| err(format!("bad record: {e}")))?;
        record.config.validate().map_err(|e| err(e.to_string()))?;
        let mut store = ParamStore::new();
        UNet::new(&mut store, &record.config, 0);
        if loaded.tensors.len() != store.len() {
            return Err(err(format!("expected {} tensors, found {}", store.len(), loaded.tensors.len())));
        }
        store.load_named(&loaded.tensors).map_err(err)?;
        Ok(Self {
            config: record.config,
            input_size: record.input_size,
            store,
            best_epoch: record.best_epoch,
            best_val_loss: record.best_val_loss,
            best_dice: record.best_dice,
            curve: record.curve,
        })
    }
}

/// Per-sample soft dice loss summed over structures, from output probabilities.
fn sample_losses(probs: &Tensor<f32>, samples: &[&SegSample]) -> Vec<f64> {
    let (_, _, h, w) = probs.dims4();
    let hw = h * w;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (0..3)
                .map(|k| {
                    let off = (i * 3 + k) * hw;
                    let p = ProbabilityMap::new(h, w, probs.data()[off..off + hw].iter().map(|&v| v as f64).collect())
                        .expect("sigmoid output is a probability");
                    dice_loss(&s.masks[k].to_prob_map(), &p).expect("shapes checked")
                })
                .sum()
        })
        .collect()
}

fn evaluate(net: &UNet, store: &ParamStore<f32>, samples: &[&SegSample], batch: usize) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut dice = [0.0; 3];
    for chunk in samples.chunks(batch) {
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, store, false);
        let x = tape.constant(ImageTensor::batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>()));
        let probs = net.forward(&ctx, x).value();
        loss += sample_losses(&probs, chunk).iter().sum::<f64>();
        for (i, s) in chunk.iter().enumerate() {
            for (k, d) in dice.iter_mut().enumerate() {
                let pred = binarize(&prob_map(&probs, i, k), MASK_THRESHOLD).expect("threshold valid");
                *d += dice_coefficient(&s.masks[k], &pred).expect("shapes checked");
            }
        }
    }
    let n = samples.len() as f64;
    (loss / n, dice.map(|d| d / n))
}

fn prob_map(probs: &Tensor<f32>, item: usize, channel: usize) -> ProbabilityMap {
    let (_, c, h, w) = probs.dims4();
    let off = (item * c + channel) * h * w;
    ProbabilityMap::new(h, w, probs.data()[off..off + h * w].iter().map(|&v| v as f64).collect())
        .expect("sigmoid output is a probability")
}

/// Result of [`train_segmenter`].
pub struct SegTraining {
    pub checkpoint: SegCheckpoint,
    /// Indices of the samples used for checkpoint selection.
    pub val_indices: Vec<usize>,
}

/// Trains the U-Net with the soft dice loss and keeps the weights of the
/// epoch with the lowest selection loss.
pub fn train_segmenter(samples: &[SegSample], cfg: &SegConfig) -> Result<SegTraining> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::contract("segmentation dataset is empty"))?;
    let size = first.image.height();
    for s in samples {
        if s.image.tensor().shape() != [3, size, size] {
            return Err(Error::contract(format!(
                "{}: image shape {:?}, expected 3×{size}×{size}",
                s.id,
                s.image.tensor().shape()
            )));
        }
        SegSample::new(s.id.clone(), s.image.clone(), s.masks.clone())?;
    }
    let mut store = ParamStore::new();
    let net = UNet::new(&mut store, cfg, cfg.seed);
    if size % net.size_multiple() != 0 {
        return Err(Error::Config(format!(
            "image size {size} is not divisible by {} for depth {}",
            net.size_multiple(),
            cfg.depth
        )));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e6));
    let n_val = if cfg.val_fraction == 0.0 || samples.len() < 2 {
        0
    } else {
        ((cfg.val_fraction * samples.len() as f64).round() as usize).clamp(1, samples.len() - 1)
    };
    let (mut val_idx, mut train_idx) = (order[..n_val].to_vec(), order[n_val..].to_vec());
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let train: Vec<&SegSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val: Vec<&SegSample> = if val_idx.is_empty() { train.clone() } else { val_idx.iter().map(|&i| &samples[i]).collect() };

    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() });
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, [f64; 3], ParamStore<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut losses = vec![0.0; train.len()];
        for chunk in perm.chunks(cfg.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| train[i]).collect();
            let images = ImageTensor::batch(&batch.iter().map(|s| &s.image).collect::<Vec<_>>());
            let targets = Tensor::stack(&batch.iter().map(|s| s.target()).collect::<Vec<_>>());
            let tape = Tape::new();
            let grads = {
                let ctx = Ctx::new(&tape, &store, true);
                let probs = net.forward(&ctx, tape.constant(images));
                for (&i, l) in chunk.iter().zip(sample_losses(&probs.value(), &batch)) {
                    losses[i] = l;
                }
                let loss = probs.soft_dice_loss(&targets, DICE_SMOOTH as f32);
                tape.backward(loss).params(&store)
            };
            adam.step(&mut store, &grads);
            apply_buffer_updates(&tape, &mut store);
        }
        let train_loss = losses.iter().sum::<f64>() / train.len() as f64;
        let (val_loss, val_dice) = evaluate(&net, &store, &val, cfg.batch_size);
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::Runtime(format!("segmenter loss diverged at epoch {epoch}")));
        }
        log::info!(
            "segment epoch {epoch}: train {train_loss:.5} val {val_loss:.5} dice {:.4}/{:.4}/{:.4}",
            val_dice[0],
            val_dice[1],
            val_dice[2]
        );
        curve.push(SegEpoch { epoch, train_loss, val_loss, val_dice });
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, val_dice, store.clone()));
        }
    }
    let (best_epoch, best_val_loss, best_dice, store) = best.expect("at least one epoch");
    Ok(SegTraining {
        checkpoint: SegCheckpoint {
            config: cfg.clone(),
            input_size: size,
            store,
            best_epoch,
            best_val_loss,
            best_dice,
            curve,
        },
        val_indices: val_idx,
    })
}

/// Merged anatomy mask plus whether the empty-mask fallback fired.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedMask {
    pub mask: BinaryMask,
    pub fallback: bool,
}

/// Inference wrapper around a checkpoint.
pub struct Segmenter {
    net: UNet,
    store: ParamStore<f32>,
    input_size: usize,
}

impl Segmenter {
    pub fn new(ckpt: &SegCheckpoint) -> Self {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &ckpt.config, 0);
        Self { net, store: ckpt.store.clone(), input_size: ckpt.input_size }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Per-structure probability maps at image resolution.
    pub fn segment(&self, image: &ImageTensor) -> Result<[ProbabilityMap; 3]> {
        Ok(self.segment_batch(&[image])?.pop().expect("one result per image"))
    }

    pub fn segment_batch(&self, images: &[&ImageTensor]) -> Result<Vec<[ProbabilityMap; 3]>> {
        let s = self.input_size;
        if let Some(img) = images.iter().find(|i| i.tensor().shape() != [3, s, s]) {
            return Err(Error::contract(format!(
                "segmenter expects 3×{s}×{s}, got {:?}",
                img.tensor().shape()
            )));
        }
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &self.store, false);
        let probs = self.net.forward(&ctx, tape.constant(ImageTensor::batch(images))).value();
        Ok((0..images.len()).map(|i| [0, 1, 2].map(|k| prob_map(&probs, i, k))).collect())
    }

    /// Binarizes each structure at 0.5 and takes the union. An empty union
    /// is replaced by the all-ones mask and flagged.
    pub fn generate_mask(&self, image: &ImageTensor) -> Result<GeneratedMask> {
        Ok(self.generate_masks(&[image])?.pop().expect("one result per image"))
    }

    pub fn generate_masks(&self, images: &[&ImageTensor]) -> Result<Vec<GeneratedMask>> {
        self.segment_batch(images)?.iter().map(merge_structures).collect()
    }
}

/// Binarize each map, OR them, and fall back to all-ones when empty.
pub fn merge_structures(maps: &[ProbabilityMap; 3]) -> Result<GeneratedMask> {
    let parts = maps.iter().map(|m| binarize(m, MASK_THRESHOLD)).collect::<Result<Vec<_>>>()?;
    let mask = merge_masks(&parts)?;
    if mask.is_empty() {
        log::warn!("segmentation produced an empty mask; using the all-ones mask");
        let (h, w) = mask.dims();
        return Ok(GeneratedMask { mask: BinaryMask::ones(h, w), fallback: true });
    }
    Ok(GeneratedMask { mask, fallback: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_union_falls_back_to_ones() {
        let z = ProbabilityMap::uniform(4, 4, 0.1).unwrap();
        let g = merge_structures(&[z.clone(), z.clone(), z]).unwrap();
        assert!(g.fallback);
        assert_eq!(g.mask, BinaryMask::ones(4, 4));
    }

    #[test]
    fn union_of_structures() {
        let on = |r0: usize| {
            ProbabilityMap::new(2, 2, (0..4).map(|i| if i / 2 == r0 { 0.9 } else { 0.2 }).collect()).unwrap()
        };
        let g = merge_structures(&[on(0), on(1), ProbabilityMap::uniform(2, 2, 0.0).unwrap()]).unwrap();
        assert!(!g.fallback);
        assert_eq!(g.mask, BinaryMask::ones(2, 2));
    }

    #[test]
    fn unet_output_shape_and_range() {
        let cfg = SegConfig { depth: 2, base_width: 4, ..Default::default() };
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &cfg, 1);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, false);
        let x = Tensor::from_fn(&[2, 3, 8, 12], |i| (i as f32 * 0.37).sin());
        let y = net.forward(&ctx, tape.constant(x)).value();
        assert_eq!(y.shape(), &[2, 3, 8, 12]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(train_segmenter(&[], &SegConfig::default()), Err(Error::Contract(_))));
    }
}
