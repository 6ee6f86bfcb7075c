//! Feature extractors that turn a gated image into the final convolutional
//! feature map.

use std::path::Path;

use cxr_tensor::io::load_tensors;
use cxr_tensor::{ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm2d, Conv2d, Ctx};
use crate::{Error, Result};

/// Anything that maps `N×3×S×S` images to an `N×C×h×w` feature map.
pub trait Backbone: Send + Sync {
    fn forward<'t>(&self, ctx: &Ctx<'t, '_, f32>, x: Var<'t, f32>) -> Var<'t, f32>;
    fn out_channels(&self) -> usize;
    /// Spatial side of the output for a square input of side `input`.
    fn feature_size(&self, input: usize) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// 121-layer densely connected network (growth 32, blocks 6/12/24/16).
    Densenet121,
    /// Four 3×3 convolutions with three 2×2 max-pools, for desk-scale runs.
    Tiny,
}

/// Builds a backbone, registering its weights under `backbone.`.
pub fn build(kind: BackboneKind, store: &mut ParamStore<f32>, seed: u64) -> Box<dyn Backbone> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        BackboneKind::Densenet121 => Box::new(DenseNet::new(store, "backbone.features", &[6, 12, 24, 16], 32, 64, 4, &mut rng)),
        BackboneKind::Tiny => Box::new(TinyCnn::new(store, "backbone", &mut rng)),
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    norm1: BatchNorm2d,
    conv1: Conv2d,
    norm2: BatchNorm2d,
    conv2: Conv2d,
}

#[derive(Clone, Debug)]
struct Transition {
    norm: BatchNorm2d,
    conv: Conv2d,
}

/// Densely connected network with torchvision parameter names.
#[derive(Clone, Debug)]
pub struct DenseNet {
    conv0: Conv2d,
    norm0: BatchNorm2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm2d,
    out_channels: usize,
}

impl DenseNet {
    pub fn new(
        store: &mut ParamStore<f32>,
        prefix: &str,
        block_layers: &[usize],
        growth: usize,
        init_features: usize,
        bn_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv0 = Conv2d::new(store, &format!("{prefix}.conv0"), 3, init_features, 7, 2, 3, false, rng);
        let norm0 = BatchNorm2d::new(store, &format!("{prefix}.norm0"), init_features);
        let mut channels = init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &n) in block_layers.iter().enumerate() {
            let mut layers = Vec::with_capacity(n);
            for l in 0..n {
                let name = format!("{prefix}.denseblock{}.denselayer{}", b + 1, l + 1);
                let c_in = channels + l * growth;
                layers.push(DenseLayer {
                    norm1: BatchNorm2d::new(store, &format!("{name}.norm1"), c_in),
                    conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, bn_size * growth, 1, 1, 0, false, rng),
                    norm2: BatchNorm2d::new(store, &format!("{name}.norm2"), bn_size * growth),
                    conv2: Conv2d::new(store, &format!("{name}.conv2"), bn_size * growth, growth, 3, 1, 1, false, rng),
                });
            }
            blocks.push(layers);
            channels += n * growth;
            if b + 1 < block_layers.len() {
                let name = format!("{prefix}.transition{}", b + 1);
                transitions.push(Transition {
                    norm: BatchNorm2d::new(store, &format!("{name}.norm"), channels),
                    conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels / 2, 1, 1, 0, false, rng),
                });
                channels /= 2;
            }
        }
        let norm5 = BatchNorm2d::new(store, &format!("{prefix}.norm5"), channels);
        Self { conv0, norm0, blocks, transitions, norm5, out_channels: channels }
    }
}

impl Backbone for DenseNet {
    fn forward<'t>(&self, ctx: &Ctx<'t, '_, f32>, x: Var<'t, f32>) -> Var<'t, f32> {
        let mut h = self.norm0.forward(ctx, self.conv0.forward(ctx, x)).relu().max_pool2d(3, 2, 1);
        for (b, layers) in self.blocks.iter().enumerate() {
            let mut feats = vec![h];
            for l in layers {
                let cat = if feats.len() == 1 { feats[0] } else { Var::concat_channels(&feats) };
                let y = l.conv1.forward(ctx, l.norm1.forward(ctx, cat).relu());
                let y = l.conv2.forward(ctx, l.norm2.forward(ctx, y).relu());
                feats.push(y);
            }
            h = Var::concat_channels(&feats);
            if let Some(t) = self.transitions.get(b) {
                h = t.conv.forward(ctx, t.norm.forward(ctx, h).relu()).avg_pool2d(2, 2);
            }
        }
        self.norm5.forward(ctx, h).relu()
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn feature_size(&self, input: usize) -> usize {
        let conv0 = (input + 6 - 7) / 2 + 1;
        let mut s = (conv0 + 2 - 3) / 2 + 1;
        for _ in &self.transitions {
            s /= 2;
        }
        s
    }
}

/// Four conv3×3+ReLU layers (3→16→32→64→64), max-pooling after the first three.
#[derive(Clone, Debug)]
pub struct TinyCnn {
    convs: Vec<Conv2d>,
}

impl TinyCnn {
    pub fn new(store: &mut ParamStore<f32>, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let widths = [3, 16, 32, 64, 64];
        let convs = (0..4)
            .map(|i| Conv2d::same(store, &format!("{prefix}.conv{i}"), widths[i], widths[i + 1], 3, rng))
            .collect();
        Self { convs }
    }
}

impl Backbone for TinyCnn {
    fn forward<'t>(&self, ctx: &Ctx<'t, '_, f32>, x: Var<'t, f32>) -> Var<'t, f32> {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(ctx, h).relu();
            if i < 3 {
                h = h.max_pool2d(2, 2, 0);
            }
        }
        h
    }

    fn out_channels(&self) -> usize {
        64
    }

    fn feature_size(&self, input: usize) -> usize {
        input / 8
    }
}

/// Maps torchvision state-dict keys onto our parameter names: the legacy
/// `norm.1` spelling becomes `norm1`, and the `backbone.` prefix is added.
fn normalize_key(key: &str) -> Option<String> {
    if !key.starts_with("features.") || key.ends_with("num_batches_tracked") {
        return None;
    }
    let mut k = key.to_string();
    for (from, to) in [(".norm.1.", ".norm1."), (".norm.2.", ".norm2."), (".conv.1.", ".conv1."), (".conv.2.", ".conv2.")] {
        k = k.replace(from, to);
    }
    Some(format!("backbone.{k}"))
}

/// Loads ImageNet weights saved from a torchvision DenseNet-121 state dict
/// (safetensors). Every backbone entry must be present.
pub fn load_pretrained(store: &mut ParamStore<f32>, path: &Path) -> Result<usize> {
    let loaded = load_tensors::<f32>(path)?;
    let named: Vec<_> = loaded.tensors.into_iter().filter_map(|(k, t)| normalize_key(&k).map(|k| (k, t))).collect();
    let expected = store.iter().filter(|(n, _)| n.starts_with("backbone.")).count();
    if named.len() != expected {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("pretrained file has {} backbone tensors, model has {expected}", named.len()),
        });
    }
    store.load_named(&named).map_err(|msg| Error::Checkpoint { path: path.to_path_buf(), msg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cxr_tensor::{Tape, Tensor};

    #[test]
    fn densenet121_shape_and_size() {
        let mut store = ParamStore::new();
        let net = build(BackboneKind::Densenet121, &mut store, 0);
        assert_eq!(net.out_channels(), 1024);
        assert_eq!(net.feature_size(224), 7);
        // torchvision densenet121 features: 6,953,856 trainable scalars
        assert_eq!(store.num_trainable(), 6_953_856);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, false);
        let y = net.forward(&ctx, tape.constant(Tensor::from_fn(&[1, 3, 224, 224], |i| (i % 13) as f32 / 13.0)));
        assert_eq!(y.shape(), vec![1, 1024, 7, 7]);
        assert!(y.value().all_finite());
    }

    #[test]
    fn tiny_shape() {
        let mut store = ParamStore::new();
        let net = build(BackboneKind::Tiny, &mut store, 0);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store, false);
        let y = net.forward(&ctx, tape.constant(Tensor::ones(&[2, 3, 64, 64])));
        assert_eq!(y.shape(), vec![2, 64, 8, 8]);
        assert_eq!(net.feature_size(64), 8);
    }

    #[test]
    fn torchvision_keys_map_onto_store_names() {
        assert_eq!(
            normalize_key("features.denseblock1.denselayer1.norm.1.weight").as_deref(),
            Some("backbone.features.denseblock1.denselayer1.norm1.weight")
        );
        assert_eq!(normalize_key("features.norm0.num_batches_tracked"), None);
        assert_eq!(normalize_key("classifier.weight"), None);
    }

    #[test]
    fn pretrained_round_trip() {
        let mut store = ParamStore::new();
        build(BackboneKind::Densenet121, &mut store, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let tensors: Vec<_> = store
            .iter()
            .map(|(n, t)| (n.trim_start_matches("backbone.").to_string(), t.map(|v| v + 1.0)))
            .collect();
        cxr_tensor::io::save_tensors(&path, &tensors, Default::default()).unwrap();
        let mut fresh = ParamStore::new();
        build(BackboneKind::Densenet121, &mut fresh, 1);
        load_pretrained(&mut fresh, &path).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
            assert_eq!(a.map(|v| v + 1.0), *b);
        }
    }
}
