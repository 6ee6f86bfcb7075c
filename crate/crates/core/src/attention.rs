//! Multi-scale spatial attention applied to the input image before the
//! backbone.
//!
//! The image passes through an identity branch and one same-padded
//! convolution per configured kernel. Each branch is reduced to a
//! per-pixel channel max and mean, the resulting maps are stacked and a
//! single convolution plus sigmoid turns them into a `1×H×W` gate that
//! multiplies every image channel.

use cxr_tensor::{ops, Element, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core_ops::FeatureMap;
use crate::data_pipeline::ImageTensor;
use crate::nn::{Conv2d, Ctx};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Kernel sizes of the learned branches; the identity branch is implicit.
    pub scale_kernels: Vec<usize>,
    /// Kernel size of the convolution fusing the pooled maps into the gate.
    pub gate_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { scale_kernels: vec![5, 9], gate_kernel: 7 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_kernels.is_empty() {
            return Err(Error::Config("attention needs at least one scale branch besides identity".into()));
        }
        for &k in self.scale_kernels.iter().chain(std::iter::once(&self.gate_kernel)) {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("attention kernel {k} must be odd and at least 1")));
            }
        }
        Ok(())
    }
}

/// Post-sigmoid gate, every entry strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGate {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SpatialGate {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!("gate has {} entries, expected {height}×{width}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::contract(format!("gate entry {v} outside (0, 1)")));
        }
        Ok(Self { height, width, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Per-position channel maximum (channel 0) and mean (channel 1).
pub fn channel_pool<T: Element>(feature: &FeatureMap<T>) -> Tensor<T> {
    let (c, h, w) = (feature.channels(), feature.height(), feature.width());
    let tape = Tape::no_grad();
    let x = tape.constant(feature.tensor().clone().reshape(&[1, c, h, w]));
    let out = x.channel_max_mean().value();
    (*out).clone().reshape(&[2, h, w])
}

/// Sigmoid whose output is pulled inside `(0, 1)` when the logit is large
/// enough to round to exactly 0 or 1.
fn strict_sigmoid<'t, T: Element>(x: Var<'t, T>) -> Var<'t, T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon();
    let out = x.value().map(|v| ops::sigmoid(v).max(lo).min(hi));
    let y = out.clone();
    x.tape().op(out, &[x], move |g| vec![Some(g.zip_map(&y, |g, s| g * s * (T::one() - s)))])
}

/// Learned weights of the attention front end.
#[derive(Clone, Debug)]
pub struct MultiScaleAttention {
    branches: Vec<Conv2d>,
    kernels: Vec<usize>,
    gate: Conv2d,
    channels: usize,
}

impl MultiScaleAttention {
    /// Registers parameters under `{prefix}.branchN` and `{prefix}.gate`.
    /// Each learned branch keeps the image's channel count.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &AttentionConfig,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .scale_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| Conv2d::same(store, &format!("{prefix}.branch{}", i + 1), channels, channels, k, rng))
            .collect();
        let pooled = 2 * (cfg.scale_kernels.len() + 1);
        let gate = Conv2d::same(store, &format!("{prefix}.gate"), pooled, 1, cfg.gate_kernel, rng);
        Ok(Self { branches, kernels: cfg.scale_kernels.clone(), gate, channels })
    }

    pub fn gate_conv(&self) -> &Conv2d {
        &self.gate
    }

    pub fn branch_convs(&self) -> &[Conv2d] {
        &self.branches
    }

    /// Kernel size of each branch, identity first (reported as 1).
    pub fn branch_kernels(&self) -> Vec<usize> {
        std::iter::once(1).chain(self.kernels.iter().copied()).collect()
    }

    /// Branch outputs for an `N×C×H×W` input, identity first.
    pub fn scale_features<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        std::iter::once(x).chain(self.branches.iter().map(|b| b.forward(ctx, x))).collect()
    }

    /// Returns `(gated image, gate)` for an `N×C×H×W` input; the gate is `N×1×H×W`.
    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let pooled: Vec<_> = self.scale_features(ctx, x).into_iter().map(|f| f.channel_max_mean()).collect();
        let gate = strict_sigmoid(self.gate.forward(ctx, Var::concat_channels(&pooled)));
        (x.mul_spatial(gate), gate)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Output of one learned scale branch (or the identity for `branch == 0`)
/// on a single image.
pub fn scale_branch(
    module: &MultiScaleAttention,
    store: &ParamStore<f32>,
    image: &ImageTensor,
    branch: usize,
) -> Result<FeatureMap<f32>> {
    if branch > module.branches.len() {
        return Err(Error::contract(format!("branch {branch} out of range")));
    }
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, store, false);
    let x = tape.constant(image.batched());
    let out = if branch == 0 { x } else { module.branches[branch - 1].forward(&ctx, x) };
    FeatureMap::new((*out.value()).clone())
}

/// Gates one preprocessed image. The image must be `C×size×size`.
pub fn attention_forward(
    module: &MultiScaleAttention,
    store: &ParamStore<f32>,
    image: &ImageTensor,
    size: usize,
) -> Result<(ImageTensor, SpatialGate)> {
    if image.channels() != module.channels || image.height() != size || image.width() != size {
        return Err(Error::contract(format!(
            "attention expects {}×{size}×{size}, got {:?}",
            module.channels,
            image.tensor().shape()
        )));
    }
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, store, false);
    let (gated, gate) = module.forward(&ctx, tape.constant(image.batched()));
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let gated = ImageTensor::new((*gated.value()).clone().reshape(&[c, h, w]))?;
    let gate = SpatialGate::new(h, w, gate.value().data().to_vec())?;
    Ok((gated, gate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(store: &mut ParamStore<f32>) -> MultiScaleAttention {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        MultiScaleAttention::new(store, "attention", &AttentionConfig::default(), 3, &mut rng).unwrap()
    }

    fn random_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn(&[3, size, size], |_| rng.random_range(-2.0..2.0))).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::default().validate().is_ok());
        let even = AttentionConfig { scale_kernels: vec![5, 8], gate_kernel: 7 };
        assert!(matches!(even.validate(), Err(Error::Config(_))));
        let no_branch = AttentionConfig { scale_kernels: vec![], gate_kernel: 7 };
        assert!(no_branch.validate().is_err());
        let even_gate = AttentionConfig { scale_kernels: vec![5], gate_kernel: 4 };
        assert!(even_gate.validate().is_err());
    }

    #[test]
    fn channel_pool_examples() {
        let one = FeatureMap::new(Tensor::new(&[1, 1, 2], vec![3.0f32, -1.0])).unwrap();
        assert_eq!(channel_pool(&one).data(), &[3.0, -1.0, 3.0, -1.0]);
        let two = FeatureMap::new(Tensor::new(&[2, 1, 2], vec![1.0f32, 4.0, 3.0, 2.0])).unwrap();
        assert_eq!(channel_pool(&two).data(), &[3.0, 4.0, 2.0, 3.0]);
        let flat = FeatureMap::new(Tensor::full(&[4, 3, 3], 0.25f32)).unwrap();
        assert!(channel_pool(&flat).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn branches_keep_shape_and_identity_passes_through() {
        let mut store = ParamStore::new();
        let m = module(&mut store);
        let img = random_image(20, 1);
        assert_eq!(scale_branch(&m, &store, &img, 0).unwrap().tensor(), img.tensor());
        for b in 1..=2 {
            assert_eq!(scale_branch(&m, &store, &img, b).unwrap().tensor().shape(), &[3, 20, 20]);
        }
        let k9 = &m.branch_convs()[1];
        store.set(k9.weight, Tensor::zeros(&[3, 3, 9, 9]));
        store.set(k9.bias.unwrap(), Tensor::zeros(&[3]));
        assert!(scale_branch(&m, &store, &img, 2).unwrap().tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes_and_gate_range() {
        let mut store = ParamStore::new();
        let m = module(&mut store);
        let img = random_image(32, 2);
        let (gated, gate) = attention_forward(&m, &store, &img, 32).unwrap();
        assert_eq!(gated.tensor().shape(), img.tensor().shape());
        assert_eq!(gate.dims(), (32, 32));
        for (g, x) in gated.tensor().data().iter().zip(img.tensor().data()) {
            assert!(g.abs() <= x.abs());
        }
        assert!(attention_forward(&m, &store, &img, 224).is_err());
    }

    #[test]
    fn zero_fusion_gives_half_gate() {
        let mut store = ParamStore::new();
        let m = module(&mut store);
        let g = m.gate_conv().clone();
        let shape = store.get(g.weight).shape().to_vec();
        store.set(g.weight, Tensor::zeros(&shape));
        store.set(g.bias.unwrap(), Tensor::zeros(&[1]));
        let img = random_image(16, 5);
        let (gated, gate) = attention_forward(&m, &store, &img, 16).unwrap();
        assert!(gate.data().iter().all(|&v| v == 0.5));
        for (g, x) in gated.tensor().data().iter().zip(img.tensor().data()) {
            assert_eq!(*g, 0.5 * x);
        }
    }

    #[test]
    fn saturated_logits_stay_inside_open_interval() {
        let mut store = ParamStore::new();
        let m = module(&mut store);
        let g = m.gate_conv().clone();
        let shape = store.get(g.weight).shape().to_vec();
        store.set(g.weight, Tensor::zeros(&shape));
        for bias in [200.0f32, -200.0] {
            store.set(g.bias.unwrap(), Tensor::new(&[1], vec![bias]));
            let (_, gate) = attention_forward(&m, &store, &random_image(8, 6), 8).unwrap();
            assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut store = ParamStore::new();
        let m = module(&mut store);
        let img = random_image(24, 7);
        let a = attention_forward(&m, &store, &img, 24).unwrap();
        let b = attention_forward(&m, &store, &img, 24).unwrap();
        assert_eq!(a, b);
    }
}
