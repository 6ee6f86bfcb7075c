//! Parameterised layers on top of the autograd tape.

use cxr_tensor::{init, Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Everything a layer needs for one forward pass.
pub struct Ctx<'t, 's, T: Element> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
    /// Batch statistics and running-stat updates when true.
    pub train: bool,
}

impl<'t, 's, T: Element> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, train: bool) -> Self {
        Self { tape, store, train }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id)
    }
}

/// Writes running-statistic updates recorded during a train-mode pass.
pub fn apply_buffer_updates<T: Element>(tape: &Tape<T>, store: &mut ParamStore<T>) {
    for (id, value) in tape.take_buffer_updates() {
        store.set(id, value);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-uniform weights; bias drawn from the fan-in uniform.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(&format!("{name}.weight"), init::kaiming_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| store.add(&format!("{name}.bias"), init::fan_in_uniform(&[c_out], fan_in, rng)));
        Self { weight, bias, stride, padding }
    }

    /// Same-padded stride-1 convolution.
    pub fn same<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, c_in, c_out, kernel, 1, kernel / 2, true, rng)
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        x.conv2d(w, b, self.stride, self.padding)
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = c_out * 4;
        let weight = store.add(&format!("{name}.weight"), init::kaiming_uniform(&[c_in, c_out, 2, 2], fan_in, rng));
        let bias = store.add(&format!("{name}.bias"), init::fan_in_uniform(&[c_out], fan_in, rng));
        Self { weight, bias }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv_transpose2x2(ctx.param(self.weight), Some(ctx.param(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            weight: store.add(&format!("{name}.weight"), Tensor::ones(&[channels])),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let g = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let eps = T::c(BN_EPS);
        if ctx.train {
            let (y, stats) = x.batch_norm_train(g, b, eps);
            let m = T::c(BN_MOMENTUM);
            let keep = T::one() - m;
            let mean = ctx.store.get(self.running_mean).zip_map(&stats.mean, |r, s| keep * r + m * s);
            let var = ctx.store.get(self.running_var).zip_map(&stats.var, |r, s| keep * r + m * s);
            ctx.tape.record_buffer_update(self.running_mean, mean);
            ctx.tape.record_buffer_update(self.running_var, var);
            y
        } else {
            x.batch_norm_eval(g, b, ctx.store.get(self.running_mean), ctx.store.get(self.running_var), eps)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(&format!("{name}.weight"), init::fan_in_uniform(&[c_out, c_in], c_in, rng)),
            bias: store.add(&format!("{name}.bias"), init::fan_in_uniform(&[c_out], c_in, rng)),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(ctx.param(self.weight), Some(ctx.param(self.bias)))
    }
}
