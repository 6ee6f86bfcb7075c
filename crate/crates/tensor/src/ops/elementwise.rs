use crate::{Element, Tensor, Var};

impl<'t, T: Element> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape().op(out, &[self, other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape().op(out, &[self, other], |g| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape().op(out, &[self, other], move |g| {
            vec![Some(g.zip_map(&b, |g, y| g * y)), Some(g.zip_map(&a, |g, x| g * x))]
        })
    }

    /// Multiplies an `N×C×H×W` tensor by an `N×1×H×W` map broadcast over channels.
    pub fn mul_spatial(self, map: Var<'t, T>) -> Var<'t, T> {
        let (x, m) = (self.value(), map.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(m.shape(), &[n, 1, h, w], "mul_spatial: map must be N×1×H×W");
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        {
            let od = out.data_mut();
            for b in 0..n {
                let mrow = &m.data()[b * hw..(b + 1) * hw];
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for (k, &mv) in mrow.iter().enumerate() {
                        od[base + k] = x.data()[base + k] * mv;
                    }
                }
            }
        }
        self.tape().op(out, &[self, map], move |g| {
            let mut gx = Tensor::zeros(x.shape());
            let mut gm = Tensor::zeros(m.shape());
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for k in 0..hw {
                        let gv = g.data()[base + k];
                        gx.data_mut()[base + k] = gv * m.data()[b * hw + k];
                        gm.data_mut()[b * hw + k] += gv * x.data()[base + k];
                    }
                }
            }
            vec![Some(gx), Some(gm)]
        })
    }

    /// Adds a per-channel bias of length C to an `N×C×...` tensor.
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Var<'t, T> {
        let (x, b) = (self.value(), bias.value());
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(b.shape(), &[c], "bias length must equal channel count");
        let inner = x.len() / (n * c);
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b.data()[i % c];
            for v in chunk {
                *v += bv;
            }
        }
        self.tape().op(out, &[self, bias], move |g| {
            let mut gb = Tensor::zeros(&[c]);
            for (i, chunk) in g.data().chunks(inner).enumerate() {
                gb.data_mut()[i % c] += chunk.iter().copied().sum();
            }
            vec![Some(g.clone()), Some(gb)]
        })
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.tape().op(out, &[self], move |g| vec![Some(g.map(|v| v * s))])
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape().op(out, &[self], move |g| {
            vec![Some(g.zip_map(&x, |g, v| if v > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.tape().op(out, &[self], move |g| {
            vec![Some(g.zip_map(&y, |g, s| g * s * (T::one() - s)))]
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().op(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::c(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.tape().op(out, &[self], move |g| vec![Some(g.clone().reshape(&old))])
    }

    /// Concatenates `N×Ci×H×W` tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat: batch/spatial mismatch");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for (v, &c) in values.iter().zip(&chans) {
                let src = &v.data()[b * c * hw..(b + 1) * c * hw];
                let dst = (b * total + offset) * hw;
                out.data_mut()[dst..dst + c * hw].copy_from_slice(src);
                offset += c;
            }
        }
        parts[0].tape().op(out, parts, move |g| {
            let mut grads = Vec::with_capacity(chans.len());
            let mut offset = 0;
            for &c in &chans {
                let mut gp = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let src = (b * total + offset) * hw;
                    gp.data_mut()[b * c * hw..(b + 1) * c * hw].copy_from_slice(&g.data()[src..src + c * hw]);
                }
                offset += c;
                grads.push(Some(gp));
            }
            grads
        })
    }

    /// Per-position maximum and mean over channels, `N×C×H×W → N×2×H×W`
    /// (channel 0 max, channel 1 mean).
    pub fn channel_max_mean(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, 2, h, w]);
        let mut argmax = vec![0usize; n * hw];
        let inv_c = T::one() / T::c(c as f64);
        for b in 0..n {
            for k in 0..hw {
                let mut best = x.data()[b * c * hw + k];
                let mut best_ch = 0;
                let mut acc = T::zero();
                for ch in 0..c {
                    let v = x.data()[(b * c + ch) * hw + k];
                    acc += v;
                    if v > best {
                        best = v;
                        best_ch = ch;
                    }
                }
                argmax[b * hw + k] = best_ch;
                out.data_mut()[b * 2 * hw + k] = best;
                out.data_mut()[(b * 2 + 1) * hw + k] = acc * inv_c;
            }
        }
        self.tape().op(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for k in 0..hw {
                    let gmax = g.data()[b * 2 * hw + k];
                    let gmean = g.data()[(b * 2 + 1) * hw + k] * inv_c;
                    for ch in 0..c {
                        gx.data_mut()[(b * c + ch) * hw + k] += gmean;
                    }
                    gx.data_mut()[(b * c + argmax[b * hw + k]) * hw + k] += gmax;
                }
            }
            vec![Some(gx)]
        })
    }
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
