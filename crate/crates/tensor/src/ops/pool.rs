use crate::{Element, Tensor, Var};

impl<'t, T: Element> Var<'t, T> {
    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = plane * h * w + best_idx;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.tape().op(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            for (o, &src) in argmax.iter().enumerate() {
                gx.data_mut()[src] += g.data()[o];
            }
            vec![Some(gx)]
        })
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let inv = T::one() / T::c((kernel * kernel) as f64);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += src[(oy * stride + ki) * w + ox * stride + kj];
                        }
                    }
                    out.data_mut()[(plane * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.tape().op(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            for plane in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.data()[(plane * oh + oy) * ow + ox] * inv;
                        for ki in 0..kernel {
                            for kj in 0..kernel {
                                gx.data_mut()[plane * h * w + (oy * stride + ki) * w + ox * stride + kj] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Mean over the spatial axes, `N×C×H×W → N×C`.
    pub fn global_avg_pool(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let inv = T::one() / T::c(hw as f64);
        let out = Tensor::from_fn(&[n, c], |i| x.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv);
        self.tape().op(out, &[self], move |g| {
            let gx = Tensor::from_fn(&[n, c, h, w], |i| g.data()[i / hw] * inv);
            vec![Some(gx)]
        })
    }
}
