use crate::{Element, Tensor, Var};

/// Batch statistics gathered by a train-mode batch norm.
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance, as tracked by running statistics.
    pub var: Tensor<T>,
}

fn channel_view<T: Element>(x: &Tensor<T>) -> (usize, usize, usize) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    (n, c, x.len() / (n * c))
}

impl<'t, T: Element> Var<'t, T> {
    /// Normalises each channel with its batch mean and (biased) variance.
    pub fn batch_norm_train(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> (Var<'t, T>, BatchStats<T>) {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let (n, c, inner) = channel_view(&x);
        let m = n * inner;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, chunk) in x.data().chunks(inner).enumerate() {
            mean[i % c] += chunk.iter().copied().sum();
        }
        let inv_m = T::one() / T::c(m as f64);
        mean.iter_mut().for_each(|v| *v *= inv_m);
        for (i, chunk) in x.data().chunks(inner).enumerate() {
            let mu = mean[i % c];
            var[i % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum();
        }
        var.iter_mut().for_each(|v| *v *= inv_m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for (i, (chunk, (hchunk, ochunk))) in x
            .data()
            .chunks(inner)
            .zip(xhat.data_mut().chunks_mut(inner).zip(out.data_mut().chunks_mut(inner)))
            .enumerate()
        {
            let ch = i % c;
            for ((&v, h), o) in chunk.iter().zip(hchunk.iter_mut()).zip(ochunk.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *o = gm.data()[ch] * *h + bt.data()[ch];
            }
        }
        let unbias = if m > 1 { T::c(m as f64 / (m as f64 - 1.0)) } else { T::one() };
        let stats = BatchStats {
            mean: Tensor::new(&[c], mean),
            var: Tensor::new(&[c], var.iter().map(|&v| v * unbias).collect()),
        };
        let y = self.tape().op(out, &[self, gamma, beta], move |g| {
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (i, (gc, hc)) in g.data().chunks(inner).zip(xhat.data().chunks(inner)).enumerate() {
                for (&gv, &hv) in gc.iter().zip(hc) {
                    sum_g[i % c] += gv;
                    sum_gx[i % c] += gv * hv;
                }
            }
            let mut gx = Tensor::zeros(xhat.shape());
            let mf = T::c(m as f64);
            for (i, ((gc, hc), dc)) in g
                .data()
                .chunks(inner)
                .zip(xhat.data().chunks(inner))
                .zip(gx.data_mut().chunks_mut(inner))
                .enumerate()
            {
                let ch = i % c;
                let k = gm.data()[ch] * inv_std[ch] * inv_m;
                for ((&gv, &hv), d) in gc.iter().zip(hc).zip(dc.iter_mut()) {
                    *d = k * (mf * gv - sum_g[ch] - hv * sum_gx[ch]);
                }
            }
            vec![Some(gx), Some(Tensor::new(&[c], sum_gx)), Some(Tensor::new(&[c], sum_g))]
        });
        (y, stats)
    }

    /// Normalises with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Var<'t, T> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let (_, c, inner) = channel_view(&x);
        let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mu = mean.data().to_vec();
        let mut out = Tensor::zeros(x.shape());
        for (i, (xc, oc)) in x.data().chunks(inner).zip(out.data_mut().chunks_mut(inner)).enumerate() {
            let ch = i % c;
            let scale = gm.data()[ch] * inv_std[ch];
            let shift = bt.data()[ch] - mu[ch] * scale;
            for (&v, o) in xc.iter().zip(oc.iter_mut()) {
                *o = v * scale + shift;
            }
        }
        self.tape().op(out, &[self, gamma, beta], move |g| {
            let mut gx = Tensor::zeros(x.shape());
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for (i, ((gc, xc), dc)) in
                g.data().chunks(inner).zip(x.data().chunks(inner)).zip(gx.data_mut().chunks_mut(inner)).enumerate()
            {
                let ch = i % c;
                for ((&gv, &xv), d) in gc.iter().zip(xc).zip(dc.iter_mut()) {
                    *d = gv * gm.data()[ch] * inv_std[ch];
                    ggamma[ch] += gv * (xv - mu[ch]) * inv_std[ch];
                    gbeta[ch] += gv;
                }
            }
            vec![Some(gx), Some(Tensor::new(&[c], ggamma)), Some(Tensor::new(&[c], gbeta))]
        })
    }
}
