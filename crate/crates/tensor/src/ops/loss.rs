use crate::{Element, Tensor, Var};

impl<'t, T: Element> Var<'t, T> {
    /// Mean binary cross-entropy between probabilities and `{0,1}` targets.
    /// Probabilities are clamped into `[eps, 1-eps]`; clamped entries pass
    /// no gradient.
    pub fn bce(self, targets: &Tensor<T>, eps: T) -> Var<'t, T> {
        let p = self.value();
        assert_eq!(p.shape(), targets.shape(), "bce: prediction/target shape mismatch");
        let count = T::c(p.len() as f64);
        let lo = eps;
        let hi = T::one() - eps;
        let total: T = p
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&pv, &y)| {
                let q = pv.max(lo).min(hi);
                -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum();
        let y = targets.clone();
        self.tape().op(Tensor::scalar(total / count), &[self], move |g| {
            let scale = g.data()[0] / count;
            let gp = p.zip_map(&y, |pv, yv| {
                if pv < lo || pv > hi {
                    T::zero()
                } else {
                    scale * ((T::one() - yv) / (T::one() - pv) - yv / pv)
                }
            });
            vec![Some(gp)]
        })
    }

    /// Soft dice loss over `N×S×H×W` probability maps: for every sample and
    /// structure `1 - (2·Σpg + smooth) / (Σp + Σg + smooth)`, averaged over the
    /// batch and summed over structures.
    pub fn soft_dice_loss(self, targets: &Tensor<T>, smooth: T) -> Var<'t, T> {
        let p = self.value();
        assert_eq!(p.shape(), targets.shape(), "soft_dice_loss: shape mismatch");
        let (n, s, h, w) = p.dims4();
        let hw = h * w;
        let two = T::c(2.0);
        let mut terms = Vec::with_capacity(n * s);
        let mut total = T::zero();
        for i in 0..n * s {
            let pv = &p.data()[i * hw..(i + 1) * hw];
            let gv = &targets.data()[i * hw..(i + 1) * hw];
            let inter: T = pv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
            let denom = pv.iter().copied().sum::<T>() + gv.iter().copied().sum::<T>() + smooth;
            let num = two * inter + smooth;
            total += T::one() - num / denom;
            terms.push((num, denom));
        }
        let inv_n = T::one() / T::c(n as f64);
        let g_t = targets.clone();
        self.tape().op(Tensor::scalar(total * inv_n), &[self], move |g| {
            let scale = g.data()[0] * inv_n;
            let mut gp = Tensor::zeros(&[n, s, h, w]);
            for (i, &(num, denom)) in terms.iter().enumerate() {
                let gv = &g_t.data()[i * hw..(i + 1) * hw];
                let out = &mut gp.data_mut()[i * hw..(i + 1) * hw];
                let d2 = denom * denom;
                for (o, &gt) in out.iter_mut().zip(gv) {
                    // d(num/denom)/dp = (2g·denom - num) / denom²
                    *o = -scale * (two * gt * denom - num) / d2;
                }
            }
            vec![Some(gp)]
        })
    }
}
