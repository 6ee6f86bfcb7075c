use crate::{gemm, Element, Tensor, Var};

impl<'t, T: Element> Var<'t, T> {
    /// `x · Wᵀ + b` for `x: N×K`, `W: O×K`, `b: O`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, k) = x.dims2();
        let (o, wk) = wt.dims2();
        assert_eq!(k, wk, "linear: input width {k} does not match weight width {wk}");
        let mut out = Tensor::zeros(&[n, o]);
        gemm(n, k, o, T::one(), x.data(), false, wt.data(), true, T::zero(), out.data_mut());
        let y = self.tape().op(out, &[self, weight], move |g| {
            let mut gx = Tensor::zeros(&[n, k]);
            let mut gw = Tensor::zeros(&[o, k]);
            gemm(n, o, k, T::one(), g.data(), false, wt.data(), false, T::zero(), gx.data_mut());
            gemm(o, n, k, T::one(), g.data(), true, x.data(), false, T::zero(), gw.data_mut());
            vec![Some(gx), Some(gw)]
        });
        match bias {
            Some(b) => y.add_channel_bias(b),
            None => y,
        }
    }
}
