use crate::{gemm, Element, Tensor, Var};

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding)
            .checked_sub(self.kh)
            .map(|v| v / self.stride + 1)
            .expect("kernel larger than padded input");
        let ow = (w + 2 * self.padding)
            .checked_sub(self.kw)
            .map(|v| v / self.stride + 1)
            .expect("kernel larger than padded input");
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad`
/// falls inside `[0, w)`.
fn valid_range(ow: usize, w: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize) {
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(stride) };
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw)×(oh·ow)` column matrix.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.output_hw(h, w);
    let pad = g.padding as isize;
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(ow, w, g.stride, kj, g.padding);
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (k, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d = src[first + k * g.stride];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, x: &mut [T]) {
    let (oh, ow) = g.output_hw(h, w);
    let pad = g.padding as isize;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_range(ow, w, g.stride, kj, g.padding);
                    if lo < hi {
                        let first = lo * g.stride + kj - g.padding;
                        for (k, &s) in src[oy * ow + lo..oy * ow + hi].iter().enumerate() {
                            prow[first + k * g.stride] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    /// Cross-correlation of `N×C×H×W` input with `O×C×kh×kw` weights.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, padding: usize) -> Var<'t, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4();
        let (o, wc, kh, kw) = wt.dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        assert!(stride >= 1, "conv2d: stride must be positive");
        let g = ConvGeom { kh, kw, stride, padding };
        let (oh, ow) = g.output_hw(h, w);
        let ck = c * kh * kw;
        let ohw = oh * ow;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * ohw] };
        for b in 0..n {
            let xb = x.item(b);
            let colsb: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, c, h, w, g, &mut cols);
                &cols
            };
            let ob = &mut out.data_mut()[b * o * ohw..(b + 1) * o * ohw];
            gemm(o, ck, ohw, T::one(), wt.data(), false, colsb, false, T::zero(), ob);
        }
        let conv = self.tape().op(out, &[self, weight], move |gout| {
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(wt.shape());
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * ohw] };
            let mut gcols = vec![T::zero(); ck * ohw];
            for b in 0..n {
                let gb = &gout.data()[b * o * ohw..(b + 1) * o * ohw];
                let xb = x.item(b);
                let colsb: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(xb, c, h, w, g, &mut cols);
                    &cols
                };
                gemm(o, ohw, ck, T::one(), gb, false, colsb, true, T::one(), gw.data_mut());
                let gxb = &mut gx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
                if g.is_pointwise() {
                    gemm(ck, o, ohw, T::one(), wt.data(), true, gb, false, T::zero(), gxb);
                } else {
                    gemm(ck, o, ohw, T::one(), wt.data(), true, gb, false, T::zero(), &mut gcols);
                    col2im(&gcols, c, h, w, g, gxb);
                }
            }
            vec![Some(gx), Some(gw)]
        });
        match bias {
            Some(b) => conv.add_channel_bias(b),
            None => conv,
        }
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (exact spatial
    /// doubling). Weight layout is `C_in×C_out×2×2`.
    pub fn conv_transpose2x2(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4();
        let (wc, o, kh, kw) = wt.dims4();
        assert_eq!((wc, kh, kw), (c, 2, 2), "conv_transpose2x2: weight must be C_in×C_out×2×2");
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let ok = o * 4;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let mut ycols = vec![T::zero(); ok * hw];
        for b in 0..n {
            // ycols[(o,a,b'), pix] = sum_c w[c,(o,a,b')] * x[c,pix]
            gemm(ok, c, hw, T::one(), wt.data(), true, x.item(b), false, T::zero(), &mut ycols);
            let ob = &mut out.data_mut()[b * o * oh * ow..(b + 1) * o * oh * ow];
            for oc in 0..o {
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &ycols[(oc * 4 + a * 2 + bb) * hw..][..hw];
                        for i in 0..h {
                            for j in 0..w {
                                ob[oc * oh * ow + (2 * i + a) * ow + 2 * j + bb] = row[i * w + j];
                            }
                        }
                    }
                }
            }
        }
        let up = self.tape().op(out, &[self, weight], move |gout| {
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(wt.shape());
            let mut gcols = vec![T::zero(); ok * hw];
            for b in 0..n {
                let gb = &gout.data()[b * o * oh * ow..(b + 1) * o * oh * ow];
                for oc in 0..o {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let row = &mut gcols[(oc * 4 + a * 2 + bb) * hw..][..hw];
                            for i in 0..h {
                                for j in 0..w {
                                    row[i * w + j] = gb[oc * oh * ow + (2 * i + a) * ow + 2 * j + bb];
                                }
                            }
                        }
                    }
                }
                let gxb = &mut gx.data_mut()[b * c * hw..(b + 1) * c * hw];
                gemm(c, ok, hw, T::one(), wt.data(), false, &gcols, false, T::zero(), gxb);
                gemm(c, hw, ok, T::one(), x.item(b), false, &gcols, true, T::one(), gw.data_mut());
            }
            vec![Some(gx), Some(gw)]
        });
        match bias {
            Some(b) => up.add_channel_bias(b),
            None => up,
        }
    }
}
