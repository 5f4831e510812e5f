use crate::error::{Error, Result};
use crate::module::{ForwardCtx, Module, ParamBuilder, Parameter};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, BackwardFn, Real, Tensor};

/// Geometry shared by standard and deformable convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        x: &[usize],
        w: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(op, x, w));
        }
        if x[1] != w[1] {
            return Err(Error::invalid(
                op,
                format!("input has {} channels but weight {w:?} expects {}", x[1], w[1]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        let (kh, kw) = (w[2], w[3]);
        let (hp, wp) = (x[2] + 2 * padding.0, x[3] + 2 * padding.1);
        if hp < kh || wp < kw {
            return Err(Error::invalid(op, format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}")));
        }
        Ok(ConvGeom {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho: (hp - kh) / stride.0 + 1,
            wo: (wp - kw) / stride.1 + 1,
        })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    /// Input row for output row `oh` and kernel row `ki`, if inside the image.
    #[inline]
    fn in_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.sh + ki).checked_sub(self.ph).filter(|&r| r < self.h)
    }

    #[inline]
    fn in_col(&self, ow: usize, kj: usize) -> Option<usize> {
        (ow * self.sw + kj).checked_sub(self.pw).filter(|&c| c < self.w)
    }

    /// Unfolds one image `[cin, h, w]` into columns `[cin*kh*kw, ho*wo]`.
    pub fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.out_pixels();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oh in 0..self.ho {
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        match self.in_row(oh, ki) {
                            None => dst.fill(T::zero()),
                            Some(ih) => {
                                let src = &img[(c * self.h + ih) * self.w..(c * self.h + ih + 1) * self.w];
                                for (ow, d) in dst.iter_mut().enumerate() {
                                    *d = self.in_col(ow, kj).map_or(T::zero(), |iw| src[iw]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto the image.
    pub fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.out_pixels();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oh in 0..self.ho {
                        let Some(ih) = self.in_row(oh, ki) else { continue };
                        let src = &cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        let dst = &mut img[(c * self.h + ih) * self.w..(c * self.h + ih + 1) * self.w];
                        for (ow, &v) in src.iter().enumerate() {
                            if let Some(iw) = self.in_col(ow, kj) {
                                dst[iw] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = W * cols[b] + bias`, shared by both convolution flavours so
/// that identical columns give bit-identical outputs.
pub(crate) fn conv_from_cols<T: Real>(g: &ConvGeom, cols: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (p, k) = (g.out_pixels(), g.k());
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    for b in 0..g.batch {
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        gemm_acc(weight, &cols[b * k * p..(b + 1) * k * p], ob, g.cout, k, p);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                ob[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of `conv_from_cols` w.r.t. (cols, weight, bias).
pub(crate) fn conv_cols_backward<T: Real>(
    g: &ConvGeom,
    gout: &[T],
    cols: &[T],
    weight: &[T],
    need_cols: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (p, k) = (g.out_pixels(), g.k());
    let mut gcols = need_cols.then(|| vec![T::zero(); g.batch * k * p]);
    let mut gw = need_w.then(|| vec![T::zero(); g.cout * k]);
    let mut gb = need_b.then(|| vec![T::zero(); g.cout]);
    for b in 0..g.batch {
        let go = &gout[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(gc) = gcols.as_mut() {
            gemm_tn_acc(weight, go, &mut gc[b * k * p..(b + 1) * k * p], g.cout, k, p);
        }
        if let Some(gw) = gw.as_mut() {
            gemm_nt_acc(go, &cols[b * k * p..(b + 1) * k * p], gw, g.cout, p, k);
        }
        if let Some(gb) = gb.as_mut() {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += go[oc * p..(oc + 1) * p].iter().copied().sum::<T>();
            }
        }
    }
    (gcols, gw, gb)
}

/// 2-D cross-correlation `[B,Cin,H,W] * [Cout,Cin,kh,kw] -> [B,Cout,H',W']`
/// with `H' = (H + 2p - k) / s + 1`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new("conv2d", x.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [geom.cout] {
            return Err(Error::shape("conv2d", weight.shape(), b.shape()));
        }
    }
    let (k, p) = (geom.k(), geom.out_pixels());
    let img = geom.cin * geom.h * geom.w;
    let mut cols = vec![T::zero(); geom.batch * k * p];
    for b in 0..geom.batch {
        geom.im2col(&x.data()[b * img..(b + 1) * img], &mut cols[b * k * p..(b + 1) * k * p]);
    }
    let out = conv_from_cols(&geom, &cols, weight.data(), bias.map(|b| b.data()));

    let mut parents = vec![x.clone(), weight.clone()];
    parents.extend(bias.cloned());
    let w2 = weight.clone();
    let backward: BackwardFn<T> = Box::new(move |gout, needs| {
        let need_b = needs.get(2).copied().unwrap_or(false);
        let (gcols, gw, gb) = conv_cols_backward(&geom, gout, &cols, w2.data(), needs[0], needs[1], need_b);
        let gx = gcols.map(|gc| {
            let mut gx = vec![T::zero(); geom.batch * img];
            for b in 0..geom.batch {
                geom.col2im(&gc[b * k * p..(b + 1) * k * p], &mut gx[b * img..(b + 1) * img]);
            }
            gx
        });
        let mut grads = vec![gx, gw];
        if needs.len() == 3 {
            grads.push(gb);
        }
        grads
    });
    Ok(Tensor::from_op("conv2d", out, geom.out_shape(), parents, backward))
}

/// Learnable convolution layer.
pub struct Conv2d<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// Square kernel, "same" padding for odd kernels at stride 1.
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        Self::with_geometry(pb, cin, cout, (kernel, kernel), (stride, stride), (kernel / 2, kernel / 2), bias)
    }

    pub fn with_geometry(
        pb: &ParamBuilder,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let bound = (3.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: pb.uniform("weight", &[cout, cin, kernel.0, kernel.1], bound),
            bias: bias.then(|| pb.uniform("bias", &[cout], 1.0 / (fan_in as f64).sqrt())),
            stride,
            padding,
        }
    }

    /// Same geometry with all weights and bias zero.
    pub fn zeroed(
        pb: &ParamBuilder,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        Conv2d {
            weight: pb.zeros("weight", &[cout, cin, kernel.0, kernel.1]),
            bias: Some(pb.zeros("bias", &[cout])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Output spatial size for an input of `h x w`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (
            (h + 2 * self.padding.0 - kh) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - kw) / self.stride.1 + 1,
        )
    }

    /// MACs for one image of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        let (kh, kw) = self.kernel();
        (self.out_channels() * ho * wo * self.in_channels() * kh * kw) as u64
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let y = conv2d(
            x,
            self.weight.tensor(),
            self.bias.as_ref().map(|b| b.tensor()),
            self.stride,
            self.padding,
        )?;
        ctx.count_macs(self.macs(x.shape()[2], x.shape()[3]) * x.shape()[0] as u64);
        Ok(y)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}
