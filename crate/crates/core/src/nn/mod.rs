//! Network primitives and small layers built on [`crate::tensor`].

mod conv;
mod deform;
mod norm;
mod pool;
mod resize;

use rand::Rng;

pub use conv::{conv2d, Conv2d};
pub use deform::{deform_conv2d, DeformConv2d};
pub use norm::{batch_norm, BatchNorm2d, BatchStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::{adaptive_avg_pool, adaptive_bins, global_max_pool};
pub use resize::{bilinear_resize, nearest_resize, resize, upsample, Upsample};

use crate::error::{Error, Result};
use crate::module::{impl_module, ForwardCtx, Module, ParamBuilder, Parameter};
use crate::tensor::{BackwardFn, Real, Tensor};

pub struct Linear<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(pb: &ParamBuilder, in_features: usize, out_features: usize, bias: bool) -> Self {
        let bound = (3.0 / in_features as f64).sqrt();
        Linear {
            weight: pb.uniform("weight", &[out_features, in_features], bound),
            bias: bias.then(|| pb.uniform("bias", &[out_features], 1.0 / (in_features as f64).sqrt())),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let rows = (x.numel() / self.in_features().max(1)) as u64;
        ctx.count_macs(rows * (self.in_features() * self.out_features()) as u64);
        x.linear(self.weight.tensor(), self.bias.as_ref().map(|b| b.tensor()))
    }
}

impl<T: Real> Module<T> for Linear<T> {
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

/// Inverted dropout: survivors are scaled by `1/(1-rate)`. Identity in eval
/// mode or when `rate == 0`.
pub fn dropout<T: Real>(x: &Tensor<T>, rate: f64, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} outside [0,1)")));
    }
    if !ctx.is_train() || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let rng = ctx.rng();
    let mask = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    x.mul(&Tensor::new(mask, x.shape())?)
}

/// `[B,C,H,W] -> [B,H*W,C]`: one token per pixel.
pub fn to_tokens<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("to_tokens", format!("expected [B,C,H,W], got {s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// `[B,H*W,C] -> [B,C,H,W]`.
pub fn from_tokens<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::invalid("from_tokens", format!("{s:?} is not a {h}x{w} token grid")));
    }
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}

/// Gathers the `window x window` neighbourhood of every pixel (zero padded):
/// `[B,C,H,W] -> [B, H*W, window^2, C]`. Neighbour `j = (dy+r)*window + (dx+r)`.
pub fn neighborhood_gather<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("neighborhood_gather", format!("expected [B,C,H,W], got {s:?}")));
    }
    if window % 2 == 0 {
        return Err(Error::invalid("neighborhood_gather", format!("window {window} must be odd")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = (window / 2) as isize;
    let taps = window * window;
    // Source index for every (b, pixel, tap), or None for padding.
    let mut src: Vec<Option<usize>> = Vec::with_capacity(b * h * w * taps);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xs) = (y as isize + dy, xx as isize + dx);
                        let inside = yy >= 0 && xs >= 0 && (yy as usize) < h && (xs as usize) < w;
                        src.push(inside.then(|| bi * c * h * w + yy as usize * w + xs as usize));
                    }
                }
            }
        }
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); src.len() * c];
    for (t, s) in src.iter().enumerate() {
        if let Some(base) = s {
            for ch in 0..c {
                out[t * c + ch] = xd[base + ch * plane];
            }
        }
    }
    let n = x.numel();
    let backward: BackwardFn<T> = Box::new(move |g, _| {
        let mut gx = vec![T::zero(); n];
        for (t, s) in src.iter().enumerate() {
            if let Some(base) = s {
                for ch in 0..c {
                    gx[base + ch * plane] += g[t * c + ch];
                }
            }
        }
        vec![Some(gx)]
    });
    Ok(Tensor::from_op(
        "neighborhood_gather",
        out,
        vec![b, h * w, taps, c],
        vec![x.clone()],
        backward,
    ))
}

/// Convolution followed by batch normalization, optionally ReLU.
pub struct ConvBn<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

impl_module!(ConvBn { conv, bn });

impl<T: Real> ConvBn<T> {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvBn {
            conv: Conv2d::new(&pb.sub("conv"), cin, cout, kernel, stride, false),
            bn: BatchNorm2d::new(&pb.sub("bn"), cout),
            relu,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x, ctx)?, ctx)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_eval_is_identity() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0], &[3]).unwrap();
        let y = dropout(&x, 0.5, &mut ForwardCtx::eval()).unwrap();
        assert!(y.ptr_eq(&x));
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let x = Tensor::<f64>::ones(&[1000]);
        let y = dropout(&x, 0.25, &mut ForwardCtx::train(3)).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        assert!((650..850).contains(&kept), "{kept}");
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::<f64>::from_f64(&(0..24).map(f64::from).collect::<Vec<_>>(), &[1, 2, 3, 4]).unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[1, 12, 2]);
        assert_eq!(&t.data()[..4], &[0.0, 12.0, 1.0, 13.0]);
        assert_eq!(from_tokens(&t, 3, 4).unwrap().data(), x.data());
    }

    #[test]
    fn corner_neighbourhood_padding() {
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let g = neighborhood_gather(&x, 3).unwrap();
        assert_eq!(g.shape(), &[1, 16, 9, 1]);
        let corner = &g.data()[..9];
        assert_eq!(corner.iter().filter(|&&v| v == 1.0).count(), 4);
        let interior = &g.data()[5 * 9..6 * 9];
        assert!(interior.iter().all(|&v| v == 1.0));
        assert!(neighborhood_gather(&x, 2).is_err());
    }
}
