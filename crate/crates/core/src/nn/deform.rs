//! Deformable convolution (v1, no modulation mask).
//!
//! Each kernel tap `k` of output pixel `(oh, ow)` reads the input at
//! `(oh*sh - ph + ki + dy, ow*sw - pw + kj + dx)` by bilinear interpolation,
//! with zeros outside the image. Offsets are laid out as
//! `[B, 2*kh*kw, H', W']` with channel `2k` holding `dy` and `2k+1` holding
//! `dx` for tap `k = ki*kw + kj`.

use super::conv::{conv_cols_backward, conv_from_cols, Conv2d, ConvGeom};
use crate::error::{Error, Result};
use crate::module::{impl_module, ForwardCtx, ParamBuilder};
use crate::tensor::{BackwardFn, Real, Tensor};

/// Bilinear read of `img[h, w]` at fractional `(y, x)`, zero outside.
/// Returns the value and its partial derivatives in `y` and `x`.
#[inline]
fn sample<T: Real>(img: &[T], h: usize, w: usize, y: T, x: T) -> (T, T, T) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    let (iy, ix) = (y0.as_f64() as i64, x0.as_f64() as i64);
    let at = |r: i64, c: i64| {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            img[r as usize * w + c as usize]
        } else {
            T::zero()
        }
    };
    let (v00, v01, v10, v11) = (at(iy, ix), at(iy, ix + 1), at(iy + 1, ix), at(iy + 1, ix + 1));
    let v = hy * (hx * v00 + lx * v01) + ly * (hx * v10 + lx * v11);
    let dy = hx * (v10 - v00) + lx * (v11 - v01);
    let dx = hy * (v01 - v00) + ly * (v11 - v10);
    (v, dy, dx)
}

/// Adjoint of [`sample`] with respect to the image.
#[inline]
fn scatter<T: Real>(img: &mut [T], h: usize, w: usize, y: T, x: T, g: T) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    let (iy, ix) = (y0.as_f64() as i64, x0.as_f64() as i64);
    let mut put = |r: i64, c: i64, wgt: T| {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            img[r as usize * w + c as usize] += g * wgt;
        }
    };
    put(iy, ix, hy * hx);
    put(iy, ix + 1, hy * lx);
    put(iy + 1, ix, ly * hx);
    put(iy + 1, ix + 1, ly * lx);
}

/// Deformable convolution with externally supplied offsets.
pub fn deform_conv2d<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new("deform_conv2d", x.shape(), weight.shape(), stride, padding)?;
    let taps = geom.kh * geom.kw;
    let expect = [geom.batch, 2 * taps, geom.ho, geom.wo];
    if offsets.shape() != expect {
        return Err(Error::shape("deform_conv2d", &expect, offsets.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [geom.cout] {
            return Err(Error::shape("deform_conv2d", weight.shape(), b.shape()));
        }
    }
    let (k, p) = (geom.k(), geom.out_pixels());
    let plane = geom.h * geom.w;
    let img = geom.cin * plane;
    let xd = x.data();
    let od = offsets.data();

    // Sampling positions per (batch, tap, pixel), shared by every channel.
    let mut pos_y = vec![T::zero(); geom.batch * taps * p];
    let mut pos_x = vec![T::zero(); geom.batch * taps * p];
    for b in 0..geom.batch {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let tap = ki * geom.kw + kj;
                let oy = &od[(b * 2 * taps + 2 * tap) * p..][..p];
                let ox = &od[(b * 2 * taps + 2 * tap + 1) * p..][..p];
                for oh in 0..geom.ho {
                    for ow in 0..geom.wo {
                        let o = oh * geom.wo + ow;
                        let base_y = (oh * geom.sh + ki) as f64 - geom.ph as f64;
                        let base_x = (ow * geom.sw + kj) as f64 - geom.pw as f64;
                        pos_y[(b * taps + tap) * p + o] = T::from_f64(base_y) + oy[o];
                        pos_x[(b * taps + tap) * p + o] = T::from_f64(base_x) + ox[o];
                    }
                }
            }
        }
    }

    if crate::tensor::kink::enabled() {
        let cells = pos_y.iter().chain(&pos_x).map(|v| v.floor().as_f64() as i64 as u64);
        crate::tensor::kink::record(cells);
    }

    let mut cols = vec![T::zero(); geom.batch * k * p];
    for b in 0..geom.batch {
        for c in 0..geom.cin {
            let src = &xd[b * img + c * plane..][..plane];
            for tap in 0..taps {
                let row = &mut cols[(b * k + c * taps + tap) * p..][..p];
                let py = &pos_y[(b * taps + tap) * p..][..p];
                let px = &pos_x[(b * taps + tap) * p..][..p];
                for o in 0..p {
                    row[o] = sample(src, geom.h, geom.w, py[o], px[o]).0;
                }
            }
        }
    }
    let out = conv_from_cols(&geom, &cols, weight.data(), bias.map(|b| b.data()));

    let mut parents = vec![x.clone(), offsets.clone(), weight.clone()];
    parents.extend(bias.cloned());
    let (x2, w2) = (x.clone(), weight.clone());
    let n_off = offsets.numel();
    let backward: BackwardFn<T> = Box::new(move |gout, needs| {
        let need_b = needs.get(3).copied().unwrap_or(false);
        let need_cols = needs[0] || needs[1];
        let (gcols, gw, gb) = conv_cols_backward(&geom, gout, &cols, w2.data(), need_cols, needs[2], need_b);
        let xd = x2.data();
        let mut gx = needs[0].then(|| vec![T::zero(); xd.len()]);
        let mut goff = needs[1].then(|| vec![T::zero(); n_off]);
        if let Some(gc) = gcols.as_ref() {
            for b in 0..geom.batch {
                for c in 0..geom.cin {
                    let src = &xd[b * img + c * plane..][..plane];
                    for tap in 0..taps {
                        let grow = &gc[(b * k + c * taps + tap) * p..][..p];
                        let py = &pos_y[(b * taps + tap) * p..][..p];
                        let px = &pos_x[(b * taps + tap) * p..][..p];
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[b * img + c * plane..][..plane];
                            for o in 0..p {
                                scatter(dst, geom.h, geom.w, py[o], px[o], grow[o]);
                            }
                        }
                        if let Some(goff) = goff.as_mut() {
                            let base = b * 2 * taps * p;
                            for o in 0..p {
                                let (_, dy, dx) = sample(src, geom.h, geom.w, py[o], px[o]);
                                goff[base + 2 * tap * p + o] += grow[o] * dy;
                                goff[base + (2 * tap + 1) * p + o] += grow[o] * dx;
                            }
                        }
                    }
                }
            }
        }
        let mut grads = vec![gx, goff, gw];
        if needs.len() == 4 {
            grads.push(gb);
        }
        grads
    });
    Ok(Tensor::from_op("deform_conv2d", out, geom.out_shape(), parents, backward))
}

/// Deformable layer: a main kernel plus a same-geometry offset predictor
/// that starts at exactly zero, so a fresh layer behaves as `main`.
pub struct DeformConv2d<T: Real> {
    pub main: Conv2d<T>,
    pub offset: Conv2d<T>,
}

impl_module!(DeformConv2d { main, offset });

impl<T: Real> DeformConv2d<T> {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize, kernel: (usize, usize), bias: bool) -> Self {
        let padding = (kernel.0 / 2, kernel.1 / 2);
        let main = Conv2d::with_geometry(&pb.sub("main"), cin, cout, kernel, (1, 1), padding, bias);
        let offset = Conv2d::zeroed(
            &pb.sub("offset"),
            cin,
            2 * kernel.0 * kernel.1,
            kernel,
            (1, 1),
            padding,
        );
        DeformConv2d { main, offset }
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.main.kernel()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.main.macs(h, w) + self.offset.macs(h, w)
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let off = self.offset.forward(x, ctx)?;
        let y = deform_conv2d(
            x,
            &off,
            self.main.weight.tensor(),
            self.main.bias.as_ref().map(|b| b.tensor()),
            self.main.stride,
            self.main.padding,
        )?;
        ctx.count_macs(self.main.macs(x.shape()[2], x.shape()[3]) * x.shape()[0] as u64);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn zero_offsets_equal_conv_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kernel in [[3, 1], [1, 3], [3, 3]] {
            let x = rand_t(&[2, 3, 5, 6], &mut rng);
            let w = rand_t(&[4, 3, kernel[0], kernel[1]], &mut rng);
            let b = rand_t(&[4], &mut rng);
            let pad = (kernel[0] / 2, kernel[1] / 2);
            let off = Tensor::zeros(&[2, 2 * kernel[0] * kernel[1], 5, 6]);
            let d = deform_conv2d(&x, &off, &w, Some(&b), (1, 1), pad).unwrap();
            let c = conv2d(&x, &w, Some(&b), (1, 1), pad).unwrap();
            assert_eq!(d.data(), c.data());
        }
    }

    #[test]
    fn constant_field_is_translation_invariant() {
        let x = Tensor::<f64>::full(&[1, 1, 8, 8], 2.5);
        let w = Tensor::<f64>::from_f64(&[0.3, -0.7, 1.1], &[1, 1, 3, 1]).unwrap();
        let zero = Tensor::zeros(&[1, 6, 8, 8]);
        let mut shifted = vec![0.0; 6 * 64];
        for tap in 0..3 {
            shifted[2 * tap * 64..(2 * tap + 1) * 64].fill(1.0);
        }
        let shift = Tensor::new(shifted, &[1, 6, 8, 8]).unwrap();
        let a = deform_conv2d(&x, &zero, &w, None, (1, 1), (1, 0)).unwrap();
        let b = deform_conv2d(&x, &shift, &w, None, (1, 1), (1, 0)).unwrap();
        // Interior rows whose shifted taps stay inside the image.
        for r in 1..5 {
            for c in 0..8 {
                let i = r * 8 + c;
                assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_layer_has_zero_offset_predictor() {
        let layer = DeformConv2d::<f32>::new(&ParamBuilder::new(1), 4, 4, (1, 3), true);
        assert!(layer.offset.weight.data().iter().all(|&v| v == 0.0));
        assert!(layer.offset.bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(layer.offset.out_channels(), 6);
    }
}
