//! Cross-semantic interaction decoder.
//!
//! Takes the three deepest pyramid levels `f2, f3, f4` (strides 8/16/32),
//! projects them to a common width, aligns them on the stride-8 grid and
//! mixes them with channel and spatial gating:
//!
//! ```text
//! F4  = Up4(f4')
//! F3  = Up2(Conv(Up2(f4')) ⊕ f3')
//! F2  = Conv(Up4(f4') ⊕ Conv(Up2(f3')) ⊕ f2')
//! F31 = F3 * CA(F4)
//! F32 = F3 * SA(F2)
//! F̂   = OutConv(concat(F2, F31, F32, F4)),   P = Head(F̂)
//! ```
//!
//! `⊕` is elementwise multiplication in the multiplicative variant and
//! addition in the additive one. The gate products are multiplicative in
//! both variants.

use crate::attention::{ChannelAttention, SpatialAttention};
use crate::error::{Error, Result, ResultExt};
use crate::module::{impl_module, ForwardCtx, ParamBuilder};
use crate::nn::{upsample, Conv2d, ConvBn, Upsample};
use crate::tensor::{concat, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CidmVariant {
    Multiplicative,
    Additive,
}

impl CidmVariant {
    pub fn name(self) -> &'static str {
        match self {
            CidmVariant::Multiplicative => "cidm_m",
            CidmVariant::Additive => "cidm_a",
        }
    }

    fn combine<T: Real>(self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            CidmVariant::Multiplicative => a.mul(b),
            CidmVariant::Additive => a.add(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CidmConfig {
    /// Channels of f2, f3, f4.
    pub in_channels: [usize; 3],
    pub width: usize,
    pub reduction: usize,
    pub upsample: Upsample,
    pub variant: CidmVariant,
}

/// The aligned and gated maps, all `[B, width, H/8, W/8]`.
#[derive(Debug, Clone)]
pub struct CidmIntermediates<T: Real> {
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
    pub f31: Tensor<T>,
    pub f32: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct CidmOutput<T: Real> {
    /// Fused feature `[B, width, H/8, W/8]`.
    pub feature: Tensor<T>,
    /// Coarse logit map `[B, 1, H/8, W/8]`.
    pub logits: Tensor<T>,
    pub intermediates: CidmIntermediates<T>,
}

pub struct Cidm<T: Real> {
    pub proj2: Conv2d<T>,
    pub proj3: Conv2d<T>,
    pub proj4: Conv2d<T>,
    /// `Conv` applied to `Up2(f4')` in the F3 branch.
    pub conv3: ConvBn<T>,
    /// Inner `Conv` applied to `Up2(f3')` in the F2 branch.
    pub conv2_inner: ConvBn<T>,
    /// Outer `Conv` of the F2 branch.
    pub conv2_outer: ConvBn<T>,
    pub ca: ChannelAttention<T>,
    pub sa: SpatialAttention<T>,
    pub out_conv: ConvBn<T>,
    pub head: Conv2d<T>,
    pub config: CidmConfig,
}

impl_module!(Cidm { proj2, proj3, proj4, conv3, conv2_inner, conv2_outer, ca, sa, out_conv, head });

impl<T: Real> Cidm<T> {
    pub fn new(pb: &ParamBuilder, config: CidmConfig) -> Self {
        let [c2, c3, c4] = config.in_channels;
        let d = config.width;
        Cidm {
            proj2: Conv2d::new(&pb.sub("proj2"), c2, d, 1, 1, true),
            proj3: Conv2d::new(&pb.sub("proj3"), c3, d, 1, 1, true),
            proj4: Conv2d::new(&pb.sub("proj4"), c4, d, 1, 1, true),
            conv3: ConvBn::new(&pb.sub("conv3"), d, d, 3, 1, false),
            conv2_inner: ConvBn::new(&pb.sub("conv2_inner"), d, d, 3, 1, false),
            conv2_outer: ConvBn::new(&pb.sub("conv2_outer"), d, d, 3, 1, false),
            ca: ChannelAttention::new(&pb.sub("ca"), d, config.reduction),
            sa: SpatialAttention::new(&pb.sub("sa")),
            out_conv: ConvBn::new(&pb.sub("out_conv"), 4 * d, d, 3, 1, true),
            head: Conv2d::new(&pb.sub("head"), d, 1, 1, 1, true),
            config,
        }
    }

    fn check_pyramid(&self, f2: &Tensor<T>, f3: &Tensor<T>, f4: &Tensor<T>) -> Result<()> {
        let (s2, s3, s4) = (f2.shape(), f3.shape(), f4.shape());
        let ok = s2.len() == 4
            && s3.len() == 4
            && s4.len() == 4
            && s2[0] == s3[0]
            && s3[0] == s4[0]
            && s2[1] == self.config.in_channels[0]
            && s3[1] == self.config.in_channels[1]
            && s4[1] == self.config.in_channels[2]
            && s2[2] == 2 * s3[2]
            && s2[3] == 2 * s3[3]
            && s3[2] == 2 * s4[2]
            && s3[3] == 2 * s4[3];
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "cidm",
                format!("pyramid {s2:?}/{s3:?}/{s4:?} inconsistent with strides 8/16/32 and channels {:?}", self.config.in_channels),
            ))
        }
    }

    /// Projects and aligns the three levels onto the stride-8 grid.
    pub fn align(
        &self,
        f2: &Tensor<T>,
        f3: &Tensor<T>,
        f4: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        self.check_pyramid(f2, f3, f4)?;
        let up = self.config.upsample;
        let v = self.config.variant;
        let p2 = self.proj2.forward(f2, ctx)?;
        let p3 = self.proj3.forward(f3, ctx)?;
        let p4 = self.proj4.forward(f4, ctx)?;

        let p4_up2 = upsample(&p4, 2, up)?;
        let p4_up4 = upsample(&p4, 4, up)?;
        let big_f4 = p4_up4.clone();
        let big_f3 = upsample(&v.combine(&self.conv3.forward(&p4_up2, ctx)?, &p3)?, 2, up)?;
        let inner = self.conv2_inner.forward(&upsample(&p3, 2, up)?, ctx)?;
        let mixed = v.combine(&v.combine(&p4_up4, &inner)?, &p2)?;
        let big_f2 = self.conv2_outer.forward(&mixed, ctx)?;
        Ok((big_f2, big_f3, big_f4))
    }

    /// Gated interaction, fusion and the coarse head.
    pub fn interact(
        &self,
        f2: Tensor<T>,
        f3: Tensor<T>,
        f4: Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<CidmOutput<T>> {
        if f2.shape() != f3.shape() || f3.shape() != f4.shape() {
            return Err(Error::shape("cidm_interact", f2.shape(), f4.shape()));
        }
        let f31 = f3.mul(&self.ca.forward(&f4, ctx)?)?;
        let f32 = f3.mul(&self.sa.forward(&f2, ctx)?)?;
        let cat = concat(&[f2.clone(), f31.clone(), f32.clone(), f4.clone()], 1)?;
        let feature = self.out_conv.forward(&cat, ctx)?;
        let logits = self.head.forward(&feature, ctx)?;
        Ok(CidmOutput {
            feature,
            logits,
            intermediates: CidmIntermediates { f2, f3, f4, f31, f32 },
        })
    }

    pub fn forward(
        &self,
        f2: &Tensor<T>,
        f3: &Tensor<T>,
        f4: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<CidmOutput<T>> {
        let name = self.config.variant.name();
        let (a, b, c) = self.align(f2, f3, f4, ctx).in_module(name)?;
        self.interact(a, b, c, ctx).in_module(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Module;

    fn cfg(variant: CidmVariant) -> CidmConfig {
        CidmConfig {
            in_channels: [8, 12, 16],
            width: 8,
            reduction: 4,
            upsample: Upsample::Bilinear,
            variant,
        }
    }

    fn pyramid(b: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mk = |c: usize, s: usize, k: f64| {
            let n = b * c * s * s;
            Tensor::new((0..n).map(|i| ((i as f64) * k).sin()).collect(), &[b, c, s, s]).unwrap()
        };
        (mk(8, 8, 0.37), mk(12, 4, 0.91), mk(16, 2, 1.3))
    }

    #[test]
    fn shape_contract() {
        let m = Cidm::<f64>::new(&ParamBuilder::new(0), cfg(CidmVariant::Multiplicative));
        let (f2, f3, f4) = pyramid(2);
        let out = m.forward(&f2, &f3, &f4, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.feature.shape(), &[2, 8, 8, 8]);
        assert_eq!(out.logits.shape(), &[2, 1, 8, 8]);
        for t in [&out.intermediates.f2, &out.intermediates.f3, &out.intermediates.f4, &out.intermediates.f31, &out.intermediates.f32] {
            assert_eq!(t.shape(), &[2, 8, 8, 8]);
        }
        assert_eq!(m.out_conv.conv.in_channels(), 32);
    }

    #[test]
    fn inconsistent_pyramid_rejected() {
        let m = Cidm::<f64>::new(&ParamBuilder::new(0), cfg(CidmVariant::Additive));
        let (f2, f3, _) = pyramid(1);
        let err = m.forward(&f2, &f3, &f3, &mut ForwardCtx::eval()).unwrap_err();
        assert!(err.to_string().starts_with("cidm_a"), "{err}");
    }

    #[test]
    fn zero_gates_halve_f3() {
        let mut m = Cidm::<f64>::new(&ParamBuilder::new(3), cfg(CidmVariant::Multiplicative));
        for p in m.ca.parameters_mut().into_iter().chain(m.sa.parameters_mut()) {
            let n = p.numel();
            p.set_data(vec![0.0; n]).unwrap();
        }
        let (f2, f3, f4) = pyramid(1);
        let out = m.forward(&f2, &f3, &f4, &mut ForwardCtx::eval()).unwrap();
        let i = &out.intermediates;
        for ((&a, &b), &c) in i.f3.data().iter().zip(i.f31.data()).zip(i.f32.data()) {
            assert_eq!(b, 0.5 * a);
            assert_eq!(c, 0.5 * a);
        }
    }

    #[test]
    fn gradients_reach_all_levels_and_parameters() {
        let m = Cidm::<f64>::new(&ParamBuilder::new(4), cfg(CidmVariant::Additive));
        let (f2, f3, f4) = pyramid(2);
        let (f2, f3, f4) = (f2.into_leaf(true), f3.into_leaf(true), f4.into_leaf(true));
        let out = m.forward(&f2, &f3, &f4, &mut ForwardCtx::train(0)).unwrap();
        out.logits.square().sum().backward().unwrap();
        for t in [&f2, &f3, &f4] {
            assert!(t.grad().unwrap().iter().any(|&g| g != 0.0));
        }
        for p in m.parameters() {
            assert!(p.grad().is_some(), "{} has no grad", p.name());
        }
    }
}
