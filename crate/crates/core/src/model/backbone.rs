//! Convolutional stand-in for the pyramid encoder.
//!
//! Stage 1 downsamples by 4 with a 7x7 convolution, stages 2-4 by 2 with a
//! 3x3 convolution. Each downsampling conv is followed by BN + ReLU and by
//! `blocks_per_stage` further 3x3 conv + BN + ReLU blocks at constant width.

use crate::error::{Error, Result};
use crate::module::{impl_module, ForwardCtx, ParamBuilder};
use crate::nn::ConvBn;
use crate::tensor::{Real, Tensor};

pub const STAGES: usize = 4;
pub const INPUT_CHANNELS: usize = 3;
/// Total downsampling of the deepest stage.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub channels: [usize; STAGES],
    pub blocks_per_stage: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            channels: [16, 32, 48, 64],
            blocks_per_stage: 1,
        }
    }

    pub fn full() -> Self {
        BackboneConfig {
            channels: [64, 128, 320, 512],
            blocks_per_stage: 1,
        }
    }

    /// `(kernel, stride)` of the downsampling conv of stage `i` (0-based).
    pub fn down_geometry(i: usize) -> (usize, usize) {
        if i == 0 {
            (7, 4)
        } else {
            (3, 2)
        }
    }
}

/// The four encoder outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Real> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
}

pub struct Stage<T: Real> {
    pub down: ConvBn<T>,
    pub blocks: Vec<ConvBn<T>>,
}

impl_module!(Stage { down, blocks });

impl<T: Real> Stage<T> {
    fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let mut y = self.down.forward(x, ctx)?;
        for b in &self.blocks {
            y = b.forward(&y, ctx)?;
        }
        Ok(y)
    }
}

pub struct Backbone<T: Real> {
    pub stages: Vec<Stage<T>>,
    pub config: BackboneConfig,
}

impl_module!(Backbone { stages });

impl<T: Real> Backbone<T> {
    pub fn new(pb: &ParamBuilder, config: BackboneConfig) -> Result<Self> {
        if config.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("backbone channels {:?} must be positive", config.channels)));
        }
        let mut cin = INPUT_CHANNELS;
        let stages = (0..STAGES)
            .map(|i| {
                let c = config.channels[i];
                let spb = pb.sub(&format!("stage{}", i + 1));
                let (k, s) = BackboneConfig::down_geometry(i);
                let down = ConvBn::new(&spb.sub("down"), cin, c, k, s, true);
                let blocks = (0..config.blocks_per_stage)
                    .map(|j| ConvBn::new(&spb.sub(&format!("block{j}")), c, c, 3, 1, true))
                    .collect();
                cin = c;
                Stage { down, blocks }
            })
            .collect();
        Ok(Backbone { stages, config })
    }

    pub fn forward(&self, image: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != INPUT_CHANNELS {
            return Err(Error::invalid("backbone", format!("expected [B,3,H,W], got {s:?}")));
        }
        if s[2] % MAX_STRIDE != 0 || s[3] % MAX_STRIDE != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::invalid(
                "backbone",
                format!("input {}x{} is not divisible by {MAX_STRIDE}", s[2], s[3]),
            ));
        }
        let f1 = self.stages[0].forward(image, ctx)?;
        let f2 = self.stages[1].forward(&f1, ctx)?;
        let f3 = self.stages[2].forward(&f2, ctx)?;
        let f4 = self.stages[3].forward(&f3, ctx)?;
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_pyramid_shapes() {
        let bb = Backbone::<f32>::new(&ParamBuilder::new(0), BackboneConfig::desk()).unwrap();
        let x = Tensor::<f32>::full(&[2, 3, 64, 64], 0.5);
        let p = bb.forward(&x, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(p.f1.shape(), &[2, 16, 16, 16]);
        assert_eq!(p.f2.shape(), &[2, 32, 8, 8]);
        assert_eq!(p.f3.shape(), &[2, 48, 4, 4]);
        assert_eq!(p.f4.shape(), &[2, 64, 2, 2]);
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let bb = Backbone::<f32>::new(&ParamBuilder::new(0), BackboneConfig::desk()).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 48, 64]);
        let err = bb.forward(&x, &mut ForwardCtx::eval()).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn gradient_reaches_image() {
        let bb = Backbone::<f64>::new(
            &ParamBuilder::new(1),
            BackboneConfig {
                channels: [4, 4, 4, 4],
                blocks_per_stage: 0,
            },
        )
        .unwrap();
        let x = Tensor::<f64>::new((0..3 * 64 * 64).map(|i| (i as f64 * 0.013).sin()).collect(), &[1, 3, 64, 64])
            .unwrap()
            .into_leaf(true);
        let p = bb.forward(&x, &mut ForwardCtx::eval()).unwrap();
        p.f4.square().sum().backward().unwrap();
        assert!(x.grad().unwrap().iter().any(|&g| g != 0.0));
    }
}
