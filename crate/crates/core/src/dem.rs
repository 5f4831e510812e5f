//! Detail enhancement of the stride-4 feature `f1`.
//!
//! `f1` is split into four channel groups; each passes through a 3x1 then a
//! 1x3 deformable convolution, each followed by BN + ReLU. The concatenated
//! result `T` is refined as `T' = BRU(u * ECA(u))` with `u = Conv1x1(T)`,
//! where BRU is a 1x1 convolution, BN and ReLU.

use crate::attention::EfficientChannelAttention;
use crate::error::{Error, Result, ResultExt};
use crate::module::{impl_module, ForwardCtx, ParamBuilder};
use crate::nn::{BatchNorm2d, Conv2d, ConvBn, DeformConv2d};
use crate::tensor::{concat, Real, Tensor};

pub const BRANCHES: usize = 4;

/// Where the ECA gate sits relative to the first 1x1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DemOrder {
    /// `BRU(ECA(Conv1x1(T)))`.
    #[default]
    GateAfterFuse,
    /// `BRU(Conv1x1(ECA(T)))`.
    GateBeforeFuse,
}

impl std::str::FromStr for DemOrder {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gate-after-fuse" => Ok(DemOrder::GateAfterFuse),
            "gate-before-fuse" => Ok(DemOrder::GateBeforeFuse),
            _ => Err(format!("unknown DEM order `{s}` (gate-after-fuse|gate-before-fuse)")),
        }
    }
}

impl std::fmt::Display for DemOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DemOrder::GateAfterFuse => "gate-after-fuse",
            DemOrder::GateBeforeFuse => "gate-before-fuse",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemConfig {
    pub channels: usize,
    pub eca_kernel: usize,
    pub order: DemOrder,
}

pub struct DemBranch<T: Real> {
    pub dconv_v: DeformConv2d<T>,
    pub bn_v: BatchNorm2d<T>,
    pub dconv_h: DeformConv2d<T>,
    pub bn_h: BatchNorm2d<T>,
}

impl_module!(DemBranch { dconv_v, bn_v, dconv_h, bn_h });

impl<T: Real> DemBranch<T> {
    fn new(pb: &ParamBuilder, channels: usize) -> Self {
        DemBranch {
            dconv_v: DeformConv2d::new(&pb.sub("dconv_v"), channels, channels, (3, 1), false),
            bn_v: BatchNorm2d::new(&pb.sub("bn_v"), channels),
            dconv_h: DeformConv2d::new(&pb.sub("dconv_h"), channels, channels, (1, 3), false),
            bn_h: BatchNorm2d::new(&pb.sub("bn_h"), channels),
        }
    }

    pub fn forward(&self, t: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let v = self.bn_v.forward(&self.dconv_v.forward(t, ctx)?, ctx)?.relu();
        Ok(self.bn_h.forward(&self.dconv_h.forward(&v, ctx)?, ctx)?.relu())
    }
}

pub struct Dem<T: Real> {
    pub branches: Vec<DemBranch<T>>,
    pub fuse: Conv2d<T>,
    pub eca: EfficientChannelAttention<T>,
    pub bru: ConvBn<T>,
    pub config: DemConfig,
}

impl_module!(Dem { branches, fuse, eca, bru });

impl<T: Real> Dem<T> {
    pub fn new(pb: &ParamBuilder, config: DemConfig) -> Result<Self> {
        let c = config.channels;
        if c == 0 || c % BRANCHES != 0 {
            return Err(Error::invalid("dem", format!("channel count {c} not divisible by {BRANCHES}")));
        }
        let branches = (0..BRANCHES)
            .map(|i| DemBranch::new(&pb.sub(&format!("branch{i}")), c / BRANCHES))
            .collect();
        Ok(Dem {
            branches,
            fuse: Conv2d::new(&pb.sub("fuse"), c, c, 1, 1, true),
            eca: EfficientChannelAttention::new(&pb.sub("eca"), config.eca_kernel)?,
            bru: ConvBn::new(&pb.sub("bru"), c, c, 1, 1, true),
            config,
        })
    }

    /// Branch outputs concatenated: `T`.
    pub fn branches_forward(&self, f1: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        if f1.rank() != 4 || f1.shape()[1] != self.config.channels {
            return Err(Error::invalid(
                "dem",
                format!("expected [B,{},H,W], got {:?}", self.config.channels, f1.shape()),
            ));
        }
        let parts = f1.split(1, BRANCHES)?;
        let outs = parts
            .iter()
            .zip(&self.branches)
            .map(|(t, br)| br.forward(t, ctx))
            .collect::<Result<Vec<_>>>()?;
        concat(&outs, 1)
    }

    fn gated(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        x.mul(&self.eca.forward(x, ctx)?)
    }

    pub fn forward(&self, f1: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        (|| {
            let t = self.branches_forward(f1, ctx)?;
            let refined = match self.config.order {
                DemOrder::GateAfterFuse => {
                    let u = self.fuse.forward(&t, ctx)?;
                    self.gated(&u, ctx)?
                }
                DemOrder::GateBeforeFuse => {
                    let g = self.gated(&t, ctx)?;
                    self.fuse.forward(&g, ctx)?
                }
            };
            self.bru.forward(&refined, ctx)
        })()
        .in_module("dem")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::Module;

    fn dem(c: usize) -> Dem<f64> {
        Dem::new(
            &ParamBuilder::new(2),
            DemConfig {
                channels: c,
                eca_kernel: 3,
                order: DemOrder::GateAfterFuse,
            },
        )
        .unwrap()
    }

    #[test]
    fn preserves_shape() {
        let m = dem(16);
        let x = Tensor::<f64>::new((0..2 * 16 * 16 * 16).map(|i| (i as f64 * 0.01).cos()).collect(), &[2, 16, 16, 16]).unwrap();
        let y = m.forward(&x, &mut ForwardCtx::train(0)).unwrap();
        assert_eq!(y.shape(), &[2, 16, 16, 16]);
    }

    #[test]
    fn rejects_indivisible_channels() {
        assert!(Dem::<f64>::new(
            &ParamBuilder::new(0),
            DemConfig {
                channels: 6,
                eca_kernel: 3,
                order: DemOrder::GateAfterFuse
            }
        )
        .is_err());
    }

    #[test]
    fn zero_weights_propagate_zero() {
        let mut m = dem(8);
        for p in m.parameters_mut() {
            if !p.name().contains(".bn") {
                let n = p.numel();
                p.set_data(vec![0.0; n]).unwrap();
            }
        }
        let x = Tensor::<f64>::new((0..8 * 25).map(|i| i as f64).collect(), &[1, 8, 5, 5]).unwrap();
        let mut ctx = ForwardCtx::eval();
        assert!(m.branches_forward(&x, &mut ctx).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.forward(&x, &mut ctx).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
