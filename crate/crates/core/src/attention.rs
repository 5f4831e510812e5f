//! Sigmoid gates: channel attention (avg + max pooled MLP), spatial
//! attention (7x7 conv over channel max/mean maps) and efficient channel
//! attention (1-D conv across the pooled channel descriptor).
//!
//! Each `forward` returns the gate only; callers multiply it in.

use crate::error::{Error, Result};
use crate::module::{impl_module, ForwardCtx, ParamBuilder};
use crate::nn::{adaptive_avg_pool, global_max_pool, Conv2d, Linear};
use crate::tensor::{concat, Real, Tensor};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_ECA_KERNEL: usize = 3;

pub struct ChannelAttention<T: Real> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl_module!(ChannelAttention { fc1, fc2 });

impl<T: Real> ChannelAttention<T> {
    /// Hidden width is `channels / reduction`, clamped to at least 1.
    pub fn new(pb: &ParamBuilder, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        ChannelAttention {
            fc1: Linear::new(&pb.sub("fc1"), channels, hidden, false),
            fc2: Linear::new(&pb.sub("fc2"), hidden, channels, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features()
    }

    fn mlp(&self, v: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(v, ctx)?.relu(), ctx)
    }

    /// `[B,C,H,W] -> [B,C,1,1]`.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(Error::invalid(
                "channel_attention",
                format!("expected [B,{},H,W], got {s:?}", self.channels()),
            ));
        }
        let (b, c) = (s[0], s[1]);
        let avg = adaptive_avg_pool(x, (1, 1))?.reshape(&[b, c])?;
        let max = global_max_pool(x)?.reshape(&[b, c])?;
        let logits = self.mlp(&avg, ctx)?.add(&self.mlp(&max, ctx)?)?;
        logits.sigmoid().reshape(&[b, c, 1, 1])
    }
}

pub struct SpatialAttention<T: Real> {
    pub conv: Conv2d<T>,
}

impl_module!(SpatialAttention { conv });

impl<T: Real> SpatialAttention<T> {
    pub fn new(pb: &ParamBuilder) -> Self {
        SpatialAttention {
            conv: Conv2d::new(&pb.sub("conv"), 2, 1, 7, 1, true),
        }
    }

    /// `[B,C,H,W] -> [B,1,H,W]`.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::invalid("spatial_attention", format!("expected [B,C,H,W], got {:?}", x.shape())));
        }
        let desc = concat(&[x.max_axis(1)?, x.mean_axis(1)?], 1)?;
        Ok(self.conv.forward(&desc, ctx)?.sigmoid())
    }
}

pub struct EfficientChannelAttention<T: Real> {
    pub conv: Conv2d<T>,
}

impl_module!(EfficientChannelAttention { conv });

impl<T: Real> EfficientChannelAttention<T> {
    pub fn new(pb: &ParamBuilder, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid("eca", format!("kernel size {kernel} must be odd")));
        }
        Ok(EfficientChannelAttention {
            conv: Conv2d::with_geometry(&pb.sub("conv"), 1, 1, (1, kernel), (1, 1), (0, kernel / 2), true),
        })
    }

    pub fn kernel(&self) -> usize {
        self.conv.kernel().1
    }

    /// `[B,C,H,W] -> [B,C,1,1]`; the pooled channel vector is convolved as a
    /// zero-padded length-C sequence.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::invalid("eca", format!("expected [B,C,H,W], got {:?}", x.shape())));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let seq = adaptive_avg_pool(x, (1, 1))?.reshape(&[b, 1, 1, c])?;
        self.conv.forward(&seq, ctx)?.sigmoid().reshape(&[b, c, 1, 1])
    }
}
