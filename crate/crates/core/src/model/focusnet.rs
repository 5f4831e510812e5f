//! Full network wiring.
//!
//! ```text
//! f1..f4 = Backbone(image)
//! T'         = DEM(f1)
//! (F̂1, P1)   = CIDM-M(f2, f3, f4)
//! (F̂2, P2)   = CIDM-A(f2, f3, f4)
//! P3, P4     = FAM(T', F̂1, P1), FAM(T', F̂2, P2)    one shared FAM
//! P̂          = Up(P1) + Up(P2) + Up(P3) + Up(P4)
//! ```
//!
//! All head maps are upsampled bilinearly to the input resolution before
//! the sum. `Up(P1)` and `Up(P2)` pass through the same stride-4 resize that
//! FAM applies to its coarse input, so a FAM whose refinement is zero
//! returns exactly `Up(P1)` and `Up(P2)`.

use crate::attention::DEFAULT_REDUCTION;
use crate::cidm::{Cidm, CidmConfig, CidmOutput, CidmVariant};
use crate::dem::{Dem, DemConfig, DemOrder};
use crate::error::{Error, Result, ResultExt};
use crate::fam::{Fam, FamConfig, FamOutput};
use crate::module::{impl_module, ForwardCtx, ParamBuilder};
use crate::nn::{bilinear_resize, Upsample};
use crate::tensor::{Real, Tensor};

use super::backbone::{Backbone, BackboneConfig, FeaturePyramid};

/// Every architectural knob.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Input height and width; both must be multiples of 32.
    pub input_size: (usize, usize),
    /// Decoder width `Cd`, also the FAM working width.
    pub decoder_width: usize,
    pub reduction: usize,
    pub upsample: Upsample,
    pub dem_order: DemOrder,
    pub eca_kernel: usize,
    pub fam_dim: usize,
    pub fam_heads: usize,
    pub local_window: usize,
    pub pool_size: usize,
    pub fam_dropout: f64,
    pub fam_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            input_size: (64, 64),
            decoder_width: 32,
            reduction: DEFAULT_REDUCTION,
            upsample: Upsample::Bilinear,
            dem_order: DemOrder::GateAfterFuse,
            eca_kernel: crate::attention::DEFAULT_ECA_KERNEL,
            fam_dim: 32,
            fam_heads: 1,
            local_window: 3,
            pool_size: 3,
            fam_dropout: 0.1,
            fam_scale: true,
        }
    }
}

impl ModelConfig {
    /// Desk scale: channels 16/32/48/64 at 64x64.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full scale: channels 64/128/320/512 at 352x352.
    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneConfig::full(),
            input_size: (352, 352),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of 32")));
        }
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        if self.backbone.channels[0] % crate::dem::BRANCHES != 0 {
            return Err(Error::Config(format!(
                "stage-1 channels {} must be divisible by {}",
                self.backbone.channels[0],
                crate::dem::BRANCHES
            )));
        }
        if self.eca_kernel % 2 == 0 {
            return Err(Error::Config(format!("ECA kernel {} must be odd", self.eca_kernel)));
        }
        self.fam().validate()
    }

    pub fn dem(&self) -> DemConfig {
        DemConfig {
            channels: self.backbone.channels[0],
            eca_kernel: self.eca_kernel,
            order: self.dem_order,
        }
    }

    pub fn cidm(&self, variant: CidmVariant) -> CidmConfig {
        let c = self.backbone.channels;
        CidmConfig {
            in_channels: [c[1], c[2], c[3]],
            width: self.decoder_width,
            reduction: self.reduction,
            upsample: self.upsample,
            variant,
        }
    }

    pub fn fam(&self) -> FamConfig {
        FamConfig {
            in_channels: self.backbone.channels[0],
            width: self.decoder_width,
            dim: self.fam_dim,
            heads: self.fam_heads,
            local_window: self.local_window,
            pool_size: self.pool_size,
            dropout: self.fam_dropout,
            scale_logits: self.fam_scale,
            reduction: self.reduction,
        }
    }
}

/// The five supervised logit maps, each `[B,1,H,W]`.
#[derive(Debug, Clone)]
pub struct SegmentationHeads<T: Real> {
    pub p1: Tensor<T>,
    pub p2: Tensor<T>,
    pub p3: Tensor<T>,
    pub p4: Tensor<T>,
    pub fused: Tensor<T>,
}

impl<T: Real> SegmentationHeads<T> {
    /// `[P1, P2, P3, P4, P̂]`.
    pub fn maps(&self) -> [&Tensor<T>; 5] {
        [&self.p1, &self.p2, &self.p3, &self.p4, &self.fused]
    }
}

/// Heads plus everything computed on the way, for inspection.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real> {
    pub heads: SegmentationHeads<T>,
    pub pyramid: FeaturePyramid<T>,
    /// DEM output `T'`.
    pub detail: Tensor<T>,
    pub cidm_m: CidmOutput<T>,
    pub cidm_a: CidmOutput<T>,
    pub fam_m: FamOutput<T>,
    pub fam_a: FamOutput<T>,
}

pub const MODULE_NAMES: [&str; 5] = ["backbone", "dem", "cidm_m", "cidm_a", "fam"];

pub struct FocusNet<T: Real> {
    pub backbone: Backbone<T>,
    pub dem: Dem<T>,
    pub cidm_m: Cidm<T>,
    pub cidm_a: Cidm<T>,
    pub fam: Fam<T>,
    pub config: ModelConfig,
}

impl_module!(FocusNet { backbone, dem, cidm_m, cidm_a, fam });

impl<T: Real> FocusNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::new(seed);
        Ok(FocusNet {
            backbone: Backbone::new(&pb.sub("backbone"), config.backbone.clone())?,
            dem: Dem::new(&pb.sub("dem"), config.dem())?,
            cidm_m: Cidm::new(&pb.sub("cidm_m"), config.cidm(CidmVariant::Multiplicative)),
            cidm_a: Cidm::new(&pb.sub("cidm_a"), config.cidm(CidmVariant::Additive)),
            fam: Fam::new(&pb.sub("fam"), config.fam())?,
            config,
        })
    }

    pub fn forward(&self, image: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<ForwardOutput<T>> {
        let s = image.shape();
        if s.len() != 4 || (s[2], s[3]) != self.config.input_size {
            return Err(Error::invalid(
                "focusnet",
                format!(
                    "input {s:?} does not match configured resolution {}x{}",
                    self.config.input_size.0, self.config.input_size.1
                ),
            ));
        }
        let pyramid = ctx.scoped("backbone", |c| self.backbone.forward(image, c).in_module("backbone"))?;
        let detail = ctx.scoped("dem", |c| self.dem.forward(&pyramid.f1, c))?;
        let FeaturePyramid { f2, f3, f4, .. } = &pyramid;
        let cidm_m = ctx.scoped("cidm_m", |c| self.cidm_m.forward(f2, f3, f4, c))?;
        let cidm_a = ctx.scoped("cidm_a", |c| self.cidm_a.forward(f2, f3, f4, c))?;
        let (fam_m, fam_a) = ctx.scoped("fam", |c| -> Result<_> {
            let t32 = self.fam.project_detail(&detail, c)?;
            let m = self.fam.forward(&t32, &cidm_m.feature, &cidm_m.logits, c)?;
            let a = self.fam.forward(&t32, &cidm_a.feature, &cidm_a.logits, c)?;
            Ok((m, a))
        })?;

        let full = self.config.input_size;
        let up = |t: &Tensor<T>| bilinear_resize(t, full).in_module("heads");
        let p1 = up(&fam_m.coarse)?;
        let p2 = up(&fam_a.coarse)?;
        let p3 = up(&fam_m.refined)?;
        let p4 = up(&fam_a.refined)?;
        let fused = p1.add(&p2)?.add(&p3)?.add(&p4)?;
        Ok(ForwardOutput {
            heads: SegmentationHeads { p1, p2, p3, p4, fused },
            pyramid,
            detail,
            cidm_m,
            cidm_a,
            fam_m,
            fam_a,
        })
    }

    /// Eval-mode probability map `sigmoid(P̂)` as a plain vector.
    pub fn predict_proba(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let out = self.forward(image, &mut ForwardCtx::eval())?;
        Ok(out.heads.fused.sigmoid().to_f64_vec())
    }
}
