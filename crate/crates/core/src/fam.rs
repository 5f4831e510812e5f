//! Focus attention: a shared query from the detail map attends jointly to a
//! sliding local window and to a small set of pooled global tokens built
//! from a decoder feature, then refines the decoder's coarse logits.
//!
//! For every query pixel the logits over its `w*w` neighbours and the `p*p`
//! pooled tokens go through a single softmax, so each row of the attention
//! map has `w*w + p*p` entries and sums to one.
//!
//! The decoder feature and its coarse logits live on the stride-8 grid; both
//! are bilinearly resized onto the stride-4 grid of the detail map before
//! attention so that local windows line up.

use crate::attention::ChannelAttention;
use crate::error::{Error, Result, ResultExt};
use crate::module::{impl_module, ForwardCtx, ParamBuilder};
use crate::nn::{
    adaptive_avg_pool, bilinear_resize, dropout, from_tokens, neighborhood_gather, to_tokens, Conv2d, Linear,
};
use crate::tensor::{concat, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FamConfig {
    /// Channels of the detail map `T'`.
    pub in_channels: usize,
    /// Width of the projected detail map and of the decoder feature (32).
    pub width: usize,
    /// Query/key/value dimension `d`.
    pub dim: usize,
    pub heads: usize,
    pub local_window: usize,
    pub pool_size: usize,
    pub dropout: f64,
    /// Scale logits by `1/sqrt(d/heads)`.
    pub scale_logits: bool,
    pub reduction: usize,
}

impl FamConfig {
    pub fn tokens_per_query(&self) -> usize {
        self.local_window * self.local_window + self.pool_size * self.pool_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "fam.dim {} not divisible by fam.heads {}",
                self.dim, self.heads
            )));
        }
        if self.local_window % 2 == 0 {
            return Err(Error::Config(format!("fam.local_window {} must be odd", self.local_window)));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("fam.pool_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("fam.dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Key/value tokens for one FAM call.
#[derive(Debug, Clone)]
pub struct FamTokens<T: Real> {
    /// `[B, N, d]`
    pub q: Tensor<T>,
    /// `[B, N, w*w, d]`
    pub k_local: Tensor<T>,
    pub v_local: Tensor<T>,
    /// `[B, p*p, d]`
    pub k_pool: Tensor<T>,
    pub v_pool: Tensor<T>,
}

/// Everything a FAM call computed, for inspection and tests.
#[derive(Debug, Clone)]
pub struct FamState<T: Real> {
    pub tokens: FamTokens<T>,
    /// Post-softmax weights `[B, N, heads, w*w + p*p]`.
    pub attn: Tensor<T>,
    /// `[B, width, Hq, Wq]`
    pub o_r: Tensor<T>,
    pub o_f: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FamOutput<T: Real> {
    /// Refined logits `P'` on the detail grid, `[B,1,Hq,Wq]`.
    pub refined: Tensor<T>,
    /// The coarse logits resized onto the detail grid.
    pub coarse: Tensor<T>,
    pub state: FamState<T>,
}

pub struct Fam<T: Real> {
    pub t_proj: Conv2d<T>,
    pub q: Linear<T>,
    pub kv_local: Linear<T>,
    pub kv_pool: Linear<T>,
    pub out: Linear<T>,
    pub ca: ChannelAttention<T>,
    pub refine1: Conv2d<T>,
    pub refine2: Conv2d<T>,
    pub refine_out: Conv2d<T>,
    pub config: FamConfig,
}

impl_module!(Fam { t_proj, q, kv_local, kv_pool, out, ca, refine1, refine2, refine_out });

impl<T: Real> Fam<T> {
    pub fn new(pb: &ParamBuilder, config: FamConfig) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.width, config.dim);
        Ok(Fam {
            t_proj: Conv2d::new(&pb.sub("t_proj"), config.in_channels, c, 1, 1, true),
            q: Linear::new(&pb.sub("q_linear"), c, d, true),
            kv_local: Linear::new(&pb.sub("kv_local_linear"), c, 2 * d, true),
            kv_pool: Linear::new(&pb.sub("kv_pool_linear"), c, 2 * d, true),
            out: Linear::new(&pb.sub("out_linear"), d, c, true),
            ca: ChannelAttention::new(&pb.sub("ca"), c, config.reduction),
            refine1: Conv2d::new(&pb.sub("refine1"), c, c, 3, 1, true),
            refine2: Conv2d::new(&pb.sub("refine2"), c, c, 3, 1, true),
            refine_out: Conv2d::new(&pb.sub("refine_out"), c, 1, 1, 1, true),
            config,
        })
    }

    /// `T'` projected to the attention width.
    pub fn project_detail(&self, t_prime: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        self.t_proj.forward(t_prime, ctx).in_module("fam")
    }

    /// Query from the detail map; local and pooled key/value tokens from the
    /// (already resized) decoder feature.
    pub fn tokens(&self, t32: &Tensor<T>, f_up: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<FamTokens<T>> {
        if t32.shape() != f_up.shape() || t32.rank() != 4 || t32.shape()[1] != self.config.width {
            return Err(Error::shape("fam_tokens", t32.shape(), f_up.shape()));
        }
        let (b, h, w) = (t32.shape()[0], t32.shape()[2], t32.shape()[3]);
        let (d, win, p) = (self.config.dim, self.config.local_window, self.config.pool_size);
        let q = self.q.forward(&to_tokens(t32)?, ctx)?;

        let kv = self.kv_local.forward(&to_tokens(f_up)?, ctx)?;
        let windows = neighborhood_gather(&from_tokens(&kv, h, w)?, win)?;
        let k_local = windows.narrow(3, 0, d)?;
        let v_local = windows.narrow(3, d, d)?;

        let pooled = adaptive_avg_pool(f_up, (p, p))?;
        let kv_pool = self.kv_pool.forward(&to_tokens(&pooled)?, ctx)?;
        let k_pool = kv_pool.narrow(2, 0, d)?;
        let v_pool = kv_pool.narrow(2, d, d)?;
        debug_assert_eq!(k_local.shape(), &[b, h * w, win * win, d]);
        Ok(FamTokens {
            q,
            k_local,
            v_local,
            k_pool,
            v_pool,
        })
    }

    /// Joint local + pooled softmax attention. Returns `(O_r, attn)` with
    /// `O_r` reshaped to `[B, width, h, w]`.
    pub fn attend(
        &self,
        tok: &FamTokens<T>,
        h: usize,
        w: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let cfg = &self.config;
        let (heads, d) = (cfg.heads, cfg.dim);
        let dh = d / heads;
        let (wl, wp) = (cfg.local_window * cfg.local_window, cfg.pool_size * cfg.pool_size);
        let b = tok.q.shape()[0];
        let n = h * w;
        if tok.q.shape() != [b, n, d] || tok.k_local.shape() != [b, n, wl, d] || tok.k_pool.shape() != [b, wp, d] {
            return Err(Error::invalid(
                "fam_attend",
                format!(
                    "token shapes q{:?} k_local{:?} k_pool{:?} inconsistent with d={d}, {h}x{w} grid",
                    tok.q.shape(),
                    tok.k_local.shape(),
                    tok.k_pool.shape()
                ),
            ));
        }
        let scale = if cfg.scale_logits { 1.0 / (dh as f64).sqrt() } else { 1.0 };

        // Local: per pixel and head, [1, dh] x [dh, wl].
        let q_local = tok.q.reshape(&[b, n, heads, 1, dh])?;
        let k_local = tok.k_local.reshape(&[b, n, wl, heads, dh])?.permute(&[0, 1, 3, 4, 2])?;
        let s_local = q_local.matmul(&k_local)?.reshape(&[b, n, heads, wl])?;
        // Pool: per head, [n, dh] x [dh, wp].
        let q_heads = tok.q.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3])?;
        let k_pool = tok.k_pool.reshape(&[b, wp, heads, dh])?.permute(&[0, 2, 3, 1])?;
        let s_pool = q_heads.matmul(&k_pool)?.permute(&[0, 2, 1, 3])?;

        let logits = concat(&[s_local, s_pool], 3)?.scale(scale);
        if !logits.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "fam_attend logits".into(),
            });
        }
        let attn = logits.softmax(3)?;
        let a_local = attn.narrow(3, 0, wl)?.reshape(&[b, n, heads, 1, wl])?;
        let a_pool = attn.narrow(3, wl, wp)?.permute(&[0, 2, 1, 3])?;

        let v_local = tok.v_local.reshape(&[b, n, wl, heads, dh])?.permute(&[0, 1, 3, 2, 4])?;
        let o_local = a_local.matmul(&v_local)?.reshape(&[b, n, d])?;
        let v_pool = tok.v_pool.reshape(&[b, wp, heads, dh])?.permute(&[0, 2, 1, 3])?;
        let o_pool = a_pool.matmul(&v_pool)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
        ctx.count_macs(2 * (b * n * (wl + wp) * d) as u64);

        let mixed = self.out.forward(&o_local.add(&o_pool)?, ctx)?;
        let o_r = dropout(&from_tokens(&mixed, h, w)?, cfg.dropout, ctx)?;
        Ok((o_r, attn))
    }

    /// `O_f = O_r * (F̂ * CA(F̂)) * T'`, `P' = P + Conv1x1(Conv3x3(Conv3x3(O_f)))`.
    pub fn fuse(
        &self,
        o_r: &Tensor<T>,
        f_up: &Tensor<T>,
        t32: &Tensor<T>,
        coarse: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if o_r.shape() != f_up.shape() || o_r.shape() != t32.shape() {
            return Err(Error::shape("fam_fuse", o_r.shape(), t32.shape()));
        }
        let s = o_r.shape();
        if coarse.shape() != [s[0], 1, s[2], s[3]] {
            return Err(Error::shape("fam_fuse", s, coarse.shape()));
        }
        let f_ca = f_up.mul(&self.ca.forward(f_up, ctx)?)?;
        let o_f = o_r.mul(&f_ca)?.mul(t32)?;
        let r = self.refine1.forward(&o_f, ctx)?;
        let r = self.refine2.forward(&r, ctx)?;
        let r = self.refine_out.forward(&r, ctx)?;
        Ok((coarse.add(&r)?, o_f))
    }

    /// One FAM call. `t32` is the projected detail map (stride 4); `feature`
    /// and `coarse` are a decoder's outputs (stride 8).
    pub fn forward(
        &self,
        t32: &Tensor<T>,
        feature: &Tensor<T>,
        coarse: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<FamOutput<T>> {
        (|| {
            if t32.rank() != 4 {
                return Err(Error::invalid("fam", format!("detail map {:?} is not [B,C,H,W]", t32.shape())));
            }
            let (h, w) = (t32.shape()[2], t32.shape()[3]);
            let f_up = bilinear_resize(feature, (h, w))?;
            let coarse_up = bilinear_resize(coarse, (h, w))?;
            let tokens = self.tokens(t32, &f_up, ctx)?;
            let (o_r, attn) = self.attend(&tokens, h, w, ctx)?;
            let (refined, o_f) = self.fuse(&o_r, &f_up, t32, &coarse_up, ctx)?;
            Ok(FamOutput {
                refined,
                coarse: coarse_up,
                state: FamState { tokens, attn, o_r, o_f },
            })
        })()
        .in_module("fam")
    }
}
