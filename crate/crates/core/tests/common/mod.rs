//! Glue between `focusnet-core` and the loop-level oracle: conversions,
//! weight randomization, and one randomized comparison per component.
//!
//! Every `*_case(seed)` builds a random small instance, runs the core
//! implementation and the oracle in 64-bit, and returns the largest absolute
//! difference over all compared outputs.

#![allow(dead_code)]

use focusnet_core::attention::{ChannelAttention, EfficientChannelAttention, SpatialAttention};
use focusnet_core::cidm::{Cidm, CidmConfig, CidmVariant};
use focusnet_core::dem::{Dem, DemConfig, DemOrder};
use focusnet_core::fam::{Fam, FamConfig};
use focusnet_core::metrics::{confusion, Scores};
use focusnet_core::model::{BackboneConfig, FocusNet, ModelConfig};
use focusnet_core::nn::{self, Upsample};
use focusnet_core::{ForwardCtx, Module, ParamBuilder, Tensor};
use focusnet_oracle as oracle;
use focusnet_oracle::{Array, FamSpec, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_array(t: &Tensor<f64>) -> Array {
    Array::new(t.shape(), t.to_vec())
}

pub fn to_tensor(a: &Array) -> Tensor<f64> {
    Tensor::new(a.data.clone(), &a.shape).expect("array shape")
}

pub fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    to_tensor(&rand_array(rng, shape, lo, hi))
}

/// Replaces every weight and running statistic of `m` with random values
/// of a sensible scale. Offset predictors get non-zero weights so that the
/// deformable sampling path is exercised away from the integer grid.
pub fn randomize<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    for p in m.parameters_mut() {
        let shape = p.shape().to_vec();
        let name = p.name().to_string();
        let (lo, hi) = if name.contains(".offset.") {
            if name.ends_with(".bias") {
                (-0.6, 0.6)
            } else {
                (-0.3, 0.3)
            }
        } else if shape.len() == 1 && name.ends_with(".weight") {
            (0.5, 1.5)
        } else if shape.len() == 1 {
            (-0.3, 0.3)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let b = (3.0 / fan_in as f64).sqrt();
            (-b, b)
        };
        let data = (0..p.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        p.set_data(data).expect("parameter length");
    }
    for b in m.buffers() {
        let n: usize = b.shape().iter().product();
        let (lo, hi) = if b.name().ends_with("running_var") { (0.5, 1.5) } else { (-0.2, 0.2) };
        b.set((0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("buffer length");
    }
}

/// Every parameter and buffer of `m` under its full name.
pub fn params_of<M: Module<f64>>(m: &M) -> Params {
    let mut p = Params::default();
    for t in m.parameters() {
        p.insert(t.name(), Array::new(t.shape(), t.data().to_vec()));
    }
    for b in m.buffers() {
        p.insert(b.name(), Array::new(b.shape(), b.get()));
    }
    p
}

fn diff(core: &Tensor<f64>, reference: &Array) -> f64 {
    to_array(core).max_abs_diff(reference)
}

pub fn conv2d_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
    let (kh, kw) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let stride = (r.gen_range(1..=2), r.gen_range(1..=2));
    let pad = (r.gen_range(0..kh), r.gen_range(0..kw));
    let (h, w) = (r.gen_range(kh..=8), r.gen_range(kw..=8));
    let x = rand_array(&mut r, &[b, cin, h, w], -1.0, 1.0);
    let wt = rand_array(&mut r, &[cout, cin, kh, kw], -1.0, 1.0);
    let bias = r.gen_bool(0.5).then(|| rand_array(&mut r, &[cout], -1.0, 1.0));
    let core = nn::conv2d(&to_tensor(&x), &to_tensor(&wt), bias.as_ref().map(to_tensor).as_ref(), stride, pad).unwrap();
    diff(&core, &oracle::conv2d(&x, &wt, bias.as_ref(), stride, pad))
}

pub fn deform_conv2d_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let (kh, kw) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let stride = (r.gen_range(1..=2), r.gen_range(1..=2));
    let pad = (kh / 2, kw / 2);
    let (h, w) = (r.gen_range(kh..=7), r.gen_range(kw..=7));
    let (ho, wo) = ((h + 2 * pad.0 - kh) / stride.0 + 1, (w + 2 * pad.1 - kw) / stride.1 + 1);
    let x = rand_array(&mut r, &[b, cin, h, w], -1.0, 1.0);
    let off = rand_array(&mut r, &[b, 2 * kh * kw, ho, wo], -2.5, 2.5);
    let wt = rand_array(&mut r, &[cout, cin, kh, kw], -1.0, 1.0);
    let bias = r.gen_bool(0.5).then(|| rand_array(&mut r, &[cout], -1.0, 1.0));
    let core = nn::deform_conv2d(
        &to_tensor(&x),
        &to_tensor(&off),
        &to_tensor(&wt),
        bias.as_ref().map(to_tensor).as_ref(),
        stride,
        pad,
    )
    .unwrap();
    diff(&core, &oracle::deform_conv2d(&x, &off, &wt, bias.as_ref(), stride, pad))
}

fn rand_image(r: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> Array {
    let shape = [r.gen_range(1..=2), r.gen_range(1..=max_c), r.gen_range(1..=max_hw), r.gen_range(1..=max_hw)];
    rand_array(r, &shape, -1.0, 1.0)
}

pub fn adaptive_avg_pool_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_image(&mut r, 3, 9);
    let out = (r.gen_range(1..=x.shape[2]), r.gen_range(1..=x.shape[3]));
    let core = nn::adaptive_avg_pool(&to_tensor(&x), out).unwrap();
    diff(&core, &oracle::adaptive_avg_pool(&x, out))
}

pub fn bilinear_resize_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_image(&mut r, 3, 8);
    let out = (r.gen_range(1..=16), r.gen_range(1..=16));
    let core = nn::bilinear_resize(&to_tensor(&x), out).unwrap();
    diff(&core, &oracle::bilinear_resize(&x, out))
}

pub fn nearest_resize_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_image(&mut r, 3, 8);
    let out = (r.gen_range(1..=16), r.gen_range(1..=16));
    let core = nn::nearest_resize(&to_tensor(&x), out).unwrap();
    diff(&core, &oracle::nearest_resize(&x, out))
}

pub fn gates_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.gen_range(2..=9);
    let shape = [r.gen_range(1..=2), c, r.gen_range(1..=6), r.gen_range(1..=6)];
    let x = rand_array(&mut r, &shape, -2.0, 2.0);
    let pb = ParamBuilder::new(seed);
    let mut ca = ChannelAttention::<f64>::new(&pb.sub("ca"), c, r.gen_range(1..=4));
    let mut sa = SpatialAttention::<f64>::new(&pb.sub("sa"));
    let mut eca = EfficientChannelAttention::<f64>::new(&pb.sub("eca"), [1, 3, 5][r.gen_range(0..3)]).unwrap();
    randomize(&mut ca, &mut r);
    randomize(&mut sa, &mut r);
    randomize(&mut eca, &mut r);
    let mut p = params_of(&ca);
    p.0.extend(params_of(&sa).0);
    p.0.extend(params_of(&eca).0);
    let (xt, ctx) = (to_tensor(&x), &mut ForwardCtx::eval());
    [
        diff(&ca.forward(&xt, ctx).unwrap(), &oracle::channel_attention(&p, "ca", &x)),
        diff(&sa.forward(&xt, ctx).unwrap(), &oracle::spatial_attention(&p, "sa", &x)),
        diff(&eca.forward(&xt, ctx).unwrap(), &oracle::eca(&p, "eca", &x)),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Both decoder variants against the oracle, comparing the aligned maps,
/// the gated maps, the fused feature and the coarse logits.
pub fn cidm_case(seed: u64, variant: CidmVariant) -> f64 {
    let mut r = rng(seed);
    let upsample = if r.gen_bool(0.5) { Upsample::Bilinear } else { Upsample::Nearest };
    let config = CidmConfig {
        in_channels: [r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5)],
        width: r.gen_range(2..=6),
        reduction: r.gen_range(1..=4),
        upsample,
        variant,
    };
    let b = r.gen_range(1..=2);
    let (h, w) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let [c2, c3, c4] = config.in_channels;
    let f2 = rand_array(&mut r, &[b, c2, 4 * h, 4 * w], -1.0, 1.0);
    let f3 = rand_array(&mut r, &[b, c3, 2 * h, 2 * w], -1.0, 1.0);
    let f4 = rand_array(&mut r, &[b, c4, h, w], -1.0, 1.0);
    let mut m = Cidm::<f64>::new(&ParamBuilder::new(seed).sub("cidm"), config);
    randomize(&mut m, &mut r);
    let out = m
        .forward(&to_tensor(&f2), &to_tensor(&f3), &to_tensor(&f4), &mut ForwardCtx::eval())
        .unwrap();
    let o = oracle::cidm(
        &params_of(&m),
        "cidm",
        variant == CidmVariant::Multiplicative,
        upsample == Upsample::Bilinear,
        &f2,
        &f3,
        &f4,
    );
    let i = &out.intermediates;
    [
        diff(&i.f2, &o.f2),
        diff(&i.f3, &o.f3),
        diff(&i.f4, &o.f4),
        diff(&i.f31, &o.f31),
        diff(&i.f32, &o.f32),
        diff(&out.feature, &o.feature),
        diff(&out.logits, &o.logits),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// The detail module, comparing the branch concatenation and the output.
pub fn dem_case(seed: u64, order: DemOrder) -> f64 {
    let mut r = rng(seed);
    let channels = 4 * r.gen_range(1..=3);
    let config = DemConfig {
        channels,
        eca_kernel: [1, 3, 5][r.gen_range(0..3)],
        order,
    };
    let shape = [r.gen_range(1..=2), channels, r.gen_range(2..=7), r.gen_range(2..=7)];
    let x = rand_array(&mut r, &shape, -1.0, 1.0);
    let mut m = Dem::<f64>::new(&ParamBuilder::new(seed).sub("dem"), config).unwrap();
    randomize(&mut m, &mut r);
    let p = params_of(&m);
    let ctx = &mut ForwardCtx::eval();
    let t = m.branches_forward(&to_tensor(&x), ctx).unwrap();
    let out = m.forward(&to_tensor(&x), ctx).unwrap();
    let gate_after_fuse = order == DemOrder::GateAfterFuse;
    diff(&t, &oracle::dem_branches(&p, "dem", &x)).max(diff(&out, &oracle::dem(&p, "dem", gate_after_fuse, &x)))
}

/// A random small focus-attention configuration with its inputs.
pub struct FamInstance {
    pub fam: Fam<f64>,
    pub spec: FamSpec,
    pub t32: Array,
    pub feature: Array,
    pub coarse: Array,
}

pub fn fam_instance(seed: u64, window: usize, pool: usize) -> FamInstance {
    let mut r = rng(seed);
    let heads = r.gen_range(1..=2);
    let dim = heads * r.gen_range(1..=4);
    let width = r.gen_range(2..=6);
    let config = FamConfig {
        in_channels: 4,
        width,
        dim,
        heads,
        local_window: window,
        pool_size: pool,
        dropout: 0.1,
        scale_logits: r.gen_bool(0.5),
        reduction: r.gen_range(1..=3),
    };
    let spec = FamSpec {
        dim,
        heads,
        window,
        pool,
        scale: config.scale_logits,
    };
    let b = r.gen_range(1..=2);
    let (h, w) = (r.gen_range(2..=4), r.gen_range(2..=4));
    let t32 = rand_array(&mut r, &[b, width, 2 * h, 2 * w], -1.0, 1.0);
    let feature = rand_array(&mut r, &[b, width, h, w], -1.0, 1.0);
    let coarse = rand_array(&mut r, &[b, 1, h, w], -2.0, 2.0);
    let mut fam = Fam::<f64>::new(&ParamBuilder::new(seed).sub("fam"), config).unwrap();
    randomize(&mut fam, &mut r);
    FamInstance {
        fam,
        spec,
        t32,
        feature,
        coarse,
    }
}

/// Brute-force attention rows against the core's `[B, N, heads, L]` tensor.
pub fn attention_case(seed: u64) -> f64 {
    let mut r = rng(seed ^ 0xa77e);
    let inst = fam_instance(seed, [1, 3, 5][r.gen_range(0..3)], r.gen_range(1..=3));
    let out = inst
        .fam
        .forward(&to_tensor(&inst.t32), &to_tensor(&inst.feature), &to_tensor(&inst.coarse), &mut ForwardCtx::eval())
        .unwrap();
    let o = oracle::fam(&params_of(&inst.fam), "fam", inst.spec, &inst.t32, &inst.feature, &inst.coarse);
    let flat: Vec<f64> = o.attn.iter().flatten().flatten().flatten().copied().collect();
    let core = out.state.attn.to_vec();
    assert_eq!(core.len(), flat.len(), "attention tensor size");
    core.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// The whole focus-attention module: mixed tokens, fused map, refined and
/// coarse logits.
pub fn fam_case(seed: u64) -> f64 {
    let inst = fam_instance(seed, 3, 3);
    let out = inst
        .fam
        .forward(&to_tensor(&inst.t32), &to_tensor(&inst.feature), &to_tensor(&inst.coarse), &mut ForwardCtx::eval())
        .unwrap();
    let o = oracle::fam(&params_of(&inst.fam), "fam", inst.spec, &inst.t32, &inst.feature, &inst.coarse);
    [
        diff(&out.state.o_r, &o.o_r),
        diff(&out.state.o_f, &o.o_f),
        diff(&out.coarse, &o.coarse),
        diff(&out.refined, &o.refined),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// A narrow 32x32 network.
pub fn small_model_config(blocks: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: [4, 4, 4, 4],
            blocks_per_stage: blocks,
        },
        input_size: (32, 32),
        decoder_width: 4,
        fam_dim: 4,
        reduction: 2,
        ..ModelConfig::desk()
    }
}

/// End-to-end eval forward, comparing the pyramid and all five head maps.
pub fn model_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let blocks = r.gen_range(0..=1);
    let config = small_model_config(blocks);
    let spec = FamSpec {
        dim: config.fam_dim,
        heads: config.fam_heads,
        window: config.local_window,
        pool: config.pool_size,
        scale: config.fam_scale,
    };
    let mut model = FocusNet::<f64>::new(config, seed).unwrap();
    randomize(&mut model, &mut r);
    let image = rand_array(&mut r, &[1, 3, 32, 32], 0.0, 1.0);
    let out = model.forward(&to_tensor(&image), &mut ForwardCtx::eval()).unwrap();
    let p = params_of(&model);
    let pyramid = oracle::backbone(&p, "backbone", blocks, &image);
    let heads = oracle::focusnet(&p, blocks, spec, &image);
    let core_pyr = [&out.pyramid.f1, &out.pyramid.f2, &out.pyramid.f3, &out.pyramid.f4];
    let d_pyr = core_pyr.iter().zip(&pyramid).map(|(c, o)| diff(c, o));
    let d_heads = out.heads.maps().into_iter().zip(&heads.maps).map(|(c, o)| diff(c, o));
    d_pyr.chain(d_heads).fold(0.0, f64::max)
}

/// Six metrics on a random mask pair against the pixel-loop oracle.
pub fn metrics_case(seed: u64) -> (f64, Scores) {
    let mut r = rng(seed);
    let n = r.gen_range(1..=400);
    let (pp, pg) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
    let pred: Vec<bool> = (0..n).map(|_| r.gen_bool(pp)).collect();
    let gt: Vec<bool> = (0..n).map(|_| r.gen_bool(pg)).collect();
    let s = Scores::from_counts(&confusion(&pred, &gt).unwrap());
    let o = oracle::pixel_metrics(&pred, &gt);
    let d = [
        s.miou - o.iou,
        s.mdsc - o.dsc,
        s.recall - o.recall,
        s.precision - o.precision,
        s.accuracy - o.accuracy,
        s.f2 - o.f2,
    ]
    .into_iter()
    .map(f64::abs)
    .fold(0.0, f64::max);
    (d, s)
}
