//! 64-bit gradient verification suites, one per module family.
//!
//! Every check feeds random inputs (and, for layers, every parameter) through
//! [`grad_check`] and reduces the output to a scalar by a fixed random
//! projection, so that no output element is invisible to the objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ChannelAttention, EfficientChannelAttention, SpatialAttention};
use crate::cidm::{Cidm, CidmConfig, CidmVariant};
use crate::dem::{Dem, DemConfig, DemOrder};
use crate::error::{Error, Result};
use crate::fam::{Fam, FamConfig};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::{BackboneConfig, FocusNet, ModelConfig};
use crate::module::{ForwardCtx, Module, ParamBuilder};
use crate::nn::{
    adaptive_avg_pool, batch_norm, bilinear_resize, conv2d, deform_conv2d, dropout, from_tokens, global_max_pool,
    nearest_resize, neighborhood_gather, to_tokens, Conv2d, DeformConv2d, Linear, Upsample,
};
use crate::rng::derive_seed;
use crate::tensor::{concat, Tensor};

/// Worst relative error accepted by the layer and module suites.
pub const MODULE_TOL: f64 = 1e-5;
/// Worst relative error accepted for tensor primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Each suite runs at `seed, seed + 1, ...` for this many seeds.
pub const SEEDS_PER_SUITE: u64 = 3;
/// Elements sampled per parameter tensor in the module suites.
const PARAM_SAMPLES: usize = 6;
/// Elements sampled per data input in the module suites.
const INPUT_SAMPLES: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Tensor,
    Nn,
    Attention,
    Cidm,
    Dem,
    Fam,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Tensor,
        Suite::Nn,
        Suite::Attention,
        Suite::Cidm,
        Suite::Dem,
        Suite::Fam,
        Suite::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Nn => "nn",
            Suite::Attention => "attention",
            Suite::Cidm => "cidm",
            Suite::Dem => "dem",
            Suite::Fam => "fam",
            Suite::Model => "model",
        }
    }

    /// Parses a suite name; `all` expands to every suite.
    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        Suite::ALL
            .iter()
            .find(|v| v.name() == s)
            .map(|&v| vec![v])
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown gradcheck module `{s}` (all|{})", names.join("|")))
            })
    }
}

/// One gradient check at one seed.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    fn from_report(suite: Suite, name: &str, seed: u64, r: &GradCheckReport) -> Self {
        CheckResult {
            suite,
            name: name.to_string(),
            seed,
            max_rel_err: r.max_rel_err(),
            tol: r.tol,
            checked: r.inputs.iter().map(|i| i.checked).sum(),
            skipped: r.inputs.iter().map(|i| i.skipped).sum(),
        }
    }

    /// Passes when the worst error is under tolerance and at least one
    /// element was actually compared.
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.checked > self.skipped
    }
}

/// Summary of a suite over all of its checks and seeds.
#[derive(Debug, Clone)]
pub struct SuiteSummary {
    pub suite: Suite,
    pub results: Vec<CheckResult>,
}

impl SuiteSummary {
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |r| r.max_rel_err)
    }

    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(CheckResult::passed)
    }
}

/// Runs `suite` at [`SEEDS_PER_SUITE`] consecutive seeds starting at `seed`.
pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteSummary> {
    let mut results = Vec::new();
    for s in seed..seed + SEEDS_PER_SUITE {
        let checks = match suite {
            Suite::Tensor => tensor_checks(s)?,
            Suite::Nn => nn_checks(s)?,
            Suite::Attention => attention_checks(s)?,
            Suite::Cidm => cidm_checks(s)?,
            Suite::Dem => dem_checks(s)?,
            Suite::Fam => fam_checks(s)?,
            Suite::Model => model_checks(s)?,
        };
        results.extend(checks.into_iter().map(|(name, r)| CheckResult::from_report(suite, &name, s, &r)));
    }
    Ok(SuiteSummary { suite, results })
}

type Checks = Vec<(String, GradCheckReport)>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("shape")
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// `sum(y * r)` with `r` a fixed pseudo-random tensor scaled to keep the
/// objective of order one.
fn project(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "projection"));
    let n = y.numel();
    let k = 1.0 / (n as f64).sqrt();
    let r = Tensor::new((0..n).map(|_| rng.gen_range(-k..k)).collect(), y.shape())?;
    Ok(y.mul(&r)?.sum())
}

/// Checks `f` over `inputs`, every element of each.
fn check_fn(
    name: &str,
    seed: u64,
    tol: f64,
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<(String, GradCheckReport)> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default().with_tol(tol)
    };
    let r = grad_check(|t| project(&f(t)?, seed), inputs, opts)?;
    Ok((name.to_string(), r))
}

/// Checks a module with respect to its data `inputs` and all parameters.
/// Parameters are routed through the module with `set_tensor` so that the
/// checker owns the leaves; the original values are restored afterwards.
fn check_module<M: Module<f64>>(
    name: &str,
    seed: u64,
    module: &mut M,
    inputs: &[Tensor<f64>],
    train: bool,
    forward: impl Fn(&M, &[Tensor<f64>], &mut ForwardCtx) -> Result<Tensor<f64>>,
) -> Result<(String, GradCheckReport)> {
    let originals: Vec<Tensor<f64>> = module.parameters().iter().map(|p| p.tensor().clone()).collect();
    let mut all: Vec<Tensor<f64>> = inputs.to_vec();
    all.extend(originals.iter().map(Tensor::detach));
    let n_in = inputs.len();
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default().with_tol(MODULE_TOL)
    };
    let report = {
        let module = &mut *module;
        let mut objective = |t: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            for (p, v) in module.parameters_mut().into_iter().zip(&t[n_in..]) {
                p.set_tensor(v.clone())?;
            }
            let mut ctx = if train { ForwardCtx::train(seed) } else { ForwardCtx::eval() };
            project(&forward(module, &t[..n_in], &mut ctx)?, seed)
        };
        sampled_check(&mut objective, &all, n_in, opts)?
    };
    for (p, v) in module.parameters_mut().into_iter().zip(originals) {
        p.set_tensor(v)?;
    }
    Ok((name.to_string(), report))
}

/// Data inputs get [`INPUT_SAMPLES`] elements each and parameters
/// [`PARAM_SAMPLES`]; per-input reports are merged into one.
fn sampled_check(
    objective: &mut dyn FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    all: &[Tensor<f64>],
    n_in: usize,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let data = grad_check(
        |t: &[Tensor<f64>]| {
            let mut full = t.to_vec();
            full.extend(all[n_in..].iter().map(Tensor::detach));
            objective(&full)
        },
        &all[..n_in],
        opts.sampled(INPUT_SAMPLES, opts.seed),
    )?;
    let params = grad_check(
        |t: &[Tensor<f64>]| {
            let mut full: Vec<Tensor<f64>> = all[..n_in].iter().map(Tensor::detach).collect();
            full.extend(t.iter().cloned());
            objective(&full)
        },
        &all[n_in..],
        opts.sampled(PARAM_SAMPLES, derive_seed(opts.seed, "params")),
    )?;
    let mut inputs = data.inputs;
    inputs.extend(params.inputs.into_iter().map(|mut r| {
        r.input += n_in;
        r
    }));
    Ok(GradCheckReport { inputs, tol: opts.tol })
}

/// Offset predictors start at zero; give them weights large enough to move
/// the sampling points off the integer grid.
fn randomize_offsets(convs: Vec<&mut DeformConv2d<f64>>, rng: &mut ChaCha8Rng) -> Result<()> {
    for d in convs {
        let n = d.offset.weight.numel();
        d.offset.weight.set_data((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect())?;
        if let Some(b) = d.offset.bias.as_mut() {
            let n = b.numel();
            b.set_data((0..n).map(|_| rng.gen_range(-0.6..0.6)).collect())?;
        }
    }
    Ok(())
}

fn tensor_checks(seed: u64) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/tensor"));
    let shape = [2, 3, 4, 4];
    let a = normal(&mut rng, &shape);
    let b = normal(&mut rng, &shape);
    let pos = uniform(&mut rng, &shape, 0.5, 2.0);
    let row = normal(&mut rng, &[1, 3, 1, 4]);
    let target = uniform(&mut rng, &shape, 0.0, 1.0);
    let m1 = normal(&mut rng, &[2, 3, 4, 5]);
    let m2 = normal(&mut rng, &[2, 3, 5, 2]);
    let w = normal(&mut rng, &[6, 4]);
    let bias = normal(&mut rng, &[6]);
    let t = PRIMITIVE_TOL;

    let mut out = vec![
        check_fn("add_broadcast", seed, t, &[a.clone(), row.clone()], |x| x[0].add(&x[1]))?,
        check_fn("sub", seed, t, &[a.clone(), b.clone()], |x| x[0].sub(&x[1]))?,
        check_fn("mul_broadcast", seed, t, &[a.clone(), row.clone()], |x| x[0].mul(&x[1]))?,
        check_fn("div", seed, t, &[a.clone(), pos.clone()], |x| x[0].div(&x[1]))?,
        check_fn("scale_shift_neg", seed, t, &[a.clone()], |x| Ok(x[0].scale(1.7).add_scalar(0.3).neg()))?,
        check_fn("exp", seed, t, &[a.clone()], |x| Ok(x[0].exp()))?,
        check_fn("ln", seed, t, &[pos.clone()], |x| Ok(x[0].ln()))?,
        check_fn("sqrt", seed, t, &[pos.clone()], |x| Ok(x[0].sqrt()))?,
        check_fn("square", seed, t, &[a.clone()], |x| Ok(x[0].square()))?,
        check_fn("relu", seed, t, &[a.clone()], |x| Ok(x[0].relu()))?,
        check_fn("sigmoid", seed, t, &[a.clone()], |x| Ok(x[0].sigmoid()))?,
        check_fn("tanh", seed, t, &[a.clone()], |x| Ok(x[0].tanh()))?,
        check_fn("bce_with_logits", seed, t, &[a.scale(3.0), target.clone()], |x| x[0].bce_with_logits(&x[1]))?,
        check_fn("matmul", seed, t, &[m1.clone(), m2.clone()], |x| x[0].matmul(&x[1]))?,
        check_fn("linear", seed, t, &[a.clone(), w.clone(), bias.clone()], |x| x[0].linear(&x[1], Some(&x[2])))?,
        check_fn("sum_mean", seed, t, &[a.clone()], |x| Ok(x[0].sum().add(&x[0].square().mean())?))?,
        check_fn("sum_axis", seed, t, &[a.clone()], |x| x[0].sum_axis(2)?.square().mean_axis(1))?,
        check_fn("max_axis", seed, t, &[a.clone()], |x| x[0].max_axis(3))?,
        check_fn("softmax", seed, t, &[a.clone()], |x| x[0].softmax(1))?,
        check_fn("reshape_permute", seed, t, &[a.clone()], |x| {
            x[0].reshape(&[2, 3, 16])?.permute(&[2, 0, 1])?.mul(&x[0].reshape(&[16, 2, 3])?)
        })?,
        check_fn("narrow_split_concat", seed, t, &[a.clone(), b.clone()], |x| {
            let parts = x[0].split(1, 3)?;
            let tail = x[1].narrow(1, 1, 2)?;
            concat(&[parts[2].clone(), tail, parts[0].square()], 1)
        })?,
    ];
    // Composite of several primitives.
    out.push(check_fn("composite", seed, t, &[a, b, row], |x| {
        let s = x[0].mul(&x[1])?.add(&x[2])?.tanh().softmax(3)?;
        s.mul(&x[0].sigmoid())?.relu().sum_axis(1)
    })?);
    Ok(out)
}

fn nn_checks(seed: u64) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/nn"));
    let t = MODULE_TOL;
    let x = normal(&mut rng, &[2, 3, 6, 6]);
    let w3 = normal(&mut rng, &[4, 3, 3, 3]);
    let bias = normal(&mut rng, &[4]);
    let w31 = normal(&mut rng, &[4, 3, 3, 1]);
    let offsets = uniform(&mut rng, &[2, 6, 6, 6], -1.4, 1.4);
    let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
    let beta = normal(&mut rng, &[3]);
    let rm: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();

    let mut out = vec![
        check_fn("conv2d_stride2", seed, t, &[x.clone(), w3.clone(), bias.clone()], |v| {
            conv2d(&v[0], &v[1], Some(&v[2]), (2, 2), (1, 1))
        })?,
        check_fn("conv2d_3x1", seed, t, &[x.clone(), w31.clone()], |v| conv2d(&v[0], &v[1], None, (1, 1), (1, 0)))?,
        check_fn("deform_conv2d", seed, t, &[x.clone(), offsets, w31, bias.clone()], |v| {
            deform_conv2d(&v[0], &v[1], &v[2], Some(&v[3]), (1, 1), (1, 0))
        })?,
        check_fn("batch_norm_train", seed, t, &[x.clone(), gamma.clone(), beta.clone()], |v| {
            Ok(batch_norm(&v[0], &v[1], &v[2], None, 1e-5)?.0)
        })?,
        check_fn("batch_norm_eval", seed, t, &[x.clone(), gamma, beta], |v| {
            Ok(batch_norm(&v[0], &v[1], &v[2], Some((&rm, &rv)), 1e-5)?.0)
        })?,
        check_fn("bilinear_up", seed, t, &[x.clone()], |v| bilinear_resize(&v[0], (12, 9)))?,
        check_fn("bilinear_down", seed, t, &[x.clone()], |v| bilinear_resize(&v[0], (4, 3)))?,
        check_fn("nearest", seed, t, &[x.clone()], |v| nearest_resize(&v[0], (9, 4)))?,
        check_fn("adaptive_avg_pool", seed, t, &[x.clone()], |v| adaptive_avg_pool(&v[0], (4, 3)))?,
        check_fn("global_max_pool", seed, t, &[x.clone()], |v| global_max_pool(&v[0]))?,
        check_fn("dropout", seed, t, &[x.clone()], |v| dropout(&v[0], 0.3, &mut ForwardCtx::train(seed)))?,
        check_fn("neighborhood_gather", seed, t, &[x.clone()], |v| neighborhood_gather(&v[0], 3))?,
        check_fn("tokens_round_trip", seed, t, &[x.clone()], |v| {
            from_tokens(&to_tokens(&v[0])?.square(), 6, 6)
        })?,
    ];

    let pb = ParamBuilder::new(seed);
    let mut conv = Conv2d::<f64>::new(&pb.sub("conv"), 3, 5, 3, 1, true);
    out.push(check_module("conv2d_layer", seed, &mut conv, &[x.clone()], false, |m, v, c| m.forward(&v[0], c))?);
    let mut lin = Linear::<f64>::new(&pb.sub("linear"), 6, 4, true);
    out.push(check_module("linear_layer", seed, &mut lin, &[x.clone()], false, |m, v, c| m.forward(&v[0], c))?);
    let mut dconv = DeformConv2d::<f64>::new(&pb.sub("dconv"), 3, 4, (1, 3), false);
    randomize_offsets(vec![&mut dconv], &mut rng)?;
    out.push(check_module("deform_layer", seed, &mut dconv, &[x], false, |m, v, c| m.forward(&v[0], c))?);
    Ok(out)
}

fn attention_checks(seed: u64) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/attention"));
    let x = normal(&mut rng, &[2, 8, 5, 5]);
    let pb = ParamBuilder::new(seed);
    let mut ca = ChannelAttention::<f64>::new(&pb.sub("ca"), 8, 4);
    let mut sa = SpatialAttention::<f64>::new(&pb.sub("sa"));
    let mut eca = EfficientChannelAttention::<f64>::new(&pb.sub("eca"), 3)?;
    Ok(vec![
        check_module("channel_attention", seed, &mut ca, &[x.clone()], false, |m, v, c| m.forward(&v[0], c))?,
        check_module("spatial_attention", seed, &mut sa, &[x.clone()], false, |m, v, c| m.forward(&v[0], c))?,
        check_module("eca", seed, &mut eca, &[x], false, |m, v, c| m.forward(&v[0], c))?,
    ])
}

fn cidm_checks(seed: u64) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/cidm"));
    let f2 = normal(&mut rng, &[2, 8, 8, 8]);
    let f3 = normal(&mut rng, &[2, 12, 4, 4]);
    let f4 = normal(&mut rng, &[2, 16, 2, 2]);
    let mut out = Vec::new();
    for variant in [CidmVariant::Multiplicative, CidmVariant::Additive] {
        let cfg = CidmConfig {
            in_channels: [8, 12, 16],
            width: 8,
            reduction: 4,
            upsample: Upsample::Bilinear,
            variant,
        };
        let mut m = Cidm::<f64>::new(&ParamBuilder::new(seed).sub(variant.name()), cfg);
        let inputs = [f2.clone(), f3.clone(), f4.clone()];
        out.push(check_module(variant.name(), seed, &mut m, &inputs, true, |m, v, c| {
            let o = m.forward(&v[0], &v[1], &v[2], c)?;
            concat(&[o.feature, o.logits], 1)
        })?);
    }
    Ok(out)
}

fn dem_checks(seed: u64) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/dem"));
    let x = normal(&mut rng, &[2, 8, 6, 6]);
    let mut out = Vec::new();
    for order in [DemOrder::GateAfterFuse, DemOrder::GateBeforeFuse] {
        let cfg = DemConfig {
            channels: 8,
            eca_kernel: 3,
            order,
        };
        let mut m = Dem::<f64>::new(&ParamBuilder::new(seed).sub("dem"), cfg)?;
        let convs = m.branches.iter_mut().flat_map(|b| [&mut b.dconv_v, &mut b.dconv_h]).collect();
        randomize_offsets(convs, &mut rng)?;
        let name = format!("dem_{order}");
        out.push(check_module(&name, seed, &mut m, &[x.clone()], true, |m, v, c| m.forward(&v[0], c))?);
    }
    Ok(out)
}

fn fam_checks(seed: u64) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/fam"));
    let cfg = FamConfig {
        in_channels: 8,
        width: 8,
        dim: 8,
        heads: 2,
        local_window: 3,
        pool_size: 3,
        dropout: 0.1,
        scale_logits: true,
        reduction: 4,
    };
    let mut m = Fam::<f64>::new(&ParamBuilder::new(seed).sub("fam"), cfg)?;
    let detail = normal(&mut rng, &[2, 8, 8, 8]);
    let feature = normal(&mut rng, &[2, 8, 4, 4]);
    let coarse = normal(&mut rng, &[2, 1, 4, 4]);
    let inputs = [detail, feature, coarse];
    Ok(vec![check_module("fam", seed, &mut m, &inputs, true, |m, v, c| {
        let t32 = m.project_detail(&v[0], c)?;
        let o = m.forward(&t32, &v[1], &v[2], c)?;
        concat(&[o.refined, o.state.o_f], 1)
    })?])
}

/// A narrow model at 32x32, so the whole network stays cheap to probe.
pub fn verification_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: [8, 8, 8, 8],
            blocks_per_stage: 1,
        },
        input_size: (32, 32),
        decoder_width: 8,
        fam_dim: 8,
        ..ModelConfig::desk()
    }
}

fn model_checks(seed: u64) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "verify/model"));
    let mut m = FocusNet::<f64>::new(verification_model_config(), seed)?;
    let convs = m.dem.branches.iter_mut().flat_map(|b| [&mut b.dconv_v, &mut b.dconv_h]).collect();
    randomize_offsets(convs, &mut rng)?;
    // Non-trivial running statistics, so eval-mode normalization is not the identity.
    for buf in m.buffers() {
        let n = buf.get().len();
        let v = if buf.name().ends_with("running_var") {
            (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()
        } else {
            (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()
        };
        buf.set(v)?;
    }
    let image = normal(&mut rng, &[1, 3, 32, 32]);
    Ok(vec![check_module("focusnet_eval", seed, &mut m, &[image], false, |m, v, c| {
        let h = m.forward(&v[0], c)?.heads;
        concat(&[h.p1, h.p2, h.p3, h.p4, h.fused], 1)
    })?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_suite_names() {
        assert_eq!(Suite::parse_list("all").unwrap().len(), 7);
        assert_eq!(Suite::parse_list("fam").unwrap(), vec![Suite::Fam]);
        assert!(Suite::parse_list("fma").is_err());
    }

    #[test]
    fn tensor_suite_passes() {
        let s = run_suite(Suite::Tensor, 0).unwrap();
        assert!(s.passed(), "{:?}", s.worst());
        assert_eq!(s.results.len() % SEEDS_PER_SUITE as usize, 0);
    }

    #[test]
    fn a_wrong_gradient_fails_its_check() {
        // Gradient of `relu` used where `x^2 / 2` was computed: wrong away from 0 and 1.
        let x = Tensor::<f64>::from_f64(&[0.3, -2.0, 2.5], &[3]).unwrap();
        let r = check_fn("broken", 0, MODULE_TOL, &[x], |v| {
            let y = v[0].relu();
            let bump = v[0].square().scale(0.5).sub(&v[0].relu())?.detach();
            y.add(&bump)
        })
        .unwrap();
        assert!(!CheckResult::from_report(Suite::Tensor, &r.0, 0, &r.1).passed());
    }
}
