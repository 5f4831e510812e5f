//! Structural invariants checked over random inputs.

mod common;

use common::{rand_tensor, randomize, rng};
use focusnet_core::attention::{ChannelAttention, EfficientChannelAttention, SpatialAttention};
use focusnet_core::data::{augment, gen_synthetic, AugmentConfig, Sample, SyntheticSpec};
use focusnet_core::dem::{Dem, DemConfig, DemOrder};
use focusnet_core::metrics::{confusion, Scores};
use focusnet_core::nn::{conv2d, DeformConv2d};
use focusnet_core::{ForwardCtx, Module, ParamBuilder, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

/// Reorders the pixels of every `[B,C,H,W]` plane by the same permutation.
fn permute_pixels(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = x.shape();
    let hw = s[2] * s[3];
    let d = x.data();
    let out = (0..s[0] * s[1]).flat_map(|plane| perm.iter().map(move |&i| d[plane * hw + i])).collect();
    Tensor::new(out, s).unwrap()
}

/// Reorders the channels of a `[B,C,H,W]` tensor.
fn permute_channels(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let d = x.data();
    let out = (0..s[0])
        .flat_map(|b| perm.iter().flat_map(move |&c| d[(b * s[1] + c) * plane..][..plane].iter().copied()))
        .collect();
    Tensor::new(out, s).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn gates_are_open_interval_and_permutation_invariant(seed in any::<u64>(), c in 2usize..8, h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[2, c, h, w], -3.0, 3.0);
        let pb = ParamBuilder::new(seed);
        let mut ca = ChannelAttention::<f64>::new(&pb.sub("ca"), c, 2);
        let mut sa = SpatialAttention::<f64>::new(&pb.sub("sa"));
        let mut eca = EfficientChannelAttention::<f64>::new(&pb.sub("eca"), 3).unwrap();
        randomize(&mut ca, &mut r);
        randomize(&mut sa, &mut r);
        randomize(&mut eca, &mut r);
        let ctx = &mut ForwardCtx::eval();
        let (g_ca, g_sa, g_eca) = (ca.forward(&x, ctx).unwrap(), sa.forward(&x, ctx).unwrap(), eca.forward(&x, ctx).unwrap());
        prop_assert_eq!(g_ca.shape(), &[2, c, 1, 1]);
        prop_assert_eq!(g_sa.shape(), &[2, 1, h, w]);
        prop_assert_eq!(g_eca.shape(), &[2, c, 1, 1]);
        for g in [&g_ca, &g_sa, &g_eca] {
            prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        let mut pixels: Vec<usize> = (0..h * w).collect();
        pixels.shuffle(&mut r);
        let xp = permute_pixels(&x, &pixels);
        prop_assert!(max_diff(&g_ca, &ca.forward(&xp, ctx).unwrap()) < 1e-12);
        prop_assert!(max_diff(&g_eca, &eca.forward(&xp, ctx).unwrap()) < 1e-12);

        let mut channels: Vec<usize> = (0..c).collect();
        channels.shuffle(&mut r);
        let xc = permute_channels(&x, &channels);
        prop_assert!(max_diff(&g_sa, &sa.forward(&xc, ctx).unwrap()) < 1e-12);
    }

    #[test]
    fn softmax_is_normalized_positive_and_shift_invariant(seed in any::<u64>(), n in 1usize..20, shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[3, n], -10.0, 10.0);
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = x.add_scalar(shift).softmax(1).unwrap();
        prop_assert!(max_diff(&y, &shifted) < 1e-12);
    }

    #[test]
    fn conv_output_follows_the_size_formula(
        h in 1usize..12, w in 1usize..12, kh in 1usize..5, kw in 1usize..5,
        sh in 1usize..4, sw in 1usize..4, ph in 0usize..3, pw in 0usize..3,
    ) {
        prop_assume!(h + 2 * ph >= kh && w + 2 * pw >= kw);
        let x = Tensor::<f64>::ones(&[1, 2, h, w]);
        let k = Tensor::<f64>::ones(&[3, 2, kh, kw]);
        let y = conv2d(&x, &k, None, (sh, sw), (ph, pw)).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, (h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1]);
    }

    #[test]
    fn primitives_leave_inputs_untouched(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[2, 3, 5, 4], -1.0, 1.0).into_leaf(true);
        let k = rand_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0).into_leaf(true);
        let (x0, k0) = (x.to_vec(), k.to_vec());
        let y = conv2d(&x, &k, None, (1, 1), (1, 1)).unwrap().relu().softmax(1).unwrap().sum();
        y.backward().unwrap();
        prop_assert_eq!(x.to_vec(), x0);
        prop_assert_eq!(k.to_vec(), k0);
    }

    #[test]
    fn backward_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[1, 2, 6, 6], -1.0, 1.0).into_leaf(true);
        let k = rand_tensor(&mut r, &[4, 2, 3, 3], -1.0, 1.0).into_leaf(true);
        let grads = || {
            x.zero_grad();
            k.zero_grad();
            conv2d(&x, &k, None, (2, 1), (1, 1)).unwrap().sigmoid().square().sum().backward().unwrap();
            (x.grad().unwrap(), k.grad().unwrap())
        };
        let a = grads();
        prop_assert_eq!(a, grads());
    }

    #[test]
    fn detail_module_preserves_spatial_size(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, gate_first in any::<bool>()) {
        let mut r = rng(seed);
        let order = if gate_first { DemOrder::GateBeforeFuse } else { DemOrder::GateAfterFuse };
        let mut dem = Dem::<f64>::new(&ParamBuilder::new(seed), DemConfig { channels: 8, eca_kernel: 3, order }).unwrap();
        randomize(&mut dem, &mut r);
        let x = rand_tensor(&mut r, &[1, 8, h, w], -1.0, 1.0);
        let y = dem.forward(&x, &mut ForwardCtx::eval()).unwrap();
        prop_assert_eq!(y.shape(), &[1, 8, h, w]);
    }

    #[test]
    fn fresh_deformable_layer_is_a_plain_convolution(seed in any::<u64>(), kh in 1usize..4, kw in 1usize..4) {
        let mut r = rng(seed);
        let layer = DeformConv2d::<f64>::new(&ParamBuilder::new(seed), 3, 2, (kh, kw), true);
        prop_assert!(layer.offset.parameters().iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
        prop_assert_eq!(layer.offset.out_channels(), 2 * kh * kw);
        let x = rand_tensor(&mut r, &[1, 3, 6, 5], -1.0, 1.0);
        let y = layer.forward(&x, &mut ForwardCtx::eval()).unwrap();
        let m = &layer.main;
        let plain = conv2d(&x, m.weight.tensor(), m.bias.as_ref().map(|b| b.tensor()), (1, 1), (kh / 2, kw / 2)).unwrap();
        prop_assert_eq!(y.to_vec(), plain.to_vec());
    }

    #[test]
    fn metrics_ignore_pixel_order(seed in any::<u64>(), n in 1usize..300) {
        let mut r = rng(seed);
        let pred: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        let gt: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let pp: Vec<bool> = order.iter().map(|&i| pred[i]).collect();
        let gp: Vec<bool> = order.iter().map(|&i| gt[i]).collect();
        let a = Scores::from_counts(&confusion(&pred, &gt).unwrap());
        let b = Scores::from_counts(&confusion(&pp, &gp).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dice_is_a_function_of_iou(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let pred: Vec<bool> = (0..tp + fp + fn_).map(|i| i < tp + fp).collect();
        let gt: Vec<bool> = (0..tp + fp + fn_).map(|i| i < tp || i >= tp + fp).collect();
        let counts = confusion(&pred, &gt).unwrap();
        prop_assert_eq!((counts.tp, counts.fp, counts.fn_), (tp, fp, fn_));
        let s = Scores::from_counts(&counts);
        prop_assert!(s.mdsc >= s.miou);
        prop_assert!((s.mdsc - 2.0 * s.miou / (1.0 + s.miou)).abs() < 1e-7);
        for v in s.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn augmentation_moves_image_and_mask_together(seed in any::<u64>(), h in 2usize..10, w in 2usize..10, arbitrary in any::<bool>()) {
        let mut r = rng(seed);
        let mask: Vec<f32> = (0..h * w).map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        // Every image channel carries the mask, so any geometric transform
        // that treats both alike keeps them equal outside dropout holes.
        let image: Vec<f32> = mask.iter().cycle().take(3 * h * w).copied().collect();
        let s = Sample {
            id: "s".into(),
            image: Tensor::new(image, &[3, h, w]).unwrap(),
            mask: Tensor::new(mask.clone(), &[1, h, w]).unwrap(),
        };
        let out = augment(&s, &mut r, AugmentConfig { arbitrary_rotation: arbitrary });
        prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if !arbitrary {
            let sum = |d: &[f32]| d.iter().sum::<f32>();
            prop_assert_eq!(sum(out.mask.data()), sum(&mask));
            let plane = out.mask.numel();
            for c in 0..3 {
                for (i, &m) in out.mask.data().iter().enumerate() {
                    let v = out.image.data()[c * plane + i];
                    prop_assert!(v == m || v == 0.0, "image and mask disagree at {}", i);
                }
            }
        }
    }
}

#[test]
fn synthetic_data_is_a_pure_function_of_its_spec() {
    let spec = SyntheticSpec {
        count: 3,
        resolution: 32,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let (a, b) = (gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image.to_vec(), y.image.to_vec());
        assert_eq!(x.mask.to_vec(), y.mask.to_vec());
    }
    let other = gen_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a[0].image.to_vec(), other[0].image.to_vec());
}

#[test]
fn parameter_names_are_unique() {
    let model = focusnet_core::model::FocusNet::<f32>::new(focusnet_core::model::ModelConfig::desk(), 0).unwrap();
    let mut names: Vec<&str> = model.parameters().iter().map(|p| p.name()).collect();
    names.extend(model.buffers().iter().map(|b| b.name()));
    let n = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), n);
}
