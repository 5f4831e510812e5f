//! Naive reference implementations used only by the test suites.
//!
//! Everything here is written as direct loops over plain `f64` arrays and
//! shares no code with `focusnet-core`. Module oracles read their weights
//! from a [`Params`] map keyed by the same dotted names the core modules use,
//! and evaluate batch normalization with running statistics (eval mode).

use std::collections::BTreeMap;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Array {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array::new(shape, vec![0.0; shape.iter().product()])
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank 4, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, h, w) = self.dims4();
        self.data[((b * cs + c) * h + y) * w + x]
    }

    fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let (_, cs, h, w) = self.dims4();
        self.data[((b * cs + c) * h + y) * w + x] = v;
    }

    /// Reads `(y, x)` of plane `(b, c)`, zero outside the image.
    fn at_padded(&self, b: usize, c: usize, y: i64, x: i64) -> f64 {
        let (_, _, h, w) = self.dims4();
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            self.at(b, c, y as usize, x as usize)
        }
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Named weights and running statistics.
#[derive(Debug, Clone, Default)]
pub struct Params(pub BTreeMap<String, Array>);

impl Params {
    pub fn insert(&mut self, name: &str, a: Array) {
        self.0.insert(name.to_string(), a);
    }

    pub fn get(&self, name: &str) -> &Array {
        self.0.get(name).unwrap_or_else(|| panic!("oracle: no parameter `{name}`"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

pub fn relu(x: &Array) -> Array {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise product or sum of two `[B,C,H,W]` arrays, where either side
/// may have extent 1 in any axis.
fn broadcast(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let (ab, ac, ah, aw) = a.dims4();
    let (bb, bc, bh, bw) = b.dims4();
    let dim = |p: usize, q: usize| {
        assert!(p == q || p == 1 || q == 1, "cannot broadcast {:?} with {:?}", a.shape, b.shape);
        p.max(q)
    };
    let (n, c, h, w) = (dim(ab, bb), dim(ac, bc), dim(ah, bh), dim(aw, bw));
    let pick = |i: usize, e: usize| if e == 1 { 0 } else { i };
    let mut out = Array::zeros(&[n, c, h, w]);
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let va = a.at(pick(i, ab), pick(j, ac), pick(y, ah), pick(x, aw));
                    let vb = b.at(pick(i, bb), pick(j, bc), pick(y, bh), pick(x, bw));
                    out.set(i, j, y, x, f(va, vb));
                }
            }
        }
    }
    out
}

pub fn mul(a: &Array, b: &Array) -> Array {
    broadcast(a, b, |x, y| x * y)
}

pub fn add(a: &Array, b: &Array) -> Array {
    broadcast(a, b, |x, y| x + y)
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[&Array]) -> Array {
    let (b, _, h, w) = parts[0].dims4();
    let c: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = Array::zeros(&[b, c, h, w]);
    for n in 0..b {
        let mut base = 0;
        for p in parts {
            for j in 0..p.shape[1] {
                for y in 0..h {
                    for x in 0..w {
                        out.set(n, base + j, y, x, p.at(n, j, y, x));
                    }
                }
            }
            base += p.shape[1];
        }
    }
    out
}

/// Channels `[start, start + len)`.
pub fn channel_slice(a: &Array, start: usize, len: usize) -> Array {
    let (b, _, h, w) = a.dims4();
    let mut out = Array::zeros(&[b, len, h, w]);
    for n in 0..b {
        for j in 0..len {
            for y in 0..h {
                for x in 0..w {
                    out.set(n, j, y, x, a.at(n, start + j, y, x));
                }
            }
        }
    }
    out
}

/// Direct 2-D cross-correlation with zero padding.
pub fn conv2d(x: &Array, w: &Array, bias: Option<&Array>, stride: (usize, usize), pad: (usize, usize)) -> Array {
    let (b, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = Array::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.map_or(0.0, |bb| bb.data[o]);
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as i64 - pad.0 as i64;
                                let ix = (ox * stride.1 + kx) as i64 - pad.1 as i64;
                                s += w.at(o, i, ky, kx) * x.at_padded(n, i, iy, ix);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, s);
                }
            }
        }
    }
    out
}

/// Bilinear read at a fractional position, zero outside the image.
pub fn bilinear_sample(x: &Array, b: usize, c: usize, y: f64, xx: f64) -> f64 {
    let (y0, x0) = (y.floor(), xx.floor());
    let (fy, fx) = (y - y0, xx - x0);
    let (iy, ix) = (y0 as i64, x0 as i64);
    (1.0 - fy) * (1.0 - fx) * x.at_padded(b, c, iy, ix)
        + (1.0 - fy) * fx * x.at_padded(b, c, iy, ix + 1)
        + fy * (1.0 - fx) * x.at_padded(b, c, iy + 1, ix)
        + fy * fx * x.at_padded(b, c, iy + 1, ix + 1)
}

/// Deformable convolution: tap `k = ky*kw + kx` of each output pixel reads
/// at its regular position shifted by `(offsets[2k], offsets[2k+1])`.
pub fn deform_conv2d(
    x: &Array,
    offsets: &Array,
    w: &Array,
    bias: Option<&Array>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Array {
    let (b, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    assert_eq!(offsets.shape, vec![b, 2 * kh * kw, ho, wo], "offset shape");
    let mut out = Array::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias.map_or(0.0, |bb| bb.data[o]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let k = ky * kw + kx;
                            let py = (oy * stride.0 + ky) as f64 - pad.0 as f64 + offsets.at(n, 2 * k, oy, ox);
                            let px = (ox * stride.1 + kx) as f64 - pad.1 as f64 + offsets.at(n, 2 * k + 1, oy, ox);
                            for i in 0..cin {
                                s += w.at(o, i, ky, kx) * bilinear_sample(x, n, i, py, px);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, s);
                }
            }
        }
    }
    out
}

/// Source coordinate of output index `d` under half-pixel alignment,
/// clamped to the valid range.
fn half_pixel(d: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let src = ((d as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize with `align_corners = false`.
pub fn bilinear_resize(x: &Array, size: (usize, usize)) -> Array {
    let (b, c, h, w) = x.dims4();
    let mut out = Array::zeros(&[b, c, size.0, size.1]);
    for n in 0..b {
        for j in 0..c {
            for oy in 0..size.0 {
                let (y0, y1, fy) = half_pixel(oy, h, size.0);
                for ox in 0..size.1 {
                    let (x0, x1, fx) = half_pixel(ox, w, size.1);
                    let top = (1.0 - fx) * x.at(n, j, y0, x0) + fx * x.at(n, j, y0, x1);
                    let bottom = (1.0 - fx) * x.at(n, j, y1, x0) + fx * x.at(n, j, y1, x1);
                    out.set(n, j, oy, ox, (1.0 - fy) * top + fy * bottom);
                }
            }
        }
    }
    out
}

/// Nearest-neighbour resize reading `floor(d * in / out)`.
pub fn nearest_resize(x: &Array, size: (usize, usize)) -> Array {
    let (b, c, h, w) = x.dims4();
    let mut out = Array::zeros(&[b, c, size.0, size.1]);
    for n in 0..b {
        for j in 0..c {
            for oy in 0..size.0 {
                for ox in 0..size.1 {
                    out.set(n, j, oy, ox, x.at(n, j, oy * h / size.0, ox * w / size.1));
                }
            }
        }
    }
    out
}

/// Adaptive average pooling with bins `[floor(i*n/out), ceil((i+1)*n/out))`.
pub fn adaptive_avg_pool(x: &Array, size: (usize, usize)) -> Array {
    let (b, c, h, w) = x.dims4();
    let bin = |i: usize, n: usize, out: usize| (i * n / out, ((i + 1) * n + out - 1) / out);
    let mut out = Array::zeros(&[b, c, size.0, size.1]);
    for n in 0..b {
        for j in 0..c {
            for oy in 0..size.0 {
                let (r0, r1) = bin(oy, h, size.0);
                for ox in 0..size.1 {
                    let (c0, c1) = bin(ox, w, size.1);
                    let mut s = 0.0;
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            s += x.at(n, j, y, xx);
                        }
                    }
                    out.set(n, j, oy, ox, s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
    }
    out
}

pub const BN_EPS: f64 = 1e-5;

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel.
pub fn batch_norm_eval(x: &Array, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Array {
    let (b, c, h, w) = x.dims4();
    let mut out = x.clone();
    for n in 0..b {
        for j in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = (x.at(n, j, y, xx) - mean[j]) / (var[j] + BN_EPS).sqrt();
                    out.set(n, j, y, xx, gamma[j] * v + beta[j]);
                }
            }
        }
    }
    out
}

/// Train-mode normalization with the biased batch variance.
pub fn batch_norm_train(x: &Array, gamma: &[f64], beta: &[f64]) -> Array {
    let (b, c, h, w) = x.dims4();
    let count = (b * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for j in 0..c {
        let mut s = 0.0;
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(n, j, y, xx);
                }
            }
        }
        mean[j] = s / count;
        let mut q = 0.0;
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    q += (x.at(n, j, y, xx) - mean[j]).powi(2);
                }
            }
        }
        var[j] = q / count;
    }
    batch_norm_eval(x, gamma, beta, &mean, &var)
}

fn bn(p: &Params, prefix: &str, x: &Array) -> Array {
    batch_norm_eval(
        x,
        &p.get(&join(prefix, "weight")).data,
        &p.get(&join(prefix, "bias")).data,
        &p.get(&join(prefix, "running_mean")).data,
        &p.get(&join(prefix, "running_var")).data,
    )
}

/// A named convolution with "same" padding for odd kernels.
fn conv(p: &Params, prefix: &str, x: &Array, stride: usize) -> Array {
    let w = p.get(&join(prefix, "weight"));
    let bias = join(prefix, "bias");
    let b = p.has(&bias).then(|| p.get(&bias));
    let pad = (w.shape[2] / 2, w.shape[3] / 2);
    conv2d(x, w, b, (stride, stride), pad)
}

/// Convolution (no bias), BN, optional ReLU.
pub fn conv_bn(p: &Params, prefix: &str, x: &Array, stride: usize, with_relu: bool) -> Array {
    let y = bn(p, &join(prefix, "bn"), &conv(p, &join(prefix, "conv"), x, stride));
    if with_relu {
        relu(&y)
    } else {
        y
    }
}

/// `y[o] = b[o] + sum_i W[o][i] x[i]` on a vector.
fn linear_vec(p: &Params, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = p.get(&join(prefix, "weight"));
    let (out, inp) = (w.shape[0], w.shape[1]);
    assert_eq!(inp, x.len(), "linear input width");
    let bias = join(prefix, "bias");
    (0..out)
        .map(|o| {
            let b = if p.has(&bias) { p.get(&bias).data[o] } else { 0.0 };
            b + (0..inp).map(|i| w.data[o * inp + i] * x[i]).sum::<f64>()
        })
        .collect()
}

/// Channel gate `sigmoid(MLP(avg) + MLP(max))`, shape `[B,C,1,1]`.
pub fn channel_attention(p: &Params, prefix: &str, x: &Array) -> Array {
    let (b, c, h, w) = x.dims4();
    let mlp = |v: &[f64]| {
        let hid: Vec<f64> = linear_vec(p, &join(prefix, "fc1"), v).into_iter().map(|z| z.max(0.0)).collect();
        linear_vec(p, &join(prefix, "fc2"), &hid)
    };
    let mut out = Array::zeros(&[b, c, 1, 1]);
    for n in 0..b {
        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for j in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at(n, j, y, xx);
                    avg[j] += v / (h * w) as f64;
                    max[j] = max[j].max(v);
                }
            }
        }
        let (ga, gm) = (mlp(&avg), mlp(&max));
        for j in 0..c {
            out.set(n, j, 0, 0, sigmoid(ga[j] + gm[j]));
        }
    }
    out
}

/// Spatial gate `sigmoid(conv7x7([max_c x, mean_c x]))`, shape `[B,1,H,W]`.
pub fn spatial_attention(p: &Params, prefix: &str, x: &Array) -> Array {
    let (b, c, h, w) = x.dims4();
    let mut desc = Array::zeros(&[b, 2, h, w]);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let vals: Vec<f64> = (0..c).map(|j| x.at(n, j, y, xx)).collect();
                desc.set(n, 0, y, xx, vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                desc.set(n, 1, y, xx, vals.iter().sum::<f64>() / c as f64);
            }
        }
    }
    conv(p, &join(prefix, "conv"), &desc, 1).map(sigmoid)
}

/// ECA gate: a 1-D convolution over the pooled channel vector, zero padded.
pub fn eca(p: &Params, prefix: &str, x: &Array) -> Array {
    let (b, c, h, w) = x.dims4();
    let k = p.get(&join(prefix, "conv.weight"));
    let bias = p.get(&join(prefix, "conv.bias")).data[0];
    let ks = k.data.len();
    let r = (ks / 2) as i64;
    let mut out = Array::zeros(&[b, c, 1, 1]);
    for n in 0..b {
        let pooled: Vec<f64> = (0..c)
            .map(|j| (0..h).flat_map(|y| (0..w).map(move |xx| (y, xx))).map(|(y, xx)| x.at(n, j, y, xx)).sum::<f64>() / (h * w) as f64)
            .collect();
        for j in 0..c {
            let mut s = bias;
            for t in 0..ks {
                let src = j as i64 + t as i64 - r;
                if src >= 0 && (src as usize) < c {
                    s += k.data[t] * pooled[src as usize];
                }
            }
            out.set(n, j, 0, 0, sigmoid(s));
        }
    }
    out
}

fn upsample(x: &Array, factor: usize, bilinear: bool) -> Array {
    let size = (x.shape[2] * factor, x.shape[3] * factor);
    if bilinear {
        bilinear_resize(x, size)
    } else {
        nearest_resize(x, size)
    }
}

/// Decoder outputs.
#[derive(Debug, Clone)]
pub struct CidmOut {
    pub f2: Array,
    pub f3: Array,
    pub f4: Array,
    pub f31: Array,
    pub f32: Array,
    pub feature: Array,
    pub logits: Array,
}

/// Cross-semantic decoder; `multiplicative` selects the combiner of the
/// alignment step.
pub fn cidm(p: &Params, prefix: &str, multiplicative: bool, bilinear: bool, f2: &Array, f3: &Array, f4: &Array) -> CidmOut {
    let comb = |a: &Array, b: &Array| if multiplicative { mul(a, b) } else { add(a, b) };
    let q = |n: &str| join(prefix, n);
    let p2 = conv(p, &q("proj2"), f2, 1);
    let p3 = conv(p, &q("proj3"), f3, 1);
    let p4 = conv(p, &q("proj4"), f4, 1);

    let big_f4 = upsample(&p4, 4, bilinear);
    let inner3 = conv_bn(p, &q("conv3"), &upsample(&p4, 2, bilinear), 1, false);
    let big_f3 = upsample(&comb(&inner3, &p3), 2, bilinear);
    let inner2 = conv_bn(p, &q("conv2_inner"), &upsample(&p3, 2, bilinear), 1, false);
    let mixed = comb(&comb(&big_f4, &inner2), &p2);
    let big_f2 = conv_bn(p, &q("conv2_outer"), &mixed, 1, false);

    let f31 = mul(&big_f3, &channel_attention(p, &q("ca"), &big_f4));
    let f32 = mul(&big_f3, &spatial_attention(p, &q("sa"), &big_f2));
    let cat = concat_channels(&[&big_f2, &f31, &f32, &big_f4]);
    let feature = conv_bn(p, &q("out_conv"), &cat, 1, true);
    let logits = conv(p, &q("head"), &feature, 1);
    CidmOut {
        f2: big_f2,
        f3: big_f3,
        f4: big_f4,
        f31,
        f32,
        feature,
        logits,
    }
}

/// A deformable layer whose offsets come from its own predictor conv.
fn deform_layer(p: &Params, prefix: &str, x: &Array) -> Array {
    let w = p.get(&join(prefix, "main.weight"));
    let pad = (w.shape[2] / 2, w.shape[3] / 2);
    let offsets = conv(p, &join(prefix, "offset"), x, 1);
    let bias = join(prefix, "main.bias");
    deform_conv2d(x, &offsets, w, p.has(&bias).then(|| p.get(&bias)), (1, 1), pad)
}

/// The concatenated branch outputs `T` of the detail module.
pub fn dem_branches(p: &Params, prefix: &str, f1: &Array) -> Array {
    let quarter = f1.shape[1] / 4;
    let outs: Vec<Array> = (0..4)
        .map(|i| {
            let bp = join(prefix, &format!("branch{i}"));
            let t = channel_slice(f1, i * quarter, quarter);
            let v = relu(&bn(p, &join(&bp, "bn_v"), &deform_layer(p, &join(&bp, "dconv_v"), &t)));
            relu(&bn(p, &join(&bp, "bn_h"), &deform_layer(p, &join(&bp, "dconv_h"), &v)))
        })
        .collect();
    concat_channels(&outs.iter().collect::<Vec<_>>())
}

/// Detail module; `gate_after_fuse` puts the ECA gate after the 1x1
/// convolution, otherwise before it.
pub fn dem(p: &Params, prefix: &str, gate_after_fuse: bool, f1: &Array) -> Array {
    let t = dem_branches(p, prefix, f1);
    let gated = |x: &Array| mul(x, &eca(p, &join(prefix, "eca"), x));
    let fuse = |x: &Array| conv(p, &join(prefix, "fuse"), x, 1);
    let refined = if gate_after_fuse { gated(&fuse(&t)) } else { fuse(&gated(&t)) };
    conv_bn(p, &join(prefix, "bru"), &refined, 1, true)
}

/// Focus attention settings.
#[derive(Debug, Clone, Copy)]
pub struct FamSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub pool: usize,
    pub scale: bool,
}

#[derive(Debug, Clone)]
pub struct FamOut {
    pub refined: Array,
    pub coarse: Array,
    /// Per query pixel and head, the `window^2 + pool^2` softmax weights:
    /// `attn[b][n][head]`.
    pub attn: Vec<Vec<Vec<Vec<f64>>>>,
    pub o_r: Array,
    pub o_f: Array,
}

fn pixel(a: &Array, b: usize, y: usize, x: usize) -> Vec<f64> {
    (0..a.shape[1]).map(|c| a.at(b, c, y, x)).collect()
}

/// One focus-attention call on an already projected detail map `t32`
/// (stride 4) and a decoder feature and coarse map (stride 8), eval mode.
/// Every attention row is computed by brute force over its window.
pub fn fam(p: &Params, prefix: &str, spec: FamSpec, t32: &Array, feature: &Array, coarse: &Array) -> FamOut {
    let (b, width, h, w) = t32.dims4();
    let q = |n: &str| join(prefix, n);
    let f_up = bilinear_resize(feature, (h, w));
    let coarse_up = bilinear_resize(coarse, (h, w));
    let d = spec.dim;
    let dh = d / spec.heads;
    let r = (spec.window / 2) as i64;
    let scale = if spec.scale { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let pooled = adaptive_avg_pool(&f_up, (spec.pool, spec.pool));

    let mut mixed = Array::zeros(&[b, width, h, w]);
    let mut attn_all = Vec::with_capacity(b);
    for n in 0..b {
        // Key/value per pixel of the resized feature, and per pooled token.
        let kv_at = |y: usize, x: usize| linear_vec(p, &q("kv_local_linear"), &pixel(&f_up, n, y, x));
        let kv_map: Vec<Vec<f64>> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| kv_at(y, x)).collect();
        let kv_pool: Vec<Vec<f64>> = (0..spec.pool)
            .flat_map(|y| (0..spec.pool).map(move |x| (y, x)))
            .map(|(y, x)| linear_vec(p, &q("kv_pool_linear"), &pixel(&pooled, n, y, x)))
            .collect();
        let mut attn_b = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let query = linear_vec(p, &q("q_linear"), &pixel(t32, n, y, x));
                // Neighbour j = (dy + r) * window + (dx + r); outside pixels
                // contribute all-zero keys and values.
                let mut local = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            local.push(vec![0.0; 2 * d]);
                        } else {
                            local.push(kv_map[yy as usize * w + xx as usize].clone());
                        }
                    }
                }
                let mut out = vec![0.0; d];
                let mut rows = Vec::with_capacity(spec.heads);
                for head in 0..spec.heads {
                    let range = head * dh..(head + 1) * dh;
                    let dot = |kv: &[f64]| range.clone().map(|i| query[i] * kv[i]).sum::<f64>() * scale;
                    let logits: Vec<f64> = local.iter().chain(&kv_pool).map(|kv| dot(kv)).collect();
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let a: Vec<f64> = e.iter().map(|v| v / z).collect();
                    for (k, kv) in local.iter().chain(&kv_pool).enumerate() {
                        for i in range.clone() {
                            out[i] += a[k] * kv[d + i];
                        }
                    }
                    rows.push(a);
                }
                attn_b.push(rows);
                let o = linear_vec(p, &q("out_linear"), &out);
                for (c, v) in o.into_iter().enumerate() {
                    mixed.set(n, c, y, x, v);
                }
            }
        }
        attn_all.push(attn_b);
    }
    let f_ca = mul(&f_up, &channel_attention(p, &q("ca"), &f_up));
    let o_f = mul(&mul(&mixed, &f_ca), t32);
    let r1 = conv(p, &q("refine1"), &o_f, 1);
    let r2 = conv(p, &q("refine2"), &r1, 1);
    let r3 = conv(p, &q("refine_out"), &r2, 1);
    FamOut {
        refined: add(&coarse_up, &r3),
        coarse: coarse_up,
        attn: attn_all,
        o_r: mixed,
        o_f,
    }
}

/// Backbone stand-in: per stage a strided ConvBn+ReLU and `blocks` 3x3
/// ConvBn+ReLU blocks. Returns the four stage outputs.
pub fn backbone(p: &Params, prefix: &str, blocks: usize, image: &Array) -> [Array; 4] {
    let mut x = image.clone();
    let mut outs = Vec::new();
    for s in 0..4 {
        let sp = join(prefix, &format!("stage{}", s + 1));
        let stride = if s == 0 { 4 } else { 2 };
        x = conv_bn(p, &join(&sp, "down"), &x, stride, true);
        for j in 0..blocks {
            x = conv_bn(p, &join(&sp, &format!("block{j}")), &x, 1, true);
        }
        outs.push(x.clone());
    }
    outs.try_into().expect("four stages")
}

/// The five full-resolution maps `[P1, P2, P3, P4, fused]`.
#[derive(Debug, Clone)]
pub struct Heads {
    pub maps: [Array; 5],
}

/// Whole network in eval mode with the gate-after-fuse detail module and
/// bilinear decoder upsampling.
pub fn focusnet(p: &Params, blocks: usize, spec: FamSpec, image: &Array) -> Heads {
    let full = (image.shape[2], image.shape[3]);
    let [f1, f2, f3, f4] = backbone(p, "backbone", blocks, image);
    let detail = dem(p, "dem", true, &f1);
    let m = cidm(p, "cidm_m", true, true, &f2, &f3, &f4);
    let a = cidm(p, "cidm_a", false, true, &f2, &f3, &f4);
    let t32 = conv(p, "fam.t_proj", &detail, 1);
    let fm = fam(p, "fam", spec, &t32, &m.feature, &m.logits);
    let fa = fam(p, "fam", spec, &t32, &a.feature, &a.logits);
    let p1 = bilinear_resize(&fm.coarse, full);
    let p2 = bilinear_resize(&fa.coarse, full);
    let p3 = bilinear_resize(&fm.refined, full);
    let p4 = bilinear_resize(&fa.refined, full);
    let fused = add(&add(&add(&p1, &p2), &p3), &p4);
    Heads {
        maps: [p1, p2, p3, p4, fused],
    }
}

/// Metric values computed straight from a pixel loop.
#[derive(Debug, Clone, Copy)]
pub struct PixelMetrics {
    pub iou: f64,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f2: f64,
}

pub const METRIC_EPS: f64 = 1e-8;

pub fn pixel_metrics(pred: &[bool], gt: &[bool]) -> PixelMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            tp += 1.0;
        } else if pred[i] {
            fp += 1.0;
        } else if gt[i] {
            fn_ += 1.0;
        } else {
            tn += 1.0;
        }
    }
    let e = METRIC_EPS;
    let recall = (tp + e) / (tp + fn_ + e);
    let precision = (tp + e) / (tp + fp + e);
    PixelMetrics {
        iou: (tp + e) / (tp + fp + fn_ + e),
        dsc: (2.0 * tp + e) / (2.0 * tp + fp + fn_ + e),
        recall,
        precision,
        accuracy: (tp + tn) / pred.len() as f64,
        f2: (5.0 * precision * recall + e) / (4.0 * precision + recall + e),
    }
}

/// Two-sided Wilcoxon signed-rank p-value by enumerating all `2^n` sign
/// assignments of the ranked absolute differences. Requires no zero
/// differences and no ties.
pub fn wilcoxon_enumerated(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    assert!(n <= 24, "enumeration limited to 24 pairs");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut rank = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        assert!(d[i] != 0.0, "zero difference");
        if r > 0 {
            assert!(d[i].abs() != d[order[r - 1]].abs(), "tied differences");
        }
        rank[i] = (r + 1) as f64;
    }
    let w_plus: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let observed = w_plus.min(total - w_plus);
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| rank[i]).sum();
        if w.min(total - w) <= observed {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}
