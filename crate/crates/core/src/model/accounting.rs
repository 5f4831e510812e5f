//! Parameter and multiply-accumulate accounting.
//!
//! Two independent routes are provided. The analytic route evaluates closed
//! formulas from a [`ModelConfig`]; the counted route sums parameter sizes
//! of a built model and tallies MACs while a forward pass runs. The two must
//! agree module by module.
//!
//! MAC conventions, per image:
//! * convolution: `Cout * H' * W' * Cin * kh * kw` (deformable: main plus offset predictor);
//! * linear layer: `rows * in * out`;
//! * FAM attention: `2 * N * (w^2 + p^2) * d` per call (logits plus weighted sum);
//! * normalization, activations, resizing, pooling and elementwise ops are not counted.

use std::collections::BTreeMap;

use crate::module::{ForwardCtx, Module};
use crate::tensor::{Real, Tensor};
use crate::Result;

use super::backbone::{BackboneConfig, INPUT_CHANNELS, STAGES};
use super::focusnet::{FocusNet, ModelConfig, MODULE_NAMES};

/// One row per top-level module, in wiring order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accounting {
    pub rows: Vec<(String, u64)>,
}

impl Accounting {
    pub fn total(&self) -> u64 {
        self.rows.iter().map(|(_, v)| v).sum()
    }

    pub fn get(&self, module: &str) -> Option<u64> {
        self.rows.iter().find(|(m, _)| m == module).map(|&(_, v)| v)
    }

    fn from_map(mut m: BTreeMap<String, u64>) -> Self {
        let mut rows: Vec<(String, u64)> = MODULE_NAMES
            .iter()
            .map(|&n| (n.to_string(), m.remove(n).unwrap_or(0)))
            .collect();
        rows.extend(m);
        Accounting { rows }
    }
}

fn conv_params(cin: usize, cout: usize, kh: usize, kw: usize, bias: bool) -> u64 {
    (cin * cout * kh * kw + if bias { cout } else { 0 }) as u64
}

fn linear_params(i: usize, o: usize, bias: bool) -> u64 {
    conv_params(i, o, 1, 1, bias)
}

fn bn_params(c: usize) -> u64 {
    2 * c as u64
}

fn ca_hidden(c: usize, reduction: usize) -> usize {
    (c / reduction.max(1)).max(1)
}

/// Sum of parameter sizes grouped by the first segment of each name.
pub fn counted_params<T: Real>(model: &FocusNet<T>) -> Accounting {
    let mut m = BTreeMap::new();
    for p in model.parameters() {
        let top = p.name().split('.').next().unwrap_or("").to_string();
        *m.entry(top).or_insert(0) += p.numel() as u64;
    }
    Accounting::from_map(m)
}

/// MACs tallied during one eval-mode forward of a single zero image.
pub fn counted_macs<T: Real>(model: &FocusNet<T>) -> Result<Accounting> {
    let (h, w) = model.config.input_size;
    let x = Tensor::<T>::zeros(&[1, INPUT_CHANNELS, h, w]);
    let mut ctx = ForwardCtx::eval();
    model.forward(&x, &mut ctx)?;
    Ok(Accounting::from_map(ctx.macs_by_module().clone()))
}

pub fn analytic_params(cfg: &ModelConfig) -> Accounting {
    let BackboneConfig {
        channels: ch,
        blocks_per_stage,
    } = cfg.backbone;
    let mut backbone = 0;
    let mut cin = INPUT_CHANNELS;
    for (i, &c) in ch.iter().enumerate().take(STAGES) {
        let (k, _) = BackboneConfig::down_geometry(i);
        backbone += conv_params(cin, c, k, k, false) + bn_params(c);
        backbone += blocks_per_stage as u64 * (conv_params(c, c, 3, 3, false) + bn_params(c));
        cin = c;
    }

    let c1 = ch[0];
    let cb = c1 / crate::dem::BRANCHES;
    let deform = |kh: usize, kw: usize| conv_params(cb, cb, kh, kw, false) + conv_params(cb, 2 * kh * kw, kh, kw, true);
    let branch = deform(3, 1) + bn_params(cb) + deform(1, 3) + bn_params(cb);
    let dem = crate::dem::BRANCHES as u64 * branch
        + conv_params(c1, c1, 1, 1, true)
        + conv_params(1, 1, 1, cfg.eca_kernel, true)
        + conv_params(c1, c1, 1, 1, false)
        + bn_params(c1);

    let d = cfg.decoder_width;
    let hid = ca_hidden(d, cfg.reduction);
    let ca = linear_params(d, hid, false) + linear_params(hid, d, false);
    let conv_bn3 = conv_params(d, d, 3, 3, false) + bn_params(d);
    let cidm = conv_params(ch[1], d, 1, 1, true)
        + conv_params(ch[2], d, 1, 1, true)
        + conv_params(ch[3], d, 1, 1, true)
        + 3 * conv_bn3
        + ca
        + conv_params(2, 1, 7, 7, true)
        + conv_params(4 * d, d, 3, 3, false)
        + bn_params(d)
        + conv_params(d, 1, 1, 1, true);

    let dm = cfg.fam_dim;
    let fam = conv_params(c1, d, 1, 1, true)
        + linear_params(d, dm, true)
        + 2 * linear_params(d, 2 * dm, true)
        + linear_params(dm, d, true)
        + ca
        + 2 * conv_params(d, d, 3, 3, true)
        + conv_params(d, 1, 1, 1, true);

    Accounting::from_map(
        [("backbone", backbone), ("dem", dem), ("cidm_m", cidm), ("cidm_a", cidm), ("fam", fam)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    )
}

pub fn analytic_macs(cfg: &ModelConfig) -> Accounting {
    let (h, w) = cfg.input_size;
    let ch = cfg.backbone.channels;
    // Pixel counts at strides 4, 8, 16, 32.
    let px: Vec<u64> = (0..STAGES).map(|i| ((h >> (i + 2)) * (w >> (i + 2))) as u64).collect();
    let conv = |cin: usize, cout: usize, kh: usize, kw: usize, pixels: u64| (cin * cout * kh * kw) as u64 * pixels;

    let mut backbone = 0;
    let mut cin = INPUT_CHANNELS;
    for (i, &c) in ch.iter().enumerate() {
        let (k, _) = BackboneConfig::down_geometry(i);
        backbone += conv(cin, c, k, k, px[i]);
        backbone += cfg.backbone.blocks_per_stage as u64 * conv(c, c, 3, 3, px[i]);
        cin = c;
    }

    let (c1, n1) = (ch[0], px[0]);
    let cb = c1 / crate::dem::BRANCHES;
    let deform = |kh: usize, kw: usize| conv(cb, cb, kh, kw, n1) + conv(cb, 2 * kh * kw, kh, kw, n1);
    let dem = crate::dem::BRANCHES as u64 * (deform(3, 1) + deform(1, 3))
        + 2 * conv(c1, c1, 1, 1, n1)
        + conv(1, 1, 1, cfg.eca_kernel, c1 as u64);

    let d = cfg.decoder_width;
    let hid = ca_hidden(d, cfg.reduction);
    let ca = 2 * 2 * (d * hid) as u64;
    let cidm = conv(ch[1], d, 1, 1, px[1])
        + conv(ch[2], d, 1, 1, px[2])
        + conv(ch[3], d, 1, 1, px[3])
        + conv(d, d, 3, 3, px[2])
        + 2 * conv(d, d, 3, 3, px[1])
        + ca
        + conv(2, 1, 7, 7, px[1])
        + conv(4 * d, d, 3, 3, px[1])
        + conv(d, 1, 1, 1, px[1]);

    let dm = cfg.fam_dim;
    let pool = (cfg.pool_size * cfg.pool_size) as u64;
    let taps = (cfg.local_window * cfg.local_window) as u64 + pool;
    let per_call = conv(d, dm, 1, 1, n1)
        + conv(d, 2 * dm, 1, 1, n1)
        + conv(d, 2 * dm, 1, 1, pool)
        + 2 * n1 * taps * dm as u64
        + conv(dm, d, 1, 1, n1)
        + ca
        + 2 * conv(d, d, 3, 3, n1)
        + conv(d, 1, 1, 1, n1);
    let fam = conv(c1, d, 1, 1, n1) + 2 * per_call;

    Accounting::from_map(
        [("backbone", backbone), ("dem", dem), ("cidm_m", cidm), ("cidm_a", cidm), ("fam", fam)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_routes_agree() {
        let cfg = ModelConfig::desk();
        let m = FocusNet::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(counted_params(&m), analytic_params(&cfg));
        assert_eq!(counted_params(&m).total(), m.num_params() as u64);
        assert_eq!(counted_macs(&m).unwrap(), analytic_macs(&cfg));
    }

    #[test]
    fn routes_agree_off_default() {
        let mut cfg = ModelConfig::desk();
        cfg.backbone = BackboneConfig {
            channels: [8, 12, 20, 24],
            blocks_per_stage: 2,
        };
        cfg.input_size = (64, 96);
        cfg.decoder_width = 16;
        cfg.fam_dim = 12;
        cfg.fam_heads = 3;
        cfg.local_window = 5;
        cfg.pool_size = 2;
        cfg.eca_kernel = 5;
        cfg.reduction = 4;
        let m = FocusNet::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(counted_params(&m), analytic_params(&cfg));
        assert_eq!(counted_macs(&m).unwrap(), analytic_macs(&cfg));
    }
}
