//! Geometric and occlusion augmentation.
//!
//! Each call draws, in order: horizontal flip (p = 0.5), vertical flip
//! (p = 0.5), rotation (p = 0.5) and coarse dropout (p = 0.3). Rotation is
//! by a uniformly chosen multiple of 90 degrees (only 180 for non-square
//! images), or by an arbitrary angle when enabled. Coarse dropout zeroes one
//! or two rectangles of at most 1/8 of the image area in the image only.
//! Image and mask always receive the same geometric transform.

use rand::Rng;

use super::Sample;
use crate::tensor::Tensor;

pub const P_FLIP: f64 = 0.5;
pub const P_ROTATE: f64 = 0.5;
pub const P_DROPOUT: f64 = 0.3;
pub const MAX_DROPOUT_RECTS: usize = 2;
/// Largest rectangle as a fraction of the image area.
pub const MAX_DROPOUT_AREA: f64 = 1.0 / 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentConfig {
    /// Rotate by any angle (bilinear image, nearest mask) instead of by
    /// multiples of 90 degrees.
    pub arbitrary_rotation: bool,
}

/// Applies `f(channel, y, x) -> (source y, source x)` to every plane.
fn remap(t: &Tensor<f32>, oh: usize, ow: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = f(y, x);
                out.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(out, &[c, oh, ow]).expect("remap preserves element count")
}

fn map_sample(s: &Sample, oh: usize, ow: usize, f: impl Fn(usize, usize) -> (usize, usize) + Copy) -> Sample {
    Sample {
        id: s.id.clone(),
        image: remap(&s.image, oh, ow, f),
        mask: remap(&s.mask, oh, ow, f),
    }
}

pub fn flip_h(s: &Sample) -> Sample {
    let (h, w) = s.size();
    map_sample(s, h, w, |y, x| (y, w - 1 - x))
}

pub fn flip_v(s: &Sample) -> Sample {
    let (h, w) = s.size();
    map_sample(s, h, w, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by `k * 90` degrees.
pub fn rot90(s: &Sample, k: usize) -> Sample {
    let (h, w) = s.size();
    match k % 4 {
        0 => s.clone(),
        1 => map_sample(s, w, h, |y, x| (x, w - 1 - y)),
        2 => map_sample(s, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => map_sample(s, w, h, |y, x| (h - 1 - x, y)),
    }
}

/// Rotation about the image centre by `angle` radians; pixels rotated in
/// from outside are zero.
pub fn rotate(s: &Sample, angle: f64) -> Sample {
    let (h, w) = s.size();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
    };
    let sample_plane = |t: &Tensor<f32>, nearest: bool| {
        let c = t.shape()[0];
        let d = t.data();
        let at = |ch: usize, y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                d[(ch * h + y as usize) * w + x as usize]
            }
        };
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = source(y, x);
                    let v = if nearest {
                        at(ch, sy.round() as isize, sx.round() as isize)
                    } else {
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                            + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1))
                    };
                    out.push(v);
                }
            }
        }
        Tensor::new(out, &[c, h, w]).expect("rotation preserves shape")
    };
    Sample {
        id: s.id.clone(),
        image: sample_plane(&s.image, false),
        mask: sample_plane(&s.mask, true),
    }
}

/// Zeroes one or two random rectangles in the image.
pub fn coarse_dropout<R: Rng>(s: &Sample, rng: &mut R) -> Sample {
    let (h, w) = s.size();
    let mut img = s.image.to_vec();
    let rects = rng.gen_range(1..=MAX_DROPOUT_RECTS);
    let max_area = ((h * w) as f64 * MAX_DROPOUT_AREA).floor() as usize;
    for _ in 0..rects {
        let rh = rng.gen_range(1..=h.min(max_area).max(1));
        let rw = rng.gen_range(1..=(max_area / rh).clamp(1, w));
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        for c in 0..3 {
            for y in y0..y0 + rh {
                img[(c * h + y) * w + x0..(c * h + y) * w + x0 + rw].fill(0.0);
            }
        }
    }
    Sample {
        id: s.id.clone(),
        image: Tensor::new(img, &[3, h, w]).expect("same shape"),
        mask: s.mask.clone(),
    }
}

pub fn augment<R: Rng>(s: &Sample, rng: &mut R, cfg: AugmentConfig) -> Sample {
    let mut out = s.clone();
    if rng.gen_bool(P_FLIP) {
        out = flip_h(&out);
    }
    if rng.gen_bool(P_FLIP) {
        out = flip_v(&out);
    }
    if rng.gen_bool(P_ROTATE) {
        if cfg.arbitrary_rotation {
            let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            out = rotate(&out, angle);
        } else {
            let (h, w) = out.size();
            let k = if h == w { rng.gen_range(1..=3) } else { 2 };
            out = rot90(&out, k);
        }
    }
    if rng.gen_bool(P_DROPOUT) {
        out = coarse_dropout(&out, rng);
    }
    out
}
