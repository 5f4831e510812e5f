//! Deterministic polyp-like images.
//!
//! Each sample is a smooth two-tone background with one or more elliptical
//! blobs whose boundary radius is perturbed by a few Fourier harmonics. Blob
//! pixels are brighter than the background beneath them by
//! `contrast * (1 - camouflage)` in every channel; uniform texture noise is
//! added on top. The mask is the union of the blobs. Pixel values are
//! rounded to multiples of 1/255 so a PNG round trip is lossless.
//!
//! Sample `i` draws from its own stream derived from `(seed, i)`, so a
//! dataset's first samples do not depend on its length.

use std::f64::consts::PI;

use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Harmonics `2..=4` perturb the blob boundary.
const HARMONICS: [usize; 3] = [2, 3, 4];
/// Largest amplitude of one harmonic, relative to the radius.
pub const MAX_HARMONIC: f64 = 0.06;
/// Bound on the relative radius perturbation.
pub const MAX_PERTURBATION: f64 = MAX_HARMONIC * HARMONICS.len() as f64;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    /// Square resolution.
    pub resolution: usize,
    pub seed: u64,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Semi-axis range as a fraction of the resolution.
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise: f64,
    pub contrast: f64,
    pub camouflage: f64,
    /// Size of the separately seeded validation set.
    pub val_count: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 8,
            resolution: 64,
            seed: 0,
            min_blobs: 1,
            max_blobs: 3,
            min_radius: 0.1,
            max_radius: 0.22,
            noise: 0.04,
            contrast: 0.45,
            camouflage: 0.2,
            val_count: 4,
        }
    }
}

impl SyntheticSpec {
    /// Parses `key=value` pairs separated by commas, e.g.
    /// `count=8,res=64,seed=1`. Unlisted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        for item in text.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = crate::config::split_assignment(item)?;
            let bad = || Error::Config(format!("bad synthetic value `{v}` for `{k}`"));
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            match k {
                "count" => s.count = num!(),
                "res" => s.resolution = num!(),
                "seed" => s.seed = num!(),
                "min_blobs" => s.min_blobs = num!(),
                "max_blobs" => s.max_blobs = num!(),
                "min_radius" => s.min_radius = num!(),
                "max_radius" => s.max_radius = num!(),
                "noise" => s.noise = num!(),
                "contrast" => s.contrast = num!(),
                "camouflage" => s.camouflage = num!(),
                "val" => s.val_count = num!(),
                _ => return Err(Error::Config(format!("unknown synthetic key `{k}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.resolution == 0 {
            return err("synthetic resolution must be positive".into());
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return err(format!("blob range {}..={} is empty or starts at 0", self.min_blobs, self.max_blobs));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return err(format!("radius range {}..{} is invalid", self.min_radius, self.max_radius));
        }
        if self.max_radius * (1.0 + MAX_PERTURBATION) >= 0.5 {
            return err(format!("max_radius {} does not fit inside the image", self.max_radius));
        }
        if !(0.0..=1.0).contains(&self.camouflage) || !(0.0..=0.5).contains(&self.contrast) {
            return err("camouflage must lie in [0,1] and contrast in [0,0.5]".into());
        }
        if !(0.0..=0.25).contains(&self.noise) {
            return err(format!("noise {} outside [0,0.25]", self.noise));
        }
        Ok(())
    }

    /// Intensity gap between blob and background.
    pub fn effective_contrast(&self) -> f64 {
        self.contrast * (1.0 - self.camouflage)
    }

    /// The validation set's spec: same appearance, own seed and size.
    pub fn validation(&self) -> SyntheticSpec {
        SyntheticSpec {
            count: self.val_count,
            seed: crate::rng::derive_seed(self.seed, "synthetic/val"),
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "count={},res={},seed={},min_blobs={},max_blobs={},min_radius={},max_radius={},noise={},contrast={},camouflage={},val={}",
            self.count,
            self.resolution,
            self.seed,
            self.min_blobs,
            self.max_blobs,
            self.min_radius,
            self.max_radius,
            self.noise,
            self.contrast,
            self.camouflage,
            self.val_count
        )
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let phi = v.atan2(u);
        let r = 1.0
            + HARMONICS
                .iter()
                .zip(&self.harmonics)
                .map(|(&k, &(a, p))| a * (k as f64 * phi + p).cos())
                .sum::<f64>();
        (u * u + v * v).sqrt() <= r
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let n = spec.resolution;
    let nf = n as f64;
    let mut rng = stream(spec.seed, &format!("synthetic/{index}"));

    let base: [f64; 3] = [rng.gen_range(0.3..0.45), rng.gen_range(0.2..0.35), rng.gen_range(0.15..0.3)];
    let grad_dir = rng.gen_range(0.0..2.0 * PI);
    let grad_amp = rng.gen_range(0.0..0.05);

    let blobs: Vec<Blob> = (0..rng.gen_range(spec.min_blobs..=spec.max_blobs))
        .map(|_| {
            let ry = rng.gen_range(spec.min_radius..=spec.max_radius) * nf;
            let rx = rng.gen_range(spec.min_radius..=spec.max_radius) * nf;
            let reach = ry.max(rx) * (1.0 + MAX_PERTURBATION);
            Blob {
                cy: rng.gen_range(reach..=nf - reach),
                cx: rng.gen_range(reach..=nf - reach),
                ry,
                rx,
                angle: rng.gen_range(0.0..PI),
                harmonics: [(); 3].map(|_| (rng.gen_range(0.0..=MAX_HARMONIC), rng.gen_range(0.0..2.0 * PI))),
            }
        })
        .collect();

    let contrast = spec.effective_contrast();
    let mut mask = vec![0f32; n * n];
    let mut image = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = blobs.iter().any(|b| b.contains(py, px));
            mask[y * n + x] = inside as u8 as f32;
            let shade = grad_amp * ((py * grad_dir.sin() + px * grad_dir.cos()) / nf * PI).sin();
            for (c, b) in base.iter().enumerate() {
                let noise = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
                let v = b + shade + if inside { contrast } else { 0.0 } + noise;
                image[(c * n + y) * n + x] = quantize(v);
            }
        }
    }
    Sample::new(format!("synth_{index:05}"), image, mask, n, n)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count).map(|i| one(spec, i)).collect()
}
