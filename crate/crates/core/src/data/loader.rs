//! Dataset directories.
//!
//! A split is read from `<root>/<split>/{images,masks}` when that directory
//! exists. Otherwise `<root>/{images,masks}` is used, restricted to the stems
//! listed one per line in `<root>/<split>.txt` if that file exists. Images
//! and masks are paired by file stem; samples are returned in lexicographic
//! stem order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, nearest_resize};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (train|val|test)")),
        }
    }
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::Data(format!(
                    "stem `{stem}` is ambiguous: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Decodes an RGB image to `[3, H, W]` in `[0, 1]`, bilinearly resized to
/// `size` when it differs.
pub fn load_image(path: &Path, size: (usize, usize)) -> Result<Tensor<f32>> {
    let img: RgbImage = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            planes[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    let t = Tensor::new(planes, &[1, 3, h, w])?;
    let t = if (h, w) == size { t } else { bilinear_resize(&t, size)? };
    t.reshape(&[3, size.0, size.1])
}

fn decode_mask(path: &Path, size: (usize, usize)) -> Result<Tensor<f32>> {
    let img: GrayImage = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    let t = Tensor::new(raw, &[1, 1, h, w])?;
    let t = if (h, w) == size { t } else { nearest_resize(&t, size)? };
    let bin = t.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(bin, &[1, size.0, size.1])
}

/// Loads one split, resizing every sample to `size = (H, W)`.
pub fn load_dataset(root: &Path, split: Split, size: (usize, usize)) -> Result<Vec<Sample>> {
    let split_dir = root.join(split.name());
    let (base, allow) = if split_dir.join("images").is_dir() {
        (split_dir, None)
    } else {
        let list = root.join(format!("{}.txt", split.name()));
        let allow = if list.is_file() {
            let text = std::fs::read_to_string(&list)?;
            Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect::<Vec<_>>())
        } else {
            None
        };
        (root.to_path_buf(), allow)
    };
    let images = image_files(&base.join("images"))?;
    let masks = image_files(&base.join("masks"))?;
    let stems: Vec<String> = match allow {
        Some(mut list) => {
            list.sort();
            for s in &list {
                if !images.contains_key(s) {
                    return Err(Error::Data(format!("listed image `{s}` not found in {}", base.display())));
                }
            }
            list
        }
        None => images.keys().cloned().collect(),
    };
    if stems.is_empty() {
        return Err(Error::Data(format!(
            "empty dataset: no images for split `{}` under {}",
            split.name(),
            root.display()
        )));
    }
    stems
        .iter()
        .map(|stem| {
            let mask_path = masks
                .get(stem)
                .ok_or_else(|| Error::Data(format!("image `{stem}` has no mask")))?;
            Ok(Sample {
                id: stem.clone(),
                image: load_image(&images[stem], size)?,
                mask: decode_mask(mask_path, size)?,
            })
        })
        .collect()
}

/// Writes a `h x w` binary mask as an 8-bit grayscale PNG with values 0/255.
pub fn save_mask(mask: &[bool], (h, w): (usize, usize), path: &Path) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::invalid("save_mask", format!("{} values for a {h}x{w} mask", mask.len())));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[y as usize * w + x as usize] { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the channel mean of a `[1, C, H, W]` map as a grayscale PNG,
/// min-max stretched to 0..=255 (a constant map is written as zeros).
pub fn save_feature_map<T: crate::tensor::Real>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let s = map.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid("save_feature_map", format!("expected [1,C,H,W], got {s:?}")));
    }
    let mean = map.mean_axis(1)?.to_f64_vec();
    let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let (h, w) = (s[2], s[3]);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = mean[y as usize * w + x as usize];
        let g = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        image::Luma([g])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes samples as 8-bit PNGs under `<dir>/images` and `<dir>/masks`.
/// Image values are rounded to the nearest 1/255.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    for s in samples {
        let (h, w) = s.size();
        let d = s.image.data();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let m = s.mask.data();
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if m[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
        });
        let path = img_dir.join(format!("{}.png", s.id));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
        let path = mask_dir.join(format!("{}.png", s.id));
        mask.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}
