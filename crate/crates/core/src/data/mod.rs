//! Samples, the on-disk loader, the synthetic generator and augmentation.

pub mod augment;
pub mod loader;
pub mod synthetic;

pub use augment::{augment, flip_h, flip_v, rot90, AugmentConfig};
pub use loader::{load_dataset, load_image, save_feature_map, save_mask, write_dataset, Split};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One image with its binary mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    /// `[1,H,W]`, values in `{0,1}`.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Vec<f32>, mask: Vec<f32>, h: usize, w: usize) -> Result<Self> {
        Ok(Sample {
            id: id.into(),
            image: Tensor::new(image, &[3, h, w])?,
            mask: Tensor::new(mask, &[1, h, w])?,
        })
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn mask_area(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum()
    }
}

/// Stacks samples into `[B,3,H,W]` images and `[B,1,H,W]` masks.
pub fn stack_batch<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = first.size();
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.size() != (h, w) {
            return Err(Error::Data(format!("sample `{}` is {:?}, batch is {:?}", s.id, s.size(), (h, w))));
        }
        img.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
        msk.extend(s.mask.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let b = samples.len();
    Ok((Tensor::new(img, &[b, 3, h, w])?, Tensor::new(msk, &[b, 1, h, w])?))
}
