//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "FSEG"
//! version  u32      1
//! config   u32 length + UTF-8 model configuration (key=value lines)
//! count    u32      number of tensors
//! tensor*  u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//!          u8 dtype (0 = f32), numel x f32 payload
//! ```
//!
//! Tensors are the model parameters followed by the normalization running
//! statistics, in model order. Payloads are 32-bit; a 64-bit model is
//! rounded to f32 on save.

use std::path::Path;

use crate::config::{model_from_text, model_to_text};
use crate::error::{CheckpointError, Result};
use crate::module::Module;
use crate::tensor::Real;

use super::focusnet::FocusNet;

pub const MAGIC: [u8; 4] = *b"FSEG";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &FocusNet<T>) -> Self {
        let mut tensors: Vec<NamedTensor> = model
            .parameters()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                data: p.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        tensors.extend(model.buffers().into_iter().map(|b| NamedTensor {
            name: b.name().to_string(),
            shape: b.shape().to_vec(),
            data: b.get().iter().map(|v| v.as_f64() as f32).collect(),
        }));
        Checkpoint {
            config_text: model_to_text(&model.config),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let config_text = r.string("config")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::UnsupportedDtype(dtype).into());
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` has an overflowing shape {shape:?}")))?;
            let data = r
                .take(n, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        Ok(Checkpoint { config_text, tensors })
    }

    /// Copies every tensor into `model`. The file must name exactly the
    /// model's parameters and buffers, with identical shapes.
    pub fn load_into<T: Real>(&self, model: &mut FocusNet<T>) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut expected: Vec<(String, Vec<usize>)> = model
            .parameters()
            .iter()
            .map(|p| (p.name().to_string(), p.shape().to_vec()))
            .collect();
        expected.extend(model.buffers().iter().map(|b| (b.name().to_string(), b.shape().to_vec())));
        let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(t) = self.tensors.iter().find(|t| !known.contains(t.name.as_str())) {
            return Err(CheckpointError::UnknownParameter(t.name.clone()).into());
        }
        for (name, shape) in &expected {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
            if &t.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    file: t.shape.clone(),
                    model: shape.clone(),
                }
                .into());
            }
        }
        let cast = |t: &NamedTensor| t.data.iter().map(|&v| T::from_f64(v as f64)).collect::<Vec<T>>();
        for p in model.parameters_mut() {
            p.set_data(cast(by_name[p.name()]))?;
        }
        for b in model.buffers() {
            b.set(cast(by_name[b.name()]))?;
        }
        Ok(())
    }

    /// Builds a model from the echoed configuration and loads the weights.
    pub fn to_model<T: Real>(&self) -> Result<FocusNet<T>> {
        let cfg = model_from_text(&self.config_text)?;
        let mut model = FocusNet::new(cfg, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")).into())
    }
}

pub fn save_checkpoint<T: Real>(model: &FocusNet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model).to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Reads a checkpoint and rebuilds the model it describes.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FocusNet<T>> {
    read_checkpoint(path)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.backbone.channels = [8, 8, 8, 8];
        c.decoder_width = 8;
        c.fam_dim = 8;
        c
    }

    #[test]
    fn bytes_round_trip() {
        let m = FocusNet::<f32>::new(small(), 4).unwrap();
        let ck = Checkpoint::from_model(&m);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let m2: FocusNet<f32> = back.to_model().unwrap();
        assert_eq!(Checkpoint::from_model(&m2).to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let m = FocusNet::<f32>::new(small(), 4).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(9)))
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));

        let mut ck = Checkpoint::from_model(&m);
        ck.tensors[0].name = "nope.weight".into();
        let mut target = FocusNet::<f32>::new(small(), 0).unwrap();
        assert!(matches!(
            ck.load_into(&mut target),
            Err(Error::Checkpoint(CheckpointError::UnknownParameter(n))) if n == "nope.weight"
        ));

        let mut wide = small();
        wide.decoder_width = 16;
        let mut target = FocusNet::<f32>::new(wide, 0).unwrap();
        let err = Checkpoint::from_model(&m).load_into(&mut target).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::ShapeMismatch { .. })), "{err}");
        assert!(err.to_string().contains("cidm_m."), "{err}");
    }
}
