//! Binary model checkpoints.
//!
//! Layout: the magic bytes `RCACKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (specs,
//! seed, optional feature map, tensor names and shapes), then every tensor
//! as raw little-endian `f64` in header order. Values are stored bit for
//! bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{Layer, Mlp, MlpSpec, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RCACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    /// Original feature indices kept by top-k selection, in model order.
    pub feature_map: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    seed: u64,
    detach_domain: bool,
    domain_spec: MlpSpec,
    category_spec: MlpSpec,
    classifier_spec: MlpSpec,
    feature_map: Option<Vec<usize>>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: ModelParams) -> Self {
        Checkpoint {
            model,
            feature_map: None,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let m = &self.model;
        let named = m.named_tensors();
        let header = Header {
            format_version: FORMAT_VERSION,
            seed: m.seed,
            detach_domain: m.detach_domain,
            domain_spec: m.domain.spec.clone(),
            category_spec: m.category.spec.clone(),
            classifier_spec: m.classifier.spec.clone(),
            feature_map: self.feature_map.clone(),
            tensors: named
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &named {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("file too short for a checkpoint"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| corrupt("header too large"))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(e.to_string()))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|_| corrupt(format!("truncated data for {}", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
        }
        let mut it = tensors.into_iter();
        let mut rebuild = |spec: MlpSpec| -> Result<Mlp> {
            spec.validate()?;
            let n_layers = spec.hidden_dims.len() + 1;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let weight = it.next().ok_or_else(|| corrupt("missing tensor"))?;
                let bias = it.next().ok_or_else(|| corrupt("missing tensor"))?;
                layers.push(Layer { weight, bias });
            }
            Ok(Mlp { spec, layers })
        };
        let model = ModelParams {
            domain: rebuild(header.domain_spec)?,
            category: rebuild(header.category_spec)?,
            classifier: rebuild(header.classifier_spec)?,
            seed: header.seed,
            detach_domain: header.detach_domain,
        };
        // Rebuilding from specs must reproduce the stored shapes.
        for ((_, t), entry) in model.named_tensors().iter().zip(&header.tensors) {
            if t.shape() != entry.shape.as_slice() {
                return Err(corrupt(format!("tensor {} does not match its spec", entry.name)));
            }
        }
        Ok(Checkpoint {
            model,
            feature_map: header.feature_map,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Checkpoint::read(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        let spec = MlpSpec {
            input_dim: 7,
            hidden_dims: vec![5, 3],
            output_dim: 4,
            dropout_rate: 0.4,
        };
        ModelParams::with_extractor(spec, 2, 99).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = Checkpoint {
            model: model(),
            feature_map: Some(vec![4, 0, 9]),
        };
        let mut buf = Vec::new();
        ckpt.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read(&b"nope"[..]).is_err());
        let mut buf = Vec::new();
        Checkpoint::new(model()).write(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Checkpoint::read(buf.as_slice()), Err(Error::Checkpoint(_))));
        let mut buf2 = Vec::new();
        Checkpoint::new(model()).write(&mut buf2).unwrap();
        buf2[8] = 7;
        assert!(Checkpoint::read(buf2.as_slice()).unwrap_err().to_string().contains("version 7"));
    }
}
