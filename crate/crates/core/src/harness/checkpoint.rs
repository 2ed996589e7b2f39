//! Binary checkpoints.
//!
//! ```text
//! magic     8 bytes   "DIFFCKPT"
//! version   u32 LE
//! meta_len  u64 LE,   then meta_len bytes of JSON (CheckpointMeta)
//! count     u64 LE,   then `count` tensor records:
//!   name_len u32 LE, name (UTF-8)
//!   dtype    u8       1 = f64
//!   ndim     u32 LE,  then ndim × u64 LE dimensions
//!   payload  numel × f64 LE
//! ```
//!
//! Adapter checkpoints record the SHA-256 of the base model they were
//! trained against; loading onto a different base fails.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{attach_adapters, AdaptedModel, LoraConfig};
use crate::model::{ModelConfig, TransformerLm};
use crate::numerics::{Rng, Scalar, Stream, Tensor};

pub const MAGIC: &[u8; 8] = b"DIFFCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Model,
    Adapters,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub step: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    /// Hex SHA-256 of the base model ([`model_digest`]); adapters only.
    #[serde(default)]
    pub base_sha256: Option<String>,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

fn widen<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.as_f64()).collect()).expect("same shape")
}

fn narrow<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| T::lit(x)).collect()).expect("same shape")
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f64>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for x in t.data() {
        out.extend(x.to_le_bytes());
    }
}

/// Hex SHA-256 over the model's tensor records, in parameter order.
pub fn model_digest<T: Scalar>(model: &TransformerLm<T>) -> String {
    let mut bytes = Vec::new();
    for (name, t) in model.params().iter() {
        write_tensor(&mut bytes, name, &widen(t));
    }
    hex::encode(Sha256::digest(&bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &TransformerLm<T>, training: Option<TrainingMeta>) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            meta: CheckpointMeta {
                kind: CheckpointKind::Model,
                model: *model.config(),
                lora: None,
                base_sha256: None,
                training,
            },
            tensors: model.params().iter().map(|(n, t)| (n.to_string(), widen(t))).collect(),
        }
    }

    pub fn from_adapters<T: Scalar>(model: &AdaptedModel<T>, training: Option<TrainingMeta>) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            meta: CheckpointMeta {
                kind: CheckpointKind::Adapters,
                model: *model.base().config(),
                lora: Some(model.lora_config().clone()),
                base_sha256: Some(model_digest(model.base())),
                training,
            },
            tensors: model.trainable().into_iter().map(|(n, t)| (n, widen(t))).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(self.version.to_le_bytes());
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        out.extend((self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            write_tensor(&mut out, name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype tag {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let payload = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { version, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn named<T: Scalar>(&self) -> HashMap<String, Tensor<T>> {
        self.tensors.iter().map(|(n, t)| (n.clone(), narrow(t))).collect()
    }

    pub fn into_model<T: Scalar>(&self) -> Result<TransformerLm<T>> {
        if self.meta.kind != CheckpointKind::Model {
            return Err(Error::Checkpoint("expected a model checkpoint, found adapters".into()));
        }
        TransformerLm::from_named(self.meta.model, &self.named())
    }

    /// Attaches the stored adapters to `base`, which must be the exact model they were trained on.
    pub fn into_adapted<T: Scalar>(&self, base: TransformerLm<T>) -> Result<AdaptedModel<T>> {
        if self.meta.kind != CheckpointKind::Adapters {
            return Err(Error::Checkpoint("expected an adapter checkpoint, found a model".into()));
        }
        let digest = model_digest(&base);
        match &self.meta.base_sha256 {
            Some(want) if *want == digest => {}
            Some(want) => {
                return Err(Error::Checkpoint(format!(
                    "adapters were trained on base {want}, but the given base is {digest}"
                )))
            }
            None => return Err(Error::Checkpoint("adapter checkpoint lacks a base checksum".into())),
        }
        let lora = self
            .meta
            .lora
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("adapter checkpoint lacks a LoRA config".into()))?;
        let mut model = attach_adapters(base, lora, &mut Rng::new(0, Stream::Init))?;
        model.load_trainable(&self.named())?;
        Ok(model)
    }
}
