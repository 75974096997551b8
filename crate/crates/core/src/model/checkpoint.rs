//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic       8 bytes  "SYNCKPT\0"
//! version     u32      = 1
//! header_len  u64
//! header      header_len bytes of UTF-8 JSON (see `Header`)
//! payload     f32 values of every tensor listed in header.parameters,
//!             then header.optimizer, each in row-major order
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{DenseModel, LanguageModel, ModelConfig, SynergyModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Synergy,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_array(name: impl Into<String>, a: &Array2<f32>) -> Self {
        Self {
            name: name.into(),
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }
}

/// Model weights, optimizer moments and training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub step: u64,
    /// Calibrated cut-off for causal threshold routing.
    pub router_threshold: f64,
    /// Opaque generator state (hex).
    pub rng_state: String,
    /// BPE merges when the model runs over a BPE vocabulary.
    #[serde(default)]
    pub bpe_merges: Option<Vec<(u32, u32)>>,
    pub parameters: Vec<NamedTensor>,
    pub optimizer: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<M: LanguageModel<f32>>(model: &M) -> Self {
        Self {
            kind: model.kind(),
            config: model.config().clone(),
            step: 0,
            router_threshold: 0.0,
            rng_state: String::new(),
            bpe_merges: None,
            parameters: model
                .tensors()
                .into_iter()
                .map(|(n, t)| NamedTensor::from_array(n, t))
                .collect(),
            optimizer: Vec::new(),
        }
    }

    /// Copies stored parameters into `model`, checking names and shapes.
    pub fn load_into<M: LanguageModel<f32>>(&self, model: &mut M) -> Result<()> {
        let targets = model.tensors_mut();
        if targets.len() != self.parameters.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.parameters.len(),
                targets.len()
            )));
        }
        for ((name, t), stored) in targets.into_iter().zip(&self.parameters) {
            if name != stored.name || [t.nrows(), t.ncols()] != stored.shape {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match stored {} {:?}",
                    t.dim(),
                    stored.name,
                    stored.shape
                )));
            }
            for (dst, &src) in t.iter_mut().zip(&stored.data) {
                *dst = src;
            }
        }
        Ok(())
    }

    pub fn synergy_model(&self) -> Result<SynergyModel<f32>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = SynergyModel::new(self.config.clone(), &mut rng)?;
        self.load_into(&mut m)?;
        Ok(m)
    }

    pub fn dense_model(&self) -> Result<DenseModel<f32>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = DenseModel::new(self.config.clone(), &mut rng)?;
        self.load_into(&mut m)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(self)?;
        let mut out = Vec::with_capacity(
            20 + header.len()
                + 4 * self
                    .parameters
                    .iter()
                    .chain(&self.optimizer)
                    .map(|t| t.data.len())
                    .sum::<usize>(),
        );
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.parameters.iter().chain(&self.optimizer) {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if buf.len() < 20 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let header = buf.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let mut ck: Checkpoint = serde_json::from_slice(header)?;
        let mut pos = 20 + hlen;
        for t in ck.parameters.iter_mut().chain(ck.optimizer.iter_mut()) {
            let n = t.shape[0] * t.shape[1];
            let bytes = buf.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated payload"))?;
            t.data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
