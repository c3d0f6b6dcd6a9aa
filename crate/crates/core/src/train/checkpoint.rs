//! Binary checkpoint: magic, little-endian `u64` header length, JSON header,
//! then the raw little-endian `f32` payload of each section in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainConfig;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{ChannelNorm, Mdt, ModelConfig, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CNPCKPT\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub norm: ChannelNorm,
    pub schedule: NoiseSchedule,
    pub params: Vec<ParamSpec>,
    /// Section names in payload order; each holds every parameter in `params` order.
    pub sections: Vec<String>,
    pub adam_step: u64,
    pub class_names: Vec<String>,
    pub train: Option<TrainConfig>,
    pub rng: Option<ChaCha8Rng>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: ModelConfig,
    pub norm: ChannelNorm,
    pub schedule: NoiseSchedule,
    pub weights: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam: Option<AdamState>,
    pub class_names: Vec<String>,
    pub train: Option<TrainConfig>,
    pub rng: Option<ChaCha8Rng>,
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Malformed("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        let mut sections = vec!["weights".to_string(), "ema".to_string()];
        if self.adam.is_some() {
            sections.extend(["adam_m".to_string(), "adam_v".to_string()]);
        }
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            step: self.step,
            model: self.model.clone(),
            norm: self.norm,
            schedule: self.schedule,
            params: self.weights.specs().to_vec(),
            sections,
            adam_step: self.adam.as_ref().map_or(0, |a| a.step),
            class_names: self.class_names.clone(),
            train: self.train.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(16 + header.len() + self.weights.numel() * 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.weights.tensors().iter().chain(self.ema.tensors()) {
            put_f32s(&mut out, t.data());
        }
        if let Some(adam) = &self.adam {
            for buf in adam.m.iter().chain(&adam.v) {
                put_f32s(&mut out, buf);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Malformed("header length".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(header.version));
        }
        header.model.validate()?;
        header.schedule.validate()?;
        let store = |r: &mut Reader| -> Result<ParamStore<f32>> {
            let tensors = header
                .params
                .iter()
                .map(|spec| Ok(Tensor::new(spec.shape.clone(), r.f32s(spec.numel())?)?))
                .collect::<Result<Vec<_>>>()?;
            ParamStore::new(header.params.clone(), tensors)
        };
        let mut weights = None;
        let mut ema = None;
        let mut m = None;
        let mut v = None;
        for name in &header.sections {
            let s = store(&mut r)?;
            let raw = || s.tensors().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
            match name.as_str() {
                "weights" => weights = Some(s),
                "ema" => ema = Some(s),
                "adam_m" => m = Some(raw()),
                "adam_v" => v = Some(raw()),
                other => return Err(Error::Malformed(format!("unknown checkpoint section {other}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed("trailing bytes after checkpoint payload".into()));
        }
        let weights = weights.ok_or_else(|| Error::Malformed("checkpoint has no weights".into()))?;
        let ema = ema.unwrap_or_else(|| weights.clone());
        let adam = match (m, v) {
            (Some(m), Some(v)) => Some(AdamState { step: header.adam_step, m, v }),
            (None, None) => None,
            _ => return Err(Error::Malformed("partial optimizer state".into())),
        };
        // Reject a header whose specs disagree with what the config implies.
        Mdt::from_params(header.model.clone(), header.norm, weights.clone())?;
        Ok(Checkpoint {
            step: header.step,
            model: header.model,
            norm: header.norm,
            schedule: header.schedule,
            weights,
            ema,
            adam,
            class_names: header.class_names,
            train: header.train,
            rng: header.rng,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Inference model on the averaged weights.
    pub fn ema_model(&self) -> Result<Mdt<f32>> {
        Mdt::from_params(self.model.clone(), self.norm, self.ema.clone())
    }

    pub fn raw_model(&self) -> Result<Mdt<f32>> {
        Mdt::from_params(self.model.clone(), self.norm, self.weights.clone())
    }

    /// Checkpoint of a freshly initialized model, EMA equal to the weights.
    pub fn from_model(model: &Mdt<f32>, class_names: Vec<String>) -> Self {
        Checkpoint {
            step: 0,
            model: model.config.clone(),
            norm: model.norm,
            schedule: NoiseSchedule::default(),
            weights: model.params.clone(),
            ema: model.params.clone(),
            adam: None,
            class_names,
            train: None,
            rng: None,
        }
    }
}
