//! Binary checkpoints: magic, version, a JSON header, then raw little-endian
//! f64 tensor payloads in header order.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::RnnLm;
use crate::numerics::{ParamStore, Tensor};
use crate::pipeline::{Adam, AdamConfig, ModelArch, StagePlan, TrainConfig};
use crate::tokenizer::{sorted_letters, BpeModel, CharVocab};

pub const CKPT_MAGIC: &[u8; 8] = b"C2BCKPT\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Asr { arch: ModelArch },
    Lm { lm: RnnLm },
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(pos);
        Ok(r)
    }
}

/// Everything needed to continue a stage exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub plan: StagePlan,
    pub step: u64,
    pub next_event: usize,
    pub rng: ChaCha8Rng,
    pub adam: Adam,
    pub skipped_steps: u64,
    pub skipped_utts: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub vocab: Option<CharVocab>,
    pub bpe: Option<BpeModel>,
    pub store: ParamStore,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    lr: f64,
    t: u64,
    best_dev: Option<f64>,
    frozen: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TrainingMeta {
    config: TrainConfig,
    plan: StagePlan,
    step: u64,
    next_event: usize,
    rng: RngState,
    adam: AdamMeta,
    skipped_steps: u64,
    skipped_utts: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelKind,
    vocab: Option<String>,
    bpe: Option<String>,
    training: Option<TrainingMeta>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Verifies that the tensors match the model description exactly.
    pub fn check(&self) -> Result<()> {
        match &self.model {
            ModelKind::Asr { arch } => {
                arch.validate()?;
                arch.check_store(&self.store)
            }
            ModelKind::Lm { lm } => {
                let mut want = ParamStore::new();
                lm.init(&mut want, &mut ChaCha8Rng::seed_from_u64(0))?;
                for p in want.iter() {
                    let have = self
                        .store
                        .get(&p.name)
                        .map_err(|_| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
                    if have.value.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!("tensor {} has the wrong shape", p.name)));
                    }
                }
                if want.len() != self.store.len() {
                    return Err(Error::Checkpoint("checkpoint has tensors the LM does not use".into()));
                }
                Ok(())
            }
        }
    }

    pub fn arch(&self) -> Result<&ModelArch> {
        match &self.model {
            ModelKind::Asr { arch } => Ok(arch),
            ModelKind::Lm { .. } => Err(Error::Checkpoint("expected an ASR checkpoint, found an LM".into())),
        }
    }

    pub fn lm(&self) -> Result<&RnnLm> {
        match &self.model {
            ModelKind::Lm { lm } => Ok(lm),
            ModelKind::Asr { .. } => Err(Error::Checkpoint("expected an LM checkpoint, found an ASR model".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Tensor> = Vec::new();
        for p in self.store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                group: Group::Param,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            });
            blobs.push(&p.value);
        }
        let training = self.training.as_ref().map(|t| {
            for (first, map) in [(true, &t.adam.m), (false, &t.adam.v)] {
                for (name, v) in map {
                    tensors.push(TensorEntry {
                        name: name.clone(),
                        group: if first { Group::AdamM } else { Group::AdamV },
                        shape: v.shape().to_vec(),
                        trainable: false,
                    });
                    blobs.push(v);
                }
            }
            TrainingMeta {
                config: t.config.clone(),
                plan: t.plan.clone(),
                step: t.step,
                next_event: t.next_event,
                rng: RngState::capture(&t.rng),
                adam: AdamMeta {
                    config: t.adam.config.clone(),
                    lr: t.adam.lr,
                    t: t.adam.t,
                    best_dev: t.adam.best_dev,
                    frozen: t.adam.frozen().to_vec(),
                },
                skipped_steps: t.skipped_steps,
                skipped_utts: t.skipped_utts,
            }
        });
        let meta = Meta {
            model: self.model.clone(),
            vocab: self.vocab.as_ref().map(CharVocab::to_text),
            bpe: self.bpe.as_ref().map(BpeModel::to_text),
            training,
            tensors,
        };
        let header = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload: usize = blobs.iter().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in blobs {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let meta: Meta = serde_json::from_slice(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut store = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {} (payload truncated)", e.name)))?;
            pos += n * 8;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            match e.group {
                Group::Param => store.insert(e.name.clone(), t, e.trainable)?,
                Group::AdamM => {
                    m.insert(e.name.clone(), t);
                }
                Group::AdamV => {
                    v.insert(e.name.clone(), t);
                }
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let vocab = meta.vocab.as_deref().map(CharVocab::from_text).transpose()?;
        let bpe = match (&meta.bpe, &vocab) {
            (Some(text), Some(voc)) => Some(BpeModel::from_text(text, sorted_letters(voc))?),
            (Some(_), None) => return Err(bad("BPE model stored without a character vocabulary")),
            _ => None,
        };
        let training = meta
            .training
            .map(|t| -> Result<TrainingState> {
                for name in m.keys().chain(v.keys()) {
                    let p = store
                        .get(name)
                        .map_err(|_| Error::Checkpoint(format!("optimizer moment for unknown tensor {name}")))?;
                    if p.value.shape() != m.get(name).or(v.get(name)).expect("present").shape() {
                        return Err(Error::Checkpoint(format!("moment shape mismatch for {name}")));
                    }
                }
                Ok(TrainingState {
                    config: t.config,
                    plan: t.plan,
                    step: t.step,
                    next_event: t.next_event,
                    rng: t.rng.restore()?,
                    adam: Adam::restore(t.adam.config, t.adam.lr, t.adam.t, t.adam.best_dev, m, v, t.adam.frozen),
                    skipped_steps: t.skipped_steps,
                    skipped_utts: t.skipped_utts,
                })
            })
            .transpose()?;
        let ck = Checkpoint {
            model: meta.model,
            vocab,
            bpe,
            store,
            training,
        };
        ck.check()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::format(path, other.to_string()),
        })
    }
}
