//! Inference with trained checkpoints: greedy CTC for encoder-only models,
//! beam search with hard attention for encoder-decoder models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::ctc_greedy_decode;
use crate::decoder::{Fusion, Hypothesis};
use crate::error::{Error, Result};
use crate::layers::{Mode, SequenceBatch};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::model::ModelArch;
use crate::tokenizer::{BpeModel, CharVocab};

/// Which output of a model to decode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    CharCtc,
    BpeCtc,
    Attention,
}

/// Search strategy for attention decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Search {
    Greedy,
    Beam(usize),
}

/// Read-only view of a trained ASR model.
#[derive(Clone, Copy)]
pub struct Recognizer<'a> {
    pub arch: &'a ModelArch,
    pub store: &'a ParamStore,
    pub vocab: &'a CharVocab,
    pub bpe: Option<&'a BpeModel>,
}

/// Encoder outputs for one utterance, `(T', H)` each.
pub struct Encodings {
    pub char_out: Option<Tensor>,
    pub out: Tensor,
}

impl<'a> Recognizer<'a> {
    pub fn new(ck: &'a Checkpoint) -> Result<Self> {
        let vocab = ck
            .vocab
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no character vocabulary".into()))?;
        Ok(Recognizer {
            arch: ck.arch()?,
            store: &ck.store,
            vocab,
            bpe: ck.bpe.as_ref(),
        })
    }

    /// The richest output the model has: attention, then BPE CTC, then character CTC.
    pub fn default_output(&self) -> Output {
        if self.arch.decoder.is_some() {
            Output::Attention
        } else if self.arch.bpe_head.is_some() {
            Output::BpeCtc
        } else {
            Output::CharCtc
        }
    }

    pub fn encode(&self, features: &Tensor) -> Result<Encodings> {
        let batch = SequenceBatch::from_sequences(&[features])?;
        let mut g = Graph::new();
        // inference touches no randomness; the rng only satisfies the signature
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.arch.encode(&mut g, self.store, &batch, Mode::Infer, &|_| false, &mut rng)?;
        Ok(Encodings {
            char_out: enc.char_out.map(|c| g.value(c.var).clone()),
            out: g.value(enc.out.var).clone(),
        })
    }

    fn bpe_model(&self) -> Result<&BpeModel> {
        self.bpe.ok_or_else(|| Error::Checkpoint("checkpoint has no BPE model".into()))
    }

    pub fn char_ctc(&self, features: &Tensor) -> Result<String> {
        let head = self
            .arch
            .char_head_layer()
            .ok_or_else(|| Error::Config("model has no character CTC head".into()))?;
        let enc = self.encode(features)?;
        let x = enc.char_out.expect("char head implies char output");
        let lp = head.apply(self.store, &x)?;
        Ok(self.vocab.decode(&ctc_greedy_decode(&lp)))
    }

    pub fn bpe_ctc(&self, features: &Tensor) -> Result<String> {
        let head = self
            .arch
            .bpe_head_layer()
            .ok_or_else(|| Error::Config("model has no BPE CTC head".into()))?;
        let enc = self.encode(features)?;
        let lp = head.apply(self.store, &enc.out)?;
        self.bpe_model()?.decode(&ctc_greedy_decode(&lp))
    }

    /// Greedy or beam search, optionally fused with an LM.
    pub fn attention(&self, features: &Tensor, search: Search, max_len: usize, fusion: Option<&Fusion>) -> Result<(String, Hypothesis)> {
        let dec = self
            .arch
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model has no attention decoder".into()))?;
        let enc = self.encode(features)?;
        let mem = dec.memory(self.store, &enc.out)?;
        let hyp = match search {
            Search::Greedy => dec.greedy_decode(self.store, &mem, max_len, fusion)?,
            Search::Beam(b) => dec.beam_search(self.store, &mem, b, max_len, fusion)?,
        };
        let text = self.bpe_model()?.decode(hyp.labels(dec.eos()))?;
        Ok((text, hyp))
    }

    pub fn transcribe(&self, features: &Tensor, output: Output, search: Search, max_len: usize, fusion: Option<&Fusion>) -> Result<String> {
        match output {
            Output::CharCtc => self.char_ctc(features),
            Output::BpeCtc => self.bpe_ctc(features),
            Output::Attention => Ok(self.attention(features, search, max_len, fusion)?.0),
        }
    }
}
