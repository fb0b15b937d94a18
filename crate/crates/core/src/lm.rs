//! Recurrent language model over BPE tokens, used for shallow fusion.
//!
//! Ids `0..V` are BPE tokens, `V` is end-of-sentence and `V+1` the
//! begin-of-sentence input symbol; outputs cover `0..=V`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{init_uniform, LstmState, ProjectionHead, SeqVar, UlstmLayer};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::pipeline::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnLm {
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

/// Recurrent state: one `(1, H)` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub layers: Vec<LstmState>,
}

impl RnnLm {
    pub fn new(vocab: usize, emb_dim: usize, hidden: usize, layers: usize) -> Result<Self> {
        if vocab == 0 || !(1..=2).contains(&layers) {
            return Err(Error::Config("lm needs a nonempty vocabulary and 1 or 2 layers".into()));
        }
        Ok(RnnLm {
            vocab,
            emb_dim,
            hidden,
            layers,
        })
    }

    pub fn eos(&self) -> usize {
        self.vocab
    }

    pub fn bos(&self) -> usize {
        self.vocab + 1
    }

    fn lstm(&self, i: usize) -> UlstmLayer {
        let input = if i == 0 { self.emb_dim } else { self.hidden };
        UlstmLayer::new(format!("lm.l{}", i + 1), input, self.hidden)
    }

    fn head(&self) -> ProjectionHead {
        ProjectionHead::new("lm.out", self.hidden, self.vocab + 1)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        store.insert("lm.embed", init_uniform(rng, &[self.vocab + 2, self.emb_dim]), true)?;
        for i in 0..self.layers {
            self.lstm(i).init(store, rng)?;
        }
        self.head().init(store, rng)
    }

    pub fn start(&self) -> LmState {
        LmState {
            layers: vec![LstmState::zeros(1, self.hidden); self.layers],
        }
    }

    /// Feeds `token` and returns the next-token log distribution with the new state.
    pub fn step(&self, store: &ParamStore, state: &LmState, token: usize) -> Result<(Vec<f64>, LmState)> {
        if token > self.bos() {
            return Err(Error::contract(format!("lm token {token} outside vocabulary of {}", self.vocab)));
        }
        let table = store.value("lm.embed")?;
        let mut x = Tensor::matrix(1, self.emb_dim, table.row(token).to_vec())?;
        let mut next = Vec::with_capacity(self.layers);
        for (i, st) in state.layers.iter().enumerate() {
            let s = self.lstm(i).step(store, &x, st)?;
            x = s.h.clone();
            next.push(s);
        }
        let logp = self.head().apply(store, &x)?.into_data();
        Ok((logp, LmState { layers: next }))
    }

    /// Teacher-forced mean next-token negative log likelihood (eos included) over `seqs`,
    /// recorded in `g`. Returns the loss node and the number of scored tokens.
    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, seqs: &[&[usize]]) -> Result<(crate::numerics::Var, usize)> {
        let bn = seqs.len();
        if bn == 0 {
            return Err(Error::contract("empty lm batch"));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len() + 1).collect();
        let time = *lengths.iter().max().unwrap_or(&1);
        let mut ids = vec![self.eos(); time * bn];
        let mut picks = Vec::new();
        let v1 = self.vocab + 1;
        for (b, s) in seqs.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab) {
                return Err(Error::contract(format!("lm token {bad} outside vocabulary of {}", self.vocab)));
            }
            for t in 0..=s.len() {
                ids[t * bn + b] = if t == 0 { self.bos() } else { s[t - 1] };
                let target = if t < s.len() { s[t] } else { self.eos() };
                picks.push((t * bn + b) * v1 + target);
            }
        }
        let table = g.param(store, "lm.embed")?;
        let emb = g.gather(table, &ids)?;
        let mut x = SeqVar {
            var: emb,
            time,
            batch: bn,
            lengths,
            subsampling: 1,
        };
        for i in 0..self.layers {
            x = self.lstm(i).forward_seq(g, store, &x, None)?.0;
        }
        let logp = self.head().forward(g, store, x.var)?;
        let n = picks.len();
        Ok((g.pick_sum(logp, picks, -1.0 / n as f64)?, n))
    }

    /// `exp` of the mean per-token negative log likelihood, eos terms included.
    pub fn perplexity(&self, store: &ParamStore, corpus: &[Vec<usize>]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::contract("perplexity of an empty corpus"));
        }
        let (mut nll, mut count) = (0.0, 0usize);
        for seq in corpus {
            let mut st = self.start();
            let mut prev = self.bos();
            for &tok in seq.iter().chain(std::iter::once(&self.eos())) {
                let (logp, next) = self.step(store, &st, prev)?;
                if tok > self.eos() {
                    return Err(Error::contract(format!("lm token {tok} outside vocabulary")));
                }
                nll -= logp[tok];
                count += 1;
                st = next;
                prev = tok;
            }
        }
        Ok((nll / count as f64).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            emb_dim: 32,
            hidden: 64,
            layers: 1,
            steps: 400,
            batch_size: 16,
            seed: 1,
            optimizer: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// A trained LM with its weights and per-step training losses.
#[derive(Clone, Debug)]
pub struct TrainedLm {
    pub lm: RnnLm,
    pub store: ParamStore,
    pub losses: Vec<f64>,
}

/// Trains an LM on token sequences over a vocabulary of `vocab` BPE tokens.
pub fn lm_train(corpus: &[Vec<usize>], vocab: usize, cfg: &LmConfig) -> Result<TrainedLm> {
    if corpus.is_empty() {
        return Err(Error::contract("lm_train needs a nonempty corpus"));
    }
    let lm = RnnLm::new(vocab, cfg.emb_dim, cfg.hidden, cfg.layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    lm.init(&mut store, &mut rng)?;
    let mut adam = Adam::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size.max(1).min(corpus.len());
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].as_slice());
            cursor += 1;
        }
        let mut g = Graph::new();
        let (loss, _) = lm.batch_loss(&mut g, &store, &batch)?;
        let l = g.value(loss).item();
        let grads = g.backward(loss)?;
        store.zero_grads();
        store.accumulate(grads.params())?;
        adam.step(&mut store)?;
        losses.push(l);
    }
    Ok(TrainedLm { lm, store, losses })
}
