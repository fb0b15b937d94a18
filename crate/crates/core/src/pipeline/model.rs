//! Architecture descriptor, encoder forward pass and architecture morphs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::AttentionDecoder;
use crate::error::{Error, Result};
use crate::layers::{
    dropout_var, maxpool_time_seq, BatchNormLayer, BnStats, Mode, ProjectionHead, SeqVar, SequenceBatch, UlstmLayer,
};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// One element of the encoder stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncElem {
    Lstm { name: String },
    /// Max pooling over time. `temporary` pools exist only during pre-training.
    Pool { factor: usize, temporary: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub encoder: Vec<EncElem>,
    /// Number of leading encoder elements feeding the character head;
    /// `None` means the whole encoder.
    pub char_tap: Option<usize>,
    /// Character CTC head over this many labels (plus blank).
    pub char_head: Option<usize>,
    /// BPE CTC head over this many labels (plus blank).
    pub bpe_head: Option<usize>,
    pub decoder: Option<AttentionDecoder>,
    pub dropout: f64,
    pub batch_norm: bool,
    /// Weight of the old value in the running batch-norm averages.
    pub bn_momentum: f64,
}

/// Encoder outputs recorded in a graph.
pub struct Encoded {
    pub char_out: Option<SeqVar>,
    pub out: SeqVar,
    pub bn_stats: Vec<BnStats>,
}

pub const CHAR_HEAD: &str = "head.char";
pub const BPE_HEAD: &str = "head.bpe";

fn bn_name(layer: &str) -> String {
    format!("{layer}.bn")
}

/// Prefix that matches exactly one layer's parameters (and its batch norm).
pub fn layer_prefix(layer: &str) -> String {
    format!("{layer}.")
}

impl ModelArch {
    pub fn lstm_names(&self) -> Vec<&str> {
        self.encoder
            .iter()
            .filter_map(|e| match e {
                EncElem::Lstm { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.lstm_names().len()
    }

    /// Product of pool factors over the first `upto` elements (all when `None`).
    pub fn subsampling(&self, upto: Option<usize>) -> usize {
        let n = upto.unwrap_or(self.encoder.len());
        self.encoder[..n]
            .iter()
            .map(|e| match e {
                EncElem::Pool { factor, .. } => *factor,
                _ => 1,
            })
            .product()
    }

    /// Encoder layer objects with their input widths.
    fn layers(&self) -> Vec<(usize, UlstmLayer)> {
        let mut first = true;
        let mut out = Vec::new();
        for (i, e) in self.encoder.iter().enumerate() {
            if let EncElem::Lstm { name } = e {
                let input = if first { self.input_dim } else { self.hidden };
                first = false;
                out.push((i, UlstmLayer::new(name.clone(), input, self.hidden)));
            }
        }
        out
    }

    pub fn char_head_layer(&self) -> Option<ProjectionHead> {
        self.char_head.map(|v| ProjectionHead::new(CHAR_HEAD, self.hidden, v + 1))
    }

    pub fn bpe_head_layer(&self) -> Option<ProjectionHead> {
        self.bpe_head.map(|v| ProjectionHead::new(BPE_HEAD, self.hidden, v + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.lstm_names();
        if names.is_empty() {
            return Err(Error::Config("encoder needs at least one ULSTM layer".into()));
        }
        if !matches!(self.encoder.first(), Some(EncElem::Lstm { .. })) {
            return Err(Error::Config("encoder must start with a ULSTM layer".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(*n) {
                return Err(Error::Config(format!("duplicate encoder layer name {n}")));
            }
        }
        for e in &self.encoder {
            if let EncElem::Pool { factor, .. } = e {
                if *factor < 2 {
                    return Err(Error::Config(format!("pool factor {factor} < 2")));
                }
            }
        }
        if let Some(t) = self.char_tap {
            if t == 0 || t > self.encoder.len() {
                return Err(Error::Config(format!("char tap {t} outside the encoder")));
            }
        }
        if let Some(d) = &self.decoder {
            if d.enc_dim != self.hidden {
                return Err(Error::Config("decoder attends over a different encoder width".into()));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1)", self.bn_momentum)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Initializes every parameter the architecture needs but `store` lacks.
    /// Returns the names created.
    pub fn init_missing(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Vec<String>> {
        let before: Vec<String> = store.names().map(String::from).collect();
        for (_, l) in self.layers() {
            if !store.contains(&l.w_ih()) {
                l.init(store, rng)?;
            }
            if self.batch_norm {
                let bn = BatchNormLayer::new(bn_name(&l.name), self.hidden);
                if !store.contains(&bn.gamma()) {
                    bn.init(store)?;
                }
            }
        }
        for head in [self.char_head_layer(), self.bpe_head_layer()].into_iter().flatten() {
            if !store.contains(&head.weight()) {
                head.init(store, rng)?;
            }
        }
        if let Some(d) = &self.decoder {
            if !store.contains("dec.embed") {
                d.init(store, rng)?;
            }
        }
        Ok(store.names().filter(|n| !before.iter().any(|b| b == n)).map(String::from).collect())
    }

    /// Names and shapes of every parameter of this architecture.
    pub fn expected_params(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let mut s = ParamStore::new();
        self.init_missing(&mut s, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(s.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect())
    }

    /// Removes parameters the architecture no longer uses; returns their names.
    pub fn prune(&self, store: &mut ParamStore) -> Result<Vec<String>> {
        let keep = self.expected_params()?;
        let extra: Vec<String> = store.names().filter(|n| !keep.contains_key(*n)).map(String::from).collect();
        for n in &extra {
            store.remove(n);
        }
        Ok(extra)
    }

    /// Every architecture parameter present exactly once with the right shape, nothing else.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let want = self.expected_params()?;
        for (name, shape) in &want {
            let p = store
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, architecture expects {shape:?}",
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !want.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("tensor {extra} not used by the architecture")));
        }
        Ok(())
    }

    /// Runs the encoder on `batch`. Layers for which `frozen` holds run in
    /// inference mode (running batch-norm statistics, no dropout) and report no statistics.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SequenceBatch,
        mode: Mode,
        frozen: &dyn Fn(&str) -> bool,
        rng: &mut impl Rng,
    ) -> Result<Encoded> {
        if batch.dim() != self.input_dim {
            return Err(Error::shape(format!(
                "features have dim {}, model expects {}",
                batch.dim(),
                self.input_dim
            )));
        }
        let layers: BTreeMap<usize, UlstmLayer> = self.layers().into_iter().collect();
        let mut x = SeqVar::from_batch(g, batch);
        let mut char_out = None;
        let mut bn_stats = Vec::new();
        for (i, e) in self.encoder.iter().enumerate() {
            match e {
                EncElem::Lstm { name } => {
                    let lmode = if frozen(&layer_prefix(name)) { Mode::Infer } else { mode };
                    x = layers[&i].forward_seq(g, store, &x, None)?.0;
                    if self.batch_norm {
                        let valid: usize = x.lengths.iter().sum();
                        let bmode = if valid < 2 { Mode::Infer } else { lmode };
                        let bn = BatchNormLayer::new(bn_name(name), self.hidden);
                        let (y, stats) = bn.forward_seq(g, store, &x, bmode)?;
                        x = y;
                        bn_stats.extend(stats);
                    }
                    let y = dropout_var(g, x.var, self.dropout, lmode, rng)?;
                    x = x.with_var(y);
                }
                EncElem::Pool { factor, .. } => {
                    x = maxpool_time_seq(g, &x, *factor)?;
                }
            }
            if self.char_tap == Some(i + 1) {
                char_out = Some(x.clone());
            }
        }
        if self.char_tap.is_none() && self.char_head.is_some() {
            char_out = Some(x.clone());
        }
        Ok(Encoded { char_out, out: x, bn_stats })
    }

    /// Per-frame log probabilities of a CTC head over a time-major sequence.
    pub fn head_logprobs(&self, g: &mut Graph, store: &ParamStore, head: &ProjectionHead, x: &SeqVar) -> Result<Var> {
        head.forward(g, store, x.var)
    }

    /// Applies a structural morph and initializes any new parameters, checking
    /// that every pre-existing parameter keeps its exact value.
    pub fn apply(&mut self, action: &Action, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Vec<String>> {
        let before: BTreeMap<String, Tensor> = store.iter().map(|p| (p.name.clone(), (*p.value).clone())).collect();
        match action {
            Action::AddLayer { position, name } => {
                let first = self
                    .encoder
                    .iter()
                    .position(|e| matches!(e, EncElem::Lstm { .. }))
                    .unwrap_or(0);
                if *position <= first || *position > self.encoder.len() {
                    return Err(Error::Config(format!("cannot add a layer at position {position}")));
                }
                self.encoder.insert(*position, EncElem::Lstm { name: name.clone() });
                if let Some(t) = self.char_tap.as_mut() {
                    if *position < *t {
                        *t += 1;
                    }
                }
            }
            Action::RemovePool { position } => {
                self.pool_at(*position)?;
                self.encoder.remove(*position);
                if let Some(t) = self.char_tap.as_mut() {
                    if *position < *t {
                        *t -= 1;
                    }
                }
            }
            Action::SetPoolFactor { position, factor } => {
                if *factor < 2 {
                    return Err(Error::Config(format!("pool factor {factor} < 2")));
                }
                if let EncElem::Pool { factor: f, .. } = self.pool_at(*position)? {
                    *f = *factor;
                }
            }
            Action::Unfreeze { .. } => {}
        }
        self.validate()?;
        let created = self.init_missing(store, rng)?;
        for (name, value) in &before {
            if store.value(name)? != value {
                return Err(Error::contract(format!("architecture change altered preserved parameter {name}")));
            }
        }
        Ok(created)
    }

    fn pool_at(&mut self, position: usize) -> Result<&mut EncElem> {
        match self.encoder.get_mut(position) {
            Some(e @ EncElem::Pool { .. }) => Ok(e),
            _ => Err(Error::Config(format!("no pool at encoder position {position}"))),
        }
    }

    /// Short human-readable layout, e.g. `L1 P2 L2 P2* L3` (`*` marks temporary pools).
    pub fn describe(&self) -> String {
        self.encoder
            .iter()
            .map(|e| match e {
                EncElem::Lstm { name } => name.rsplit('.').next().unwrap_or(name).to_string(),
                EncElem::Pool { factor, temporary } => format!("P{factor}{}", if *temporary { "*" } else { "" }),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A scheduled change to the model or the optimizer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    AddLayer { position: usize, name: String },
    RemovePool { position: usize },
    SetPoolFactor { position: usize, factor: usize },
    Unfreeze { prefix: String },
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::AddLayer { position, name } => write!(f, "add_layer {name} at {position}"),
            Action::RemovePool { position } => write!(f, "remove_pool at {position}"),
            Action::SetPoolFactor { position, factor } => write!(f, "set_pool_factor {factor} at {position}"),
            Action::Unfreeze { prefix } => write!(f, "unfreeze {prefix}"),
        }
    }
}
