//! Per-stage architectures and their pre-training schedules.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::decoder::AttentionDecoder;
use crate::error::{Error, Result};
use crate::pipeline::config::{LossMode, Method, TrainConfig};
use crate::pipeline::model::{layer_prefix, Action, EncElem, ModelArch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageKind {
    Stage1,
    Stage2 { method: Method },
    /// `c2b` marks a run initialized from a stage-2 encoder.
    Stage3 { loss: LossMode, c2b: bool },
}

impl StageKind {
    pub fn number(self) -> u8 {
        match self {
            StageKind::Stage1 => 1,
            StageKind::Stage2 { .. } => 2,
            StageKind::Stage3 { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub char_ctc: f64,
    pub bpe_ctc: f64,
    pub ce: f64,
}

/// Actions applied right before training step `step` (0-based) runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub step: u64,
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub kind: StageKind,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub events: Vec<ScheduleEvent>,
    pub weights: LossWeights,
    /// CTC terms are dropped from this step on.
    pub ctc_until: Option<u64>,
    /// Prefixes frozen when the stage starts.
    pub frozen: Vec<String>,
    pub dev_every: u64,
    pub warmup: u64,
    pub init: Option<PathBuf>,
}

impl StagePlan {
    pub fn weights_at(&self, step: u64) -> LossWeights {
        match self.ctc_until {
            Some(end) if step >= end => LossWeights {
                char_ctc: 0.0,
                bpe_ctc: 0.0,
                ce: 1.0,
            },
            _ => self.weights,
        }
    }

    /// Checks step ordering and stage legality, and replays every event on a
    /// copy of `arch` so that positions are known to be valid.
    pub fn validate(&self, arch: &ModelArch) -> Result<()> {
        for w in self.events.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Config(format!(
                    "schedule steps must increase strictly ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        let mut a = arch.clone();
        let mut frozen = self.frozen.clone();
        for ev in &self.events {
            if ev.actions.is_empty() {
                return Err(Error::Config(format!("empty event at step {}", ev.step)));
            }
            for act in &ev.actions {
                match act {
                    Action::AddLayer { .. } if self.kind != StageKind::Stage1 => {
                        return Err(Error::Config("add_layer is only valid in stage 1".into()));
                    }
                    Action::Unfreeze { prefix } => {
                        let before = frozen.len();
                        frozen.retain(|p| p != prefix);
                        if frozen.len() == before {
                            return Err(Error::Config(format!("unfreeze of {prefix:?}, which is not frozen")));
                        }
                    }
                    _ => {}
                }
                simulate(&mut a, act)?;
            }
        }
        a.validate()
    }
}

/// Structural effect of an action on a descriptor, without parameters.
pub fn simulate(arch: &mut ModelArch, action: &Action) -> Result<()> {
    let mut store = crate::numerics::ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let keep = arch.decoder.take();
    let r = arch.apply(action, &mut store, &mut rng);
    arch.decoder = keep;
    r.map(|_| ())
}

fn lstm(name: String) -> EncElem {
    EncElem::Lstm { name }
}

fn pool(factor: usize, temporary: bool) -> EncElem {
    EncElem::Pool { factor, temporary }
}

/// Encoder index right after the `k`-th (1-based) ULSTM layer.
fn after_layer(enc: &[EncElem], k: usize) -> Option<usize> {
    enc.iter()
        .enumerate()
        .filter(|(_, e)| matches!(e, EncElem::Lstm { .. }))
        .nth(k - 1)
        .map(|(i, _)| i + 1)
}

fn half(spe: u64) -> u64 {
    spe.div_ceil(2).max(1)
}

fn push_event(events: &mut Vec<ScheduleEvent>, step: u64, action: Action) {
    match events.iter_mut().find(|e| e.step == step) {
        Some(e) => e.actions.push(action),
        None => {
            events.push(ScheduleEvent {
                step,
                actions: vec![action],
            });
            events.sort_by_key(|e| e.step);
        }
    }
}

/// Inserts temporary pools after layers 4 and 5 and schedules their removal
/// at half an epoch and one epoch.
fn high_reduction_pretraining(enc: &mut Vec<EncElem>, spe: u64, events: &mut Vec<ScheduleEvent>) -> Result<()> {
    for k in [4, 5] {
        let at = after_layer(enc, k)
            .ok_or_else(|| Error::Config(format!("pooling pre-training needs at least {k} ULSTM layers")))?;
        enc.insert(at, pool(2, true));
    }
    let first = enc
        .iter()
        .position(|e| matches!(e, EncElem::Pool { temporary: true, .. }))
        .expect("pool inserted");
    push_event(events, half(spe), Action::RemovePool { position: first });
    let second = enc
        .iter()
        .enumerate()
        .skip(first + 1)
        .find(|(_, e)| matches!(e, EncElem::Pool { temporary: true, .. }))
        .map(|(i, _)| i - 1)
        .expect("pool inserted");
    push_event(events, spe.max(half(spe) + 1), Action::RemovePool { position: second });
    Ok(())
}

/// Builds the architecture and plan of the configured stage.
///
/// `char_labels`/`bpe_labels` are the CTC label counts (blank excluded).
/// `init` is the architecture of the checkpoint the stage starts from.
pub fn build_stage(
    cfg: &TrainConfig,
    steps_per_epoch: u64,
    input_dim: usize,
    char_labels: usize,
    bpe_labels: Option<usize>,
    init: Option<&ModelArch>,
) -> Result<(ModelArch, StagePlan)> {
    cfg.validate()?;
    if steps_per_epoch == 0 {
        return Err(Error::Config("an epoch needs at least one batch".into()));
    }
    let spe = steps_per_epoch;
    let m = &cfg.model;
    let sched = &cfg.schedule;
    let total_steps = (cfg.stage.epochs * spe as f64).ceil() as u64;
    let bpe_v = || bpe_labels.ok_or_else(|| Error::Config("this stage needs a BPE model (data.bpe)".into()));
    let mut events = Vec::new();
    let mut frozen = Vec::new();
    let mut weights = LossWeights::default();
    let mut ctc_until = None;
    let name = |i: usize| format!("enc.l{i}");
    let fresh = |encoder: Vec<EncElem>| ModelArch {
        input_dim,
        hidden: m.hidden,
        encoder,
        char_tap: None,
        char_head: None,
        bpe_head: None,
        decoder: None,
        dropout: m.dropout,
        batch_norm: m.batch_norm,
        bn_momentum: m.bn_momentum,
    };
    let from_init = || -> Result<ModelArch> {
        let a = init
            .cloned()
            .ok_or_else(|| Error::Config(format!("stage {} needs an init checkpoint", cfg.stage.stage)))?;
        if a.encoder.iter().any(|e| matches!(e, EncElem::Pool { temporary: true, .. })) {
            return Err(Error::Config("init checkpoint still has pre-training pools".into()));
        }
        if a.input_dim != input_dim {
            return Err(Error::Config(format!(
                "init checkpoint expects {}-dim features, data has {input_dim}",
                a.input_dim
            )));
        }
        Ok(a)
    };

    let kind;
    let arch = match cfg.stage.stage {
        1 => {
            kind = StageKind::Stage1;
            if init.is_some() {
                return Err(Error::Config("stage 1 trains from random initialization".into()));
            }
            let n = m.layers;
            weights.char_ctc = 1.0;
            let mut a = if sched.pretrain {
                if n < 3 {
                    return Err(Error::Config(format!(
                        "layer-growth pre-training needs a target depth of at least 3, got {n}"
                    )));
                }
                fresh(vec![lstm(name(1)), pool(2, false), lstm(name(2)), pool(2, true), lstm(name(3))])
            } else {
                let mut enc = vec![lstm(name(1)), pool(2, false)];
                enc.extend((2..=n).map(|i| lstm(name(i))));
                fresh(enc)
            };
            if sched.pretrain {
                let every = if sched.layer_every > 0 { sched.layer_every } else { spe.div_ceil(3) };
                let mut sim = a.clone();
                let adds = n - 3;
                for k in 0..adds.max(1) {
                    let step = every * (k as u64 + 1);
                    let float = sim
                        .encoder
                        .iter()
                        .position(|e| matches!(e, EncElem::Pool { temporary: true, .. }))
                        .expect("floating pool present");
                    let mut acts = Vec::new();
                    if adds > 0 {
                        acts.push(Action::AddLayer {
                            position: float,
                            name: name(4 + k),
                        });
                    }
                    if k + 1 == adds.max(1) {
                        let at = if adds > 0 { float + 1 } else { float };
                        acts.push(Action::RemovePool { position: at });
                    }
                    for act in acts {
                        simulate(&mut sim, &act)?;
                        push_event(&mut events, step, act);
                    }
                }
                let last = events.last().map(|e| e.step).unwrap_or(0);
                if last >= total_steps {
                    return Err(Error::Config(format!(
                        "layer growth to depth {n} ends at step {last}, past the stage's {total_steps} steps"
                    )));
                }
            }
            a.char_head = Some(char_labels);
            a
        }
        2 => {
            let method = cfg.stage.method.expect("validated");
            kind = StageKind::Stage2 { method };
            let mut a = from_init()?;
            if a.char_head.is_none() || a.bpe_head.is_some() || a.decoder.is_some() || a.char_tap.is_some() {
                return Err(Error::Config("stage 2 must start from a stage-1 character CTC checkpoint".into()));
            }
            let bv = bpe_v()?;
            match method {
                Method::Replace => {
                    for k in [2, 3] {
                        let at = after_layer(&a.encoder, k)
                            .ok_or_else(|| Error::Config(format!("replace needs at least {k} ULSTM layers")))?;
                        a.encoder.insert(at, pool(2, false));
                    }
                    if sched.pretrain {
                        high_reduction_pretraining(&mut a.encoder, spe, &mut events)?;
                    }
                    a.char_head = None;
                    a.bpe_head = Some(bv);
                    weights.bpe_ctc = 1.0;
                }
                Method::Joint | Method::Freeze => {
                    let char_layers: Vec<String> = a.lstm_names().iter().map(|s| s.to_string()).collect();
                    let tap = a.encoder.len();
                    let mut pools = Vec::new();
                    for i in 1..=m.bpe_layers {
                        let high = method == Method::Freeze && sched.pretrain && i <= 2;
                        pools.push(a.encoder.len());
                        a.encoder.push(pool(if high { 4 } else { 2 }, false));
                        a.encoder.push(lstm(format!("enc.bpe{i}")));
                    }
                    a.bpe_head = Some(bv);
                    if method == Method::Joint {
                        a.char_tap = Some(tap);
                        weights.char_ctc = sched.char_weight;
                        weights.bpe_ctc = sched.bpe_weight;
                    } else {
                        a.char_head = None;
                        weights.bpe_ctc = 1.0;
                        if sched.pretrain {
                            let steps = [half(spe), spe.max(half(spe) + 1)];
                            for (&position, &step) in pools.iter().zip(&steps) {
                                push_event(&mut events, step, Action::SetPoolFactor { position, factor: 2 });
                            }
                        }
                        let window = if sched.freeze_steps > 0 { sched.freeze_steps } else { spe };
                        frozen = char_layers.iter().map(|n| layer_prefix(n)).collect();
                        for p in &frozen {
                            push_event(&mut events, window, Action::Unfreeze { prefix: p.clone() });
                        }
                    }
                }
            }
            a
        }
        _ => {
            let loss = cfg.stage.loss.expect("validated");
            let bv = bpe_v()?;
            let uses_ctc = loss != LossMode::Ce;
            let mut a = match init {
                Some(_) => {
                    let mut a = from_init()?;
                    if a.bpe_head.is_none() || a.decoder.is_some() {
                        return Err(Error::Config("stage 3 init must be a stage-2 BPE CTC checkpoint".into()));
                    }
                    a.char_head = None;
                    a.char_tap = None;
                    a
                }
                None => {
                    let mut enc = Vec::new();
                    for i in 1..=m.baseline_layers {
                        enc.push(lstm(name(i)));
                        if i <= 3 {
                            enc.push(pool(2, false));
                        }
                    }
                    if sched.pretrain {
                        high_reduction_pretraining(&mut enc, spe, &mut events)?;
                    }
                    fresh(enc)
                }
            };
            kind = StageKind::Stage3 {
                loss,
                c2b: init.is_some(),
            };
            a.bpe_head = if uses_ctc { Some(bv) } else { None };
            a.decoder = Some(AttentionDecoder {
                vocab: bv,
                emb_dim: m.emb_dim,
                hidden: m.dec_hidden,
                enc_dim: a.hidden,
                att_dim: m.att_dim,
                chunk_width: m.chunk_width,
            });
            match loss {
                LossMode::Ce => weights.ce = 1.0,
                LossMode::CeCtc | LossMode::PtCtcCe => {
                    weights.ce = sched.ce_weight;
                    weights.bpe_ctc = sched.ctc_weight;
                }
            }
            if loss == LossMode::PtCtcCe {
                ctc_until = Some(spe);
            }
            a
        }
    };
    arch.validate()?;
    let plan = StagePlan {
        kind,
        steps_per_epoch: spe,
        total_steps,
        events,
        weights,
        ctc_until,
        frozen,
        dev_every: if sched.dev_every > 0 { sched.dev_every } else { half(spe) },
        warmup: if cfg.optimizer.warmup > 0 { cfg.optimizer.warmup } else { spe },
        init: cfg.stage.init.clone(),
    };
    plan.validate(&arch)?;
    Ok((arch, plan))
}
