//! The stage trainer: batching, losses, scheduled morphs, freezing, dev
//! evaluation, logging and exact resume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_loss_var, min_alignment_len};
use crate::datametrics::{make_batches, Utterance};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, BnStats, Mode, SequenceBatch};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::pipeline::checkpoint::{Checkpoint, ModelKind, TrainingState};
use crate::pipeline::model::ModelArch;
use crate::pipeline::plan::{build_stage, LossWeights, StagePlan};
use crate::pipeline::{Action, Adam, AdamConfig, TrainConfig};
use crate::tokenizer::{BpeModel, CharVocab};

/// An utterance with its label sequences.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub features: Tensor,
    pub chars: Vec<usize>,
    pub bpe: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub input_dim: usize,
}

impl Corpus {
    pub fn new(utts: &[Utterance], vocab: &CharVocab, bpe: Option<&BpeModel>) -> Result<Self> {
        let first = utts.first().ok_or_else(|| Error::contract("empty dataset"))?;
        let input_dim = first.features.cols();
        let mut examples = Vec::with_capacity(utts.len());
        for u in utts {
            if u.features.cols() != input_dim {
                return Err(Error::shape(format!(
                    "utterance {} has {}-dim features, expected {input_dim}",
                    u.id,
                    u.features.cols()
                )));
            }
            examples.push(Example {
                id: u.id.clone(),
                text: u.transcript.clone(),
                features: u.features.clone(),
                chars: vocab.encode(&u.transcript),
                bpe: bpe.map(|b| b.encode(&u.transcript)),
            });
        }
        Ok(Corpus { examples, input_dim })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.features.rows()).collect()
    }
}

/// Batches of one epoch; the order depends only on `(seed, epoch)`.
pub fn epoch_batches(corpus: &Corpus, frame_budget: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch);
    make_batches(&corpus.lengths(), frame_budget, &mut rng)
}

/// Weighted loss of one batch recorded in a graph.
pub struct BatchLoss {
    /// `None` when no term had anything to score.
    pub total: Option<Var>,
    /// CTC utterances left out because their encoder output is too short.
    pub infeasible: usize,
    pub bn_stats: Vec<BnStats>,
}

fn add_term(g: &mut Graph, total: Option<Var>, term: Var) -> Result<Option<Var>> {
    Ok(Some(match total {
        Some(t) => g.add(t, term)?,
        None => term,
    }))
}

/// CTC over the utterances whose pooled length admits an alignment; the
/// mean is taken over those.
fn ctc_term(
    g: &mut Graph,
    logp: Var,
    lengths: &[usize],
    targets: &[&[usize]],
    weight: f64,
    infeasible: &mut usize,
) -> Result<Option<Var>> {
    let masked: Vec<Option<&[usize]>> = targets
        .iter()
        .zip(lengths)
        .map(|(t, &len)| (min_alignment_len(t) <= len).then_some(*t))
        .collect();
    let n = masked.iter().filter(|t| t.is_some()).count();
    *infeasible += targets.len() - n;
    if n == 0 {
        return Ok(None);
    }
    ctc_loss_var(g, logp, lengths, &masked, weight / n as f64).map(Some)
}

/// Builds the weighted stage loss for the utterances `idx` of `corpus`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    arch: &ModelArch,
    store: &ParamStore,
    corpus: &Corpus,
    idx: &[usize],
    weights: LossWeights,
    mode: Mode,
    frozen: &dyn Fn(&str) -> bool,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let ex: Vec<&Example> = idx.iter().map(|&i| &corpus.examples[i]).collect();
    let feats: Vec<&Tensor> = ex.iter().map(|e| &e.features).collect();
    let batch = SequenceBatch::from_sequences(&feats)?;
    let enc = arch.encode(g, store, &batch, mode, frozen, rng)?;
    let bpe_targets = || -> Result<Vec<&[usize]>> {
        ex.iter()
            .map(|e| {
                e.bpe
                    .as_deref()
                    .ok_or_else(|| Error::contract(format!("utterance {} has no BPE targets", e.id)))
            })
            .collect()
    };
    let mut total = None;
    let mut infeasible = 0;
    if weights.char_ctc > 0.0 {
        let head = arch
            .char_head_layer()
            .ok_or_else(|| Error::contract("character CTC loss without a character head"))?;
        let x = enc.char_out.as_ref().expect("char head implies char output");
        let logp = head.forward(g, store, x.var)?;
        let targets: Vec<&[usize]> = ex.iter().map(|e| e.chars.as_slice()).collect();
        if let Some(t) = ctc_term(g, logp, &x.lengths, &targets, weights.char_ctc, &mut infeasible)? {
            total = add_term(g, total, t)?;
        }
    }
    if weights.bpe_ctc > 0.0 {
        let head = arch
            .bpe_head_layer()
            .ok_or_else(|| Error::contract("BPE CTC loss without a BPE head"))?;
        let logp = head.forward(g, store, enc.out.var)?;
        let targets = bpe_targets()?;
        if let Some(t) = ctc_term(g, logp, &enc.out.lengths, &targets, weights.bpe_ctc, &mut infeasible)? {
            total = add_term(g, total, t)?;
        }
    }
    if weights.ce > 0.0 {
        let dec = arch
            .decoder
            .as_ref()
            .ok_or_else(|| Error::contract("CE loss without a decoder"))?;
        let targets = bpe_targets()?;
        let t = dec.ce_loss(g, store, &enc.out, &targets, mode, rng, weights.ce / ex.len() as f64)?;
        total = add_term(g, total, t)?;
    }
    Ok(BatchLoss {
        total,
        infeasible,
        bn_stats: enc.bn_stats,
    })
}

/// Owns the model and optimizer for one stage.
pub struct Trainer {
    pub config: TrainConfig,
    pub arch: ModelArch,
    pub plan: StagePlan,
    pub store: ParamStore,
    pub adam: Adam,
    /// Number of steps taken (the next step's 0-based index).
    pub step: u64,
    pub next_event: usize,
    pub rng: ChaCha8Rng,
    pub vocab: CharVocab,
    pub bpe: Option<BpeModel>,
    pub skipped_steps: u64,
    pub skipped_utts: u64,
    /// `step loss lr` lines and `event ...` lines, in order.
    pub log: Vec<String>,
    /// `epoch,split,metric,value` rows (no header).
    pub metrics: Vec<String>,
    batches: Option<(u64, Vec<Vec<usize>>)>,
}

fn model_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 << 32 | stage as u64);
    r
}

impl Trainer {
    /// Sets up a stage from the config, optionally starting from `init`.
    pub fn new(
        config: TrainConfig,
        vocab: CharVocab,
        bpe: Option<BpeModel>,
        init: Option<&Checkpoint>,
        train: &Corpus,
    ) -> Result<Self> {
        let spe = epoch_batches(train, config.data.frame_budget, config.seed, 0)?.len() as u64;
        let init_arch = init.map(|c| c.arch()).transpose()?;
        if let Some(ck) = init {
            if ck.vocab.as_ref() != Some(&vocab) {
                return Err(Error::Config("init checkpoint uses a different character vocabulary".into()));
            }
            if let (Some(a), Some(b)) = (&ck.bpe, &bpe) {
                if a != b {
                    return Err(Error::Config("init checkpoint uses a different BPE model".into()));
                }
            }
        }
        let (arch, plan) = build_stage(
            &config,
            spe,
            train.input_dim,
            vocab.len(),
            bpe.as_ref().map(BpeModel::vocab_size),
            init_arch,
        )?;
        let mut rng = model_rng(config.seed, plan.kind.number());
        let mut store = init.map(|c| c.store.clone()).unwrap_or_default();
        let dropped = arch.prune(&mut store)?;
        arch.init_missing(&mut store, &mut rng)?;
        arch.check_store(&store)?;
        let mut adam = Adam::new(AdamConfig {
            warmup: plan.warmup,
            ..config.optimizer.clone()
        });
        let prefixes: Vec<&str> = plan.frozen.iter().map(String::as_str).collect();
        adam.freeze(&store, &prefixes)?;
        let mut log = vec![format!("event 0 start stage {} {}", plan.kind.number(), arch.describe())];
        if !dropped.is_empty() {
            log.push(format!("event 0 dropped {}", dropped.join(",")));
        }
        if !plan.frozen.is_empty() {
            log.push(format!("event 0 freeze {}", plan.frozen.join(",")));
        }
        Ok(Trainer {
            config,
            arch,
            plan,
            store,
            adam,
            step: 0,
            next_event: 0,
            rng,
            vocab,
            bpe,
            skipped_steps: 0,
            skipped_utts: 0,
            log,
            metrics: Vec::new(),
            batches: None,
        })
    }

    /// Continues a stage from a checkpoint written mid-run.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let t = ck
            .training
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let arch = ck.arch()?.clone();
        let vocab = ck
            .vocab
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no character vocabulary".into()))?;
        Ok(Trainer {
            config: t.config.clone(),
            arch,
            plan: t.plan.clone(),
            store: ck.store.clone(),
            adam: t.adam.clone(),
            step: t.step,
            next_event: t.next_event,
            rng: t.rng.clone(),
            vocab,
            bpe: ck.bpe.clone(),
            skipped_steps: t.skipped_steps,
            skipped_utts: t.skipped_utts,
            log: Vec::new(),
            metrics: Vec::new(),
            batches: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: ModelKind::Asr { arch: self.arch.clone() },
            vocab: Some(self.vocab.clone()),
            bpe: self.bpe.clone(),
            store: self.store.clone(),
            training: Some(TrainingState {
                config: self.config.clone(),
                plan: self.plan.clone(),
                step: self.step,
                next_event: self.next_event,
                rng: self.rng.clone(),
                adam: self.adam.clone(),
                skipped_steps: self.skipped_steps,
                skipped_utts: self.skipped_utts,
            }),
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.plan.total_steps
    }

    /// Trains until the stage ends or `until` steps have been taken.
    pub fn run(&mut self, train: &Corpus, dev: Option<&Corpus>, until: Option<u64>) -> Result<()> {
        let end = until.map_or(self.plan.total_steps, |u| u.min(self.plan.total_steps));
        while self.step < end {
            self.train_step(train)?;
            if let Some(dev) = dev {
                if self.step % self.plan.dev_every == 0 {
                    self.dev_eval(dev)?;
                }
            }
        }
        Ok(())
    }

    fn apply_events(&mut self) -> Result<()> {
        while let Some(ev) = self.plan.events.get(self.next_event) {
            if ev.step > self.step {
                break;
            }
            let ev = ev.clone();
            for act in &ev.actions {
                match act {
                    Action::Unfreeze { prefix } => self.adam.unfreeze(prefix)?,
                    _ => {
                        self.arch.apply(act, &mut self.store, &mut self.rng)?;
                    }
                }
                self.log.push(format!("event {} {act} -> {}", self.step, self.arch.describe()));
            }
            self.next_event += 1;
        }
        Ok(())
    }

    fn batch_indices(&mut self, train: &Corpus) -> Result<Vec<usize>> {
        let spe = self.plan.steps_per_epoch;
        let epoch = self.step / spe;
        if self.batches.as_ref().map(|b| b.0) != Some(epoch) {
            let b = epoch_batches(train, self.config.data.frame_budget, self.config.seed, epoch)?;
            if b.len() as u64 != spe {
                return Err(Error::contract("training data changed between epochs"));
            }
            self.batches = Some((epoch, b));
        }
        Ok(self.batches.as_ref().expect("set above").1[(self.step % spe) as usize].clone())
    }

    /// One optimizer step (or a logged skip). Returns the loss when a step was taken.
    pub fn train_step(&mut self, train: &Corpus) -> Result<Option<f64>> {
        self.apply_events()?;
        let idx = self.batch_indices(train)?;
        let weights = self.plan.weights_at(self.step);
        let mut g = Graph::new();
        let adam = &self.adam;
        let frozen = |p: &str| adam.is_frozen(p);
        let out = batch_loss(
            &mut g,
            &self.arch,
            &self.store,
            train,
            &idx,
            weights,
            Mode::Train,
            &frozen,
            &mut self.rng,
        )?;
        if out.infeasible > 0 {
            self.skipped_utts += out.infeasible as u64;
            self.log.push(format!("event {} ctc_infeasible {}", self.step, out.infeasible));
        }
        let Some(total) = out.total else {
            self.skipped_steps += 1;
            self.log.push(format!("event {} skip_batch", self.step));
            self.step += 1;
            return Ok(None);
        };
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {}", self.step)));
        }
        let grads = g.backward(total)?;
        self.store.zero_grads();
        self.store.accumulate(grads.params())?;
        let info = self.adam.step(&mut self.store)?;
        for st in &out.bn_stats {
            BatchNormLayer::update_running_with(&mut self.store, st, self.arch.bn_momentum)?;
        }
        self.log.push(format!("{} {loss} {}", self.step, info.lr));
        self.step += 1;
        Ok(Some(loss))
    }

    /// Mean per-utterance dev loss under the current weights, in inference
    /// mode; `None` when no dev utterance can be scored.
    pub fn dev_loss(&self, dev: &Corpus) -> Result<Option<f64>> {
        let weights = self.plan.weights_at(self.step);
        let batches = make_batches(&dev.lengths(), self.config.data.frame_budget, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in &batches {
            let mut g = Graph::new();
            let out = batch_loss(
                &mut g,
                &self.arch,
                &self.store,
                dev,
                idx,
                weights,
                Mode::Infer,
                &|_| false,
                &mut rng,
            )?;
            if let Some(t) = out.total {
                sum += g.value(t).item() * idx.len() as f64;
                count += idx.len();
            }
        }
        Ok((count > 0).then(|| sum / count as f64))
    }

    fn dev_eval(&mut self, dev: &Corpus) -> Result<()> {
        let Some(loss) = self.dev_loss(dev)? else {
            self.log.push(format!("event {} dev_unscorable", self.step));
            return Ok(());
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("dev loss {loss} at step {}", self.step)));
        }
        let decayed = self.adam.lr_schedule_update(loss);
        let epoch = self.step as f64 / self.plan.steps_per_epoch as f64;
        self.metrics.push(format!("{epoch:.3},dev,loss,{loss}"));
        self.log.push(format!(
            "event {} dev_loss {loss} lr {}{}",
            self.step,
            self.adam.lr,
            if decayed { " decayed" } else { "" }
        ));
        Ok(())
    }
}
