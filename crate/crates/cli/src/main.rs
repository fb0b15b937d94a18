use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use c2b_core::datametrics::{error_rate, gen_synthetic, load_dataset, write_dataset, SyntheticTaskSpec, Unit};
use c2b_core::decoder::Fusion;
use c2b_core::gradsuite;
use c2b_core::lm::{lm_train, LmConfig};
use c2b_core::pipeline::{Checkpoint, Corpus, LossMode, Method, ModelKind, Output, Recognizer, Search, TrainConfig, Trainer};
use c2b_core::tokenizer::{sorted_letters, BpeModel, CharVocab};

#[derive(Parser)]
#[command(name = "c2b", version, about = "Character-to-BPE staged training and streaming decoding")]
struct Cli {
    /// Root for every relative path on the command line and in configs.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads for decoding and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic desk-scale corpus.
    SynthData(SynthArgs),
    /// Learn BPE merges from a manifest's transcripts.
    BpeLearn(BpeArgs),
    /// Train the BPE-level RNN language model used for fusion.
    LmTrain(LmArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Transcribe a manifest with a trained model.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML task description; `seed` is required here or via --seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for train.tsv, dev.tsv, feats/ and letters.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BpeArgs {
    /// Manifest whose transcripts are the training text.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    merges: usize,
    /// Character inventory file (one symbol per line); default A–Z.
    #[arg(long)]
    letters: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LmArgs {
    /// TOML LM settings with a mandatory `seed`.
    #[arg(long)]
    config: PathBuf,
    /// Manifest whose transcripts are the training text.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    letters: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["1", "2", "3"])]
    stage: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    loss: Option<LossMode>,
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue a stage from a checkpoint written with --until.
    #[arg(long, conflicts_with_all = ["config", "stage", "method", "loss", "init"])]
    resume: Option<PathBuf>,
    /// Stop after this many steps of the stage (the checkpoint stays resumable).
    #[arg(long)]
    until: Option<u64>,
    /// Output checkpoint; the log and metrics go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// LM checkpoint for shallow fusion.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 12)]
    beam: usize,
    /// Greedy attention decoding instead of beam search.
    #[arg(long, conflicts_with = "beam")]
    greedy: bool,
    /// Which output to decode; default is the richest the model has.
    #[arg(long, value_parser = ["char", "bpe", "attention"])]
    output: Option<String>,
    /// Cap on decoded length in BPE tokens; default from the training config.
    #[arg(long)]
    max_len: Option<usize>,
    /// Hypothesis file (`id<TAB>text` per line); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long, default_value = "word")]
    unit: Unit,
    /// BPE model, needed for `--unit bpe`.
    #[arg(long)]
    bpe: Option<PathBuf>,
    #[arg(long)]
    letters: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    /// One suite; all of them when absent.
    #[arg(long)]
    module: Option<String>,
}

/// A failure that carries its own exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Exit(2, msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(Exit(c, _)) = e.downcast_ref::<Exit>() {
        return *c;
    }
    match e.downcast_ref::<c2b_core::Error>() {
        Some(c2b_core::Error::Config(_)) => 2,
        Some(c2b_core::Error::NonFinite(_)) => 4,
        _ => 3,
    }
}

struct Ctx {
    root: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Resolves `p` and creates its parent directory.
    fn out(&self, p: &Path) -> Result<PathBuf> {
        let p = self.path(p);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(p)
    }

    fn write(&self, p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.out(p)?;
        fs::write(&p, bytes).map_err(|e| c2b_core::Error::Io { path: p, source: e }.into())
    }

    fn vocab(&self, letters: Option<&Path>) -> Result<CharVocab> {
        Ok(match letters {
            Some(p) => CharVocab::load(&self.path(p))?,
            None => CharVocab::english(),
        })
    }
}

fn echo(config: &str) {
    eprintln!("# resolved config");
    for line in config.lines() {
        eprintln!("#   {line}");
    }
}

fn read_toml(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| c2b_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.parse::<toml::Table>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn synth_data(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let mut table = match &a.config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => toml::Table::new(),
    };
    if let Some(s) = a.seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if !table.contains_key("seed") {
        return Err(usage("synth-data needs a seed (--seed or `seed` in --config)"));
    }
    let spec: SyntheticTaskSpec = table
        .try_into()
        .map_err(|e| usage(format!("synthetic task config: {e}")))?;
    echo(&toml::to_string(&spec)?);
    let data = gen_synthetic(&spec)?;
    let dir = ctx.path(&a.out);
    write_dataset(&dir, "train", &data.train)?;
    write_dataset(&dir, "dev", &data.dev)?;
    let vocab = CharVocab::from_letters(data.letters.iter().copied())?;
    vocab.save(&dir.join("letters.txt"))?;
    ctx.write(&dir.join("lexicon.txt"), data.lexicon.join("\n") + "\n")?;
    let letters: String = data.letters.iter().collect();
    println!(
        "wrote {} train and {} dev utterances to {} (letters {letters})",
        data.train.len(),
        data.dev.len(),
        dir.display()
    );
    Ok(())
}

fn bpe_learn(ctx: &Ctx, a: &BpeArgs) -> Result<()> {
    echo(&format!("data = {:?}\nmerges = {}\nletters = {:?}", a.data, a.merges, a.letters));
    let vocab = ctx.vocab(a.letters.as_deref())?;
    let utts = load_dataset(&ctx.path(&a.data))?;
    let bpe = BpeModel::learn_from_texts(utts.iter().map(|u| u.transcript.as_str()), a.merges)?
        .with_alphabet(sorted_letters(&vocab))?;
    let out = ctx.out(&a.out)?;
    bpe.save(&out)?;
    println!("{} merges, {} tokens -> {}", bpe.merges().len(), bpe.vocab_size(), out.display());
    Ok(())
}

fn lm_train_cmd(ctx: &Ctx, a: &LmArgs) -> Result<()> {
    let table = read_toml(&ctx.path(&a.config))?;
    if !table.contains_key("seed") {
        return Err(usage(format!("{}: `seed` is required", a.config.display())));
    }
    let cfg: LmConfig = table
        .try_into()
        .map_err(|e| usage(format!("{}: {e}", a.config.display())))?;
    echo(&toml::to_string(&cfg)?);
    let vocab = ctx.vocab(a.letters.as_deref())?;
    let bpe = BpeModel::load(&ctx.path(&a.bpe), &vocab)?;
    let utts = load_dataset(&ctx.path(&a.data))?;
    let corpus: Vec<Vec<usize>> = utts.iter().map(|u| bpe.encode(&u.transcript)).collect();
    let trained = lm_train(&corpus, bpe.vocab_size(), &cfg)?;
    let ppl = trained.lm.perplexity(&trained.store, &corpus)?;
    let ck = Checkpoint {
        model: ModelKind::Lm { lm: trained.lm },
        vocab: Some(vocab),
        bpe: Some(bpe),
        store: trained.store,
        training: None,
    };
    let out = ctx.out(&a.out)?;
    ck.save(&out)?;
    let last = trained.losses.last().copied().unwrap_or(f64::NAN);
    println!("final loss {last:.4} train perplexity {ppl:.3} -> {}", out.display());
    Ok(())
}

/// Config file plus command-line stage overrides.
fn train_config(ctx: &Ctx, a: &TrainArgs) -> Result<TrainConfig> {
    let path = a.config.as_ref().ok_or_else(|| usage("train needs --config (or --resume)"))?;
    let stage = a.stage.as_ref().ok_or_else(|| usage("train needs --stage (or --resume)"))?;
    let mut table = read_toml(&ctx.path(path))?;
    let st = table
        .entry("stage")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| usage(format!("{}: [stage] must be a table", path.display())))?;
    st.insert("stage".into(), toml::Value::Integer(stage.parse()?));
    if let Some(m) = a.method {
        st.insert("method".into(), toml::Value::String(m.to_string()));
    }
    if let Some(l) = a.loss {
        st.insert("loss".into(), toml::Value::String(l.to_string()));
    }
    if let Some(i) = &a.init {
        st.insert("init".into(), toml::Value::String(i.to_string_lossy().into_owned()));
    }
    let mut cfg = TrainConfig::from_toml(&toml::to_string(&table)?)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    cfg.rebase(&ctx.root);
    Ok(cfg)
}

fn load_corpus(path: &Path, vocab: &CharVocab, bpe: Option<&BpeModel>) -> Result<Corpus> {
    let utts = load_dataset(path)?;
    Ok(Corpus::new(&utts, vocab, bpe)?)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let resumed = match &a.resume {
        Some(p) => Some(Trainer::resume(&Checkpoint::load(&ctx.path(p))?)?),
        None => None,
    };
    let cfg = match &resumed {
        Some(t) => t.config.clone(),
        None => train_config(ctx, a)?,
    };
    echo(&cfg.to_toml());
    let vocab = if cfg.data.letters.is_empty() {
        CharVocab::english()
    } else {
        CharVocab::from_letters(cfg.data.letters.chars())?
    };
    let bpe = cfg.data.bpe.as_ref().map(|p| BpeModel::load(p, &vocab)).transpose()?;
    let train_set = load_corpus(&cfg.data.train, &vocab, bpe.as_ref())?;
    let dev_set = load_corpus(&cfg.data.dev, &vocab, bpe.as_ref())?;
    let mut t = match resumed {
        Some(t) => t,
        None => {
            let init = cfg.stage.init.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
            Trainer::new(cfg.clone(), vocab, bpe, init.as_ref(), &train_set)?
        }
    };
    let from = t.step;
    t.run(&train_set, Some(&dev_set), a.until)?;
    let out = ctx.out(&a.out)?;
    t.checkpoint().save(&out)?;
    ctx.write(&sidecar(&out, "log"), t.log.join("\n") + "\n")?;
    let metrics = std::iter::once("epoch,split,metric,value".to_string())
        .chain(t.metrics.iter().cloned())
        .collect::<Vec<_>>()
        .join("\n");
    ctx.write(&sidecar(&out, "metrics.csv"), metrics + "\n")?;
    println!(
        "stage {} steps {from}..{} of {}{} ({}) -> {}",
        t.plan.kind.number(),
        t.step,
        t.plan.total_steps,
        if t.finished() { "" } else { " (resumable)" },
        t.arch.describe(),
        out.display()
    );
    Ok(())
}

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn decode(ctx: &Ctx, a: &DecodeArgs) -> Result<()> {
    if a.beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    let ck = Checkpoint::load(&ctx.path(&a.ckpt))?;
    let rec = Recognizer::new(&ck)?;
    let output = match a.output.as_deref() {
        None => rec.default_output(),
        Some("char") => Output::CharCtc,
        Some("bpe") => Output::BpeCtc,
        Some(_) => Output::Attention,
    };
    let max_len = a
        .max_len
        .or_else(|| ck.training.as_ref().map(|t| t.config.data.max_decode_len))
        .unwrap_or(40);
    let lm_ck = a.lm.as_ref().map(|p| Checkpoint::load(&ctx.path(p))).transpose()?;
    let fusion = match &lm_ck {
        Some(l) => {
            let lm = l.lm()?;
            if l.bpe != ck.bpe {
                return Err(usage(format!(
                    "--lm {}: LM and model use different BPE models",
                    a.lm.as_ref().expect("lm given").display()
                )));
            }
            if a.lambda < 0.0 {
                return Err(usage("--lambda must be non-negative"));
            }
            Some(Fusion {
                lm,
                store: &l.store,
                weight: a.lambda,
            })
        }
        None => None,
    };
    let search = if a.greedy { Search::Greedy } else { Search::Beam(a.beam) };
    echo(&format!(
        "ckpt = {:?}\ndata = {:?}\noutput = {output:?}\nsearch = {search:?}\nmax_len = {max_len}\nlm = {:?}\nlambda = {}",
        a.ckpt, a.data, a.lm, a.lambda
    ));
    let utts = load_dataset(&ctx.path(&a.data))?;
    let hyps: Vec<String> = utts
        .par_iter()
        .map(|u| rec.transcribe(&u.features, output, search, max_len, fusion.as_ref()))
        .collect::<c2b_core::Result<_>>()?;
    let text: String = utts
        .iter()
        .zip(&hyps)
        .map(|(u, h)| format!("{}\t{h}\n", u.id))
        .collect();
    match &a.out {
        Some(p) => ctx.write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// `id<TAB>text` lines or a data manifest (`id<TAB>features<TAB>text`); the text is the last field.
fn read_texts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| c2b_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match (l.split_once('\t'), l.rsplit_once('\t')) {
            (Some((id, _)), Some((_, t))) => (id.to_string(), t.to_string()),
            _ => (String::new(), l.to_string()),
        })
        .collect())
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    echo(&format!(
        "refs = {:?}\nhyps = {:?}\nunit = {:?}\nbpe = {:?}",
        a.refs, a.hyps, a.unit, a.bpe
    ));
    let (rp, hp) = (ctx.path(&a.refs), ctx.path(&a.hyps));
    let refs = read_texts(&rp)?;
    let hyps = read_texts(&hp)?;
    if refs.len() != hyps.len() {
        return Err(Exit(3, format!("{} has {} lines but {} has {}", rp.display(), refs.len(), hp.display(), hyps.len())).into());
    }
    if let Some((r, h)) = refs.iter().zip(&hyps).find(|(r, h)| r.0 != h.0) {
        return Err(Exit(3, format!("utterance ids differ: {:?} in {} vs {:?} in {}", r.0, rp.display(), h.0, hp.display())).into());
    }
    let bpe = match (a.unit, &a.bpe) {
        (Unit::Bpe, None) => return Err(usage("--unit bpe needs --bpe")),
        (_, Some(p)) => Some(BpeModel::load(&ctx.path(p), &ctx.vocab(a.letters.as_deref())?)?),
        _ => None,
    };
    let r: Vec<&str> = refs.iter().map(|x| x.1.as_str()).collect();
    let h: Vec<&str> = hyps.iter().map(|x| x.1.as_str()).collect();
    let rate = error_rate(&r, &h, a.unit, bpe.as_ref())?;
    println!("{} {rate:.2}", a.unit.label());
    Ok(())
}

fn gradcheck(a: &GradArgs) -> Result<()> {
    let names: Vec<&str> = match &a.module {
        Some(m) if gradsuite::SUITES.contains(&m.as_str()) => vec![m.as_str()],
        Some(m) => {
            return Err(usage(format!(
                "--module {m:?}: expected one of {}",
                gradsuite::SUITES.join(", ")
            )))
        }
        None => gradsuite::SUITES.to_vec(),
    };
    echo(&format!(
        "modules = {names:?}\ntol = {}\nfraction = {}\nmax = {}",
        gradsuite::TOL,
        gradsuite::FRAC,
        gradsuite::MAX
    ));
    let mut failed = Vec::new();
    for name in names {
        let r = gradsuite::run_suite(name)?;
        let ok = r.passes(gradsuite::TOL, gradsuite::FRAC, gradsuite::MAX);
        println!(
            "{} {name}: {} coords, {:.1}% within {:e}, max rel err {:.2e}",
            if ok { "PASS" } else { "FAIL" },
            r.entries.len(),
            100.0 * r.fraction_within(gradsuite::TOL),
            gradsuite::TOL,
            r.max_rel_error()
        );
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        return Err(Exit(4, format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    if !cli.workdir.is_dir() {
        bail!(Exit(3, format!("--workdir {}: not a directory", cli.workdir.display())));
    }
    let root = fs::canonicalize(&cli.workdir).with_context(|| format!("--workdir {}", cli.workdir.display()))?;
    let ctx = Ctx { root };
    match &cli.cmd {
        Cmd::SynthData(a) => synth_data(&ctx, a),
        Cmd::BpeLearn(a) => bpe_learn(&ctx, a),
        Cmd::LmTrain(a) => lm_train_cmd(&ctx, a),
        Cmd::Train(a) => train(&ctx, a),
        Cmd::Decode(a) => decode(&ctx, a),
        Cmd::Eval(a) => eval(&ctx, a),
        Cmd::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already fold their source into the message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
