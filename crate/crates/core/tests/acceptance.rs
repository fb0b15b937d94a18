//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the report is always printed.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c2b_core::attention::{chunk_weights, expected_alignment, initial_alignment};
use c2b_core::ctc::{ctc_brute_force, ctc_loss, min_alignment_len};
use c2b_core::datametrics::{edit_distance, error_rate, gen_synthetic, SyntheticData, SyntheticTaskSpec, Unit};
use c2b_core::decoder::{rank, AttState, AttentionDecoder, Fusion};
use c2b_core::gradsuite;
use c2b_core::lm::RnnLm;
use c2b_core::numerics::{ParamStore, Tensor};
use c2b_core::pipeline::{Action, Checkpoint, Corpus, Recognizer, Search, TrainConfig, Trainer};
use c2b_core::tokenizer::{sorted_letters, BpeModel, CharVocab};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn log_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        data.extend(w.iter().map(|x| (x / z).ln()));
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

// 1 -------------------------------------------------------------------------

fn ctc_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 200 {
        let frames = rng.random_range(1..=6);
        let v = rng.random_range(1..=3);
        let len = rng.random_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..v)).collect();
        if min_alignment_len(&target) > frames {
            continue;
        }
        let lp = log_rows(&mut rng, frames, v + 1);
        let (fast, _) = ctc_loss(&lp, &target).map_err(|e| e.to_string())?;
        let slow = ctc_brute_force(&lp, &target).map_err(|e| e.to_string())?;
        let rel = (fast - slow).abs() / slow.abs();
        worst = worst.max(rel);
        check(rel <= 1e-9, || format!("instance {n}: {fast} vs {slow} (target {target:?})"))?;
        n += 1;
    }
    within(t0.elapsed(), 10.0, "200 instances")?;
    Ok(format!("200 instances, max rel diff {worst:.1e}, {:.2}s", t0.elapsed().as_secs_f64()))
}

// 2 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    for name in gradsuite::SUITES {
        let r = gradsuite::run_suite(name).map_err(|e| format!("{name}: {e}"))?;
        check(r.passes(gradsuite::TOL, gradsuite::FRAC, gradsuite::MAX), || {
            format!(
                "{name}: {:.1}% within {:e}, max {:.2e}",
                100.0 * r.fraction_within(gradsuite::TOL),
                gradsuite::TOL,
                r.max_rel_error()
            )
        })?;
        parts.push(format!("{name} {:.0e}", r.max_rel_error()));
    }
    within(t0.elapsed(), 60.0, "gradient suites")?;
    Ok(format!("max rel err: {} ({:.1}s)", parts.join(", "), t0.elapsed().as_secs_f64()))
}

// 3 -------------------------------------------------------------------------

fn naive_alpha(p: &[f64], prev: &[f64]) -> Vec<f64> {
    (0..p.len())
        .map(|j| {
            let s: f64 = (0..=j)
                .map(|k| prev[k] * (k..j).map(|m| 1.0 - p[m]).product::<f64>())
                .sum();
            p[j] * s
        })
        .collect()
}

fn naive_beta(alpha: &[f64], u: &[f64], w: usize) -> Vec<f64> {
    let t = alpha.len();
    (0..t)
        .map(|j| {
            (j..(j + w).min(t))
                .map(|k| {
                    let lo = (k + 1).saturating_sub(w);
                    let z: f64 = (lo..=k).map(|m| u[m].exp()).sum();
                    alpha[k] * u[j].exp() / z
                })
                .sum()
        })
        .collect()
}

fn tiny_decoder(vocab: usize, seed: u64, spread: f64) -> (AttentionDecoder, ParamStore) {
    let d = AttentionDecoder {
        vocab,
        emb_dim: 3,
        hidden: 4,
        enc_dim: 3,
        att_dim: 4,
        chunk_width: 2,
    };
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    d.init(&mut s, &mut rng).unwrap();
    let names: Vec<String> = s.names().map(String::from).collect();
    for n in names {
        let t = s.value(&n).unwrap().map(|v| v * spread);
        s.set_value(&n, t).unwrap();
    }
    (d, s)
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Tensor {
    Tensor::matrix(t, dim, (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mocha_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_rec: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    for i in 0..500 {
        let t = rng.random_range(1..=12);
        let w = rng.random_range(1..=4);
        // chain several output steps so alpha_prev is itself a realistic alignment
        let mut prev = initial_alignment(t);
        for _ in 0..3 {
            let p: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let alpha = expected_alignment(&p, &prev).map_err(|e| e.to_string())?;
            let naive = naive_alpha(&p, &prev);
            for (a, b) in alpha.iter().zip(&naive) {
                worst_rec = worst_rec.max((a - b).abs());
            }
            check(alpha.iter().zip(&naive).all(|(a, b)| (a - b).abs() <= 1e-12), || {
                format!("instance {i}: recurrence {alpha:?} vs naive {naive:?}")
            })?;
            check(alpha.iter().all(|a| (0.0..=1.0).contains(a)), || format!("instance {i}: alpha outside [0,1]"))?;
            let sa: f64 = alpha.iter().sum();
            check(sa <= 1.0 + 1e-12, || format!("instance {i}: sum alpha {sa}"))?;
            let u: Vec<f64> = (0..t).map(|_| rng.random_range(-3.0..3.0)).collect();
            let beta = chunk_weights(&alpha, &u, w).map_err(|e| e.to_string())?;
            let nb = naive_beta(&alpha, &u, w);
            check(beta.iter().zip(&nb).all(|(a, b)| (a - b).abs() <= 1e-12), || {
                format!("instance {i}: chunk weights {beta:?} vs naive {nb:?}")
            })?;
            let sb: f64 = beta.iter().sum();
            worst_mass = worst_mass.max((sb - sa).abs());
            check((sb - sa).abs() <= 1e-12, || format!("instance {i}: sum beta {sb} vs sum alpha {sa}"))?;
            prev = alpha;
        }
    }
    // hard decoding: attend points never move backwards
    let mut steps = 0;
    for i in 0..100 {
        let (d, mut s) = tiny_decoder(4, 1000 + i, 20.0);
        // bias selection toward attending so decodes run several steps
        s.set_value("att.mono.r", Tensor::scalar(rng.random_range(-1.0..3.0))).unwrap();
        let t = rng.random_range(2..=12);
        let mem = d.memory(&s, &random_frames(&mut rng, t, 3)).unwrap();
        let mut st = d.initial_state(&mem, true);
        let mut last = 0;
        for _ in 0..10 {
            let (lp, next) = d.step(&s, &mem, &st).map_err(|e| e.to_string())?;
            let AttState::Hard { start } = next.att else {
                return Err("hard state expected".into());
            };
            check(start >= last, || format!("decode {i}: attend index {start} after {last}"))?;
            last = start;
            steps += 1;
            let tok = argmax(&lp);
            if tok == d.eos() {
                break;
            }
            st = next.advance(tok);
        }
    }
    Ok(format!(
        "1500 alignments: max |rec-naive| {worst_rec:.1e}, max |Σβ-Σα| {worst_mass:.1e}; {steps} hard steps monotone"
    ))
}

fn argmax(v: &[f64]) -> usize {
    let mut b = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[b] {
            b = i;
        }
    }
    b
}

// 4 -------------------------------------------------------------------------

fn oracle_merges(corpus: &BTreeMap<String, usize>, num: usize) -> Vec<(String, String)> {
    let mut words: Vec<(Vec<String>, usize)> = corpus
        .iter()
        .map(|(w, &c)| {
            let chars: Vec<char> = w.chars().collect();
            let mut syms: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
            let last = syms.len() - 1;
            syms[last].push_str("</w>");
            (syms, c)
        })
        .collect();
    let mut merges = Vec::new();
    while merges.len() < num {
        let mut counts: HashMap<(String, String), usize> = HashMap::new();
        for (syms, c) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0].clone(), pair[1].clone())).or_default() += c;
            }
        }
        let best = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        for (syms, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    out.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *syms = out;
        }
        merges.push(pair);
    }
    merges
}

fn random_word(rng: &mut ChaCha8Rng, letters: &[char], max: usize) -> String {
    (0..rng.random_range(1..=max)).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}

fn bpe_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut total_merges = 0;
    for i in 0..50 {
        let letters: Vec<char> = ('A'..='Z').take(rng.random_range(2..=5)).collect();
        let mut corpus = BTreeMap::new();
        for _ in 0..rng.random_range(1..=8) {
            *corpus.entry(random_word(&mut rng, &letters, 6)).or_insert(0) += rng.random_range(1..=5);
        }
        let num = rng.random_range(0..=12);
        let model = BpeModel::learn(&corpus, num).map_err(|e| e.to_string())?;
        let want = oracle_merges(&corpus, num);
        check(model.merges() == want.as_slice(), || {
            format!("corpus {i} {corpus:?}: merges {:?} vs oracle {want:?}", model.merges())
        })?;
        total_merges += want.len();
    }
    let letters: Vec<char> = ('A'..='L').collect();
    let vocab = CharVocab::from_letters(letters.iter().copied()).unwrap();
    let texts: Vec<String> = (0..300)
        .map(|_| {
            let n = rng.random_range(1..=4);
            (0..n).map(|_| random_word(&mut rng, &letters, 7)).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let model = BpeModel::learn_from_texts(texts.iter().map(String::as_str), 80)
        .and_then(|m| m.with_alphabet(sorted_letters(&vocab)))
        .map_err(|e| e.to_string())?;
    for i in 0..1000 {
        let n = rng.random_range(1..=5);
        let s = (0..n).map(|_| random_word(&mut rng, &letters, 9)).collect::<Vec<_>>().join(" ");
        let back = model.decode(&model.encode(&s)).map_err(|e| e.to_string())?;
        check(back == s, || format!("string {i}: {s:?} round-trips to {back:?}"))?;
    }
    Ok(format!("50 corpora ({total_merges} merges) match the oracle; 1000 round trips exact"))
}

// 5 -------------------------------------------------------------------------

fn beam_search() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for i in 0..50 {
        let (d, s) = tiny_decoder(rng.random_range(2..=5), 2000 + i, 30.0);
        let t = rng.random_range(2..=8);
        let mem = d.memory(&s, &random_frames(&mut rng, t, 3)).unwrap();
        let max_len = rng.random_range(1..=6);
        let g = d.greedy_decode(&s, &mem, max_len, None).map_err(|e| e.to_string())?;
        let b = d.beam_search(&s, &mem, 1, max_len, None).map_err(|e| e.to_string())?;
        check(g.tokens == b.tokens && g.score == b.score, || {
            format!("model {i}: greedy {:?} vs beam-1 {:?}", g.tokens, b.tokens)
        })?;
    }
    for i in 0..20 {
        // V' = 3 symbols: two tokens plus eos
        let (d, s) = tiny_decoder(2, 3000 + i, 30.0);
        let t = rng.random_range(2..=6);
        let mem = d.memory(&s, &random_frames(&mut rng, t, 3)).unwrap();
        let eos = d.eos();
        // every sequence of ≤ 3 symbols ending at eos (or unfinished at length 3)
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut best_open: Option<(f64, Vec<usize>)> = None;
        let mut queue = VecDeque::from([(d.initial_state(&mem, true), Vec::new(), 0.0)]);
        while let Some((st, prefix, score)) = queue.pop_front() {
            let (lp, next) = d.step(&s, &mem, &st).map_err(|e| e.to_string())?;
            for (tok, l) in lp.iter().enumerate() {
                let mut seq: Vec<usize> = prefix.clone();
                seq.push(tok);
                let sc = score + l;
                let slot = if tok == eos {
                    &mut best
                } else if seq.len() == 3 {
                    &mut best_open
                } else {
                    queue.push_back((next.clone().advance(tok), seq, sc));
                    continue;
                };
                if slot.as_ref().is_none_or(|(bs, bq)| rank(sc, &seq, *bs, bq).is_lt()) {
                    *slot = Some((sc, seq));
                }
            }
        }
        let (want_score, want) = best.or(best_open).expect("some sequence");
        let got = d.beam_search(&s, &mem, 27, 3, None).map_err(|e| e.to_string())?;
        check(got.tokens == want && (got.score - want_score).abs() < 1e-9, || {
            format!("model {i}: beam {:?} ({}) vs exhaustive {want:?} ({want_score})", got.tokens, got.score)
        })?;
    }
    let mut fused_checked = 0;
    for i in 0..20 {
        let (d, s) = tiny_decoder(4, 4000 + i, 30.0);
        let lm = RnnLm::new(4, 3, 5, 1).unwrap();
        let mut ls = ParamStore::new();
        lm.init(&mut ls, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        let fusion = Fusion {
            lm: &lm,
            store: &ls,
            weight: 0.0,
        };
        let mem = d.memory(&s, &random_frames(&mut rng, 6, 3)).unwrap();
        let plain = d.beam_search(&s, &mem, 4, 6, None).map_err(|e| e.to_string())?;
        let fused = d.beam_search(&s, &mem, 4, 6, Some(&fusion)).map_err(|e| e.to_string())?;
        check(plain.tokens == fused.tokens && plain.score == fused.score, || {
            format!("model {i}: λ=0 fusion changed {:?} to {:?}", plain.tokens, fused.tokens)
        })?;
        fused_checked += 1;
    }
    Ok(format!("beam-1 = greedy on 50 models; exhaustive agreement on 20; λ=0 identity on {fused_checked}"))
}

// 6 -------------------------------------------------------------------------

/// All strings over `{0,1,2}` of length ≤ 4 with their pairwise edit
/// distances, by breadth-first search over single edits.
fn edit_graph() -> (Vec<Vec<u8>>, Vec<Vec<usize>>) {
    let mut strings: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..4 {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        strings.extend(next.iter().cloned());
        frontier = next;
    }
    let index: HashMap<Vec<u8>, usize> = strings.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let neighbours = |s: &[u8]| -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..=s.len() {
            for c in 0..3u8 {
                let mut t = s.to_vec();
                t.insert(i, c);
                out.push(t);
            }
        }
        for i in 0..s.len() {
            let mut t = s.to_vec();
            t.remove(i);
            out.push(t);
            for c in 0..3u8 {
                let mut t = s.to_vec();
                t[i] = c;
                out.push(t);
            }
        }
        out.iter().filter_map(|t| index.get(t).copied()).collect()
    };
    let adj: Vec<Vec<usize>> = strings.iter().map(|s| neighbours(s)).collect();
    let dist = (0..strings.len())
        .map(|src| {
            let mut d = vec![usize::MAX; strings.len()];
            d[src] = 0;
            let mut q = VecDeque::from([src]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if d[v] == usize::MAX {
                        d[v] = d[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            d
        })
        .collect();
    (strings, dist)
}

fn edit_distance_oracle() -> Outcome {
    let (strings, dist) = edit_graph();
    let mut pairs = 0;
    for (i, a) in strings.iter().enumerate() {
        for (j, b) in strings.iter().enumerate() {
            let d = edit_distance(a, b);
            check(d == dist[i][j], || format!("{a:?} vs {b:?}: {d}, oracle {}", dist[i][j]))?;
            pairs += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut s = || -> Vec<u8> { (0..rng.random_range(0..=10)).map(|_| rng.random_range(0..4u8)).collect() };
    for n in 0..1000 {
        let (a, b, c) = (s(), s(), s());
        let ab = edit_distance(&a, &b);
        check((ab == 0) == (a == b), || format!("pair {n}: identity fails for {a:?}, {b:?}"))?;
        check(ab == edit_distance(&b, &a), || format!("pair {n}: asymmetric"))?;
        check(ab <= edit_distance(&a, &c) + edit_distance(&c, &b), || format!("pair {n}: triangle fails"))?;
        check(edit_distance(&a, &a) == 0, || format!("pair {n}: d(a,a) ≠ 0"))?;
    }
    Ok(format!("{pairs} pairs agree with the search oracle; axioms hold on 1000 random triples"))
}

// 7 -------------------------------------------------------------------------

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MERGES: usize = 120;
const STAGE1_EPOCHS: f64 = 3.0;
const STAGE2_EPOCHS: f64 = 9.0;
const STAGE3_EPOCHS: f64 = 12.0;
const BEAM: usize = 12;
const BUDGET_S: f64 = 45.0 * 60.0;

fn model_toml(seed: u64) -> String {
    format!(
        "seed = {seed}\n\
         [model]\nhidden = 32\nlayers = 6\nbaseline_layers = 8\nbpe_layers = 2\ndropout = 0.1\nbn_momentum = 0.9\n\
         emb_dim = 16\ndec_hidden = 32\natt_dim = 16\n\
         [optimizer]\nlr = 0.01\n"
    )
}

struct Task {
    data: SyntheticData,
    vocab: CharVocab,
    bpe: BpeModel,
    train: Corpus,
    dev: Corpus,
}

impl Task {
    fn new(seed: u64) -> Task {
        let data = gen_synthetic(&SyntheticTaskSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let vocab = CharVocab::from_letters(data.letters.iter().copied()).unwrap();
        let bpe = BpeModel::learn_from_texts(data.train.iter().map(|u| u.transcript.as_str()), MERGES)
            .unwrap()
            .with_alphabet(sorted_letters(&vocab))
            .unwrap();
        let train = Corpus::new(&data.train, &vocab, Some(&bpe)).unwrap();
        let dev = Corpus::new(&data.dev, &vocab, Some(&bpe)).unwrap();
        Task {
            data,
            vocab,
            bpe,
            train,
            dev,
        }
    }

    fn run(&self, seed: u64, stage: &str, init: Option<&Checkpoint>) -> c2b_core::Result<Checkpoint> {
        let cfg = TrainConfig::from_toml(&format!("{}[stage]\n{stage}\n", model_toml(seed)))?;
        let mut t = Trainer::new(cfg, self.vocab.clone(), Some(self.bpe.clone()), init, &self.train)?;
        t.run(&self.train, Some(&self.dev), None)?;
        Ok(t.checkpoint())
    }

    fn refs(&self) -> Vec<&str> {
        self.data.dev.iter().map(|u| u.transcript.as_str()).collect()
    }

    fn score(&self, ck: &Checkpoint, which: Unit) -> c2b_core::Result<f64> {
        let r = Recognizer::new(ck)?;
        let hyps = self
            .data
            .dev
            .iter()
            .map(|u| match which {
                Unit::Char => r.char_ctc(&u.features),
                Unit::Bpe => r.bpe_ctc(&u.features),
                Unit::Word => Ok(r.attention(&u.features, Search::Beam(BEAM), 40, None)?.0),
            })
            .collect::<c2b_core::Result<Vec<String>>>()?;
        let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
        error_rate(&self.refs(), &h, which, Some(&self.bpe))
    }
}

#[derive(Debug, Default, Clone)]
struct SeedResult {
    seed: u64,
    s1_cer: f64,
    replace_ber: f64,
    joint_ber: f64,
    joint_cer: f64,
    freeze_ber: f64,
    c2b_wer: f64,
    pt_wer: f64,
    ce_wer: f64,
    secs: f64,
}

fn run_seed(seed: u64, keep: &Mutex<Option<(Task, Checkpoint)>>) -> c2b_core::Result<SeedResult> {
    let t0 = Instant::now();
    let task = Task::new(seed);
    let s1 = task.run(seed, &format!("stage = 1\nepochs = {STAGE1_EPOCHS}"), None)?;
    let stage2 = |m: &str| task.run(seed, &format!("stage = 2\nmethod = \"{m}\"\ninit = \"-\"\nepochs = {STAGE2_EPOCHS}"), Some(&s1));
    let replace = stage2("replace")?;
    let joint = stage2("joint")?;
    let freeze = stage2("freeze")?;
    let c2b = task.run(seed, &format!("stage = 3\nloss = \"ce\"\ninit = \"-\"\nepochs = {STAGE3_EPOCHS}"), Some(&freeze))?;
    let pt = task.run(seed, &format!("stage = 3\nloss = \"pt-ctc+ce\"\nepochs = {STAGE3_EPOCHS}"), None)?;
    let ce = task.run(seed, &format!("stage = 3\nloss = \"ce\"\nepochs = {STAGE3_EPOCHS}"), None)?;
    let r = SeedResult {
        seed,
        s1_cer: task.score(&s1, Unit::Char)?,
        replace_ber: task.score(&replace, Unit::Bpe)?,
        joint_ber: task.score(&joint, Unit::Bpe)?,
        joint_cer: task.score(&joint, Unit::Char)?,
        freeze_ber: task.score(&freeze, Unit::Bpe)?,
        c2b_wer: task.score(&c2b, Unit::Word)?,
        pt_wer: task.score(&pt, Unit::Word)?,
        ce_wer: task.score(&ce, Unit::Word)?,
        secs: t0.elapsed().as_secs_f64(),
    };
    let mut k = keep.lock().unwrap();
    if k.is_none() {
        *k = Some((task, c2b));
    }
    Ok(r)
}

fn end_to_end(keep: &Mutex<Option<(Task, Checkpoint)>>) -> Outcome {
    let t0 = Instant::now();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(SEEDS.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<SeedResult, String>>> = Mutex::new(Vec::new());
    std::thread::scope(|sc| {
        for _ in 0..workers {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = SEEDS.get(i) else { break };
                let r = run_seed(seed, keep).map_err(|e| format!("seed {seed}: {e}"));
                if let Ok(r) = &r {
                    println!(
                        "    seed {}: stage-1 CER {:.2} | BER replace {:.2} joint {:.2} freeze {:.2} | joint CER {:.2} | WER c2b {:.2} pt-ctc+ce {:.2} ce {:.2} | {:.0}s",
                        r.seed, r.s1_cer, r.replace_ber, r.joint_ber, r.freeze_ber, r.joint_cer, r.c2b_wer, r.pt_wer, r.ce_wer, r.secs
                    );
                }
                results.lock().unwrap().push(r);
            });
        }
    });
    let mut rs = results.into_inner().unwrap().into_iter().collect::<Result<Vec<_>, _>>()?;
    rs.sort_by_key(|r| r.seed);
    let elapsed = t0.elapsed().as_secs_f64();
    let count = |f: &dyn Fn(&SeedResult) -> bool| rs.iter().filter(|r| f(r)).count();
    let n = rs.len();
    let mut fails = Vec::new();
    let mut note = |ok: bool, what: String| {
        if !ok {
            fails.push(what);
        }
    };
    let a = count(&|r| r.s1_cer < 10.0);
    note(a == n, format!("(a) stage-1 CER < 10% in {a}/{n}"));
    let b1 = count(&|r| r.replace_ber < 20.0 && r.joint_ber < 20.0 && r.freeze_ber < 20.0);
    note(b1 == n, format!("(b) all stage-2 BER < 20% in {b1}/{n}"));
    let b2 = count(&|r| r.freeze_ber <= r.replace_ber);
    note(b2 >= 4, format!("(b) freeze ≤ replace in {b2}/{n}"));
    let c = count(&|r| r.joint_cer < r.s1_cer);
    note(c >= 4, format!("(c) joint CER < stage-1 CER in {c}/{n}"));
    let d = count(&|r| r.c2b_wer < r.pt_wer);
    note(d >= 4, format!("(d) C2B WER < pt-ctc+ce WER in {d}/{n}"));
    let e = count(&|r| r.pt_wer <= r.ce_wer);
    note(e >= 4, format!("(e) pt-ctc+ce ≤ ce in {e}/{n}"));
    note(elapsed < BUDGET_S, format!("runtime {elapsed:.0}s over {BUDGET_S:.0}s"));
    let summary = format!(
        "(a) {a}/{n} (b) BER<20 {b1}/{n}, freeze≤replace {b2}/{n} (c) {c}/{n} (d) {d}/{n} (e) {e}/{n}; {elapsed:.0}s on {workers} worker(s)"
    );
    if fails.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", fails.join("; ")))
    }
}

// 8 -------------------------------------------------------------------------

fn small_task() -> Task {
    let data = gen_synthetic(&SyntheticTaskSpec {
        seed: 8,
        letters: 6,
        lexicon: 12,
        max_word_len: 4,
        max_words: 2,
        train: 120,
        dev: 20,
        ..Default::default()
    })
    .unwrap();
    let vocab = CharVocab::from_letters(data.letters.iter().copied()).unwrap();
    let bpe = BpeModel::learn_from_texts(data.train.iter().map(|u| u.transcript.as_str()), 15)
        .unwrap()
        .with_alphabet(sorted_letters(&vocab))
        .unwrap();
    let train = Corpus::new(&data.train, &vocab, Some(&bpe)).unwrap();
    let dev = Corpus::new(&data.dev, &vocab, Some(&bpe)).unwrap();
    Task {
        data,
        vocab,
        bpe,
        train,
        dev,
    }
}

fn small_config(stage: &str) -> TrainConfig {
    TrainConfig::from_toml(&format!(
        "seed = 21\n\
         [model]\nhidden = 8\nlayers = 4\nbpe_layers = 1\ndropout = 0.2\nemb_dim = 4\ndec_hidden = 8\natt_dim = 4\n\
         [optimizer]\nlr = 0.01\n[data]\nframe_budget = 300\n[stage]\n{stage}\n"
    ))
    .unwrap()
}

fn determinism() -> Outcome {
    let task = small_task();
    let fresh = |stage: &str, init: Option<&Checkpoint>| {
        Trainer::new(small_config(stage), task.vocab.clone(), Some(task.bpe.clone()), init, &task.train).map_err(|e| e.to_string())
    };
    let run = |t: &mut Trainer, until: Option<u64>| t.run(&task.train, Some(&task.dev), until).map_err(|e| e.to_string());

    // identical runs
    let stage1 = "stage = 1\nepochs = 2.0";
    let mut a = fresh(stage1, None)?;
    run(&mut a, None)?;
    let mut b = fresh(stage1, None)?;
    run(&mut b, None)?;
    check(a.log == b.log && a.metrics == b.metrics, || "two identical stage-1 runs logged differently".into())?;
    let s1 = a.checkpoint();
    let bytes = |c: &Checkpoint| c.to_bytes().map_err(|e| e.to_string());
    check(bytes(&s1)? == bytes(&b.checkpoint())?, || "two identical runs saved different checkpoints".into())?;

    // interrupted runs, resumed from serialized checkpoints, in every stage
    let mut resumed_stages = 0;
    let s2 = "stage = 2\nmethod = \"freeze\"\ninit = \"-\"\nepochs = 2.0";
    let s3 = "stage = 3\nloss = \"ce+ctc\"\ninit = \"-\"\nepochs = 1.5";
    let mut s2_ck = None;
    for (stage, init) in [(stage1, None), (s2, Some(&s1))] {
        let mut full = fresh(stage, init)?;
        run(&mut full, None)?;
        let total = full.plan.total_steps;
        for cut in [1, total / 3, total / 2 + 1, total - 1] {
            let mut part = fresh(stage, init)?;
            run(&mut part, Some(cut))?;
            let ck = Checkpoint::from_bytes(&bytes(&part.checkpoint())?).map_err(|e| e.to_string())?;
            let mut cont = Trainer::resume(&ck).map_err(|e| e.to_string())?;
            run(&mut cont, None)?;
            let joined: Vec<&String> = part.log.iter().chain(&cont.log).collect();
            check(joined == full.log.iter().collect::<Vec<_>>(), || {
                format!("{stage:?}: log after resume at {cut} diverges")
            })?;
            check(bytes(&cont.checkpoint())? == bytes(&full.checkpoint())?, || {
                format!("{stage:?}: checkpoint after resume at {cut} differs")
            })?;
        }
        resumed_stages += 1;
        if s2_ck.is_none() && init.is_some() {
            s2_ck = Some(full.checkpoint());
        }
    }
    {
        let s2c = s2_ck.as_ref().expect("stage-2 checkpoint");
        let mut full = fresh(s3, Some(s2c))?;
        run(&mut full, None)?;
        let cut = full.plan.total_steps / 2;
        let mut part = fresh(s3, Some(s2c))?;
        run(&mut part, Some(cut))?;
        let ck = Checkpoint::from_bytes(&bytes(&part.checkpoint())?).map_err(|e| e.to_string())?;
        let mut cont = Trainer::resume(&ck).map_err(|e| e.to_string())?;
        run(&mut cont, None)?;
        check(bytes(&cont.checkpoint())? == bytes(&full.checkpoint())?, || "stage 3: resume differs".into())?;
        resumed_stages += 1;
    }

    // freeze window: frozen parameters stay bit-identical until release
    let mut t = fresh(s2, Some(&s1))?;
    let frozen = t.plan.frozen.clone();
    check(!frozen.is_empty(), || "freeze stage froze nothing".into())?;
    let release = t
        .plan
        .events
        .iter()
        .find(|e| e.actions.iter().any(|a| matches!(a, Action::Unfreeze { .. })))
        .map(|e| e.step)
        .ok_or("no unfreeze event")?;
    let is_frozen = |n: &str| frozen.iter().any(|p| n.starts_with(p.as_str()));
    let snapshot = |s: &ParamStore| -> Vec<(String, Vec<f64>)> {
        s.iter()
            .filter(|p| p.trainable && is_frozen(&p.name))
            .map(|p| (p.name.clone(), p.value.data().to_vec()))
            .collect()
    };
    let before = snapshot(&t.store);
    let initial = snapshot(&s1.store);
    check(before == initial, || "frozen layers differ from the stage-1 weights".into())?;
    run(&mut t, Some(release))?;
    let same_bits = snapshot(&t.store)
        .iter()
        .zip(&before)
        .all(|(a, b)| a.0 == b.0 && a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    check(same_bits, || format!("frozen parameters moved during the first {release} steps"))?;
    run(&mut t, Some(release + 3))?;
    check(snapshot(&t.store) != before, || "parameters never moved after release".into())?;
    Ok(format!(
        "repeat runs bit-identical; resume exact in {resumed_stages} stages; {} tensors untouched for {release} frozen steps",
        before.len()
    ))
}

// 9 -------------------------------------------------------------------------

/// Greedy hard-attention decode that also reports each step's attend frame.
fn decode_with_cuts(r: &Recognizer, feats: &Tensor) -> c2b_core::Result<Vec<(usize, Option<usize>)>> {
    let dec = r.arch.decoder.as_ref().expect("decoder");
    let enc = r.encode(feats)?;
    let mem = dec.memory(r.store, &enc.out)?;
    let mut st = dec.initial_state(&mem, true);
    let mut out = Vec::new();
    for _ in 0..40 {
        let (lp, next) = dec.step(r.store, &mem, &st)?;
        let AttState::Hard { start } = next.att else { unreachable!() };
        let tok = argmax(&lp);
        out.push((tok, (start < mem.len()).then_some(start)));
        if tok == dec.eos() {
            break;
        }
        st = next.advance(tok);
    }
    Ok(out)
}

fn streaming(keep: &Mutex<Option<(Task, Checkpoint)>>) -> Outcome {
    let guard = keep.lock().unwrap();
    let (task, ck) = guard.as_ref().ok_or("no trained attention model (end-to-end run failed)")?;
    let r = Recognizer::new(ck).map_err(|e| e.to_string())?;
    let sub = r.arch.subsampling(None);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut replays, mut utts) = (0, 0);
    for u in task.data.dev.iter().take(20) {
        let full = decode_with_cuts(&r, &u.features).map_err(|e| e.to_string())?;
        let greedy = r.attention(&u.features, Search::Greedy, 40, None).map_err(|e| e.to_string())?.1;
        check(full.iter().map(|x| x.0).collect::<Vec<_>>() == greedy.tokens, || {
            format!("{}: replay decode differs from greedy", u.id)
        })?;
        for (l, &(_, cut)) in full.iter().enumerate() {
            let Some(j) = cut else { continue };
            let keep_frames = ((j + 1) * sub).min(u.features.rows());
            // the stream truncated right after the cut, then the same prefix with garbage after it
            let truncated = Tensor::matrix(keep_frames, u.features.cols(), u.features.data()[..keep_frames * u.features.cols()].to_vec())
                .map_err(|e| e.to_string())?;
            let mut noisy = u.features.clone();
            let cols = noisy.cols();
            for x in &mut noisy.data_mut()[keep_frames * cols..] {
                *x = rng.random_range(-5.0..5.0);
            }
            for variant in [&truncated, &noisy] {
                let again = decode_with_cuts(&r, variant).map_err(|e| e.to_string())?;
                check(again.len() > l && again[..=l] == full[..=l], || {
                    format!("{}: step {l} (cut at frame {j}) changed after altering later input", u.id)
                })?;
                replays += 1;
            }
        }
        utts += 1;
    }
    Ok(format!("{utts} utterances, {replays} truncated/perturbed replays, all emitted prefixes unchanged"))
}

fn main() {
    // `cargo test -- --list` and filters from the harness-less runner
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let keep: Mutex<Option<(Task, Checkpoint)>> = Mutex::new(None);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 ctc oracle equivalence", Box::new(ctc_oracle)),
        ("2 gradient suites", Box::new(gradients)),
        ("3 mocha invariants", Box::new(mocha_invariants)),
        ("4 bpe oracle and round trip", Box::new(bpe_oracle)),
        ("5 beam search", Box::new(beam_search)),
        ("6 edit distance", Box::new(edit_distance_oracle)),
        ("7 end-to-end directional reproduction", Box::new(|| end_to_end(&keep))),
        ("8 determinism and checkpointing", Box::new(determinism)),
        ("9 streaming property", Box::new(|| streaming(&keep))),
    ];
    // bare arguments act as name filters, like the default harness
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {name}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.1}s) {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
