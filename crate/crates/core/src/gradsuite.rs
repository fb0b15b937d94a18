//! Named finite-difference suites over every differentiable building block,
//! shared by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{chunk_weights_var, expected_alignment_var};
use crate::ctc::ctc_loss_var;
use crate::decoder::AttentionDecoder;
use crate::error::{Error, Result};
use crate::layers::{maxout_var, maxpool_time_seq, BatchNormLayer, Mode, ProjectionHead, SeqVar, UlstmLayer};
use crate::numerics::{finite_diff_check, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::pipeline::{batch_loss, build_stage, Corpus, Example, TrainConfig};

/// Relative error every coordinate should meet...
pub const TOL: f64 = 1e-4;
/// ...on at least this fraction of coordinates...
pub const FRAC: f64 = 0.95;
/// ...with no coordinate worse than this.
pub const MAX: f64 = 1e-3;

pub const SUITES: &[&str] = &[
    "ulstm",
    "pooling",
    "projection",
    "maxout",
    "batchnorm",
    "ctc",
    "ce",
    "mocha",
    "stage3",
];

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let v = g.value(out);
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), v.rows(), v.cols(), 1.0);
    let w = g.input(w);
    let m = g.mul(out, w)?;
    Ok(g.sum_all(m))
}

/// A `(T·B, D)` time-major parameter named `x` with ragged lengths.
fn seq_param(g: &mut Graph, s: &ParamStore, time: usize, lengths: &[usize]) -> Result<SeqVar> {
    Ok(SeqVar {
        var: g.param(s, "x")?,
        time,
        batch: lengths.len(),
        lengths: lengths.to_vec(),
        subsampling: 1,
    })
}

fn ulstm() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = UlstmLayer::new("l", 3, 4);
    let mut s = ParamStore::new();
    layer.init(&mut s, &mut rng)?;
    scale_all(&mut s, 10.0)?;
    s.insert("x", random(&mut rng, 5 * 2, 3, 1.0), true)?;
    finite_diff_check(&s, None, |s, g| {
        let x = seq_param(g, s, 5, &[5, 3])?;
        let (y, h, _) = layer.forward_seq(g, s, &x, None)?;
        let a = probe(g, y.var, 2)?;
        let b = probe(g, h, 3)?;
        g.add(a, b)
    })
}

fn pooling() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParamStore::new();
    s.insert("x", random(&mut rng, 7 * 2, 3, 1.0), true)?;
    finite_diff_check(&s, None, |s, g| {
        let x = seq_param(g, s, 7, &[7, 4])?;
        let y = maxpool_time_seq(g, &x, 2)?;
        probe(g, y.var, 5)
    })
}

fn projection() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let head = ProjectionHead::new("p", 4, 5);
    let mut s = ParamStore::new();
    head.init(&mut s, &mut rng)?;
    scale_all(&mut s, 10.0)?;
    s.insert("x", random(&mut rng, 6, 4, 1.0), true)?;
    finite_diff_check(&s, None, |s, g| {
        let x = g.param(s, "x")?;
        let y = head.forward(g, s, x)?;
        probe(g, y, 7)
    })
}

fn maxout() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = ParamStore::new();
    s.insert("x", random(&mut rng, 4, 6, 1.0), true)?;
    finite_diff_check(&s, None, |s, g| {
        let x = g.param(s, "x")?;
        let y = maxout_var(g, x, 2)?;
        probe(g, y, 9)
    })
}

fn batchnorm() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let bn = BatchNormLayer::new("bn", 3);
    let mut s = ParamStore::new();
    bn.init(&mut s)?;
    s.set_value(&bn.gamma(), random(&mut rng, 1, 3, 2.0).reshape(&[3])?)?;
    s.set_value(&bn.beta(), random(&mut rng, 1, 3, 1.0).reshape(&[3])?)?;
    s.insert("x", random(&mut rng, 4 * 2, 3, 1.0), true)?;
    finite_diff_check(&s, None, |s, g| {
        let x = seq_param(g, s, 4, &[4, 2])?;
        let (y, _) = bn.forward_seq(g, s, &x, Mode::Train)?;
        probe(g, y.var, 11)
    })
}

fn ctc() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut s = ParamStore::new();
    s.insert("x", random(&mut rng, 6 * 2, 4, 2.0), true)?;
    finite_diff_check(&s, None, |s, g| {
        let x = g.param(s, "x")?;
        let lp = g.log_softmax(x)?;
        ctc_loss_var(g, lp, &[6, 4], &[Some(&[0, 2, 2]), Some(&[1])], 0.5)
    })
}

fn ce() -> Result<GradCheckReport> {
    let d = AttentionDecoder {
        vocab: 3,
        emb_dim: 3,
        hidden: 4,
        enc_dim: 3,
        att_dim: 4,
        chunk_width: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut s = ParamStore::new();
    d.init(&mut s, &mut rng)?;
    scale_all(&mut s, 10.0)?;
    soften_selection(&mut s)?;
    s.insert("x", random(&mut rng, 5 * 2, 3, 1.0), true)?;
    let targets: [&[usize]; 2] = [&[1, 2], &[0]];
    finite_diff_check(&s, Some(12), |s, g| {
        let x = seq_param(g, s, 5, &[5, 3])?;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        d.ce_loss(g, s, &x, &targets, Mode::Train, &mut rng, 0.5)
    })
}

fn mocha() -> Result<GradCheckReport> {
    let (t, b) = (6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut s = ParamStore::new();
    s.insert("p", random(&mut rng, t * b, 1, 2.0), true)?;
    let prev = Tensor::matrix(t * b, 1, (0..t * b).map(|_| rng.random_range(0.0..0.3)).collect())?;
    s.insert("prev", prev, true)?;
    s.insert("u", random(&mut rng, t * b, 1, 1.0), true)?;
    finite_diff_check(&s, None, |s, g| {
        let pl = g.param(s, "p")?;
        let p = g.sigmoid(pl);
        let prev = g.param(s, "prev")?;
        let alpha = expected_alignment_var(g, p, prev, b)?;
        let u = g.param(s, "u")?;
        let beta = chunk_weights_var(g, alpha, u, 3, b)?;
        let a = probe(g, alpha, 16)?;
        let c = probe(g, beta, 17)?;
        g.add(a, c)
    })
}

/// Encoder, both CTC and attention losses, end to end on a tiny model.
fn stage3() -> Result<GradCheckReport> {
    let cfg = TrainConfig::from_toml(
        "seed = 1\n\
         [model]\nhidden = 3\nbaseline_layers = 5\ndropout = 0.0\nemb_dim = 2\ndec_hidden = 3\natt_dim = 3\n\
         [stage]\nstage = 3\nloss = \"ce+ctc\"\n",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let example = |id: &str, frames: usize, chars: Vec<usize>, bpe: Vec<usize>, rng: &mut ChaCha8Rng| Example {
        id: id.into(),
        text: String::new(),
        features: random(rng, frames, 2, 1.0),
        chars,
        bpe: Some(bpe),
    };
    let corpus = Corpus {
        examples: vec![
            example("a", 40, vec![0, 1], vec![2, 0], &mut rng),
            example("b", 29, vec![1], vec![1], &mut rng),
        ],
        input_dim: 2,
    };
    let (arch, plan) = build_stage(&cfg, 1, 2, 3, Some(3), None)?;
    let mut s = ParamStore::new();
    arch.init_missing(&mut s, &mut rng)?;
    scale_all(&mut s, 10.0)?;
    soften_selection(&mut s)?;
    let weights = plan.weights_at(0);
    finite_diff_check(&s, Some(6), |s, g| {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let out = batch_loss(g, &arch, s, &corpus, &[0, 1], weights, Mode::Train, &|_| false, &mut rng)?;
        out.total.ok_or_else(|| Error::contract("stage-3 probe scored nothing"))
    })
}

fn scale_all(s: &mut ParamStore, k: f64) -> Result<()> {
    let names: Vec<String> = s.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for n in names {
        let t = s.value(&n)?.map(|v| v * k);
        s.set_value(&n, t)?;
    }
    Ok(())
}

/// Keeps selection probabilities off saturation so every alignment path carries gradient.
fn soften_selection(s: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = s.names().map(String::from).collect();
    for n in names {
        if n.ends_with("mono.r") {
            s.set_value(&n, Tensor::scalar(0.3))?;
        } else if n.ends_with("mono.g") {
            s.set_value(&n, Tensor::scalar(1.0))?;
        }
    }
    Ok(())
}

/// Runs one suite by name.
pub fn run_suite(name: &str) -> Result<GradCheckReport> {
    match name {
        "ulstm" => ulstm(),
        "pooling" => pooling(),
        "projection" => projection(),
        "maxout" => maxout(),
        "batchnorm" => batchnorm(),
        "ctc" => ctc(),
        "ce" => ce(),
        "mocha" => mocha(),
        "stage3" => stage3(),
        _ => Err(Error::Config(format!("unknown gradcheck module {name:?}; expected one of {}", SUITES.join(", ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for name in SUITES {
            let r = run_suite(name).unwrap();
            assert!(
                r.passes(TOL, FRAC, MAX),
                "{name}: {} coords, {:.3} within tol, max rel {:e}",
                r.entries.len(),
                r.fraction_within(TOL),
                r.max_rel_error()
            );
        }
        assert!(run_suite("nope").is_err());
    }
}
