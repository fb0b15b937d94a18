use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Desk-scale stand-in for a speech corpus: every symbol (letters and the
/// word space) owns a random prototype vector, repeated for a fixed number
/// of frames and blurred by Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub letters: usize,
    pub lexicon: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub frames_per_char: usize,
    pub feat_dim: usize,
    pub noise: f64,
    pub train: usize,
    pub dev: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            letters: 12,
            lexicon: 50,
            min_word_len: 2,
            max_word_len: 6,
            min_words: 1,
            max_words: 4,
            frames_per_char: 4,
            feat_dim: 8,
            noise: 0.3,
            train: 2000,
            dev: 200,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub letters: Vec<char>,
    pub lexicon: Vec<String>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
}

pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    if !(1..=26).contains(&spec.letters)
        || spec.min_word_len == 0
        || spec.min_word_len > spec.max_word_len
        || spec.min_words == 0
        || spec.min_words > spec.max_words
        || spec.frames_per_char == 0
        || spec.feat_dim == 0
        || spec.noise < 0.0
    {
        return Err(Error::Config(format!("invalid synthetic task spec {spec:?}")));
    }
    let possible: f64 = (spec.min_word_len..=spec.max_word_len)
        .map(|l| (spec.letters as f64).powi(l as i32))
        .sum();
    if (spec.lexicon as f64) > possible {
        return Err(Error::Config("lexicon larger than the number of possible words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let letters: Vec<char> = ('A'..='Z').take(spec.letters).collect();
    // one prototype per letter, the last row for the word space
    let protos: Vec<Vec<f64>> = (0..=spec.letters)
        .map(|_| (0..spec.feat_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut seen = BTreeSet::new();
    let mut lexicon = Vec::with_capacity(spec.lexicon);
    while lexicon.len() < spec.lexicon {
        let len = rng.random_range(spec.min_word_len..=spec.max_word_len);
        let w: String = (0..len).map(|_| letters[rng.random_range(0..spec.letters)]).collect();
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Utterance>> {
        (0..n)
            .map(|i| {
                let nw = rng.random_range(spec.min_words..=spec.max_words);
                let words: Vec<&str> = (0..nw).map(|_| lexicon[rng.random_range(0..lexicon.len())].as_str()).collect();
                let transcript = words.join(" ");
                let mut data = Vec::with_capacity(transcript.len() * spec.frames_per_char * spec.feat_dim);
                for c in transcript.chars() {
                    let p = match c {
                        ' ' => &protos[spec.letters],
                        _ => &protos[(c as u8 - b'A') as usize],
                    };
                    for _ in 0..spec.frames_per_char {
                        for &v in p {
                            let n: f64 = if spec.noise > 0.0 { rng.sample::<f64, _>(StandardNormal) * spec.noise } else { 0.0 };
                            data.push(v + n);
                        }
                    }
                }
                let frames = transcript.chars().count() * spec.frames_per_char;
                Ok(Utterance {
                    id: format!("{prefix}{i:05}"),
                    features: Tensor::matrix(frames, spec.feat_dim, data)?,
                    transcript,
                })
            })
            .collect()
    };
    let train = make("train", spec.train, &mut rng)?;
    let dev = make("dev", spec.dev, &mut rng)?;
    Ok(SyntheticData {
        letters,
        lexicon,
        train,
        dev,
    })
}
