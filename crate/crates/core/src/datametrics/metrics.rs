use crate::error::{Error, Result};
use crate::tokenizer::BpeModel;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Granularity of an error rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    /// Characters including spaces (CER).
    Char,
    /// BPE tokens (BER).
    Bpe,
    /// Whitespace-separated words (WER).
    Word,
}

impl std::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Unit::Char),
            "bpe" => Ok(Unit::Bpe),
            "word" => Ok(Unit::Word),
            _ => Err(Error::Config(format!("unknown unit {s:?}; expected char, bpe or word"))),
        }
    }
}

impl Unit {
    pub fn label(self) -> &'static str {
        match self {
            Unit::Char => "CER",
            Unit::Bpe => "BER",
            Unit::Word => "WER",
        }
    }
}

/// Splits `text` into the comparison units; words are joined by single spaces for `Char`.
pub fn unit_tokens(text: &str, unit: Unit, bpe: Option<&BpeModel>) -> Result<Vec<String>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    Ok(match unit {
        Unit::Char => words.join(" ").chars().map(String::from).collect(),
        Unit::Word => words.into_iter().map(String::from).collect(),
        Unit::Bpe => {
            let m = bpe.ok_or_else(|| Error::Config("BPE error rate needs a BPE model".into()))?;
            m.encode(text).into_iter().map(|i| i.to_string()).collect()
        }
    })
}

/// `100 · Σ edit distance / Σ reference length` over pre-tokenized sequences.
pub fn error_rate_ids<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::contract("references have zero total length"));
    }
    let errs: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(100.0 * errs as f64 / total as f64)
}

pub fn error_rate(refs: &[&str], hyps: &[&str], unit: Unit, bpe: Option<&BpeModel>) -> Result<f64> {
    let tok = |xs: &[&str]| -> Result<Vec<Vec<String>>> { xs.iter().map(|t| unit_tokens(t, unit, bpe)).collect() };
    error_rate_ids(&tok(refs)?, &tok(hyps)?)
}
