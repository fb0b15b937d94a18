//! Character vocabulary and byte-pair-encoding subword units.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const SPACE: &str = "<space>";
/// Appended to the last symbol of every word.
pub const END_OF_WORD: &str = "</w>";

/// Ordered character inventory plus the reserved unknown, end-of-sentence
/// and word-space symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl CharVocab {
    /// Letters in the given order, then `<space>`, `<unk>`, `<eos>`.
    pub fn from_letters(letters: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut symbols: Vec<String> = letters
            .into_iter()
            .map(|c| c.to_uppercase().to_string())
            .collect();
        symbols.extend([SPACE, UNK, EOS].map(String::from));
        Self::from_symbols(symbols)
    }

    /// The 29-symbol English inventory: A–Z, space, unknown, eos.
    pub fn english() -> Self {
        Self::from_letters('A'..='Z').expect("static inventory is valid")
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            let single_char = s.chars().count() == 1;
            let reserved = [SPACE, UNK, EOS].contains(&s.as_str());
            if !single_char && !reserved {
                return Err(Error::contract(format!("vocabulary symbol {s:?} is not a single character")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        for r in [SPACE, UNK, EOS] {
            if !index.contains_key(r) {
                return Err(Error::contract(format!("vocabulary lacks reserved symbol {r}")));
            }
        }
        Ok(CharVocab { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn space(&self) -> usize {
        self.index[SPACE]
    }

    /// Ordinary (non-reserved) characters.
    pub fn letters(&self) -> impl Iterator<Item = char> + '_ {
        self.symbols
            .iter()
            .filter(|s| s.chars().count() == 1)
            .filter_map(|s| s.chars().next())
    }

    /// Upper-cases `text`; whitespace becomes the space symbol, anything unknown `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .flat_map(char::to_uppercase)
            .map(|c| {
                if c == ' ' {
                    self.space()
                } else {
                    self.index.get(c.to_string().as_str()).copied().unwrap_or(self.unk())
                }
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode); `<eos>` is dropped and `<unk>` prints as `?`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| match self.symbols.get(i).map(String::as_str) {
                Some(SPACE) => Some(' '),
                Some(UNK) => Some('?'),
                Some(EOS) | None => None,
                Some(s) => s.chars().next(),
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols {
            s.push_str(sym);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_symbols(text.lines().map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Letters of `vocab` in sorted order: the base alphabet BPE models use in the pipeline.
pub fn sorted_letters(vocab: &CharVocab) -> Vec<char> {
    let mut a: Vec<char> = vocab.letters().collect();
    a.sort_unstable();
    a
}

/// Ordered merge list and the subword inventory it induces over a base alphabet.
///
/// Token ids: `<unk>`, `<unk></w>`, then every base character `c` followed by
/// `c</w>` in alphabet order, then each distinct merge result in merge order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl BpeModel {
    pub fn new(alphabet: impl IntoIterator<Item = char>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut tokens = vec![UNK.to_string(), format!("{UNK}{END_OF_WORD}")];
        for c in alphabet {
            tokens.push(c.to_string());
            tokens.push(format!("{c}{END_OF_WORD}"));
        }
        let mut ranks = HashMap::new();
        for (r, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), r).is_some() {
                return Err(Error::contract(format!("duplicate merge {} {}", m.0, m.1)));
            }
            tokens.push(format!("{}{}", m.0, m.1));
        }
        let mut index = HashMap::new();
        let mut unique = Vec::with_capacity(tokens.len());
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), unique.len());
                unique.push(t);
            }
        }
        Ok(BpeModel {
            merges,
            tokens: unique,
            index,
            ranks,
        })
    }

    /// Same merges over a different base alphabet (token ids are reassigned).
    pub fn with_alphabet(&self, alphabet: impl IntoIterator<Item = char>) -> Result<Self> {
        Self::new(alphabet, self.merges.clone())
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Number of subword tokens (CTC heads add a blank, decoders an eos).
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    /// Subword strings for one word, merges applied in learned order.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut symbols = split_word(word);
        for (l, r) in &self.merges {
            if symbols.len() < 2 {
                break;
            }
            apply_merge(&mut symbols, l, r);
        }
        symbols
    }

    /// Token ids for a whitespace-separated word sequence. Characters outside
    /// the base alphabet become `<unk>` (or `<unk></w>` at a word end).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let upper = word.to_uppercase();
            for sym in self.encode_word(&upper) {
                let id = match self.index.get(&sym) {
                    Some(&i) => i,
                    None if sym.ends_with(END_OF_WORD) => 1,
                    None => 0,
                };
                out.push(id);
            }
        }
        out
    }

    /// Concatenates subwords and splits words at end-of-word markers.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for &i in ids {
            let tok = self
                .tokens
                .get(i)
                .ok_or_else(|| Error::contract(format!("unknown BPE token id {i}")))?;
            let (body, end) = match tok.strip_suffix(END_OF_WORD) {
                Some(b) => (b, true),
                None => (tok.as_str(), false),
            };
            cur.push_str(if body == UNK { "?" } else { body });
            if end {
                words.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        Ok(words.join(" "))
    }

    /// Learns up to `num_merges` merges from a word-frequency table.
    ///
    /// Each round merges the most frequent adjacent pair, ties going to the
    /// lexicographically smallest `(left, right)`. Learning stops early once no
    /// pair occurs at least twice.
    pub fn learn(corpus: &BTreeMap<String, usize>, num_merges: usize) -> Result<Self> {
        if corpus.is_empty() || corpus.values().all(|&f| f == 0) {
            return Err(Error::contract("BPE corpus is empty"));
        }
        let mut alphabet: Vec<char> = corpus.keys().flat_map(|w| w.chars()).collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut words: Vec<(Vec<String>, usize)> = corpus
            .iter()
            .filter(|(w, &f)| f > 0 && !w.is_empty())
            .map(|(w, &f)| (split_word(w), f))
            .collect();
        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, f) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += f;
                }
            }
            // BTreeMap iterates in ascending pair order, so the first maximum wins ties.
            let mut best: Option<((&str, &str), usize)> = None;
            for (&p, &c) in &counts {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((p, c));
                }
            }
            let Some(((l, r), c)) = best else { break };
            if c < 2 {
                break;
            }
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in words.iter_mut() {
                apply_merge(syms, &l, &r);
            }
            merges.push((l, r));
        }
        Self::new(alphabet, merges)
    }

    /// Learns from whitespace-separated transcripts.
    pub fn learn_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Result<Self> {
        let mut freq = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *freq.entry(w.to_uppercase()).or_insert(0) += 1;
            }
        }
        Self::learn(&freq, num_merges)
    }

    /// `bpe-v1 <n>` header, then one `left right` merge per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("bpe-v1 {}\n", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output over the given base alphabet.
    pub fn from_text(text: &str, alphabet: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::contract("empty BPE model"))?;
        let n: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::contract(format!("bad BPE header {header:?}")))?;
        let mut merges = Vec::with_capacity(n);
        for line in lines {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::contract(format!("bad merge line {line:?}"))),
            }
        }
        if merges.len() != n {
            return Err(Error::contract(format!(
                "header declares {n} merges, found {}",
                merges.len()
            )));
        }
        Self::new(alphabet, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads a model whose base alphabet is the letters of `vocab`, sorted.
    pub fn load(path: &Path, vocab: &CharVocab) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, sorted_letters(vocab)).map_err(|e| Error::format(path, e.to_string()))
    }
}
