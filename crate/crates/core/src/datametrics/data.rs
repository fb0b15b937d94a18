use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const FEAT_VERSION: u32 = 1;

/// One utterance: `(T, D)` features and its transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub transcript: String,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Writes a feature matrix as `FEAT`, version, `T`, `D`, then little-endian f32 rows.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (t, d) = (features.rows(), features.cols());
    let mut buf = Vec::with_capacity(16 + 4 * t * d);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEAT_MAGIC {
        return Err(Error::format(path, "missing FEAT header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEAT_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(Error::format(path, format!("empty feature matrix {t}×{d}")));
    }
    let payload = &bytes[16..];
    if payload.len() != 4 * t * d {
        return Err(Error::format(
            path,
            format!("payload of {} bytes, header declares {t}×{d} f32 values", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(t, d, data)
}

/// Reads a tab-separated `id, feature path, transcript` manifest. Relative
/// feature paths resolve against the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(feat), Some(transcript)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(manifest, format!("line {}: expected 3 tab-separated fields", n + 1)));
        };
        let fp = PathBuf::from(feat);
        let fp = if fp.is_absolute() { fp } else { base.join(fp) };
        let features = read_features(&fp)?;
        match dim {
            None => dim = Some(features.cols()),
            Some(d) if d != features.cols() => {
                return Err(Error::format(&fp, format!("feature dim {} differs from {d}", features.cols())));
            }
            _ => {}
        }
        out.push(Utterance {
            id: id.to_string(),
            features,
            transcript: transcript.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::format(manifest, "manifest lists no utterances"));
    }
    Ok(out)
}

/// Writes `feats/<id>.feat` files under `dir` and a manifest at `dir/<name>.tsv`.
pub fn write_dataset(dir: &Path, name: &str, utts: &[Utterance]) -> Result<PathBuf> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let manifest = dir.join(format!("{name}.tsv"));
    let mut text = Vec::new();
    for u in utts {
        let rel = format!("feats/{}.feat", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        writeln!(text, "{}\t{}\t{}", u.id, rel, u.transcript).expect("write to Vec");
    }
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Sorts by length and packs greedily so that `batch size × longest` stays
/// within `frame_budget`, then shuffles the batch order with `rng`.
/// Returns utterance indices per batch.
pub fn make_batches(lengths: &[usize], frame_budget: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &l)) = lengths.iter().enumerate().find(|(_, &l)| l > frame_budget) {
        return Err(Error::contract(format!(
            "utterance {i} has {l} frames, over the frame budget {frame_budget}"
        )));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        // sorted ascending, so the newcomer is the longest
        if !cur.is_empty() && (cur.len() + 1) * lengths[i] > frame_budget {
            batches.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, 1e3, -7.5]).unwrap();
        let utts = vec![
            Utterance {
                id: "u1".into(),
                features: t.clone(),
                transcript: "AB C".into(),
            },
            Utterance {
                id: "u2".into(),
                features: Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
                transcript: "D".into(),
            },
        ];
        let m = write_dataset(dir.path(), "train", &utts).unwrap();
        assert_eq!(load_dataset(&m).unwrap(), utts);

        let f = dir.path().join("feats/u1.feat");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_dataset(&m).unwrap_err().to_string();
        assert!(err.contains("u1.feat"), "{err}");
        fs::write(&f, b"NOPE").unwrap();
        assert!(read_features(&f).is_err());

        let empty = dir.path().join("empty.tsv");
        fs::write(&empty, "").unwrap();
        assert!(load_dataset(&empty).is_err());
        assert!(load_dataset(&dir.path().join("missing.tsv")).is_err());
    }

    #[test]
    fn batching_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = make_batches(&[400, 300, 350], 1000, &mut rng).unwrap();
        b.sort();
        assert_eq!(b, vec![vec![0], vec![1, 2]]);
        let b = make_batches(&[5, 3, 5, 2], 5, &mut rng).unwrap();
        assert!(b.iter().all(|x| x.len() == 1));
        assert!(make_batches(&[10], 9, &mut rng).is_err());
        let lens = [7, 3, 9, 9, 1, 4, 4, 8];
        let a = make_batches(&lens, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = make_batches(&lens, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, c);
    }

    proptest::proptest! {
        #[test]
        fn batching_never_splits_drops_or_overflows(lens in proptest::collection::vec(1usize..50, 1..40), extra in 0usize..100, seed in 0u64..1000) {
            let budget = lens.iter().max().unwrap() + extra;
            let b = make_batches(&lens, budget, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort();
            proptest::prop_assert_eq!(all, (0..lens.len()).collect::<Vec<_>>());
            for batch in &b {
                let m = batch.iter().map(|&i| lens[i]).max().unwrap();
                proptest::prop_assert!(m * batch.len() <= budget);
            }
        }
    }
}
