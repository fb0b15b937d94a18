//! Deterministic inputs for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c2b_core::layers::{SequenceBatch, UlstmLayer};
use c2b_core::numerics::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Row-normalized log probabilities, `(T, V+1)`.
pub fn log_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Tensor {
    let mut t = uniform(rng, frames, classes);
    for r in 0..frames {
        let row = &mut t.data_mut()[r * classes..(r + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= z);
    }
    t
}

/// A ULSTM layer with initialized weights and a padded batch to run it on.
pub fn lstm_fixture(batch: usize, frames: usize, input: usize, hidden: usize) -> (UlstmLayer, ParamStore, SequenceBatch) {
    let mut r = rng(1);
    let layer = UlstmLayer::new("l", input, hidden);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut r).expect("init");
    let seqs: Vec<Tensor> = (0..batch).map(|b| uniform(&mut r, frames - b, input)).collect();
    let refs: Vec<&Tensor> = seqs.iter().collect();
    (layer, store, SequenceBatch::from_sequences(&refs).expect("batch"))
}
