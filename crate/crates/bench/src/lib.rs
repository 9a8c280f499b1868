//! Seeded fixtures shared by the kernel benchmarks.

use fairlora_core::fid::EmbeddingSet;
use fairlora_core::{EvalBundle, Matrix, MlpClassifier, SeededRng};

pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::new(rows, cols, data).expect("shape")
}

/// Feature batch with labels and group ids cycling over `classes` and `groups`.
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub indices: Vec<usize>,
}

pub fn batch(n: usize, dim: usize, classes: usize, groups: usize, seed: u64) -> Batch {
    let mut rng = SeededRng::new(seed);
    Batch {
        features: gaussian(&mut rng, n, dim),
        labels: (0..n).map(|i| i % classes).collect(),
        groups: (0..n).map(|i| (i / classes) % groups).collect(),
        indices: (0..n).collect(),
    }
}

/// MLP with the given widths; adapters of `rank` on every hidden layer if set.
pub fn model(widths: &[usize], rank: Option<usize>, seed: u64) -> MlpClassifier {
    let mut rng = SeededRng::new(seed);
    let mut m = MlpClassifier::new(widths, &mut rng).expect("widths");
    if let Some(r) = rank {
        let hidden = m.hidden_layers();
        m.attach_adapters(&hidden, r, &mut rng, 0.01, 1.0).expect("rank");
    }
    m
}

pub fn bundle(n: usize, classes: usize, groups: usize, seed: u64) -> EvalBundle {
    let mut rng = SeededRng::new(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    let preds = labels
        .iter()
        .map(|&y| if rng.uniform() < 0.8 { y } else { rng.below(classes) })
        .collect();
    let sens = (0..n).map(|_| rng.below(groups)).collect();
    EvalBundle::new(preds, labels)
        .and_then(|b| b.with_num_classes(classes))
        .and_then(|b| b.with_sensitive(sens))
        .expect("bundle")
}

pub fn embeddings(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
    EmbeddingSet::new(gaussian(&mut SeededRng::new(seed), n, dim), "bench").expect("embeddings")
}
