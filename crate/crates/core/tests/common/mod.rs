//! Independent oracles and random instance generators shared by the
//! integration tests. Nothing here calls the library's own forward pass,
//! loss or metric code.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use fairlora_core::data;

use fairlora_core::model::LayerWeight;
use fairlora_core::{Matrix, MlpClassifier, Mode, SeededRng};

pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect()).unwrap()
}

/// Effective dense weights and biases, assembled with plain loops.
pub fn oracle_layers(model: &MlpClassifier) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
    model
        .layers()
        .iter()
        .map(|layer| {
            let w = match &layer.weight {
                LayerWeight::Dense(m) => (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
                LayerWeight::LowRank(ad) => {
                    let (base, a, b, s) = (ad.base(), ad.a(), ad.b(), ad.scale());
                    let mut w = vec![vec![0.0; base.cols()]; base.rows()];
                    for (i, row) in w.iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            let mut ab = 0.0;
                            for r in 0..a.cols() {
                                ab += a[(i, r)] * b[(r, j)];
                            }
                            *v = base[(i, j)] + s * ab;
                        }
                    }
                    w
                }
            };
            (w, layer.bias.as_slice().to_vec())
        })
        .collect()
}

pub fn oracle_logits(layers: &[(Vec<Vec<f64>>, Vec<f64>)], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut z = b.clone();
        for (i, hi) in h.iter().enumerate() {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += hi * w[i][j];
            }
        }
        if l + 1 < layers.len() {
            for v in &mut z {
                *v = v.max(0.0);
            }
        }
        h = z;
    }
    h
}

pub fn oracle_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// A gradient-check problem: model, data rows, group ids and a batch.
#[derive(Clone)]
pub struct GradInstance {
    pub model: MlpClassifier,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub batch: Vec<usize>,
    pub lambda: f64,
}

/// `J = L + λ·Σ_g (L_g − mean_g L_g)²` over the batch, mean recomputed from
/// the current parameters.
pub fn oracle_objective(model: &MlpClassifier, inst: &GradInstance) -> f64 {
    let layers = oracle_layers(model);
    let mut total = 0.0;
    let mut per_group: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &i in &inst.batch {
        let loss = oracle_ce(&oracle_logits(&layers, inst.features.row(i)), inst.labels[i]);
        total += loss;
        let e = per_group.entry(inst.groups[i]).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
    }
    let overall = total / inst.batch.len() as f64;
    let lg: Vec<f64> = per_group.values().map(|(s, n)| s / *n as f64).collect();
    let mean = lg.iter().sum::<f64>() / lg.len() as f64;
    overall + inst.lambda * lg.iter().map(|l| (l - mean).powi(2)).sum::<f64>()
}

/// Smallest `|pre-activation|` of any hidden unit for any batch row.
pub fn oracle_kink_margin(model: &MlpClassifier, inst: &GradInstance) -> f64 {
    let layers = oracle_layers(model);
    let mut margin = f64::INFINITY;
    for &r in &inst.batch {
        let mut h = inst.features.row(r).to_vec();
        for (w, b) in &layers[..layers.len() - 1] {
            let mut z = b.clone();
            for (i, hi) in h.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += hi * w[i][j];
                }
            }
            for v in &z {
                margin = margin.min(v.abs());
            }
            h = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

pub const KINK_MARGIN: f64 = 1e-3;

/// Random 2-hidden-layer instance (widths ≤ 8, batch ≤ 16, 2–4 groups),
/// resampled until no hidden pre-activation lies within `KINK_MARGIN` of 0.
pub fn random_instance(rng: &mut SeededRng, mode: Mode, lambda: f64) -> GradInstance {
    loop {
        let d = 2 + rng.below(5);
        let h1 = 2 + rng.below(7);
        let h2 = 2 + rng.below(7);
        let classes = 2 + rng.below(3);
        let mut model = MlpClassifier::new(&[d, h1, h2, classes], rng).unwrap();
        if mode == Mode::Lora {
            let hidden = model.hidden_layers();
            let rank = 1 + rng.below(3.min(d.min(h1)).min(h1.min(h2)));
            let scale = [0.5, 1.0, 2.0][rng.below(3)];
            model.attach_adapters(&hidden, rank, rng, 0.5, scale).unwrap();
            for l in hidden {
                let ad = model.adapter_mut(l).unwrap();
                let (a, b) = (ad.a().shape(), ad.b().shape());
                let a = gaussian(rng, a.0, a.1, 0.5);
                let b = gaussian(rng, b.0, b.1, 0.5);
                ad.set_factors(a, b).unwrap();
            }
        }
        let num_groups = 2 + rng.below(3);
        let m = (num_groups + 2 + rng.below(16 - num_groups - 1)).min(16);
        let n = m + rng.below(5);
        let features = gaussian(rng, n, d, 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let mut groups: Vec<usize> = (0..n).map(|_| rng.below(num_groups)).collect();
        let mut rows: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut rows);
        let batch: Vec<usize> = rows[..m].to_vec();
        for (g, &r) in batch.iter().take(num_groups).enumerate() {
            groups[r] = g;
        }
        let inst = GradInstance {
            model,
            features,
            labels,
            groups,
            batch,
            lambda,
        };
        if oracle_kink_margin(&inst.model, &inst) > KINK_MARGIN {
            return inst;
        }
    }
}

/// Relative error with a floor on the denominator for near-zero entries.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;

/// Central difference of `oracle_objective` for every element of every
/// trainable tensor, keyed like `BatchGradients::grads`.
pub fn finite_difference(inst: &GradInstance) -> BTreeMap<fairlora_core::ParamId, Vec<f64>> {
    let mut out = BTreeMap::new();
    for id in inst.model.trainable_ids() {
        let len = inst.model.param(id).unwrap().as_slice().len();
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let mut plus = inst.model.clone();
            plus.param_mut(id).unwrap().as_mut_slice()[k] += FD_STEP;
            let mut minus = inst.model.clone();
            minus.param_mut(id).unwrap().as_mut_slice()[k] -= FD_STEP;
            g.push((oracle_objective(&plus, inst) - oracle_objective(&minus, inst)) / (2.0 * FD_STEP));
        }
        out.insert(id, g);
    }
    out
}

/// Brute-force confusion-matrix metrics.
pub struct OracleMetrics {
    pub accuracy: f64,
    pub f1: Vec<f64>,
    pub recall: Vec<f64>,
    /// `(positive class, group)` → TPR within the group, if defined.
    pub tpr_in: BTreeMap<(usize, usize), Option<f64>>,
    /// `(positive class, group)` → TPR outside the group, if defined.
    pub tpr_out: BTreeMap<(usize, usize), Option<f64>>,
}

pub fn oracle_metrics(preds: &[usize], labels: &[usize], sensitive: &[usize], classes: usize) -> OracleMetrics {
    let mut conf = vec![vec![0usize; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        conf[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| conf[c][c]).sum();
    let mut f1 = Vec::new();
    let mut recall = Vec::new();
    for c in 0..classes {
        let tp = conf[c][c];
        let row: usize = conf[c].iter().sum();
        let col: usize = (0..classes).map(|r| conf[r][c]).sum();
        let r = if row > 0 { tp as f64 / row as f64 } else { 0.0 };
        let p = if col > 0 { tp as f64 / col as f64 } else { 0.0 };
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let groups: std::collections::BTreeSet<usize> = sensitive.iter().copied().collect();
    let rate = |sel: &dyn Fn(usize) -> bool, c: usize| {
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| sel(i) && labels[i] == c).collect();
        (!pos.is_empty()).then(|| pos.iter().filter(|&&i| preds[i] == c).count() as f64 / pos.len() as f64)
    };
    let mut tpr_in = BTreeMap::new();
    let mut tpr_out = BTreeMap::new();
    for c in 0..classes {
        for &g in &groups {
            tpr_in.insert((c, g), rate(&|i| sensitive[i] == g, c));
            tpr_out.insert((c, g), rate(&|i| sensitive[i] != g, c));
        }
    }
    OracleMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        f1,
        recall,
        tpr_in,
        tpr_out,
    }
}

/// Random `(preds, labels, sensitive, classes)` with at most 200 samples,
/// 10 classes and 6 sensitive groups.
pub fn random_bundle(rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>, Vec<usize>, usize) {
    let n = 1 + rng.below(200);
    let classes = 2 + rng.below(9);
    let groups = 1 + rng.below(6);
    let skill = rng.uniform();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    let preds = labels
        .iter()
        .map(|&y| if rng.uniform() < skill { y } else { rng.below(classes) })
        .collect();
    let sensitive = (0..n).map(|_| rng.below(groups)).collect();
    (preds, labels, sensitive, classes)
}

/// Draws a random feasible coverage configuration.
pub fn coverage_config(rng: &mut SeededRng) -> (Vec<usize>, usize) {
    let groups = 1 + rng.below(6);
    let batch = groups + rng.below(30);
    let n = batch + rng.below(400);
    let full = n / batch;
    // every group gets at least `full` samples, the rest at random
    let mut ids: Vec<usize> = (0..groups).flat_map(|g| std::iter::repeat_n(g, full)).collect();
    while ids.len() < n {
        ids.push(rng.below(groups));
    }
    rng.shuffle(&mut ids);
    (ids, batch)
}

/// Every batch but the last of every epoch contains every group, and each
/// epoch is a permutation of all samples.
pub fn verify_coverage(ids: &[usize], batch: usize, epochs: usize, rng: &mut SeededRng) -> bool {
    let all: BTreeSet<usize> = ids.iter().copied().collect();
    for _ in 0..epochs {
        let batches = data::stratified_batches(ids, batch, true, rng).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        if seen != (0..ids.len()).collect::<Vec<_>>() {
            return false;
        }
        let full = ids.len() / batch;
        for b in &batches[..full] {
            let present: BTreeSet<usize> = b.iter().map(|&i| ids[i]).collect();
            if present != all || b.len() != batch {
                return false;
            }
        }
    }
    true
}

