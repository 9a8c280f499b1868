//! Evaluation battery: accuracy, per-group F1 and recall extremes, ΔF1,
//! equalized-opportunity differences (pairwise, one-vs-all, max), sensitive
//! attribute leakage through a linear probe, and group-loss variance.
//!
//! Zero-denominator conventions: a precision, recall or F1 whose denominator
//! is zero is reported as 0 and the group is listed in
//! [`GroupScores::undefined`]. An EOD whose true-positive rate is undefined is
//! an error at the single-value level and is left out of the summary maps.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::model::MlpClassifier;

/// Predictions paired with ground truth and optional grouping attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBundle {
    predictions: Vec<usize>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    sensitive: Option<Vec<usize>>,
    num_classes: usize,
}

impl EvalBundle {
    /// Groups default to the labels; the class count to `max id + 1`.
    pub fn new(predictions: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(
                "EvalBundle",
                format!("{} predictions", predictions.len()),
                format!("{} labels", labels.len()),
            ));
        }
        if labels.is_empty() {
            return Err(Error::invalid("empty evaluation bundle"));
        }
        let num_classes = predictions.iter().chain(&labels).max().map_or(0, |m| m + 1);
        Ok(Self {
            groups: labels.clone(),
            predictions,
            labels,
            sensitive: None,
            num_classes,
        })
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        self.check_len(groups.len(), "groups")?;
        self.groups = groups;
        Ok(self)
    }

    pub fn with_sensitive(mut self, sensitive: Vec<usize>) -> Result<Self> {
        self.check_len(sensitive.len(), "sensitive ids")?;
        self.sensitive = Some(sensitive);
        Ok(self)
    }

    /// Declares the full class set, which may include classes absent from
    /// this bundle.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if num_classes < self.num_classes {
            return Err(Error::invalid(format!(
                "bundle contains class {} but only {num_classes} declared",
                self.num_classes - 1
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n != self.labels.len() {
            return Err(Error::shape(
                "EvalBundle",
                format!("{} labels", self.labels.len()),
                format!("{n} {what}"),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn sensitive(&self) -> Option<&[usize]> {
        self.sensitive.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn require_sensitive(&self) -> Result<&[usize]> {
        self.sensitive
            .as_deref()
            .ok_or_else(|| Error::invalid("bundle has no sensitive ids"))
    }

    /// Sensitive ids present, ascending.
    pub fn sensitive_groups(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.sensitive.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Positive classes for which EOD is computed: class 1 for binary tasks,
    /// every class otherwise.
    pub fn eod_positive_classes(&self) -> Vec<usize> {
        if self.num_classes == 2 {
            vec![1]
        } else {
            (0..self.num_classes).collect()
        }
    }
}

/// How samples are grouped for the per-group F1/recall maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// One-vs-rest per class label.
    ByClass,
    /// Macro scores within each `group` id.
    ByGroup,
    /// Macro scores within each sensitive id.
    BySensitive,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupScores {
    pub f1: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    /// Groups where some rate had a zero denominator and was set to 0.
    pub undefined: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassCounts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl ClassCounts {
    fn ratio(num: usize, den: usize) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }

    fn recall(&self) -> Option<f64> {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    fn precision(&self) -> Option<f64> {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    /// `2PR / (P + R)`; `None` when the class is neither predicted nor present.
    fn f1(&self) -> Option<f64> {
        if self.tp + self.fp + self.fn_ == 0 {
            return None;
        }
        let p = self.precision().unwrap_or(0.0);
        let r = self.recall().unwrap_or(0.0);
        Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
    }
}

fn class_counts(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<ClassCounts> {
    let mut counts = vec![ClassCounts::default(); num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            counts[y].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[y].fn_ += 1;
        }
    }
    counts
}

pub fn accuracy(bundle: &EvalBundle) -> f64 {
    let hits = bundle.predictions.iter().zip(&bundle.labels).filter(|(p, y)| p == y).count();
    hits as f64 / bundle.len() as f64
}

/// Per-group F1 and recall.
///
/// `ByClass` scores each class one-vs-rest over the declared class set.
/// `ByGroup`/`BySensitive` restrict to each group's samples and report macro
/// F1 over classes occurring there (as label or prediction) and macro recall
/// over classes with at least one actual sample there.
pub fn per_group_f1_recall(bundle: &EvalBundle, grouping: Grouping) -> Result<GroupScores> {
    if bundle.is_empty() {
        return Err(Error::invalid("empty evaluation bundle"));
    }
    let mut scores = GroupScores::default();
    match grouping {
        Grouping::ByClass => {
            let counts = class_counts(&bundle.predictions, &bundle.labels, bundle.num_classes);
            for (c, cc) in counts.iter().enumerate() {
                let f1 = cc.f1();
                let recall = cc.recall();
                if f1.is_none() || recall.is_none() {
                    scores.undefined.push(c);
                }
                scores.f1.insert(c, f1.unwrap_or(0.0));
                scores.recall.insert(c, recall.unwrap_or(0.0));
            }
        }
        Grouping::ByGroup | Grouping::BySensitive => {
            let ids = if grouping == Grouping::ByGroup {
                &bundle.groups[..]
            } else {
                bundle.require_sensitive()?
            };
            let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &g) in ids.iter().enumerate() {
                members.entry(g).or_default().push(i);
            }
            for (g, idx) in members {
                let preds: Vec<usize> = idx.iter().map(|&i| bundle.predictions[i]).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| bundle.labels[i]).collect();
                let counts = class_counts(&preds, &labels, bundle.num_classes);
                let f1s: Vec<f64> = counts.iter().filter_map(ClassCounts::f1).collect();
                let recalls: Vec<f64> = counts.iter().filter_map(ClassCounts::recall).collect();
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                // every group has a sample, so at least one class has an actual positive
                scores.f1.insert(g, mean(&f1s));
                scores.recall.insert(g, mean(&recalls));
            }
        }
    }
    Ok(scores)
}

/// True-positive rate of `positive` among samples selected by `member`.
fn tpr(bundle: &EvalBundle, positive: usize, member: impl Fn(usize) -> bool, who: &str) -> Result<f64> {
    let mut positives = 0usize;
    let mut hits = 0usize;
    for i in 0..bundle.len() {
        if bundle.labels[i] == positive && member(i) {
            positives += 1;
            if bundle.predictions[i] == positive {
                hits += 1;
            }
        }
    }
    if positives == 0 {
        return Err(Error::UndefinedRate(format!(
            "{who} has no samples labeled {positive}"
        )));
    }
    Ok(hits as f64 / positives as f64)
}

/// `|TPR(s1) − TPR(s2)|` for the given positive class.
pub fn eod_pair(bundle: &EvalBundle, positive: usize, s1: usize, s2: usize) -> Result<f64> {
    let s = bundle.require_sensitive()?;
    let a = tpr(bundle, positive, |i| s[i] == s1, &format!("sensitive group {s1}"))?;
    let b = tpr(bundle, positive, |i| s[i] == s2, &format!("sensitive group {s2}"))?;
    Ok((a - b).abs())
}

/// `|TPR(s) − TPR(not s)|` for the given positive class.
pub fn eod_one_vs_all(bundle: &EvalBundle, positive: usize, group: usize) -> Result<f64> {
    let s = bundle.require_sensitive()?;
    let a = tpr(bundle, positive, |i| s[i] == group, &format!("sensitive group {group}"))?;
    let b = tpr(
        bundle,
        positive,
        |i| s[i] != group,
        &format!("complement of sensitive group {group}"),
    )?;
    Ok((a - b).abs())
}

/// Largest one-vs-all EOD over the sensitive groups present.
pub fn eod_max(bundle: &EvalBundle, positive: usize) -> Result<f64> {
    let groups = bundle.sensitive_groups();
    if groups.is_empty() {
        return Err(Error::invalid("bundle has no sensitive ids"));
    }
    let mut worst: f64 = 0.0;
    for g in groups {
        worst = worst.max(eod_one_vs_all(bundle, positive, g)?);
    }
    Ok(worst)
}

/// How the group-loss variance is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceDivisor {
    /// Divide by the number of groups.
    #[default]
    Population,
    /// Divide by the number of groups minus one.
    Sample,
}

impl VarianceDivisor {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceDivisor::Population => "population",
            VarianceDivisor::Sample => "sample",
        }
    }
}

/// Population variance of per-group mean losses.
pub fn group_loss_variance(per_group_loss: &[f64]) -> Result<f64> {
    group_loss_variance_with(per_group_loss, VarianceDivisor::Population)
}

pub fn group_loss_variance_with(per_group_loss: &[f64], divisor: VarianceDivisor) -> Result<f64> {
    let n = per_group_loss.len();
    if n < 2 {
        return Err(Error::invalid(format!("loss variance needs at least 2 groups, got {n}")));
    }
    let mean = per_group_loss.iter().sum::<f64>() / n as f64;
    let ss: f64 = per_group_loss.iter().map(|l| (l - mean) * (l - mean)).sum();
    Ok(match divisor {
        VarianceDivisor::Population => ss / n as f64,
        VarianceDivisor::Sample => ss / (n - 1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Per-class, one-vs-rest.
    pub per_group_f1: BTreeMap<usize, f64>,
    pub per_group_recall: BTreeMap<usize, f64>,
    pub undefined_groups: Vec<usize>,
    pub f1_min: f64,
    pub recall_min: f64,
    pub delta_f1: f64,
    /// `(s1, s2)` with `s1 < s2` → max EOD over positive classes.
    pub eod_pairwise: BTreeMap<(usize, usize), f64>,
    /// `s` → max one-vs-all EOD over positive classes.
    pub eod_one_vs_all: BTreeMap<usize, f64>,
    pub eod_max: Option<f64>,
    pub sensitive_accuracy: Option<f64>,
    pub loss_variance_across_groups: Option<f64>,
    pub loss_variance_divisor: VarianceDivisor,
}

/// Computes every bundle-level metric. `sensitive_accuracy` and the loss
/// variance need a model and are left empty here.
pub fn summary(bundle: &EvalBundle) -> Result<MetricsReport> {
    let scores = per_group_f1_recall(bundle, Grouping::ByClass)?;
    let f1_min = scores.f1.values().cloned().fold(f64::INFINITY, f64::min);
    let f1_max = scores.f1.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let recall_min = scores.recall.values().cloned().fold(f64::INFINITY, f64::min);

    let mut eod_pairwise = BTreeMap::new();
    let mut eod_ova = BTreeMap::new();
    if bundle.sensitive.is_some() {
        let groups = bundle.sensitive_groups();
        let classes = bundle.eod_positive_classes();
        let max_defined = |f: &dyn Fn(usize) -> Result<f64>| -> Option<f64> {
            classes.iter().filter_map(|&c| f(c).ok()).reduce(f64::max)
        };
        for (i, &a) in groups.iter().enumerate() {
            for &b in &groups[i + 1..] {
                if let Some(v) = max_defined(&|c| eod_pair(bundle, c, a, b)) {
                    eod_pairwise.insert((a, b), v);
                }
            }
            if let Some(v) = max_defined(&|c| eod_one_vs_all(bundle, c, a)) {
                eod_ova.insert(a, v);
            }
        }
    }
    let eod_max = eod_ova.values().cloned().reduce(f64::max);

    Ok(MetricsReport {
        accuracy: accuracy(bundle),
        f1_min,
        recall_min,
        delta_f1: f1_max - f1_min,
        per_group_f1: scores.f1,
        per_group_recall: scores.recall,
        undefined_groups: scores.undefined,
        eod_pairwise,
        eod_one_vs_all: eod_ova,
        eod_max,
        sensitive_accuracy: None,
        loss_variance_across_groups: None,
        loss_variance_divisor: VarianceDivisor::Population,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// Scalar fields, in a fixed order, as `(name, value)` pairs.
    pub const SCALAR_FIELDS: [&'static str; 7] = [
        "accuracy",
        "f1_min",
        "recall_min",
        "delta_f1",
        "eod_max",
        "sensitive_accuracy",
        "loss_variance_across_groups",
    ];

    pub fn scalar(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "f1_min" => Some(self.f1_min),
            "recall_min" => Some(self.recall_min),
            "delta_f1" => Some(self.delta_f1),
            "eod_max" => self.eod_max,
            "sensitive_accuracy" => self.sensitive_accuracy,
            "loss_variance_across_groups" => self.loss_variance_across_groups,
            _ => None,
        }
    }

    /// Flat record with stable field names; absent values are empty strings.
    pub fn to_record(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Self::SCALAR_FIELDS
            .iter()
            .map(|&k| (k.to_string(), fmt_opt(self.scalar(k))))
            .collect();
        out.push((
            "loss_variance_divisor".into(),
            self.loss_variance_divisor.as_str().into(),
        ));
        out.push((
            "undefined_groups".into(),
            self.undefined_groups
                .iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        ));
        for (g, v) in &self.per_group_f1 {
            out.push((format!("f1_class{g}"), v.to_string()));
        }
        for (g, v) in &self.per_group_recall {
            out.push((format!("recall_class{g}"), v.to_string()));
        }
        for ((a, b), v) in &self.eod_pairwise {
            out.push((format!("eod_s{a}_s{b}"), v.to_string()));
        }
        for (s, v) in &self.eod_one_vs_all {
            out.push((format!("eod_ova_s{s}"), v.to_string()));
        }
        out
    }
}

/// Settings for the sensitive-attribute linear probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Fraction of each sensitive group used to fit the probe.
    pub train_fraction: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            steps: 200,
            learning_rate: 1.0,
        }
    }
}

/// Held-out accuracy of a multinomial logistic regression predicting `ids`
/// from standardized `features`, fit by full-batch gradient descent from zero.
pub fn probe_accuracy(
    features: &Matrix,
    ids: &[usize],
    rng: &mut SeededRng,
    config: ProbeConfig,
) -> Result<f64> {
    if features.rows() != ids.len() {
        return Err(Error::shape(
            "probe_accuracy",
            format!("{} feature rows", features.rows()),
            format!("{} ids", ids.len()),
        ));
    }
    let num_ids = ids.iter().max().map_or(0, |m| m + 1);
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in ids.iter().enumerate() {
        by_id.entry(s).or_default().push(i);
    }
    if by_id.len() < 2 {
        return Err(Error::invalid("probe needs at least two sensitive groups"));
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (_, mut members) in by_id {
        rng.shuffle(&mut members);
        let n_eval = crate::data::eval_count(members.len(), config.train_fraction);
        eval.extend_from_slice(&members[..n_eval]);
        train.extend_from_slice(&members[n_eval..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("too few samples to split the probe data"));
    }

    // standardize with training statistics
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut std = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in std.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut().for_each(|s| {
        *s = (*s / train.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    let mut x = features.clone();
    for i in 0..x.rows() {
        for ((v, m), s) in x.row_mut(i).iter_mut().zip(&mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }

    let mut probe = MlpClassifier::from_dense(vec![(Matrix::zeros(d, num_ids), vec![0.0; num_ids])])?;
    let ids_vec = ids.to_vec();
    for _ in 0..config.steps {
        let g = probe.backward_subset(&x, &ids_vec, &train)?;
        for (id, grad) in &g.grads {
            probe
                .param_mut(*id)
                .expect("probe tensors are dense")
                .axpy(-config.learning_rate, grad)?;
        }
    }
    let preds = probe.predict(&x.select_rows(&eval))?;
    let hits = preds.iter().zip(&eval).filter(|(p, &i)| **p == ids[i]).count();
    Ok(hits as f64 / eval.len() as f64)
}

/// Probe accuracy on the model's penultimate features, or `None` when the
/// dataset has no sensitive ids.
pub fn sensitive_accuracy(
    model: &MlpClassifier,
    dataset: &Dataset,
    rng: &mut SeededRng,
) -> Result<Option<f64>> {
    let Some(ids) = dataset.sensitive_ids() else {
        return Ok(None);
    };
    let feats = model.penultimate_features(&dataset.feature_matrix())?;
    probe_accuracy(&feats, &ids, rng, ProbeConfig::default()).map(Some)
}
