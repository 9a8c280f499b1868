//! Loss-variance regularized objective
//!
//! `J(θ) = L(θ) + λ · Σ_g (L_g(θ) − mean_g' L_g'(θ))²`
//!
//! where `L` is the mean loss over the batch and `L_g` the mean loss over the
//! batch samples of group `g`. Only groups present in the batch take part.
//! The gradient is assembled tensor by tensor as
//! `∇J = ∇L + λ · Σ_g 2(L_g − mean)·∇L_g`; the derivative of the mean itself
//! drops out because the deviations sum to zero.

use std::collections::BTreeMap;

use crate::data::{DatasetRecord, GroupKey};
use crate::error::{Error, Result};
use crate::model::BatchGradients;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairObjectiveConfig {
    lambda: f64,
    pub group_key: GroupKey,
}

impl FairObjectiveConfig {
    pub fn new(lambda: f64, group_key: GroupKey) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda, group_key })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLossReport {
    /// Ascending group ids present in the batch.
    pub groups: Vec<usize>,
    /// `L_g`, aligned with `groups`.
    pub per_group_loss: Vec<f64>,
    pub overall_loss: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub objective: f64,
}

/// Sample indices per group id, ascending by id.
pub fn partition_by_group(
    records: &[DatasetRecord],
    key: GroupKey,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    if records.is_empty() {
        return Err(Error::invalid("cannot partition an empty batch"));
    }
    let mut parts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let id = r.key(key).ok_or_else(|| {
            Error::invalid(format!("record {i} has no value for group key `{key}`"))
        })?;
        parts.entry(id).or_default().push(i);
    }
    Ok(parts)
}

/// Same as [`partition_by_group`] but over precomputed ids.
pub fn partition_ids(ids: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut parts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in ids.iter().enumerate() {
        parts.entry(g).or_default().push(i);
    }
    parts
}

fn group_mean(per_group_loss: &[f64]) -> f64 {
    per_group_loss.iter().sum::<f64>() / per_group_loss.len() as f64
}

/// Sum (not mean) of squared deviations from the unweighted group mean.
pub fn variance_penalty(per_group_loss: &[f64]) -> Result<f64> {
    Ok(deviations(per_group_loss)?.iter().map(|d| d * d).sum())
}

/// `L_g − mean` per group. Exactly zero when all losses are equal.
pub fn deviations(per_group_loss: &[f64]) -> Result<Vec<f64>> {
    if per_group_loss.is_empty() {
        return Err(Error::invalid("variance penalty over zero groups"));
    }
    if per_group_loss.windows(2).all(|w| w[0] == w[1]) {
        return Ok(vec![0.0; per_group_loss.len()]);
    }
    let mean = group_mean(per_group_loss);
    Ok(per_group_loss.iter().map(|l| l - mean).collect())
}

/// Evaluates `J` from an overall loss and per-group losses keyed by group id.
pub fn objective(
    overall_loss: f64,
    per_group_loss: &BTreeMap<usize, f64>,
    lambda: f64,
) -> Result<GroupLossReport> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let groups: Vec<usize> = per_group_loss.keys().copied().collect();
    let losses: Vec<f64> = per_group_loss.values().copied().collect();
    let penalty = variance_penalty(&losses)?;
    Ok(GroupLossReport {
        groups,
        per_group_loss: losses,
        overall_loss,
        penalty,
        lambda,
        objective: overall_loss + lambda * penalty,
    })
}

/// `∇J` assembled from the overall gradient and per-group gradients.
///
/// With `λ = 0` the overall gradient is returned unchanged. Groups whose
/// deviation coefficient is exactly zero contribute nothing.
pub fn objective_gradient(
    overall: &BatchGradients,
    group_grads: &BTreeMap<usize, BatchGradients>,
    per_group_loss: &BTreeMap<usize, f64>,
    lambda: f64,
) -> Result<BatchGradients> {
    if !group_grads.keys().eq(per_group_loss.keys()) {
        return Err(Error::invalid(format!(
            "group gradients for {:?} but losses for {:?}",
            group_grads.keys().collect::<Vec<_>>(),
            per_group_loss.keys().collect::<Vec<_>>()
        )));
    }
    for (g, grads) in group_grads {
        if !grads.grads.keys().eq(overall.grads.keys()) {
            return Err(Error::invalid(format!("group {g} gradient has a different tensor set")));
        }
        for (id, m) in &grads.grads {
            if m.shape() != overall.grads[id].shape() {
                return Err(Error::shape(
                    "objective_gradient",
                    format!("{id} overall {:?}", overall.grads[id].shape()),
                    format!("group {g} {:?}", m.shape()),
                ));
            }
        }
    }
    if lambda == 0.0 {
        return Ok(overall.clone());
    }

    let losses: Vec<f64> = per_group_loss.values().copied().collect();
    let coefficients: Vec<f64> = deviations(&losses)?.into_iter().map(|d| 2.0 * d).collect();
    let penalty: f64 = variance_penalty(&losses)?;

    let mut out = overall.clone();
    for (id, total) in out.grads.iter_mut() {
        let mut acc: Option<crate::linalg::Matrix> = None;
        for (grads, &c) in group_grads.values().zip(&coefficients) {
            if c == 0.0 {
                continue;
            }
            let g = &grads.grads[id];
            match acc.as_mut() {
                Some(a) => a.axpy(c, g)?,
                None => acc = Some(g.scale(c)),
            }
        }
        if let Some(a) = acc {
            total.axpy(lambda, &a)?;
        }
    }
    out.loss = overall.loss + lambda * penalty;
    Ok(out)
}
