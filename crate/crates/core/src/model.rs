//! Feed-forward ReLU classifier with hand-written forward and backward passes.
//!
//! Weights are stored `in × out` and applied as `x·W + b`. Any hidden weight
//! may be wrapped in a [`LoraAdapter`]; the head is always a plain affine map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::lora::{LoraAdapter, ParamCountSpec};

/// Which tensors are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every weight and bias.
    Fft,
    /// Adapter factors plus the head.
    Lora,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fft => "fft",
            Mode::Lora => "lora",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fft" => Ok(Mode::Fft),
            "lora" => Ok(Mode::Lora),
            other => Err(Error::invalid(format!("unknown mode `{other}` (expected fft or lora)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerWeight {
    Dense(Matrix),
    LowRank(LoraAdapter),
}

impl LayerWeight {
    pub fn effective(&self) -> std::borrow::Cow<'_, Matrix> {
        match self {
            LayerWeight::Dense(w) => std::borrow::Cow::Borrowed(w),
            LayerWeight::LowRank(ad) => std::borrow::Cow::Owned(ad.effective_weight()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerWeight::Dense(w) => w.shape(),
            LayerWeight::LowRank(ad) => ad.base().shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: LayerWeight,
    /// `1 × out`
    pub bias: Matrix,
}

/// Identifies one trainable tensor. Ordering is the canonical iteration order
/// for gradient maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    LoraA(usize),
    LoraB(usize),
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::Weight(l) => write!(f, "layer{l}.weight"),
            ParamId::Bias(l) => write!(f, "layer{l}.bias"),
            ParamId::LoraA(l) => write!(f, "layer{l}.lora_a"),
            ParamId::LoraB(l) => write!(f, "layer{l}.lora_b"),
        }
    }
}

/// Gradients of a mean loss with respect to every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub grads: BTreeMap<ParamId, Matrix>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct MlpClassifier {
    layers: Vec<Layer>,
    mode: Mode,
}

#[derive(Deserialize)]
struct RawModel {
    layers: Vec<Layer>,
    mode: Mode,
}

impl TryFrom<RawModel> for MlpClassifier {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        MlpClassifier::from_layers(raw.layers, raw.mode)
    }
}

impl MlpClassifier {
    /// He-initialized network with the given layer widths
    /// `[input, hidden..., classes]`; biases start at zero.
    pub fn new(widths: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "need at least input and output widths, all positive; got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
                Ok(Layer {
                    weight: LayerWeight::Dense(Matrix::new(fan_in, fan_out, data)?),
                    bias: Matrix::zeros(1, fan_out),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            mode: Mode::Fft,
        })
    }

    /// Plain model from explicit `(weight, bias)` pairs.
    pub fn from_dense(params: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        let layers = params
            .into_iter()
            .map(|(w, b)| Layer {
                weight: LayerWeight::Dense(w),
                bias: Matrix::row_vector(b),
            })
            .collect();
        Self::from_layers(layers, Mode::Fft)
    }

    pub fn from_layers(layers: Vec<Layer>, mode: Mode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (fan_in, fan_out) = layer.weight.shape();
            if layer.bias.shape() != (1, fan_out) {
                return Err(Error::shape(
                    "MlpClassifier",
                    format!("layer {i} weight {fan_in}x{fan_out}"),
                    format!("bias {:?}", layer.bias.shape()),
                ));
            }
            if i > 0 {
                let prev_out = layers[i - 1].weight.shape().1;
                if prev_out != fan_in {
                    return Err(Error::shape(
                        "MlpClassifier",
                        format!("layer {} outputs {prev_out}", i - 1),
                        format!("layer {i} expects {fan_in}"),
                    ));
                }
            }
            let adapted = matches!(layer.weight, LayerWeight::LowRank(_));
            if adapted && (mode == Mode::Fft || i + 1 == layers.len()) {
                return Err(Error::invalid(format!(
                    "layer {i} carries an adapter but only hidden layers of LoRA-mode models may"
                )));
            }
        }
        Ok(Self { layers, mode })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape().0
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape().1
    }

    /// Layer widths `[input, hidden..., classes]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.shape().1));
        w
    }

    fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Switches to LoRA mode, wrapping the listed hidden layers' weights in
    /// fresh adapters.
    pub fn attach_adapters(
        &mut self,
        hidden_layers: &[usize],
        rank: usize,
        rng: &mut SeededRng,
        init_std: f64,
        scale: f64,
    ) -> Result<()> {
        if self.mode == Mode::Lora {
            return Err(Error::invalid("model already carries adapters"));
        }
        let head = self.head_index();
        for &l in hidden_layers {
            if l >= head {
                return Err(Error::invalid(format!("layer {l} is not a hidden layer")));
            }
        }
        let mut layers = self.layers.clone();
        for &l in hidden_layers {
            if let LayerWeight::Dense(w) = &layers[l].weight {
                let ad = LoraAdapter::new(w.clone(), rank, rng, init_std)?.with_scale(scale);
                layers[l].weight = LayerWeight::LowRank(ad);
            }
        }
        self.layers = layers;
        self.mode = Mode::Lora;
        Ok(())
    }

    /// Indices of every hidden layer (all layers but the head).
    pub fn hidden_layers(&self) -> Vec<usize> {
        (0..self.head_index()).collect()
    }

    /// Plain FFT-mode copy with every adapter folded into its weight.
    pub fn merged(&self) -> MlpClassifier {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: LayerWeight::Dense(l.weight.effective().into_owned()),
                bias: l.bias.clone(),
            })
            .collect();
        MlpClassifier {
            layers,
            mode: Mode::Fft,
        }
    }

    /// Replaces the head with a freshly initialized one over `num_classes`.
    pub fn reset_head(&mut self, num_classes: usize, rng: &mut SeededRng) -> Result<()> {
        let head = self.head_index();
        let fan_in = self.layers[head].weight.shape().0;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * num_classes).map(|_| std * rng.normal()).collect();
        self.layers[head] = Layer {
            weight: LayerWeight::Dense(Matrix::new(fan_in, num_classes, data)?),
            bias: Matrix::zeros(1, num_classes),
        };
        Ok(())
    }

    /// Canonically ordered trainable tensors for the current mode.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let head = self.head_index();
        let mut ids = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match (self.mode, &layer.weight) {
                (Mode::Fft, _) => ids.extend([ParamId::Weight(l), ParamId::Bias(l)]),
                (Mode::Lora, _) if l == head => ids.extend([ParamId::Weight(l), ParamId::Bias(l)]),
                (Mode::Lora, LayerWeight::LowRank(_)) => {
                    ids.extend([ParamId::LoraA(l), ParamId::LoraB(l)])
                }
                (Mode::Lora, LayerWeight::Dense(_)) => {}
            }
        }
        ids.sort();
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        match id {
            ParamId::Weight(l) => match &self.layers.get(l)?.weight {
                LayerWeight::Dense(w) => Some(w),
                LayerWeight::LowRank(ad) => Some(ad.base()),
            },
            ParamId::Bias(l) => Some(&self.layers.get(l)?.bias),
            ParamId::LoraA(l) => match &self.layers.get(l)?.weight {
                LayerWeight::LowRank(ad) => Some(ad.a()),
                LayerWeight::Dense(_) => None,
            },
            ParamId::LoraB(l) => match &self.layers.get(l)?.weight {
                LayerWeight::LowRank(ad) => Some(ad.b()),
                LayerWeight::Dense(_) => None,
            },
        }
    }

    /// Mutable access to a tensor. Frozen adapter bases are not reachable.
    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        match id {
            ParamId::Weight(l) => match &mut self.layers.get_mut(l)?.weight {
                LayerWeight::Dense(w) => Some(w),
                LayerWeight::LowRank(_) => None,
            },
            ParamId::Bias(l) => Some(&mut self.layers.get_mut(l)?.bias),
            ParamId::LoraA(l) => match &mut self.layers.get_mut(l)?.weight {
                LayerWeight::LowRank(ad) => Some(ad.a_mut()),
                LayerWeight::Dense(_) => None,
            },
            ParamId::LoraB(l) => match &mut self.layers.get_mut(l)?.weight {
                LayerWeight::LowRank(ad) => Some(ad.b_mut()),
                LayerWeight::Dense(_) => None,
            },
        }
    }

    pub fn adapter_mut(&mut self, layer: usize) -> Option<&mut LoraAdapter> {
        match &mut self.layers.get_mut(layer)?.weight {
            LayerWeight::LowRank(ad) => Some(ad),
            LayerWeight::Dense(_) => None,
        }
    }

    /// Number of trainable scalars in the current mode.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids()
            .into_iter()
            .map(|id| self.param(id).map_or(0, |m| m.rows() * m.cols()))
            .sum()
    }

    /// Parameter accounting in the form consumed by
    /// [`crate::lora::count_trainable`]: adapted hidden weights plus every
    /// fully trained tensor as auxiliary.
    pub fn param_count_spec(&self) -> ParamCountSpec {
        let mut adapted = Vec::new();
        let mut rank = 0;
        let mut auxiliary = Vec::new();
        for id in self.trainable_ids() {
            match id {
                ParamId::LoraA(l) => {
                    if let LayerWeight::LowRank(ad) = &self.layers[l].weight {
                        adapted.push(ad.base().shape());
                        rank = ad.rank();
                    }
                }
                ParamId::LoraB(_) => {}
                other => {
                    let m = self.param(other).expect("trainable id resolves");
                    auxiliary.push(m.rows() * m.cols());
                }
            }
        }
        ParamCountSpec {
            adapted,
            rank,
            auxiliary,
        }
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("model input width {}", self.input_dim()),
                format!("features {}x{}", features.rows(), features.cols()),
            ));
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry is the logits.
    fn forward_cached(&self, features: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(features)?;
        let head = self.head_index();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = features.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight.effective())?;
            add_bias(&mut z, &layer.bias);
            if l < head {
                h = z.map(relu);
            }
            pre.push(z);
        }
        Ok(pre)
    }

    /// Logits `n × C`. ReLU between hidden layers, nothing after the head.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(features)?.pop().expect("at least one layer"))
    }

    /// Activations entering the head.
    pub fn penultimate_features(&self, features: &Matrix) -> Result<Matrix> {
        if self.layers.len() < 2 {
            return Err(Error::invalid("penultimate features need at least one hidden layer"));
        }
        let mut pre = self.forward_cached(features)?;
        pre.pop();
        Ok(pre.pop().expect("hidden layer").map(relu))
    }

    /// Class with the largest logit per row (lowest index on ties).
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(features)?))
    }

    /// Smallest `|pre-activation|` over all hidden units and rows; gradient
    /// checks keep this away from zero.
    pub fn min_abs_hidden_preactivation(&self, features: &Matrix) -> Result<f64> {
        let pre = self.forward_cached(features)?;
        Ok(pre[..pre.len() - 1]
            .iter()
            .flat_map(|z| z.as_slice().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    /// Gradient of the mean cross-entropy over `subset` (row indices into
    /// `features`, duplicates allowed) with respect to every trainable tensor.
    pub fn backward_subset(
        &self,
        features: &Matrix,
        labels: &[usize],
        subset: &[usize],
    ) -> Result<BatchGradients> {
        if subset.is_empty() {
            return Err(Error::invalid("backward over an empty subset"));
        }
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "backward_subset",
                format!("{} feature rows", features.rows()),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= features.rows()) {
            return Err(Error::invalid(format!("subset index {bad} out of range")));
        }
        let x = features.select_rows(subset);
        let y: Vec<usize> = subset.iter().map(|&i| labels[i]).collect();
        let pre = self.forward_cached(&x)?;
        let logits = &pre[pre.len() - 1];
        let (loss, _) = cross_entropy(logits, &y)?;

        // ∂loss/∂logits = (softmax − onehot) / m
        let m = y.len() as f64;
        let mut dz = softmax_rows(logits);
        for (i, &label) in y.iter().enumerate() {
            dz[(i, label)] -= 1.0;
        }
        let mut dz = dz.scale(1.0 / m);

        let head = self.head_index();
        let mut grads = BTreeMap::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { x.clone() } else { pre[l - 1].map(relu) };
            let d_weight = input.t_matmul(&dz)?;
            let d_bias = dz.column_sums();
            let trains_bias = self.mode == Mode::Fft || l == head;
            match (&layer.weight, self.mode) {
                (LayerWeight::LowRank(ad), Mode::Lora) if l != head => {
                    let (da, db) = ad.route_gradient(&d_weight)?;
                    grads.insert(ParamId::LoraA(l), da);
                    grads.insert(ParamId::LoraB(l), db);
                }
                (LayerWeight::Dense(_), Mode::Fft) => {
                    grads.insert(ParamId::Weight(l), d_weight);
                }
                (LayerWeight::Dense(_), Mode::Lora) if l == head => {
                    grads.insert(ParamId::Weight(l), d_weight);
                }
                _ => {}
            }
            if trains_bias {
                grads.insert(ParamId::Bias(l), d_bias);
            }
            if l > 0 {
                let dh = dz.matmul_t(&layer.weight.effective())?;
                let z_prev = &pre[l - 1];
                let mut next = dh;
                for (g, &z) in next.as_mut_slice().iter_mut().zip(z_prev.as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                dz = next;
            }
        }
        Ok(BatchGradients { grads, loss })
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn add_bias(z: &mut Matrix, bias: &Matrix) {
    let b = bias.as_slice();
    for i in 0..z.rows() {
        for (v, bb) in z.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub(crate) fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax cross-entropy via a stabilized log-sum-exp. Returns the batch
/// mean and the per-sample losses.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logit rows", logits.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cross_entropy over an empty batch"));
    }
    let classes = logits.cols();
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} at row {i} outside 0..{classes}"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        losses.push(max + sum.ln() - row[label]);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((mean, losses))
}
