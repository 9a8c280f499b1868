//! Optimization loop for the four method quadrants (FFT, FairFFT, LoRA,
//! FairLoRA), hyperparameter sweeps and best-eval-accuracy selection.
//!
//! Optimizer: SGD with heavy-ball momentum, `v ← μ·v + g`, `θ ← θ − η·v`.
//! Every random choice is drawn from a stream derived from the run seed, so a
//! run is a pure function of `(config, base model, data)`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{self, Dataset, GroupKey};
use crate::{checkpoint, config, report};
use crate::error::{Error, Result};
use crate::fair;
use crate::linalg::{Matrix, SeededRng};
use crate::lora;
use crate::metrics::{self, EvalBundle, MetricsReport};
use crate::model::{cross_entropy, BatchGradients, MlpClassifier, Mode, ParamId};

// Sub-stream ids for SeededRng::derive.
const STREAM_INIT: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_ADAPTER: u64 = 3;
const STREAM_BATCHES: u64 = 4;
const STREAM_PROBE: u64 = 5;

/// Method quadrant: (full or low-rank) × (plain or fair objective).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Fft,
    FairFft,
    Lora,
    FairLora,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fft, Method::FairFft, Method::Lora, Method::FairLora];

    pub fn mode(self) -> Mode {
        match self {
            Method::Fft | Method::FairFft => Mode::Fft,
            Method::Lora | Method::FairLora => Mode::Lora,
        }
    }

    pub fn fair(self) -> bool {
        matches!(self, Method::FairFft | Method::FairLora)
    }

    pub fn from_parts(mode: Mode, fair: bool) -> Self {
        match (mode, fair) {
            (Mode::Fft, false) => Method::Fft,
            (Mode::Fft, true) => Method::FairFft,
            (Mode::Lora, false) => Method::Lora,
            (Mode::Lora, true) => Method::FairLora,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fft => "FFT",
            Method::FairFft => "FairFFT",
            Method::Lora => "LoRA",
            Method::FairLora => "FairLoRA",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fft" => Ok(Method::Fft),
            "fairfft" => Ok(Method::FairFft),
            "lora" => Ok(Method::Lora),
            "fairlora" => Ok(Method::FairLora),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected fft, fairfft, lora or fairlora)"
            ))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub fair: bool,
    pub lambda: f64,
    /// Adapter rank; required in LoRA mode.
    pub rank: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub group_key: GroupKey,
    /// Group-covering batches; `None` means "on exactly when fair".
    pub coverage: Option<bool>,
    /// Hidden widths used when a model is created from scratch.
    pub hidden: Vec<usize>,
    pub init_std: f64,
    pub lora_scale: f64,
    pub train_fraction: f64,
    /// Seed of the train/eval split, kept apart from `seed` so that repeated
    /// seeds share one split.
    pub split_seed: u64,
    /// Free-form model label carried into reports.
    pub model_name: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lora,
            fair: false,
            lambda: 0.0,
            rank: Some(4),
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            group_key: GroupKey::Group,
            coverage: None,
            hidden: vec![64, 64],
            init_std: lora::DEFAULT_INIT_STD,
            lora_scale: lora::DEFAULT_SCALE,
            train_fraction: 0.8,
            split_seed: 0,
            model_name: "mlp".into(),
        }
    }
}

impl TrainConfig {
    pub const SELECTION_RULE: &'static str = "best_eval_accuracy";

    pub fn method(&self) -> Method {
        Method::from_parts(self.mode, self.fair)
    }

    pub fn coverage(&self) -> bool {
        self.coverage.unwrap_or(self.fair)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.fair && self.lambda <= 0.0 {
            return Err(Error::invalid("fair training needs lambda > 0"));
        }
        if !self.fair && self.lambda != 0.0 {
            return Err(Error::invalid(format!(
                "lambda = {} given but fair is off",
                self.lambda
            )));
        }
        if self.mode == Mode::Lora && self.rank.is_none_or(|r| r == 0) {
            return Err(Error::invalid("LoRA mode needs rank >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train fraction must lie in (0, 1)"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Short label identifying the model configuration in reports.
    pub fn model_label(&self) -> String {
        self.model_name.clone()
    }
}

/// Objective optimized by a [`FineTuner`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Plain,
    /// Loss-variance regularized. `lambda = 0` is allowed here and reduces
    /// to the plain gradient.
    Fair { lambda: f64 },
}

/// SGD with momentum over a model's trainable tensors.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: BTreeMap<ParamId, Matrix>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut MlpClassifier, grads: &BatchGradients) -> Result<()> {
        for (id, g) in &grads.grads {
            let v = match self.velocity.get_mut(id) {
                Some(v) => {
                    let mut next = v.scale(self.momentum);
                    next.axpy(1.0, g)?;
                    *v = next;
                    v
                }
                None => self.velocity.entry(*id).or_insert_with(|| g.clone()),
            };
            let p = model
                .param_mut(*id)
                .ok_or_else(|| Error::invalid(format!("{id} is not a trainable tensor")))?;
            p.axpy(-self.learning_rate, v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub objective: f64,
    pub penalty: Option<f64>,
}

/// A model, its optimizer state and the objective it is trained on.
#[derive(Debug, Clone)]
pub struct FineTuner {
    model: MlpClassifier,
    optimizer: Sgd,
    objective: Objective,
}

impl FineTuner {
    pub fn new(model: MlpClassifier, objective: Objective, learning_rate: f64, momentum: f64) -> Self {
        Self {
            model,
            optimizer: Sgd::new(learning_rate, momentum),
            objective,
        }
    }

    pub fn model(&self) -> &MlpClassifier {
        &self.model
    }

    pub fn into_model(self) -> MlpClassifier {
        self.model
    }

    /// Gradient of the configured objective on `batch` (indices into
    /// `features`/`labels`/`group_ids`).
    pub fn gradient(
        &self,
        features: &Matrix,
        labels: &[usize],
        group_ids: &[usize],
        batch: &[usize],
    ) -> Result<(BatchGradients, StepReport)> {
        let overall = self.model.backward_subset(features, labels, batch)?;
        match self.objective {
            Objective::Plain => {
                let report = StepReport {
                    loss: overall.loss,
                    objective: overall.loss,
                    penalty: None,
                };
                Ok((overall, report))
            }
            Objective::Fair { lambda } => {
                let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for &i in batch {
                    members.entry(group_ids[i]).or_default().push(i);
                }
                let mut group_grads = BTreeMap::new();
                let mut group_loss = BTreeMap::new();
                for (g, idx) in &members {
                    let gg = self.model.backward_subset(features, labels, idx)?;
                    group_loss.insert(*g, gg.loss);
                    group_grads.insert(*g, gg);
                }
                let report = fair::objective(overall.loss, &group_loss, lambda)?;
                let grads = fair::objective_gradient(&overall, &group_grads, &group_loss, lambda)?;
                Ok((
                    grads,
                    StepReport {
                        loss: report.overall_loss,
                        objective: report.objective,
                        penalty: Some(report.penalty),
                    },
                ))
            }
        }
    }

    pub fn step(
        &mut self,
        features: &Matrix,
        labels: &[usize],
        group_ids: &[usize],
        batch: &[usize],
    ) -> Result<StepReport> {
        let (grads, report) = self.gradient(features, labels, group_ids, batch)?;
        if !report.objective.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became {} (loss {})",
                report.objective, report.loss
            )));
        }
        self.optimizer.step(&mut self.model, &grads)?;
        Ok(report)
    }
}

/// One row of the per-epoch trace. Epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's steps (`None` at epoch 0).
    pub train_objective: Option<f64>,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Sum of squared per-group loss deviations on the eval set.
    pub eval_penalty: Option<f64>,
    /// Population variance of per-group eval losses.
    pub eval_group_loss_variance: Option<f64>,
}

/// Everything produced by one fine-tuning run.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_model: MlpClassifier,
    pub trace: Vec<EpochRecord>,
    pub metrics: MetricsReport,
    pub trainable_params: usize,
}

impl RunArtifact {
    pub fn best_eval_accuracy(&self) -> f64 {
        self.trace[self.best_epoch].eval_accuracy
    }

    /// Writes `config.cfg`, `checkpoint.json`, `trace.csv` and `metrics.csv`
    /// into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.cfg"), config::train_config_text(&self.config))?;
        checkpoint::save(&self.best_model, dir.join("checkpoint.json"))?;
        std::fs::write(dir.join("trace.csv"), self.trace_csv()?)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
        Ok(())
    }

    pub fn trace_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut rows = vec![vec![
            "epoch".to_string(),
            "train_objective".into(),
            "train_loss".into(),
            "eval_loss".into(),
            "eval_accuracy".into(),
            "eval_penalty".into(),
            "eval_group_loss_variance".into(),
            "selected".into(),
        ]];
        for r in &self.trace {
            rows.push(vec![
                r.epoch.to_string(),
                opt(r.train_objective),
                r.train_loss.to_string(),
                r.eval_loss.to_string(),
                r.eval_accuracy.to_string(),
                opt(r.eval_penalty),
                opt(r.eval_group_loss_variance),
                u8::from(r.epoch == self.best_epoch).to_string(),
            ]);
        }
        for row in rows {
            w.write_record(&row).map_err(|e| Error::invalid(e.to_string()))?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }

    /// Identity columns followed by [`MetricsReport::to_record`].
    pub fn metrics_csv(&self) -> Result<String> {
        let c = &self.config;
        let mut fields: Vec<(String, String)> = vec![
            ("model".into(), c.model_name.clone()),
            ("method".into(), c.method().to_string()),
            ("rank".into(), if c.mode == Mode::Lora { c.rank.map_or(String::new(), |r| r.to_string()) } else { String::new() }),
            ("lambda".into(), c.lambda.to_string()),
            ("seed".into(), c.seed.to_string()),
            ("best_epoch".into(), self.best_epoch.to_string()),
            ("trainable_params".into(), self.trainable_params.to_string()),
        ];
        fields.extend(self.metrics.to_record());
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(fields.iter().map(|f| &f.0)).map_err(err)?;
        w.write_record(fields.iter().map(|f| &f.1)).map_err(err)?;
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

struct QuickEval {
    loss: f64,
    accuracy: f64,
    penalty: Option<f64>,
    variance: Option<f64>,
}

fn group_losses(per_sample: &[f64], group_ids: &[usize]) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&l, &g) in per_sample.iter().zip(group_ids) {
        let e = sums.entry(g).or_insert((0.0, 0));
        e.0 += l;
        e.1 += 1;
    }
    sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()
}

fn quick_eval(model: &MlpClassifier, features: &Matrix, labels: &[usize], group_ids: &[usize]) -> Result<QuickEval> {
    let logits = model.forward(features)?;
    let (loss, per_sample) = cross_entropy(&logits, labels)?;
    let preds = crate::model::argmax_rows(&logits);
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let losses: Vec<f64> = group_losses(&per_sample, group_ids).into_values().collect();
    Ok(QuickEval {
        loss,
        accuracy: hits as f64 / labels.len() as f64,
        penalty: Some(fair::variance_penalty(&losses)?),
        variance: metrics::group_loss_variance(&losses).ok(),
    })
}

/// Full metric battery for `model` on `dataset`; never mutates the model.
///
/// Group-loss variance is over `group_key` groups. Sensitive accuracy is
/// reported when every record has a sensitive id and at least two distinct
/// ids occur.
pub fn evaluate(
    model: &MlpClassifier,
    dataset: &Dataset,
    group_key: GroupKey,
    rng: &mut SeededRng,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let features = dataset.feature_matrix();
    let labels = dataset.labels();
    let logits = model.forward(&features)?;
    let (_, per_sample) = cross_entropy(&logits, &labels)?;
    let preds = crate::model::argmax_rows(&logits);
    let group_ids = dataset.ids(group_key)?;
    let mut bundle = EvalBundle::new(preds, labels)?
        .with_num_classes(model.num_classes())?
        .with_groups(group_ids.clone())?;
    let sensitive = dataset.sensitive_ids();
    if let Some(s) = &sensitive {
        bundle = bundle.with_sensitive(s.clone())?;
    }
    let mut report = metrics::summary(&bundle)?;
    let losses: Vec<f64> = group_losses(&per_sample, &group_ids).into_values().collect();
    report.loss_variance_across_groups = metrics::group_loss_variance(&losses).ok();
    let distinct = bundle.sensitive_groups().len();
    if sensitive.is_some() && distinct >= 2 && model.num_layers() >= 2 {
        report.sensitive_accuracy = metrics::sensitive_accuracy(model, dataset, rng)?;
    }
    Ok(report)
}

fn check_finite(model: &MlpClassifier) -> Result<()> {
    for id in model.trainable_ids() {
        if !model.param(id).is_some_and(Matrix::is_finite) {
            return Err(Error::Numerical(format!("{id} became non-finite")));
        }
    }
    Ok(())
}

/// Trains a model from scratch on `dataset` with the plain objective and
/// returns the final weights, to serve as the frozen base of later runs.
pub fn pretrain(config: &TrainConfig, dataset: &Dataset) -> Result<MlpClassifier> {
    pretrain_with_trace(config, dataset).map(|(m, _)| m)
}

/// [`pretrain`] plus the mean training loss of every epoch.
pub fn pretrain_with_trace(config: &TrainConfig, dataset: &Dataset) -> Result<(MlpClassifier, Vec<f64>)> {
    if config.mode != Mode::Fft || config.fair {
        return Err(Error::invalid("pretraining runs in FFT mode with fair off"));
    }
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty dataset"));
    }
    let root = SeededRng::new(config.seed);
    let mut widths = vec![dataset.dim()];
    widths.extend(&config.hidden);
    widths.push(dataset.num_classes());
    let model = MlpClassifier::new(&widths, &mut root.derive(STREAM_INIT))?;
    let features = dataset.feature_matrix();
    let labels = dataset.labels();
    let group_ids = dataset.ids(config.group_key)?;
    let mut tuner = FineTuner::new(model, Objective::Plain, config.learning_rate, config.momentum);
    let mut batch_rng = root.derive(STREAM_BATCHES);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let batches = data::stratified_batches(&group_ids, config.batch_size, config.coverage(), &mut batch_rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let r = tuner.step(&features, &labels, &group_ids, batch).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "pretraining diverged at epoch {epoch}: {msg}; loss trace {losses:?}"
                )),
                other => other,
            })?;
            total += r.loss;
        }
        losses.push(total / batches.len() as f64);
        check_finite(tuner.model())?;
    }
    Ok((tuner.into_model(), losses))
}

/// Splits `dataset` with `config.split_seed` (stratified by label) and runs
/// [`finetune_split`].
pub fn finetune(config: &TrainConfig, base: &MlpClassifier, dataset: &Dataset) -> Result<RunArtifact> {
    let (train, eval) = data::split(
        dataset,
        config.train_fraction,
        &mut SeededRng::new(config.split_seed),
        true,
    )?;
    finetune_split(config, base, &train, &eval)
}

/// Prepares the trainable model for `config` starting from `base`: adapters
/// are folded in, the head is replaced if the class count differs, and in
/// LoRA mode fresh adapters go on every hidden layer.
pub fn prepare_model(config: &TrainConfig, base: &MlpClassifier, num_classes: usize) -> Result<MlpClassifier> {
    let root = SeededRng::new(config.seed);
    let mut model = if base.mode() == Mode::Lora {
        base.merged()
    } else {
        base.clone()
    };
    if model.num_classes() != num_classes {
        model.reset_head(num_classes, &mut root.derive(STREAM_HEAD))?;
    }
    if config.mode == Mode::Lora {
        let rank = config.rank.ok_or_else(|| Error::invalid("LoRA mode needs a rank"))?;
        let hidden = model.hidden_layers();
        model.attach_adapters(
            &hidden,
            rank,
            &mut root.derive(STREAM_ADAPTER),
            config.init_std,
            config.lora_scale,
        )?;
    }
    Ok(model)
}

/// Fine-tunes from `base` on `train`, evaluating on `eval` after every
/// epoch and keeping the checkpoint with the best eval accuracy (earliest on
/// ties, epoch 0 included).
pub fn finetune_split(
    config: &TrainConfig,
    base: &MlpClassifier,
    train: &Dataset,
    eval: &Dataset,
) -> Result<RunArtifact> {
    config.validate()?;
    let objective = if config.fair {
        Objective::Fair {
            lambda: config.lambda,
        }
    } else {
        Objective::Plain
    };
    run_with_objective(config, objective, base, train, eval)
}

/// [`finetune_split`] with an explicit objective and no config validation of
/// the lambda/fair pairing.
pub fn run_with_objective(
    config: &TrainConfig,
    objective: Objective,
    base: &MlpClassifier,
    train: &Dataset,
    eval: &Dataset,
) -> Result<RunArtifact> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("train and eval sets must be nonempty"));
    }
    if base.input_dim() != train.dim() || train.dim() != eval.dim() {
        return Err(Error::shape(
            "finetune",
            format!("model input width {}", base.input_dim()),
            format!("data widths {} / {}", train.dim(), eval.dim()),
        ));
    }
    let num_classes = train.num_classes().max(eval.num_classes()).max(base.num_classes());
    let model = prepare_model(config, base, num_classes)?;
    let trainable_params = model.trainable_count();
    let root = SeededRng::new(config.seed);

    let features = train.feature_matrix();
    let labels = train.labels();
    let group_ids = train.ids(config.group_key)?;
    let eval_features = eval.feature_matrix();
    let eval_labels = eval.labels();
    let eval_groups = eval.ids(config.group_key)?;

    let record = |epoch: usize, model: &MlpClassifier, train_objective: Option<f64>| -> Result<EpochRecord> {
        let tr = quick_eval(model, &features, &labels, &group_ids)?;
        let ev = quick_eval(model, &eval_features, &eval_labels, &eval_groups)?;
        Ok(EpochRecord {
            epoch,
            train_objective,
            train_loss: tr.loss,
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
            eval_penalty: ev.penalty,
            eval_group_loss_variance: ev.variance,
        })
    };

    let mut trace = vec![record(0, &model, None)?];
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut tuner = FineTuner::new(model, objective, config.learning_rate, config.momentum);
    let mut batch_rng = root.derive(STREAM_BATCHES);

    for epoch in 1..=config.epochs {
        let batches = data::stratified_batches(&group_ids, config.batch_size, config.coverage(), &mut batch_rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let r = tuner.step(&features, &labels, &group_ids, batch).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "training diverged at epoch {epoch}: {msg}"
                )),
                other => other,
            })?;
            total += r.objective;
        }
        check_finite(tuner.model())?;
        let row = record(epoch, tuner.model(), Some(total / batches.len() as f64))?;
        if row.eval_accuracy > trace[best_epoch].eval_accuracy {
            best_epoch = epoch;
            best_model = tuner.model().clone();
        }
        trace.push(row);
    }

    let metrics = evaluate(&best_model, eval, config.group_key, &mut root.derive(STREAM_PROBE))?;
    Ok(RunArtifact {
        config: config.clone(),
        best_epoch,
        best_model,
        trace,
        metrics,
        trainable_params,
    })
}

/// Grid of runs: methods × ranks (LoRA methods) × lambdas (fair methods) ×
/// seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            lambdas: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            ranks: vec![4],
            seeds: vec![0, 1, 2],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("sweep needs at least one method and one seed"));
        }
        if self.methods.iter().any(|m| m.fair()) && self.lambdas.is_empty() {
            return Err(Error::invalid("fair methods need a nonempty lambda grid"));
        }
        if self.methods.iter().any(|m| m.mode() == Mode::Lora) && self.ranks.is_empty() {
            return Err(Error::invalid("LoRA methods need a nonempty rank grid"));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("sweep lambdas must be positive"));
        }
        Ok(())
    }

    /// Grid cells in deterministic order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &method in &self.methods {
            let ranks: Vec<Option<usize>> = if method.mode() == Mode::Lora {
                self.ranks.iter().map(|&r| Some(r)).collect()
            } else {
                vec![None]
            };
            let lambdas: Vec<f64> = if method.fair() { self.lambdas.clone() } else { vec![0.0] };
            for &rank in &ranks {
                for &lambda in &lambdas {
                    cells.push(SweepCell { method, rank, lambda });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub method: Method,
    pub rank: Option<usize>,
    pub lambda: f64,
}

impl SweepCell {
    /// Directory-safe name, e.g. `fairlora_r4_l0.1`.
    pub fn name(&self) -> String {
        let mut s = self.method.as_str().to_ascii_lowercase();
        if let Some(r) = self.rank {
            s.push_str(&format!("_r{r}"));
        }
        if self.method.fair() {
            s.push_str(&format!("_l{}", self.lambda));
        }
        s
    }

    pub fn config(&self, template: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.method.mode(),
            fair: self.method.fair(),
            lambda: self.lambda,
            rank: self.rank.or(template.rank),
            seed,
            ..template.clone()
        }
    }
}

/// `(seed, outcome)` for one run; a failed run keeps its error text.
pub type SeedRun = (u64, std::result::Result<RunArtifact, String>);

/// Outcome of every `(cell, seed)` run.
#[derive(Debug)]
pub struct SweepResult {
    pub cells: Vec<(SweepCell, Vec<SeedRun>)>,
}

impl SweepResult {
    /// Writes every successful run to `out/<cell>/seed_<s>/` and the
    /// aggregated report files to `out/`. Failed runs are listed in
    /// `out/failures.txt` and returned.
    pub fn write(&self, out: impl AsRef<Path>) -> Result<Vec<String>> {
        let out = out.as_ref();
        std::fs::create_dir_all(out)?;
        let mut failures = Vec::new();
        for (cell, runs) in &self.cells {
            for (seed, outcome) in runs {
                match outcome {
                    Ok(run) => run.write_dir(out.join(cell.name()).join(format!("seed_{seed}")))?,
                    Err(e) => failures.push(format!("{} seed {seed}: {e}", cell.name())),
                }
            }
        }
        let failure_file = out.join("failures.txt");
        if failures.is_empty() {
            let _ = std::fs::remove_file(&failure_file);
        } else {
            std::fs::write(&failure_file, failures.join("\n") + "\n")?;
        }
        if self.cells.iter().any(|(_, runs)| runs.iter().any(|(_, r)| r.is_ok())) {
            report::write_reports(out, out)?;
        }
        Ok(failures)
    }
}

/// Runs the whole grid. Runs are independent and execute in parallel; the
/// result order is the grid order regardless of scheduling.
pub fn sweep(spec: &SweepSpec, template: &TrainConfig, base: &MlpClassifier, dataset: &Dataset) -> Result<SweepResult> {
    spec.validate()?;
    let (train, eval) = data::split(
        dataset,
        template.train_fraction,
        &mut SeededRng::new(template.split_seed),
        true,
    )?;
    let cells = spec.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes: Vec<std::result::Result<RunArtifact, String>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let config = cells[c].config(template, seed);
            finetune_split(&config, base, &train, &eval).map_err(|e| e.to_string())
        })
        .collect();
    let mut grouped: Vec<(SweepCell, Vec<SeedRun>)> =
        cells.iter().map(|&c| (c, Vec::new())).collect();
    for ((c, seed), outcome) in jobs.into_iter().zip(outcomes) {
        grouped[c].1.push((seed, outcome));
    }
    Ok(SweepResult { cells: grouped })
}
