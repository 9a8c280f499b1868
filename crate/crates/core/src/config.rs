//! Run configuration files: one `key = value` per line, `#` starts a comment.
//!
//! ```text
//! mode = lora
//! fair = true
//! lambda = 1
//! rank = 4
//! hidden = 32,32
//! synth.classes = 3
//! synth.counts = 500,150,50
//! sweep.lambdas = 0.1,1,10
//! ```
//!
//! Unknown keys, repeated keys and malformed values are errors carrying the
//! line number. Relative `data`/`base` paths resolve against the file's
//! directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ClusterLayout, SyntheticSpec};
use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::model::Mode;
use crate::train::{Method, SweepSpec, TrainConfig};

/// Synthetic task description; every field has a default except `classes`,
/// `dim` and `counts`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSection {
    pub layout: ClusterLayout,
}

/// How the base model is pretrained when no `base` checkpoint is given.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    /// Per-class counts of the pretraining set; `None` gives a balanced set
    /// with the fine-tuning set's mean class size.
    pub counts: Option<Vec<usize>>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Scale of a random per-class shift of the cluster means, so the
    /// pretraining task differs from the fine-tuning one.
    pub shift: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            counts: None,
            epochs: 30,
            learning_rate: 0.05,
            shift: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    pub pretrain: PretrainSection,
    pub sweep: SweepSpec,
}

#[derive(Default)]
struct SynthDraft {
    classes: Option<usize>,
    sensitive: Option<usize>,
    dim: Option<usize>,
    counts: Option<Vec<usize>>,
    separation: Option<f64>,
    group_shift: Option<f64>,
    noise: Option<f64>,
    spurious: Option<f64>,
    spurious_dims: Option<usize>,
    seed: Option<u64>,
}

impl SynthDraft {
    fn touched(&self) -> bool {
        self.classes.is_some() || self.dim.is_some() || self.counts.is_some()
    }

    fn build(self) -> std::result::Result<SynthSection, String> {
        let classes = self.classes.ok_or("synth.classes is required")?;
        let dim = self.dim.ok_or("synth.dim is required")?;
        let counts = self.counts.ok_or("synth.counts is required")?;
        Ok(SynthSection {
            layout: ClusterLayout {
                num_classes: classes,
                num_sensitive: self.sensitive.unwrap_or(2),
                dim,
                counts,
                separation: self.separation.unwrap_or(3.0),
                group_shift: self.group_shift.unwrap_or(0.0),
                noise_std: self.noise.unwrap_or(1.0),
                spurious_strength: self.spurious.unwrap_or(0.0),
                spurious_dims: self.spurious_dims.unwrap_or(0),
                seed: self.seed.unwrap_or(0),
            },
        })
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| value(key, x.trim())).collect()
}

fn boolean(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

struct Parser {
    config: RunConfig,
    synth: SynthDraft,
    seen: BTreeSet<String>,
}

impl Parser {
    fn new() -> Self {
        Self {
            config: RunConfig::default(),
            synth: SynthDraft::default(),
            seen: BTreeSet::new(),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.config.train;
        match key {
            "mode" => t.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "fair" => t.fair = boolean(key, v)?,
            "lambda" => t.lambda = value(key, v)?,
            "rank" => t.rank = Some(value(key, v)?),
            "lr" => t.learning_rate = value(key, v)?,
            "momentum" => t.momentum = value(key, v)?,
            "epochs" => t.epochs = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "seed" => t.seed = value(key, v)?,
            "group_key" => t.group_key = v.parse().map_err(|e: Error| e.to_string())?,
            "coverage" => t.coverage = Some(boolean(key, v)?),
            "hidden" => t.hidden = list(key, v)?,
            "init_std" => t.init_std = value(key, v)?,
            "lora_scale" => t.lora_scale = value(key, v)?,
            "train_fraction" => t.train_fraction = value(key, v)?,
            "split_seed" => t.split_seed = value(key, v)?,
            "model" => t.model_name = v.to_string(),
            "selection" => {
                if v != TrainConfig::SELECTION_RULE {
                    return Err(format!(
                        "`selection`: only `{}` is supported",
                        TrainConfig::SELECTION_RULE
                    ));
                }
            }
            "data" => self.config.data = Some(PathBuf::from(v)),
            "base" => self.config.base = Some(PathBuf::from(v)),
            "synth.classes" => self.synth.classes = Some(value(key, v)?),
            "synth.sensitive" => self.synth.sensitive = Some(value(key, v)?),
            "synth.dim" => self.synth.dim = Some(value(key, v)?),
            "synth.counts" => self.synth.counts = Some(list(key, v)?),
            "synth.separation" => self.synth.separation = Some(value(key, v)?),
            "synth.group_shift" => self.synth.group_shift = Some(value(key, v)?),
            "synth.noise" => self.synth.noise = Some(value(key, v)?),
            "synth.spurious" => self.synth.spurious = Some(value(key, v)?),
            "synth.spurious_dims" => self.synth.spurious_dims = Some(value(key, v)?),
            "synth.seed" => self.synth.seed = Some(value(key, v)?),
            "pretrain.counts" => self.config.pretrain.counts = Some(list(key, v)?),
            "pretrain.epochs" => self.config.pretrain.epochs = value(key, v)?,
            "pretrain.lr" => self.config.pretrain.learning_rate = value(key, v)?,
            "pretrain.shift" => self.config.pretrain.shift = value(key, v)?,
            "sweep.methods" => {
                self.config.sweep.methods = v
                    .split(',')
                    .map(|m| m.trim().parse::<Method>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "sweep.lambdas" => self.config.sweep.lambdas = list(key, v)?,
            "sweep.ranks" => self.config.sweep.ranks = list(key, v)?,
            "sweep.seeds" => self.config.sweep.seeds = list(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn line(&mut self, n: usize, raw: &str) -> Result<()> {
        let text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            return Ok(());
        }
        let err = |message: String| Error::Config { line: n, message };
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{text}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !self.seen.insert(k.to_string()) {
            return Err(err(format!("key `{k}` given twice")));
        }
        self.set(k, v).map_err(err)
    }

    fn finish(mut self) -> Result<RunConfig> {
        if self.synth.touched() {
            let section = std::mem::take(&mut self.synth)
                .build()
                .map_err(|message| Error::Config { line: 0, message })?;
            self.config.synth = Some(section);
        }
        Ok(self.config)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Parser::new();
        for (i, raw) in text.lines().enumerate() {
            p.line(i + 1, raw)?;
        }
        p.finish()
    }

    /// Reads a config file; relative `data` and `base` paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = Self::parse(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data, &mut config.base].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(config)
    }

    /// Applies `key = value` overrides (e.g. from the command line) on top
    /// of this config, with the same parsing rules as a file.
    pub fn with_overrides(self, overrides: &[(String, String)]) -> Result<Self> {
        let mut p = Parser {
            synth: SynthDraft::default(),
            config: self,
            seen: BTreeSet::new(),
        };
        for (k, v) in overrides {
            if k.starts_with("synth.") {
                return Err(Error::Config {
                    line: 0,
                    message: format!("`{k}` cannot be overridden"),
                });
            }
            p.set(k, v).map_err(|message| Error::Config { line: 0, message })?;
        }
        Ok(p.config)
    }

    /// Fine-tuning task generated from the `synth.*` keys.
    pub fn synthetic_spec(&self) -> Result<Option<SyntheticSpec>> {
        self.synth
            .as_ref()
            .map(|s| SyntheticSpec::clusters(&s.layout))
            .transpose()
    }

    /// Pretraining task: same clusters with shifted class means, its own
    /// counts and its own noise stream.
    pub fn pretrain_spec(&self) -> Result<Option<SyntheticSpec>> {
        let Some(mut spec) = self.synthetic_spec()? else {
            return Ok(None);
        };
        let (c, s) = (spec.num_classes, spec.num_sensitive);
        let per_class = match &self.pretrain.counts {
            Some(v) if v.len() == c => v.clone(),
            Some(v) => {
                return Err(Error::Config {
                    line: 0,
                    message: format!("pretrain.counts needs {c} values, got {}", v.len()),
                })
            }
            None => {
                let total: usize = spec.counts.iter().sum();
                vec![total.div_ceil(c); c]
            }
        };
        spec.counts = per_class
            .iter()
            .flat_map(|&n| (0..s).map(move |j| n / s + usize::from(j < n % s)))
            .collect();
        let mut shift_rng = SeededRng::new(spec.seed).derive(7);
        for class in 0..c {
            let delta: Vec<f64> = (0..spec.dim).map(|_| self.pretrain.shift * shift_rng.normal()).collect();
            for cell in class * s..(class + 1) * s {
                for (m, d) in spec.means[cell].iter_mut().zip(&delta) {
                    *m += d;
                }
            }
        }
        spec.seed = spec.seed.wrapping_add(1);
        spec.validate()?;
        Ok(Some(spec))
    }

    /// Training config for the pretraining stage.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            mode: Mode::Fft,
            fair: false,
            lambda: 0.0,
            coverage: None,
            epochs: self.pretrain.epochs,
            learning_rate: self.pretrain.learning_rate,
            ..self.train.clone()
        }
    }
}

/// Serializes a training config in the file format; [`RunConfig::parse`]
/// reads it back to an equal `TrainConfig`.
pub fn train_config_text(t: &TrainConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("model", t.model_name.clone());
    kv("mode", t.mode.as_str().into());
    kv("fair", t.fair.to_string());
    kv("lambda", t.lambda.to_string());
    if let Some(r) = t.rank {
        kv("rank", r.to_string());
    }
    kv("lr", t.learning_rate.to_string());
    kv("momentum", t.momentum.to_string());
    kv("epochs", t.epochs.to_string());
    kv("batch_size", t.batch_size.to_string());
    kv("seed", t.seed.to_string());
    kv("group_key", t.group_key.as_str().into());
    if let Some(c) = t.coverage {
        kv("coverage", c.to_string());
    }
    kv("hidden", join(&t.hidden));
    kv("init_std", t.init_std.to_string());
    kv("lora_scale", t.lora_scale.to_string());
    kv("train_fraction", t.train_fraction.to_string());
    kv("split_seed", t.split_seed.to_string());
    kv("selection", TrainConfig::SELECTION_RULE.into());
    s
}
