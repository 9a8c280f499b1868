//! Datasets: CSV ingestion, stratified splits, group-covering mini-batches
//! and synthetic group-imbalanced Gaussian tasks.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

/// Which id a record is grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKey {
    /// The class label.
    Label,
    /// The `group` column (defaults to the label).
    Group,
    /// The sensitive attribute.
    Sensitive,
}

impl GroupKey {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Label => "label",
            GroupKey::Group => "group",
            GroupKey::Sensitive => "sensitive",
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" | "class" => Ok(GroupKey::Label),
            "group" => Ok(GroupKey::Group),
            "sensitive" => Ok(GroupKey::Sensitive),
            other => Err(Error::invalid(format!(
                "unknown group key `{other}` (expected label, group or sensitive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub features: Vec<f64>,
    pub label: usize,
    pub group: usize,
    pub sensitive: Option<usize>,
}

impl DatasetRecord {
    pub fn key(&self, key: GroupKey) -> Option<usize> {
        match key {
            GroupKey::Label => Some(self.label),
            GroupKey::Group => Some(self.group),
            GroupKey::Sensitive => self.sensitive,
        }
    }
}

/// Records sharing one feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<DatasetRecord>,
    dim: usize,
}

impl Dataset {
    pub fn new(records: Vec<DatasetRecord>) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.features.len());
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(Error::invalid(format!(
                    "record {i} has {} features, expected {dim}",
                    r.features.len()
                )));
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("record {i} has a non-finite feature")));
            }
        }
        Ok(Self { records, dim })
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_matrix(&self) -> Matrix {
        let data = self.records.iter().flat_map(|r| r.features.iter().copied()).collect();
        Matrix::new(self.records.len(), self.dim, data).expect("features validated on construction")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// One id per record; fails if any record lacks the key.
    pub fn ids(&self, key: GroupKey) -> Result<Vec<usize>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.key(key)
                    .ok_or_else(|| Error::invalid(format!("record {i} has no `{key}` value")))
            })
            .collect()
    }

    pub fn sensitive_ids(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.sensitive).collect()
    }

    /// `max label + 1`.
    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            dim: self.dim,
        }
    }
}

/// Reads a dataset with header `feature_0..feature_{d-1},label[,group][,sensitive]`.
/// A missing `group` column defaults to the label; an empty `sensitive` cell
/// means "no sensitive id".
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv(reader: impl Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let label_col = column("label").ok_or_else(|| Error::Data {
        line: 1,
        message: "missing `label` column".into(),
    })?;
    let group_col = column("group");
    let sensitive_col = column("sensitive");
    let mut feature_cols = Vec::new();
    while let Some(c) = column(&format!("feature_{}", feature_cols.len())) {
        feature_cols.push(c);
    }
    let known = feature_cols.len() + 1 + group_col.is_some() as usize + sensitive_col.is_some() as usize;
    if known != headers.len() {
        return Err(Error::Data {
            line: 1,
            message: format!(
                "unexpected columns in header {headers:?}; features must be numbered feature_0.."
            ),
        });
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(e, 0))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let num = |c: usize| -> Result<f64> {
            row[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Data {
                line,
                message: format!("column `{}`: `{}` is not a finite number", headers[c], &row[c]),
            })
        };
        let id = |c: usize| -> Result<usize> {
            row[c].parse::<usize>().map_err(|_| Error::Data {
                line,
                message: format!("column `{}`: `{}` is not a non-negative integer", headers[c], &row[c]),
            })
        };
        let features = feature_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let label = id(label_col)?;
        let group = match group_col {
            Some(c) => id(c)?,
            None => label,
        };
        let sensitive = match sensitive_col {
            Some(c) if !row[c].is_empty() => Some(id(c)?),
            _ => None,
        };
        records.push(DatasetRecord {
            features,
            label,
            group,
            sensitive,
        });
    }
    Dataset::new(records)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::Data {
        line,
        message: e.to_string(),
    }
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv(dataset, std::io::BufWriter::new(file))
}

/// Writes every column, including `group` and (when any record has one)
/// `sensitive`. Floats use the shortest round-tripping representation.
pub fn write_csv(dataset: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_sensitive = dataset.records.iter().any(|r| r.sensitive.is_some());
    let mut header: Vec<String> = (0..dataset.dim).map(|i| format!("feature_{i}")).collect();
    header.extend(["label".into(), "group".into()]);
    if with_sensitive {
        header.push("sensitive".into());
    }
    w.write_record(&header).map_err(|e| csv_error(e, 0))?;
    for r in &dataset.records {
        let mut row: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        row.push(r.label.to_string());
        row.push(r.group.to_string());
        if with_sensitive {
            row.push(r.sensitive.map(|s| s.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}

/// Number of eval samples taken from `n` when `train_fraction` goes to train:
/// `floor(n · (1 − fraction))`, with a tiny epsilon so 0.8 of 100 is 20.
pub fn eval_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64) * (1.0 - train_fraction) + 1e-9).floor() as usize
}

/// Splits into `(train, eval)`. With `stratify`, every class is split
/// separately with [`eval_count`]; otherwise the whole set is. Both sides
/// keep the original record order.
pub fn split(
    dataset: &Dataset,
    train_fraction: f64,
    rng: &mut SeededRng,
    stratify: bool,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let strata: BTreeMap<usize, Vec<usize>> = if stratify {
        partition(dataset.records.iter().map(|r| r.label))
    } else {
        BTreeMap::from([(0, (0..dataset.len()).collect())])
    };
    let mut is_eval = vec![false; dataset.len()];
    for (class, mut members) in strata {
        if stratify && members.len() < 2 {
            return Err(Error::invalid(format!(
                "class {class} has {} sample(s); stratified split needs at least 2",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for &i in &members[..eval_count(members.len(), train_fraction)] {
            is_eval[i] = true;
        }
    }
    let (eval_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| is_eval[i]);
    Ok((dataset.subset(&train_idx), dataset.subset(&eval_idx)))
}

fn partition(ids: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut parts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in ids.enumerate() {
        parts.entry(g).or_default().push(i);
    }
    parts
}

/// One epoch of mini-batches over `group_ids.len()` samples.
///
/// Without coverage this is a shuffled permutation cut into consecutive
/// chunks. With coverage, every full batch first receives one sample of each
/// group, then the remaining samples are dealt out at random; this needs
/// `batch_size ≥ #groups` and every group to have at least one sample per full
/// batch. Either way the epoch is a permutation of all indices and only the
/// last batch may be short.
pub fn stratified_batches(
    group_ids: &[usize],
    batch_size: usize,
    coverage: bool,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<usize>>> {
    let n = group_ids.len();
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let full = n / batch_size;
    let rest = n % batch_size;
    let mut sizes = vec![batch_size; full];
    if rest > 0 {
        sizes.push(rest);
    }

    if !coverage {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut it = order.into_iter();
        return Ok(sizes.iter().map(|&s| it.by_ref().take(s).collect()).collect());
    }

    let groups = partition(group_ids.iter().copied());
    if batch_size < groups.len() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} cannot cover {} groups",
            groups.len()
        )));
    }
    if let Some((g, members)) = groups.iter().find(|(_, m)| m.len() < full) {
        return Err(Error::invalid(format!(
            "group {g} has {} samples, fewer than the {full} full batches it must cover",
            members.len()
        )));
    }

    let mut batches: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let mut pool = Vec::with_capacity(n);
    for (_, mut members) in groups {
        rng.shuffle(&mut members);
        for (b, &i) in members.iter().take(full).enumerate() {
            batches[b].push(i);
        }
        pool.extend_from_slice(&members[full.min(members.len())..]);
    }
    rng.shuffle(&mut pool);
    let mut it = pool.into_iter();
    for (batch, &size) in batches.iter_mut().zip(&sizes) {
        let need = size - batch.len();
        batch.extend(it.by_ref().take(need));
        rng.shuffle(batch);
    }
    Ok(batches)
}

/// Gaussian clusters, one per `(class, sensitive group)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_sensitive: usize,
    pub dim: usize,
    /// Samples per cell, row-major by class: `counts[c * num_sensitive + s]`.
    pub counts: Vec<usize>,
    /// Mean per cell, same layout as `counts`.
    pub means: Vec<Vec<f64>>,
    /// Isotropic noise standard deviation shared by all cells.
    pub noise_std: f64,
    /// Correlation in `[0, 1]` between the sensitive id and the last
    /// `spurious_dims` coordinates, which replace the cluster features there.
    pub spurious_strength: f64,
    pub spurious_dims: usize,
    pub seed: u64,
}

/// Compact parameters from which [`SyntheticSpec::clusters`] draws the means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayout {
    pub num_classes: usize,
    pub num_sensitive: usize,
    pub dim: usize,
    /// Either one count per class (spread evenly over sensitive groups, any
    /// remainder to the lowest ids) or one per cell.
    pub counts: Vec<usize>,
    /// Scale of the random class centers.
    pub separation: f64,
    /// Scale of the random per-sensitive-group offsets added to the centers.
    pub group_shift: f64,
    pub noise_std: f64,
    pub spurious_strength: f64,
    pub spurious_dims: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn clusters(layout: &ClusterLayout) -> Result<Self> {
        let (c, s, d) = (layout.num_classes, layout.num_sensitive, layout.dim);
        if c == 0 || s == 0 || d == 0 {
            return Err(Error::invalid("classes, sensitive groups and dim must be positive"));
        }
        let counts = if layout.counts.len() == c * s {
            layout.counts.clone()
        } else if layout.counts.len() == c {
            layout
                .counts
                .iter()
                .flat_map(|&n| (0..s).map(move |j| n / s + usize::from(j < n % s)))
                .collect()
        } else {
            return Err(Error::invalid(format!(
                "expected {c} or {} counts, got {}",
                c * s,
                layout.counts.len()
            )));
        };
        let root = SeededRng::new(layout.seed);
        let mut center_rng = root.derive(1);
        let mut offset_rng = root.derive(2);
        let centers: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| layout.separation * center_rng.normal()).collect())
            .collect();
        let offsets: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..d).map(|_| layout.group_shift * offset_rng.normal()).collect())
            .collect();
        let means = (0..c * s)
            .map(|cell| {
                let (ci, si) = (cell / s, cell % s);
                centers[ci].iter().zip(&offsets[si]).map(|(a, b)| a + b).collect()
            })
            .collect();
        let spec = Self {
            num_classes: c,
            num_sensitive: s,
            dim: d,
            counts,
            means,
            noise_std: layout.noise_std,
            spurious_strength: layout.spurious_strength,
            spurious_dims: layout.spurious_dims,
            seed: layout.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.num_classes * self.num_sensitive;
        if cells == 0 || self.dim == 0 {
            return Err(Error::invalid("empty synthetic layout"));
        }
        if self.counts.len() != cells || self.means.len() != cells {
            return Err(Error::invalid(format!(
                "need {cells} counts and means, got {} and {}",
                self.counts.len(),
                self.means.len()
            )));
        }
        if self.means.iter().any(|m| m.len() != self.dim || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("every cell mean must have `dim` finite entries"));
        }
        for class in 0..self.num_classes {
            let total: usize = self.counts[class * self.num_sensitive..(class + 1) * self.num_sensitive]
                .iter()
                .sum();
            if total == 0 {
                return Err(Error::invalid(format!("class {class} has no samples")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(Error::invalid("spurious strength must lie in [0, 1]"));
        }
        if self.spurious_dims > self.dim {
            return Err(Error::invalid("more spurious dims than features"));
        }
        Ok(())
    }

    pub fn count(&self, class: usize, sensitive: usize) -> usize {
        self.counts[class * self.num_sensitive + sensitive]
    }
}

/// Draws the dataset described by `spec`; records come out shuffled.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed).derive(3);
    let s = spec.num_sensitive;
    let rho = spec.spurious_strength;
    let residual = (1.0 - rho * rho).sqrt();
    let mut records = Vec::with_capacity(spec.counts.iter().sum());
    for cell in 0..spec.counts.len() {
        let (class, sens) = (cell / s, cell % s);
        // sensitive id mapped onto [-1, 1]
        let code = if s > 1 {
            2.0 * sens as f64 / (s - 1) as f64 - 1.0
        } else {
            0.0
        };
        for _ in 0..spec.counts[cell] {
            let mut features: Vec<f64> = spec.means[cell]
                .iter()
                .map(|m| m + spec.noise_std * rng.normal())
                .collect();
            for f in features.iter_mut().skip(spec.dim - spec.spurious_dims) {
                *f = rho * code + residual * rng.normal();
            }
            records.push(DatasetRecord {
                features,
                label: class,
                group: class,
                sensitive: Some(sens),
            });
        }
    }
    rng.shuffle(&mut records);
    Dataset::new(records)
}
