//! Results tables from run directories.
//!
//! A run directory holds `config.cfg` and `metrics.csv` (one header row, one
//! value row). Runs are grouped by (model, method, rank); within a group the
//! lambda with the highest mean accuracy over seeds is kept (smaller lambda on
//! ties) and every metric is reported as mean ± sample std over its seeds.
//! Only lambdas with the full seed count compete, so a setting where some
//! seeds diverged cannot win on its surviving runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::Method;

/// A metric column of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Column {
    pub key: &'static str,
    pub title: &'static str,
    pub higher_is_better: bool,
    /// Rendered ×100.
    pub percent: bool,
}

pub const COLUMNS: [Column; 7] = [
    Column { key: "accuracy", title: "Accuracy", higher_is_better: true, percent: true },
    Column { key: "f1_min", title: "F1 Min", higher_is_better: true, percent: true },
    Column { key: "recall_min", title: "Recall Min", higher_is_better: true, percent: true },
    Column { key: "delta_f1", title: "ΔF1", higher_is_better: false, percent: true },
    Column { key: "eod_max", title: "EOD_max", higher_is_better: false, percent: true },
    Column { key: "sensitive_accuracy", title: "Sensitive Acc", higher_is_better: false, percent: true },
    Column {
        key: "loss_variance_across_groups",
        title: "Group-Loss Variance",
        higher_is_better: false,
        percent: false,
    },
];

impl Column {
    pub fn header(&self) -> String {
        format!("{} ({})", self.title, if self.higher_is_better { "↑" } else { "↓" })
    }
}

/// One run's identity and scalar metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub path: PathBuf,
    pub model: String,
    pub method: Method,
    pub rank: Option<usize>,
    pub lambda: f64,
    pub seed: u64,
    pub values: BTreeMap<String, Option<f64>>,
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot aggregate zero values"));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Ok(Self { mean, std, n })
    }

    pub fn render(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub method: Method,
    pub rank: Option<usize>,
    pub lambda: f64,
    pub seeds: usize,
    /// Aligned with [`COLUMNS`]; already scaled for display.
    pub cells: Vec<Option<Aggregate>>,
}

impl TableRow {
    pub fn label(&self) -> String {
        match self.rank {
            Some(r) => format!("{} r={r}", self.method),
            None => self.method.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<TableRow>,
}

fn parse_metrics(path: &Path) -> Result<BTreeMap<String, Option<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data { line: 1, message: e.to_string() })?
        .clone();
    let row = rdr
        .records()
        .next()
        .ok_or_else(|| Error::Data {
            line: 2,
            message: format!("{}: no value row", path.display()),
        })?
        .map_err(|e| Error::Data { line: 2, message: e.to_string() })?;
    let mut out = BTreeMap::new();
    for col in COLUMNS {
        let Some(i) = headers.iter().position(|h| h == col.key) else {
            continue;
        };
        let raw = row.get(i).unwrap_or("");
        let v = if raw.is_empty() {
            None
        } else {
            Some(raw.parse::<f64>().map_err(|_| Error::Data {
                line: 2,
                message: format!("{}: `{}` is not a number", path.display(), col.key),
            })?)
        };
        out.insert(col.key.to_string(), v);
    }
    Ok(out)
}

fn find_run_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    if dir.join("config.cfg").is_file() && dir.join("metrics.csv").is_file() {
        out.push(dir.to_path_buf());
    }
    for e in entries {
        if e.is_dir() {
            find_run_dirs(&e, out)?;
        }
    }
    Ok(())
}

/// Every run directory below `root`, in sorted path order.
pub fn collect_runs(root: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    find_run_dirs(root, &mut dirs)?;
    dirs.into_iter()
        .map(|d| {
            let config = RunConfig::load(d.join("config.cfg"))?.train;
            Ok(RunRecord {
                path: d.strip_prefix(root).unwrap_or(&d).to_path_buf(),
                model: config.model_name.clone(),
                method: config.method(),
                rank: if config.mode == crate::model::Mode::Lora { config.rank } else { None },
                lambda: config.lambda,
                seed: config.seed,
                values: parse_metrics(&d.join("metrics.csv"))?,
            })
        })
        .collect()
}

type CellKey = (String, Method, Option<usize>);

/// Aggregates runs into one row per (model, method, rank).
pub fn make_table(runs: &[RunRecord]) -> Result<ReportTable> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to report"));
    }
    let mut by_cell: BTreeMap<CellKey, BTreeMap<u64, Vec<&RunRecord>>> = BTreeMap::new();
    for r in runs {
        by_cell
            .entry((r.model.clone(), r.method, r.rank))
            .or_default()
            .entry(r.lambda.to_bits())
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((model, method, rank), lambdas) in by_cell {
        let mut best: Option<TableRow> = None;
        let full = lambdas.values().map(Vec::len).max().unwrap_or(0);
        for group in lambdas.values().filter(|g| g.len() == full) {
            let row = aggregate_row(&model, method, rank, group)?;
            let acc = |r: &TableRow| r.cells[0].map_or(f64::NEG_INFINITY, |a| a.mean);
            let better = match &best {
                None => true,
                Some(b) => acc(&row) > acc(b) || (acc(&row) == acc(b) && row.lambda < b.lambda),
            };
            if better {
                best = Some(row);
            }
        }
        rows.extend(best);
    }
    Ok(ReportTable { rows })
}

fn aggregate_row(model: &str, method: Method, rank: Option<usize>, runs: &[&RunRecord]) -> Result<TableRow> {
    let mut cells = Vec::with_capacity(COLUMNS.len());
    for col in COLUMNS {
        let values: Vec<Option<f64>> = runs
            .iter()
            .map(|r| r.values.get(col.key).copied().flatten())
            .collect();
        let present = values.iter().filter(|v| v.is_some()).count();
        if present != 0 && present != values.len() {
            return Err(Error::invalid(format!(
                "`{}` is reported by {present} of {} runs of {method} (model {model})",
                col.key,
                values.len()
            )));
        }
        cells.push(if present == 0 {
            None
        } else {
            let scale = if col.percent { 100.0 } else { 1.0 };
            let v: Vec<f64> = values.into_iter().flatten().map(|v| v * scale).collect();
            Some(Aggregate::from_values(&v)?)
        });
    }
    Ok(TableRow {
        model: model.to_string(),
        method,
        rank,
        lambda: runs[0].lambda,
        seeds: runs.len(),
        cells,
    })
}

/// Best mean per column within each model block; ties are all marked.
fn best_flags(table: &ReportTable) -> Vec<Vec<bool>> {
    let mut flags = vec![vec![false; COLUMNS.len()]; table.rows.len()];
    let mut blocks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        blocks.entry(&r.model).or_default().push(i);
    }
    for idx in blocks.values() {
        for (c, col) in COLUMNS.iter().enumerate() {
            let means: Vec<(usize, f64)> = idx
                .iter()
                .filter_map(|&i| table.rows[i].cells[c].map(|a| (i, a.mean)))
                .collect();
            let target = if col.higher_is_better {
                means.iter().map(|m| m.1).reduce(f64::max)
            } else {
                means.iter().map(|m| m.1).reduce(f64::min)
            };
            if let Some(t) = target {
                for (i, m) in means {
                    if m == t {
                        flags[i][c] = true;
                    }
                }
            }
        }
    }
    flags
}

fn fmt_lambda(row: &TableRow) -> String {
    if row.method.fair() {
        row.lambda.to_string()
    } else {
        "-".into()
    }
}

fn fmt_rank(row: &TableRow) -> String {
    row.rank.map_or("-".into(), |r| r.to_string())
}

pub fn render_markdown(table: &ReportTable) -> String {
    let flags = best_flags(table);
    let mut s = String::new();
    let headers: Vec<String> = COLUMNS.iter().map(Column::header).collect();
    let _ = writeln!(s, "| Model | Method | Rank | λ | Seeds | {} |", headers.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(5 + COLUMNS.len()));
    for (row, f) in table.rows.iter().zip(&flags) {
        let cells: Vec<String> = row
            .cells
            .iter()
            .zip(f)
            .map(|(c, &bold)| match c {
                None => "n/a".into(),
                Some(a) if bold => format!("**{}**", a.render()),
                Some(a) => a.render(),
            })
            .collect();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            row.model,
            row.method,
            fmt_rank(row),
            fmt_lambda(row),
            row.seeds,
            cells.join(" | ")
        );
    }
    s
}

/// Machine-readable table: mean and std columns per metric, unrounded.
pub fn render_csv(table: &ReportTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "method".into(), "rank".into(), "lambda".into(), "seeds".into()];
    for col in COLUMNS {
        header.push(format!("{}_mean", col.key));
        header.push(format!("{}_std", col.key));
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in &table.rows {
        let mut rec = vec![
            row.model.clone(),
            row.method.to_string(),
            row.rank.map_or(String::new(), |r| r.to_string()),
            row.lambda.to_string(),
            row.seeds.to_string(),
        ];
        for c in &row.cells {
            match c {
                Some(a) => {
                    rec.push(a.mean.to_string());
                    rec.push(a.std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
        .map_err(|e| Error::invalid(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Per-model min-max scores in `[0, 1]` where 1 is best for every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedComparison {
    pub model: String,
    /// Row labels, e.g. `FairLoRA r=4`.
    pub entries: Vec<String>,
    /// Metric key → score per entry (`None` where the metric is missing).
    pub scores: BTreeMap<&'static str, Vec<Option<f64>>>,
    /// Metrics whose values were all equal; every entry scores 1 there.
    pub constant: Vec<&'static str>,
}

/// Rescales each metric so that the best entry scores 1 and the worst 0;
/// lower-is-better metrics are inverted first.
pub fn normalize_for_comparison(table: &ReportTable) -> Result<Vec<NormalizedComparison>> {
    let mut blocks: BTreeMap<&str, Vec<&TableRow>> = BTreeMap::new();
    for r in &table.rows {
        blocks.entry(&r.model).or_default().push(r);
    }
    let mut out = Vec::new();
    for (model, rows) in blocks {
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "model `{model}` has {} method(s); normalization needs at least 2",
                rows.len()
            )));
        }
        let mut scores = BTreeMap::new();
        let mut constant = Vec::new();
        for (c, col) in COLUMNS.iter().enumerate() {
            let raw: Vec<Option<f64>> = rows.iter().map(|r| r.cells[c].map(|a| a.mean)).collect();
            let present: Vec<f64> = raw.iter().flatten().copied().collect();
            if present.is_empty() {
                continue;
            }
            if present.len() < 2 {
                return Err(Error::invalid(format!(
                    "`{}` is available for only one method of model `{model}`",
                    col.key
                )));
            }
            let max = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = present.iter().cloned().fold(f64::INFINITY, f64::min);
            let oriented = |v: f64| if col.higher_is_better { v } else { max - v };
            let (lo, hi) = if col.higher_is_better { (min, max) } else { (0.0, max - min) };
            let col_scores = if hi == lo {
                constant.push(col.key);
                raw.iter().map(|v| v.map(|_| 1.0)).collect()
            } else {
                raw.iter().map(|v| v.map(|v| (oriented(v) - lo) / (hi - lo))).collect()
            };
            scores.insert(col.key, col_scores);
        }
        out.push(NormalizedComparison {
            model: model.to_string(),
            entries: rows.iter().map(|r| r.label()).collect(),
            scores,
            constant,
        });
    }
    Ok(out)
}

pub fn render_normalized_csv(blocks: &[NormalizedComparison]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "entry".into()];
    header.extend(COLUMNS.iter().map(|c| c.key.to_string()));
    header.push("constant_metrics".into());
    w.write_record(&header).map_err(csv_err)?;
    for b in blocks {
        for (i, entry) in b.entries.iter().enumerate() {
            let mut rec = vec![b.model.clone(), entry.clone()];
            for col in COLUMNS {
                rec.push(
                    b.scores
                        .get(col.key)
                        .and_then(|v| v[i])
                        .map_or(String::new(), |x| x.to_string()),
                );
            }
            rec.push(b.constant.join(";"));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
        .map_err(|e| Error::invalid(e.to_string()))
}

/// One row per run with its identity and scalar metrics.
pub fn render_runs_csv(runs: &[RunRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "run".to_string(),
        "model".into(),
        "method".into(),
        "rank".into(),
        "lambda".into(),
        "seed".into(),
    ];
    header.extend(COLUMNS.iter().map(|c| c.key.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for r in runs {
        let mut rec = vec![
            r.path.to_string_lossy().replace('\\', "/"),
            r.model.clone(),
            r.method.to_string(),
            r.rank.map_or(String::new(), |x| x.to_string()),
            r.lambda.to_string(),
            r.seed.to_string(),
        ];
        for col in COLUMNS {
            rec.push(
                r.values
                    .get(col.key)
                    .copied()
                    .flatten()
                    .map_or(String::new(), |v| v.to_string()),
            );
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Files written by [`write_reports`].
pub const REPORT_FILES: [&str; 4] = ["metrics.csv", "table.md", "table.csv", "normalized.csv"];

/// Collects runs below `runs_dir` and writes the aggregated files into
/// `out_dir`. `normalized.csv` is skipped when some model has a single
/// method. Returns the table.
pub fn write_reports(runs_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<ReportTable> {
    let runs = collect_runs(runs_dir)?;
    let table = make_table(&runs)?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), render_runs_csv(&runs)?)?;
    std::fs::write(out.join("table.md"), render_markdown(&table))?;
    std::fs::write(out.join("table.csv"), render_csv(&table)?)?;
    match normalize_for_comparison(&table) {
        Ok(blocks) => std::fs::write(out.join("normalized.csv"), render_normalized_csv(&blocks)?)?,
        Err(_) => {
            let _ = std::fs::remove_file(out.join("normalized.csv"));
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(method: Method, lambda: f64, seed: u64, acc: f64, var: Option<f64>) -> RunRecord {
        let mut values = BTreeMap::new();
        for col in COLUMNS {
            values.insert(col.key.to_string(), Some(0.5));
        }
        values.insert("accuracy".into(), Some(acc));
        values.insert("loss_variance_across_groups".into(), var);
        RunRecord {
            path: PathBuf::from(format!("{method}_{lambda}_{seed}")),
            model: "m".into(),
            method,
            rank: method.fair().then_some(4).or((method == Method::Lora).then_some(4)),
            lambda,
            seed,
            values,
        }
    }

    #[test]
    fn aggregate_matches_hand_values() {
        let a = Aggregate::from_values(&[97.35, 97.40, 97.30]).unwrap();
        assert!((a.mean - 97.35).abs() < 1e-12);
        assert!((a.std - 0.05).abs() < 1e-12);
        assert_eq!(a.render(), "97.35 ± 0.05");
        assert_eq!(Aggregate::from_values(&[1.0]).unwrap().std, 0.0);
    }

    #[test]
    fn best_lambda_by_mean_accuracy() {
        let runs = vec![
            run(Method::FairLora, 0.1, 0, 0.80, Some(0.1)),
            run(Method::FairLora, 0.1, 1, 0.82, Some(0.1)),
            run(Method::FairLora, 1.0, 0, 0.90, Some(0.1)),
            run(Method::FairLora, 1.0, 1, 0.70, Some(0.1)),
            run(Method::FairLora, 10.0, 0, 0.85, Some(0.1)),
            run(Method::FairLora, 10.0, 1, 0.84, Some(0.1)),
        ];
        let t = make_table(&runs).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].lambda, 10.0);
        assert!((t.rows[0].cells[0].unwrap().mean - 84.5).abs() < 1e-9);
    }

    #[test]
    fn lambdas_missing_seeds_are_not_selected() {
        let runs = vec![
            run(Method::FairLora, 0.1, 0, 0.80, Some(0.1)),
            run(Method::FairLora, 0.1, 1, 0.80, Some(0.1)),
            run(Method::FairLora, 10.0, 1, 0.95, Some(0.1)),
        ];
        assert_eq!(make_table(&runs).unwrap().rows[0].lambda, 0.1);
    }

    #[test]
    fn inconsistent_metrics_rejected() {
        let runs = vec![run(Method::Lora, 0.0, 0, 0.8, Some(0.1)), run(Method::Lora, 0.0, 1, 0.8, None)];
        assert!(make_table(&runs).is_err());
    }

    #[test]
    fn normalization_orients_and_flags() {
        let runs = vec![
            run(Method::Lora, 0.0, 0, 0.8, Some(0.2)),
            run(Method::FairLora, 1.0, 0, 0.9, Some(0.1)),
            run(Method::Fft, 0.0, 0, 0.85, Some(0.3)),
        ];
        let t = make_table(&runs).unwrap();
        let n = normalize_for_comparison(&t).unwrap();
        assert_eq!(n.len(), 1);
        let labels = &n[0].entries;
        let idx = |l: &str| labels.iter().position(|x| x == l).unwrap();
        let acc = &n[0].scores["accuracy"];
        assert_eq!(acc[idx("FairLoRA r=4")], Some(1.0));
        assert_eq!(acc[idx("LoRA r=4")], Some(0.0));
        let var = &n[0].scores["loss_variance_across_groups"];
        assert_eq!(var[idx("FairLoRA r=4")], Some(1.0));
        assert_eq!(var[idx("FFT")], Some(0.0));
        assert!(n[0].constant.contains(&"f1_min"));
        assert!(n[0].scores["f1_min"].iter().all(|v| *v == Some(1.0)));

        let single = make_table(&runs[..1]).unwrap();
        assert!(normalize_for_comparison(&single).is_err());
    }

    #[test]
    fn markdown_bolds_best() {
        let runs = vec![run(Method::Lora, 0.0, 0, 0.8, Some(0.2)), run(Method::FairLora, 1.0, 0, 0.9, Some(0.1))];
        let md = render_markdown(&make_table(&runs).unwrap());
        assert!(md.contains("Accuracy (↑)"));
        assert!(md.contains("**90.00 ± 0.00**"));
        assert!(md.contains("| 80.00 ± 0.00"));
    }
}
