//! `fairlora` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 data or config error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairlora_core::config::RunConfig;
use fairlora_core::data::{self, Dataset};
use fairlora_core::fid;
use fairlora_core::{checkpoint, report, train, Error, ErrorKind, GroupKey, MlpClassifier, SeededRng};

#[derive(Parser)]
#[command(name = "fairlora", version, about = "Fairness-regularized low-rank fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task described by the config's synth.* keys.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides synth.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the pretraining set here.
        #[arg(long)]
        pretrain_out: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model from scratch (FFT, plain objective).
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fine-tune a base model and write a run directory.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the config's sweep grid and write per-run directories and reports.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "group")]
        group_key: GroupKey,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the metrics as CSV instead of printing them.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fréchet distance between two embedding CSVs.
    Fid {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Subsample both sets to this many rows.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate run directories into tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Defaults to the runs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    fair: Option<bool>,
    /// Dataset CSV, replacing the config's data/synth source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base checkpoint, replacing the config's base.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> fairlora_core::Result<RunConfig> {
        let mut overrides = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("rank", self.rank.map(|v| v.to_string()));
        push("mode", self.mode.clone());
        push("fair", self.fair.map(|v| v.to_string()));
        let mut config = RunConfig::load(&self.config)?.with_overrides(&overrides)?;
        if let Some(d) = &self.data {
            config.data = Some(d.clone());
        }
        if let Some(b) = &self.base {
            config.base = Some(b.clone());
        }
        Ok(config)
    }
}

fn dataset(config: &RunConfig) -> fairlora_core::Result<Dataset> {
    if let Some(path) = &config.data {
        return data::load_csv(path);
    }
    match config.synthetic_spec()? {
        Some(spec) => data::synth_generate(&spec),
        None => Err(Error::Config {
            line: 0,
            message: "no data source: set `data` or the synth.* keys".into(),
        }),
    }
}

fn pretrained(config: &RunConfig) -> fairlora_core::Result<MlpClassifier> {
    let spec = config.pretrain_spec()?.ok_or_else(|| Error::Config {
        line: 0,
        message: "no base checkpoint and no synth.* keys to pretrain from".into(),
    })?;
    train::pretrain(&config.pretrain_config(), &data::synth_generate(&spec)?)
}

fn base(config: &RunConfig) -> fairlora_core::Result<MlpClassifier> {
    match &config.base {
        Some(path) => checkpoint::load(path),
        None => pretrained(config),
    }
}

fn print_metrics(record: &[(String, String)]) {
    for (k, v) in record {
        println!("{k} = {v}");
    }
}

fn run(cli: Cli) -> fairlora_core::Result<()> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            pretrain_out,
            out,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let (Some(seed), Some(s)) = (seed, config.synth.as_mut()) {
                s.layout.seed = seed;
            }
            let spec = config.synthetic_spec()?.ok_or_else(|| Error::Config {
                line: 0,
                message: "synth needs the synth.* keys".into(),
            })?;
            let data = data::synth_generate(&spec)?;
            data::save_csv(&data, &out)?;
            println!("wrote {} records to {}", data.len(), out.display());
            if let Some(p) = pretrain_out {
                let spec = config.pretrain_spec()?.expect("synth section present");
                let pre = data::synth_generate(&spec)?;
                data::save_csv(&pre, &p)?;
                println!("wrote {} records to {}", pre.len(), p.display());
            }
        }
        Command::Pretrain { run } => {
            let config = run.load()?;
            let model = match &config.data {
                Some(path) => train::pretrain(&config.pretrain_config(), &data::load_csv(path)?)?,
                None => pretrained(&config)?,
            };
            if let Some(dir) = run.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            checkpoint::save(&model, &run.out)?;
            println!("wrote base checkpoint to {}", run.out.display());
        }
        Command::Finetune { run } => {
            let config = run.load()?;
            let data = dataset(&config)?;
            let base = base(&config)?;
            let artifact = train::finetune(&config.train, &base, &data)?;
            artifact.write_dir(&run.out)?;
            println!(
                "{} run written to {} (best epoch {}, eval accuracy {:.4}, {} trainable parameters)",
                config.train.method(),
                run.out.display(),
                artifact.best_epoch,
                artifact.best_eval_accuracy(),
                artifact.trainable_params
            );
        }
        Command::Sweep { run } => {
            let config = run.load()?;
            let data = dataset(&config)?;
            let base = base(&config)?;
            let result = train::sweep(&config.sweep, &config.train, &base, &data)?;
            let failures = result.write(&run.out)?;
            let total: usize = result.cells.iter().map(|(_, r)| r.len()).sum();
            println!(
                "sweep: {} of {total} runs succeeded, written to {}",
                total - failures.len(),
                run.out.display()
            );
            for f in &failures {
                eprintln!("failed: {f}");
            }
            if failures.len() == total {
                return Err(Error::Numerical("every sweep run failed".into()));
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            data: path,
            group_key,
            seed,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let data = data::load_csv(&path)?;
            let report = train::evaluate(&model, &data, group_key, &mut SeededRng::new(seed))?;
            let record = report.to_record();
            match out {
                Some(p) => write_record(&record, &p)?,
                None => print_metrics(&record),
            }
        }
        Command::Fid { a, b, n, seed } => {
            let mut sa = fid::load_embeddings(&a)?;
            let mut sb = fid::load_embeddings(&b)?;
            if let Some(n) = n {
                let mut rng = SeededRng::new(seed);
                sa = fid::subsample(&sa, n, &mut rng)?;
                sb = fid::subsample(&sb, n, &mut rng)?;
                eprintln!("subsampled both sets to n = {n} (seed {seed})");
            }
            let r = fid::fid(&sa, &sb)?;
            if r.regularized {
                eprintln!("covariance regularized with {}·I", fid::EPS_REGULARIZER);
            }
            println!("{:?}", r.distance);
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs.clone());
            let table = report::write_reports(&runs, &out)?;
            print!("{}", report::render_markdown(&table));
        }
    }
    Ok(())
}

fn write_record(record: &[(String, String)], path: &Path) -> fairlora_core::Result<()> {
    let header: Vec<&str> = record.iter().map(|r| r.0.as_str()).collect();
    let values: Vec<&str> = record.iter().map(|r| r.1.as_str()).collect();
    let quote = |xs: &[&str]| {
        xs.iter()
            .map(|x| if x.contains(',') { format!("\"{x}\"") } else { x.to_string() })
            .collect::<Vec<_>>()
            .join(",")
    };
    std::fs::write(path, format!("{}\n{}\n", quote(&header), quote(&values)))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Data => ExitCode::from(2),
                ErrorKind::Numerical => ExitCode::from(3),
            }
        }
    }
}
