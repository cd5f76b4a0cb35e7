use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zerorte::codec::{TargetStyle, TripletOrder};
use zerorte::config::{Override, RunConfig};
use zerorte::eval::ReportRow;
use zerorte::pipeline::{self, RunDir, SweepKind};
use zerorte::system::Variant;
use zerorte::{Error, ErrorKind};

/// Zero-shot relation triplet extraction: corpus synthesis, training,
/// evaluation and ablation sweeps.
#[derive(Parser, Debug)]
#[command(name = "zerorte", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into <out-dir>/data.
    Synth(Common),
    /// Split the corpus into seen/unseen partitions under <out-dir>/split.
    Split(Common),
    /// Train one variant and save its checkpoint.
    Train {
        /// tgm, metric, model or optimization.
        #[arg(long)]
        variant: Variant,
        #[command(flatten)]
        common: Common,
    },
    /// Predict and score a trained variant on the unseen test partition.
    Eval {
        /// tgm, metric, model or optimization.
        #[arg(long)]
        variant: Variant,
        #[command(flatten)]
        common: Common,
    },
    /// Train and score one system per value of a swept setting.
    Sweep {
        #[arg(long, value_name = "r|order|t|alpha")]
        kind: SweepKind,
        #[command(flatten)]
        common: Common,
    },
    /// Combine evaluated variants into one comparison table.
    Report(Common),
    /// synth, split, then train and eval every variant, then report.
    Run(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults to <out-dir>/config.frozen when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for every artifact.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of unseen relations.
    #[arg(long)]
    m: Option<usize>,
    /// Candidate relations per training prompt.
    #[arg(long)]
    r: Option<usize>,
    /// Tasks per training sample.
    #[arg(long)]
    t: Option<usize>,
    /// Matching-loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Triplet order: HTR, THR or RHT.
    #[arg(long)]
    order: Option<TripletOrder>,
    /// Target style: plain or prototype.
    #[arg(long)]
    style: Option<TargetStyle>,
    /// Any other setting, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<Override>, Error> {
        let mut out = Vec::new();
        if let Some(v) = self.seed {
            let v = i64::try_from(v).map_err(|_| Error::Config("--seed is too large".into()))?;
            out.push(Override::new("seed", v));
        }
        if let Some(v) = self.m {
            out.push(Override::new("split.m", v as i64));
        }
        if let Some(v) = self.r {
            out.push(Override::new("sampler.r", v as i64));
        }
        if let Some(v) = self.t {
            out.push(Override::new("sampler.t", v as i64));
        }
        if let Some(v) = self.alpha {
            out.push(Override::new("metric.alpha", v));
        }
        if let Some(v) = self.order {
            out.push(Override::new("codec.order", format!("{v:?}").to_uppercase()));
        }
        if let Some(v) = self.style {
            out.push(Override::new("codec.style", format!("{v:?}").to_lowercase()));
        }
        for s in &self.set {
            out.push(Override::parse(s)?);
        }
        Ok(out)
    }

    fn load(&self) -> Result<(RunConfig, RunDir), Error> {
        let dir = RunDir::new(&self.out_dir);
        let frozen = dir.frozen_config();
        let base = match &self.config {
            Some(p) => Some(p.clone()),
            None => frozen.exists().then_some(frozen),
        };
        let cfg = RunConfig::load(base.as_deref(), &self.overrides()?)?;
        Ok((cfg, dir))
    }
}

fn print_rows(rows: &[ReportRow]) {
    let width = rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
    println!("{:width$}  {:>9}  {:>9}  {:>9}", "setting", "precision", "recall", "f1");
    for r in rows {
        println!("{:width$}  {:>9.4}  {:>9.4}  {:>9.4}", r.setting, r.precision, r.recall, r.f1);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(c) => {
            let (cfg, dir) = c.load()?;
            let corpus = pipeline::run_synth(&cfg, &dir)?;
            println!("{} samples written to {}", corpus.len(), dir.corpus().display());
        }
        Command::Split(c) => {
            let (cfg, dir) = c.load()?;
            let split = pipeline::run_split(&cfg, &dir)?;
            println!(
                "train {} / validation {} / test {} written to {}",
                split.train.len(),
                split.validation.len(),
                split.test.len(),
                dir.split().display()
            );
        }
        Command::Train { variant, common } => {
            let (cfg, dir) = common.load()?;
            let log = pipeline::run_train(&cfg, &dir, variant)?;
            let best = log.selected_epoch.and_then(|e| log.epochs.iter().find(|l| l.epoch == e));
            if let Some(b) = best {
                println!("{variant}: selected epoch {} (validation F1 {:.4})", b.epoch, b.validation_f1);
            }
            println!("checkpoint written to {}", dir.checkpoint(variant).display());
        }
        Command::Eval { variant, common } => {
            let (cfg, dir) = common.load()?;
            print_rows(&pipeline::run_eval(&cfg, &dir, variant)?);
        }
        Command::Sweep { kind, common } => {
            let (cfg, dir) = common.load()?;
            print_rows(&pipeline::run_sweep(&cfg, &dir, kind)?);
        }
        Command::Report(c) => {
            let (cfg, dir) = c.load()?;
            print_rows(&pipeline::run_report(&cfg, &dir)?);
        }
        Command::Run(c) => {
            let (cfg, dir) = c.load()?;
            print_rows(&pipeline::run_all(&cfg, &dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}
