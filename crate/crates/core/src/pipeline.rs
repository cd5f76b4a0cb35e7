//! End-to-end commands over a run directory.
//!
//! ```text
//! <run>/config.frozen        resolved configuration of the last command
//! <run>/data/                corpus.jsonl, templates.jsonl
//! <run>/split/               manifest.json plus the three partitions
//! <run>/checkpoints/         <variant>.ckpt
//! <run>/predictions/         <variant>.jsonl, baseline.jsonl
//! <run>/reports/             eval_<variant>.csv, report.csv, sweep_<kind>.csv
//! <run>/logs/                training curves (CSV) and timings (JSON)
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::codec::TripletOrder;
use crate::config::{resolve_data_path, RunConfig};
use crate::data::{load_dataset, load_split, make_zero_shot_split, save_dataset, save_split, Dataset, DatasetFormat, ZeroShotSplit, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{
    frequency_baseline, gold_records, load_predictions, predict_dataset, save_predictions, score, sentences,
    write_report_csv, Normalization, PredictionRecord, ReportRow,
};
use crate::reptile::train_tgm_optimization;
use crate::synth::{default_templates, generate_corpus, load_templates, save_templates};
use crate::system::{TgmSystem, Variant};
use crate::train::{train_tgm, train_tgm_metric, train_tgm_model, TrainLog};
use crate::vocab::Vocabulary;

pub const FROZEN_CONFIG: &str = "config.frozen";

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn frozen_config(&self) -> PathBuf {
        self.root.join(FROZEN_CONFIG)
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("data/corpus.jsonl")
    }

    pub fn templates(&self) -> PathBuf {
        self.root.join("data/templates.jsonl")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split")
    }

    pub fn checkpoint(&self, variant: Variant) -> PathBuf {
        self.root.join("checkpoints").join(format!("{variant}.ckpt"))
    }

    pub fn predictions(&self, name: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{name}.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.csv"))
    }

    pub fn log(&self, file: &str) -> PathBuf {
        self.root.join("logs").join(file)
    }

    fn create(&self) -> Result<()> {
        for sub in ["", "data", "split", "checkpoints", "predictions", "reports", "logs"] {
            let d = self.root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    /// Create the layout and record the configuration the command runs with.
    pub fn freeze(&self, cfg: &RunConfig) -> Result<()> {
        self.create()?;
        let path = self.frozen_config();
        std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
    }
}

fn normalization_name(n: Normalization) -> &'static str {
    match n {
        Normalization::Exact => "exact",
        Normalization::CasefoldStrip => "casefold_strip",
    }
}

fn templates_for(cfg: &RunConfig) -> Result<Vec<crate::synth::RelationTemplate>> {
    match &cfg.data.templates {
        Some(p) => load_templates(resolve_data_path(p)),
        None => Ok(default_templates(cfg.data.pool_mode, cfg.data.pool_size)),
    }
}

/// Synthesize the corpus into `data/`.
pub fn run_synth(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    dir.freeze(cfg)?;
    let templates = templates_for(cfg)?;
    let corpus = generate_corpus(&templates, cfg.data.samples_per_relation, cfg.data.multi_triplet_fraction, cfg.seed)?;
    save_templates(dir.templates(), &templates)?;
    save_dataset(dir.corpus(), &corpus)?;
    log::info!("synthesized {} samples over {} relations", corpus.len(), corpus.relation_set().len());
    Ok(corpus)
}

fn load_corpus(cfg: &RunConfig, dir: &RunDir) -> Result<Dataset> {
    let path = match &cfg.data.corpus {
        Some(p) => resolve_data_path(p),
        None => dir.corpus(),
    };
    if !path.exists() {
        return Err(Error::Data(format!(
            "{}: corpus not found (run `synth` first or set data.corpus)",
            path.display()
        )));
    }
    load_dataset(&path, DatasetFormat::Jsonl)
}

/// Split the corpus into `split/`.
pub fn run_split(cfg: &RunConfig, dir: &RunDir) -> Result<ZeroShotSplit> {
    dir.freeze(cfg)?;
    let corpus = load_corpus(cfg, dir)?;
    let split = make_zero_shot_split(&corpus, cfg.split.m, cfg.seed)?;
    save_split(dir.split(), &split)?;
    log::info!(
        "split: {} train, {} validation, {} test; unseen {:?}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        split.unseen_labels
    );
    Ok(split)
}

pub fn load_run_split(dir: &RunDir) -> Result<ZeroShotSplit> {
    let d = dir.split();
    if !d.join(MANIFEST_FILE).exists() {
        return Err(Error::Data(format!("{}: no split found (run `split` first)", d.display())));
    }
    load_split(d)
}

/// Train a fresh system of `variant` on `split`. The vocabulary comes from
/// the training partition only; held-out words are reached by copying.
pub fn train_variant(cfg: &RunConfig, split: &ZeroShotSplit, variant: Variant) -> Result<(TgmSystem<f32>, TrainLog)> {
    let vocab = Vocabulary::build([&split.train]);
    let mut system = TgmSystem::new(&cfg.system_spec(variant), vocab)?;
    let log = match variant {
        Variant::Tgm => train_tgm(&mut system, split, &cfg.sampler, &cfg.train)?,
        Variant::Metric => train_tgm_metric(&mut system, split, &cfg.sampler, &cfg.train)?,
        Variant::Model => train_tgm_model(&mut system, split, &cfg.sampler, &cfg.train)?,
        Variant::Optimization => train_tgm_optimization(&mut system, split, &cfg.sampler, &cfg.reptile, &cfg.train)?,
    };
    Ok((system, log))
}

fn write_train_logs(dir: &RunDir, name: &str, log: &TrainLog) -> Result<()> {
    log.write_csv(dir.log(&format!("{name}.train.csv")))?;
    log.write_steps_csv(dir.log(&format!("{name}.steps.csv")))?;
    let path = dir.log(&format!("{name}.log.json"));
    let json = serde_json::to_string_pretty(log).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Train `variant` and store its checkpoint and logs.
pub fn run_train(cfg: &RunConfig, dir: &RunDir, variant: Variant) -> Result<TrainLog> {
    dir.freeze(cfg)?;
    let split = load_run_split(dir)?;
    let start = Instant::now();
    let (system, log) = train_variant(cfg, &split, variant)?;
    log::info!(
        "trained {variant} in {:.1}s, selected epoch {:?}",
        start.elapsed().as_secs_f64(),
        log.selected_epoch
    );
    save_checkpoint(dir.checkpoint(variant), &system)?;
    write_train_logs(dir, variant.name(), &log)?;
    Ok(log)
}

/// Predictions of `system` on the unseen test partition.
pub fn predict_test(cfg: &RunConfig, system: &TgmSystem<f32>, split: &ZeroShotSplit) -> Result<Vec<PredictionRecord>> {
    let labels: Vec<String> = split.unseen_labels.iter().cloned().collect();
    predict_dataset(system, &sentences(&split.test), &labels, &cfg.train.generation)
}

fn score_rows(setting: &str, preds: &[PredictionRecord], split: &ZeroShotSplit, primary: Normalization) -> Result<Vec<ReportRow>> {
    let gold = gold_records(&split.test);
    let other = match primary {
        Normalization::Exact => Normalization::CasefoldStrip,
        Normalization::CasefoldStrip => Normalization::Exact,
    };
    [primary, other]
        .into_iter()
        .map(|n| Ok(ReportRow::new(format!("{setting} [{}]", normalization_name(n)), &score(preds, &gold, n)?)))
        .collect()
}

/// Evaluate a trained variant on the test partition, under both
/// normalizations, next to the frequency baseline.
pub fn run_eval(cfg: &RunConfig, dir: &RunDir, variant: Variant) -> Result<Vec<ReportRow>> {
    dir.freeze(cfg)?;
    let split = load_run_split(dir)?;
    let ckpt = dir.checkpoint(variant);
    if !ckpt.exists() {
        return Err(Error::Data(format!("{}: no checkpoint (run `train --variant {variant}` first)", ckpt.display())));
    }
    let system: TgmSystem<f32> = load_checkpoint(&ckpt)?;
    let preds = predict_test(cfg, &system, &split)?;
    save_predictions(dir.predictions(variant.name()), &preds)?;
    let baseline = frequency_baseline(&split.test, cfg.seed);
    save_predictions(dir.predictions("baseline"), &baseline)?;
    let norm = cfg.train.normalization;
    let mut rows = score_rows(variant.display_name(), &preds, &split, norm)?;
    rows.extend(score_rows("Baseline", &baseline, &split, norm)?);
    write_report_csv(dir.report(&format!("eval_{variant}")), &rows)?;
    Ok(rows)
}

/// One row per evaluated variant plus the baseline, scored with the
/// configured normalization.
pub fn run_report(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<ReportRow>> {
    dir.freeze(cfg)?;
    let split = load_run_split(dir)?;
    let gold = gold_records(&split.test);
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let path = dir.predictions(v.name());
        if path.exists() {
            rows.push(ReportRow::new(v.display_name(), &score(&load_predictions(&path)?, &gold, cfg.train.normalization)?));
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no predictions found (run `eval` first)",
            dir.root().join("predictions").display()
        )));
    }
    let baseline = frequency_baseline(&split.test, cfg.seed);
    rows.push(ReportRow::new("Baseline", &score(&baseline, &gold, cfg.train.normalization)?));
    write_report_csv(dir.report("report"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepKind {
    /// Candidate relations per training prompt.
    R,
    Order,
    /// Tasks per training sample.
    T,
    /// Matching-loss weight of the metric variant.
    Alpha,
}

impl SweepKind {
    pub const ALL: [SweepKind; 4] = [SweepKind::R, SweepKind::Order, SweepKind::T, SweepKind::Alpha];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::R => "r",
            SweepKind::Order => "order",
            SweepKind::T => "t",
            SweepKind::Alpha => "alpha",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SweepKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown sweep kind `{s}` (expected r, order, t or alpha)")))
    }
}

fn order_name(o: TripletOrder) -> &'static str {
    match o {
        TripletOrder::Htr => "HTR",
        TripletOrder::Thr => "THR",
        TripletOrder::Rht => "RHT",
    }
}

/// The settings a sweep trains: row label, configuration, variant.
pub fn sweep_settings(cfg: &RunConfig, kind: SweepKind) -> Vec<(String, RunConfig, Variant)> {
    let s = &cfg.sweep;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match kind {
        SweepKind::R => s.r.iter().map(|&r| (format!("r={r}"), with(&|c| c.sampler.r = r), s.variant)).collect(),
        SweepKind::Order => s
            .order
            .iter()
            .map(|&o| (format!("order={}", order_name(o)), with(&|c| c.codec.order = o), s.variant))
            .collect(),
        SweepKind::T => s.t.iter().map(|&t| (format!("t={t}"), with(&|c| c.sampler.t = t), s.variant)).collect(),
        SweepKind::Alpha => s
            .alpha
            .iter()
            .map(|&a| (format!("alpha={a}"), with(&|c| c.metric.alpha = a), Variant::Metric))
            .collect(),
    }
}

/// Train and evaluate one system per sweep value; rows follow the
/// configured value order.
pub fn run_sweep(cfg: &RunConfig, dir: &RunDir, kind: SweepKind) -> Result<Vec<ReportRow>> {
    dir.freeze(cfg)?;
    let split = load_run_split(dir)?;
    let pool = split.train_label_pool().len();
    if let Some(&r) = cfg.sweep.r.iter().find(|&&r| r > pool).filter(|_| kind == SweepKind::R) {
        return Err(Error::Config(format!("sweep.r value {r} exceeds the {pool} training labels")));
    }
    let gold = gold_records(&split.test);
    let mut rows = Vec::new();
    for (label, c, variant) in sweep_settings(cfg, kind) {
        c.validate()?;
        log::info!("sweep {kind}: {label}");
        let (system, log) = train_variant(&c, &split, variant)?;
        write_train_logs(dir, &format!("sweep_{kind}_{label}"), &log)?;
        let preds = predict_test(&c, &system, &split)?;
        rows.push(ReportRow::new(label, &score(&preds, &gold, c.train.normalization)?));
    }
    write_report_csv(dir.report(&format!("sweep_{kind}")), &rows)?;
    Ok(rows)
}

/// Synthesize, split, train and evaluate every variant, then report.
pub fn run_all(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<ReportRow>> {
    if cfg.data.corpus.is_none() {
        run_synth(cfg, dir)?;
    }
    run_split(cfg, dir)?;
    for v in Variant::ALL {
        run_train(cfg, dir, v)?;
        run_eval(cfg, dir, v)?;
    }
    run_report(cfg, dir)
}
