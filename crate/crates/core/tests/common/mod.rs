#![allow(dead_code)]

use std::path::Path;

use zerorte::codec::{TargetStyle, TripletOrder};
use zerorte::config::RunConfig;
use zerorte::data::{make_zero_shot_split, ZeroShotSplit};
use zerorte::episode::{TaskPrompt, TrainingInstance};
use zerorte::hyper::HyperConfig;
use zerorte::metric::MatchConfig;
use zerorte::model::ModelConfig;
use zerorte::synth::{default_templates, generate_corpus, PoolMode};
use zerorte::system::{SystemSpec, Variant};
use zerorte::vocab::Vocabulary;

/// Small model without dropout, so losses are deterministic functions of
/// the parameters.
pub fn tiny_model(d_model: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 2 * d_model,
        dropout: 0.0,
        word_dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn spec(variant: Variant, model: ModelConfig, style: TargetStyle) -> SystemSpec {
    SystemSpec {
        variant,
        model,
        metric: MatchConfig {
            d_match: 8,
            alpha: 0.5,
        },
        hyper: HyperConfig { k: 2, hidden: 12 },
        order: TripletOrder::Htr,
        style,
    }
}

/// 20 relations with a few sentences each, split with m = 5.
pub fn toy_split(samples_per_relation: usize, seed: u64) -> ZeroShotSplit {
    let corpus = generate_corpus(&default_templates(PoolMode::Separable, 8), samples_per_relation, 0.2, seed).unwrap();
    make_zero_shot_split(&corpus, 5, seed).unwrap()
}

pub fn train_vocab(split: &ZeroShotSplit) -> Vocabulary {
    Vocabulary::build([&split.train])
}

/// One instance per training sample in `range`, prompted with the sample's
/// own relations plus two distractors.
pub fn instances(split: &ZeroShotSplit, range: std::ops::Range<usize>, style: TargetStyle) -> Vec<TrainingInstance> {
    let pool: Vec<String> = split.train_label_pool();
    split.train.samples()[range]
        .iter()
        .map(|s| {
            let mut labels: Vec<String> = s.relations().into_iter().map(String::from).collect();
            for l in &pool {
                if labels.len() >= s.relations().len() + 2 {
                    break;
                }
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
            TrainingInstance::new(s, TaskPrompt::new(labels).unwrap(), TripletOrder::Htr, style).unwrap()
        })
        .collect()
}

/// Pipeline configuration small enough for a full run in seconds.
pub fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.samples_per_relation = 6;
    cfg.data.pool_size = 8;
    cfg.model = ModelConfig {
        dropout: 0.1,
        word_dropout: 0.1,
        ..tiny_model(16)
    };
    cfg.train.epochs = 2;
    cfg.train.patience = 1;
    cfg.train.max_validation_samples = 10;
    cfg.train.generation.max_len = 24;
    cfg.sampler.t = 1;
    cfg.metric.d_match = 8;
    cfg.hyper = HyperConfig { k: 2, hidden: 12 };
    cfg.reptile.meta_iterations = 3;
    cfg.reptile.k_per_task = 2;
    cfg.reptile.inner_steps = 2;
    cfg.reptile.n_tasks = 2;
    cfg.reptile.parallel = true;
    cfg.resolved()
}

/// Relative paths and contents of every file under `root` with extension `ext`.
pub fn files_with_extension(root: &Path, ext: &str) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
