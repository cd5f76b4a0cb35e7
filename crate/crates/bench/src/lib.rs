//! Shared fixtures for the benchmarks.

use zerorte::codec::{TargetStyle, TripletOrder};
use zerorte::data::{make_zero_shot_split, ZeroShotSplit};
use zerorte::episode::{build_epoch, SamplerConfig, TrainingInstance};
use zerorte::model::ModelConfig;
use zerorte::synth::{default_templates, generate_corpus, PoolMode};
use zerorte::system::{SystemSpec, TgmSystem, Variant};
use zerorte::vocab::Vocabulary;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub split: ZeroShotSplit,
    pub instances: Vec<TrainingInstance>,
}

/// A small synthetic split and one epoch of training instances.
pub fn fixture(style: TargetStyle) -> Fixture {
    let corpus = generate_corpus(&default_templates(PoolMode::Separable, 20), 20, 0.1, 7).unwrap();
    let split = make_zero_shot_split(&corpus, 5, 7).unwrap();
    let pool = split.train_label_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sampler = SamplerConfig::default();
    let instances = build_epoch(&split.train, &pool, &sampler, TripletOrder::Htr, style, &mut rng).unwrap();
    Fixture { split, instances }
}

/// A freshly initialized system at the default model size.
pub fn system(variant: Variant, split: &ZeroShotSplit) -> TgmSystem<f32> {
    let spec = SystemSpec {
        variant,
        model: ModelConfig::default(),
        metric: Default::default(),
        hyper: Default::default(),
        order: TripletOrder::Htr,
        style: TargetStyle::Plain,
    };
    TgmSystem::new(&spec, Vocabulary::build([&split.train])).unwrap()
}
