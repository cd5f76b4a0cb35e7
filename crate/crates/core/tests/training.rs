mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zerorte::checkpoint::{load_checkpoint, save_checkpoint};
use zerorte::codec::{TargetStyle, TripletOrder};
use zerorte::episode::{sample_meta_batch, MetaTask, SamplerConfig};
use zerorte::optim::{Optimizer, OptimizerKind};
use zerorte::pipeline::{self, RunDir};
use zerorte::reptile::{adapt_all, inner_adapt, ReptileConfig};
use zerorte::system::{TgmSystem, Variant};
use zerorte::train::Stepper;
use zerorte::ErrorKind;

fn system(variant: Variant, style: TargetStyle) -> (TgmSystem<f64>, zerorte::data::ZeroShotSplit) {
    let split = common::toy_split(4, 2);
    let vocab = common::train_vocab(&split);
    let sys = TgmSystem::new(&common::spec(variant, common::tiny_model(16), style), vocab).unwrap();
    (sys, split)
}

#[test]
fn one_inner_step_is_plain_gradient_descent() {
    let (sys, split) = system(Variant::Optimization, TargetStyle::Plain);
    let batch = common::instances(&split, 0..3, TargetStyle::Plain);
    let task = MetaTask {
        task: batch[0].task.clone(),
        instances: batch,
    };
    let cfg = ReptileConfig {
        inner_steps: 1,
        inner_lr: 0.1,
        ..ReptileConfig::default()
    };
    let before = sys.model.snapshot();
    let adapted = inner_adapt(&sys, &task, &cfg, None, None).unwrap();
    assert_eq!(sys.model.snapshot(), before, "adaptation must not touch the meta parameters");

    let (_, grads) = sys.batch_gradients(&task.instances, None).unwrap();
    for (i, (p, a)) in before.tensors().iter().zip(adapted.tensors()).enumerate() {
        let g = grads.get(i).expect("every backbone tensor gets a gradient");
        let expect = p - &(g * 0.1);
        let worst = (&expect - a).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst < 1e-12, "tensor {i}: max deviation {worst}");
    }
}

#[test]
fn parallel_adaptation_matches_sequential() {
    let (sys, split) = system(Variant::Optimization, TargetStyle::Plain);
    let pool = split.train_label_pool();
    let sampler = SamplerConfig { t: 1, r: 4, ensure_gold: true };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tasks = sample_meta_batch(&split.train, &pool, 3, 2, &sampler, TripletOrder::Htr, TargetStyle::Plain, &mut rng).unwrap();
    let seeds = [11, 12, 13];
    let sequential = ReptileConfig {
        inner_steps: 2,
        parallel: false,
        ..ReptileConfig::default()
    };
    let parallel = ReptileConfig {
        parallel: true,
        ..sequential.clone()
    };
    let a = adapt_all(&sys, &tasks, &sequential, Some(1.0), &seeds).unwrap();
    let b = adapt_all(&sys, &tasks, &parallel, Some(1.0), &seeds).unwrap();
    assert_eq!(a.len(), 3);
    for ((pa, la), (pb, lb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert_eq!(la.to_bits(), lb.to_bits());
    }
}

#[test]
fn a_single_sample_can_be_memorized() {
    let (mut sys, split) = system(Variant::Tgm, TargetStyle::Plain);
    let inst = common::instances(&split, 0..1, TargetStyle::Plain);
    let mut stepper = Stepper {
        optimizer: Optimizer::new(OptimizerKind::Adam, vec![1e-2; sys.num_slots()]),
        clip_norm: Some(1.0),
    };
    let first = stepper.step(&mut sys, &inst, None).unwrap();
    let mut last = first;
    for _ in 0..150 {
        last = stepper.step(&mut sys, &inst, None).unwrap();
    }
    assert!(last < 0.05 * first, "loss went from {first} to {last}");
    let out = sys.generate(&inst[0].task, &inst[0].sample.tokens, 64).unwrap();
    assert_eq!(out, inst[0].target.text);
}

#[test]
fn different_tasks_get_different_memory() {
    let (sys, split) = system(Variant::Model, TargetStyle::Plain);
    let inst = common::instances(&split, 0..2, TargetStyle::Plain);
    let a = sys.task_memory_values(&inst[0].task).unwrap().unwrap();
    let b = sys.task_memory_values(&inst[1].task).unwrap().unwrap();
    assert_eq!(a.nrows(), 2);
    if inst[0].task.label_set() != inst[1].task.label_set() {
        assert_ne!(a, b, "different candidate sets should give different memory");
    }
}

#[test]
fn checkpointed_system_predicts_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let dir = RunDir::new(tmp.path());
    dir.freeze(&cfg).unwrap();
    pipeline::run_synth(&cfg, &dir).unwrap();
    let split = pipeline::run_split(&cfg, &dir).unwrap();
    let (sys, log) = pipeline::train_variant(&cfg, &split, Variant::Metric).unwrap();
    assert!(!log.epochs.is_empty());
    let path = tmp.path().join("metric.ckpt");
    save_checkpoint(&path, &sys).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(
        pipeline::predict_test(&cfg, &sys, &split).unwrap(),
        pipeline::predict_test(&cfg, &back, &split).unwrap()
    );
}

#[test]
fn pipeline_reports_every_variant_and_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let dir = RunDir::new(tmp.path());
    let rows = pipeline::run_all(&cfg, &dir).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    for want in ["TGM", "TGM-Metric", "TGM-Model", "TGM-Optimization", "Baseline"] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.f1));
    }
    for v in Variant::ALL {
        assert!(dir.checkpoint(v).exists());
        assert!(dir.predictions(v.name()).exists());
    }
    assert!(dir.report("report").exists());
}

#[test]
fn evaluating_without_a_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let dir = RunDir::new(tmp.path());
    dir.freeze(&cfg).unwrap();
    pipeline::run_synth(&cfg, &dir).unwrap();
    pipeline::run_split(&cfg, &dir).unwrap();
    let err = pipeline::run_eval(&cfg, &dir, Variant::Tgm).unwrap_err();
    assert_ne!(err.kind(), ErrorKind::Config, "{err}");
}

#[test]
fn splitting_without_a_corpus_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run_config();
    let err = pipeline::run_split(&cfg, &RunDir::new(tmp.path())).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data, "{err}");
}
