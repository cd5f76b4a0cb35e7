//! Task prompts, training epochs and Reptile meta-batches.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{build_source, serialize_triplets, SourceText, TargetStyle, TargetText, TripletOrder};
use crate::data::{AnnotatedSample, Dataset};
use crate::error::{Error, Result};

/// An ordered list of distinct candidate relation labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskPrompt {
    labels: Vec<String>,
}

impl TaskPrompt {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::InvalidInput("empty relation label in task".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate label `{l}` in task")));
            }
        }
        Ok(TaskPrompt { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn label_set(&self) -> BTreeSet<&str> {
        self.labels.iter().map(String::as_str).collect()
    }

    /// The full label set in a seeded shuffle (test-time and validation tasks).
    pub fn shuffled<R: Rng + ?Sized>(labels: impl IntoIterator<Item = String>, rng: &mut R) -> Result<Self> {
        let mut labels: Vec<String> = labels.into_iter().collect();
        labels.sort();
        labels.shuffle(rng);
        TaskPrompt::new(labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Tasks generated per sample.
    pub t: usize,
    /// Candidate relations per task.
    pub r: usize,
    pub ensure_gold: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t: 3,
            r: 5,
            ensure_gold: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.r == 0 {
            return Err(Error::Config("sampler t and r must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub sample: AnnotatedSample,
    pub task: TaskPrompt,
    pub source: SourceText,
    pub target: TargetText,
}

impl TrainingInstance {
    pub fn new(sample: &AnnotatedSample, task: TaskPrompt, order: TripletOrder, style: TargetStyle) -> Result<Self> {
        let source = build_source(&task, &sample.tokens)?;
        let target = serialize_triplets(&sample.surface_triplets(), order, style)?;
        Ok(TrainingInstance {
            sample: sample.clone(),
            task,
            source,
            target,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub task: TaskPrompt,
    pub instances: Vec<TrainingInstance>,
}

fn binomial_saturating(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

fn draw_task<R: Rng + ?Sized>(gold: &[&str], pool: &[String], cfg: &SamplerConfig, rng: &mut R) -> Result<TaskPrompt> {
    let mut labels: Vec<String> = if cfg.ensure_gold {
        let distractors: Vec<&String> = pool.iter().filter(|l| !gold.contains(&l.as_str())).collect();
        let need = cfg.r - gold.len();
        let mut labels: Vec<String> = gold.iter().map(|s| s.to_string()).collect();
        labels.extend(distractors.choose_multiple(rng, need).map(|s| (*s).clone()));
        labels
    } else {
        pool.choose_multiple(rng, cfg.r).cloned().collect()
    };
    labels.shuffle(rng);
    TaskPrompt::new(labels)
}

const DISTINCT_RETRIES: usize = 32;

/// Draw `cfg.t` candidate sets for one sample.
///
/// With `ensure_gold` each set holds the sample's gold relations plus
/// distractors drawn uniformly without replacement from `pool`, then shuffled.
/// Tasks are pairwise distinct as sets whenever the pool allows it.
pub fn sample_tasks_for_sample<R: Rng + ?Sized>(
    sample: &AnnotatedSample,
    pool: &[String],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<TaskPrompt>> {
    cfg.validate()?;
    if pool.len() < cfg.r {
        return Err(Error::Sampling(format!(
            "label pool has {} labels, r={} requested",
            pool.len(),
            cfg.r
        )));
    }
    let gold = sample.relations();
    let possible = if cfg.ensure_gold {
        if gold.len() > cfg.r {
            return Err(Error::Sampling(format!(
                "sample {} has {} gold relations but r={}",
                sample.id,
                gold.len(),
                cfg.r
            )));
        }
        if let Some(missing) = gold.iter().find(|g| !pool.iter().any(|p| p == *g)) {
            return Err(Error::Sampling(format!(
                "gold relation `{missing}` of sample {} is not in the label pool",
                sample.id
            )));
        }
        binomial_saturating(pool.len() - gold.len(), cfg.r - gold.len())
    } else {
        binomial_saturating(pool.len(), cfg.r)
    };

    let mut tasks = Vec::with_capacity(cfg.t);
    let mut seen: HashSet<BTreeSet<String>> = HashSet::new();
    for _ in 0..cfg.t {
        let mut task = draw_task(&gold, pool, cfg, rng)?;
        if seen.len() < possible {
            let mut tries = 0;
            while seen.contains(&owned_set(&task)) && tries < DISTINCT_RETRIES {
                task = draw_task(&gold, pool, cfg, rng)?;
                tries += 1;
            }
        }
        seen.insert(owned_set(&task));
        tasks.push(task);
    }
    Ok(tasks)
}

fn owned_set(task: &TaskPrompt) -> BTreeSet<String> {
    task.labels().iter().cloned().collect()
}

/// One pass over `train`: `t` instances per sample, globally shuffled.
pub fn build_epoch<R: Rng + ?Sized>(
    train: &Dataset,
    pool: &[String],
    cfg: &SamplerConfig,
    order: TripletOrder,
    style: TargetStyle,
    rng: &mut R,
) -> Result<Vec<TrainingInstance>> {
    if train.is_empty() {
        return Err(Error::Sampling("training set is empty".into()));
    }
    let mut out = Vec::with_capacity(train.len() * cfg.t);
    for sample in train.samples() {
        for task in sample_tasks_for_sample(sample, pool, cfg, rng)? {
            out.push(TrainingInstance::new(sample, task, order, style)?);
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Sample `n_tasks` tasks, each with `k_per_task` instances whose gold
/// relations all lie inside the task's candidate set.
#[allow(clippy::too_many_arguments)]
pub fn sample_meta_batch<R: Rng + ?Sized>(
    train: &Dataset,
    pool: &[String],
    n_tasks: usize,
    k_per_task: usize,
    cfg: &SamplerConfig,
    order: TripletOrder,
    style: TargetStyle,
    rng: &mut R,
) -> Result<Vec<MetaTask>> {
    if n_tasks == 0 || k_per_task == 0 {
        return Err(Error::Sampling("n_tasks and k_per_task must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::Sampling("training set is empty".into()));
    }
    let single = SamplerConfig { t: 1, ensure_gold: true, ..*cfg };
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut seen: HashSet<BTreeSet<String>> = HashSet::new();
    for i in 0..n_tasks {
        let mut last_err = None;
        let mut chosen = None;
        for _ in 0..DISTINCT_RETRIES {
            let anchor = train.samples().choose(rng).expect("non-empty");
            let task = sample_tasks_for_sample(anchor, pool, &single, rng)?.remove(0);
            let set = owned_set(&task);
            let labels = task.label_set();
            let compatible: Vec<&AnnotatedSample> = train
                .samples()
                .iter()
                .filter(|s| s.id != anchor.id && s.relations().iter().all(|r| labels.contains(r)))
                .collect();
            if compatible.len() + 1 < k_per_task {
                last_err = Some(Error::Sampling(format!(
                    "task {i} ({}) has only {} compatible samples, {k_per_task} needed",
                    task.labels().join(", "),
                    compatible.len() + 1
                )));
                continue;
            }
            if seen.contains(&set) {
                if chosen.is_none() {
                    chosen = Some((anchor, task, compatible));
                }
                continue;
            }
            chosen = Some((anchor, task, compatible));
            break;
        }
        let Some((anchor, task, compatible)) = chosen else {
            return Err(last_err.unwrap_or_else(|| Error::Sampling(format!("task {i} could not be filled"))));
        };
        seen.insert(owned_set(&task));
        let mut members = vec![anchor];
        members.extend(compatible.choose_multiple(rng, k_per_task - 1).copied());
        let instances = members
            .into_iter()
            .map(|s| TrainingInstance::new(s, task.clone(), order, style))
            .collect::<Result<Vec<_>>>()?;
        tasks.push(MetaTask { task, instances });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RelationTriplet, Span};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, rels: &[&str]) -> AnnotatedSample {
        let tokens: Vec<String> = "a b c d e f".split(' ').map(String::from).collect();
        let triplets = rels
            .iter()
            .enumerate()
            .map(|(i, r)| {
                RelationTriplet::new(
                    Span::new(&tokens, vec![i * 2]).unwrap(),
                    Span::new(&tokens, vec![i * 2 + 1]).unwrap(),
                    *r,
                )
                .unwrap()
            })
            .collect();
        AnnotatedSample {
            id: id.into(),
            tokens,
            triplets,
        }
    }

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("R{i}")).collect()
    }

    #[test]
    fn two_tasks_of_three_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SamplerConfig { t: 2, r: 3, ensure_gold: true };
        let tasks = sample_tasks_for_sample(&sample("s", &["R0"]), &pool(6), &cfg, &mut rng).unwrap();
        assert_eq!(tasks.len(), 2);
        for t in &tasks {
            assert_eq!(t.labels().len(), 3);
            assert!(t.contains("R0"));
        }
        assert_ne!(owned_set(&tasks[0]), owned_set(&tasks[1]));
    }

    #[test]
    fn r_one_forces_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SamplerConfig { t: 3, r: 1, ensure_gold: true };
        let tasks = sample_tasks_for_sample(&sample("s", &["R4"]), &pool(8), &cfg, &mut rng).unwrap();
        assert!(tasks.iter().all(|t| t.labels() == ["R4".to_string()]));
    }

    #[test]
    fn pool_too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplerConfig { t: 1, r: 5, ensure_gold: true };
        assert!(sample_tasks_for_sample(&sample("s", &["R0"]), &pool(4), &cfg, &mut rng).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SamplerConfig::default();
        let a = sample_tasks_for_sample(&sample("s", &["R1"]), &pool(10), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_tasks_for_sample(&sample("s", &["R1"]), &pool(10), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_counts_and_gold_coverage() {
        let samples: Vec<_> = (0..10).map(|i| sample(&format!("s{i}"), &[&format!("R{}", i % 4)])).collect();
        let ds = Dataset::new(samples);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SamplerConfig { t: 3, r: 3, ensure_gold: true };
        let epoch = build_epoch(&ds, &pool(6), &cfg, TripletOrder::Htr, TargetStyle::Plain, &mut rng).unwrap();
        assert_eq!(epoch.len(), 30);
        for inst in &epoch {
            for r in inst.sample.relations() {
                assert!(inst.task.contains(r));
            }
        }
    }

    #[test]
    fn single_one_instance_task() {
        let ds = Dataset::new(vec![sample("s", &["R0"])]);
        let cfg = SamplerConfig { t: 1, r: 2, ensure_gold: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_meta_batch(&ds, &pool(3), 1, 1, &cfg, TripletOrder::Htr, TargetStyle::Plain, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].instances.len(), 1);
    }

    #[test]
    fn insufficient_compatible_samples() {
        let ds = Dataset::new(vec![sample("s", &["R0"]), sample("t", &["R1"])]);
        let cfg = SamplerConfig { t: 1, r: 1, ensure_gold: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_meta_batch(&ds, &pool(2), 1, 2, &cfg, TripletOrder::Htr, TargetStyle::Plain, &mut rng).unwrap_err();
        assert!(err.to_string().contains("task 0"), "{err}");
    }
}
