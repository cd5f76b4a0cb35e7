//! Annotated samples, datasets, JSONL ingestion and zero-shot splits.
//!
//! A zero-shot split draws relation *labels* first and then routes samples:
//! anything mentioning an unseen label goes to test, anything mentioning one
//! of the five validation labels goes to validation, the rest trains.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of seen labels held out for early stopping.
pub const VALIDATION_LABELS: usize = 5;

/// A contiguous run of tokens inside a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Span {
    token_indices: Vec<usize>,
    surface: String,
}

impl Span {
    /// Build a span over `indices` of `tokens`. Indices must be non-empty,
    /// strictly increasing, contiguous and in range.
    pub fn new(tokens: &[String], indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("span has no tokens".into()));
        }
        if indices.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::InvalidInput(format!(
                "span indices {indices:?} are not contiguous and increasing"
            )));
        }
        let last = *indices.last().unwrap();
        if last >= tokens.len() {
            return Err(Error::InvalidInput(format!(
                "span index {last} out of range for {} tokens",
                tokens.len()
            )));
        }
        let surface = indices
            .iter()
            .map(|&i| tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Span {
            token_indices: indices,
            surface,
        })
    }

    /// Span over the half-open token range `start..end`.
    pub fn from_range(tokens: &[String], start: usize, end: usize) -> Result<Self> {
        Span::new(tokens, (start..end).collect())
    }

    pub fn token_indices(&self) -> &[usize] {
        &self.token_indices
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn start(&self) -> usize {
        self.token_indices[0]
    }

    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }
}

/// A (head, tail, relation) triplet expressed purely as strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SurfaceTriplet {
    pub head: String,
    pub tail: String,
    pub relation: String,
}

impl SurfaceTriplet {
    pub fn new(head: impl Into<String>, tail: impl Into<String>, relation: impl Into<String>) -> Self {
        SurfaceTriplet {
            head: head.into(),
            tail: tail.into(),
            relation: relation.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelationTriplet {
    pub head: Span,
    pub tail: Span,
    pub relation: String,
}

impl RelationTriplet {
    pub fn new(head: Span, tail: Span, relation: impl Into<String>) -> Result<Self> {
        let relation = relation.into();
        if relation.is_empty() {
            return Err(Error::InvalidInput("relation label is empty".into()));
        }
        Ok(RelationTriplet {
            head,
            tail,
            relation,
        })
    }

    pub fn surface(&self) -> SurfaceTriplet {
        SurfaceTriplet::new(self.head.surface(), self.tail.surface(), &self.relation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSample {
    pub id: String,
    pub tokens: Vec<String>,
    pub triplets: Vec<RelationTriplet>,
}

impl AnnotatedSample {
    /// Distinct relation labels in order of first appearance.
    pub fn relations(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for t in &self.triplets {
            if !seen.contains(&t.relation.as_str()) {
                seen.push(t.relation.as_str());
            }
        }
        seen
    }

    pub fn surface_triplets(&self) -> Vec<SurfaceTriplet> {
        self.triplets.iter().map(RelationTriplet::surface).collect()
    }
}

/// A collection of samples together with the set of relations they use.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    samples: Vec<AnnotatedSample>,
    relation_set: BTreeSet<String>,
}

impl Dataset {
    pub fn new(samples: Vec<AnnotatedSample>) -> Self {
        let relation_set = samples
            .iter()
            .flat_map(|s| s.triplets.iter().map(|t| t.relation.clone()))
            .collect();
        Dataset {
            samples,
            relation_set,
        }
    }

    pub fn samples(&self) -> &[AnnotatedSample] {
        &self.samples
    }

    pub fn relation_set(&self) -> &BTreeSet<String> {
        &self.relation_set
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<AnnotatedSample> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

#[derive(Serialize, Deserialize)]
struct RawTriplet {
    head: Vec<usize>,
    tail: Vec<usize>,
    relation: String,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    tokens: Vec<String>,
    triplets: Vec<RawTriplet>,
}

fn schema_error(path: &Path, line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn record_to_sample(path: &Path, line: usize, raw: RawRecord) -> Result<AnnotatedSample> {
    if raw.tokens.is_empty() {
        return Err(schema_error(path, line, "tokens", "sentence has no tokens"));
    }
    if raw.triplets.is_empty() {
        return Err(schema_error(path, line, "triplets", "sample has no triplets"));
    }
    let mut triplets = Vec::with_capacity(raw.triplets.len());
    for (k, t) in raw.triplets.into_iter().enumerate() {
        let head = Span::new(&raw.tokens, t.head)
            .map_err(|e| schema_error(path, line, &format!("triplets[{k}].head"), e.to_string()))?;
        let tail = Span::new(&raw.tokens, t.tail)
            .map_err(|e| schema_error(path, line, &format!("triplets[{k}].tail"), e.to_string()))?;
        let triplet = RelationTriplet::new(head, tail, t.relation).map_err(|e| {
            schema_error(path, line, &format!("triplets[{k}].relation"), e.to_string())
        })?;
        triplets.push(triplet);
    }
    Ok(AnnotatedSample {
        id: raw.id,
        tokens: raw.tokens,
        triplets,
    })
}

fn sample_to_record(sample: &AnnotatedSample) -> RawRecord {
    RawRecord {
        id: sample.id.clone(),
        tokens: sample.tokens.clone(),
        triplets: sample
            .triplets
            .iter()
            .map(|t| RawTriplet {
                head: t.head.token_indices().to_vec(),
                tail: t.tail.token_indices().to_vec(),
                relation: t.relation.clone(),
            })
            .collect(),
    }
}

/// Load a dataset from disk. Line numbers in errors are 1-based.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        DatasetFormat::Jsonl => load_jsonl(path),
    }
}

fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .unwrap_or("record")
                .to_string();
            schema_error(path, lineno, &field, msg)
        })?;
        let sample = record_to_sample(path, lineno, raw)?;
        if !ids.insert(sample.id.clone()) {
            return Err(schema_error(path, lineno, "id", format!("duplicate id {}", sample.id)));
        }
        samples.push(sample);
    }
    Ok(Dataset::new(samples))
}

/// Write a dataset as JSONL, one record per line.
pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for sample in dataset.samples() {
        let line = serde_json::to_string(&sample_to_record(sample))
            .map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sample_count: usize,
    pub relation_count: usize,
    pub entity_count: usize,
    pub mean_sentence_length: f64,
}

/// Counts in the style of the usual benchmark summary tables. Entities are
/// distinct head/tail surface strings.
pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let mut entities = HashSet::new();
    let mut total_len = 0usize;
    for s in dataset.samples() {
        total_len += s.tokens.len();
        for t in &s.triplets {
            entities.insert(t.head.surface());
            entities.insert(t.tail.surface());
        }
    }
    let n = dataset.len();
    DatasetStats {
        sample_count: n,
        relation_count: dataset.relation_set().len(),
        entity_count: entities.len(),
        mean_sentence_length: if n == 0 { 0.0 } else { total_len as f64 / n as f64 },
    }
}

/// Train/validation/test partitions with disjoint seen and unseen labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub seen_labels: BTreeSet<String>,
    pub unseen_labels: BTreeSet<String>,
    pub validation_labels: BTreeSet<String>,
    pub m: usize,
    pub seed: u64,
}

impl ZeroShotSplit {
    /// Every label the training sampler may draw from: all seen labels,
    /// validation labels included (their samples are held out, not their names).
    pub fn train_label_pool(&self) -> Vec<String> {
        self.seen_labels.iter().cloned().collect()
    }

    /// Check every structural invariant of a split.
    pub fn validate(&self) -> Result<()> {
        if !self.seen_labels.is_disjoint(&self.unseen_labels) {
            return Err(Error::Split("seen and unseen labels overlap".into()));
        }
        if self.validation_labels.len() != VALIDATION_LABELS
            || !self.validation_labels.is_subset(&self.seen_labels)
        {
            return Err(Error::Split("validation labels must be 5 seen labels".into()));
        }
        let mut ids = HashSet::new();
        for part in [&self.train, &self.validation, &self.test] {
            for s in part.samples() {
                if !ids.insert(s.id.as_str()) {
                    return Err(Error::Split(format!("sample {} in two partitions", s.id)));
                }
            }
        }
        if !self.test.relation_set().is_subset(&self.unseen_labels) {
            return Err(Error::Split("test contains seen relations".into()));
        }
        if !self.validation.relation_set().is_subset(&self.validation_labels) {
            return Err(Error::Split("validation contains non-validation relations".into()));
        }
        if !self.train.relation_set().is_disjoint(&self.unseen_labels)
            || !self.train.relation_set().is_disjoint(&self.validation_labels)
        {
            return Err(Error::Split("train contains held-out relations".into()));
        }
        Ok(())
    }
}

fn restrict(sample: &AnnotatedSample, keep: &BTreeSet<String>) -> AnnotatedSample {
    AnnotatedSample {
        id: sample.id.clone(),
        tokens: sample.tokens.clone(),
        triplets: sample
            .triplets
            .iter()
            .filter(|t| keep.contains(&t.relation))
            .cloned()
            .collect(),
    }
}

/// Draw `m` unseen labels and 5 validation labels with a seeded generator,
/// then route samples label-first.
pub fn make_zero_shot_split(dataset: &Dataset, m: usize, seed: u64) -> Result<ZeroShotSplit> {
    let labels: Vec<String> = dataset.relation_set().iter().cloned().collect();
    if m == 0 {
        return Err(Error::Split("m must be positive".into()));
    }
    let needed = m + VALIDATION_LABELS + 1;
    if labels.len() < needed {
        return Err(Error::Split(format!(
            "m={m} needs at least {needed} relation labels ({m} unseen + {VALIDATION_LABELS} validation + 1 train), dataset has {}",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = labels;
    shuffled.shuffle(&mut rng);
    let unseen: BTreeSet<String> = shuffled[..m].iter().cloned().collect();
    let validation_labels: BTreeSet<String> =
        shuffled[m..m + VALIDATION_LABELS].iter().cloned().collect();
    let seen: BTreeSet<String> = shuffled[m..].iter().cloned().collect();

    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in dataset.samples() {
        if s.triplets.iter().any(|t| unseen.contains(&t.relation)) {
            test.push(restrict(s, &unseen));
        } else if s.triplets.iter().any(|t| validation_labels.contains(&t.relation)) {
            validation.push(restrict(s, &validation_labels));
        } else {
            train.push(s.clone());
        }
    }
    let split = ZeroShotSplit {
        train: Dataset::new(train),
        validation: Dataset::new(validation),
        test: Dataset::new(test),
        seen_labels: seen,
        unseen_labels: unseen,
        validation_labels,
        m,
        seed,
    };
    split.validate()?;
    Ok(split)
}

/// On-disk manifest that accompanies the three partition files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub m: usize,
    pub unseen_labels: Vec<String>,
    pub validation_labels: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

/// Write `manifest.json` plus `train.jsonl`, `validation.jsonl`, `test.jsonl`.
pub fn save_split(dir: impl AsRef<Path>, split: &ZeroShotSplit) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SplitManifest {
        seed: split.seed,
        m: split.m,
        unseen_labels: split.unseen_labels.iter().cloned().collect(),
        validation_labels: split.validation_labels.iter().cloned().collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    save_dataset(dir.join(TRAIN_FILE), &split.train)?;
    save_dataset(dir.join(VALIDATION_FILE), &split.validation)?;
    save_dataset(dir.join(TEST_FILE), &split.test)
}

pub fn load_split(dir: impl AsRef<Path>) -> Result<ZeroShotSplit> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text)
        .map_err(|e| schema_error(&path, e.line(), "manifest", e.to_string()))?;
    let train = load_dataset(dir.join(TRAIN_FILE), DatasetFormat::Jsonl)?;
    let validation = load_dataset(dir.join(VALIDATION_FILE), DatasetFormat::Jsonl)?;
    let test = load_dataset(dir.join(TEST_FILE), DatasetFormat::Jsonl)?;
    let validation_labels: BTreeSet<String> = manifest.validation_labels.into_iter().collect();
    let mut seen_labels: BTreeSet<String> = train.relation_set().clone();
    seen_labels.extend(validation_labels.iter().cloned());
    let split = ZeroShotSplit {
        train,
        validation,
        test,
        seen_labels,
        unseen_labels: manifest.unseen_labels.into_iter().collect(),
        validation_labels,
        m: manifest.m,
        seed: manifest.seed,
    };
    split.validate()?;
    Ok(split)
}

/// Per-relation sample counts, handy for baselines and sanity checks.
pub fn relation_frequencies(dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in dataset.samples() {
        for t in &s.triplets {
            *counts.entry(t.relation.clone()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn sample(id: &str, sentence: &str, trips: &[(usize, usize, &str)]) -> AnnotatedSample {
        let tokens = toks(sentence);
        let triplets = trips
            .iter()
            .map(|&(h, t, r)| {
                RelationTriplet::new(
                    Span::new(&tokens, vec![h]).unwrap(),
                    Span::new(&tokens, vec![t]).unwrap(),
                    r,
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

    fn toy(n_rel: usize, per_rel: usize) -> Dataset {
        let mut samples = Vec::new();
        for r in 0..n_rel {
            for k in 0..per_rel {
                samples.push(sample(&format!("s{r}-{k}"), "a b c d", &[(0, 2, &format!("rel{r}"))]));
            }
        }
        Dataset::new(samples)
    }

    #[test]
    fn span_rejects_gaps_and_out_of_range() {
        let t = toks("a b c");
        assert!(Span::new(&t, vec![0, 2]).is_err());
        assert!(Span::new(&t, vec![3]).is_err());
        assert!(Span::new(&t, vec![]).is_err());
        assert_eq!(Span::new(&t, vec![1, 2]).unwrap().surface(), "b c");
    }

    #[test]
    fn load_two_line_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"1","tokens":["A","x","B"],"triplets":[{"head":[0],"tail":[2],"relation":"rel1"}]}"#,
                "\n",
                r#"{"id":"2","tokens":["C","y","D"],"triplets":[{"head":[0],"tail":[2],"relation":"rel2"}]}"#,
                "\n"
            ),
        )
        .unwrap();
        let d = load_dataset(&path, DatasetFormat::Jsonl).unwrap();
        assert_eq!(d.len(), 2);
        let rels: Vec<_> = d.relation_set().iter().cloned().collect();
        assert_eq!(rels, vec!["rel1", "rel2"]);
    }

    #[test]
    fn out_of_range_head_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"1","tokens":["A","x","B"],"triplets":[{"head":[0],"tail":[2],"relation":"r"}]}"#,
                "\n",
                r#"{"id":"2","tokens":["C","y","D"],"triplets":[{"head":[3],"tail":[2],"relation":"r"}]}"#,
                "\n"
            ),
        )
        .unwrap();
        match load_dataset(&path, DatasetFormat::Jsonl) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "triplets[0].head");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, r#"{"id":"1","triplets":[]}"#).unwrap();
        match load_dataset(&path, DatasetFormat::Jsonl) {
            Err(Error::Schema { line: 1, field, .. }) => assert_eq!(field, "tokens"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_dataset(dir.path().join("nope.jsonl"), DatasetFormat::Jsonl),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn stats_basic() {
        assert_eq!(
            dataset_stats(&Dataset::default()),
            DatasetStats {
                sample_count: 0,
                relation_count: 0,
                entity_count: 0,
                mean_sentence_length: 0.0
            }
        );
        let d = Dataset::new(vec![
            sample("1", "a b c d", &[(0, 1, "r")]),
            sample("2", "a b c d e f", &[(0, 2, "q")]),
        ]);
        let s = dataset_stats(&d);
        assert_eq!(s.mean_sentence_length, 5.0);
        assert_eq!(s.relation_count, 2);
        assert_eq!(s.entity_count, 3);
    }

    #[test]
    fn split_twelve_relations() {
        let d = toy(12, 3);
        let s = make_zero_shot_split(&d, 5, 0).unwrap();
        assert_eq!(s.unseen_labels.len(), 5);
        assert_eq!(s.seen_labels.len(), 7);
        assert!(s.seen_labels.is_disjoint(&s.unseen_labels));
        assert_eq!(s, make_zero_shot_split(&d, 5, 0).unwrap());
    }

    #[test]
    fn split_precondition_by_enumeration() {
        // The split is feasible iff there are m unseen, 5 validation and at
        // least one train-only label.
        for n_rel in 1..=14 {
            for m in 1..=8 {
                let feasible = (0..=n_rel).any(|train_only| train_only >= 1 && m + 5 + train_only == n_rel);
                let got = make_zero_shot_split(&toy(n_rel, 1), m, 3).is_ok();
                assert_eq!(got, feasible, "n_rel={n_rel} m={m}");
            }
        }
        assert!(make_zero_shot_split(&toy(10, 2), 5, 0).is_err());
    }

    #[test]
    fn mixed_sample_goes_to_test_without_seen_triplets() {
        let mut samples: Vec<AnnotatedSample> = toy(12, 2).into_samples();
        let d0 = Dataset::new(samples.clone());
        let split = make_zero_shot_split(&d0, 5, 7).unwrap();
        let unseen = split.unseen_labels.iter().next().unwrap().clone();
        let seen = split.train.relation_set().iter().next().unwrap().clone();
        samples.push(sample("mixed", "a b c d", &[(0, 1, &seen), (2, 3, &unseen)]));
        let split = make_zero_shot_split(&Dataset::new(samples), 5, 7).unwrap();
        let mixed = split.test.samples().iter().find(|s| s.id == "mixed").unwrap();
        assert_eq!(mixed.triplets.len(), 1);
        assert_eq!(mixed.triplets[0].relation, unseen);
    }

    #[test]
    fn split_round_trips_through_disk() {
        let d = toy(13, 4);
        let split = make_zero_shot_split(&d, 5, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_split(dir.path(), &split).unwrap();
        let back = load_split(dir.path()).unwrap();
        assert_eq!(back, split);
    }
}
