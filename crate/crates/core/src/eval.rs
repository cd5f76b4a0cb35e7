//! Prediction, strict triplet scoring, baselines and report tables.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::codec::{parse_triplets, Diagnostic};
use crate::data::{relation_frequencies, Dataset, SurfaceTriplet};
use crate::episode::TaskPrompt;
use crate::error::{Error, Result};
use crate::system::TgmSystem;

/// How surfaces are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Exact,
    /// Lowercase, trim, and collapse inner whitespace.
    #[default]
    CasefoldStrip,
}

impl Normalization {
    pub fn apply(self, s: &str) -> String {
        match self {
            Normalization::Exact => s.to_string(),
            Normalization::CasefoldStrip => s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(),
        }
    }

    fn triplet(self, t: &SurfaceTriplet) -> SurfaceTriplet {
        SurfaceTriplet::new(self.apply(&t.head), self.apply(&t.tail), self.apply(&t.relation))
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Normalization::Exact),
            "casefold_strip" => Ok(Normalization::CasefoldStrip),
            _ => Err(Error::Config(format!("unknown normalization `{s}` (expected exact or casefold_strip)"))),
        }
    }
}

/// An id and its tokens, without gold annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
}

pub fn sentences(dataset: &Dataset) -> Vec<Sentence> {
    dataset
        .samples()
        .iter()
        .map(|s| Sentence {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
        })
        .collect()
}

/// Gold triplets of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldRecord {
    pub id: String,
    pub triplets: Vec<SurfaceTriplet>,
}

pub fn gold_records(dataset: &Dataset) -> Vec<GoldRecord> {
    dataset
        .samples()
        .iter()
        .map(|s| GoldRecord {
            id: s.id.clone(),
            triplets: s.surface_triplets(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub generated: String,
    pub triplets: Vec<SurfaceTriplet>,
    #[serde(skip)]
    pub diagnostics: Vec<Diagnostic>,
}

impl PredictionRecord {
    /// Parse generated text; parsed triplets are already deduplicated.
    pub fn from_generation(id: impl Into<String>, generated: String, system_order: crate::codec::TripletOrder, style: crate::codec::TargetStyle) -> Self {
        let parsed = parse_triplets(&generated, system_order, style);
        PredictionRecord {
            id: id.into(),
            generated,
            triplets: parsed.triplets,
            diagnostics: parsed.diagnostics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_len: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { max_len: 64 }
    }
}

/// One greedy generation per sentence with all `labels` as the prompt.
pub fn predict_dataset<F: Scalar>(
    system: &TgmSystem<F>,
    sentences: &[Sentence],
    labels: &[String],
    gen: &GenerationConfig,
) -> Result<Vec<PredictionRecord>> {
    let mut sorted = labels.to_vec();
    sorted.sort();
    let task = TaskPrompt::new(sorted)?;
    let memory = system.task_memory_values(&task)?;
    let predict = |chunk: &[Sentence]| -> Result<Vec<PredictionRecord>> {
        chunk
            .iter()
            .map(|s| {
                let source = system.source_for(&task, &s.tokens)?;
                let text = system.model.generate_text(&source, memory.as_ref(), gen.max_len)?;
                Ok(PredictionRecord::from_generation(s.id.clone(), text, system.order, system.style))
            })
            .collect()
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads <= 1 || sentences.len() < 2 {
        return predict(sentences);
    }
    // sentences are independent; chunks are joined back in input order
    let chunk = sentences.len().div_ceil(threads);
    let parts: Vec<Result<Vec<PredictionRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sentences.chunks(chunk).map(|c| s.spawn(move || predict(c))).collect();
        handles.into_iter().map(|h| h.join().expect("prediction thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(sentences.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub totals: Counts,
    /// Keyed by normalized relation label.
    pub per_relation: BTreeMap<String, Counts>,
}

pub fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let r = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Micro precision, recall and F1 with multiset exact matching.
///
/// Predictions and golds are joined by id; both sides must hold the same ids.
pub fn score(preds: &[PredictionRecord], golds: &[GoldRecord], norm: Normalization) -> Result<ScoreReport> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(&p.id, p).is_some() {
            return Err(Error::InvalidInput(format!("duplicate prediction id `{}`", p.id)));
        }
    }
    if by_id.len() != golds.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} gold samples",
            by_id.len(),
            golds.len()
        )));
    }
    let mut totals = Counts::default();
    let mut per_relation: BTreeMap<String, Counts> = BTreeMap::new();
    for g in golds {
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("no prediction for sample `{}`", g.id)))?;
        let mut remaining: HashMap<SurfaceTriplet, usize> = HashMap::new();
        for t in &g.triplets {
            let t = norm.triplet(t);
            per_relation.entry(t.relation.clone()).or_default().gold += 1;
            *remaining.entry(t).or_default() += 1;
        }
        totals.gold += g.triplets.len();
        for t in &p.triplets {
            let t = norm.triplet(t);
            let rel = per_relation.entry(t.relation.clone()).or_default();
            rel.predicted += 1;
            totals.predicted += 1;
            if let Some(n) = remaining.get_mut(&t).filter(|n| **n > 0) {
                *n -= 1;
                rel.correct += 1;
                totals.correct += 1;
            }
        }
    }
    let (precision, recall, f1) = prf(totals.correct, totals.predicted, totals.gold);
    Ok(ScoreReport {
        precision,
        recall,
        f1,
        totals,
        per_relation,
    })
}

/// Predicts the most frequent gold relation of `dataset` with a random
/// single-token head and a different random single-token tail.
pub fn frequency_baseline(dataset: &Dataset, seed: u64) -> Vec<PredictionRecord> {
    let freq = relation_frequencies(dataset);
    let top = freq
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(r, _)| r.clone())
        .unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset
        .samples()
        .iter()
        .map(|s| {
            let n = s.tokens.len();
            let h = rng.random_range(0..n);
            let t = if n > 1 {
                let t = rng.random_range(0..n - 1);
                if t >= h {
                    t + 1
                } else {
                    t
                }
            } else {
                h
            };
            PredictionRecord {
                id: s.id.clone(),
                generated: String::new(),
                triplets: vec![SurfaceTriplet::new(s.tokens[h].clone(), s.tokens[t].clone(), top.clone())],
                diagnostics: Vec::new(),
            }
        })
        .collect()
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            field: "record".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One row of a report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ReportRow {
    pub fn new(setting: impl Into<String>, report: &ScoreReport) -> Self {
        ReportRow {
            setting: setting.into(),
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
        }
    }
}

/// Fixed six-decimal formatting keeps reports byte-stable.
pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["setting", "precision", "recall", "f1"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.setting.clone(),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.f1),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, ts: &[(&str, &str, &str)]) -> PredictionRecord {
        PredictionRecord {
            id: id.into(),
            generated: String::new(),
            triplets: ts.iter().map(|(h, t, r)| SurfaceTriplet::new(*h, *t, *r)).collect(),
            diagnostics: vec![],
        }
    }

    fn gold(id: &str, ts: &[(&str, &str, &str)]) -> GoldRecord {
        GoldRecord {
            id: id.into(),
            triplets: ts.iter().map(|(h, t, r)| SurfaceTriplet::new(*h, *t, *r)).collect(),
        }
    }

    #[test]
    fn hand_case() {
        let r = score(
            &[pred("a", &[("A", "B", "r1"), ("A", "C", "r2")])],
            &[gold("a", &[("A", "B", "r1")])],
            Normalization::Exact,
        )
        .unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_relation["r2"], Counts { gold: 0, predicted: 1, correct: 0 });
    }

    #[test]
    fn perfect_and_empty() {
        let g = [gold("a", &[("A", "B", "r1")])];
        let r = score(&[pred("a", &[("A", "B", "r1")])], &g, Normalization::Exact).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = score(&[pred("a", &[])], &g, Normalization::Exact).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn normalization_modes() {
        let g = [gold("a", &[("The U.S.A", "x", "r")])];
        let p = [pred("a", &[("the U.S.A", "x", "r")])];
        assert_eq!(score(&p, &g, Normalization::Exact).unwrap().f1, 0.0);
        assert_eq!(score(&p, &g, Normalization::CasefoldStrip).unwrap().f1, 1.0);
    }

    #[test]
    fn duplicate_gold_matched_with_multiplicity() {
        let g = [gold("a", &[("A", "B", "r"), ("A", "B", "r")])];
        let p = [pred("a", &[("A", "B", "r")])];
        let r = score(&p, &g, Normalization::Exact).unwrap();
        assert_eq!(r.totals, Counts { gold: 2, predicted: 1, correct: 1 });
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let g = [gold("a", &[("A", "B", "r")])];
        assert!(score(&[pred("b", &[])], &g, Normalization::Exact).is_err());
        assert!(score(&[], &g, Normalization::Exact).is_err());
    }

    #[test]
    fn csv_is_fixed_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report_csv(&path, &[ReportRow { setting: "r=2".into(), precision: 0.5, recall: 1.0, f1: 2.0 / 3.0 }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "setting,precision,recall,f1\nr=2,0.500000,1.000000,0.666667\n");
        assert_eq!(read_report_csv(&path).unwrap()[0].setting, "r=2");
    }
}
