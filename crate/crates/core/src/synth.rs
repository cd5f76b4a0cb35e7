//! Seeded generator of templated relation-extraction corpora.
//!
//! Every pattern carries the relation's name inside its connecting phrase
//! (`{head} is the capital of {tail} .`), so a model that reads the candidate
//! names in the prompt has something to align with, even for relations it
//! never trained on.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, Dataset, RelationTriplet, Span};
use crate::error::{Error, Result};

pub const HEAD_SLOT: &str = "{head}";
pub const TAIL_SLOT: &str = "{tail}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationTemplate {
    pub relation: String,
    /// Whitespace-tokenized sentences containing `{head}` and `{tail}` once each.
    pub patterns: Vec<String>,
    pub head_pool: Vec<String>,
    pub tail_pool: Vec<String>,
}

impl RelationTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.relation.is_empty() {
            return Err(Error::InvalidInput("template has an empty relation".into()));
        }
        if self.patterns.is_empty() || self.head_pool.is_empty() || self.tail_pool.is_empty() {
            return Err(Error::InvalidInput(format!(
                "template `{}` needs patterns and non-empty entity pools",
                self.relation
            )));
        }
        for p in &self.patterns {
            let words: Vec<&str> = p.split_whitespace().collect();
            let heads = words.iter().filter(|w| **w == HEAD_SLOT).count();
            let tails = words.iter().filter(|w| **w == TAIL_SLOT).count();
            if heads != 1 || tails != 1 {
                return Err(Error::InvalidInput(format!(
                    "pattern `{p}` of `{}` must contain {HEAD_SLOT} and {TAIL_SLOT} exactly once",
                    self.relation
                )));
            }
        }
        Ok(())
    }
}

/// How entity pools are shared between relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Every relation draws from its own disjoint pools.
    #[default]
    Separable,
    /// All relations draw from one shared pool.
    Hard,
}

const RELATIONS: [(&str, &str); 20] = [
    ("capital of", "is the capital of"),
    ("works for", "works for"),
    ("born in", "was born in"),
    ("member of", "is a member of"),
    ("located in", "is located in"),
    ("founded by", "was founded by"),
    ("married to", "is married to"),
    ("child of", "is the child of"),
    ("owned by", "is owned by"),
    ("plays for", "plays for"),
    ("studied at", "studied at"),
    ("author of", "is the author of"),
    ("citizen of", "is a citizen of"),
    ("leader of", "is the leader of"),
    ("part of", "is part of"),
    ("headquartered in", "is headquartered in"),
    ("directed by", "was directed by"),
    ("composed by", "was composed by"),
    ("sister city of", "is a sister city of"),
    ("operating system", "runs the operating system"),
];

const FRAMES: [&str; 5] = [
    "{head} {phrase} {tail} .",
    "reports say that {head} {phrase} {tail} .",
    "{head} , as noted , {phrase} {tail} .",
    "it is well known that {head} {phrase} {tail} .",
    "since last year {head} {phrase} {tail} , sources said .",
];

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// Deterministic list of `n` distinct capitalized pseudo-names.
pub fn entity_names(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(ONSETS.choose(&mut rng).unwrap());
            name.push_str(VOWELS.choose(&mut rng).unwrap());
        }
        if rng.random_bool(0.5) {
            name.push_str(["n", "r", "s", "x"].choose(&mut rng).unwrap());
        }
        let mut chars = name.chars();
        let first = chars.next().unwrap().to_ascii_uppercase();
        let name: String = std::iter::once(first).chain(chars).collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// The built-in inventory: 20 relations, 5 patterns each, pools of `pool_size`.
pub fn default_templates(mode: PoolMode, pool_size: usize) -> Vec<RelationTemplate> {
    let n = RELATIONS.len();
    let names = match mode {
        PoolMode::Separable => entity_names(2 * n * pool_size, 0x5EED),
        PoolMode::Hard => entity_names(2 * pool_size, 0x5EED),
    };
    RELATIONS
        .iter()
        .enumerate()
        .map(|(i, (label, phrase))| {
            let (heads, tails) = match mode {
                PoolMode::Separable => {
                    let base = 2 * i * pool_size;
                    (
                        names[base..base + pool_size].to_vec(),
                        names[base + pool_size..base + 2 * pool_size].to_vec(),
                    )
                }
                PoolMode::Hard => (names[..pool_size].to_vec(), names[pool_size..].to_vec()),
            };
            RelationTemplate {
                relation: label.to_string(),
                patterns: FRAMES.iter().map(|f| f.replace("{phrase}", phrase)).collect(),
                head_pool: heads,
                tail_pool: tails,
            }
        })
        .collect()
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<RelationTemplate>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: RelationTemplate = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            field: "template".into(),
            message: e.to_string(),
        })?;
        t.validate().map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            field: "patterns".into(),
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn save_templates(path: impl AsRef<Path>, templates: &[RelationTemplate]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in templates {
        let line = serde_json::to_string(t).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Filled {
    tokens: Vec<String>,
    head: (usize, usize),
    tail: (usize, usize),
}

const MAX_RESAMPLES: usize = 64;

fn fill<R: Rng + ?Sized>(template: &RelationTemplate, rng: &mut R, drop_final_period: bool) -> Result<Filled> {
    let pattern = template.patterns.choose(rng).unwrap();
    let mut tries = 0;
    let (head, tail) = loop {
        let h = template.head_pool.choose(rng).unwrap();
        let t = template.tail_pool.choose(rng).unwrap();
        if h != t {
            break (h, t);
        }
        tries += 1;
        if tries >= MAX_RESAMPLES {
            return Err(Error::InvalidInput(format!(
                "template `{}` keeps producing head == tail",
                template.relation
            )));
        }
    };
    let mut words: Vec<&str> = pattern.split_whitespace().collect();
    if drop_final_period && words.last() == Some(&".") {
        words.pop();
    }
    let mut tokens = Vec::new();
    let (mut hspan, mut tspan) = ((0, 0), (0, 0));
    for w in words {
        if w == HEAD_SLOT {
            let start = tokens.len();
            tokens.extend(head.split_whitespace().map(String::from));
            hspan = (start, tokens.len());
        } else if w == TAIL_SLOT {
            let start = tokens.len();
            tokens.extend(tail.split_whitespace().map(String::from));
            tspan = (start, tokens.len());
        } else {
            tokens.push(w.to_string());
        }
    }
    Ok(Filled {
        tokens,
        head: hspan,
        tail: tspan,
    })
}

/// Generate `samples_per_relation` single-triplet sentences per template plus
/// `round(multi_triplet_fraction * singles)` two-triplet sentences joined with
/// "and". Deterministic in `seed`.
pub fn generate_corpus(
    templates: &[RelationTemplate],
    samples_per_relation: usize,
    multi_triplet_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if templates.is_empty() {
        return Err(Error::InvalidInput("no templates".into()));
    }
    if !(0.0..=1.0).contains(&multi_triplet_fraction) {
        return Err(Error::InvalidInput("multi_triplet_fraction must be in [0, 1]".into()));
    }
    for t in templates {
        t.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut next_id = 0usize;
    let mut push = |tokens: Vec<String>, trips: Vec<((usize, usize), (usize, usize), &str)>| -> Result<()> {
        let triplets = trips
            .into_iter()
            .map(|(h, t, r)| {
                RelationTriplet::new(
                    Span::from_range(&tokens, h.0, h.1)?,
                    Span::from_range(&tokens, t.0, t.1)?,
                    r,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(AnnotatedSample {
            id: format!("synth-{next_id:06}"),
            tokens,
            triplets,
        });
        next_id += 1;
        Ok(())
    };

    for template in templates {
        for _ in 0..samples_per_relation {
            let f = fill(template, &mut rng, false)?;
            push(f.tokens, vec![(f.head, f.tail, &template.relation)])?;
        }
    }

    let singles = templates.len() * samples_per_relation;
    let n_multi = (multi_triplet_fraction * singles as f64).round() as usize;
    if n_multi > 0 && templates.len() < 2 {
        return Err(Error::InvalidInput("multi-triplet sentences need two templates".into()));
    }
    for _ in 0..n_multi {
        let a = rng.random_range(0..templates.len());
        let mut b = rng.random_range(0..templates.len() - 1);
        if b >= a {
            b += 1;
        }
        let first = fill(&templates[a], &mut rng, true)?;
        let second = fill(&templates[b], &mut rng, false)?;
        let offset = first.tokens.len() + 1;
        let mut tokens = first.tokens;
        tokens.push("and".to_string());
        tokens.extend(second.tokens);
        let shift = |(s, e): (usize, usize)| (s + offset, e + offset);
        push(
            tokens,
            vec![
                (first.head, first.tail, &templates[a].relation),
                (shift(second.head), shift(second.tail), &templates[b].relation),
            ],
        )?;
    }
    Ok(Dataset::new(samples))
}
