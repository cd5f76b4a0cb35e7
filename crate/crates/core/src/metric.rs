//! Matching head: scores (prototype, source token) pairs.
//!
//! Prototypes are the decoder states at positions whose input token is
//! `[HEAD]`, `[TAIL]` or `[REL]`. Head and tail prototypes should match their
//! gold entity tokens in the sentence; the relation prototype should match the
//! gold relation's name inside the candidate list of the prompt.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::codec::{Segment, Slot};
use crate::episode::TrainingInstance;
use crate::error::{Error, Result};
use crate::model::{Init, ParameterSet};
use crate::vocab::{split_words, split_words_with_offsets, HEAD_TOKEN, REL_TOKEN, TAIL_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub d_match: usize,
    /// Weight of the matching loss in the combined objective.
    pub alpha: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { d_match: 64, alpha: 0.5 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_match == 0 {
            return Err(Error::Config("metric.d_match must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("metric.alpha must be a finite value >= 0".into()));
        }
        Ok(())
    }
}

/// Gold pair labels for one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchLabels {
    /// Decoder rows holding each prototype, three per triplet.
    pub positions: Vec<usize>,
    pub slots: Vec<Slot>,
    /// `labels[k][s]`: prototype `k` matches source token `s`.
    pub labels: Vec<Vec<bool>>,
}

impl MatchLabels {
    pub fn ones(&self) -> usize {
        self.labels.iter().flatten().filter(|&&b| b).count()
    }

    pub fn to_array<F: Scalar>(&self) -> Array2<F> {
        let s = self.labels.first().map_or(0, Vec::len);
        let mut out = Array2::zeros((self.labels.len() * s, 1));
        for (k, row) in self.labels.iter().enumerate() {
            for (j, &b) in row.iter().enumerate() {
                if b {
                    out[[k * s + j, 0]] = F::one();
                }
            }
        }
        out
    }
}

/// Pair labels for a prototype-style instance.
///
/// Source tokens are the word tokens of `instance.source.text`; prototype
/// positions index the decoder input `<bos> + target tokens`.
pub fn matching_labels(instance: &TrainingInstance) -> Result<MatchLabels> {
    let source = &instance.source;
    let src_tokens = split_words_with_offsets(&source.text);
    let n_src = src_tokens.len();
    let inside = |r: &std::ops::Range<usize>| -> Vec<bool> {
        src_tokens
            .iter()
            .map(|(_, t)| t.start >= r.start && t.end <= r.end)
            .collect()
    };

    let context_start = source
        .ranges_of(|s| *s == Segment::Context)
        .next()
        .ok_or_else(|| Error::InvalidInput("source has no context segment".into()))?
        .start;
    // byte range of every sentence token inside the source text
    let mut token_ranges = Vec::with_capacity(instance.sample.tokens.len());
    let mut at = context_start;
    for tok in &instance.sample.tokens {
        token_ranges.push(at..at + tok.len());
        at += tok.len() + 1;
    }
    let span_mask = |indices: &[usize]| -> Vec<bool> {
        let start = token_ranges[indices[0]].start;
        let end = token_ranges[*indices.last().unwrap()].end;
        inside(&(start..end))
    };

    let target_words = split_words(&instance.target.text);
    let find = |tok: &str| -> Vec<usize> {
        target_words
            .iter()
            .enumerate()
            .filter(|(_, w)| w.as_str() == tok)
            .map(|(i, _)| i + 1)
            .collect()
    };
    let (heads, tails, rels) = (find(HEAD_TOKEN), find(TAIL_TOKEN), find(REL_TOKEN));
    let n = instance.sample.triplets.len();
    if heads.len() != n || tails.len() != n || rels.len() != n {
        return Err(Error::InvalidInput(format!(
            "target of `{}` needs one [HEAD]/[TAIL]/[REL] per triplet",
            instance.sample.id
        )));
    }

    let mut out = MatchLabels {
        positions: Vec::with_capacity(3 * n),
        slots: Vec::with_capacity(3 * n),
        labels: Vec::with_capacity(3 * n),
    };
    for (i, t) in instance.sample.triplets.iter().enumerate() {
        out.positions.push(heads[i]);
        out.slots.push(Slot::Head);
        out.labels.push(span_mask(t.head.token_indices()));
        out.positions.push(tails[i]);
        out.slots.push(Slot::Tail);
        out.labels.push(span_mask(t.tail.token_indices()));
        out.positions.push(rels[i]);
        out.slots.push(Slot::Relation);
        match instance.task.labels().iter().position(|l| *l == t.relation) {
            Some(k) => {
                let r = source
                    .ranges_of(|s| *s == Segment::RelationLabel(k))
                    .next()
                    .expect("label segment present");
                out.labels.push(inside(r));
            }
            None => {
                log::warn!("gold relation `{}` absent from the prompt of `{}`", t.relation, instance.sample.id);
                out.labels.push(vec![false; n_src]);
            }
        }
    }
    Ok(out)
}

/// Projections into a shared space followed by a one-hidden-layer scorer.
#[derive(Debug, Clone)]
pub struct MatchHead<F> {
    config: MatchConfig,
    params: ParameterSet<F>,
}

const TOKEN_PROJ: usize = 0;
const PROTO_PROJ: usize = 1;
const HIDDEN_BIAS: usize = 2;
const OUT_W: usize = 3;
const OUT_B: usize = 4;

impl<F: Scalar> MatchHead<F> {
    pub fn new(d_model: usize, config: MatchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dm = config.d_match;
        let mut init = Init::new(seed);
        let mut p = ParameterSet::new();
        p.push("token_proj", init.linear(d_model, dm));
        p.push("proto_proj", init.linear(d_model, dm));
        p.push("hidden_bias", Array2::zeros((1, dm)));
        p.push("out.weight", init.linear(dm, 1));
        p.push("out.bias", Array2::zeros((1, 1)));
        Ok(MatchHead { config, params: p })
    }

    pub fn from_parameters(d_model: usize, config: MatchConfig, params: ParameterSet<F>) -> Result<Self> {
        let mut head = Self::new(d_model, config, 0)?;
        head.params.restore(&params)?;
        Ok(head)
    }

    pub fn config(&self) -> &MatchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<F> {
        &mut self.params
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, F>, slot_base: usize) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t, slot_base + i))
            .collect()
    }

    /// Pair logits, `(K * S) x 1`, prototype-major.
    pub fn logits<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], tokens: Var, prototypes: Var) -> Var {
        let pt = tape.matmul(tokens, b[TOKEN_PROJ]);
        let pp = tape.matmul(prototypes, b[PROTO_PROJ]);
        let pair = tape.pair_add(pp, pt);
        let pair = tape.add_row(pair, b[HIDDEN_BIAS]);
        let h = tape.tanh(pair);
        let z = tape.matmul(h, b[OUT_W]);
        tape.add_row(z, b[OUT_B])
    }

    /// Mean binary cross-entropy over all pairs.
    pub fn loss<'p>(
        &self,
        tape: &mut Tape<'p, F>,
        b: &[Var],
        encoder: Var,
        decoder_hidden: Var,
        labels: &MatchLabels,
    ) -> Result<Var> {
        let (s, d) = tape.shape(encoder);
        if tape.shape(decoder_hidden).1 != d {
            return Err(Error::Shape("encoder and decoder widths differ".into()));
        }
        if labels.labels.iter().any(|row| row.len() != s) {
            return Err(Error::Shape(format!("match labels do not cover {s} source tokens")));
        }
        let protos = tape.gather(decoder_hidden, &labels.positions);
        let z = self.logits(tape, b, encoder, protos);
        Ok(tape.bce_with_logits(z, labels.to_array()))
    }
}

/// `gen + alpha * matching`
pub fn combined_loss<F: Scalar>(gen: F, matching: F, alpha: F) -> F {
    gen + alpha * matching
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;
    use crate::codec::{TargetStyle, TripletOrder};
    use crate::data::{AnnotatedSample, RelationTriplet, Span};
    use crate::episode::TaskPrompt;

    fn instance() -> TrainingInstance {
        let tokens: Vec<String> = "Washington is the capital of the U.S.A .".split(' ').map(String::from).collect();
        let t = RelationTriplet::new(
            Span::from_range(&tokens, 0, 1).unwrap(),
            Span::from_range(&tokens, 5, 7).unwrap(),
            "capital of",
        )
        .unwrap();
        let sample = AnnotatedSample {
            id: "s".into(),
            tokens,
            triplets: vec![t],
        };
        let task = TaskPrompt::new(vec!["born in".into(), "capital of".into()]).unwrap();
        TrainingInstance::new(&sample, task, TripletOrder::Htr, TargetStyle::Prototype).unwrap()
    }

    #[test]
    fn labels_follow_spans_and_prompt() {
        let inst = instance();
        let l = matching_labels(&inst).unwrap();
        let words = split_words(&inst.source.text);
        let marked = |row: &Vec<bool>| -> Vec<&str> {
            row.iter().zip(&words).filter(|(b, _)| **b).map(|(_, w)| w.as_str()).collect()
        };
        assert_eq!(marked(&l.labels[0]), ["Washington"]);
        assert_eq!(marked(&l.labels[1]), ["the", "U.S.A"]);
        assert_eq!(marked(&l.labels[2]), ["capital", "of"]);
        // prompt occurrence, not the sentence one
        let first_capital = words.iter().position(|w| w == "capital").unwrap();
        assert!(l.labels[2][first_capital]);
        assert_eq!(l.ones(), 1 + 2 + 2);
        let target = split_words(&inst.target.text);
        assert_eq!(target[l.positions[0] - 1], HEAD_TOKEN);
        assert_eq!(target[l.positions[2] - 1], REL_TOKEN);
    }

    #[test]
    fn zero_logits_give_ln2() {
        let mut head: MatchHead<f64> = MatchHead::new(8, MatchConfig::default(), 1).unwrap();
        head.params_mut().get_mut("out.weight").unwrap().fill(0.0);
        let mut tape = Tape::new();
        let b = head.bind(&mut tape, 0);
        let enc = tape.constant(Array2::from_elem((3, 8), 0.3));
        let dec = tape.constant(Array2::from_elem((2, 8), -0.1));
        let labels = MatchLabels {
            positions: vec![1],
            slots: vec![Slot::Head],
            labels: vec![vec![true, false, false]],
        };
        let l = head.loss(&mut tape, &b, enc, dec, &labels).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn combined() {
        assert_eq!(combined_loss(2.0, 0.5, 1.0), 2.5);
        assert_eq!(combined_loss(2.0, 0.5, 0.0), 2.0);
    }

    #[test]
    fn plain_target_rejected() {
        let mut inst = instance();
        inst.target = crate::codec::serialize_triplets(&inst.sample.surface_triplets(), TripletOrder::Htr, TargetStyle::Plain).unwrap();
        assert!(matching_labels(&inst).is_err());
    }

    #[test]
    fn vocabulary_has_prototype_ids() {
        assert_eq!(Vocabulary::HEAD_ID, 4);
    }
}
