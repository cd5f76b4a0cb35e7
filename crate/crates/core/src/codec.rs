//! Text forms consumed and produced by the generative model.
//!
//! Source: `Relation: r1, r2, r3. Context: w1 w2 ... wl`
//!
//! Target (HTR, plain): `Head Entity: h, Tail Entity: t, Relation: r.`
//! with several triplets joined by one space. The prototype style swaps the
//! clause labels for `[HEAD]:`, `[TAIL]:` and `[REL]:`.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SurfaceTriplet;
use crate::episode::TaskPrompt;
use crate::error::{Error, Result};

pub const SOURCE_PREFIX: &str = "Relation: ";
pub const CONTEXT_MARKER: &str = ". Context: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Head,
    Tail,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TripletOrder {
    #[default]
    Htr,
    Thr,
    Rht,
}

impl TripletOrder {
    pub const ALL: [TripletOrder; 3] = [TripletOrder::Htr, TripletOrder::Thr, TripletOrder::Rht];

    pub fn slots(self) -> [Slot; 3] {
        match self {
            TripletOrder::Htr => [Slot::Head, Slot::Tail, Slot::Relation],
            TripletOrder::Thr => [Slot::Tail, Slot::Head, Slot::Relation],
            TripletOrder::Rht => [Slot::Relation, Slot::Head, Slot::Tail],
        }
    }
}

impl fmt::Display for TripletOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TripletOrder::Htr => "HTR",
            TripletOrder::Thr => "THR",
            TripletOrder::Rht => "RHT",
        })
    }
}

impl FromStr for TripletOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HTR" => Ok(TripletOrder::Htr),
            "THR" => Ok(TripletOrder::Thr),
            "RHT" => Ok(TripletOrder::Rht),
            _ => Err(Error::Config(format!("unknown triplet order `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetStyle {
    #[default]
    Plain,
    Prototype,
}

impl TargetStyle {
    pub fn label(self, slot: Slot) -> &'static str {
        match (self, slot) {
            (TargetStyle::Plain, Slot::Head) => "Head Entity:",
            (TargetStyle::Plain, Slot::Tail) => "Tail Entity:",
            (TargetStyle::Plain, Slot::Relation) => "Relation:",
            (TargetStyle::Prototype, Slot::Head) => "[HEAD]:",
            (TargetStyle::Prototype, Slot::Tail) => "[TAIL]:",
            (TargetStyle::Prototype, Slot::Relation) => "[REL]:",
        }
    }
}

impl fmt::Display for TargetStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetStyle::Plain => "plain",
            TargetStyle::Prototype => "prototype",
        })
    }
}

impl FromStr for TargetStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(TargetStyle::Plain),
            "prototype" => Ok(TargetStyle::Prototype),
            _ => Err(Error::Config(format!("unknown target style `{s}`"))),
        }
    }
}

/// What a character range of an [`AnnotatedText`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// The i-th candidate relation name in a source prompt.
    RelationLabel(usize),
    /// The sentence part of a source prompt.
    Context,
    /// A slot value of the i-th serialized triplet.
    Value { triplet: usize, slot: Slot },
}

/// Text plus character-range annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedText {
    pub text: String,
    pub layout: Vec<(Segment, Range<usize>)>,
}

impl AnnotatedText {
    pub fn slice(&self, range: &Range<usize>) -> &str {
        &self.text[range.clone()]
    }

    pub fn ranges_of(&self, pred: impl Fn(&Segment) -> bool) -> impl Iterator<Item = &Range<usize>> {
        self.layout.iter().filter(move |(s, _)| pred(s)).map(|(_, r)| r)
    }
}

pub type SourceText = AnnotatedText;
pub type TargetText = AnnotatedText;

/// Build the task-aware source text for one sentence.
pub fn build_source(task: &TaskPrompt, tokens: &[String]) -> Result<SourceText> {
    if task.labels().is_empty() {
        return Err(Error::InvalidInput("task prompt has no labels".into()));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidInput("sentence has no tokens".into()));
    }
    let mut text = String::from(SOURCE_PREFIX);
    let mut layout = Vec::with_capacity(task.labels().len() + 1);
    for (i, label) in task.labels().iter().enumerate() {
        if i > 0 {
            text.push_str(", ");
        }
        let start = text.len();
        text.push_str(label);
        layout.push((Segment::RelationLabel(i), start..text.len()));
    }
    text.push_str(CONTEXT_MARKER);
    let start = text.len();
    text.push_str(&tokens.join(" "));
    layout.push((Segment::Context, start..text.len()));
    Ok(AnnotatedText { text, layout })
}

/// Prompt-only source (`Relation: a, b, c.`) used to encode a task on its own.
pub fn build_task_source(task: &TaskPrompt) -> Result<SourceText> {
    if task.labels().is_empty() {
        return Err(Error::InvalidInput("task prompt has no labels".into()));
    }
    let mut text = String::from(SOURCE_PREFIX);
    let mut layout = Vec::new();
    for (i, label) in task.labels().iter().enumerate() {
        if i > 0 {
            text.push_str(", ");
        }
        let start = text.len();
        text.push_str(label);
        layout.push((Segment::RelationLabel(i), start..text.len()));
    }
    text.push('.');
    Ok(AnnotatedText { text, layout })
}

fn slot_value(t: &SurfaceTriplet, slot: Slot) -> &str {
    match slot {
        Slot::Head => &t.head,
        Slot::Tail => &t.tail,
        Slot::Relation => &t.relation,
    }
}

/// Render triplets as the decoder target.
pub fn serialize_triplets(
    triplets: &[SurfaceTriplet],
    order: TripletOrder,
    style: TargetStyle,
) -> Result<TargetText> {
    if triplets.is_empty() {
        return Err(Error::InvalidInput("no triplets to serialize".into()));
    }
    let mut text = String::new();
    let mut layout = Vec::with_capacity(triplets.len() * 3);
    for (i, t) in triplets.iter().enumerate() {
        if i > 0 {
            text.push(' ');
        }
        for (k, slot) in order.slots().into_iter().enumerate() {
            if k > 0 {
                text.push_str(", ");
            }
            text.push_str(style.label(slot));
            text.push(' ');
            let start = text.len();
            text.push_str(slot_value(t, slot));
            layout.push((Segment::Value { triplet: i, slot }, start..text.len()));
        }
        text.push('.');
    }
    Ok(AnnotatedText { text, layout })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diagnostic {
    /// A group missing a slot, with a slot out of order, or with an empty value.
    MalformedClause { at: usize },
    /// An exact repeat of an earlier triplet.
    Duplicate { triplet: SurfaceTriplet },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParseResult {
    pub triplets: Vec<SurfaceTriplet>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Default)]
struct Group {
    values: [Option<String>; 3],
    next: usize,
    broken: bool,
    start: usize,
}

/// Recover triplets from generated text.
///
/// The scan finds every clause label left to right and splits values on
/// labels (not commas), so entity surfaces may contain commas. A group is
/// complete once its three slots arrive in the declared order; anything else
/// is dropped with a single diagnostic. Never fails.
pub fn parse_triplets(text: &str, order: TripletOrder, style: TargetStyle) -> ParseResult {
    let slots = order.slots();
    let labels: Vec<(Slot, &str)> = slots.iter().map(|&s| (s, style.label(s))).collect();

    // Locate labels greedily, earliest first, no overlaps.
    let mut marks: Vec<(usize, usize, Slot)> = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let next = labels
            .iter()
            .filter_map(|&(slot, lab)| text[pos..].find(lab).map(|i| (pos + i, lab.len(), slot)))
            .min_by_key(|&(at, _, _)| at);
        match next {
            Some((at, len, slot)) => {
                marks.push((at, at + len, slot));
                pos = at + len;
            }
            None => break,
        }
    }

    let mut out = ParseResult::default();
    let mut seen = HashSet::new();
    let mut group: Option<Group> = None;

    let finish = |group: Group, out: &mut ParseResult, seen: &mut HashSet<SurfaceTriplet>| {
        let complete = !group.broken && group.values.iter().all(|v| v.as_deref().is_some_and(|s| !s.is_empty()));
        if !complete {
            out.diagnostics.push(Diagnostic::MalformedClause { at: group.start });
            return;
        }
        let mut head = String::new();
        let mut tail = String::new();
        let mut relation = String::new();
        for (slot, v) in slots.iter().zip(group.values) {
            let v = v.unwrap();
            match slot {
                Slot::Head => head = v,
                Slot::Tail => tail = v,
                Slot::Relation => relation = v,
            }
        }
        let t = SurfaceTriplet { head, tail, relation };
        if seen.insert(t.clone()) {
            out.triplets.push(t);
        } else {
            out.diagnostics.push(Diagnostic::Duplicate { triplet: t });
        }
    };

    for (k, &(start, end, slot)) in marks.iter().enumerate() {
        let value_end = marks.get(k + 1).map_or(text.len(), |m| m.0);
        let next_slot = marks.get(k + 1).map(|m| m.2);
        let raw = text[end..value_end].trim();
        let value = if next_slot.is_none() || next_slot == Some(slots[0]) {
            strip_one(raw, '.', ',')
        } else {
            strip_one(raw, ',', '.')
        };

        if slot == slots[0] {
            if let Some(g) = group.take() {
                finish(g, &mut out, &mut seen);
            }
            group = Some(Group {
                start,
                ..Group::default()
            });
        }
        let g = group.get_or_insert_with(|| Group {
            start,
            broken: true,
            ..Group::default()
        });
        if g.broken {
            continue;
        }
        if g.next < 3 && slots[g.next] == slot {
            g.values[g.next] = Some(value.to_string());
            g.next += 1;
            if g.next == 3 {
                let done = group.take().unwrap();
                finish(done, &mut out, &mut seen);
            }
        } else {
            g.broken = true;
        }
    }
    if let Some(g) = group.take() {
        finish(g, &mut out, &mut seen);
    }
    out
}

fn strip_one(s: &str, preferred: char, fallback: char) -> &str {
    let s = s.trim_end();
    let s = s
        .strip_suffix(preferred)
        .or_else(|| s.strip_suffix(fallback))
        .unwrap_or(s);
    s.trim()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(labels: &[&str]) -> TaskPrompt {
        TaskPrompt::new(labels.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn source_matches_reference_prompt() {
        let t = task(&["sitter", "capital of", "conflict", "elector", "direction"]);
        let s = build_source(&t, &toks("Washington is the capital of the U.S.A.")).unwrap();
        assert_eq!(
            s.text,
            "Relation: sitter, capital of, conflict, elector, direction. Context: Washington is the capital of the U.S.A."
        );
        let labels: Vec<&str> = s
            .ranges_of(|seg| matches!(seg, Segment::RelationLabel(_)))
            .map(|r| s.slice(r))
            .collect();
        assert_eq!(labels, t.labels().iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn single_label_source() {
        let s = build_source(&task(&["X"]), &toks("a")).unwrap();
        assert_eq!(s.text, "Relation: X. Context: a");
        assert!(build_source(&task(&["X"]), &[]).is_err());
    }

    #[test]
    fn serialize_reference_examples() {
        let t = [SurfaceTriplet::new("Washington", "the U.S.A", "capital of")];
        let plain = serialize_triplets(&t, TripletOrder::Htr, TargetStyle::Plain).unwrap();
        assert_eq!(
            plain.text,
            "Head Entity: Washington, Tail Entity: the U.S.A, Relation: capital of."
        );
        let proto = serialize_triplets(&t, TripletOrder::Htr, TargetStyle::Prototype).unwrap();
        assert_eq!(proto.text, "[HEAD]: Washington, [TAIL]: the U.S.A, [REL]: capital of.");
        assert!(serialize_triplets(&[], TripletOrder::Htr, TargetStyle::Plain).is_err());
    }

    #[test]
    fn two_triplets_rht_round_trip() {
        let t = vec![
            SurfaceTriplet::new("A", "B", "r1"),
            SurfaceTriplet::new("Washington, D.C.", "C", "r2"),
        ];
        let s = serialize_triplets(&t, TripletOrder::Rht, TargetStyle::Plain).unwrap();
        assert_eq!(
            s.text,
            "Relation: r1, Head Entity: A, Tail Entity: B. Relation: r2, Head Entity: Washington, D.C., Tail Entity: C."
        );
        let p = parse_triplets(&s.text, TripletOrder::Rht, TargetStyle::Plain);
        assert_eq!(p.triplets, t);
        assert!(p.diagnostics.is_empty());
    }

    #[test]
    fn missing_tail_is_one_malformed_group() {
        let p = parse_triplets("Head Entity: A, Relation: r.", TripletOrder::Htr, TargetStyle::Plain);
        assert!(p.triplets.is_empty());
        assert_eq!(p.diagnostics.len(), 1);
        assert!(matches!(p.diagnostics[0], Diagnostic::MalformedClause { .. }));
    }

    #[test]
    fn duplicates_are_dropped_with_diagnostic() {
        let text = "Head Entity: A, Tail Entity: B, Relation: r. Head Entity: A, Tail Entity: B, Relation: r.";
        let p = parse_triplets(text, TripletOrder::Htr, TargetStyle::Plain);
        assert_eq!(p.triplets.len(), 1);
        assert!(matches!(p.diagnostics[..], [Diagnostic::Duplicate { .. }]));
    }

    #[test]
    fn garbage_and_partial_text() {
        for text in ["", "nonsense", "Relation:", ". . ,", "[HEAD]: x, [TAIL]:", "Tail Entity: Tail Entity:"] {
            for order in TripletOrder::ALL {
                for style in [TargetStyle::Plain, TargetStyle::Prototype] {
                    let p = parse_triplets(text, order, style);
                    assert!(p.triplets.is_empty(), "{text:?}");
                }
            }
        }
    }

    #[test]
    fn value_ending_in_period_survives() {
        let t = vec![SurfaceTriplet::new("X", "D.C.", "in")];
        let s = serialize_triplets(&t, TripletOrder::Rht, TargetStyle::Prototype).unwrap();
        assert_eq!(parse_triplets(&s.text, TripletOrder::Rht, TargetStyle::Prototype).triplets, t);
    }
}
