//! Word-level tokenizer and vocabulary.
//!
//! Text is split on single spaces. A trailing run of `.`, `,`, `:` or `;` is
//! peeled off a word into *glued* tokens (`##.`, `##,` ...), which detokenize
//! without a leading space, so `detokenize(tokenize(s)) == s` for any
//! single-spaced in-vocabulary string.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::{Slot, TargetStyle, CONTEXT_MARKER, SOURCE_PREFIX};
use crate::data::Dataset;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const HEAD_TOKEN: &str = "[HEAD]";
pub const TAIL_TOKEN: &str = "[TAIL]";
pub const REL_TOKEN: &str = "[REL]";
pub const GLUE: &str = "##";

const SPECIALS: [&str; 7] = [PAD, BOS, EOS, UNK, HEAD_TOKEN, TAIL_TOKEN, REL_TOKEN];
const PUNCT: [char; 4] = ['.', ',', ':', ';'];

/// Split text into word tokens, peeling trailing punctuation into glued tokens.
pub fn split_words(text: &str) -> Vec<String> {
    split_words_with_offsets(text).into_iter().map(|(w, _)| w).collect()
}

/// [`split_words`] plus the byte range each token covers in `text`.
pub fn split_words_with_offsets(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut pos = 0;
    for word in text.split(' ') {
        let start = pos;
        pos += word.len() + 1;
        if word.is_empty() {
            continue;
        }
        let stem = word.trim_end_matches(PUNCT);
        let mut at = start + stem.len();
        let mut glued = word[stem.len()..].chars();
        if stem.is_empty() {
            // all punctuation: first char stands alone
            let c = glued.next().unwrap();
            out.push((c.to_string(), start..start + c.len_utf8()));
            at = start + c.len_utf8();
        } else {
            out.push((stem.to_string(), start..at));
        }
        for c in glued {
            out.push((format!("{GLUE}{c}"), at..at + 1));
            at += 1;
        }
    }
    out
}

/// Inverse of [`split_words`].
pub fn join_words<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        if let Some(rest) = tok.strip_prefix(GLUE).filter(|r| !r.is_empty()) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    out
}

/// True for glued tokens and standalone punctuation.
pub fn is_punctuation(token: &str) -> bool {
    token.starts_with(GLUE) || (!token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;
    pub const HEAD_ID: usize = 4;
    pub const TAIL_ID: usize = 5;
    pub const REL_ID: usize = 6;

    /// Specials first, then the given tokens sorted and deduplicated.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let rest: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        let all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        Vocabulary::from(all)
    }

    /// Every word of the given datasets plus the fixed prompt and clause words.
    pub fn build<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        let mut words: BTreeSet<String> = BTreeSet::new();
        let add = |words: &mut BTreeSet<String>, text: &str| words.extend(split_words(text));
        add(&mut words, SOURCE_PREFIX);
        add(&mut words, CONTEXT_MARKER);
        for c in PUNCT {
            add(&mut words, &c.to_string());
            words.insert(format!("{GLUE}{c}"));
        }
        for style in [TargetStyle::Plain, TargetStyle::Prototype] {
            for slot in [Slot::Head, Slot::Tail, Slot::Relation] {
                add(&mut words, style.label(slot));
            }
        }
        for ds in datasets {
            for s in ds.samples() {
                for t in &s.tokens {
                    add(&mut words, t);
                }
                for t in &s.triplets {
                    add(&mut words, &t.relation);
                }
            }
        }
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Pad, bos and eos are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, Self::PAD_ID | Self::BOS_ID | Self::EOS_ID))
            .map(|&i| self.token(i))
            .collect();
        join_words(&words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["capital", "of", "Washington", "the", "U.S.A", "Relation", "##:", "##,", "##.", "Context"])
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = vocab();
        assert_eq!(v.id(PAD), 0);
        assert_eq!(v.id(EOS), 2);
        assert_eq!(v.id(HEAD_TOKEN), Vocabulary::HEAD_ID);
        assert_eq!(v.id(REL_TOKEN), Vocabulary::REL_ID);
    }

    #[test]
    fn words_and_punctuation() {
        let v = vocab();
        assert_eq!(v.tokenize("capital of"), vec![v.id("capital"), v.id("of")]);
        assert_eq!(split_words("[HEAD]: Washington, the U.S.A."), ["[HEAD]", "##:", "Washington", "##,", "the", "U.S.A", "##."]);
        assert_eq!(split_words("a .. b"), ["a", ".", "##.", "b"]);
        assert_eq!(v.tokenize("nowhere"), vec![Vocabulary::UNK_ID]);
    }

    #[test]
    fn offsets_cover_tokens() {
        let s = "Relation: a b, c. Context: x ..";
        for (tok, r) in split_words_with_offsets(s) {
            assert_eq!(tok.trim_start_matches(GLUE), &s[r]);
        }
    }

    #[test]
    fn round_trip() {
        let v = vocab();
        for s in ["Relation: capital of, the. Context: Washington the U.S.A .", "[HEAD]: the U.S.A., of;"] {
            let v2 = Vocabulary::from_tokens(split_words(s).into_iter().chain(v.tokens().iter().cloned()));
            assert_eq!(v2.detokenize(&v2.tokenize(s)), s);
        }
    }

    #[test]
    fn serde_as_token_list() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with("[\"<pad>\""));
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
