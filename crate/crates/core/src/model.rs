//! Encoder-decoder transformer with a pointer-generator output layer.
//!
//! The source is a prompt region (candidate relation names) followed by a
//! context region. Each source token gets a feature embedding saying which
//! region it sits in and whether the same word occurs in the other region.
//! The output distribution mixes a vocabulary softmax with a copy
//! distribution over source positions, and every decoder input token also
//! reads the encoder states of the source positions holding that same token.

use std::collections::HashSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::vocab::{is_punctuation, join_words, split_words, Vocabulary, GLUE, UNK};

/// Random source used for dropout during training.
pub type DropoutRng = ChaCha8Rng;

const LOG_FLOOR: f64 = 1e-30;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    /// Probability of feeding the unknown-token embedding in place of a word
    /// during training. Copy targets keep the real token.
    pub word_dropout: f64,
    /// Add sinusoidal position encodings.
    pub positional: bool,
    /// Mix a copy distribution over source tokens into the output.
    pub pointer: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 512,
            max_source_len: 256,
            max_target_len: 128,
            dropout: 0.1,
            word_dropout: 0.1,
            positional: true,
            pointer: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        for (name, p) in [("dropout", self.dropout), ("word_dropout", self.word_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("model.{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Named tensors with a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<F> {
    names: Vec<String>,
    tensors: Vec<Array2<F>>,
}

impl<F: Scalar> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape("parameter names differ".into()));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: {:?} vs {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn restore(&mut self, from: &Self) -> Result<()> {
        self.check_compatible(from)?;
        for (dst, src) in self.tensors.iter_mut().zip(&from.tensors) {
            dst.assign(src);
        }
        Ok(())
    }

    /// `self += scale * delta`
    pub fn axpy(&mut self, scale: F, delta: &Self) -> Result<()> {
        self.check_compatible(delta)?;
        for (dst, d) in self.tensors.iter_mut().zip(&delta.tensors) {
            dst.scaled_add(scale, d);
        }
        Ok(())
    }

    /// `self - base`
    pub fn difference(&self, base: &Self) -> Result<Self> {
        self.check_compatible(base)?;
        Ok(ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().zip(&base.tensors).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.mapv(&f)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        ParameterSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|x| G::from_f64_lossy(x.to_f64().unwrap())))
                .collect(),
        }
    }

    /// Prefix every name with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        self.iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
    }
}

/// Random-normal tensor builder shared by all modules.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        let dist = Normal::new(0.0, std).expect("valid std");
        Array2::from_shape_fn((rows, cols), |_| F::from_f64_lossy(dist.sample(&mut self.rng)))
    }

    /// Weight scaled by `1 / sqrt(fan_in)`.
    pub fn linear<F: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Array2<F> {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross: Attention,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    token_embedding: usize,
    feature_embedding: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    out_w: usize,
    out_b: usize,
    pointer_q: usize,
    pointer_k: usize,
    gate_w: usize,
    gate_b: usize,
    selective: usize,
}

/// Number of source feature rows: (prompt, context) x (no match, match).
pub const SOURCE_FEATURES: usize = 4;

/// Per-position decoder outputs of one teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace<F> {
    /// `T x d_model`
    pub hidden: Array2<F>,
    /// `T x |V|`, each row a normalized log-distribution.
    pub log_probs: Array2<F>,
}

/// Encoder hidden states with the source ids they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub hidden: Array2<F>,
    pub tokens: Vec<usize>,
}

/// Tape handles of one teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub loss: Var,
    pub encoder: Var,
    pub hidden: Var,
    pub log_probs: Var,
}

/// Token ids of a target sequence, shifted for teacher forcing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetIds {
    /// `<bos>` followed by the target tokens.
    pub input: Vec<usize>,
    /// The target tokens followed by `<eos>`.
    pub gold: Vec<usize>,
}

impl TargetIds {
    pub fn new(tokens: &[usize]) -> Self {
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(Vocabulary::BOS_ID);
        input.extend_from_slice(tokens);
        let mut gold = tokens.to_vec();
        gold.push(Vocabulary::EOS_ID);
        TargetIds { input, gold }
    }
}

/// Tokenized source with out-of-vocabulary words given temporary ids.
///
/// Ids below the vocabulary size are ordinary; the j-th distinct unknown
/// word gets id `|V| + j`. Unknown words are embedded as `<unk>` but can be
/// copied into the output under their extended id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Source {
    pub ids: Vec<usize>,
    pub oov: Vec<String>,
}

impl Source {
    pub fn new(vocab: &Vocabulary, text: &str) -> Self {
        let mut oov: Vec<String> = Vec::new();
        let ids = split_words(text)
            .into_iter()
            .map(|w| match vocab.get(&w) {
                Some(id) => id,
                None => {
                    let j = oov.iter().position(|o| *o == w).unwrap_or_else(|| {
                        oov.push(w);
                        oov.len() - 1
                    });
                    vocab.len() + j
                }
            })
            .collect();
        Source { ids, oov }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Output width: vocabulary plus this source's unknown words.
    pub fn extended_len(&self, vocab: &Vocabulary) -> usize {
        vocab.len() + self.oov.len()
    }

    pub fn token<'a>(&'a self, vocab: &'a Vocabulary, id: usize) -> &'a str {
        if id < vocab.len() {
            vocab.token(id)
        } else {
            self.oov.get(id - vocab.len()).map_or(UNK, String::as_str)
        }
    }

    /// Target ids: vocabulary words, else copyable source words, else `<unk>`.
    pub fn target_tokens(&self, vocab: &Vocabulary, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| match vocab.get(&w) {
                Some(id) => id,
                None => self
                    .oov
                    .iter()
                    .position(|o| *o == w)
                    .map_or(Vocabulary::UNK_ID, |j| vocab.len() + j),
            })
            .collect()
    }

    pub fn detokenize(&self, vocab: &Vocabulary, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, Vocabulary::PAD_ID | Vocabulary::BOS_ID | Vocabulary::EOS_ID))
            .map(|&i| self.token(vocab, i))
            .collect();
        join_words(&words)
    }
}

#[derive(Debug, Clone)]
pub struct Seq2Seq<F> {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParameterSet<F>,
    layout: Layout,
    positions: Array2<F>,
}

fn sinusoid<F: Scalar>(len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        F::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<F: Scalar> Seq2Seq<F> {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = vocab.len();
        let mut init = Init::new(config.init_seed);
        let mut p = ParameterSet::new();

        let token_embedding = p.push("embed.token", init.normal(v, d, 1.0));
        let feature_embedding = p.push("embed.feature", init.normal(SOURCE_FEATURES, d, 1.0));

        let norm = |p: &mut ParameterSet<F>, name: &str| Norm {
            gain: p.push(format!("{name}.gain"), Array2::ones((1, d))),
            bias: p.push(format!("{name}.bias"), Array2::zeros((1, d))),
        };
        fn attention<F: Scalar>(p: &mut ParameterSet<F>, init: &mut Init, name: &str, d: usize) -> Attention {
            Attention {
                wq: p.push(format!("{name}.wq"), init.linear(d, d)),
                wk: p.push(format!("{name}.wk"), init.linear(d, d)),
                wv: p.push(format!("{name}.wv"), init.linear(d, d)),
                wo: p.push(format!("{name}.wo"), init.linear(d, d)),
            }
        }
        fn feed_forward<F: Scalar>(p: &mut ParameterSet<F>, init: &mut Init, name: &str, d: usize, ff: usize) -> FeedForward {
            FeedForward {
                w1: p.push(format!("{name}.w1"), init.linear(d, ff)),
                b1: p.push(format!("{name}.b1"), Array2::zeros((1, ff))),
                w2: p.push(format!("{name}.w2"), init.linear(ff, d)),
                b2: p.push(format!("{name}.b2"), Array2::zeros((1, d))),
            }
        }

        let mut encoder = Vec::new();
        for l in 0..config.n_encoder_layers {
            let name = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                ln1: norm(&mut p, &format!("{name}.ln1")),
                attn: attention(&mut p, &mut init, &format!("{name}.attn"), d),
                ln2: norm(&mut p, &format!("{name}.ln2")),
                ff: feed_forward(&mut p, &mut init, &format!("{name}.ff"), d, config.d_ff),
            });
        }
        let encoder_norm = norm(&mut p, "encoder.norm");
        let mut decoder = Vec::new();
        for l in 0..config.n_decoder_layers {
            let name = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                ln1: norm(&mut p, &format!("{name}.ln1")),
                self_attn: attention(&mut p, &mut init, &format!("{name}.self_attn"), d),
                ln2: norm(&mut p, &format!("{name}.ln2")),
                cross: attention(&mut p, &mut init, &format!("{name}.cross_attn"), d),
                ln3: norm(&mut p, &format!("{name}.ln3")),
                ff: feed_forward(&mut p, &mut init, &format!("{name}.ff"), d, config.d_ff),
            });
        }
        let decoder_norm = norm(&mut p, "decoder.norm");
        let out_w = p.push("output.weight", init.linear(d, v));
        let out_b = p.push("output.bias", Array2::zeros((1, v)));
        let pointer_q = p.push("pointer.query", init.linear(d, d));
        let pointer_k = p.push("pointer.key", init.linear(d, d));
        let gate_w = p.push("pointer.gate.weight", init.linear(2 * d, 1));
        let gate_b = p.push("pointer.gate.bias", Array2::zeros((1, 1)));
        let selective = p.push("selective_read", init.linear(d, d));

        let layout = Layout {
            token_embedding,
            feature_embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            out_w,
            out_b,
            pointer_q,
            pointer_k,
            gate_w,
            gate_b,
            selective,
        };
        let positions = sinusoid(config.max_source_len.max(config.max_target_len + 1), d);
        Ok(Seq2Seq {
            config,
            vocab,
            params: p,
            layout,
            positions,
        })
    }

    /// Rebuild a model around stored parameters.
    pub fn from_parameters(config: ModelConfig, vocab: Vocabulary, params: ParameterSet<F>) -> Result<Self> {
        let mut model = Self::new(config, vocab)?;
        model.params.restore(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<F> {
        &mut self.params
    }

    pub fn snapshot(&self) -> ParameterSet<F> {
        self.params.snapshot()
    }

    pub fn restore(&mut self, p: &ParameterSet<F>) -> Result<()> {
        self.params.restore(p)
    }

    pub fn axpy(&mut self, scale: F, delta: &ParameterSet<F>) -> Result<()> {
        self.params.axpy(scale, delta)
    }

    /// Same architecture in another precision.
    pub fn cast<G: Scalar>(&self) -> Seq2Seq<G> {
        Seq2Seq {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            positions: self.positions.mapv(|x| G::from_f64_lossy(x.to_f64().unwrap())),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Register every parameter on the tape, gradients under `slot_base + i`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, F>, slot_base: usize) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t, slot_base + i))
            .collect()
    }

    pub fn source(&self, text: &str) -> Result<Source> {
        let src = Source::new(&self.vocab, text);
        self.check_source(&src)?;
        Ok(src)
    }

    /// Shifted target ids for `text`, copying unknown words from `src`.
    pub fn target(&self, src: &Source, text: &str) -> Result<TargetIds> {
        let ids = src.target_tokens(&self.vocab, text);
        self.check_target_len(ids.len() + 1)?;
        Ok(TargetIds::new(&ids))
    }

    /// Feature row per source token: region (prompt or context) and whether
    /// the word also appears in the other region.
    pub fn source_features(&self, src: &Source) -> Vec<usize> {
        let ids = &src.ids;
        let tok = |i: usize| src.token(&self.vocab, ids[i]);
        let dot = format!("{GLUE}.");
        let colon = format!("{GLUE}:");
        let context_start = (0..ids.len().saturating_sub(2))
            .find(|&i| tok(i) == dot && tok(i + 1) == "Context" && tok(i + 2) == colon)
            .map_or(ids.len(), |i| i + 3);
        let matchable = |i: usize| !is_punctuation(tok(i)) && ids[i] != Vocabulary::UNK_ID;
        let prompt: HashSet<usize> = (0..context_start).filter(|&i| matchable(i)).map(|i| ids[i]).collect();
        let context: HashSet<usize> = (context_start..ids.len()).filter(|&i| matchable(i)).map(|i| ids[i]).collect();
        (0..ids.len())
            .map(|i| {
                if i < context_start {
                    usize::from(matchable(i) && context.contains(&ids[i]))
                } else {
                    2 + usize::from(matchable(i) && prompt.contains(&ids[i]))
                }
            })
            .collect()
    }

    /// Embedding rows: unknown words use `<unk>`; in training, words are
    /// also swapped for `<unk>` at the word-dropout rate.
    fn input_rows(&self, ids: &[usize], rng: Option<&mut DropoutRng>) -> Vec<usize> {
        let v = self.vocab.len();
        let clamp = |id: usize| if id >= v { Vocabulary::UNK_ID } else { id };
        match rng {
            Some(rng) if self.config.word_dropout > 0.0 => ids
                .iter()
                .map(|&id| {
                    if id > Vocabulary::REL_ID && rng.random_bool(self.config.word_dropout) {
                        Vocabulary::UNK_ID
                    } else {
                        clamp(id)
                    }
                })
                .collect(),
            _ => ids.iter().map(|&id| clamp(id)).collect(),
        }
    }

    fn dropout<'p>(&self, tape: &mut Tape<'p, F>, x: Var, rng: Option<&mut DropoutRng>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = F::from_f64_lossy(1.0 / (1.0 - p));
                let (r, c) = tape.shape(x);
                let mask = Array2::from_shape_fn((r, c), |_| if rng.random_bool(p) { F::zero() } else { keep });
                let m = tape.constant(mask);
                tape.mul(x, m)
            }
            _ => x,
        }
    }

    fn embed<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], rows: &[usize]) -> Var {
        let e = tape.gather(b[self.layout.token_embedding], rows);
        if self.config.positional {
            let pos = tape.constant(self.positions.slice(ndarray::s![..rows.len(), ..]).to_owned());
            tape.add(e, pos)
        } else {
            e
        }
    }

    fn norm<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], n: Norm, x: Var) -> Var {
        tape.layer_norm(x, b[n.gain], b[n.bias], F::from_f64_lossy(LN_EPS))
    }

    fn attention<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], a: Attention, x: Var, mem: Var, causal: bool) -> Var {
        let q = tape.matmul(x, b[a.wq]);
        let k = tape.matmul(mem, b[a.wk]);
        let v = tape.matmul(mem, b[a.wv]);
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qi, ki, vi) = if h == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, i * dh, dh),
                    tape.slice_cols(k, i * dh, dh),
                    tape.slice_cols(v, i * dh, dh),
                )
            };
            let s = tape.matmul_nt(qi, ki);
            let s = tape.scale(s, scale);
            let p = if causal { tape.causal_softmax(s, 0) } else { tape.softmax(s) };
            heads.push(tape.matmul(p, vi));
        }
        let o = if h == 1 { heads[0] } else { tape.concat_cols(&heads) };
        tape.matmul(o, b[a.wo])
    }

    fn feed_forward<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], f: FeedForward, x: Var) -> Var {
        let h = tape.matmul(x, b[f.w1]);
        let h = tape.add_row(h, b[f.b1]);
        let h = tape.gelu(h);
        let o = tape.matmul(h, b[f.w2]);
        tape.add_row(o, b[f.b2])
    }

    /// Encoder states, `S x d_model`.
    pub fn encode<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], src: &Source, mut rng: Option<&mut DropoutRng>) -> Var {
        let rows = self.input_rows(&src.ids, rng.as_deref_mut());
        let feats = self.source_features(src);
        let e = self.embed(tape, b, &rows);
        let fe = tape.gather(b[self.layout.feature_embedding], &feats);
        let x = tape.add(e, fe);
        let mut x = self.dropout(tape, x, rng.as_deref_mut());
        for layer in &self.layout.encoder {
            let h = self.norm(tape, b, layer.ln1, x);
            let a = self.attention(tape, b, layer.attn, h, h, false);
            let a = self.dropout(tape, a, rng.as_deref_mut());
            x = tape.add(x, a);
            let h = self.norm(tape, b, layer.ln2, x);
            let f = self.feed_forward(tape, b, layer.ff, h);
            let f = self.dropout(tape, f, rng.as_deref_mut());
            x = tape.add(x, f);
        }
        self.norm(tape, b, self.layout.encoder_norm, x)
    }

    /// Mean-pooled encoder states, `1 x d_model`.
    pub fn encode_pooled<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], src: &Source, rng: Option<&mut DropoutRng>) -> Var {
        let enc = self.encode(tape, b, src, rng);
        tape.mean_rows(enc)
    }

    /// Decoder states, `T x d_model`. `memory` rows are placed before the
    /// encoder states in every cross-attention; an empty memory is ignored.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<'p>(
        &self,
        tape: &mut Tape<'p, F>,
        b: &[Var],
        encoder: Var,
        src: &Source,
        dec_input: &[usize],
        memory: Option<Var>,
        mut rng: Option<&mut DropoutRng>,
    ) -> Var {
        let rows = self.input_rows(dec_input, rng.as_deref_mut());
        let mut x = self.embed(tape, b, &rows);

        // selective read: mean encoder state over source positions holding the input token
        let mut weights = Array2::<F>::zeros((dec_input.len(), src.len()));
        let mut any = false;
        for (t, &tok) in dec_input.iter().enumerate() {
            let hits: Vec<usize> = (0..src.len()).filter(|&j| src.ids[j] == tok).collect();
            if !hits.is_empty() {
                any = true;
                let w = F::one() / F::from_usize(hits.len()).unwrap();
                for j in hits {
                    weights[[t, j]] = w;
                }
            }
        }
        if any {
            let w = tape.constant(weights);
            let read = tape.matmul(w, encoder);
            let read = tape.matmul(read, b[self.layout.selective]);
            x = tape.add(x, read);
        }
        x = self.dropout(tape, x, rng.as_deref_mut());

        let mem = match memory {
            Some(m) if tape.shape(m).0 > 0 => tape.concat_rows(m, encoder),
            _ => encoder,
        };
        for layer in &self.layout.decoder {
            let h = self.norm(tape, b, layer.ln1, x);
            let a = self.attention(tape, b, layer.self_attn, h, h, true);
            let a = self.dropout(tape, a, rng.as_deref_mut());
            x = tape.add(x, a);
            let h = self.norm(tape, b, layer.ln2, x);
            let c = self.attention(tape, b, layer.cross, h, mem, false);
            let c = self.dropout(tape, c, rng.as_deref_mut());
            x = tape.add(x, c);
            let h = self.norm(tape, b, layer.ln3, x);
            let f = self.feed_forward(tape, b, layer.ff, h);
            let f = self.dropout(tape, f, rng.as_deref_mut());
            x = tape.add(x, f);
        }
        self.norm(tape, b, self.layout.decoder_norm, x)
    }

    /// Log-probabilities over the vocabulary extended by the source's
    /// unknown words, `T x (|V| + oov)`.
    pub fn output_log_probs<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], hidden: Var, encoder: Var, src: &Source) -> Var {
        let l = &self.layout;
        let logits = tape.matmul(hidden, b[l.out_w]);
        let logits = tape.add_row(logits, b[l.out_b]);
        let vocab_p = tape.softmax(logits);
        let p = if self.config.pointer {
            let q = tape.matmul(hidden, b[l.pointer_q]);
            let k = tape.matmul(encoder, b[l.pointer_k]);
            let s = tape.matmul_nt(q, k);
            let s = tape.scale(s, F::from_f64_lossy(1.0 / (self.config.d_model as f64).sqrt()));
            let attn = tape.softmax(s);
            let ctx = tape.matmul(attn, encoder);
            let gate_in = tape.concat_cols(&[hidden, ctx]);
            let g = tape.matmul(gate_in, b[l.gate_w]);
            let g = tape.add_row(g, b[l.gate_b]);
            let g = tape.sigmoid(g);
            let copy = tape.scatter_cols(attn, &src.ids, src.extended_len(&self.vocab));
            let vocab_p = if src.oov.is_empty() {
                vocab_p
            } else {
                let pad = tape.constant(Array2::zeros((tape.shape(hidden).0, src.oov.len())));
                tape.concat_cols(&[vocab_p, pad])
            };
            let generated = tape.mul_col(vocab_p, g);
            let not_g = tape.one_minus(g);
            let copied = tape.mul_col(copy, not_g);
            tape.add(generated, copied)
        } else {
            vocab_p
        };
        tape.log(p, F::from_f64_lossy(LOG_FLOOR))
    }

    /// Full teacher-forced pass on a tape.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p, F>,
        b: &[Var],
        src: &Source,
        target: &TargetIds,
        memory: Option<Var>,
        mut rng: Option<&mut DropoutRng>,
    ) -> Forward {
        let encoder = self.encode(tape, b, src, rng.as_deref_mut());
        let hidden = self.decode(tape, b, encoder, src, &target.input, memory, rng);
        let log_probs = self.output_log_probs(tape, b, hidden, encoder, src);
        let picked = tape.pick_cols(log_probs, &target.gold);
        let mean = tape.mean(picked);
        let loss = tape.scale(mean, -F::one());
        Forward {
            loss,
            encoder,
            hidden,
            log_probs,
        }
    }

    /// Mean per-token negative log-likelihood of `target` (ids without
    /// `<bos>`/`<eos>`), with dropout off.
    pub fn teacher_forced_nll(
        &self,
        src: &Source,
        target: &[usize],
        extra_memory: Option<&Array2<F>>,
    ) -> Result<(F, DecoderTrace<F>)> {
        self.check_source(src)?;
        self.check_target_len(target.len() + 1)?;
        self.check_memory(extra_memory)?;
        let width = if self.config.pointer { src.extended_len(&self.vocab) } else { self.vocab.len() };
        if let Some(&bad) = target.iter().find(|&&i| i >= width) {
            return Err(Error::InvalidInput(format!("target id {bad} outside the output vocabulary")));
        }
        let target = TargetIds::new(target);
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, 0);
        let memory = extra_memory.map(|m| tape.constant(m.clone()));
        let fwd = self.forward(&mut tape, &b, src, &target, memory, None);
        Ok((
            tape.scalar(fwd.loss),
            DecoderTrace {
                hidden: tape.value(fwd.hidden).clone(),
                log_probs: tape.value(fwd.log_probs).clone(),
            },
        ))
    }

    pub fn encoder_output(&self, src: &Source) -> EncoderOutput<F> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, 0);
        let enc = self.encode(&mut tape, &b, src, None);
        EncoderOutput {
            hidden: tape.value(enc).clone(),
            tokens: src.ids.clone(),
        }
    }

    fn check_source(&self, src: &Source) -> Result<()> {
        if src.is_empty() {
            return Err(Error::InvalidInput("empty source".into()));
        }
        if src.len() > self.config.max_source_len {
            return Err(Error::Overlength(format!(
                "source has {} tokens, limit {}",
                src.len(),
                self.config.max_source_len
            )));
        }
        if let Some(&bad) = src.ids.iter().find(|&&i| i >= src.extended_len(&self.vocab)) {
            return Err(Error::InvalidInput(format!("source id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    fn check_target_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_target_len {
            return Err(Error::Overlength(format!(
                "target has {len} tokens, limit {}",
                self.config.max_target_len
            )));
        }
        Ok(())
    }

    fn check_memory(&self, memory: Option<&Array2<F>>) -> Result<()> {
        match memory {
            Some(m) if m.nrows() > 0 && m.ncols() != self.config.d_model => Err(Error::Shape(format!(
                "memory width {} differs from d_model {}",
                m.ncols(),
                self.config.d_model
            ))),
            _ => Ok(()),
        }
    }

    /// Greedy decoding; stops at `<eos>` or after `max_len` tokens.
    /// Returned ids exclude `<bos>` and `<eos>` and may be extended ids.
    pub fn generate(&self, src: &Source, extra_memory: Option<&Array2<F>>, max_len: usize) -> Result<Vec<usize>> {
        self.check_source(src)?;
        self.check_memory(extra_memory)?;
        let max_len = max_len.min(self.config.max_target_len.saturating_sub(1));
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, 0);
        let encoder = self.encode(&mut tape, &b, src, None);
        let memory = extra_memory.map(|m| tape.constant(m.clone()));
        let mut input = vec![Vocabulary::BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let hidden = self.decode(&mut tape, &b, encoder, src, &input, memory, None);
            let last = tape.gather(hidden, &[input.len() - 1]);
            let lp = self.output_log_probs(&mut tape, &b, last, encoder, src);
            let row = tape.value(lp).row(0);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == Vocabulary::EOS_ID {
                break;
            }
            out.push(best);
            input.push(best);
        }
        Ok(out)
    }

    pub fn generate_text(&self, source: &str, extra_memory: Option<&Array2<F>>, max_len: usize) -> Result<String> {
        let src = self.source(source)?;
        let ids = self.generate(&src, extra_memory, max_len)?;
        Ok(src.detokenize(&self.vocab, &ids))
    }
}
