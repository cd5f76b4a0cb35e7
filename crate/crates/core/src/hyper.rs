//! Task-conditioned memory generator.
//!
//! A task is encoded on its own (`Relation: a, b, c.`) by the shared encoder,
//! mean-pooled, and mapped by a two-layer perceptron to `k` vectors that are
//! placed in front of the encoder states in every decoder cross-attention.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Var};
use crate::codec::build_task_source;
use crate::episode::TaskPrompt;
use crate::error::{Error, Result};
use crate::model::{DropoutRng, Init, ParameterSet, Seq2Seq};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    /// Number of generated memory vectors; 0 disables injection.
    pub k: usize,
    pub hidden: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig { k: 4, hidden: 256 }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hyper.hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HyperNet<F> {
    config: HyperConfig,
    d_model: usize,
    params: ParameterSet<F>,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

impl<F: Scalar> HyperNet<F> {
    pub fn new(d_model: usize, config: HyperConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut p = ParameterSet::new();
        let out = config.k * d_model;
        p.push("w1", init.linear(d_model, config.hidden));
        p.push("b1", Array2::zeros((1, config.hidden)));
        p.push("w2", init.linear(config.hidden, out));
        p.push("b2", Array2::zeros((1, out)));
        Ok(HyperNet { config, d_model, params: p })
    }

    pub fn from_parameters(d_model: usize, config: HyperConfig, params: ParameterSet<F>) -> Result<Self> {
        let mut h = Self::new(d_model, config, 0)?;
        h.params.restore(&params)?;
        Ok(h)
    }

    pub fn config(&self) -> &HyperConfig {
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

    /// Pooled task encoding, `1 x d_model`.
    pub fn encode_task<'p>(
        model: &'p Seq2Seq<F>,
        tape: &mut Tape<'p, F>,
        model_vars: &[Var],
        task: &TaskPrompt,
        rng: Option<&mut DropoutRng>,
    ) -> Result<Var> {
        let src = model.source(&build_task_source(task)?.text)?;
        Ok(model.encode_pooled(tape, model_vars, &src, rng))
    }

    /// `k x d_model` memory, or `None` when `k == 0`.
    pub fn memory<'p>(&self, tape: &mut Tape<'p, F>, b: &[Var], task_vector: Var) -> Option<Var> {
        if self.config.k == 0 {
            return None;
        }
        let h = tape.matmul(task_vector, b[W1]);
        let h = tape.add_row(h, b[B1]);
        let h = tape.tanh(h);
        let o = tape.matmul(h, b[W2]);
        let o = tape.add_row(o, b[B2]);
        Some(tape.reshape(o, self.config.k, self.d_model))
    }
}

/// Pooled task vector computed outside training.
pub fn encode_task<F: Scalar>(task: &TaskPrompt, model: &Seq2Seq<F>) -> Result<Array2<F>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, 0);
    let v = HyperNet::encode_task(model, &mut tape, &b, task, None)?;
    Ok(tape.value(v).clone())
}

/// Memory vectors for a precomputed task vector; `k x d_model`.
pub fn generate_task_memory<F: Scalar>(task_vector: &Array2<F>, hyper: &HyperNet<F>) -> Array2<F> {
    let mut tape = Tape::new();
    let b = hyper.bind(&mut tape, 0);
    let v = tape.constant(task_vector.clone());
    match hyper.memory(&mut tape, &b, v) {
        Some(m) => tape.value(m).clone(),
        None => Array2::zeros((0, hyper.d_model)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::{split_words, Vocabulary};

    fn model(positional: bool) -> Seq2Seq<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ff: 32,
            dropout: 0.0,
            word_dropout: 0.0,
            positional,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::from_tokens(split_words("Relation: capital of, born in, works for."));
        Seq2Seq::new(cfg, vocab).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_memory() {
        let m = model(true);
        let mut h: HyperNet<f64> = HyperNet::new(16, HyperConfig::default(), 2).unwrap();
        h.params_mut().get_mut("w2").unwrap().fill(0.0);
        let task = TaskPrompt::new(vec!["capital of".into()]).unwrap();
        let mem = generate_task_memory(&encode_task(&task, &m).unwrap(), &h);
        assert_eq!(mem.dim(), (4, 16));
        assert!(mem.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn memory_shapes() {
        let m = model(true);
        let task = TaskPrompt::new(vec!["capital of".into(), "born in".into()]).unwrap();
        let v = encode_task(&task, &m).unwrap();
        assert_eq!(v.dim(), (1, 16));
        for k in [1, 4, 8] {
            let h: HyperNet<f64> = HyperNet::new(16, HyperConfig { k, hidden: 8 }, 2).unwrap();
            assert_eq!(generate_task_memory(&v, &h).dim(), (k, 16));
        }
    }

    #[test]
    fn label_order_only_matters_through_positions() {
        let m = model(false);
        let a = TaskPrompt::new(vec!["capital of".into(), "born in".into(), "works for".into()]).unwrap();
        let b = TaskPrompt::new(vec!["works for".into(), "capital of".into(), "born in".into()]).unwrap();
        let va = encode_task(&a, &m).unwrap();
        let vb = encode_task(&b, &m).unwrap();
        for (x, y) in va.iter().zip(vb.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(va, encode_task(&a, &m).unwrap());
    }
}
