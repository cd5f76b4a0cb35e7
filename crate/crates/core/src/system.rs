//! A generator plus the optional heads of each training variant.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Scalar, Tape, Var};
use crate::codec::{build_source, TargetStyle, TripletOrder};
use crate::episode::{TaskPrompt, TrainingInstance};
use crate::error::{Error, Result};
use crate::hyper::{HyperConfig, HyperNet};
use crate::metric::{matching_labels, MatchConfig, MatchHead};
use crate::model::{DropoutRng, ModelConfig, Seq2Seq};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tgm,
    Metric,
    Model,
    Optimization,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tgm, Variant::Metric, Variant::Model, Variant::Optimization];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tgm => "tgm",
            Variant::Metric => "metric",
            Variant::Model => "model",
            Variant::Optimization => "optimization",
        }
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Tgm => "TGM",
            Variant::Metric => "TGM-Metric",
            Variant::Model => "TGM-Model",
            Variant::Optimization => "TGM-Optimization",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected tgm, metric, model or optimization)")))
    }
}

/// Everything needed to build a fresh system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub variant: Variant,
    pub model: ModelConfig,
    pub metric: MatchConfig,
    pub hyper: HyperConfig,
    pub order: TripletOrder,
    pub style: TargetStyle,
}

impl SystemSpec {
    /// Target style actually used: the matching head needs prototype tokens.
    pub fn effective_style(&self) -> TargetStyle {
        match self.variant {
            Variant::Metric => TargetStyle::Prototype,
            _ => self.style,
        }
    }
}

/// Tape handles of every parameter of a system.
#[derive(Debug, Clone)]
pub struct Bound {
    pub model: Vec<Var>,
    pub matcher: Vec<Var>,
    pub hyper: Vec<Var>,
}

/// Loss parts of one instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceLoss {
    pub total: Var,
    pub generation: Var,
    pub matching: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TgmSystem<F> {
    pub variant: Variant,
    pub model: Seq2Seq<F>,
    pub matcher: Option<MatchHead<F>>,
    pub hyper: Option<HyperNet<F>>,
    pub order: TripletOrder,
    pub style: TargetStyle,
}

impl<F: Scalar> TgmSystem<F> {
    /// Fresh parameters; heads draw from seeds derived from the model seed.
    pub fn new(spec: &SystemSpec, vocab: Vocabulary) -> Result<Self> {
        let model = Seq2Seq::new(spec.model.clone(), vocab)?;
        let d = spec.model.d_model;
        let seed = spec.model.init_seed;
        let matcher = match spec.variant {
            Variant::Metric => Some(MatchHead::new(d, spec.metric.clone(), seed.wrapping_add(1))?),
            _ => None,
        };
        let hyper = match spec.variant {
            Variant::Model => Some(HyperNet::new(d, spec.hyper.clone(), seed.wrapping_add(2))?),
            _ => None,
        };
        Ok(TgmSystem {
            variant: spec.variant,
            model,
            matcher,
            hyper,
            order: spec.order,
            style: spec.effective_style(),
        })
    }

    pub fn alpha(&self) -> F {
        self.matcher
            .as_ref()
            .map_or(F::zero(), |m| F::from_f64_lossy(m.config().alpha))
    }

    pub fn backbone_slots(&self) -> usize {
        self.model.num_params()
    }

    pub fn num_slots(&self) -> usize {
        self.model.num_params()
            + self.matcher.as_ref().map_or(0, |m| m.params().len())
            + self.hyper.as_ref().map_or(0, |h| h.params().len())
    }

    /// Every tensor in slot order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut out: Vec<&mut Array2<F>> = self.model.params_mut().tensors_mut().iter_mut().collect();
        if let Some(m) = self.matcher.as_mut() {
            out.extend(m.params_mut().tensors_mut().iter_mut());
        }
        if let Some(h) = self.hyper.as_mut() {
            out.extend(h.params_mut().tensors_mut().iter_mut());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Array2<F>> {
        let mut out: Vec<&Array2<F>> = self.model.params().tensors().iter().collect();
        if let Some(m) = &self.matcher {
            out.extend(m.params().tensors());
        }
        if let Some(h) = &self.hyper {
            out.extend(h.params().tensors());
        }
        out
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, F>) -> Bound {
        let model = self.model.bind(tape, 0);
        let mut next = model.len();
        let matcher = match &self.matcher {
            Some(m) => {
                let v = m.bind(tape, next);
                next += v.len();
                v
            }
            None => Vec::new(),
        };
        let hyper = match &self.hyper {
            Some(h) => h.bind(tape, next),
            None => Vec::new(),
        };
        Bound { model, matcher, hyper }
    }

    /// Generated memory for `task`, if this system injects any.
    pub fn task_memory<'p>(
        &'p self,
        tape: &mut Tape<'p, F>,
        b: &Bound,
        task: &TaskPrompt,
        rng: Option<&mut DropoutRng>,
    ) -> Result<Option<Var>> {
        match &self.hyper {
            Some(h) if h.config().k > 0 => {
                let v = HyperNet::encode_task(&self.model, tape, &b.model, task, rng)?;
                Ok(h.memory(tape, &b.hyper, v))
            }
            _ => Ok(None),
        }
    }

    pub fn task_memory_values(&self, task: &TaskPrompt) -> Result<Option<Array2<F>>> {
        if self.hyper.is_none() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let m = self.task_memory(&mut tape, &b, task, None)?;
        Ok(m.map(|m| tape.value(m).clone()))
    }

    /// Loss of one instance: generation NLL plus, with a matching head,
    /// `alpha` times the matching loss.
    pub fn instance_loss<'p>(
        &'p self,
        tape: &mut Tape<'p, F>,
        b: &Bound,
        inst: &TrainingInstance,
        mut rng: Option<&mut DropoutRng>,
    ) -> Result<InstanceLoss> {
        let src = self.model.source(&inst.source.text)?;
        let target = self.model.target(&src, &inst.target.text)?;
        let memory = self.task_memory(tape, b, &inst.task, rng.as_deref_mut())?;
        let fwd = self.model.forward(tape, &b.model, &src, &target, memory, rng);
        match &self.matcher {
            Some(head) => {
                let labels = matching_labels(inst)?;
                let m = head.loss(tape, &b.matcher, fwd.encoder, fwd.hidden, &labels)?;
                // A zero weight leaves the matching branch out of the graph
                // entirely, so gradients match the plain generator bit for bit.
                let total = if self.alpha() == F::zero() {
                    fwd.loss
                } else {
                    let weighted = tape.scale(m, self.alpha());
                    tape.add(fwd.loss, weighted)
                };
                Ok(InstanceLoss {
                    total,
                    generation: fwd.loss,
                    matching: Some(m),
                })
            }
            None => Ok(InstanceLoss {
                total: fwd.loss,
                generation: fwd.loss,
                matching: None,
            }),
        }
    }

    /// Mean loss and gradient over a batch.
    pub fn batch_gradients(
        &self,
        batch: &[TrainingInstance],
        mut rng: Option<&mut DropoutRng>,
    ) -> Result<(F, Gradients<F>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let n = self.num_slots();
        let mut grads = Gradients::new(n);
        let mut total = F::zero();
        for inst in batch {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape);
            let loss = self.instance_loss(&mut tape, &b, inst, rng.as_deref_mut())?;
            let value = tape.scalar(loss.total);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss on sample `{}`", inst.sample.id)));
            }
            total += value;
            grads.accumulate(tape.backward(loss.total, n));
        }
        let scale = F::one() / F::from_usize(batch.len()).unwrap();
        grads.scale(scale);
        Ok((total * scale, grads))
    }

    /// Source text for a sentence under a task.
    pub fn source_for(&self, task: &TaskPrompt, tokens: &[String]) -> Result<String> {
        Ok(build_source(task, tokens)?.text)
    }

    /// Greedy generation for one sentence under a task.
    pub fn generate(&self, task: &TaskPrompt, tokens: &[String], max_len: usize) -> Result<String> {
        let memory = self.task_memory_values(task)?;
        let source = self.source_for(task, tokens)?;
        self.model.generate_text(&source, memory.as_ref(), max_len)
    }
}
