//! Two-stage multiple-choice model.
//!
//! Both stages share one token embedding table and otherwise have their own
//! weights. A stage grounds its query and its four responses with a
//! bidirectional GRU over `embed(token) + project(object features)`,
//! attends from every response token to the query states, runs a second
//! bidirectional GRU over `[response state; attended query]`, and scores
//! each response from the mean of those states.
//!
//! The answer stage reads the question. The rationale stage reads the
//! question with one extra pseudo-token appended, which carries a
//! (weighted, relaxed, or sampled) answer representation.

mod checkpoint;
mod encoder;
mod pipeline;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::relax::RelaxError;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use encoder::{answer_rep, contextualize, ground, score_responses, EncodedSequence};
pub use pipeline::{
    answer_stage, encode_rationales, forward_joint, rationale_logits_all_answers,
    rationale_logits_answer_text, rationale_logits_conditioned, rationale_logits_with, AnswerStage,
    Aux, ForwardMode, JointOutput,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model setting `{field}`: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Width of encoded token states; each GRU direction gets half.
    pub hidden_dim: usize,
    pub object_feat_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            embed_dim: 32,
            hidden_dim: 32,
            object_feat_dim: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("object_feat_dim", self.object_feat_dim),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(ModelError::Config {
                    field,
                    message: "must be at least 1".into(),
                });
            }
        }
        if self.hidden_dim % 2 != 0 {
            return Err(ModelError::Config {
                field: "hidden_dim",
                message: format!(
                    "must be even (split across two directions), got {}",
                    self.hidden_dim
                ),
            });
        }
        Ok(())
    }
}

/// Which of the two modules a weight belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Answer,
    Rationale,
}

impl Stage {
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Answer => "answer",
            Stage::Rationale => "rationale",
        }
    }
}

pub const EMBEDDING: &str = "embedding";
pub const ANSWER_REP_PROJ: &str = "answer.rep_proj";

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn gru_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, units: usize) {
    for dir in ["fwd", "bwd"] {
        for gate in ["z", "r", "n"] {
            out.push(ParamSpec {
                name: format!("{prefix}.{dir}.w{gate}"),
                shape: vec![input, units],
                fan_in: input,
            });
            out.push(ParamSpec {
                name: format!("{prefix}.{dir}.u{gate}"),
                shape: vec![units, units],
                fan_in: units,
            });
            out.push(ParamSpec {
                name: format!("{prefix}.{dir}.b{gate}"),
                shape: vec![units],
                fan_in: units,
            });
        }
    }
}

fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, h, f) = (cfg.embed_dim, cfg.hidden_dim, cfg.object_feat_dim);
    // an embedding lookup is a one-hot product, so its fan-in is 1
    let mut specs = vec![ParamSpec {
        name: EMBEDDING.into(),
        shape: vec![cfg.vocab_size, d],
        fan_in: 1,
    }];
    for stage in [Stage::Answer, Stage::Rationale] {
        let p = stage.prefix();
        specs.push(ParamSpec {
            name: format!("{p}.obj_proj"),
            shape: vec![f, d],
            fan_in: f,
        });
        gru_specs(&mut specs, &format!("{p}.ground"), d, h / 2);
        gru_specs(&mut specs, &format!("{p}.reason"), 2 * h, h / 2);
        specs.push(ParamSpec {
            name: format!("{p}.head.w"),
            shape: vec![h, 1],
            fan_in: h,
        });
        specs.push(ParamSpec {
            name: format!("{p}.head.b"),
            shape: vec![1],
            fan_in: h,
        });
        if stage == Stage::Answer {
            specs.push(ParamSpec {
                name: ANSWER_REP_PROJ.into(),
                shape: vec![h, d],
                fan_in: h,
            });
        }
    }
    specs
}

/// Named model weights in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Seeded `uniform(−1/√fan_in, 1/√fan_in)` initialization.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut named = Vec::new();
        for spec in layout(config) {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let n: usize = spec.shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            named.push((spec.name, Tensor::new(spec.shape, data)?));
        }
        Self::from_named(config.clone(), named)
    }

    /// Assembles parameters from named tensors, checking every name and
    /// shape against the layout implied by `config`.
    pub fn from_named(
        config: ModelConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor> = HashMap::new();
        for (name, t) in named {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = by_name
                .remove(&spec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            names.push(spec.name);
            tensors.push(t);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Names of the weights owned by one stage (the shared embedding excluded).
    pub fn stage_names(&self, stage: Stage) -> impl Iterator<Item = &str> {
        let prefix = format!("{}.", stage.prefix());
        self.names
            .iter()
            .map(String::as_str)
            .filter(move |n| n.starts_with(&prefix))
    }

    /// Records every weight on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }
}

/// Model weights recorded on a particular tape.
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    /// Uses externally recorded vars, aligned with `params.names()`.
    pub fn from_vars(params: &'p ModelParams, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.tensors.len());
        Bound { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }
}
