//! Optimization, evaluation metrics and the training loop.

mod metrics;
mod optim;
mod run;
mod schedule;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::N_OPTIONS;
use crate::model::ModelError;

pub use metrics::{accuracies, metrics_csv, MetricsRow, Prediction, CSV_HEADER};
pub use optim::{adam_step, clip_gradients, AdamConfig, AdamState};
pub use run::{
    evaluate, run_ablation, train_run, train_run_with, training_loss, AblationRun, Evaluation,
    TrainOutcome, ABLATION_RATIOS,
};
pub use schedule::{plateau_events, PlateauScheduler};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setting `{field}`: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error("numerical abort ({variant}, epoch {epoch}, batch {batch}): {detail}")]
    NumericalAbort {
        variant: String,
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// What the rationale module is shown in place of a random answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Uniform over all four answers, gold included.
    UniformAll,
    /// Uniform over the three wrong answers.
    WrongOnly,
}

/// How the separately trained rationale module receives the chosen answer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerInput {
    /// The answer module's representation, detached: the same pseudo-token
    /// the joint variants append.
    #[default]
    Representation,
    /// The answer tokens appended to the question and read by the rationale
    /// module's own encoder.
    Tokens,
}

/// Whether the two modules are trained jointly or separately.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineMode {
    /// Joint training through the configured estimator.
    Off,
    /// Separate training: the rationale module sees the gold answer with
    /// probability `p_correct`, otherwise a random one, and its loss does not
    /// reach the answer module.
    Conditioned {
        p_correct: f64,
        fallback: Fallback,
        #[serde(default)]
        answer_input: AnswerInput,
    },
}

impl Default for BaselineMode {
    fn default() -> Self {
        BaselineMode::Off
    }
}

impl BaselineMode {
    pub fn conditioned() -> Self {
        BaselineMode::Conditioned {
            p_correct: 0.75,
            fallback: Fallback::UniformAll,
            answer_input: AnswerInput::Representation,
        }
    }

    pub fn is_off(&self) -> bool {
        matches!(self, BaselineMode::Off)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// `[w_answer, w_rationale]`.
    pub loss_ratio: [f64; 2],
    pub baseline: BaselineMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            clip_norm: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 2,
            loss_ratio: [1.0, 1.0],
            baseline: BaselineMode::Off,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |field, message: String| Err(TrainError::Config { field, message });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            );
        }
        if self.epochs == 0 {
            return fail("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail(
                "clip_norm",
                format!("must be positive, got {}", self.clip_norm),
            );
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return fail(
                "plateau_factor",
                format!("must lie in (0, 1], got {}", self.plateau_factor),
            );
        }
        let [wa, wr] = self.loss_ratio;
        if !(wa >= 0.0 && wr >= 0.0 && wa.is_finite() && wr.is_finite()) || wa + wr == 0.0 {
            return fail(
                "loss_ratio",
                format!("weights must be non-negative and not both zero, got [{wa}, {wr}]"),
            );
        }
        if let BaselineMode::Conditioned { p_correct, .. } = self.baseline {
            if !(0.0..=1.0).contains(&p_correct) {
                return fail("p_correct", format!("must lie in [0, 1], got {p_correct}"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// The answer shown to the rationale module under the conditioned baseline.
/// With `BaselineMode::Off` the gold answer is returned.
pub fn conditioning_choice<R: Rng + ?Sized>(
    gold: usize,
    rng: &mut R,
    mode: &BaselineMode,
) -> usize {
    match *mode {
        BaselineMode::Off => gold,
        BaselineMode::Conditioned {
            p_correct,
            fallback,
            ..
        } => {
            if rng.random::<f64>() < p_correct {
                return gold;
            }
            match fallback {
                Fallback::UniformAll => rng.random_range(0..N_OPTIONS),
                Fallback::WrongOnly => {
                    let k = rng.random_range(0..N_OPTIONS - 1);
                    if k >= gold {
                        k + 1
                    } else {
                        k
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rate(mode: BaselineMode, gold: usize, n: usize) -> [f64; 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0.0; 4];
        for _ in 0..n {
            counts[conditioning_choice(gold, &mut rng, &mode)] += 1.0;
        }
        counts.map(|c| c / n as f64)
    }

    #[test]
    fn conditioning_rates() {
        let always = BaselineMode::Conditioned {
            p_correct: 1.0,
            fallback: Fallback::UniformAll,
            answer_input: AnswerInput::Representation,
        };
        assert_eq!(rate(always, 2, 1000)[2], 1.0);
        let r = rate(BaselineMode::conditioned(), 1, 100_000);
        assert!((0.805..=0.820).contains(&r[1]), "{r:?}");
        let uniform = rate(
            BaselineMode::Conditioned {
                p_correct: 0.0,
                fallback: Fallback::UniformAll,
                answer_input: AnswerInput::Representation,
            },
            0,
            100_000,
        );
        assert!(
            uniform.iter().all(|f| (f - 0.25).abs() < 0.01),
            "{uniform:?}"
        );
        let wrong = rate(
            BaselineMode::Conditioned {
                p_correct: 0.0,
                fallback: Fallback::WrongOnly,
                answer_input: AnswerInput::Representation,
            },
            3,
            30_000,
        );
        assert_eq!(wrong[3], 0.0);
    }

    #[test]
    fn validation_names_fields() {
        let bad = TrainConfig {
            loss_ratio: [0.0, 0.0],
            ..Default::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::Config {
                field: "loss_ratio",
                ..
            })
        ));
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::Config {
                field: "epochs",
                ..
            })
        ));
        assert!(TrainConfig::default().validate().is_ok());
    }
}
