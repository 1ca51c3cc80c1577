//! Separate-stage training: the rationale module sees a detached answer
//! that is gold with probability 0.75 and uniform otherwise. Compared with
//! joint softmax training on the same data.

use vcr_joint::data::{generate, GenSpec};
use vcr_joint::model::ModelConfig;
use vcr_joint::relax::EstimatorConfig;
use vcr_joint::train::{train_run, BaselineMode, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train, val) = generate(&GenSpec {
        n_train: 600,
        n_val: 300,
        noise_prob: 0.0,
        ..Default::default()
    })?;
    let model = ModelConfig {
        embed_dim: 16,
        hidden_dim: 16,
        ..Default::default()
    };
    for (label, baseline) in [
        ("joint", BaselineMode::Off),
        ("baseline", BaselineMode::conditioned()),
    ] {
        let cfg = TrainConfig {
            epochs: 5,
            baseline,
            ..Default::default()
        };
        let out = train_run(&model, &EstimatorConfig::Softmax, &cfg, &train, &val)?;
        let last = out.rows.last().expect("at least one epoch");
        println!(
            "{label:<9} Q->A {:.3}  QA->R {:.3}  Q->AR {:.3}",
            last.q_a_acc, last.qa_r_acc, last.q_ar_acc
        );
    }
    Ok(())
}
