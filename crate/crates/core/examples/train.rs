//! Trains a reduced model for a few epochs and prints the metrics table.
//! Pass a variant name as the first argument (default `gumbel_softmax`).

use vcr_joint::data::{generate, GenSpec};
use vcr_joint::model::ModelConfig;
use vcr_joint::relax::EstimatorConfig;
use vcr_joint::train::{train_run_with, TrainConfig, CSV_HEADER};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let name = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "gumbel_softmax".into());
    let est = EstimatorConfig::from_name(&name).ok_or("unknown variant")?;
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
    let cfg = TrainConfig {
        epochs: 5,
        ..Default::default()
    };
    println!("{CSV_HEADER}");
    let out = train_run_with(&model, &est, &cfg, &train, &val, |row| {
        println!("{}", row.csv_line())
    })?;
    println!("train loss per epoch: {:.4?}", out.train_losses);
    Ok(())
}
