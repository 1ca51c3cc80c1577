//! Loss-ratio ablation: the same seed trained with answer:rationale weights
//! 1:1 and 1:4, written as an overlaid SVG of validation losses.

use vcr_joint::cli::plot::{line_chart, Series};
use vcr_joint::data::{generate, GenSpec};
use vcr_joint::model::ModelConfig;
use vcr_joint::relax::EstimatorConfig;
use vcr_joint::train::{run_ablation, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train, val) = generate(&GenSpec {
        n_train: 300,
        n_val: 150,
        ..Default::default()
    })?;
    let model = ModelConfig {
        embed_dim: 16,
        hidden_dim: 16,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let runs = run_ablation(&model, &EstimatorConfig::Softmax, &cfg, &train, &val)?;
    let mut series = Vec::new();
    for run in &runs {
        let [a, r] = run.loss_ratio;
        let rows = &run.outcome.rows;
        println!(
            "{a}:{r}  final Q->A {:.3}",
            rows.last().map_or(0.0, |x| x.q_a_acc)
        );
        series.push(Series::new(
            format!("answer {a}:{r}"),
            rows.iter()
                .map(|x| (x.epoch as f64, x.answer_loss))
                .collect(),
        ));
        series.push(Series::new(
            format!("rationale {a}:{r}"),
            rows.iter()
                .map(|x| (x.epoch as f64, x.rationale_loss))
                .collect(),
        ));
    }
    let svg = line_chart("validation loss", "epoch", "loss", &series);
    let path = std::env::temp_dir().join("ablation_overlay.svg");
    std::fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}
