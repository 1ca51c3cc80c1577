//! One forward pass of the two-stage model under every estimator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcr_joint::autodiff::Tape;
use vcr_joint::data::{generate, GenSpec};
use vcr_joint::model::{forward_joint, ForwardMode, ModelConfig, ModelParams};
use vcr_joint::relax::EstimatorConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train, _) = generate(&GenSpec {
        n_train: 8,
        n_val: 1,
        ..Default::default()
    })?;
    let params = ModelParams::init(&ModelConfig::default())?;
    println!("{} parameters", params.n_scalars());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for name in ["softmax", "gumbel_softmax", "score_function", "joint_ce"] {
        let est = EstimatorConfig::from_name(name).expect("known variant");
        let mut tape = Tape::new();
        let m = params.bind(&mut tape, true);
        let out = forward_joint(&mut tape, &m, &train, &est, 0, ForwardMode::Train, &mut rng)?;
        println!(
            "{name:<15} answer loss {:.4}  rationale loss {:.4}  tape nodes {}  answers {:?}",
            tape.value(out.answer_loss).item(),
            tape.value(out.rationale_loss).item(),
            tape.len(),
            out.answer_pred
        );
    }
    Ok(())
}
