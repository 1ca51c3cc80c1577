//! The ways of passing a discrete answer choice forward: soft weighting,
//! Gumbel-softmax at several temperatures, and the score-function estimate
//! against the exact expectation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcr_joint::autodiff::{Tape, Tensor};
use vcr_joint::relax::{
    exact_expectation_loss, gumbel_sample, gumbel_softmax, score_function_loss, softmax_weight,
    temperature_at, AnswerDistribution, GumbelConfig, ScoreFunctionConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::new(vec![1, 4], vec![2.0, 0.5, 0.0, -1.0])?);
    let dist = AnswerDistribution::new(&mut tape, logits)?;
    println!("probs            {:.3?}", tape.value(dist.probs).data());

    // four answer representations of width 2
    let reps = tape.constant(Tensor::new(
        vec![1, 4, 2],
        vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
    )?);
    let soft = softmax_weight(&mut tape, &dist, reps)?;
    println!("softmax weighted {:.3?}", tape.value(soft).data());

    let g = gumbel_sample(&mut rng, &[1, 4]);
    for tau in [5.0, 1.0, 0.1] {
        let w = gumbel_softmax(&mut tape, &dist, &g, tau, true)?;
        println!("gumbel tau={tau:<4} {:.3?}", tape.value(w).data());
    }
    let sched = GumbelConfig::default();
    let taus: Vec<f64> = (0..=12)
        .step_by(2)
        .map(|e| temperature_at(&sched, e))
        .collect();
    println!("annealed tau by epoch 0,2,..,12: {taus:.2?}");

    // per-answer losses depend on the logits so both gradient paths are live
    let per_answer = tape.constant(Tensor::new(vec![1, 4], vec![0.2, 1.0, 1.5, 3.0])?);
    let exact = exact_expectation_loss(&mut tape, &dist, per_answer)?;
    let exact_grad = tape.backward(exact)?.wrt(&tape, logits);
    println!(
        "exact E[l]       {:.4}  grad {:.4?}",
        tape.value(exact).item(),
        exact_grad.data()
    );

    for n_samples in [16, 1024] {
        let cfg = ScoreFunctionConfig {
            n_samples,
            baseline_subtract: true,
            ..Default::default()
        };
        let sf = score_function_loss(
            &mut tape,
            &dist,
            |t, i| Ok(t.constant(Tensor::vector(vec![[0.2, 1.0, 1.5, 3.0][i]]))),
            &cfg,
            &mut rng,
        )?;
        let grad = tape.backward(sf)?.wrt(&tape, logits);
        println!(
            "sampled N={n_samples:<5} {:.4}  grad {:.4?}",
            tape.value(sf).item(),
            grad.data()
        );
    }
    Ok(())
}
