//! Generates a synthetic split, shows one item and how often the rule-aware
//! oracle recovers the labels.

use vcr_joint::data::{generate, GenSpec, OracleDecoder};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GenSpec {
        n_train: 500,
        n_val: 500,
        ..Default::default()
    };
    let (train, val) = generate(&spec)?;
    let inst = &train[0];
    println!("{}", serde_json::to_string_pretty(inst)?);

    let oracle = OracleDecoder::new(&spec);
    let answer_hits = val
        .iter()
        .filter(|i| oracle.predict_answer(i) == Some(i.answer_label))
        .count();
    let rationale_hits = val
        .iter()
        .filter(|i| oracle.predict_rationale(i, i.answer_label) == Some(i.rationale_label))
        .count();
    let n = val.len() as f64;
    println!(
        "oracle on {} val items with noise {}: answer {:.3}, rationale given gold answer {:.3}",
        val.len(),
        spec.noise_prob,
        answer_hits as f64 / n,
        rationale_hits as f64 / n
    );
    Ok(())
}
