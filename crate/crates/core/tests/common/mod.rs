#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vcr_joint::autodiff::Tensor;
use vcr_joint::data::{Instance, ANSWER_LEN, N_OPTIONS, QUESTION_LEN, RATIONALE_LEN};
use vcr_joint::model::ModelConfig;

pub const TINY_FEATS: usize = 2;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        embed_dim: 3,
        hidden_dim: 4,
        object_feat_dim: TINY_FEATS,
        seed,
    }
}

/// A random well-formed instance for a tiny model.
pub fn tiny_instance(rng: &mut ChaCha8Rng, vocab: usize) -> Instance {
    let seq = |rng: &mut ChaCha8Rng, n: usize| {
        (0..n)
            .map(|_| rng.random_range(0..vocab))
            .collect::<Vec<_>>()
    };
    let mut object_feats = vec![vec![0.0; TINY_FEATS]; QUESTION_LEN];
    for row in [0, 4] {
        for x in object_feats[row].iter_mut() {
            *x = StandardNormal.sample(rng);
        }
    }
    Instance {
        id: "tiny".into(),
        question: seq(rng, QUESTION_LEN),
        object_feats,
        answers: (0..N_OPTIONS).map(|_| seq(rng, ANSWER_LEN)).collect(),
        rationales: (0..N_OPTIONS).map(|_| seq(rng, RATIONALE_LEN)).collect(),
        answer_label: rng.random_range(0..N_OPTIONS),
        rationale_label: rng.random_range(0..N_OPTIONS),
    }
}

pub fn tiny_batch(seed: u64, n: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| tiny_instance(&mut rng, 24)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}
