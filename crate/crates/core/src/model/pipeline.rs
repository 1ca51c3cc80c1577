use rand::Rng;

use crate::autodiff::{argmax, AutodiffError, Tape, Tensor, Var};
use crate::data::{Instance, N_OPTIONS};
use crate::relax::{
    decode_pair, exact_expectation_loss, gumbel_sample, gumbel_softmax, joint_cross_entropy,
    joint_pair_logits, score_function_loss, temperature_at, weight_answers, AnswerDistribution,
    EstimatorConfig,
};

use super::encoder::{answer_rep, ground, score_responses, EncodedSequence};
use super::{Bound, ModelError, Stage};

type Result<T> = std::result::Result<T, ModelError>;

/// Output of the answer module for a batch.
#[derive(Clone, Copy, Debug)]
pub struct AnswerStage {
    /// `[B×4]` answer scores with their softmax.
    pub dist: AnswerDistribution,
    /// `[4B×d]` answer representations; row `4b + i` is answer `i` of item `b`.
    pub reps: Var,
}

impl AnswerStage {
    pub fn logits(&self) -> Var {
        self.dist.logits
    }
}

/// Whether stochastic parts (Gumbel noise, answer sampling) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    /// Deterministic: no Gumbel noise, exact expectation instead of sampling.
    Eval,
}

/// Intermediate values exposed for evaluation and diagnostics.
#[derive(Clone, Debug)]
pub struct Aux {
    pub answer: AnswerStage,
    pub rationales: EncodedSequence,
    /// Annealed temperature used by the Gumbel-softmax variant.
    pub temperature: Option<f64>,
    /// `[B×4]` weights applied to the answer representations.
    pub answer_weights: Option<Var>,
    /// `[B×4×4]` rationale scores with each answer appended in turn.
    pub per_answer_rationale_logits: Option<Var>,
    /// `[B×16]` joint pair scores (joint cross-entropy variant).
    pub pair_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct JointOutput {
    pub answer_logits: Var,
    /// Mean answer cross-entropy over the batch.
    pub answer_loss: Var,
    pub rationale_loss: Var,
    pub answer_pred: Vec<usize>,
    pub rationale_pred: Vec<usize>,
    pub aux: Aux,
}

fn questions(batch: &[Instance]) -> (Vec<&[usize]>, Vec<&[Vec<f64>]>) {
    batch
        .iter()
        .map(|i| (i.question.as_slice(), i.object_feats.as_slice()))
        .unzip()
}

fn check_batch(batch: &[Instance]) -> Result<()> {
    if batch.is_empty() {
        return Err(AutodiffError::Shape("empty batch".into()).into());
    }
    for inst in batch {
        if inst.answers.len() != N_OPTIONS || inst.rationales.len() != N_OPTIONS {
            return Err(AutodiffError::Shape(format!(
                "item {} does not have 4 answers and 4 rationales",
                inst.id
            ))
            .into());
        }
    }
    Ok(())
}

/// Scores the four answers of every item and builds their representations.
pub fn answer_stage(tape: &mut Tape, m: &Bound, batch: &[Instance]) -> Result<AnswerStage> {
    check_batch(batch)?;
    let (q_tokens, q_feats) = questions(batch);
    let query = ground(tape, m, Stage::Answer, &q_tokens, Some(&q_feats), None)?;
    let a_tokens: Vec<&[usize]> = batch
        .iter()
        .flat_map(|i| i.answers.iter().map(Vec::as_slice))
        .collect();
    let answers = ground(tape, m, Stage::Answer, &a_tokens, None, None)?;
    let logits = score_responses(tape, m, Stage::Answer, &query, &answers)?;
    let reps = answer_rep(tape, m, &answers)?;
    let dist = AnswerDistribution::new(tape, logits)?;
    Ok(AnswerStage { dist, reps })
}

/// Grounds the four rationales of every item (`4B` rows).
pub fn encode_rationales(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
) -> Result<EncodedSequence> {
    let tokens: Vec<&[usize]> = batch
        .iter()
        .flat_map(|i| i.rationales.iter().map(Vec::as_slice))
        .collect();
    ground(tape, m, Stage::Rationale, &tokens, None, None)
}

/// Rationale scores `[B×4]` with one `[B×d]` pseudo-token appended to each question.
pub fn rationale_logits_with(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
    extra: Var,
    rationales: &EncodedSequence,
) -> Result<Var> {
    let (q_tokens, q_feats) = questions(batch);
    let query = ground(
        tape,
        m,
        Stage::Rationale,
        &q_tokens,
        Some(&q_feats),
        Some(extra),
    )?;
    score_responses(tape, m, Stage::Rationale, &query, rationales)
}

/// Rationale scores `[B×4×4]`; entry `[b, i, j]` scores rationale `j` with
/// answer `i` appended.
pub fn rationale_logits_all_answers(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
    reps: Var,
    rationales: &EncodedSequence,
) -> Result<Var> {
    let b = batch.len();
    let (q_tokens, q_feats) = questions(batch);
    let q_tokens: Vec<&[usize]> = q_tokens
        .iter()
        .flat_map(|&q| std::iter::repeat_n(q, N_OPTIONS))
        .collect();
    let q_feats: Vec<&[Vec<f64>]> = q_feats
        .iter()
        .flat_map(|&f| std::iter::repeat_n(f, N_OPTIONS))
        .collect();
    let query = ground(
        tape,
        m,
        Stage::Rationale,
        &q_tokens,
        Some(&q_feats),
        Some(reps),
    )?;
    let ids: Vec<usize> = (0..b)
        .flat_map(|item| {
            (0..N_OPTIONS).flat_map(move |_| (0..N_OPTIONS).map(move |j| item * N_OPTIONS + j))
        })
        .collect();
    let responses = rationales.select(tape, &ids)?;
    let logits = score_responses(tape, m, Stage::Rationale, &query, &responses)?;
    Ok(tape.reshape(logits, &[b, N_OPTIONS, N_OPTIONS])?)
}

/// Rationale scores `[B×4]` with the representation of answer `choices[b]`
/// appended. With `detach`, no gradient reaches the answer module.
pub fn rationale_logits_conditioned(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
    answer: &AnswerStage,
    choices: &[usize],
    detach: bool,
    rationales: &EncodedSequence,
) -> Result<Var> {
    if choices.len() != batch.len() || choices.iter().any(|&c| c >= N_OPTIONS) {
        return Err(AutodiffError::Index(format!("answer choices {choices:?}")).into());
    }
    let reps = if detach {
        tape.detach(answer.reps)
    } else {
        answer.reps
    };
    let rows: Vec<usize> = choices
        .iter()
        .enumerate()
        .map(|(b, &c)| b * N_OPTIONS + c)
        .collect();
    let extra = tape.gather_rows(reps, &rows)?;
    rationale_logits_with(tape, m, batch, extra, rationales)
}

/// Rationale scores `[B×4]` with the tokens of answer `choices[b]` appended
/// to each question, read by the rationale module's own encoder. Used by the
/// separately trained baseline; no answer-module weight is involved.
pub fn rationale_logits_answer_text(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
    choices: &[usize],
    rationales: &EncodedSequence,
) -> Result<Var> {
    if choices.len() != batch.len() || choices.iter().any(|&c| c >= N_OPTIONS) {
        return Err(AutodiffError::Index(format!("answer choices {choices:?}")).into());
    }
    let (tokens, feats): (Vec<Vec<usize>>, Vec<Vec<Vec<f64>>>) = batch
        .iter()
        .zip(choices)
        .map(|(inst, &c)| {
            let answer = &inst.answers[c];
            let width = inst.object_feats.first().map_or(0, Vec::len);
            let tokens = inst.question.iter().chain(answer).copied().collect();
            let mut feats = inst.object_feats.clone();
            feats.extend(std::iter::repeat_n(vec![0.0; width], answer.len()));
            (tokens, feats)
        })
        .unzip();
    let token_refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
    let feat_refs: Vec<&[Vec<f64>]> = feats.iter().map(Vec::as_slice).collect();
    let query = ground(
        tape,
        m,
        Stage::Rationale,
        &token_refs,
        Some(&feat_refs),
        None,
    )?;
    score_responses(tape, m, Stage::Rationale, &query, rationales)
}

fn labels(batch: &[Instance]) -> (Vec<usize>, Vec<usize>) {
    batch
        .iter()
        .map(|i| (i.answer_label, i.rationale_label))
        .unzip()
}

/// Full two-stage forward pass for one estimator.
///
/// * `Softmax`: the question gets `Σᵢ pᵢ aᵢ` appended.
/// * `GumbelSoftmax`: the weights are `softmax((log p + g)/τ)` with `τ`
///   annealed by epoch; `g = 0` in evaluation.
/// * `ScoreFunction`: rationale losses for all four appended answers are
///   combined by the sampled surrogate, or by the exact expectation in
///   exact or evaluation mode.
/// * `JointCE`: a single cross-entropy over the 16 answer × rationale pairs;
///   predictions are decoded from the best pair.
pub fn forward_joint<R: Rng + ?Sized>(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
    est: &EstimatorConfig,
    epoch: usize,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<JointOutput> {
    est.validate()?;
    let (answer_labels, rationale_labels) = labels(batch);
    let answer = answer_stage(tape, m, batch)?;
    let answer_logits = answer.logits();
    let answer_loss = tape.cross_entropy(answer_logits, &answer_labels)?;
    let rationales = encode_rationales(tape, m, batch)?;
    let b = batch.len();
    let reps3 = tape.reshape(answer.reps, &[b, N_OPTIONS, m.config().embed_dim])?;
    let mut aux = Aux {
        answer,
        rationales,
        temperature: None,
        answer_weights: None,
        per_answer_rationale_logits: None,
        pair_logits: None,
    };
    let mut answer_pred = tape.value(answer_logits).argmax_rows();

    let (rationale_loss, rationale_pred) = match est {
        EstimatorConfig::Softmax | EstimatorConfig::GumbelSoftmax(_) => {
            let weights = match est {
                EstimatorConfig::GumbelSoftmax(cfg) => {
                    let tau = temperature_at(cfg, epoch);
                    aux.temperature = Some(tau);
                    let g = match mode {
                        ForwardMode::Train => gumbel_sample(rng, &[b, N_OPTIONS]),
                        ForwardMode::Eval => Tensor::zeros(&[b, N_OPTIONS]),
                    };
                    gumbel_softmax(tape, &answer.dist, &g, tau, cfg.use_log_probs)?
                }
                _ => answer.dist.probs,
            };
            aux.answer_weights = Some(weights);
            let extra = weight_answers(tape, weights, reps3)?;
            let logits = rationale_logits_with(tape, m, batch, extra, &rationales)?;
            let loss = tape.cross_entropy(logits, &rationale_labels)?;
            (loss, tape.value(logits).argmax_rows())
        }
        EstimatorConfig::ScoreFunction(cfg) => {
            let per_answer =
                rationale_logits_all_answers(tape, m, batch, answer.reps, &rationales)?;
            aux.per_answer_rationale_logits = Some(per_answer);
            let flat = tape.reshape(per_answer, &[b * N_OPTIONS, N_OPTIONS])?;
            let targets: Vec<usize> = rationale_labels
                .iter()
                .flat_map(|&r| std::iter::repeat_n(r, N_OPTIONS))
                .collect();
            let rows = tape.cross_entropy_rows(flat, &targets)?;
            let losses = tape.reshape(rows, &[b, N_OPTIONS])?;
            aux.answer_weights = Some(answer.dist.probs);
            let loss = if cfg.use_exact || mode == ForwardMode::Eval {
                exact_expectation_loss(tape, &answer.dist, losses)?
            } else {
                score_function_loss(
                    tape,
                    &answer.dist,
                    |t, i| Ok(t.index_axis(losses, 1, i)?),
                    cfg,
                    rng,
                )?
            };
            let scores = tape.value(per_answer);
            let pred = answer_pred
                .iter()
                .enumerate()
                .map(|(item, &a)| {
                    let off = (item * N_OPTIONS + a) * N_OPTIONS;
                    argmax(&scores.data()[off..off + N_OPTIONS])
                })
                .collect();
            (loss, pred)
        }
        EstimatorConfig::JointCE => {
            let per_answer =
                rationale_logits_all_answers(tape, m, batch, answer.reps, &rationales)?;
            aux.per_answer_rationale_logits = Some(per_answer);
            let pairs = joint_pair_logits(tape, answer_logits, per_answer)?;
            aux.pair_logits = Some(pairs);
            let loss = joint_cross_entropy(tape, pairs, &answer_labels, &rationale_labels)?;
            let decoded: Vec<(usize, usize)> = tape
                .value(pairs)
                .argmax_rows()
                .into_iter()
                .map(|k| decode_pair(k, N_OPTIONS))
                .collect();
            answer_pred = decoded.iter().map(|p| p.0).collect();
            (loss, decoded.iter().map(|p| p.1).collect())
        }
    };

    Ok(JointOutput {
        answer_logits,
        answer_loss,
        rationale_loss,
        answer_pred,
        rationale_pred,
        aux,
    })
}
