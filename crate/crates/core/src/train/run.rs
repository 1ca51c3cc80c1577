use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{argmax, AutodiffError, Tape, Var};
use crate::data::{Instance, N_OPTIONS};
use crate::model::{
    answer_stage, encode_rationales, forward_joint, rationale_logits_answer_text,
    rationale_logits_conditioned, AnswerStage, Bound, EncodedSequence, ForwardMode, ModelConfig,
    ModelError, ModelParams,
};
use crate::relax::EstimatorConfig;

use super::metrics::{accuracies, MetricsRow, Prediction};
use super::optim::{adam_step, clip_gradients, AdamState};
use super::schedule::PlateauScheduler;
use super::{conditioning_choice, AnswerInput, BaselineMode, TrainConfig, TrainError};

const EVAL_BATCH: usize = 128;

/// Loss ratios compared by [`run_ablation`].
pub const ABLATION_RATIOS: [[f64; 2]; 2] = [[1.0, 1.0], [1.0, 4.0]];

/// Validation results for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub q_a_acc: f64,
    pub qa_r_acc: f64,
    pub q_ar_acc: f64,
    /// Mean answer cross-entropy.
    pub answer_loss: f64,
    /// Mean rationale loss of the variant's own objective. For the joint
    /// cross-entropy variant the two losses split `−log p(a, r)` into
    /// `−log p(a)` and `−log p(r | a)`.
    pub rationale_loss: f64,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn row(&self, epoch: usize, lr: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            q_a_acc: self.q_a_acc,
            qa_r_acc: self.qa_r_acc,
            q_ar_acc: self.q_ar_acc,
            answer_loss: self.answer_loss,
            rationale_loss: self.rationale_loss,
            lr,
        }
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Evaluation of the initial parameters (epoch 0).
    pub initial: MetricsRow,
    /// One row per trained epoch, numbered from 1.
    pub rows: Vec<MetricsRow>,
    /// Mean training loss per epoch.
    pub train_losses: Vec<f64>,
    pub params: ModelParams,
}

fn rationale_pred_from(scores: &[f64]) -> usize {
    argmax(scores)
}

/// Evaluates `params` on `instances` without any randomness.
///
/// `epoch` is the zero-based schedule position, which sets the Gumbel
/// temperature. Q→A uses the answer head (the best pair for the joint
/// cross-entropy variant). QA→R appends the gold answer. Q→AR also requires
/// the rationale picked end to end from the model's own answer.
pub fn evaluate(
    params: &ModelParams,
    instances: &[Instance],
    est: &EstimatorConfig,
    baseline: &BaselineMode,
    epoch: usize,
) -> Result<Evaluation, ModelError> {
    let mut predictions = Vec::with_capacity(instances.len());
    let (mut answer_loss, mut rationale_loss) = (0.0, 0.0);
    // unused in evaluation mode
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in instances.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let m = params.bind(&mut tape, false);
        let gold_a: Vec<usize> = batch.iter().map(|i| i.answer_label).collect();
        let gold_r: Vec<usize> = batch.iter().map(|i| i.rationale_label).collect();
        let weight = batch.len() as f64;

        let (answers, given_gold, end_to_end) = if baseline.is_off() {
            let out = forward_joint(
                &mut tape,
                &m,
                batch,
                est,
                epoch,
                ForwardMode::Eval,
                &mut rng,
            )?;
            let given_gold: Vec<usize> = match est {
                EstimatorConfig::JointCE => {
                    let pairs = tape.value(out.aux.pair_logits.expect("pair logits"));
                    let (mut la, mut lr) = (0.0, 0.0);
                    for (b, row) in pairs.data().chunks(N_OPTIONS * N_OPTIONS).enumerate() {
                        let lse = |xs: &[f64]| {
                            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
                        };
                        let all = lse(row);
                        let block = &row[gold_a[b] * N_OPTIONS..(gold_a[b] + 1) * N_OPTIONS];
                        let marginal = lse(block);
                        la += all - marginal;
                        lr += marginal - block[gold_r[b]];
                    }
                    answer_loss += la;
                    rationale_loss += lr;
                    out.rationale_pred.clone()
                }
                EstimatorConfig::ScoreFunction(_) => {
                    let scores = tape.value(
                        out.aux
                            .per_answer_rationale_logits
                            .expect("per-answer logits"),
                    );
                    gold_a
                        .iter()
                        .enumerate()
                        .map(|(b, &a)| {
                            let off = (b * N_OPTIONS + a) * N_OPTIONS;
                            rationale_pred_from(&scores.data()[off..off + N_OPTIONS])
                        })
                        .collect()
                }
                EstimatorConfig::Softmax | EstimatorConfig::GumbelSoftmax(_) => {
                    let logits = rationale_logits_conditioned(
                        &mut tape,
                        &m,
                        batch,
                        &out.aux.answer,
                        &gold_a,
                        false,
                        &out.aux.rationales,
                    )?;
                    tape.value(logits).argmax_rows()
                }
            };
            if !matches!(est, EstimatorConfig::JointCE) {
                answer_loss += tape.value(out.answer_loss).item() * weight;
                rationale_loss += tape.value(out.rationale_loss).item() * weight;
            }
            (out.answer_pred, given_gold, out.rationale_pred)
        } else {
            let answer = answer_stage(&mut tape, &m, batch)?;
            let a_loss = tape.cross_entropy(answer.logits(), &gold_a)?;
            let rationales = encode_rationales(&mut tape, &m, batch)?;
            let gold_logits = baseline_rationale_logits(
                &mut tape,
                &m,
                batch,
                &answer,
                &gold_a,
                &rationales,
                baseline,
            )?;
            let r_loss = tape.cross_entropy(gold_logits, &gold_r)?;
            let answers = tape.value(answer.logits()).argmax_rows();
            let own_logits = baseline_rationale_logits(
                &mut tape,
                &m,
                batch,
                &answer,
                &answers,
                &rationales,
                baseline,
            )?;
            answer_loss += tape.value(a_loss).item() * weight;
            rationale_loss += tape.value(r_loss).item() * weight;
            (
                answers,
                tape.value(gold_logits).argmax_rows(),
                tape.value(own_logits).argmax_rows(),
            )
        };

        for (b, inst) in batch.iter().enumerate() {
            predictions.push(Prediction {
                answer_label: inst.answer_label,
                rationale_label: inst.rationale_label,
                answer: answers[b],
                rationale_given_gold: given_gold[b],
                rationale_end_to_end: end_to_end[b],
            });
        }
    }
    let n = instances.len().max(1) as f64;
    let (q_a_acc, qa_r_acc, q_ar_acc) = accuracies(&predictions);
    Ok(Evaluation {
        q_a_acc,
        qa_r_acc,
        q_ar_acc,
        answer_loss: answer_loss / n,
        rationale_loss: rationale_loss / n,
        predictions,
    })
}

// Rationale scores of the separately trained baseline given answer `choices`.
fn baseline_rationale_logits(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
    answer: &AnswerStage,
    choices: &[usize],
    rationales: &EncodedSequence,
    baseline: &BaselineMode,
) -> Result<Var, ModelError> {
    match baseline {
        BaselineMode::Conditioned {
            answer_input: AnswerInput::Tokens,
            ..
        } => rationale_logits_answer_text(tape, m, batch, choices, rationales),
        _ => rationale_logits_conditioned(tape, m, batch, answer, choices, true, rationales),
    }
}

/// Losses of one training batch: `(total, answer, rationale)`.
///
/// The total is `w_a·answer + w_r·rationale`, except for the joint
/// cross-entropy variant, whose single 16-way loss is the total. Under the
/// conditioned baseline the rationale module sees the answer chosen by
/// [`conditioning_choice`] without any gradient reaching the answer module.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    m: &Bound,
    batch: &[Instance],
    est: &EstimatorConfig,
    baseline: &BaselineMode,
    loss_ratio: [f64; 2],
    epoch: usize,
    rng: &mut R,
) -> Result<(Var, Var, Var), ModelError> {
    let [wa, wr] = loss_ratio;
    if baseline.is_off() {
        let out = forward_joint(tape, m, batch, est, epoch, ForwardMode::Train, rng)?;
        if matches!(est, EstimatorConfig::JointCE) {
            return Ok((out.rationale_loss, out.answer_loss, out.rationale_loss));
        }
        let a = tape.scale(out.answer_loss, wa)?;
        let r = tape.scale(out.rationale_loss, wr)?;
        let total = tape.add(a, r)?;
        return Ok((total, out.answer_loss, out.rationale_loss));
    }
    let gold_a: Vec<usize> = batch.iter().map(|i| i.answer_label).collect();
    let gold_r: Vec<usize> = batch.iter().map(|i| i.rationale_label).collect();
    let answer = answer_stage(tape, m, batch)?;
    let a_loss = tape.cross_entropy(answer.logits(), &gold_a)?;
    let rationales = encode_rationales(tape, m, batch)?;
    let choices: Vec<usize> = gold_a
        .iter()
        .map(|&g| conditioning_choice(g, rng, baseline))
        .collect();
    let logits =
        baseline_rationale_logits(tape, m, batch, &answer, &choices, &rationales, baseline)?;
    let r_loss = tape.cross_entropy(logits, &gold_r)?;
    let a = tape.scale(a_loss, wa)?;
    let r = tape.scale(r_loss, wr)?;
    let total = tape.add(a, r)?;
    Ok((total, a_loss, r_loss))
}

fn abort(est: &EstimatorConfig, epoch: usize, batch: usize, detail: String) -> TrainError {
    TrainError::NumericalAbort {
        variant: est.name().to_string(),
        epoch,
        batch,
        detail,
    }
}

/// Trains a fresh model and evaluates it on `val` after every epoch.
pub fn train_run(
    model: &ModelConfig,
    est: &EstimatorConfig,
    cfg: &TrainConfig,
    train: &[Instance],
    val: &[Instance],
) -> Result<TrainOutcome, TrainError> {
    train_run_with(model, est, cfg, train, val, |_| {})
}

/// [`train_run`] with a callback invoked on every metrics row as it is produced.
pub fn train_run_with(
    model: &ModelConfig,
    est: &EstimatorConfig,
    cfg: &TrainConfig,
    train: &[Instance],
    val: &[Instance],
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    est.validate().map_err(ModelError::from)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config {
            field: "data",
            message: "training and validation sets must be non-empty".into(),
        });
    }
    let mut params = ModelParams::init(model)?;
    let mut adam_cfg = cfg.adam();
    let mut state = AdamState::new(params.tensors());
    let mut scheduler = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let val_total = |e: &Evaluation| match est {
        EstimatorConfig::JointCE if cfg.baseline.is_off() => e.answer_loss + e.rationale_loss,
        _ => cfg.loss_ratio[0] * e.answer_loss + cfg.loss_ratio[1] * e.rationale_loss,
    };

    let initial = evaluate(&params, val, est, &cfg.baseline, 0)?.row(0, adam_cfg.lr);
    on_row(&initial);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let schedule_epoch = epoch - 1;
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (bi, ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Instance> = ids.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::new();
            let m = params.bind(&mut tape, true);
            let (total, _, _) = match training_loss(
                &mut tape,
                &m,
                &batch,
                est,
                &cfg.baseline,
                cfg.loss_ratio,
                schedule_epoch,
                &mut noise_rng,
            ) {
                Ok(v) => v,
                Err(ModelError::Autodiff(AutodiffError::NonFinite(op))) => {
                    return Err(abort(
                        est,
                        epoch,
                        bi,
                        format!("non-finite value in `{op}` during the forward pass"),
                    ))
                }
                Err(e) => return Err(e.into()),
            };
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(abort(est, epoch, bi, format!("loss is {loss}")));
            }
            loss_sum += loss * batch.len() as f64;
            let grads = match tape.backward(total) {
                Ok(g) => g,
                Err(AutodiffError::NonFinite(op)) => {
                    return Err(abort(
                        est,
                        epoch,
                        bi,
                        format!("non-finite gradient through `{op}`"),
                    ))
                }
                Err(e) => return Err(ModelError::from(e).into()),
            };
            let mut grads: Vec<_> = m.vars().iter().map(|&v| grads.wrt(&tape, v)).collect();
            drop(m);
            if !grads.iter().all(|g| g.all_finite()) {
                return Err(abort(est, epoch, bi, "non-finite gradient".into()));
            }
            clip_gradients(&mut grads, cfg.clip_norm);
            adam_step(params.tensors_mut(), &grads, &mut state, &adam_cfg);
        }
        train_losses.push(loss_sum / train.len() as f64);
        let eval = evaluate(&params, val, est, &cfg.baseline, schedule_epoch)?;
        let row = eval.row(epoch, adam_cfg.lr);
        on_row(&row);
        adam_cfg.lr *= scheduler.step(val_total(&eval));
        rows.push(row);
    }
    Ok(TrainOutcome {
        initial,
        rows,
        train_losses,
        params,
    })
}

/// One run of the loss-ratio ablation.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub loss_ratio: [f64; 2],
    pub outcome: TrainOutcome,
}

/// Trains with each of [`ABLATION_RATIOS`] from the same seeds.
pub fn run_ablation(
    model: &ModelConfig,
    est: &EstimatorConfig,
    cfg: &TrainConfig,
    train: &[Instance],
    val: &[Instance],
) -> Result<Vec<AblationRun>, TrainError> {
    ABLATION_RATIOS
        .iter()
        .map(|&loss_ratio| {
            let run_cfg = TrainConfig {
                loss_ratio,
                ..cfg.clone()
            };
            Ok(AblationRun {
                loss_ratio,
                outcome: train_run(model, est, &run_cfg, train, val)?,
            })
        })
        .collect()
}
