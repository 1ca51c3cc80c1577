//! Ways of passing a discrete answer choice to the rationale stage while
//! keeping the pipeline trainable end to end.
//!
//! Every operation accepts either a single item (answer logits of shape
//! `[n]`) or a batch (`[B×n]`). Batched losses are averaged over the batch.
//!
//! * [`softmax_weight`]: the rationale stage sees `Σᵢ pᵢ aᵢ`.
//! * [`gumbel_softmax`]: the weights are `softmax((base + g) / τ)` with
//!   Gumbel noise `g` and an annealed temperature ([`temperature_at`]).
//! * [`score_function_loss`]: answers are sampled, and a surrogate loss
//!   yields the REINFORCE gradient plus the pathwise gradient in a single
//!   backward pass. [`exact_expectation_loss`] enumerates all answers.
//! * [`joint_pair_logits`] / [`joint_cross_entropy`]: one softmax over all
//!   answer × rationale pairs.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Lower clamp for uniform draws before the double log.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, RelaxError>;

/// Answer scores and their softmax for a batch of items.
#[derive(Clone, Copy, Debug)]
pub struct AnswerDistribution {
    /// `[B×n]` pre-softmax scores.
    pub logits: Var,
    /// `[B×n]` probabilities.
    pub probs: Var,
    /// `[B×n]` log-probabilities.
    pub log_probs: Var,
}

impl AnswerDistribution {
    /// Builds the distribution from `[n]` or `[B×n]` logits. Single items are
    /// promoted to a batch of one.
    pub fn new(tape: &mut Tape, logits: Var) -> Result<Self> {
        let logits = as_batch(tape, logits)?;
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(AnswerDistribution {
            logits,
            probs,
            log_probs,
        })
    }

    pub fn batch_size(&self, tape: &Tape) -> usize {
        tape.value(self.probs).shape()[0]
    }

    pub fn n_choices(&self, tape: &Tape) -> usize {
        tape.value(self.probs).shape()[1]
    }
}

fn as_batch(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.value(v).shape().to_vec();
    match s.len() {
        1 => Ok(tape.reshape(v, &[1, s[0]])?),
        2 => Ok(v),
        _ => Err(AutodiffError::Shape(format!("expected [n] or [B×n], got {s:?}")).into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_epochs: usize,
    /// Perturb log-probabilities (Gumbel-max semantics) rather than the raw
    /// probabilities.
    pub use_log_probs: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau_start: 5.0,
            tau_end: 1.0,
            anneal_epochs: 10,
            use_log_probs: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(RelaxError::Config(format!(
                "need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.anneal_epochs == 0 {
            return Err(RelaxError::Config(
                "anneal_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreFunctionConfig {
    pub n_samples: usize,
    /// Enumerate all answers instead of sampling.
    pub use_exact: bool,
    pub baseline_subtract: bool,
}

impl Default for ScoreFunctionConfig {
    fn default() -> Self {
        ScoreFunctionConfig {
            n_samples: 64,
            use_exact: false,
            baseline_subtract: false,
        }
    }
}

impl ScoreFunctionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(RelaxError::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorConfig {
    Softmax,
    GumbelSoftmax(GumbelConfig),
    ScoreFunction(ScoreFunctionConfig),
    JointCE,
}

impl EstimatorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorConfig::Softmax => "softmax",
            EstimatorConfig::GumbelSoftmax(_) => "gumbel_softmax",
            EstimatorConfig::ScoreFunction(_) => "score_function",
            EstimatorConfig::JointCE => "joint_ce",
        }
    }

    /// Parses a variant name with default hyperparameters.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "softmax" => EstimatorConfig::Softmax,
            "gumbel_softmax" => EstimatorConfig::GumbelSoftmax(GumbelConfig::default()),
            "score_function" => EstimatorConfig::ScoreFunction(ScoreFunctionConfig::default()),
            "joint_ce" => EstimatorConfig::JointCE,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EstimatorConfig::GumbelSoftmax(c) => c.validate(),
            EstimatorConfig::ScoreFunction(c) => c.validate(),
            _ => Ok(()),
        }
    }
}

/// Weighted sum of answer representations, `Σᵢ wᵢ aᵢ`.
///
/// `weights` is `[n]` with `reps` `[n×d]` (output `[d]`), or `[B×n]` with
/// `reps` `[B×n×d]` (output `[B×d]`).
pub fn weight_answers(tape: &mut Tape, weights: Var, reps: Var) -> Result<Var> {
    let ws = tape.value(weights).shape().to_vec();
    let rs = tape.value(reps).shape().to_vec();
    match (ws.len(), rs.len()) {
        (1, 2) if ws[0] == rs[0] => {
            let w = tape.reshape(weights, &[1, 1, ws[0]])?;
            let r = tape.reshape(reps, &[1, rs[0], rs[1]])?;
            let out = tape.bmm(w, r)?;
            Ok(tape.reshape(out, &[rs[1]])?)
        }
        (2, 3) if ws[0] == rs[0] && ws[1] == rs[1] => {
            let w = tape.reshape(weights, &[ws[0], 1, ws[1]])?;
            let out = tape.bmm(w, reps)?;
            Ok(tape.reshape(out, &[rs[0], rs[2]])?)
        }
        // a batch of one promoted by AnswerDistribution, with unbatched reps
        (2, 2) if ws[0] == 1 && ws[1] == rs[0] => {
            let w = tape.reshape(weights, &[ws[1]])?;
            weight_answers(tape, w, reps)
        }
        _ => Err(
            AutodiffError::Shape(format!("answer weights {ws:?} for representations {rs:?}"))
                .into(),
        ),
    }
}

/// Probability-weighted answer representation `A_w = Σᵢ p̂ᵢ aᵢ`.
pub fn softmax_weight(tape: &mut Tape, dist: &AnswerDistribution, answer_reps: Var) -> Result<Var> {
    weight_answers(tape, dist.probs, answer_reps)
}

/// Maps a uniform draw to a standard Gumbel sample, `−ln(−ln u)`, after
/// clamping `u` into `(ε, 1−ε)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Tensor of independent standard Gumbel draws.
pub fn gumbel_sample<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| gumbel_from_uniform(rng.random::<f64>()))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `softmax((base + g) / τ)` with `base` the log-probabilities (or the
/// probabilities when `use_log_probs` is false). `g` is a constant.
pub fn gumbel_softmax(
    tape: &mut Tape,
    dist: &AnswerDistribution,
    g: &Tensor,
    tau: f64,
    use_log_probs: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(RelaxError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let base = if use_log_probs {
        dist.log_probs
    } else {
        dist.probs
    };
    let shape = tape.value(base).shape().to_vec();
    let g = if g.shape() == shape.as_slice() {
        g.clone()
    } else {
        g.reshaped(&shape)?
    };
    let noise = tape.constant(g);
    let perturbed = tape.add(base, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    Ok(tape.softmax(scaled)?)
}

/// Linear temperature schedule: `tau_start` at epoch 0 down to `tau_end` at
/// `anneal_epochs`, flat afterwards.
pub fn temperature_at(cfg: &GumbelConfig, epoch: usize) -> f64 {
    if epoch >= cfg.anneal_epochs {
        return cfg.tau_end;
    }
    let frac = epoch as f64 / cfg.anneal_epochs as f64;
    cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac
}

/// Inverse-CDF categorical draw.
pub fn sample_answer<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // rounding left the total just under u; take the last reachable outcome
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// `E_{A∼p}[l_A] = Σᵢ pᵢ lᵢ`, averaged over the batch. `per_answer_loss`
/// has the same shape as the answer logits.
pub fn exact_expectation_loss(
    tape: &mut Tape,
    dist: &AnswerDistribution,
    per_answer_loss: Var,
) -> Result<Var> {
    let losses = as_batch(tape, per_answer_loss)?;
    let weighted = tape.mul(dist.probs, losses)?;
    let per_item = tape.sum_axis(weighted, Some(1))?;
    Ok(tape.mean(per_item)?)
}

/// Monte-Carlo estimate of the expected loss whose gradient is the
/// score-function (REINFORCE) term plus the pathwise term.
///
/// `loss_of(tape, i)` returns the per-item loss `[B]` (or a scalar for a
/// single item) when answer `i` is fed forward. It is called at most once
/// per distinct sampled answer.
///
/// Per item, with samples `A₁..A_N` and losses `l_k`, the surrogate is
/// `(1/N) Σₖ [ (l̄ₖ − bₖ)(log p(Aₖ) − log p̄(Aₖ)) + lₖ ]` where a bar marks a
/// detached value. Its value is the sample mean of the losses. With
/// `baseline_subtract`, `bₖ` is the mean of the other `N − 1` losses, which
/// keeps the estimator unbiased.
pub fn score_function_loss<R, F>(
    tape: &mut Tape,
    dist: &AnswerDistribution,
    mut loss_of: F,
    cfg: &ScoreFunctionConfig,
    rng: &mut R,
) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape, usize) -> Result<Var>,
{
    cfg.validate()?;
    let n = cfg.n_samples;
    let (batch, choices) = (dist.batch_size(tape), dist.n_choices(tape));
    let probs = tape.value(dist.probs).clone();

    let mut counts = vec![0usize; batch * choices];
    for (b, row) in probs.rows().enumerate() {
        for _ in 0..n {
            counts[b * choices + sample_answer(row, rng)] += 1;
        }
    }

    let mut columns: BTreeMap<usize, Var> = BTreeMap::new();
    for i in 0..choices {
        if (0..batch).any(|b| counts[b * choices + i] > 0) {
            let col = loss_of(tape, i)?;
            let col = if tape.value(col).shape() == [batch] {
                col
            } else {
                tape.reshape(col, &[batch])?
            };
            columns.insert(i, col);
        }
    }

    let value_of = |tape: &Tape, b: usize, i: usize| tape.value(columns[&i]).data()[b];
    let mut weights = vec![0.0; batch * choices];
    for b in 0..batch {
        let sampled: Vec<usize> = (0..choices)
            .filter(|&i| counts[b * choices + i] > 0)
            .collect();
        if cfg.baseline_subtract && n > 1 {
            // shifted mean: exact when all sampled losses coincide
            let anchor = value_of(tape, b, sampled[0]);
            let shift: f64 = sampled
                .iter()
                .map(|&i| counts[b * choices + i] as f64 * (value_of(tape, b, i) - anchor))
                .sum::<f64>()
                / n as f64;
            let mean = anchor + shift;
            for &i in &sampled {
                let c = counts[b * choices + i] as f64;
                weights[b * choices + i] = c * (value_of(tape, b, i) - mean) / (n - 1) as f64;
            }
        } else {
            for &i in &sampled {
                let c = counts[b * choices + i] as f64;
                weights[b * choices + i] = c * value_of(tape, b, i) / n as f64;
            }
        }
    }

    let frozen_logp = tape.detach(dist.log_probs);
    let centered = tape.sub(dist.log_probs, frozen_logp)?;
    let w = tape.constant(Tensor::from_parts(vec![batch, choices], weights));
    let score = tape.mul(w, centered)?;
    let mut per_item = tape.sum_axis(score, Some(1))?;

    for (&i, &col) in &columns {
        let share: Vec<f64> = (0..batch)
            .map(|b| counts[b * choices + i] as f64 / n as f64)
            .collect();
        let share = tape.constant(Tensor::from_parts(vec![batch], share));
        let path = tape.mul(share, col)?;
        per_item = tape.add(per_item, path)?;
    }
    Ok(tape.mean(per_item)?)
}

/// Flat index of an (answer, rationale) pair.
pub fn pair_index(answer: usize, rationale: usize, n_rationales: usize) -> usize {
    n_rationales * answer + rationale
}

/// Inverse of [`pair_index`].
pub fn decode_pair(flat: usize, n_rationales: usize) -> (usize, usize) {
    (flat / n_rationales, flat % n_rationales)
}

/// Joint scores over all answer × rationale pairs:
/// `out[n_r·i + j] = answer[i] + rationale[i][j]`.
///
/// Accepts `[n]` with `[n×m]` (output `[n·m]`) or `[B×n]` with `[B×n×m]`
/// (output `[B×n·m]`).
pub fn joint_pair_logits(
    tape: &mut Tape,
    answer_logits: Var,
    rationale_logits_per_answer: Var,
) -> Result<Var> {
    let a_shape = tape.value(answer_logits).shape().to_vec();
    let r_shape = tape.value(rationale_logits_per_answer).shape().to_vec();
    let (batched, b, n, m) = match (a_shape.len(), r_shape.len()) {
        (1, 2) if a_shape[0] == r_shape[0] => (false, 1, r_shape[0], r_shape[1]),
        (2, 3) if a_shape[0] == r_shape[0] && a_shape[1] == r_shape[1] => {
            (true, r_shape[0], r_shape[1], r_shape[2])
        }
        _ => {
            return Err(AutodiffError::Shape(format!(
                "answer logits {a_shape:?} with rationale logits {r_shape:?}"
            ))
            .into())
        }
    };
    let a = tape.reshape(answer_logits, &[b, n])?;
    let mut expand = Tensor::zeros(&[n, n * m]);
    for i in 0..n {
        for j in 0..m {
            expand.data_mut()[i * n * m + pair_index(i, j, m)] = 1.0;
        }
    }
    let expand = tape.constant(expand);
    let spread = tape.matmul(a, expand)?;
    let r = tape.reshape(rationale_logits_per_answer, &[b, n * m])?;
    let joint = tape.add(spread, r)?;
    if batched {
        Ok(joint)
    } else {
        Ok(tape.reshape(joint, &[n * m])?)
    }
}

/// Cross-entropy against the pair `(answer_label, rationale_label)` of each
/// item, over `[P]` or `[B×P]` pair logits with `P = 16`.
pub fn joint_cross_entropy(
    tape: &mut Tape,
    pair_logits: Var,
    answer_labels: &[usize],
    rationale_labels: &[usize],
) -> Result<Var> {
    const N: usize = 4;
    if answer_labels.len() != rationale_labels.len() {
        return Err(AutodiffError::Shape("label sequences differ in length".into()).into());
    }
    let mut targets = Vec::with_capacity(answer_labels.len());
    for (&a, &r) in answer_labels.iter().zip(rationale_labels) {
        if a >= N || r >= N {
            return Err(
                AutodiffError::Index(format!("pair labels ({a}, {r}) outside 0..{N}")).into(),
            );
        }
        targets.push(pair_index(a, r, N));
    }
    let logits = as_batch(tape, pair_logits)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}
