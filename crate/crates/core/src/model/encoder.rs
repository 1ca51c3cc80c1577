use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

use super::{Bound, ModelError, Stage};

type Result<T> = std::result::Result<T, ModelError>;

/// Per-token states of a batch of sequences.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSequence {
    /// `[N×T×h]` concatenated forward and backward GRU states.
    pub states: Var,
    /// `[N×h]` mean of `states` over time.
    pub pooled: Var,
}

impl EncodedSequence {
    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.states).shape()[0]
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.value(self.states).shape()[1]
    }

    /// Repeats sequences: output row `r` is input row `ids[r]`.
    pub fn select(&self, tape: &mut Tape, ids: &[usize]) -> Result<EncodedSequence> {
        let s = tape.value(self.states).shape().to_vec();
        let flat = tape.reshape(self.states, &[s[0], s[1] * s[2]])?;
        let picked = tape.gather_rows(flat, ids)?;
        let states = tape.reshape(picked, &[ids.len(), s[1], s[2]])?;
        let pooled = tape.gather_rows(self.pooled, ids)?;
        Ok(EncodedSequence { states, pooled })
    }
}

struct Gru {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
    units: usize,
}

impl Gru {
    fn bind(m: &Bound, prefix: &str) -> Self {
        let get = |kind: &str| ["z", "r", "n"].map(|g| m.var(&format!("{prefix}.{kind}{g}")));
        let units = m.config().hidden_dim / 2;
        Gru {
            w: get("w"),
            u: get("u"),
            b: get("b"),
            units,
        }
    }

    // z = σ(xWz + hUz + bz); r = σ(xWr + hUr + br)
    // n = tanh(xWn + bn + r ⊙ hUn); h' = n + z ⊙ (h − n)
    fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, i: usize| -> Result<Var> {
            let xw = tape.matmul(x, self.w[i])?;
            let hu = tape.matmul(h, self.u[i])?;
            let s = tape.add(xw, hu)?;
            let s = tape.add_bias(s, self.b[i])?;
            Ok(tape.sigmoid(s)?)
        };
        let z = gate(tape, 0)?;
        let r = gate(tape, 1)?;
        let xw = tape.matmul(x, self.w[2])?;
        let xw = tape.add_bias(xw, self.b[2])?;
        let hu = tape.matmul(h, self.u[2])?;
        let rhu = tape.mul(r, hu)?;
        let pre = tape.add(xw, rhu)?;
        let n = tape.tanh(pre)?;
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        Ok(tape.add(n, zd)?)
    }

    fn run(&self, tape: &mut Tape, inputs: &[Var], reverse: bool) -> Result<Vec<Var>> {
        let rows = tape.value(inputs[0]).shape()[0];
        let mut h = tape.constant(Tensor::zeros(&[rows, self.units]));
        let mut out = vec![h; inputs.len()];
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        for t in order {
            h = self.step(tape, inputs[t], h)?;
            out[t] = h;
        }
        Ok(out)
    }
}

// Bidirectional pass over per-step inputs `[N×in]`, returning the encoding.
fn bigru(tape: &mut Tape, m: &Bound, prefix: &str, inputs: &[Var]) -> Result<EncodedSequence> {
    let fwd = Gru::bind(m, &format!("{prefix}.fwd")).run(tape, inputs, false)?;
    let bwd = Gru::bind(m, &format!("{prefix}.bwd")).run(tape, inputs, true)?;
    let mut steps = Vec::with_capacity(inputs.len());
    for (f, b) in fwd.into_iter().zip(bwd) {
        steps.push(tape.concat(&[f, b], 1)?);
    }
    let states = tape.stack(&steps, 1)?;
    let pooled = tape.mean_axis(states, Some(1))?;
    Ok(EncodedSequence { states, pooled })
}

/// Grounding: a bidirectional GRU over `embed(token) + feats · W_obj`.
///
/// `tokens` holds `N` equally long sequences. `object_feats`, when given,
/// holds one `[T×f]` feature matrix per sequence (zero rows for untagged
/// tokens). `extra`, when given, is a `[N×d]` pseudo-token embedding
/// appended after the last token.
pub fn ground(
    tape: &mut Tape,
    m: &Bound,
    stage: Stage,
    tokens: &[&[usize]],
    object_feats: Option<&[&[Vec<f64>]]>,
    extra: Option<Var>,
) -> Result<EncodedSequence> {
    let n = tokens.len();
    let len = tokens.first().map_or(0, |t| t.len());
    if n == 0 || len == 0 || tokens.iter().any(|t| t.len() != len) {
        return Err(AutodiffError::Shape(format!(
            "need equally long non-empty sequences, got {n} of length {len}"
        ))
        .into());
    }
    let cfg = m.config();
    let prefix = stage.prefix();
    let table = m.var(super::EMBEDDING);
    let proj = m.var(&format!("{prefix}.obj_proj"));
    if let Some(feats) = object_feats {
        if feats.len() != n
            || feats
                .iter()
                .any(|f| f.len() != len || f.iter().any(|r| r.len() != cfg.object_feat_dim))
        {
            return Err(AutodiffError::Shape(format!(
                "object features must be {n} matrices of shape [{len}×{}]",
                cfg.object_feat_dim
            ))
            .into());
        }
    }

    let mut inputs = Vec::with_capacity(len + 1);
    for t in 0..len {
        let ids: Vec<usize> = tokens.iter().map(|s| s[t]).collect();
        let mut x = tape.embed(table, &ids)?;
        if let Some(feats) = object_feats {
            let rows: Vec<f64> = feats.iter().flat_map(|f| f[t].iter().copied()).collect();
            if rows.iter().any(|&v| v != 0.0) {
                let f = tape.constant(Tensor::new(vec![n, cfg.object_feat_dim], rows)?);
                let projected = tape.matmul(f, proj)?;
                x = tape.add(x, projected)?;
            }
        }
        inputs.push(x);
    }
    if let Some(e) = extra {
        let s = tape.value(e).shape();
        if s != [n, cfg.embed_dim] {
            return Err(AutodiffError::Shape(format!(
                "pseudo-token {s:?} for {n} sequences of width {}",
                cfg.embed_dim
            ))
            .into());
        }
        inputs.push(e);
    }
    bigru(tape, m, &format!("{prefix}.ground"), &inputs)
}

/// Contextualization: for each response token, scaled dot-product attention
/// over the query states. Returns `(attended [N×Tr×h], weights [N×Tr×Tq])`.
pub fn contextualize(
    tape: &mut Tape,
    response: &EncodedSequence,
    query: &EncodedSequence,
) -> Result<(Var, Var)> {
    let h = tape.value(response.states).shape()[2];
    let keys = tape.transpose(query.states)?;
    let scores = tape.bmm(response.states, keys)?;
    let scores = tape.scale(scores, 1.0 / (h as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let attended = tape.bmm(weights, query.states)?;
    Ok((attended, weights))
}

/// Reasoning and scoring. `responses` holds four rows per query row (option
/// `j` of query `q` at row `4q + j`). Returns `[Nq×4]` logits.
pub fn score_responses(
    tape: &mut Tape,
    m: &Bound,
    stage: Stage,
    query: &EncodedSequence,
    responses: &EncodedSequence,
) -> Result<Var> {
    const OPTIONS: usize = crate::data::N_OPTIONS;
    let nq = query.rows(tape);
    if responses.rows(tape) != nq * OPTIONS {
        return Err(AutodiffError::Shape(format!(
            "{} responses for {nq} queries",
            responses.rows(tape)
        ))
        .into());
    }
    let ids: Vec<usize> = (0..nq)
        .flat_map(|q| std::iter::repeat_n(q, OPTIONS))
        .collect();
    let query = query.select(tape, &ids)?;
    let (attended, _) = contextualize(tape, responses, &query)?;
    let joined = tape.concat(&[responses.states, attended], 2)?;
    let len = responses.len(tape);
    let mut inputs = Vec::with_capacity(len);
    for t in 0..len {
        inputs.push(tape.index_axis(joined, 1, t)?);
    }
    let prefix = stage.prefix();
    let reasoned = bigru(tape, m, &format!("{prefix}.reason"), &inputs)?;
    let w = m.var(&format!("{prefix}.head.w"));
    let b = m.var(&format!("{prefix}.head.b"));
    let logits = tape.matmul(reasoned.pooled, w)?;
    let logits = tape.add_bias(logits, b)?;
    Ok(tape.reshape(logits, &[nq, OPTIONS])?)
}

/// Answer representation `aᵢ`: the pooled grounded answer projected to the
/// embedding width. `[N×h] → [N×d]`.
pub fn answer_rep(tape: &mut Tape, m: &Bound, answers: &EncodedSequence) -> Result<Var> {
    let proj = m.var(super::ANSWER_REP_PROJ);
    Ok(tape.matmul(answers.pooled, proj)?)
}
