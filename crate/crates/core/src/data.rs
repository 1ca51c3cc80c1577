//! Synthetic multiple-choice items with a planted answer → rationale rule,
//! plus JSONL reading and writing.
//!
//! The vocabulary is split into three bands of `n_keys` tokens (cues, answer
//! keys, details) followed by a filler band:
//!
//! * the question carries cue tokens at the key slots; the answer key is
//!   `k = (Σ cue index) mod n_keys`;
//! * the gold answer contains key `k`, each distractor a different key, and
//!   every answer also carries its own detail token (distinct within an item);
//! * rationale `j` repeats the detail token of one answer, so exactly one
//!   rationale matches the gold answer and nothing in the question says which.
//!
//! Option order is shuffled independently for answers and rationales. With
//! probability `noise_prob` both labels are replaced by uniform draws.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_OPTIONS: usize = 4;
pub const QUESTION_LEN: usize = 6;
pub const ANSWER_LEN: usize = 4;
pub const RATIONALE_LEN: usize = 5;
pub const OBJECT_FEAT_DIM: usize = 8;
/// Question positions that carry Gaussian object features.
pub const TAGGED_POSITIONS: [usize; 2] = [0, 4];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid field `{field}`: {message}")]
    Validation {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("invalid generator setting `{field}`: {message}")]
    Spec {
        field: &'static str,
        message: String,
    },
}

/// One multiple-choice item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub question: Vec<usize>,
    /// One row of features per question token; all zeros for untagged tokens.
    pub object_feats: Vec<Vec<f64>>,
    pub answers: Vec<Vec<usize>>,
    pub rationales: Vec<Vec<usize>>,
    pub answer_label: usize,
    pub rationale_label: usize,
}

impl Instance {
    /// Structural checks; `vocab_size` additionally bounds every token id.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<(), (&'static str, String)> {
        if self.answers.len() != N_OPTIONS {
            return Err((
                "answers",
                format!("expected {N_OPTIONS} options, got {}", self.answers.len()),
            ));
        }
        if self.rationales.len() != N_OPTIONS {
            return Err((
                "rationales",
                format!(
                    "expected {N_OPTIONS} options, got {}",
                    self.rationales.len()
                ),
            ));
        }
        if self.answer_label >= N_OPTIONS {
            return Err((
                "answer_label",
                format!("{} is outside 0..{N_OPTIONS}", self.answer_label),
            ));
        }
        if self.rationale_label >= N_OPTIONS {
            return Err((
                "rationale_label",
                format!("{} is outside 0..{N_OPTIONS}", self.rationale_label),
            ));
        }
        if self.question.is_empty() {
            return Err(("question", "empty question".into()));
        }
        if self.object_feats.len() != self.question.len() {
            return Err((
                "object_feats",
                format!(
                    "{} rows for {} question tokens",
                    self.object_feats.len(),
                    self.question.len()
                ),
            ));
        }
        let width = self.object_feats[0].len();
        if width == 0 || self.object_feats.iter().any(|r| r.len() != width) {
            return Err((
                "object_feats",
                "rows must be non-empty and equally long".into(),
            ));
        }
        if self.object_feats.iter().flatten().any(|x| !x.is_finite()) {
            return Err(("object_feats", "non-finite feature".into()));
        }
        for (field, seqs) in [("answers", &self.answers), ("rationales", &self.rationales)] {
            let len = seqs[0].len();
            if len == 0 || seqs.iter().any(|s| s.len() != len) {
                return Err((field, "options must be non-empty and equally long".into()));
            }
        }
        if let Some(v) = vocab_size {
            let all = self
                .question
                .iter()
                .chain(self.answers.iter().flatten())
                .chain(self.rationales.iter().flatten());
            if let Some(&bad) = all.into_iter().find(|&&t| t >= v) {
                return Err(("tokens", format!("token id {bad} >= vocab size {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub vocab_size: usize,
    /// Question positions holding cue tokens.
    pub key_slots: Vec<usize>,
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_train: 2000,
            n_val: 2000,
            vocab_size: 64,
            key_slots: vec![2],
            noise_prob: 0.1,
            seed: 0,
        }
    }
}

/// Token bands derived from the vocabulary size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_keys: usize,
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Self {
        Vocab { n_keys: size / 5, size }
    }

    pub fn cue(&self, idx: usize) -> usize {
        idx
    }

    pub fn key(&self, idx: usize) -> usize {
        self.n_keys + idx
    }

    pub fn detail(&self, idx: usize) -> usize {
        2 * self.n_keys + idx
    }

    pub fn filler_range(&self) -> std::ops::Range<usize> {
        3 * self.n_keys..self.size
    }

    pub fn cue_index(&self, token: usize) -> Option<usize> {
        (token < self.n_keys).then_some(token)
    }

    pub fn key_index(&self, token: usize) -> Option<usize> {
        (self.n_keys..2 * self.n_keys).contains(&token).then(|| token - self.n_keys)
    }

    pub fn detail_index(&self, token: usize) -> Option<usize> {
        (2 * self.n_keys..3 * self.n_keys).contains(&token).then(|| token - 2 * self.n_keys)
    }

    /// Key index planted by a question: `(Σ cue index) mod n_keys`.
    pub fn key_of(&self, question: &[usize], key_slots: &[usize]) -> Option<usize> {
        let mut total = 0;
        for &s in key_slots {
            total += self.cue_index(*question.get(s)?)?;
        }
        Some(total % self.n_keys)
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |field, message: &str| {
            Err(DataError::Spec {
                field,
                message: message.into(),
            })
        };
        if self.n_train == 0 {
            return err("n_train", "must be at least 1");
        }
        if self.n_val == 0 {
            return err("n_val", "must be at least 1");
        }
        if self.vocab_size < 24 {
            return err("vocab_size", "must be at least 24");
        }
        if self.key_slots.is_empty() || self.key_slots.iter().any(|&s| s >= QUESTION_LEN) {
            return err(
                "key_slots",
                "need at least one slot, each below the question length 6",
            );
        }
        let mut slots = self.key_slots.clone();
        slots.sort_unstable();
        slots.dedup();
        if slots.len() != self.key_slots.len() {
            return err("key_slots", "slots must be distinct");
        }
        if !(0.0..1.0).contains(&self.noise_prob) {
            return err("noise_prob", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }
}

// Per-item stream: generation is a pure function of (seed, split, index).
fn item_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.wrapping_mul(1 << 40).wrapping_add(index as u64));
    rng
}

// Distinct indices below `n_keys`, starting with `first` when given.
fn distinct(rng: &mut ChaCha8Rng, n_keys: usize, first: Option<usize>) -> Vec<usize> {
    let mut out: Vec<usize> = first.into_iter().collect();
    while out.len() < N_OPTIONS {
        let k = rng.random_range(0..n_keys);
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

fn generate_one(spec: &GenSpec, rng: &mut ChaCha8Rng, id: String) -> Instance {
    let vocab = spec.vocab();
    let fillers = vocab.filler_range();
    let filler = |rng: &mut ChaCha8Rng| rng.random_range(fillers.clone());

    let mut question: Vec<usize> = (0..QUESTION_LEN).map(|_| filler(rng)).collect();
    for &s in &spec.key_slots {
        question[s] = vocab.cue(rng.random_range(0..vocab.n_keys));
    }
    let key = vocab
        .key_of(&question, &spec.key_slots)
        .expect("cues were just planted");

    let mut object_feats = vec![vec![0.0; OBJECT_FEAT_DIM]; QUESTION_LEN];
    for &p in &TAGGED_POSITIONS {
        for x in object_feats[p].iter_mut() {
            *x = StandardNormal.sample(rng);
        }
    }

    // option o holds keys[o] and details[o]; option 0 is gold
    let keys = distinct(rng, vocab.n_keys, Some(key));
    let mut answer_order: Vec<usize> = (0..N_OPTIONS).collect();
    answer_order.shuffle(rng);
    let mut rationale_order: Vec<usize> = (0..N_OPTIONS).collect();
    rationale_order.shuffle(rng);
    let details = distinct(rng, vocab.n_keys, None);

    let answers = answer_order
        .iter()
        .map(|&o| {
            let mut toks: Vec<usize> = (0..ANSWER_LEN).map(|_| filler(rng)).collect();
            let at_key = rng.random_range(0..ANSWER_LEN);
            let mut at_detail = rng.random_range(0..ANSWER_LEN - 1);
            if at_detail >= at_key {
                at_detail += 1;
            }
            toks[at_key] = vocab.key(keys[o]);
            toks[at_detail] = vocab.detail(details[o]);
            toks
        })
        .collect();
    let rationales = rationale_order
        .iter()
        .map(|&o| {
            let mut toks: Vec<usize> = (0..RATIONALE_LEN).map(|_| filler(rng)).collect();
            toks[rng.random_range(0..RATIONALE_LEN)] = vocab.detail(details[o]);
            toks
        })
        .collect();

    let mut answer_label = answer_order.iter().position(|&o| o == 0).unwrap();
    let mut rationale_label = rationale_order.iter().position(|&o| o == 0).unwrap();
    if rng.random::<f64>() < spec.noise_prob {
        answer_label = rng.random_range(0..N_OPTIONS);
        rationale_label = rng.random_range(0..N_OPTIONS);
    }

    Instance {
        id,
        question,
        object_feats,
        answers,
        rationales,
        answer_label,
        rationale_label,
    }
}

/// Generates the train and validation splits.
pub fn generate(spec: &GenSpec) -> Result<(Vec<Instance>, Vec<Instance>), DataError> {
    spec.validate()?;
    let split = |which: u64, n: usize, name: &str| -> Vec<Instance> {
        (0..n)
            .map(|i| {
                generate_one(
                    spec,
                    &mut item_rng(spec.seed, which, i),
                    format!("{name}-{i:06}"),
                )
            })
            .collect()
    };
    Ok((split(0, spec.n_train, "train"), split(1, spec.n_val, "val")))
}

/// Rule-aware decoder used as a ceiling on achievable accuracy.
pub struct OracleDecoder {
    vocab: Vocab,
    key_slots: Vec<usize>,
}

impl OracleDecoder {
    pub fn new(spec: &GenSpec) -> Self {
        OracleDecoder {
            vocab: spec.vocab(),
            key_slots: spec.key_slots.clone(),
        }
    }

    fn answer_key(&self, answer: &[usize]) -> Option<usize> {
        answer.iter().find_map(|&t| self.vocab.key_index(t))
    }

    pub fn predict_answer(&self, inst: &Instance) -> Option<usize> {
        let key = self.vocab.key_of(&inst.question, &self.key_slots)?;
        inst.answers
            .iter()
            .position(|a| self.answer_key(a) == Some(key))
    }

    /// Rationale matching the given answer option.
    pub fn predict_rationale(&self, inst: &Instance, answer: usize) -> Option<usize> {
        let detail = inst
            .answers
            .get(answer)?
            .iter()
            .find_map(|&t| self.vocab.detail_index(t))?;
        inst.rationales
            .iter()
            .position(|r| r.iter().any(|&t| self.vocab.detail_index(t) == Some(detail)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads one instance per non-empty line.
pub fn load_jsonl(path: &Path) -> Result<Vec<Instance>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        inst.validate(None)
            .map_err(|(field, message)| DataError::Validation {
                line: line_no,
                field,
                message,
            })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(instances: &[Instance], mut w: W) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_jsonl(instances: &[Instance], path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_jsonl(instances, BufWriter::new(file)).map_err(io_err(path))
}
