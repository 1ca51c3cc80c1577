use std::fmt::Write as _;

/// Column header of the metrics CSV.
pub const CSV_HEADER: &str = "epoch,q_a_acc,qa_r_acc,q_ar_acc,answer_loss,rationale_loss,lr";

/// Validation results after one epoch (epoch 0 is the untrained model).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub q_a_acc: f64,
    pub qa_r_acc: f64,
    pub q_ar_acc: f64,
    pub answer_loss: f64,
    pub rationale_loss: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.q_a_acc,
            self.qa_r_acc,
            self.q_ar_acc,
            self.answer_loss,
            self.rationale_loss,
            self.lr
        )
    }
}

/// Header plus one line per row, newline terminated.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Predictions for one instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub answer_label: usize,
    pub rationale_label: usize,
    pub answer: usize,
    /// Rationale chosen with the gold answer given.
    pub rationale_given_gold: usize,
    /// Rationale chosen end to end, conditioned on the model's own answer.
    pub rationale_end_to_end: usize,
}

impl Prediction {
    pub fn answer_correct(&self) -> bool {
        self.answer == self.answer_label
    }

    pub fn rationale_correct(&self) -> bool {
        self.rationale_given_gold == self.rationale_label
    }

    /// Counted for Q→AR: the answer is right, and the rationale is right
    /// both end to end and with the gold answer.
    pub fn joint_correct(&self) -> bool {
        self.answer_correct()
            && self.rationale_correct()
            && self.rationale_end_to_end == self.rationale_label
    }
}

/// `(Q→A, QA→R, Q→AR)` accuracies; zeros for an empty set.
pub fn accuracies(preds: &[Prediction]) -> (f64, f64, f64) {
    if preds.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = preds.len() as f64;
    let frac = |f: fn(&Prediction) -> bool| preds.iter().filter(|p| f(p)).count() as f64 / n;
    (
        frac(Prediction::answer_correct),
        frac(Prediction::rationale_correct),
        frac(Prediction::joint_correct),
    )
}
