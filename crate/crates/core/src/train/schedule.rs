/// Learning-rate cuts on validation-loss plateaus.
///
/// An epoch counts as an improvement when the loss beats the best so far by
/// at least `threshold`. After `patience` consecutive epochs without one,
/// the rate is multiplied by `factor`, and the following `cooldown` epochs
/// are not counted.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub cooldown: usize,
    best: f64,
    bad_epochs: usize,
    cooldown_left: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            threshold: 1e-4,
            cooldown: 1,
            best: f64::INFINITY,
            bad_epochs: 0,
            cooldown_left: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the multiplier to apply
    /// to the learning rate (1.0 when there is no cut).
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            self.bad_epochs = 0;
        }
        if self.patience > 0 && self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.cooldown_left = self.cooldown;
            self.factor
        } else {
            1.0
        }
    }
}

/// Replays a loss history and returns `(epoch index, multiplier)` for every cut.
pub fn plateau_events(history: &[f64], factor: f64, patience: usize) -> Vec<(usize, f64)> {
    let mut s = PlateauScheduler::new(factor, patience);
    history
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| {
            let m = s.step(l);
            (m != 1.0).then_some((i, m))
        })
        .collect()
}
