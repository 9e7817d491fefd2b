use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch counts `e_0..e_n` of the `n + 1` training stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageSchedule {
    epochs: Vec<usize>,
}

impl StageSchedule {
    pub fn new(epochs: Vec<usize>) -> Result<Self> {
        if epochs.is_empty() {
            return Err(Error::Config("a schedule needs at least one stage".into()));
        }
        if let Some(c) = epochs.iter().position(|&e| e == 0) {
            return Err(Error::Config(format!("stage {c} has zero epochs ({epochs:?})")));
        }
        Ok(StageSchedule { epochs })
    }

    /// `total` epochs over `n + 1` stages: the first `n` get
    /// `⌊total/(n+1)⌋` each, the last gets the rest.
    pub fn split(total: usize, n: usize) -> Result<Self> {
        let each = total / (n + 1);
        let mut epochs = vec![each; n + 1];
        epochs[n] = total - each * n;
        Self::new(epochs)
    }

    /// Recomposition count.
    pub fn n(&self) -> usize {
        self.epochs.len() - 1
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }

    /// Stage of global epoch `epoch` and the epoch's index within it.
    pub fn locate(&self, epoch: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (c, &e) in self.epochs.iter().enumerate() {
            if epoch < start + e {
                return Some((c, epoch - start));
            }
            start += e;
        }
        None
    }
}

/// Base learning rate shared by every stage.
pub fn base_lr(max_lr: f64) -> f64 {
    max_lr / 25.0
}

/// Peak of stage `stage`: `max_lr / 2^stage`.
pub fn stage_peak(max_lr: f64, stage: usize) -> f64 {
    max_lr / 2f64.powi(stage as i32)
}

/// Learning rate at optimizer step `step`: one triangle per stage rising
/// linearly from the base to the stage peak over the first half of the
/// stage's steps and falling back over the second half.
///
/// `step` may equal the total step count, which evaluates the end of the
/// last stage.
pub fn lr_at(step: usize, schedule: &StageSchedule, steps_per_epoch: usize, max_lr: f64) -> Result<f64> {
    if steps_per_epoch == 0 {
        return Err(Error::Contract("steps per epoch must be positive".into()));
    }
    let horizon = schedule.total_epochs() * steps_per_epoch;
    if step > horizon {
        return Err(Error::Contract(format!("step {step} beyond the {horizon}-step horizon")));
    }
    let mut start = 0;
    let last = schedule.n();
    for (c, &e) in schedule.epochs().iter().enumerate() {
        let len = e * steps_per_epoch;
        if step < start + len || c == last {
            let x = (step - start) as f64 / (len as f64 / 2.0);
            let w = 1.0 - (x - 1.0).abs();
            return Ok(w * stage_peak(max_lr, c) + (1.0 - w) * base_lr(max_lr));
        }
        start += len;
    }
    unreachable!("schedule has at least one stage")
}
