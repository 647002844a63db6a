//! Accuracy-first checkpointing and patience-based early stopping.

use serde::{Deserialize, Serialize};

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointDecision {
    pub save: bool,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Number of epochs evaluated so far (epochs are numbered from 1).
    pub epoch: usize,
    /// `None` until the first epoch is evaluated.
    pub best_val_acc: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    pub patience: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainerState {
    pub fn new(patience: usize) -> Self {
        TrainerState {
            epoch: 0,
            best_val_acc: None,
            best_epoch: 0,
            epochs_since_improve: 0,
            patience,
            history: Vec::new(),
        }
    }

    /// Records one epoch's validation accuracy. A checkpoint is due only on a strict
    /// improvement; validation loss is never consulted.
    pub fn should_checkpoint(&mut self, epoch_val_acc: f64) -> CheckpointDecision {
        self.epoch += 1;
        let improved = self.best_val_acc.is_none_or(|best| epoch_val_acc > best);
        if improved {
            self.best_val_acc = Some(epoch_val_acc);
            self.best_epoch = self.epoch;
            self.epochs_since_improve = 0;
        } else {
            self.epochs_since_improve += 1;
        }
        CheckpointDecision { save: improved, stop: self.epochs_since_improve >= self.patience }
    }
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

/// History as CSV with six decimals; an empty history yields the header alone.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
        ));
    }
    out
}

pub fn should_checkpoint(state: &mut TrainerState, epoch_val_acc: f64) -> CheckpointDecision {
    state.should_checkpoint(epoch_val_acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(accs: &[f64], patience: usize) -> (Vec<usize>, Option<usize>) {
        let mut state = TrainerState::new(patience);
        let mut saves = Vec::new();
        for (i, &a) in accs.iter().enumerate() {
            let d = state.should_checkpoint(a);
            if d.save {
                saves.push(i + 1);
            }
            if d.stop {
                return (saves, Some(i + 1));
            }
        }
        (saves, None)
    }

    #[test]
    fn accuracy_not_loss_drives_saves() {
        // val loss would be (1.2, 1.1, 0.9, 1.3): a loss policy saves at epoch 3.
        let (saves, stop) = run(&[0.48, 0.52, 0.50, 0.55], 15);
        assert_eq!(saves, vec![1, 2, 4]);
        assert_eq!(stop, None);
    }

    #[test]
    fn constant_accuracy_stops_after_patience() {
        let (saves, stop) = run(&[0.7; 10], 3);
        assert_eq!(saves, vec![1]);
        assert_eq!(stop, Some(4));
    }

    #[test]
    fn increasing_accuracy_saves_every_epoch() {
        let accs: Vec<f64> = (0..12).map(|i| 0.5 + 0.01 * i as f64).collect();
        let (saves, stop) = run(&accs, 1);
        assert_eq!(saves, (1..=12).collect::<Vec<_>>());
        assert_eq!(stop, None);
    }

    #[test]
    fn ties_do_not_checkpoint() {
        let (saves, _) = run(&[0.6, 0.6, 0.61], 10);
        assert_eq!(saves, vec![1, 3]);
    }

    #[test]
    fn zero_accuracy_first_epoch_still_saves() {
        let (saves, stop) = run(&[0.0], 1);
        assert_eq!(saves, vec![1]);
        assert_eq!(stop, None);
    }
}
