//! Curriculum horizon, plateau learning-rate decay and early stopping.

use teddn_autograd::Float;

use crate::train::TrainConfig;

/// 1 during warm-up, then one more step every `curriculum_step` epochs,
/// capped at `max_horizon`.
pub fn curriculum_horizon(epoch: usize, cfg: &TrainConfig) -> usize {
    if epoch < cfg.warmup_epochs {
        return 1.min(cfg.max_horizon);
    }
    let grown = 1 + (epoch - cfg.warmup_epochs) / cfg.curriculum_step.max(1);
    grown.min(cfg.max_horizon)
}

/// Halves (by `lr_decay`) after `lr_patience` consecutive epochs without a
/// new best validation MAE, never going below `min_lr`.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: Float,
    best: f64,
    stale: usize,
    decay: Float,
    patience: usize,
    min_lr: Float,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: cfg.lr,
            best: f64::INFINITY,
            stale: 0,
            decay: cfg.lr_decay,
            patience: cfg.lr_patience,
            min_lr: cfg.min_lr,
        }
    }

    pub fn lr(&self) -> Float {
        self.lr
    }

    /// Records one validation MAE and returns the rate for the next epoch.
    pub fn observe(&mut self, val_mae: f64) -> Float {
        if val_mae < self.best {
            self.best = val_mae;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.decay).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate in effect at `epoch` given the validation history of the
/// preceding epochs.
pub fn lr_schedule(epoch: usize, val_history: &[f64], cfg: &TrainConfig) -> Float {
    let mut s = PlateauSchedule::new(cfg);
    for &v in val_history.iter().take(epoch) {
        s.observe(v);
    }
    s.lr()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }

    /// Stops once `patience` epochs have passed since the best one.
    pub fn observe(&mut self, epoch: usize, val_mae: f64) -> StopDecision {
        if val_mae < self.best {
            self.best = val_mae;
            self.best_epoch = Some(epoch);
            return StopDecision::Improved;
        }
        let since = epoch - self.best_epoch.unwrap_or(0);
        if since >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_examples() {
        let cfg = TrainConfig::default();
        let h: Vec<usize> = [0, 29, 30, 33, 63, 500].iter().map(|&e| curriculum_horizon(e, &cfg)).collect();
        assert_eq!(h, vec![1, 1, 1, 2, 12, 12]);
        let mut prev = 0;
        for e in 0..200 {
            let h = curriculum_horizon(e, &cfg);
            assert!(h >= prev);
            prev = h;
        }
        assert_eq!(prev, 12);
    }

    #[test]
    fn lr_examples() {
        let cfg = TrainConfig::default();
        let improving: Vec<f64> = (0..40).map(|i| 100.0 - i as f64).collect();
        assert_eq!(lr_schedule(40, &improving, &cfg), 0.002);

        let flat = vec![5.0; 11];
        assert_eq!(lr_schedule(10, &flat, &cfg), 0.002);
        assert_eq!(lr_schedule(11, &flat, &cfg), 0.001);

        let long = vec![5.0; 2000];
        assert_eq!(lr_schedule(2000, &long, &cfg), 1e-6);
    }

    #[test]
    fn early_stopping_halts_at_best_plus_patience() {
        let mut es = EarlyStopping::new(100);
        assert_eq!(es.observe(0, 10.0), StopDecision::Improved);
        assert_eq!(es.observe(1, 9.0), StopDecision::Improved);
        let mut stopped = None;
        for e in 2..1000 {
            if es.observe(e, 9.5) == StopDecision::Stop {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(stopped, Some(101));
        assert_eq!(es.best(), Some((1, 9.0)));
    }
}
