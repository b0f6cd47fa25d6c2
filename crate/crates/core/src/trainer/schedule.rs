use serde::{Deserialize, Serialize};

/// Quantity watched by the scheduler or by early stopping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValMap,
    ValMiou,
}

impl Monitor {
    pub fn maximize(self) -> bool {
        !matches!(self, Monitor::ValLoss)
    }

    fn improves(self, value: f64, best: Option<f64>) -> bool {
        match best {
            None => value.is_finite(),
            Some(b) if self.maximize() => value > b,
            Some(b) => value < b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub monitor: Monitor,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            monitor: Monitor::ValLoss,
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub monitor: Monitor,
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            monitor: Monitor::ValMap,
            patience: 15,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored value has
/// not improved for more than `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, initial_lr: f64) -> Self {
        Self {
            config,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch and returns the learning rate for the next.
    pub fn step(&mut self, value: f64) -> f64 {
        if self.config.monitor.improves(value, self.best) {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.config.patience {
                let reduced = (self.lr * self.config.factor).max(self.config.min_lr);
                if reduced < self.lr {
                    log::info!("reducing learning rate {:.3e} -> {:.3e}", self.lr, reduced);
                }
                self.lr = reduced;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to improve on the best
/// value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub config: EarlyStopConfig,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(config: EarlyStopConfig) -> Self {
        Self {
            config,
            best: None,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, epoch: usize, value: f64) -> StopDecision {
        if self.config.monitor.improves(value, self.best) {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}
