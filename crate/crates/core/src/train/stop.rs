use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopConfig {
    /// Epochs without a significant improvement tolerated before stopping.
    pub patience: usize,
    /// An epoch is significant iff `metric ≥ best·(1 + min_relative_improvement)`.
    pub min_relative_improvement: f64,
}

impl Default for StopConfig {
    fn default() -> Self {
        StopConfig {
            patience: 50,
            min_relative_improvement: 0.005,
        }
    }
}

impl StopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_relative_improvement >= 0.0 && self.min_relative_improvement.is_finite()) {
            return Err(Error::InvalidConfig(vec![format!(
                "min_relative_improvement {} must be a non-negative number",
                self.min_relative_improvement
            )]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopState {
    pub config: StopConfig,
    pub best_metric: Option<f64>,
    pub epochs_since_significant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub significant: bool,
    pub stop: bool,
}

impl StopState {
    pub fn new(config: StopConfig) -> Self {
        StopState {
            config,
            best_metric: None,
            epochs_since_significant: 0,
        }
    }

    /// Feeds one epoch's validation metric.
    pub fn update(&mut self, metric: f64) -> StopDecision {
        let significant = match self.best_metric {
            None => true,
            Some(best) => metric >= best * (1.0 + self.config.min_relative_improvement),
        };
        if significant {
            self.best_metric = Some(metric);
            self.epochs_since_significant = 0;
        } else {
            self.epochs_since_significant += 1;
        }
        StopDecision {
            significant,
            stop: self.epochs_since_significant > self.config.patience,
        }
    }
}

/// Replays a metric history; returns the 0-based epoch at which training
/// stops, or `None` if it would continue.
pub fn should_stop(history: &[f64], config: StopConfig) -> Option<usize> {
    let mut s = StopState::new(config);
    history.iter().position(|&m| s.update(m).stop)
}
