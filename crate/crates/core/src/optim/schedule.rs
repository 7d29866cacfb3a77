use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Epochs without improvement before the rate is cut.
    pub patience: usize,
    /// An epoch improves only if the metric drops by more than this.
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 3,
            min_delta: 1e-4,
            min_lr: 1e-5,
        }
    }
}

/// Reduce-on-plateau for a metric where lower is better (validation error).
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    config: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    triggers: usize,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, config: PlateauConfig) -> Result<Self> {
        if !(config.factor > 0.0 && config.factor < 1.0) || config.patience == 0 || !(config.min_lr >= 0.0) {
            return Err(Error::Config(format!("invalid plateau schedule {config:?}")));
        }
        Ok(PlateauSchedule {
            config,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
            triggers: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn triggers(&self) -> usize {
        self.triggers
    }

    /// Records one epoch's metric and returns the rate for the next epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(best) if metric >= best - self.config.min_delta => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.config.patience {
                    self.bad_epochs = 0;
                    // A rate within rounding of the floor counts as at the floor.
                    if self.lr > self.config.min_lr * (1.0 + 1e-9) {
                        self.lr = (self.lr / self.config.factor.recip()).max(self.config.min_lr);
                        self.triggers += 1;
                    }
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Rate in effect after each epoch of `history`.
pub fn schedule_lrs(initial_lr: f64, config: PlateauConfig, history: &[f64]) -> Result<Vec<f64>> {
    let mut s = PlateauSchedule::new(initial_lr, config)?;
    Ok(history.iter().map(|&m| s.observe(m)).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn distinct(lrs: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = vec![0.01];
        for &l in lrs {
            if l != *out.last().unwrap() {
                out.push(l);
            }
        }
        out
    }

    #[test]
    fn improving_history_keeps_the_rate() {
        let lrs = schedule_lrs(0.01, PlateauConfig::default(), &[0.9, 0.8, 0.7, 0.6, 0.5, 0.4]).unwrap();
        assert!(lrs.iter().all(|&l| l == 0.01));
    }

    #[test]
    fn flat_history_of_patience_plus_one_triggers_once() {
        let lrs = schedule_lrs(0.01, PlateauConfig::default(), &[0.5; 4]).unwrap();
        assert_eq!(&lrs[..3], &[0.01; 3]);
        assert!((lrs[3] - 0.001).abs() < 1e-18);
    }

    #[test]
    fn two_plateaus_give_two_cuts() {
        let history = [0.9, 0.8, 0.8, 0.8, 0.8, 0.5, 0.4, 0.4, 0.4, 0.4, 0.3];
        let lrs = schedule_lrs(0.01, PlateauConfig::default(), &history).unwrap();
        let seq = distinct(&lrs);
        assert_eq!(seq.len(), 3);
        for (got, want) in seq.iter().zip([0.01, 0.001, 0.0001]) {
            assert!((got - want).abs() < 1e-18, "{seq:?}");
        }
    }

    #[test]
    fn improvements_below_min_delta_do_not_count() {
        let lrs = schedule_lrs(0.01, PlateauConfig::default(), &[0.5, 0.49995, 0.49992, 0.49991]).unwrap();
        assert!((lrs[3] - 0.001).abs() < 1e-18);
    }

    #[test]
    fn never_below_min_lr() {
        let lrs = schedule_lrs(0.01, PlateauConfig::default(), &[1.0; 40]).unwrap();
        assert!((lrs.last().unwrap() - 1e-5).abs() < 1e-18);
        assert!(lrs.iter().all(|&l| l >= 1e-5));
    }

    fn oracle_triggers(history: &[f64], patience: usize, min_delta: f64, cuts_available: usize) -> usize {
        let mut best = f64::INFINITY;
        let mut bad = 0;
        let mut triggers = 0;
        for &m in history {
            if m < best - min_delta {
                best = m;
                bad = 0;
            } else {
                bad += 1;
                if bad == patience {
                    bad = 0;
                    if triggers < cuts_available {
                        triggers += 1;
                    }
                }
            }
        }
        triggers
    }

    proptest! {
        #[test]
        fn monotone_and_matches_scripted_oracle(history in proptest::collection::vec(0u8..6, 1..60)) {
            let h: Vec<f64> = history.iter().map(|&v| v as f64 / 10.0).collect();
            let mut s = PlateauSchedule::new(0.01, PlateauConfig::default()).unwrap();
            let mut prev = s.lr();
            for &m in &h {
                let lr = s.observe(m);
                prop_assert!(lr <= prev);
                prev = lr;
            }
            // 0.01 → 1e-3 → 1e-4 → 1e-5 allows three cuts.
            prop_assert_eq!(s.triggers(), oracle_triggers(&h, 3, 1e-4, 3));
        }
    }
}
