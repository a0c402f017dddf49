//! Adaptive stopping of a single transition.
//!
//! After every epoch the whole metric history is refit and the knee `t*` of
//! the fitted curve (searched on `[0, current epoch]`) is re-estimated.
//! Training stops once the current epoch exceeds `t* + delay`, and the
//! checkpoint at `t*` is kept.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvefit::{self, CurveError, CurveFamily, CurveFit, FitOptions, ObservationSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopperConfig {
    /// Extra epochs allowed past the knee estimate.
    pub delay: u32,
    /// Observations required before the first fit.
    pub min_points: usize,
    pub family: CurveFamily,
    /// Absolute epoch budget for one transition.
    pub horizon_cap: u32,
}

impl Default for StopperConfig {
    fn default() -> Self {
        StopperConfig::for_family(CurveFamily::Exponential)
    }
}

impl StopperConfig {
    pub fn for_family(family: CurveFamily) -> Self {
        StopperConfig {
            delay: 10,
            min_points: 6.max(family.n_params() + 1),
            family,
            horizon_cap: 200,
        }
    }

    pub fn validate(&self) -> Result<(), StopperError> {
        if self.delay < 1 {
            return Err(StopperError::Config("delay must be at least 1".into()));
        }
        if self.min_points < self.family.n_params() + 1 {
            return Err(StopperError::Config(format!(
                "min_points must be at least {} for {}",
                self.family.n_params() + 1,
                self.family
            )));
        }
        if self.horizon_cap < 1 {
            return Err(StopperError::Config("horizon_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StopperError {
    #[error("invalid stopper config: {0}")]
    Config(String),
    #[error("expected epoch {expected}, got {got}")]
    EpochOrder { expected: u32, got: u32 },
    #[error("metric {0} is not in [0, 1]")]
    MetricRange(f64),
    #[error("transition already stopped")]
    AlreadyStopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The epoch passed the knee estimate plus the delay.
    Knee,
    /// The epoch budget ran out first.
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub epoch: u32,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knee: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<CurveFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_warning: Option<String>,
}

impl StopDecision {
    pub fn is_stop(&self) -> bool {
        self.verdict == Verdict::Stop
    }
}

/// Streaming stop controller for one transition.
#[derive(Debug, Clone)]
pub struct Stopper {
    config: StopperConfig,
    series: ObservationSeries,
    warm: Option<Vec<f64>>,
    last_fit: Option<CurveFit>,
    stopped: bool,
}

impl Stopper {
    pub fn new(config: StopperConfig) -> Result<Self, StopperError> {
        config.validate()?;
        Ok(Stopper {
            config,
            series: ObservationSeries::default(),
            warm: None,
            last_fit: None,
            stopped: false,
        })
    }

    pub fn config(&self) -> &StopperConfig {
        &self.config
    }

    pub fn series(&self) -> &ObservationSeries {
        &self.series
    }

    /// Most recent successful fit.
    pub fn last_fit(&self) -> Option<&CurveFit> {
        self.last_fit.as_ref()
    }

    pub fn observe(&mut self, epoch: u32, metric: f64) -> Result<StopDecision, StopperError> {
        if self.stopped {
            return Err(StopperError::AlreadyStopped);
        }
        if let Some(last) = self.series.last_epoch() {
            if epoch != last + 1 {
                return Err(StopperError::EpochOrder { expected: last + 1, got: epoch });
            }
        }
        self.series.push(epoch, metric).map_err(|e| match e {
            CurveError::MetricRange(m, _) => StopperError::MetricRange(m),
            _ => StopperError::MetricRange(metric),
        })?;

        let mut decision = StopDecision {
            epoch,
            verdict: Verdict::Continue,
            reason: None,
            best_epoch: None,
            knee: None,
            fit: None,
            fit_warning: None,
        };

        if self.series.len() >= self.config.min_points {
            let opts = FitOptions {
                warm_start: self.warm.clone(),
                horizon: Some(epoch as f64),
                ..FitOptions::default()
            };
            match curvefit::fit_with(&self.series, self.config.family, &opts) {
                Ok(fit) if fit.r_square.is_none() => {
                    // A constant series carries no information about the knee.
                    self.warm = Some(fit.alpha.clone());
                    decision.fit_warning = Some("constant series, knee undefined".into());
                    decision.fit = Some(fit.clone());
                    self.last_fit = Some(fit);
                }
                Ok(fit) => {
                    self.warm = Some(fit.alpha.clone());
                    decision.knee = Some(fit.knee);
                    if epoch as f64 > fit.knee + self.config.delay as f64 {
                        decision.verdict = Verdict::Stop;
                        decision.reason = Some(StopReason::Knee);
                        decision.best_epoch = Some(self.clamp_to_observed(fit.knee));
                    }
                    decision.fit = Some(fit.clone());
                    self.last_fit = Some(fit);
                }
                Err(e) => {
                    log::debug!("fit failed at epoch {epoch}: {e}");
                    decision.fit_warning = Some(e.to_string());
                }
            }
        }

        if !decision.is_stop() && epoch >= self.config.horizon_cap {
            decision.verdict = Verdict::Stop;
            decision.reason = Some(StopReason::Budget);
            decision.best_epoch = self.series.argmax_epoch();
        }
        self.stopped = decision.is_stop();
        Ok(decision)
    }

    fn clamp_to_observed(&self, knee: f64) -> u32 {
        let first = self.series.first_epoch().unwrap_or(0) as f64;
        let last = self.series.last_epoch().unwrap_or(0) as f64;
        knee.round().clamp(first, last) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waits_for_min_points() {
        let mut s = Stopper::new(StopperConfig::default()).unwrap();
        for epoch in 1..=5 {
            let d = s.observe(epoch, 0.1 * epoch as f64).unwrap();
            assert_eq!(d.verdict, Verdict::Continue);
            assert!(d.fit.is_none());
        }
        let d = s.observe(6, 0.6).unwrap();
        assert!(d.fit.is_some());
    }

    #[test]
    fn rejects_gaps_and_bad_metrics() {
        let mut s = Stopper::new(StopperConfig::default()).unwrap();
        s.observe(1, 0.1).unwrap();
        assert!(matches!(s.observe(3, 0.1), Err(StopperError::EpochOrder { expected: 2, got: 3 })));
        assert!(matches!(s.observe(2, 1.5), Err(StopperError::MetricRange(_))));
    }

    #[test]
    fn flat_curve_runs_to_budget() {
        let cfg = StopperConfig {
            horizon_cap: 30,
            ..StopperConfig::default()
        };
        let mut s = Stopper::new(cfg).unwrap();
        let mut last = None;
        for epoch in 1..=30 {
            let d = s.observe(epoch, 0.5).unwrap();
            if epoch < 30 {
                assert_eq!(d.verdict, Verdict::Continue, "epoch {epoch}");
            }
            last = Some(d);
        }
        let d = last.unwrap();
        assert_eq!(d.reason, Some(StopReason::Budget));
        assert_eq!(d.best_epoch, Some(1));
        assert!(matches!(s.observe(31, 0.5), Err(StopperError::AlreadyStopped)));
    }

    #[test]
    fn config_validation() {
        let cfg = StopperConfig {
            min_points: 3,
            ..StopperConfig::default()
        };
        assert!(Stopper::new(cfg).is_err());
        let cfg = StopperConfig {
            delay: 0,
            ..StopperConfig::default()
        };
        assert!(Stopper::new(cfg).is_err());
        assert_eq!(StopperConfig::for_family(CurveFamily::MultiPower).min_points, 8);
    }
}
