//! Synthetic trainer with analytically known learning curves.
//!
//! Every training regime (sampling strategy, clip length, learning rate)
//! follows an exponential-family curve observed with Gaussian noise. When a
//! lineage enters a new regime the curve is re-anchored on the metric it
//! inherits:
//!
//! * start `c = m (1 - dip)` where `m` is the noiseless metric of the parent
//!   checkpoint (`init_metric` for a fresh model) and `dip` may be overridden
//!   per regime,
//! * peak `P = max(c + headroom (C - c), c + MIN_RISE)` where `C` is the
//!   regime's ceiling,
//! * the peak is reached `knee[lr]` epochs into the regime, approached at
//!   rate `rate[lr]`, and a fraction `overfit` of the rise is carried by the
//!   concave quadratic term.
//!
//! A better inherited model therefore yields a better peak in the next
//! regime. Checkpoint refs spell out their lineage (`init/C0.0@12/C1.0@7`),
//! so a fresh simulator process can resume from refs it never issued.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvefit::{evaluate, exponential_with_knee, CurveFamily};
use crate::graph::Sampling;
use crate::protocol::{
    codes, Capabilities, LocalTransport, ProtocolError, TrainerClient, TrainerRequest, TrainerResponse, TrainerService,
    PROTOCOL_VERSION,
};

pub const INITIAL_CHECKPOINT: &str = "init";

/// Smallest rise a regime gets even when it cannot beat its start.
const MIN_RISE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ceilings {
    pub consecutive: f64,
    pub uniform: f64,
    /// Added per clip-length index; the last entry repeats.
    #[serde(default)]
    pub clip_gain: Vec<f64>,
    /// Added per learning-rate index; the last entry repeats.
    #[serde(default)]
    pub lr_gain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pace {
    /// Exponential rate per learning-rate index (negative).
    pub rate: Vec<f64>,
    /// Epochs from regime entry to the peak, per learning-rate index.
    pub knee: Vec<f64>,
    /// Share of the rise carried by the quadratic term, in [0, 1).
    #[serde(default = "default_overfit")]
    pub overfit: f64,
}

fn default_overfit() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeilingOverride {
    pub sampling: Sampling,
    pub clip_len_idx: usize,
    pub lr_idx: usize,
    pub ceiling: f64,
    /// Replaces the global dip on entry to this regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dip: Option<f64>,
}

/// Dynamics table loaded from a TOML scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Standard deviation of the observation noise.
    pub sigma: f64,
    pub init_metric: f64,
    pub headroom: f64,
    #[serde(default)]
    pub dip: f64,
    pub ceiling: Ceilings,
    pub pace: Pace,
    #[serde(default, rename = "override")]
    pub overrides: Vec<CeilingOverride>,
}

fn pick(list: &[f64], idx: usize, fallback: f64) -> f64 {
    list.get(idx).or(list.last()).copied().unwrap_or(fallback)
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Built-in fixtures by name.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "kinetics-like" => include_str!("../scenarios/kinetics-like.toml"),
            "ssv-like" => include_str!("../scenarios/ssv-like.toml"),
            "skip-middle-clip" => include_str!("../scenarios/skip-middle-clip.toml"),
            _ => return None,
        };
        Some(Self::from_toml(text).expect("built-in scenario is valid"))
    }

    pub const BUILTIN: [&'static str; 3] = ["kinetics-like", "ssv-like", "skip-middle-clip"];

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.init_metric) {
            return bad("init_metric must be in [0, 1)");
        }
        if !(self.headroom > 0.0 && self.headroom <= 1.0) {
            return bad("headroom must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.dip) {
            return bad("dip must be in [0, 1)");
        }
        if self.pace.rate.is_empty() || self.pace.rate.iter().any(|r| r.is_nan() || *r >= 0.0) {
            return bad("pace.rate must be a non-empty list of negative rates");
        }
        if self.pace.knee.is_empty() || self.pace.knee.iter().any(|k| k.is_nan() || *k <= 0.0) {
            return bad("pace.knee must be a non-empty list of positive epochs");
        }
        if !(0.0..1.0).contains(&self.pace.overfit) {
            return bad("pace.overfit must be in [0, 1)");
        }
        if self.overrides.iter().any(|o| o.dip.is_some_and(|d| !(0.0..1.0).contains(&d))) {
            return bad("override dip must be in [0, 1)");
        }
        Ok(())
    }

    fn override_for(&self, regime: Regime) -> Option<&CeilingOverride> {
        self.overrides.iter().find(|o| {
            o.sampling == regime.sampling && o.clip_len_idx == regime.clip_len_idx && o.lr_idx == regime.lr_idx
        })
    }

    pub fn dip_for(&self, regime: Regime) -> f64 {
        self.override_for(regime).and_then(|o| o.dip).unwrap_or(self.dip)
    }

    pub fn ceiling_for(&self, regime: Regime) -> f64 {
        if let Some(o) = self.override_for(regime) {
            return o.ceiling;
        }
        let base = match regime.sampling {
            Sampling::Consecutive => self.ceiling.consecutive,
            Sampling::Uniform => self.ceiling.uniform,
        };
        base + pick(&self.ceiling.clip_gain, regime.clip_len_idx, 0.0) + pick(&self.ceiling.lr_gain, regime.lr_idx, 0.0)
    }

    /// True curve of `regime` for a model entering it with metric `inherited`.
    pub fn alpha_true(&self, regime: Regime, inherited: f64) -> [f64; 5] {
        let start = inherited * (1.0 - self.dip_for(regime));
        let ceiling = self.ceiling_for(regime);
        let peak = (start + self.headroom * (ceiling - start)).max(start + MIN_RISE);
        let rate = pick(&self.pace.rate, regime.lr_idx, -0.1);
        let knee = pick(&self.pace.knee, regime.lr_idx, 20.0);
        let rise = peak - start;
        let curvature = (self.pace.overfit * rise / (knee * knee)).max(1e-8);
        // value of the saturating part at the knee per unit gain, once the
        // linear term is fixed by f'(knee) = 0
        let e = (rate * knee).exp();
        let unit = 1.0 - e + rate * knee * e;
        let gain = (rise - curvature * knee * knee) / unit;
        exponential_with_knee(start, gain.max(1e-6), rate, curvature, knee)
    }
}

/// Hyper-parameter regime a lineage segment trains under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Regime {
    pub sampling: Sampling,
    pub clip_len_idx: usize,
    pub lr_idx: usize,
}

/// Path from the initial model to a checkpoint: regimes and epochs spent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Lineage {
    pub segments: Vec<(Regime, u32)>,
}

impl Lineage {
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split('/');
        if parts.next()? != INITIAL_CHECKPOINT {
            return None;
        }
        let mut segments = Vec::new();
        for part in parts {
            let (regime, epochs) = part.split_once('@')?;
            let mut chars = regime.chars();
            let sampling = match chars.next()? {
                'C' => Sampling::Consecutive,
                'U' => Sampling::Uniform,
                _ => return None,
            };
            let (c, r) = chars.as_str().split_once('.')?;
            let epochs: u32 = epochs.parse().ok()?;
            if epochs == 0 {
                return None;
            }
            segments.push((
                Regime {
                    sampling,
                    clip_len_idx: c.parse().ok()?,
                    lr_idx: r.parse().ok()?,
                },
                epochs,
            ));
        }
        if segments.windows(2).any(|w| w[0].0 == w[1].0) {
            return None;
        }
        Some(Lineage { segments })
    }

    /// One more epoch under `regime`.
    pub fn extend(&self, regime: Regime) -> Lineage {
        let mut next = self.clone();
        match next.segments.last_mut() {
            Some((last, n)) if *last == regime => *n += 1,
            _ => next.segments.push((regime, 1)),
        }
        next
    }

    pub fn epochs_in_current_regime(&self) -> u32 {
        self.segments.last().map_or(0, |s| s.1)
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(INITIAL_CHECKPOINT)?;
        for (r, n) in &self.segments {
            let s = match r.sampling {
                Sampling::Consecutive => 'C',
                Sampling::Uniform => 'U',
            };
            write!(f, "/{s}{}.{}@{n}", r.clip_len_idx, r.lr_idx)?;
        }
        Ok(())
    }
}

/// Scenario plus noise seed: the full ground truth of a simulated run.
#[derive(Debug, Clone)]
pub struct SimDynamics {
    pub scenario: Scenario,
    pub seed: u64,
}

fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SimDynamics {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        SimDynamics { scenario, seed }
    }

    /// Noiseless metric of the model at the end of `lineage`.
    pub fn true_metric(&self, lineage: &Lineage) -> f64 {
        let mut metric = self.scenario.init_metric;
        for &(regime, epochs) in &lineage.segments {
            let alpha = self.scenario.alpha_true(regime, metric);
            metric = evaluate(CurveFamily::Exponential, &alpha, epochs as f64)
                .expect("five parameters")
                .clamp(0.0, 1.0);
        }
        metric
    }

    /// True curve of the lineage's current regime, in epochs since entry.
    pub fn current_alpha(&self, lineage: &Lineage) -> Option<[f64; 5]> {
        let (regime, _) = *lineage.segments.last()?;
        let parent = Lineage {
            segments: lineage.segments[..lineage.segments.len() - 1].to_vec(),
        };
        Some(self.scenario.alpha_true(regime, self.true_metric(&parent)))
    }

    /// Observed metric: true value plus seeded noise, clamped to [0, 1].
    pub fn observed_metric(&self, lineage: &Lineage) -> f64 {
        let truth = self.true_metric(lineage);
        if self.scenario.sigma == 0.0 {
            return truth;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, &lineage.to_string()));
        let noise = Normal::new(0.0, self.scenario.sigma).expect("finite sigma");
        (truth + noise.sample(&mut rng)).clamp(0.0, 1.0)
    }
}

/// Protocol-speaking simulator.
#[derive(Debug, Clone)]
pub struct SimTrainer {
    scenario: Scenario,
    dynamics: Option<SimDynamics>,
    released: HashSet<String>,
    issued: Vec<String>,
    epochs_trained: u64,
}

impl SimTrainer {
    pub fn new(scenario: Scenario) -> Self {
        SimTrainer {
            scenario,
            dynamics: None,
            released: HashSet::new(),
            issued: Vec::new(),
            epochs_trained: 0,
        }
    }

    pub fn dynamics(&self) -> Option<&SimDynamics> {
        self.dynamics.as_ref()
    }

    /// Every checkpoint ref handed out, in order.
    pub fn issued(&self) -> &[String] {
        &self.issued
    }

    pub fn epochs_trained(&self) -> u64 {
        self.epochs_trained
    }

    fn lookup(&self, checkpoint_ref: &str) -> Result<Lineage, TrainerResponse> {
        if self.released.contains(checkpoint_ref) {
            return Err(unknown(checkpoint_ref));
        }
        Lineage::parse(checkpoint_ref).ok_or_else(|| unknown(checkpoint_ref))
    }
}

fn unknown(checkpoint_ref: &str) -> TrainerResponse {
    TrainerResponse::error(codes::UNKNOWN_CHECKPOINT, format!("unknown checkpoint `{checkpoint_ref}`"))
}

impl TrainerService for SimTrainer {
    fn handle(&mut self, request: &TrainerRequest) -> TrainerResponse {
        if let TrainerRequest::Init { seed, .. } = request {
            self.dynamics = Some(SimDynamics::new(self.scenario.clone(), *seed));
            self.released.clear();
            return TrainerResponse::Ready {
                capabilities: Capabilities {
                    name: "optplan-sim".into(),
                    protocol_version: PROTOCOL_VERSION,
                    initial_checkpoint: INITIAL_CHECKPOINT.into(),
                },
            };
        }
        if let TrainerRequest::Shutdown {} = request {
            return TrainerResponse::Goodbye {};
        }
        let Some(dynamics) = self.dynamics.as_ref() else {
            return TrainerResponse::error(codes::NOT_INITIALIZED, "send init first");
        };
        match request {
            TrainerRequest::TrainEpoch {
                checkpoint_ref,
                hyperparams,
                epoch_index,
            } => {
                let lineage = match self.lookup(checkpoint_ref) {
                    Ok(l) => l,
                    Err(e) => return e,
                };
                let regime = Regime {
                    sampling: hyperparams.sampling,
                    clip_len_idx: hyperparams.clip_len_idx,
                    lr_idx: hyperparams.lr_idx,
                };
                let next = lineage.extend(regime);
                if next.epochs_in_current_regime() != *epoch_index {
                    return TrainerResponse::error(
                        codes::INVALID_HYPERPARAMS,
                        format!(
                            "epoch_index {epoch_index} but checkpoint is at regime epoch {}",
                            next.epochs_in_current_regime() - 1
                        ),
                    );
                }
                let metric = dynamics.observed_metric(&next);
                let fresh = next.to_string();
                self.released.remove(&fresh);
                self.issued.push(fresh.clone());
                self.epochs_trained += 1;
                TrainerResponse::Trained {
                    checkpoint_ref: fresh,
                    metric,
                }
            }
            TrainerRequest::Evaluate { checkpoint_ref } => match self.lookup(checkpoint_ref) {
                Ok(l) => TrainerResponse::Evaluated {
                    metric: dynamics.observed_metric(&l),
                },
                Err(e) => e,
            },
            TrainerRequest::ReleaseCheckpoint { checkpoint_ref } => {
                if checkpoint_ref == INITIAL_CHECKPOINT {
                    return TrainerResponse::Released {};
                }
                match self.lookup(checkpoint_ref) {
                    Ok(_) => {
                        self.released.insert(checkpoint_ref.clone());
                        TrainerResponse::Released {}
                    }
                    Err(e) => e,
                }
            }
            TrainerRequest::Init { .. } | TrainerRequest::Shutdown {} => unreachable!("handled above"),
        }
    }
}

/// In-process simulator behind a protocol client, already initialized.
pub fn connect_local(
    scenario: &Scenario,
    run_id: &str,
    seed: u64,
) -> Result<TrainerClient<LocalTransport<SimTrainer>>, ProtocolError> {
    let mut client = TrainerClient::new(LocalTransport::new(SimTrainer::new(scenario.clone())));
    client.init(run_id, seed)?;
    Ok(client)
}

/// Built-in scenarios by name.
pub fn builtin_scenarios() -> BTreeMap<&'static str, Scenario> {
    Scenario::BUILTIN
        .iter()
        .map(|n| (*n, Scenario::builtin(n).expect("listed scenario exists")))
        .collect()
}
