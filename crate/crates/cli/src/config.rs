//! Experiment config file for `optplan plan`.
//!
//! ```toml
//! run_id = "kinetics-small"
//! seed = 7
//! retries = 1
//! ledger = "runs/kinetics-small.ledger.jsonl"
//! plan_out = "runs/kinetics-small.plan.json"
//!
//! [graph]
//! clip_lens = [8, 16, 32]
//! learning_rates = [0.1, 0.01, 0.001]
//! strategies = ["consecutive", "uniform"]
//! mode = "basic"
//!
//! [graph.extra]
//! dropout = 0.5
//!
//! [stopper]
//! delay = 10
//! family = "exponential"
//! horizon_cap = 200
//!
//! [trainer]
//! command = ["@self", "simtrainer", "--scenario", "kinetics-like"]
//! timeout_secs = 3600
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! `@self` as the first word of `trainer.command` is replaced by the running
//! `optplan` executable.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use optplan_core::curvefit::CurveFamily;
use optplan_core::{GraphSpec, StopperConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retries: u32,
    pub ledger: PathBuf,
    pub plan_out: PathBuf,
    pub graph: GraphSpec,
    #[serde(default)]
    pub stopper: StopperSection,
    pub trainer: TrainerSection,
}

/// Unset keys take the defaults for the chosen family.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopperSection {
    pub delay: Option<u32>,
    pub min_points: Option<usize>,
    pub family: Option<CurveFamily>,
    pub horizon_cap: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    /// Launch command, one process per connection.
    pub command: Option<Vec<String>>,
    /// Address of an already running trainer server.
    pub tcp: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    3600
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainerTarget {
    Command(Vec<String>),
    Tcp(String),
}

impl StopperSection {
    pub fn resolve(&self) -> StopperConfig {
        let mut cfg = StopperConfig::for_family(self.family.unwrap_or(CurveFamily::Exponential));
        if let Some(d) = self.delay {
            cfg.delay = d;
        }
        if let Some(m) = self.min_points {
            cfg.min_points = m;
        }
        if let Some(h) = self.horizon_cap {
            cfg.horizon_cap = h;
        }
        cfg
    }
}

impl TrainerSection {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn target(&self) -> Result<TrainerTarget> {
        match (&self.command, &self.tcp) {
            (Some(cmd), None) => {
                if cmd.is_empty() {
                    bail!("trainer.command is empty");
                }
                let mut cmd = cmd.clone();
                if cmd[0] == "@self" {
                    let exe = std::env::current_exe().context("locating the optplan executable")?;
                    cmd[0] = exe.to_string_lossy().into_owned();
                }
                Ok(TrainerTarget::Command(cmd))
            }
            (None, Some(addr)) => Ok(TrainerTarget::Tcp(addr.clone())),
            _ => bail!("[trainer] needs exactly one of `command` or `tcp`"),
        }
    }
}

impl PlanConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: PlanConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.ledger = base.join(&cfg.ledger);
        cfg.plan_out = base.join(&cfg.plan_out);
        if cfg.run_id.trim().is_empty() {
            bail!("run_id must not be empty");
        }
        cfg.stopper.resolve().validate()?;
        cfg.trainer.target()?;
        Ok(cfg)
    }
}
