//! Planning staged training schedules.
//!
//! A training run is split into states with fixed hyper-parameters. The
//! [`graph`] module enumerates which state changes are allowed, [`curvefit`]
//! and [`stopper`] decide how long each transition trains, and [`planner`]
//! runs the dynamic program that picks the best sequence of states. Trainers
//! are external processes speaking the line protocol in [`protocol`];
//! [`simtrainer`] is a synthetic one with known dynamics.

pub mod curvefit;
pub mod graph;
pub mod planner;
pub mod protocol;
pub mod simtrainer;
pub mod stopper;

pub use curvefit::{CurveError, CurveFamily, CurveFit, ObservationSeries};
pub use graph::{
    build_graph, GraphError, GraphMode, GraphSpec, HyperParams, Sampling, StateId, StateKind, TrainingState,
    TransitionGraph,
};
pub use planner::{OptimizationPlan, PlanError, PlanState, PlannerConfig, TransitionRecord};
pub use protocol::{ProtocolError, Trainer, TrainerClient, TrainerService, WireHyperParams};
pub use simtrainer::{Scenario, SimDynamics, SimTrainer};
pub use stopper::{StopDecision, StopReason, Stopper, StopperConfig, Verdict};
