//! Dynamic program over the transition graph.
//!
//! States are resolved in topological order. Every edge into a state is
//! explored by fine-tuning the source state's best checkpoint under the
//! target's hyper-parameters until the stopper fires; the state keeps the
//! predecessor whose transition scored best at its chosen epoch. The plan is
//! the back-traced path to the best final state.

pub mod ledger;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvefit::{CurveFit, ObservationSeries};
use crate::graph::{GraphSpec, Sampling, StateId, TransitionGraph};
use crate::protocol::{ProtocolError, Trainer, WireHyperParams};
use crate::stopper::{StopReason, Stopper, StopperConfig, StopperError};
pub use ledger::{Ledger, LedgerEntry, LedgerError, LedgerEvent};

/// Outcome of fine-tuning along one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from_id: StateId,
    pub to_id: StateId,
    pub epochs_trained: u32,
    pub chosen_epoch: u32,
    pub value: f64,
    pub stop_reason: StopReason,
    pub metric_trace: ObservationSeries,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<CurveFit>,
    pub checkpoint_ref: String,
}

/// Best way found into a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBest {
    pub value: f64,
    pub predecessor: StateId,
    /// Epochs spent on the winning hop.
    pub epochs: u32,
    /// Epochs along the whole winning path.
    pub cumulative_epochs: u64,
    pub checkpoint_ref: String,
}

/// Everything the dynamic program knows so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanState {
    pub best: BTreeMap<StateId, StateBest>,
    /// States resolved with no successful incoming transition.
    pub unreachable: BTreeSet<StateId>,
    pub explored: BTreeMap<(StateId, StateId), TransitionRecord>,
    pub failed: BTreeMap<(StateId, StateId), String>,
}

impl PlanState {
    pub fn is_resolved(&self, id: StateId) -> bool {
        id == StateId::INITIAL || self.best.contains_key(&id) || self.unreachable.contains(&id)
    }

    fn cumulative(&self, id: StateId) -> u64 {
        self.best.get(&id).map_or(0, |b| b.cumulative_epochs)
    }

    /// Picks the best explored transition into `to`.
    ///
    /// Higher value wins, then fewer cumulative epochs, then the lower
    /// predecessor id.
    pub fn select(&self, graph: &TransitionGraph, to: StateId) -> Option<StateBest> {
        graph
            .predecessors(to)
            .into_iter()
            .filter_map(|from| self.explored.get(&(from, to)))
            .map(|r| StateBest {
                value: r.value,
                predecessor: r.from_id,
                epochs: r.chosen_epoch,
                cumulative_epochs: self.cumulative(r.from_id) + r.chosen_epoch as u64,
                checkpoint_ref: r.checkpoint_ref.clone(),
            })
            .min_by(|a, b| {
                b.value
                    .total_cmp(&a.value)
                    .then(a.cumulative_epochs.cmp(&b.cumulative_epochs))
                    .then(a.predecessor.cmp(&b.predecessor))
            })
    }
}

/// The selected schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationPlan {
    pub path: Vec<StateId>,
    /// Epochs for each hop; one shorter than `path`.
    pub epochs: Vec<u32>,
    pub final_value: f64,
    pub winning_strategy: Sampling,
    pub final_checkpoint: String,
    /// Hyper-parameters of each non-initial state on the path.
    pub stages: Vec<WireHyperParams>,
}

impl OptimizationPlan {
    /// Deterministic pretty JSON, newline terminated.
    pub fn to_document(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("plan serializes");
        out.push('\n');
        out
    }

    pub fn total_epochs(&self) -> u64 {
        self.epochs.iter().map(|&e| e as u64).sum()
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no final state is reachable")]
    PlanningFailed,
    #[error("broken predecessor chain at {0}")]
    BrokenChain(StateId),
    #[error("{0} is not a final state")]
    NotFinal(StateId),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("ledger does not match this run: {0}")]
    LedgerMismatch(String),
    #[error("invalid stopper configuration: {0}")]
    Stopper(#[from] StopperError),
    #[error("invalid graph: {0}")]
    Graph(#[from] crate::graph::GraphError),
}

/// Failure while exploring one edge.
#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Trainer(#[from] ProtocolError),
    #[error("stopper rejected an observation: {0}")]
    Stopper(#[from] StopperError),
    #[error("{0} -> {1} is not an edge of the graph")]
    NotAnEdge(StateId, StateId),
}

impl ExploreError {
    /// Whether the trainer connection should be discarded.
    fn breaks_trainer(&self) -> bool {
        matches!(
            self,
            ExploreError::Trainer(
                ProtocolError::Io(_) | ProtocolError::ConnectionLost | ProtocolError::Timeout(_) | ProtocolError::Violation(_)
            )
        )
    }
}

/// Source of initialized trainer connections.
pub trait TrainerFactory: Sync {
    fn connect(&self) -> Result<Box<dyn Trainer>, ProtocolError>;
}

impl<F> TrainerFactory for F
where
    F: Fn() -> Result<Box<dyn Trainer>, ProtocolError> + Sync,
{
    fn connect(&self) -> Result<Box<dyn Trainer>, ProtocolError> {
        self()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub run_id: String,
    pub seed: u64,
    pub stopper: StopperConfig,
    pub workers: usize,
    /// Extra attempts per failed edge.
    pub retries: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            run_id: "run".into(),
            seed: 0,
            stopper: StopperConfig::default(),
            workers: 1,
            retries: 0,
        }
    }
}

/// Trains along `from -> to` from `from_checkpoint` until the stopper fires.
///
/// Every epoch's checkpoint is kept until the stop, then all but the chosen
/// one are released. `events` receives `EpochObserved` as training runs.
pub fn explore_transition(
    graph: &TransitionGraph,
    from: StateId,
    to: StateId,
    from_checkpoint: &str,
    trainer: &mut dyn Trainer,
    stopper_cfg: &StopperConfig,
    events: &mut dyn FnMut(LedgerEvent),
) -> Result<TransitionRecord, ExploreError> {
    if !graph.has_edge(from, to) {
        return Err(ExploreError::NotAnEdge(from, to));
    }
    let params = graph
        .state(to)
        .and_then(|s| s.params.as_ref())
        .ok_or(ExploreError::NotAnEdge(from, to))?;
    let hp = WireHyperParams::resolve(graph, params);
    let mut stopper = Stopper::new(stopper_cfg.clone())?;
    let mut refs: Vec<String> = Vec::new();
    let mut current = from_checkpoint.to_string();
    let mut epoch = 0u32;
    loop {
        epoch += 1;
        let (fresh, metric) = trainer.train_epoch(&current, &hp, epoch)?;
        let decision = stopper.observe(epoch, metric)?;
        refs.push(fresh.clone());
        current = fresh.clone();
        let stop = decision.is_stop();
        let best_epoch = decision.best_epoch;
        let reason = decision.reason;
        let fit = decision.fit.clone();
        events(LedgerEvent::EpochObserved {
            from,
            to,
            checkpoint_ref: fresh,
            metric,
            decision,
        });
        if !stop {
            continue;
        }
        let chosen = best_epoch.expect("stop decisions name an epoch");
        let keep = refs[(chosen - 1) as usize].clone();
        for (i, r) in refs.iter().enumerate() {
            if i + 1 != chosen as usize {
                trainer.release(r)?;
            }
        }
        let trace = stopper.series().clone();
        let value = trace.metric_at(chosen).expect("chosen epoch was observed");
        return Ok(TransitionRecord {
            from_id: from,
            to_id: to,
            epochs_trained: epoch,
            chosen_epoch: chosen,
            value,
            stop_reason: reason.expect("stop decisions carry a reason"),
            metric_trace: trace,
            fit: fit.or_else(|| stopper.last_fit().cloned()),
            checkpoint_ref: keep,
        });
    }
}

/// Back-traces the predecessor chain from `final_id`.
pub fn extract_path(
    graph: &TransitionGraph,
    state: &PlanState,
    final_id: StateId,
) -> Result<OptimizationPlan, PlanError> {
    let final_best = state.best.get(&final_id).ok_or(PlanError::BrokenChain(final_id))?;
    let mut path = vec![final_id];
    let mut epochs = Vec::new();
    let mut cur = final_id;
    while cur != StateId::INITIAL {
        let b = state.best.get(&cur).ok_or(PlanError::BrokenChain(cur))?;
        if !graph.has_edge(b.predecessor, cur) || path.len() > graph.states().len() {
            return Err(PlanError::BrokenChain(cur));
        }
        epochs.push(b.epochs);
        path.push(b.predecessor);
        cur = b.predecessor;
    }
    path.reverse();
    epochs.reverse();
    let stages: Vec<WireHyperParams> = path[1..]
        .iter()
        .map(|id| {
            let p = graph.state(*id).and_then(|s| s.params.as_ref()).expect("non-initial state");
            WireHyperParams::resolve(graph, p)
        })
        .collect();
    let winning_strategy = stages.last().map(|s| s.sampling).ok_or(PlanError::NotFinal(final_id))?;
    Ok(OptimizationPlan {
        path,
        epochs,
        final_value: final_best.value,
        winning_strategy,
        final_checkpoint: final_best.checkpoint_ref.clone(),
        stages,
    })
}

/// Best resolved final state: highest value, fewer epochs, lower id.
pub fn best_final(graph: &TransitionGraph, state: &PlanState) -> Option<StateId> {
    graph
        .final_states()
        .into_iter()
        .filter_map(|id| state.best.get(&id).map(|b| (id, b)))
        .min_by(|(ia, a), (ib, b)| {
            b.value
                .total_cmp(&a.value)
                .then(a.cumulative_epochs.cmp(&b.cumulative_epochs))
                .then(ia.cmp(ib))
        })
        .map(|(id, _)| id)
}

fn graph_spec(graph: &TransitionGraph) -> GraphSpec {
    GraphSpec::new(
        graph.clip_lens().to_vec(),
        graph.learning_rates().to_vec(),
        graph.strategies().to_vec(),
        graph.mode(),
    )
}

/// Rebuilds the plan state from ledger entries.
///
/// Returns the state and any plan already extracted.
pub fn replay(entries: &[LedgerEntry]) -> (PlanState, Option<OptimizationPlan>) {
    let mut state = PlanState::default();
    let mut plan = None;
    for e in entries {
        match &e.event {
            LedgerEvent::TransitionStopped { record } => {
                state.explored.insert((record.from_id, record.to_id), record.clone());
            }
            LedgerEvent::TransitionFailed { from, to, error, .. } => {
                state.failed.insert((*from, *to), error.clone());
            }
            LedgerEvent::StateResolved { state: id, best } => match best {
                Some(b) => {
                    state.best.insert(*id, b.clone());
                }
                None => {
                    state.unreachable.insert(*id);
                }
            },
            LedgerEvent::PlanExtracted { plan: p } => plan = Some(p.clone()),
            _ => {}
        }
    }
    (state, plan)
}

struct Job {
    slot: usize,
    from: StateId,
    to: StateId,
    from_checkpoint: Option<String>,
}

enum WorkerMsg {
    Event(LedgerEvent),
    Done {
        slot: usize,
        from: StateId,
        to: StateId,
        outcome: Result<TransitionRecord, (u32, String)>,
        trainer: Option<Box<dyn Trainer>>,
    },
}

fn run_job(
    job: &Job,
    graph: &TransitionGraph,
    cfg: &PlannerConfig,
    factory: &dyn TrainerFactory,
    mut trainer: Option<Box<dyn Trainer>>,
    tx: &mpsc::Sender<WorkerMsg>,
) -> WorkerMsg {
    let mut attempt = 0;
    let outcome = loop {
        attempt += 1;
        let result = (|| -> Result<TransitionRecord, ExploreError> {
            if trainer.is_none() {
                trainer = Some(factory.connect()?);
            }
            let t = trainer.as_mut().expect("connected above");
            let start = job
                .from_checkpoint
                .clone()
                .unwrap_or_else(|| t.initial_checkpoint().to_string());
            let param = |id: StateId| {
                graph
                    .state(id)
                    .and_then(|s| s.params.as_ref())
                    .map(|p| WireHyperParams::resolve(graph, p))
            };
            let _ = tx.send(WorkerMsg::Event(LedgerEvent::TransitionStarted {
                from: job.from,
                to: job.to,
                from_checkpoint: start.clone(),
                from_hyperparams: param(job.from),
                to_hyperparams: param(job.to).expect("edges end at non-initial states"),
                attempt,
            }));
            let mut sink = |e: LedgerEvent| {
                let _ = tx.send(WorkerMsg::Event(e));
            };
            explore_transition(graph, job.from, job.to, &start, t.as_mut(), &cfg.stopper, &mut sink)
        })();
        match result {
            Ok(r) => break Ok(r),
            Err(e) => {
                log::warn!("transition {} -> {} failed (attempt {attempt}): {e}", job.from, job.to);
                if e.breaks_trainer() {
                    if let Some(mut t) = trainer.take() {
                        let _ = t.shutdown();
                    }
                }
                if attempt > cfg.retries {
                    break Err((attempt, e.to_string()));
                }
            }
        }
    };
    WorkerMsg::Done {
        slot: job.slot,
        from: job.from,
        to: job.to,
        outcome,
        trainer,
    }
}

/// Runs (or resumes) the dynamic program.
///
/// With `resume`, transitions already recorded in the ledger are reused and
/// only missing work runs; a ledger holding an extracted plan returns it
/// without contacting any trainer.
pub fn plan(
    graph: &TransitionGraph,
    factory: &dyn TrainerFactory,
    cfg: &PlannerConfig,
    ledger: &mut Ledger,
    prior: &[LedgerEntry],
) -> Result<OptimizationPlan, PlanError> {
    graph.validate()?;
    Stopper::new(cfg.stopper.clone())?;
    let spec = graph_spec(graph);
    for e in prior {
        if let LedgerEvent::RunStarted { graph: g, stopper, seed } = &e.event {
            if *g != spec || *stopper != cfg.stopper || *seed != cfg.seed {
                return Err(PlanError::LedgerMismatch(
                    "graph, stopper or seed differ from the recorded run".into(),
                ));
            }
        }
    }
    let (mut state, done) = replay(prior);
    if let Some(plan) = done {
        return Ok(plan);
    }
    if prior.is_empty() {
        ledger.append(LedgerEvent::RunStarted {
            graph: spec,
            stopper: cfg.stopper.clone(),
            seed: cfg.seed,
        })?;
    }

    let order = graph.topological_order()?;
    let position: BTreeMap<StateId, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut edges: Vec<(StateId, StateId)> = graph.edges().to_vec();
    edges.sort_by_key(|(f, t)| (position[t], *f));

    let workers = cfg.workers.max(1);
    let mut pool: Vec<Option<Box<dyn Trainer>>> = (0..workers).map(|_| None).collect();

    let result = (|| -> Result<(), PlanError> {
        loop {
            resolve_ready(graph, &order, &mut state, ledger, &mut pool)?;
            let batch: Vec<(StateId, StateId)> = {
                let mut targets = BTreeSet::new();
                edges
                    .iter()
                    .copied()
                    .filter(|&(f, t)| {
                        !state.is_resolved(t)
                            && state.is_resolved(f)
                            && !state.unreachable.contains(&f)
                            && !state.explored.contains_key(&(f, t))
                            && !state.failed.contains_key(&(f, t))
                    })
                    .filter(|&(_, t)| targets.insert(t))
                    .take(workers)
                    .collect()
            };
            if batch.is_empty() {
                return Ok(());
            }
            let jobs: Vec<Job> = batch
                .iter()
                .enumerate()
                .map(|(slot, &(from, to))| Job {
                    slot,
                    from,
                    to,
                    from_checkpoint: state.best.get(&from).map(|b| b.checkpoint_ref.clone()),
                })
                .collect();
            let (tx, rx) = mpsc::channel();
            let mut finished: Vec<WorkerMsg> = Vec::new();
            let mut write_err = None;
            thread::scope(|scope| {
                for job in &jobs {
                    let trainer = pool[job.slot].take();
                    let tx = tx.clone();
                    scope.spawn(move || {
                        let done = run_job(job, graph, cfg, factory, trainer, &tx);
                        let _ = tx.send(done);
                    });
                }
                drop(tx);
                for msg in rx {
                    match msg {
                        WorkerMsg::Event(e) => {
                            if write_err.is_none() {
                                if let Err(err) = ledger.append(e) {
                                    write_err = Some(err);
                                }
                            }
                        }
                        done @ WorkerMsg::Done { .. } => finished.push(done),
                    }
                }
            });
            if let Some(err) = write_err {
                return Err(err.into());
            }
            // record outcomes in edge order so ledgers match across worker counts
            finished.sort_by_key(|m| match m {
                WorkerMsg::Done { slot, .. } => *slot,
                WorkerMsg::Event(_) => usize::MAX,
            });
            for msg in finished {
                let WorkerMsg::Done {
                    slot,
                    from,
                    to,
                    outcome,
                    trainer,
                } = msg
                else {
                    continue;
                };
                pool[slot] = trainer;
                match outcome {
                    Ok(record) => {
                        ledger.append(LedgerEvent::TransitionStopped { record: record.clone() })?;
                        state.explored.insert((from, to), record);
                    }
                    Err((attempts, error)) => {
                        ledger.append(LedgerEvent::TransitionFailed {
                            from,
                            to,
                            attempts,
                            error: error.clone(),
                        })?;
                        state.failed.insert((from, to), error);
                    }
                }
            }
        }
    })();

    let outcome = result.and_then(|_| {
        let final_id = best_final(graph, &state).ok_or(PlanError::PlanningFailed)?;
        let plan = extract_path(graph, &state, final_id)?;
        ledger.append(LedgerEvent::PlanExtracted { plan: plan.clone() })?;
        Ok(plan)
    });
    for mut t in pool.into_iter().flatten() {
        if let Err(e) = t.shutdown() {
            log::warn!("trainer shutdown failed: {e}");
        }
    }
    outcome
}

/// Resolves every state whose incoming edges are all settled.
fn resolve_ready(
    graph: &TransitionGraph,
    order: &[StateId],
    state: &mut PlanState,
    ledger: &mut Ledger,
    pool: &mut [Option<Box<dyn Trainer>>],
) -> Result<(), PlanError> {
    for &id in order {
        if state.is_resolved(id) {
            continue;
        }
        let preds = graph.predecessors(id);
        let settled = preds.iter().all(|&p| {
            state.is_resolved(p)
                && (state.unreachable.contains(&p)
                    || state.explored.contains_key(&(p, id))
                    || state.failed.contains_key(&(p, id)))
        });
        if !settled {
            continue;
        }
        let best = state.select(graph, id);
        // losing checkpoints are no longer needed
        let losers: Vec<String> = preds
            .iter()
            .filter_map(|p| state.explored.get(&(*p, id)))
            .filter(|r| Some(r.from_id) != best.as_ref().map(|b| b.predecessor))
            .map(|r| r.checkpoint_ref.clone())
            .collect();
        if !losers.is_empty() {
            if let Some(t) = pool.iter_mut().flatten().next() {
                for r in &losers {
                    if let Err(e) = t.release(r) {
                        log::warn!("could not release {r}: {e}");
                    }
                }
            }
        }
        ledger.append(LedgerEvent::StateResolved {
            state: id,
            best: best.clone(),
        })?;
        match best {
            Some(b) => {
                state.best.insert(id, b);
            }
            None => {
                state.unreachable.insert(id);
            }
        }
    }
    Ok(())
}
