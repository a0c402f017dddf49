//! Training states and the candidate transition graph between them.
//!
//! A state fixes the sampling strategy, the clip length and the learning rate
//! used while training. Transitions only ever move towards longer clips and
//! lower learning rates and never cross sampling strategies, so every graph
//! built here is a DAG whose sinks are the per-strategy final states.

use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame sampling strategy used to build training clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Consecutive,
    Uniform,
}

impl Sampling {
    pub const ALL: [Sampling; 2] = [Sampling::Consecutive, Sampling::Uniform];

    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::Consecutive => "consecutive",
            Sampling::Uniform => "uniform",
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Sampling {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consecutive" | "cs" => Ok(Sampling::Consecutive),
            "uniform" | "us" => Ok(Sampling::Uniform),
            other => Err(GraphError::UnknownSampling(other.to_string())),
        }
    }
}

/// Identifier of a state inside one [`TransitionGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl StateId {
    pub const INITIAL: StateId = StateId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Hyper-parameter assignment of a non-initial state.
///
/// Clip length and learning rate are indices into the graph's candidate
/// lists: clip lengths ascend with the index, learning rates descend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub sampling: Sampling,
    pub clip_len_idx: usize,
    pub lr_idx: usize,
    /// Opaque settings forwarded to the trainer unchanged.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Initial,
    Intermediate,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub id: StateId,
    pub kind: StateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<HyperParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// One hyper-parameter changes per transition.
    Basic,
    /// Clip length may grow and learning rate drop in the same transition.
    Extended,
}

impl std::str::FromStr for GraphMode {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(GraphMode::Basic),
            "extended" => Ok(GraphMode::Extended),
            other => Err(GraphError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("candidate list `{0}` is empty")]
    EmptyCandidates(&'static str),
    #[error("clip lengths must be strictly increasing, got {0:?}")]
    ClipLensNotIncreasing(Vec<u32>),
    #[error("learning rates must be finite, positive and strictly decreasing, got {0:?}")]
    RatesNotDecreasing(Vec<f64>),
    #[error("no sampling strategy enabled")]
    NoStrategies,
    #[error("unknown sampling strategy `{0}`")]
    UnknownSampling(String),
    #[error("unknown graph mode `{0}`")]
    UnknownMode(String),
    #[error("transition graph contains a cycle")]
    Cycle,
    #[error("invalid transition graph: {0}")]
    Invalid(String),
    #[error("malformed graph document: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Inputs to [`build_graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub clip_lens: Vec<u32>,
    pub learning_rates: Vec<f64>,
    pub strategies: Vec<Sampling>,
    pub mode: GraphMode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl GraphSpec {
    pub fn new(clip_lens: Vec<u32>, learning_rates: Vec<f64>, strategies: Vec<Sampling>, mode: GraphMode) -> Self {
        GraphSpec {
            clip_lens,
            learning_rates,
            strategies,
            mode,
            extra: BTreeMap::new(),
        }
    }
}

/// Immutable DAG of candidate training states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionGraph {
    mode: GraphMode,
    clip_lens: Vec<u32>,
    learning_rates: Vec<f64>,
    strategies: Vec<Sampling>,
    states: Vec<TrainingState>,
    edges: Vec<(StateId, StateId)>,
}

fn check_candidates(clip_lens: &[u32], rates: &[f64]) -> Result<(), GraphError> {
    if clip_lens.is_empty() {
        return Err(GraphError::EmptyCandidates("clip_lens"));
    }
    if rates.is_empty() {
        return Err(GraphError::EmptyCandidates("learning_rates"));
    }
    if clip_lens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GraphError::ClipLensNotIncreasing(clip_lens.to_vec()));
    }
    if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) || rates.windows(2).any(|w| w[0] <= w[1]) {
        return Err(GraphError::RatesNotDecreasing(rates.to_vec()));
    }
    Ok(())
}

/// Whether `to` may directly follow `from` in a graph of the given mode.
///
/// Both states must share a sampling strategy; neither index may move
/// backwards, at least one must move forward, and basic graphs move exactly
/// one of them.
pub fn transition_permitted(mode: GraphMode, from: &HyperParams, to: &HyperParams) -> bool {
    if from.sampling != to.sampling {
        return false;
    }
    if to.clip_len_idx < from.clip_len_idx || to.lr_idx < from.lr_idx {
        return false;
    }
    let longer = to.clip_len_idx > from.clip_len_idx;
    let slower = to.lr_idx > from.lr_idx;
    match mode {
        GraphMode::Basic => longer != slower,
        GraphMode::Extended => longer || slower,
    }
}

/// Builds the candidate transition graph.
///
/// State ids: the initial state is 0, then states are numbered
/// strategy-major, clip-length-major, rate-minor.
pub fn build_graph(spec: &GraphSpec) -> Result<TransitionGraph, GraphError> {
    check_candidates(&spec.clip_lens, &spec.learning_rates)?;
    let mut strategies = spec.strategies.clone();
    strategies.sort();
    strategies.dedup();
    if strategies.is_empty() {
        return Err(GraphError::NoStrategies);
    }

    let n_l = spec.clip_lens.len();
    let n_r = spec.learning_rates.len();
    let mut states = vec![TrainingState {
        id: StateId::INITIAL,
        kind: StateKind::Initial,
        params: None,
    }];
    for &sampling in &strategies {
        for c in 0..n_l {
            for r in 0..n_r {
                let kind = if c + 1 == n_l && r + 1 == n_r {
                    StateKind::Final
                } else {
                    StateKind::Intermediate
                };
                states.push(TrainingState {
                    id: StateId(states.len() as u32),
                    kind,
                    params: Some(HyperParams {
                        sampling,
                        clip_len_idx: c,
                        lr_idx: r,
                        extra: spec.extra.clone(),
                    }),
                });
            }
        }
    }

    let mut edges = Vec::new();
    for s in &states[1..] {
        let p = s.params.as_ref().expect("non-initial state has params");
        if p.clip_len_idx == 0 && p.lr_idx == 0 {
            edges.push((StateId::INITIAL, s.id));
        }
    }
    for a in &states[1..] {
        for b in &states[1..] {
            let (pa, pb) = (a.params.as_ref().unwrap(), b.params.as_ref().unwrap());
            if transition_permitted(spec.mode, pa, pb) {
                edges.push((a.id, b.id));
            }
        }
    }
    edges.sort();

    let graph = TransitionGraph {
        mode: spec.mode,
        clip_lens: spec.clip_lens.clone(),
        learning_rates: spec.learning_rates.clone(),
        strategies,
        states,
        edges,
    };
    graph.validate()?;
    Ok(graph)
}

impl TransitionGraph {
    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn clip_lens(&self) -> &[u32] {
        &self.clip_lens
    }

    pub fn learning_rates(&self) -> &[f64] {
        &self.learning_rates
    }

    pub fn strategies(&self) -> &[Sampling] {
        &self.strategies
    }

    pub fn n_l(&self) -> usize {
        self.clip_lens.len()
    }

    pub fn n_r(&self) -> usize {
        self.learning_rates.len()
    }

    pub fn states(&self) -> &[TrainingState] {
        &self.states
    }

    pub fn edges(&self) -> &[(StateId, StateId)] {
        &self.edges
    }

    pub fn state(&self, id: StateId) -> Option<&TrainingState> {
        self.states.get(id.index())
    }

    pub fn has_edge(&self, from: StateId, to: StateId) -> bool {
        self.edges.binary_search(&(from, to)).is_ok()
    }

    /// Sources of the edges entering `id`, ascending.
    pub fn predecessors(&self, id: StateId) -> Vec<StateId> {
        self.edges.iter().filter(|e| e.1 == id).map(|e| e.0).collect()
    }

    pub fn successors(&self, id: StateId) -> Vec<StateId> {
        self.edges.iter().filter(|e| e.0 == id).map(|e| e.1).collect()
    }

    /// Final state ids, one per enabled strategy, ascending.
    pub fn final_states(&self) -> Vec<StateId> {
        self.states
            .iter()
            .filter(|s| s.kind == StateKind::Final)
            .map(|s| s.id)
            .collect()
    }

    /// Kahn's algorithm with ties broken by ascending state id.
    pub fn topological_order(&self) -> Result<Vec<StateId>, GraphError> {
        topological_sort(self.states.len(), &self.edges)
    }

    /// Checks every structural invariant of a transition graph.
    pub fn validate(&self) -> Result<(), GraphError> {
        check_candidates(&self.clip_lens, &self.learning_rates)?;
        if self.strategies.is_empty() {
            return Err(GraphError::NoStrategies);
        }
        if self.strategies.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("strategies must be sorted and unique"));
        }
        let n_l = self.clip_lens.len();
        let n_r = self.learning_rates.len();

        let mut initial = 0;
        let mut finals: BTreeMap<Sampling, usize> = BTreeMap::new();
        for (i, s) in self.states.iter().enumerate() {
            if s.id.index() != i {
                return Err(invalid(format!("state at position {i} has id {}", s.id)));
            }
            match (&s.kind, &s.params) {
                (StateKind::Initial, None) => initial += 1,
                (StateKind::Initial, Some(_)) => return Err(invalid("initial state carries hyper-parameters")),
                (_, None) => return Err(invalid(format!("{} has no hyper-parameters", s.id))),
                (kind, Some(p)) => {
                    if p.clip_len_idx >= n_l || p.lr_idx >= n_r {
                        return Err(invalid(format!("{} indexes outside the candidate lists", s.id)));
                    }
                    if !self.strategies.contains(&p.sampling) {
                        return Err(invalid(format!("{} uses a disabled strategy", s.id)));
                    }
                    if *kind == StateKind::Final {
                        if p.clip_len_idx + 1 != n_l || p.lr_idx + 1 != n_r {
                            return Err(invalid(format!(
                                "final {} is not at the longest clip and lowest rate",
                                s.id
                            )));
                        }
                        *finals.entry(p.sampling).or_default() += 1;
                    }
                }
            }
        }
        if initial != 1 || self.states.first().map(|s| s.kind) != Some(StateKind::Initial) {
            return Err(invalid("graph must have exactly one initial state, with id 0"));
        }
        for strategy in &self.strategies {
            if finals.get(strategy).copied() != Some(1) {
                return Err(invalid(format!("strategy {strategy} needs exactly one final state")));
            }
        }

        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("edges must be sorted and unique"));
        }
        for &(from, to) in &self.edges {
            let (Some(a), Some(b)) = (self.state(from), self.state(to)) else {
                return Err(invalid(format!("edge ({from}, {to}) references an unknown state")));
            };
            let pb = b
                .params
                .as_ref()
                .ok_or_else(|| invalid(format!("edge ({from}, {to}) enters the initial state")))?;
            match &a.params {
                None => {
                    if pb.clip_len_idx != 0 || pb.lr_idx != 0 {
                        return Err(invalid(format!(
                            "edge ({from}, {to}) must start at the shortest clip and highest rate"
                        )));
                    }
                }
                Some(pa) => {
                    if !transition_permitted(self.mode, pa, pb) {
                        return Err(invalid(format!("edge ({from}, {to}) breaks the transition rules")));
                    }
                }
            }
        }

        self.topological_order()?;

        let reachable = self.reachable_from_initial();
        for id in self.final_states() {
            if !reachable[id.index()] {
                return Err(invalid(format!("final {id} is unreachable from the initial state")));
            }
        }
        Ok(())
    }

    fn reachable_from_initial(&self) -> Vec<bool> {
        let mut seen = vec![false; self.states.len()];
        let mut queue = VecDeque::from([StateId::INITIAL]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in self.successors(u) {
                if !seen[v.index()] {
                    seen[v.index()] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Deterministic pretty JSON document, newline terminated.
    pub fn to_document(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("graph serializes");
        out.push('\n');
        out
    }

    pub fn from_document(doc: &str) -> Result<Self, GraphError> {
        let graph: TransitionGraph = serde_json::from_str(doc)?;
        graph.validate()?;
        Ok(graph)
    }

    /// Human readable label such as `S4 consecutive l=32 r=0.1`.
    pub fn describe(&self, id: StateId) -> String {
        match self.state(id).and_then(|s| s.params.as_ref()) {
            None => format!("{id} initial"),
            Some(p) => format!(
                "{id} {} l={} r={}",
                p.sampling, self.clip_lens[p.clip_len_idx], self.learning_rates[p.lr_idx]
            ),
        }
    }
}

fn invalid(msg: impl Into<String>) -> GraphError {
    GraphError::Invalid(msg.into())
}

/// Topological order of `n` nodes, smallest available id first.
pub fn topological_sort(n: usize, edges: &[(StateId, StateId)]) -> Result<Vec<StateId>, GraphError> {
    let mut indegree = vec![0usize; n];
    let mut adjacency = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a.index() >= n || b.index() >= n {
            return Err(invalid(format!("edge ({a}, {b}) references an unknown state")));
        }
        adjacency[a.index()].push(b);
        indegree[b.index()] += 1;
    }
    let mut ready: BinaryHeap<Reverse<StateId>> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| Reverse(StateId(i as u32)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(u)) = ready.pop() {
        order.push(u);
        for &v in &adjacency[u.index()] {
            indegree[v.index()] -= 1;
            if indegree[v.index()] == 0 {
                ready.push(Reverse(v));
            }
        }
    }
    if order.len() != n {
        return Err(GraphError::Cycle);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_l: usize, n_r: usize, strategies: &[Sampling], mode: GraphMode) -> GraphSpec {
        let clips = (0..n_l).map(|i| 16 << i).collect();
        let rates = (0..n_r).map(|i| 0.1 / 10f64.powi(i as i32)).collect();
        GraphSpec::new(clips, rates, strategies.to_vec(), mode)
    }

    #[test]
    fn three_by_three_basic_graph_has_eighteen_states() {
        let g = build_graph(&spec(3, 3, &Sampling::ALL, GraphMode::Basic)).unwrap();
        assert_eq!(g.states().len() - 1, 18);
        assert_eq!(g.final_states(), vec![StateId(9), StateId(18)]);
    }

    #[test]
    fn degenerate_grid_is_a_single_hop() {
        let g = build_graph(&spec(1, 1, &[Sampling::Consecutive], GraphMode::Basic)).unwrap();
        assert_eq!(g.states().len(), 2);
        assert_eq!(g.edges(), &[(StateId(0), StateId(1))]);
        assert_eq!(g.state(StateId(1)).unwrap().kind, StateKind::Final);
    }

    #[test]
    fn edge_counts_per_strategy() {
        let basic = build_graph(&spec(3, 3, &Sampling::ALL, GraphMode::Basic)).unwrap();
        let ext = build_graph(&spec(3, 3, &Sampling::ALL, GraphMode::Extended)).unwrap();
        let non_initial = |g: &TransitionGraph| g.edges().iter().filter(|e| e.0 != StateId::INITIAL).count();
        assert_eq!(non_initial(&basic), 2 * 18);
        assert_eq!(non_initial(&ext), 2 * 27);
        for e in basic.edges() {
            assert!(ext.has_edge(e.0, e.1));
        }
    }

    #[test]
    fn rejects_non_monotone_candidates() {
        let mut s = spec(3, 3, &Sampling::ALL, GraphMode::Basic);
        s.clip_lens = vec![16, 64, 32];
        assert!(matches!(build_graph(&s), Err(GraphError::ClipLensNotIncreasing(_))));
        let mut s = spec(3, 3, &Sampling::ALL, GraphMode::Basic);
        s.learning_rates = vec![0.1, 0.1, 0.01];
        assert!(matches!(build_graph(&s), Err(GraphError::RatesNotDecreasing(_))));
        let mut s = spec(3, 3, &[], GraphMode::Basic);
        s.strategies.clear();
        assert!(matches!(build_graph(&s), Err(GraphError::NoStrategies)));
        let mut s = spec(3, 3, &Sampling::ALL, GraphMode::Basic);
        s.clip_lens.clear();
        assert!(matches!(build_graph(&s), Err(GraphError::EmptyCandidates(_))));
    }

    #[test]
    fn chain_orders_uniquely() {
        let order = topological_sort(3, &[(StateId(0), StateId(1)), (StateId(1), StateId(2))]).unwrap();
        assert_eq!(order, vec![StateId(0), StateId(1), StateId(2)]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let edges = [(StateId(0), StateId(3)), (StateId(0), StateId(1)), (StateId(2), StateId(1))];
        let order = topological_sort(4, &edges).unwrap();
        assert_eq!(order, vec![StateId(0), StateId(2), StateId(1), StateId(3)]);
    }

    #[test]
    fn cycle_is_reported() {
        let edges = [(StateId(0), StateId(1)), (StateId(1), StateId(2)), (StateId(2), StateId(1))];
        assert!(matches!(topological_sort(3, &edges), Err(GraphError::Cycle)));
    }

    #[test]
    fn validate_catches_tampering() {
        let g = build_graph(&spec(2, 2, &Sampling::ALL, GraphMode::Basic)).unwrap();
        // cross-strategy edge
        let mut bad = g.clone();
        bad.edges.push((StateId(1), StateId(8)));
        bad.edges.sort();
        assert!(bad.validate().is_err());
        // backward edge closes a cycle and breaks the rules
        let mut bad = g.clone();
        bad.edges.push((StateId(2), StateId(1)));
        bad.edges.sort();
        assert!(bad.validate().is_err());
        // initial edge to a state that is not (l1, r1)
        let mut bad = g.clone();
        bad.edges.push((StateId(0), StateId(2)));
        bad.edges.sort();
        assert!(bad.validate().is_err());
        // final unreachable
        let mut bad = g;
        bad.edges.retain(|e| e.1 != StateId(4));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn document_is_byte_stable() {
        let s = spec(3, 2, &Sampling::ALL, GraphMode::Extended);
        let a = build_graph(&s).unwrap().to_document();
        let b = build_graph(&s).unwrap().to_document();
        assert_eq!(a, b);
        let back = TransitionGraph::from_document(&a).unwrap();
        assert_eq!(back.to_document(), a);
    }

    #[test]
    fn extra_settings_pass_through() {
        let mut s = spec(2, 2, &[Sampling::Uniform], GraphMode::Basic);
        s.extra.insert("dropout".into(), serde_json::json!(0.5));
        let g = build_graph(&s).unwrap();
        let p = g.state(StateId(1)).unwrap().params.as_ref().unwrap();
        assert_eq!(p.extra["dropout"], serde_json::json!(0.5));
    }
}
