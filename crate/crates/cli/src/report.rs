//! CSV tables and SVG plots rendered from a run ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::warn;
use optplan_core::planner::ledger::read_ledger;
use optplan_core::planner::LedgerEvent;
use optplan_core::{build_graph, GraphSpec, OptimizationPlan, StateId, TransitionGraph, TransitionRecord};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSummary {
    pub entries: usize,
    pub truncated: bool,
    pub transitions: usize,
    pub graph: bool,
}

#[derive(Serialize)]
struct TransitionRow<'a> {
    from: String,
    to: String,
    from_label: String,
    to_label: String,
    epochs_trained: u32,
    chosen_epoch: u32,
    value: f64,
    stop_reason: &'static str,
    family: Option<&'static str>,
    knee: Option<f64>,
    rmse: Option<f64>,
    r_square: Option<f64>,
    checkpoint_ref: &'a str,
}

#[derive(Serialize)]
struct EpochRow {
    from: String,
    to: String,
    epoch: u32,
    metric: f64,
    verdict: &'static str,
    knee: Option<f64>,
}

#[derive(Serialize)]
struct PathRow {
    stage: usize,
    from: String,
    to: String,
    epochs: u32,
}

#[derive(Serialize)]
struct FailureRow<'a> {
    from: String,
    to: String,
    attempts: u32,
    error: &'a str,
}

fn label(graph: Option<&TransitionGraph>, id: StateId) -> String {
    graph.map(|g| g.describe(id)).unwrap_or_default()
}

pub fn run(ledger: &Path, out: &Path) -> Result<ReportSummary> {
    if !ledger.is_file() {
        bail!("ledger {} does not exist", ledger.display());
    }
    let contents = read_ledger(ledger).with_context(|| format!("reading {}", ledger.display()))?;
    if contents.truncated {
        warn!(
            "{} ends in an incomplete line; reporting the first {} entries",
            ledger.display(),
            contents.entries.len()
        );
    }

    let mut spec: Option<&GraphSpec> = None;
    let mut records: Vec<&TransitionRecord> = Vec::new();
    let mut epochs = Vec::new();
    let mut failures = Vec::new();
    let mut plan: Option<&OptimizationPlan> = None;
    for entry in &contents.entries {
        match &entry.event {
            LedgerEvent::RunStarted { graph, .. } => spec = spec.or(Some(graph)),
            LedgerEvent::TransitionStopped { record } => records.push(record),
            LedgerEvent::EpochObserved {
                from,
                to,
                metric,
                decision,
                ..
            } => epochs.push(EpochRow {
                from: from.to_string(),
                to: to.to_string(),
                epoch: decision.epoch,
                metric: *metric,
                verdict: if decision.is_stop() { "stop" } else { "continue" },
                knee: decision.knee,
            }),
            LedgerEvent::TransitionFailed { from, to, attempts, error } => failures.push((*from, *to, *attempts, error)),
            LedgerEvent::PlanExtracted { plan: p } => plan = Some(p),
            LedgerEvent::TransitionStarted { .. } | LedgerEvent::StateResolved { .. } => {}
        }
    }
    let graph = match spec.map(build_graph).transpose() {
        Ok(g) => g,
        Err(e) => {
            warn!("cannot rebuild the graph from the ledger: {e}");
            None
        }
    };
    if graph.is_none() {
        warn!("no usable run_started entry; graph.svg is not drawn");
    }

    std::fs::create_dir_all(out.join("fits")).with_context(|| format!("creating {}", out.display()))?;

    let mut w = csv::Writer::from_path(out.join("transitions.csv"))?;
    write_header(&mut w, records.is_empty(), TRANSITION_COLUMNS)?;
    for r in &records {
        w.serialize(TransitionRow {
            from: r.from_id.to_string(),
            to: r.to_id.to_string(),
            from_label: label(graph.as_ref(), r.from_id),
            to_label: label(graph.as_ref(), r.to_id),
            epochs_trained: r.epochs_trained,
            chosen_epoch: r.chosen_epoch,
            value: r.value,
            stop_reason: match r.stop_reason {
                optplan_core::StopReason::Knee => "knee",
                optplan_core::StopReason::Budget => "budget",
            },
            family: r.fit.as_ref().map(|f| f.family.as_str()),
            knee: r.fit.as_ref().map(|f| f.knee),
            rmse: r.fit.as_ref().map(|f| f.rmse),
            r_square: r.fit.as_ref().and_then(|f| f.r_square),
            checkpoint_ref: &r.checkpoint_ref,
        })?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("epochs.csv"))?;
    write_header(&mut w, epochs.is_empty(), EPOCH_COLUMNS)?;
    for row in &epochs {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("failures.csv"))?;
    write_header(&mut w, failures.is_empty(), FAILURE_COLUMNS)?;
    for (from, to, attempts, error) in &failures {
        w.serialize(FailureRow {
            from: from.to_string(),
            to: to.to_string(),
            attempts: *attempts,
            error,
        })?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("path.csv"))?;
    let stages: Vec<PathRow> = plan
        .map(|p| {
            p.path
                .windows(2)
                .zip(&p.epochs)
                .enumerate()
                .map(|(i, (pair, e))| PathRow {
                    stage: i + 1,
                    from: pair[0].to_string(),
                    to: pair[1].to_string(),
                    epochs: *e,
                })
                .collect()
        })
        .unwrap_or_default();
    write_header(&mut w, stages.is_empty(), PATH_COLUMNS)?;
    for row in &stages {
        w.serialize(row)?;
    }
    w.flush()?;

    for r in &records {
        let name = format!("{}-{}.svg", r.from_id, r.to_id);
        std::fs::write(out.join("fits").join(name), fit_svg(r, graph.as_ref()))?;
    }
    if let Some(g) = &graph {
        let explored: BTreeSet<_> = records.iter().map(|r| (r.from_id, r.to_id)).collect();
        let failed: BTreeSet<_> = failures.iter().map(|f| (f.0, f.1)).collect();
        std::fs::write(out.join("graph.svg"), graph_svg(g, &explored, &failed, plan))?;
    }

    Ok(ReportSummary {
        entries: contents.entries.len(),
        truncated: contents.truncated,
        transitions: records.len(),
        graph: graph.is_some(),
    })
}

const TRANSITION_COLUMNS: &[&str] = &[
    "from",
    "to",
    "from_label",
    "to_label",
    "epochs_trained",
    "chosen_epoch",
    "value",
    "stop_reason",
    "family",
    "knee",
    "rmse",
    "r_square",
    "checkpoint_ref",
];
const EPOCH_COLUMNS: &[&str] = &["from", "to", "epoch", "metric", "verdict", "knee"];
const FAILURE_COLUMNS: &[&str] = &["from", "to", "attempts", "error"];
const PATH_COLUMNS: &[&str] = &["stage", "from", "to", "epochs"];

/// serde-driven writers only emit a header with the first row.
fn write_header(w: &mut csv::Writer<std::fs::File>, empty: bool, columns: &[&str]) -> csv::Result<()> {
    if empty {
        w.write_record(columns)?;
    }
    Ok(())
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const FIT_W: f64 = 480.0;
const FIT_H: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Observed metrics, the fitted curve and the chosen epoch of one transition.
pub fn fit_svg(r: &TransitionRecord, graph: Option<&TransitionGraph>) -> String {
    let pts = r.metric_trace.points();
    let t_max = pts.last().map(|p| p.0).unwrap_or(1).max(1) as f64;
    let curve: Vec<(f64, f64)> = match &r.fit {
        Some(f) => (0..=200)
            .map(|i| {
                let t = t_max * i as f64 / 200.0;
                (t, f.value(t))
            })
            .filter(|p| p.1.is_finite())
            .collect(),
        None => Vec::new(),
    };
    let ys = pts.iter().map(|p| p.1).chain(curve.iter().map(|p| p.1));
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |t: f64| MARGIN + t / t_max * (FIT_W - 2.0 * MARGIN);
    let y = |v: f64| FIT_H - MARGIN - (v - lo) / (hi - lo) * (FIT_H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{FIT_W}" height="{FIT_H}" viewBox="0 0 {FIT_W} {FIT_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let title = match graph {
        Some(g) => format!("{} -> {}", g.describe(r.from_id), g.describe(r.to_id)),
        None => format!("{} -> {}", r.from_id, r.to_id),
    };
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20" font-size="12">{}</text>"#, esc(&title));
    let (x0, x1, y0, y1) = (MARGIN, FIT_W - MARGIN, FIT_H - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r##"<path class="axes" d="M{x0:.2} {y1:.2} L{x0:.2} {y0:.2} L{x1:.2} {y0:.2}" fill="none" stroke="#333333"/>"##
    );
    let _ = writeln!(s, r#"<text x="{x0:.2}" y="{:.2}" text-anchor="middle">0</text>"#, y0 + 16.0);
    let _ = writeln!(s, r#"<text x="{x1:.2}" y="{:.2}" text-anchor="middle">{t_max}</text>"#, y0 + 16.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#, (x0 + x1) / 2.0, y0 + 30.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y0, lo);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y1 + 8.0, hi);

    let cx = x(r.chosen_epoch as f64);
    let _ = writeln!(
        s,
        r##"<line class="chosen" x1="{cx:.2}" y1="{y1:.2}" x2="{cx:.2}" y2="{y0:.2}" stroke="#2ca02c" stroke-dasharray="4 3"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="{:.2}" fill="#2ca02c">epoch {} = {:.4}</text>"##,
        cx + 4.0,
        y0 - 6.0,
        r.chosen_epoch,
        r.value
    );
    if !curve.is_empty() {
        let d: Vec<String> = curve.iter().map(|(t, v)| format!("{:.2},{:.2}", x(*t), y(*v))).collect();
        let _ = writeln!(
            s,
            r##"<polyline class="fit" points="{}" fill="none" stroke="#ff7f0e" stroke-width="1.5"/>"##,
            d.join(" ")
        );
    }
    for (t, v) in pts {
        let _ = writeln!(
            s,
            r##"<circle class="obs" cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4"/>"##,
            x(*t as f64),
            y(*v)
        );
    }
    s.push_str("</svg>\n");
    s
}

const CELL_W: f64 = 110.0;
const CELL_H: f64 = 70.0;
const NODE_R: f64 = 16.0;
const LEFT: f64 = 200.0;
const TOP: f64 = 60.0;
const BLOCK_GAP: f64 = 50.0;

fn node_pos(graph: &TransitionGraph, id: StateId, height: f64) -> (f64, f64) {
    match graph.state(id).and_then(|s| s.params.as_ref()) {
        None => (70.0, height / 2.0),
        Some(p) => {
            let block = graph.strategies().iter().position(|s| *s == p.sampling).unwrap_or(0) as f64;
            let y0 = TOP + block * (graph.n_r() as f64 * CELL_H + BLOCK_GAP);
            (
                LEFT + p.clip_len_idx as f64 * CELL_W + CELL_W / 2.0,
                y0 + p.lr_idx as f64 * CELL_H + CELL_H / 2.0,
            )
        }
    }
}

/// Edge geometry: jumps along a row or column bow out so they do not hide
/// the single steps they pass over.
fn edge_path(a: (f64, f64), b: (f64, f64)) -> String {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt().max(1e-9);
    let steps = (dx.abs() / CELL_W).max(dy.abs() / CELL_H);
    let aligned = (dx.abs() < 1e-9 || dy.abs() < 1e-9) && steps > 1.5;
    let ctrl = if aligned {
        let bow = 14.0 * steps;
        ((a.0 + b.0) / 2.0 - dy / len * bow, (a.1 + b.1) / 2.0 + dx / len * bow)
    } else {
        ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
    };
    let shorten = |p: (f64, f64), toward: (f64, f64), by: f64| {
        let (ux, uy) = (toward.0 - p.0, toward.1 - p.1);
        let l = (ux * ux + uy * uy).sqrt().max(1e-9);
        (p.0 + ux / l * by, p.1 + uy / l * by)
    };
    let start = shorten(a, ctrl, NODE_R);
    let end = shorten(b, ctrl, NODE_R + 2.0);
    format!(
        "M{:.2} {:.2} Q{:.2} {:.2} {:.2} {:.2}",
        start.0, start.1, ctrl.0, ctrl.1, end.0, end.1
    )
}

/// The transition graph with the chosen path drawn in red.
pub fn graph_svg(
    graph: &TransitionGraph,
    explored: &BTreeSet<(StateId, StateId)>,
    failed: &BTreeSet<(StateId, StateId)>,
    plan: Option<&OptimizationPlan>,
) -> String {
    let blocks = graph.strategies().len() as f64;
    let height = TOP + blocks * graph.n_r() as f64 * CELL_H + (blocks - 1.0) * BLOCK_GAP + 50.0;
    let width = LEFT + graph.n_l() as f64 * CELL_W + 40.0;
    let on_path: BTreeSet<(StateId, StateId)> = plan
        .map(|p| p.path.windows(2).map(|w| (w[0], w[1])).collect())
        .unwrap_or_default();
    let path_nodes: BTreeSet<StateId> = plan.map(|p| p.path.iter().copied().collect()).unwrap_or_default();
    let pos: BTreeMap<StateId, (f64, f64)> =
        graph.states().iter().map(|s| (s.id, node_pos(graph, s.id, height))).collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    s.push_str(concat!(
        "<defs>\n",
        r##"<marker id="arrow-path" viewBox="0 0 10 10" refX="9" refY="5" markerUnits="userSpaceOnUse" markerWidth="9" markerHeight="9" orient="auto"><path d="M0 0 L10 5 L0 10 z" fill="red"/></marker>"##,
        "\n",
        r##"<marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerUnits="userSpaceOnUse" markerWidth="9" markerHeight="9" orient="auto"><path d="M0 0 L10 5 L0 10 z" fill="#777777"/></marker>"##,
        "\n</defs>\n",
        r#"<rect width="100%" height="100%" fill="white"/>"#,
        "\n"
    ));

    for (b, strategy) in graph.strategies().iter().enumerate() {
        let y0 = TOP + b as f64 * (graph.n_r() as f64 * CELL_H + BLOCK_GAP);
        let _ = writeln!(s, r#"<text x="{LEFT}" y="{:.2}" font-weight="bold">{strategy}</text>"#, y0 - 24.0);
        for (c, l) in graph.clip_lens().iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">l={l}</text>"#,
                LEFT + c as f64 * CELL_W + CELL_W / 2.0,
                y0 - 6.0
            );
        }
        for (r, rate) in graph.learning_rates().iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">r={rate}</text>"#,
                LEFT - 6.0,
                y0 + r as f64 * CELL_H + CELL_H / 2.0 + 4.0
            );
        }
    }

    let (mut plain, mut chosen) = (String::new(), String::new());
    for &(a, b) in graph.edges() {
        let d = edge_path(pos[&a], pos[&b]);
        let key = (a, b);
        if on_path.contains(&key) {
            let _ = writeln!(
                chosen,
                r#"<path class="edge path" data-from="{a}" data-to="{b}" d="{d}" fill="none" stroke="red" stroke-width="3" marker-end="url(#arrow-path)"/>"#
            );
        } else {
            let (class, style) = if failed.contains(&key) && !explored.contains(&key) {
                ("edge failed", r##"stroke="#555555" stroke-width="1.5" stroke-dasharray="4 3""##)
            } else if explored.contains(&key) {
                ("edge explored", r##"stroke="#555555" stroke-width="1.5""##)
            } else {
                ("edge", r##"stroke="#cccccc" stroke-width="1""##)
            };
            let _ = writeln!(
                plain,
                r#"<path class="{class}" data-from="{a}" data-to="{b}" d="{d}" fill="none" {style} marker-end="url(#arrow)"/>"#
            );
        }
    }
    s.push_str(&plain);
    s.push_str(&chosen);

    for state in graph.states() {
        let (x, y) = pos[&state.id];
        let fill = if path_nodes.contains(&state.id) { "#ffe0e0" } else { "white" };
        let _ = writeln!(
            s,
            r##"<g class="node" data-id="{id}"><title>{title}</title><circle cx="{x:.2}" cy="{y:.2}" r="{NODE_R}" fill="{fill}" stroke="#333333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{id}</text></g>"##,
            y + 4.0,
            id = state.id,
            title = esc(&graph.describe(state.id)),
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="10" y="{:.2}">red: chosen path; dark: explored; light: not explored; dashed: failed</text>"#,
        height - 12.0
    );
    s.push_str("</svg>\n");
    s
}
