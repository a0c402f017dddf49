//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p optplan-core --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use optplan_core::curvefit::{self, exponential_with_knee, CurveFamily, ObservationSeries};
use optplan_core::planner::{self, explore_transition, Ledger, TransitionRecord};
use optplan_core::protocol::{ProtocolError, Trainer};
use optplan_core::simtrainer::{connect_local, Scenario};
use optplan_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- graph

fn graph_construction() -> Outcome {
    let spec = GraphSpec::new(vec![8, 16, 32], vec![0.1, 0.01, 0.001], Sampling::ALL.to_vec(), GraphMode::Basic);
    let started = Instant::now();
    let g = build_graph(&spec).unwrap();
    let elapsed = started.elapsed();

    // independent enumerator: every ordered pair of (strategy, l, r) cells
    let mut cells = vec![None];
    for s in Sampling::ALL {
        for l in 0..3usize {
            for r in 0..3usize {
                cells.push(Some((s, l, r)));
            }
        }
    }
    let mut expected = Vec::new();
    for (i, a) in cells.iter().enumerate() {
        for (j, b) in cells.iter().enumerate() {
            let ok = match (a, b) {
                (None, Some((_, 0, 0))) => true,
                (Some((sa, la, ra)), Some((sb, lb, rb))) => {
                    let dl = *lb as i64 - *la as i64;
                    let dr = *rb as i64 - *ra as i64;
                    sa == sb && dl >= 0 && dr >= 0 && ((dl > 0) != (dr > 0))
                }
                _ => false,
            };
            if ok {
                expected.push((StateId(i as u32), StateId(j as u32)));
            }
        }
    }
    let mut actual = g.edges().to_vec();
    actual.sort();
    expected.sort();
    let non_initial = g.states().len() - 1;
    let passed = non_initial == 18 && actual == expected && elapsed < Duration::from_secs(1);
    outcome(
        passed,
        format!(
            "{non_initial} states, {} edges ({} expected), built in {elapsed:?}",
            actual.len(),
            expected.len()
        ),
    )
}

// ------------------------------------------------------- knee + stopping

struct KneeTrial {
    true_argmax: f64,
    decisions: Vec<StopDecision>,
    elapsed: Duration,
}

fn dense_argmax(alpha: &[f64], hi: f64) -> f64 {
    (0..=(hi * 100.0) as usize)
        .map(|i| i as f64 * 0.01)
        .max_by(|a, b| {
            let fa = curvefit::evaluate(CurveFamily::Exponential, alpha, *a).unwrap();
            let fb = curvefit::evaluate(CurveFamily::Exponential, alpha, *b).unwrap();
            fa.total_cmp(&fb)
        })
        .unwrap()
}

fn knee_trials() -> Vec<KneeTrial> {
    let sigma = 1e-3;
    let noise = Normal::new(0.0, sigma).unwrap();
    (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0000 + seed);
            // parametrised by the rise to the peak so accuracy stays below 0.9
            let knee: f64 = rng.random_range(15.0..=80.0);
            let start = rng.random_range(0.2..0.5);
            let rise = rng.random_range(0.2..0.4);
            let rate: f64 = -rng.random_range(0.05..0.2);
            let quadratic_share = rng.random_range(0.1..0.5);
            let curvature = quadratic_share * rise / (knee * knee);
            let e = (rate * knee).exp();
            let gain = (1.0 - quadratic_share) * rise / (1.0 - e + rate * knee * e);
            let alpha = exponential_with_knee(start, gain, rate, curvature, knee);
            let true_argmax = dense_argmax(&alpha, 200.0);
            let started = Instant::now();
            let mut stopper = Stopper::new(StopperConfig::default()).unwrap();
            let mut decisions = Vec::new();
            for t in 1..=stopper.config().horizon_cap {
                let y = curvefit::evaluate(CurveFamily::Exponential, &alpha, t as f64).unwrap();
                let d = stopper.observe(t, (y + noise.sample(&mut rng)).clamp(0.0, 1.0)).unwrap();
                let stop = d.is_stop();
                decisions.push(d);
                if stop {
                    break;
                }
            }
            KneeTrial {
                true_argmax,
                decisions,
                elapsed: started.elapsed(),
            }
        })
        .collect()
}

fn knee_estimation(trials: &[KneeTrial]) -> Outcome {
    let hits = trials
        .iter()
        .filter(|t| {
            let best = t.decisions.last().and_then(|d| d.best_epoch).unwrap_or(0);
            (best as f64 - t.true_argmax).abs() <= 3.0
        })
        .count();
    let slowest = trials.iter().map(|t| t.elapsed).max().unwrap();
    outcome(
        hits >= 90 && slowest < Duration::from_secs(1),
        format!("{hits}/100 within 3 epochs, slowest trial {slowest:?}"),
    )
}

fn stopping_rule(trials: &[KneeTrial]) -> Outcome {
    let mut violations = 0;
    let mut knee_stops = 0;
    for t in trials {
        for d in &t.decisions {
            match (d.verdict, d.reason, d.knee) {
                (Verdict::Stop, Some(StopReason::Knee), Some(k)) => {
                    knee_stops += 1;
                    if d.epoch as f64 <= k + 10.0 {
                        violations += 1;
                    }
                }
                (Verdict::Stop, Some(StopReason::Knee), None) => violations += 1,
                // a continue past knee + T would also break the rule
                (Verdict::Continue, _, Some(k)) if d.epoch as f64 > k + 10.0 => violations += 1,
                _ => {}
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over {knee_stops} knee stops"),
    )
}

// -------------------------------------------------------------- fitting

fn reference_alpha(family: CurveFamily) -> Vec<f64> {
    match family {
        CurveFamily::Power => vec![0.75, -0.45, -0.8, 0.0015, -2.5e-5],
        CurveFamily::MultiPower => vec![0.75, -0.3, -0.6, -0.15, -1.6, 0.0015, -2.5e-5],
        CurveFamily::Exponential => vec![0.8, -0.3, -0.2, 0.004, -0.0001],
        CurveFamily::MultiExponential => vec![0.78, -0.25, -0.08, -0.15, -0.5, 0.002, -4e-5],
    }
}

fn sample(family: CurveFamily, alpha: &[f64], sigma: f64, seed: u64) -> ObservationSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..=60u32)
        .map(|t| {
            let y = curvefit::evaluate(family, alpha, t as f64).unwrap();
            let z = if sigma > 0.0 {
                Normal::new(0.0, sigma).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            (t, (y + z).clamp(0.0, 1.0))
        })
        .collect();
    ObservationSeries::new(pts).unwrap()
}

fn fit_quality() -> Outcome {
    let sigma = 1e-3;
    let mut passed = true;
    let mut parts = Vec::new();
    for family in CurveFamily::ALL {
        let alpha = reference_alpha(family);
        let exact = curvefit::fit(&sample(family, &alpha, 0.0, 0), family)
            .map(|f| f.rmse)
            .unwrap_or(f64::INFINITY);
        let noisy: f64 = (0..100)
            .map(|seed| {
                curvefit::fit(&sample(family, &alpha, sigma, 1000 + seed), family)
                    .map(|f| f.rmse)
                    .unwrap_or(f64::INFINITY)
            })
            .sum::<f64>()
            / 100.0;
        passed &= exact <= 1e-6 && (0.5 * sigma..=2.0 * sigma).contains(&noisy);
        parts.push(format!("{family} exact {exact:.1e} noisy {noisy:.3e}"));
    }
    outcome(passed, parts.join("; "))
}

fn random_alpha(family: CurveFamily, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let neg = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -10f64.powf(rng.random_range(lo..hi));
    let mut a = vec![0.0; family.n_params()];
    a[0] = rng.random_range(-1.0..2.0);
    for k in 0..(family.n_params() - 3) / 2 {
        a[1 + 2 * k] = neg(rng, -4.0, 1.0);
        a[2 + 2 * k] = neg(rng, -4.0, 0.5);
    }
    let lin = family.n_params() - 2;
    a[lin] = rng.random_range(-0.05..0.05);
    a[lin + 1] = neg(rng, -7.0, -2.0);
    a
}

fn unimodality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b0e);
    let mut violations = 0;
    let mut draws = 0;
    for family in CurveFamily::ALL {
        for _ in 0..1000 {
            let alpha = random_alpha(family, &mut rng);
            draws += 1;
            if !family.satisfies_constraints(&alpha) {
                violations += 1;
                continue;
            }
            let slopes: Vec<f64> = (0..=4000)
                .map(|i| curvefit::derivative(family, &alpha, i as f64 * 0.1).unwrap())
                .collect();
            let decreasing = slopes.windows(2).all(|w| w[1] < w[0]);
            let changes = slopes.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count();
            if !decreasing || changes > 1 {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations in {draws} draws"))
}

// ------------------------------------------------------------------ DP

fn sim_trainer(scenario: &Scenario, seed: u64) -> Result<Box<dyn Trainer>, ProtocolError> {
    Ok(Box::new(connect_local(scenario, "acceptance", seed)?))
}

fn explore(scenario: &Scenario, seed: u64, g: &TransitionGraph, from: StateId, to: StateId, ckpt: &str) -> TransitionRecord {
    let mut t = sim_trainer(scenario, seed).unwrap();
    let start = if from == StateId::INITIAL {
        t.initial_checkpoint().to_string()
    } else {
        ckpt.to_string()
    };
    explore_transition(g, from, to, &start, t.as_mut(), &StopperConfig::default(), &mut |_| {}).unwrap()
}

#[derive(Clone)]
struct Best {
    value: f64,
    cumulative: u64,
    pred: StateId,
    ckpt: String,
}

/// Top-down memoised recursion with the same per-edge stopping.
fn recursive_best(
    scenario: &Scenario,
    seed: u64,
    g: &TransitionGraph,
    s: StateId,
    memo: &mut BTreeMap<StateId, Option<Best>>,
) -> Option<Best> {
    if let Some(b) = memo.get(&s) {
        return b.clone();
    }
    let mut best: Option<Best> = None;
    for p in g.predecessors(s) {
        let (ckpt, cum) = if p == StateId::INITIAL {
            (String::new(), 0)
        } else {
            match recursive_best(scenario, seed, g, p, memo) {
                Some(b) => (b.ckpt, b.cumulative),
                None => continue,
            }
        };
        let r = explore(scenario, seed, g, p, s, &ckpt);
        let cand = Best {
            value: r.value,
            cumulative: cum + r.chosen_epoch as u64,
            pred: p,
            ckpt: r.checkpoint_ref,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                cand.value > b.value
                    || (cand.value == b.value
                        && (cand.cumulative < b.cumulative || (cand.cumulative == b.cumulative && cand.pred < b.pred)))
            }
        };
        if better {
            best = Some(cand);
        }
    }
    memo.insert(s, best.clone());
    best
}

/// Every root-to-final path, each hop re-simulated from the previous hop's
/// chosen checkpoint. Returns (value of last hop, path).
fn enumerate_paths(scenario: &Scenario, seed: u64, g: &TransitionGraph) -> Vec<(f64, Vec<StateId>)> {
    let finals = g.final_states();
    let mut out = Vec::new();
    let mut stack = vec![(vec![StateId::INITIAL], String::new(), f64::NAN)];
    while let Some((path, ckpt, value)) = stack.pop() {
        let last = *path.last().unwrap();
        if finals.contains(&last) {
            out.push((value, path.clone()));
        }
        for next in g.successors(last) {
            let r = explore(scenario, seed, g, last, next, &ckpt);
            let mut p = path.clone();
            p.push(next);
            stack.push((p, r.checkpoint_ref, r.value));
        }
    }
    out
}

fn plan_with(
    scenario: &Scenario,
    seed: u64,
    g: &TransitionGraph,
    ledger_path: &Path,
) -> Result<OptimizationPlan, PlanError> {
    let cfg = PlannerConfig {
        seed,
        ..PlannerConfig::default()
    };
    let factory = || sim_trainer(scenario, seed);
    let mut ledger = Ledger::create(ledger_path, &cfg.run_id).unwrap();
    planner::plan(g, &factory, &cfg, &mut ledger, &[])
}

fn dp_correctness() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let g = build_graph(&GraphSpec::new(vec![8, 16], vec![0.1, 0.01], Sampling::ALL.to_vec(), GraphMode::Basic)).unwrap();
    let mut failures = Vec::new();
    let mut runs = 0;
    for name in ["kinetics-like", "ssv-like", "skip-middle-clip"] {
        let scenario = Scenario::builtin(name).unwrap();
        for seed in 0..10 {
            runs += 1;
            let plan = plan_with(&scenario, seed, &g, &dir.path().join("dp.jsonl")).unwrap();

            let mut memo = BTreeMap::new();
            let oracle = g
                .final_states()
                .into_iter()
                .filter_map(|f| recursive_best(&scenario, seed, &g, f, &mut memo).map(|b| (f, b)))
                .max_by(|(fa, a), (fb, b)| {
                    a.value
                        .total_cmp(&b.value)
                        .then(b.cumulative.cmp(&a.cumulative))
                        .then(fb.cmp(fa))
                })
                .unwrap();
            if oracle.1.value != plan.final_value || Some(&oracle.0) != plan.path.last() {
                failures.push(format!("{name}/{seed}: dp {} vs recursion {}", plan.final_value, oracle.1.value));
            }

            let paths = enumerate_paths(&scenario, seed, &g);
            let (best_value, best_path) = paths
                .iter()
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .cloned()
                .unwrap();
            if plan.final_value < best_value {
                failures.push(format!(
                    "{name}/{seed}: dp {} below enumerated {best_value} via {best_path:?}",
                    plan.final_value
                ));
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(300),
        if failures.is_empty() {
            format!("{runs} seeded runs match recursion and exhaustive enumeration in {elapsed:.1?}")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------- resumability

fn resumability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::builtin("kinetics-like").unwrap();
    let g = build_graph(&GraphSpec::new(vec![8, 16], vec![0.1, 0.01], vec![Sampling::Consecutive], GraphMode::Basic))
        .unwrap();
    let full_path = dir.path().join("full.jsonl");
    let reference = plan_with(&scenario, 3, &g, &full_path).unwrap().to_document();
    let text = std::fs::read_to_string(&full_path).unwrap();
    let lines: Vec<&str> = text.split_inclusive('\n').collect();

    let cfg = PlannerConfig {
        seed: 3,
        ..PlannerConfig::default()
    };
    let factory = || sim_trainer(&scenario, 3);
    let cut_path = dir.path().join("cut.jsonl");
    let mut cuts = 0;
    let mut mismatches = Vec::new();
    for k in 0..=lines.len() {
        // clean cut after event k, and a torn write of event k + 1
        let mut variants = vec![lines[..k].concat()];
        if k < lines.len() {
            variants.push(format!("{}{}", lines[..k].concat(), &lines[k][..lines[k].len() / 2]));
        }
        for prefix in variants {
            cuts += 1;
            std::fs::write(&cut_path, &prefix).unwrap();
            let (mut ledger, prior) = Ledger::resume(&cut_path, &cfg.run_id).unwrap();
            let doc = planner::plan(&g, &factory, &cfg, &mut ledger, &prior).map(|p| p.to_document());
            if doc.as_ref().ok() != Some(&reference) {
                mismatches.push(k);
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "{} of {cuts} cut points over {} events reproduce the plan{}",
            cuts - mismatches.len(),
            lines.len(),
            if mismatches.is_empty() {
                String::new()
            } else {
                format!(", failing after events {mismatches:?}")
            }
        ),
    )
}

// ------------------------------------------------------------ behaviour

fn qualitative_paths() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let g = build_graph(&GraphSpec::new(
        vec![8, 16, 32],
        vec![0.1, 0.01, 0.001],
        Sampling::ALL.to_vec(),
        GraphMode::Basic,
    ))
    .unwrap();
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, want) in [("ssv-like", Sampling::Uniform), ("kinetics-like", Sampling::Consecutive)] {
        let scenario = Scenario::builtin(name).unwrap();
        let plan = plan_with(&scenario, 0, &g, &dir.path().join("q.jsonl")).unwrap();
        passed &= plan.winning_strategy == want;
        parts.push(format!("{name} -> {} ({:.4})", plan.winning_strategy, plan.final_value));
    }
    outcome(passed, parts.join("; "))
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let trials = knee_trials();
    let criteria: Vec<Criterion> = vec![
        ("graph-construction", Box::new(graph_construction)),
        ("knee-estimation", Box::new(|| knee_estimation(&trials))),
        ("stopping-rule", Box::new(|| stopping_rule(&trials))),
        ("fit-quality", Box::new(fit_quality)),
        ("unimodality", Box::new(unimodality)),
        ("dp-correctness", Box::new(dp_correctness)),
        ("resumability", Box::new(resumability)),
        ("qualitative-path", Box::new(qualitative_paths)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
