use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::info;
use optplan_core::planner::ledger::read_ledger;
use optplan_core::planner::{self, Ledger, LedgerEvent};
use optplan_core::protocol::{ChildProcess, TcpTransport};
use optplan_core::{
    build_graph, OptimizationPlan, PlanError, PlannerConfig, ProtocolError, Trainer, TrainerClient, TransitionGraph,
};

use crate::config::{PlanConfig, TrainerTarget};

pub struct PlanArgs<'a> {
    pub config: &'a Path,
    pub resume: bool,
    pub workers: usize,
    pub seed: Option<u64>,
}

fn connect(target: &TrainerTarget, timeout: Duration, run_id: &str, seed: u64) -> Result<Box<dyn Trainer>, ProtocolError> {
    let mut trainer: Box<dyn Trainer> = match target {
        TrainerTarget::Command(cmd) => {
            info!("launching trainer {:?}", cmd);
            let mut client = TrainerClient::new(ChildProcess::spawn(cmd)?).with_timeout(timeout);
            client.init(run_id, seed)?;
            Box::new(client)
        }
        TrainerTarget::Tcp(addr) => {
            info!("connecting to trainer at {addr}");
            let mut client = TrainerClient::new(TcpTransport::connect(addr.as_str())?).with_timeout(timeout);
            client.init(run_id, seed)?;
            Box::new(client)
        }
    };
    if trainer.initial_checkpoint().is_empty() {
        let _ = trainer.shutdown();
        return Err(ProtocolError::Violation("trainer announced an empty initial checkpoint".into()));
    }
    Ok(trainer)
}

pub fn run(args: PlanArgs<'_>) -> Result<()> {
    let cfg = PlanConfig::load(args.config)?;
    let graph = build_graph(&cfg.graph).context("invalid graph settings")?;
    let pc = PlannerConfig {
        run_id: cfg.run_id.clone(),
        seed: args.seed.unwrap_or(cfg.seed),
        stopper: cfg.stopper.resolve(),
        workers: args.workers.max(1),
        retries: cfg.retries,
    };
    if let Some(dir) = cfg.ledger.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let (mut ledger, prior) = if args.resume {
        Ledger::resume(&cfg.ledger, &pc.run_id)?
    } else {
        (Ledger::create(&cfg.ledger, &pc.run_id)?, Vec::new())
    };
    info!(
        "{} states, {} edges, {} prior ledger entries",
        graph.states().len(),
        graph.edges().len(),
        prior.len()
    );

    let target = cfg.trainer.target()?;
    let timeout = cfg.trainer.timeout();
    let (run_id, seed) = (pc.run_id.clone(), pc.seed);
    let factory = move || connect(&target, timeout, &run_id, seed);
    let plan = match planner::plan(&graph, &factory, &pc, &mut ledger, &prior) {
        Ok(p) => p,
        Err(PlanError::PlanningFailed) => bail!("{}{}", PlanError::PlanningFailed, failure_list(&cfg.ledger)),
        Err(e) => return Err(e.into()),
    };

    if let Some(dir) = cfg.plan_out.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&cfg.plan_out, plan.to_document())
        .with_context(|| format!("writing {}", cfg.plan_out.display()))?;
    print!("{}", summary(&graph, &plan));
    println!("plan written to {}", cfg.plan_out.display());
    Ok(())
}

/// Failed edges recorded in the ledger, one per line.
fn failure_list(ledger: &Path) -> String {
    let Ok(contents) = read_ledger(ledger) else {
        return String::new();
    };
    let mut out = String::new();
    for entry in contents.entries {
        if let LedgerEvent::TransitionFailed { from, to, attempts, error } = entry.event {
            out.push_str(&format!("\n  {from} -> {to} failed after {attempts} attempt(s): {error}"));
        }
    }
    out
}

pub fn summary(graph: &TransitionGraph, plan: &OptimizationPlan) -> String {
    let mut out = format!(
        "best path ends at {} ({}) with value {:.4} after {} epochs\n",
        plan.path.last().expect("plans are non-empty"),
        plan.winning_strategy,
        plan.final_value,
        plan.total_epochs()
    );
    for (pair, epochs) in plan.path.windows(2).zip(&plan.epochs) {
        out.push_str(&format!(
            "  {:<32} -> {:<32} {:>4} epochs\n",
            graph.describe(pair[0]),
            graph.describe(pair[1]),
            epochs
        ));
    }
    out.push_str(&format!("final checkpoint {}\n", plan.final_checkpoint));
    out
}
