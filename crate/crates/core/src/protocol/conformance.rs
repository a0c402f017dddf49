//! Golden-transcript checks for trainer implementations.

use std::fmt;
use std::time::Duration;

use super::{
    codes, ChildProcess, ProtocolError, Request, Response, TrainerRequest, TrainerResponse, Transport,
    WireHyperParams,
};
use crate::graph::Sampling;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConformanceReport {
    pub cases: Vec<CaseResult>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn case(&self, name: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &'static str, outcome: Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.cases.push(CaseResult { name, passed, detail });
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(f, "{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn sample_hyperparams() -> WireHyperParams {
    WireHyperParams {
        sampling: Sampling::Consecutive,
        clip_len: 16,
        learning_rate: 0.1,
        clip_len_idx: 0,
        lr_idx: 0,
        extra: Default::default(),
    }
}

struct Session<'a, T: Transport + ?Sized> {
    transport: &'a mut T,
    next_id: u64,
    timeout: Duration,
    id_violations: Vec<String>,
    metrics: Vec<f64>,
}

impl<T: Transport + ?Sized> Session<'_, T> {
    fn exchange(&mut self, line: &str, id: Option<u64>) -> Result<TrainerResponse, String> {
        self.transport.send_line(line).map_err(|e| e.to_string())?;
        let raw = self.transport.recv_line(self.timeout).map_err(|e| e.to_string())?;
        let resp = Response::decode(&raw).map_err(|e| format!("ProtocolViolation: malformed response ({e})"))?;
        if let Some(id) = id {
            if resp.id != id {
                let msg = format!("ProtocolViolation: response id {} for request {id}", resp.id);
                self.id_violations.push(msg.clone());
                return Err(msg);
            }
        }
        match &resp.body {
            TrainerResponse::Trained { metric, .. } | TrainerResponse::Evaluated { metric } => {
                self.metrics.push(*metric)
            }
            _ => {}
        }
        Ok(resp.body)
    }

    fn call(&mut self, body: TrainerRequest) -> Result<TrainerResponse, String> {
        let id = self.next_id;
        self.next_id += 1;
        self.exchange(&Request { id, body }.encode(), Some(id))
    }
}

fn expect_error_code(resp: TrainerResponse, code: &str) -> Result<(), String> {
    match resp {
        TrainerResponse::Error { code: c, .. } if c == code => Ok(()),
        other => Err(format!("expected error `{code}`, got {other:?}")),
    }
}

/// Runs every transcript over an open connection.
///
/// The connection is shut down by the last case.
pub fn run<T: Transport + ?Sized>(transport: &mut T, timeout: Duration) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let mut s = Session {
        transport,
        next_id: 1,
        timeout,
        id_violations: Vec::new(),
        metrics: Vec::new(),
    };

    let mut initial = String::new();
    let handshake = s
        .call(TrainerRequest::Init {
            run_id: "conformance".into(),
            seed: 7,
        })
        .and_then(|r| match r {
            TrainerResponse::Ready { capabilities } if !capabilities.initial_checkpoint.is_empty() => {
                initial = capabilities.initial_checkpoint.clone();
                Ok(format!("{} v{}", capabilities.name, capabilities.protocol_version))
            }
            other => Err(format!("expected ready with an initial checkpoint, got {other:?}")),
        });
    report.push("handshake", handshake);

    let mut refs: Vec<String> = Vec::new();
    let train = (|| {
        let hp = sample_hyperparams();
        let mut current = initial.clone();
        for epoch in 1..=3 {
            let resp = s.call(TrainerRequest::TrainEpoch {
                checkpoint_ref: current.clone(),
                hyperparams: hp.clone(),
                epoch_index: epoch,
            })?;
            let TrainerResponse::Trained { checkpoint_ref, .. } = resp else {
                return Err(format!("epoch {epoch}: expected trained, got {resp:?}"));
            };
            if checkpoint_ref == current || refs.contains(&checkpoint_ref) || checkpoint_ref == initial {
                return Err(format!("epoch {epoch}: checkpoint ref `{checkpoint_ref}` is not fresh"));
            }
            refs.push(checkpoint_ref.clone());
            current = checkpoint_ref;
        }
        Ok(format!("refs {refs:?}"))
    })();
    report.push("train_three_epochs", train);

    let evaluate = (|| {
        let last = refs.last().cloned().ok_or("no checkpoint to evaluate")?;
        match s.call(TrainerRequest::Evaluate { checkpoint_ref: last })? {
            TrainerResponse::Evaluated { metric } => Ok(format!("metric {metric}")),
            other => Err(format!("expected evaluated, got {other:?}")),
        }
    })();
    report.push("evaluate", evaluate);

    let release = (|| {
        let first = refs.first().cloned().ok_or("no checkpoint to release")?;
        match s.call(TrainerRequest::ReleaseCheckpoint {
            checkpoint_ref: first.clone(),
        })? {
            TrainerResponse::Released {} => {}
            other => return Err(format!("expected released, got {other:?}")),
        }
        let again = s.call(TrainerRequest::TrainEpoch {
            checkpoint_ref: first,
            hyperparams: sample_hyperparams(),
            epoch_index: 2,
        })?;
        expect_error_code(again, codes::UNKNOWN_CHECKPOINT).map_err(|e| format!("train on released ref: {e}"))?;
        let unknown = s.call(TrainerRequest::ReleaseCheckpoint {
            checkpoint_ref: "no-such-checkpoint".into(),
        })?;
        expect_error_code(unknown, codes::UNKNOWN_CHECKPOINT).map_err(|e| format!("release unknown ref: {e}"))?;
        Ok("released refs become unknown".into())
    })();
    report.push("release", release);

    let malformed = (|| {
        match s.exchange("this is not json", None)? {
            TrainerResponse::Error { code, .. } => {
                // still serving?
                let id = s.next_id;
                s.next_id += 1;
                let probe = Request {
                    id,
                    body: TrainerRequest::ReleaseCheckpoint {
                        checkpoint_ref: "no-such-checkpoint".into(),
                    },
                };
                s.exchange(&probe.encode(), Some(id))?;
                Ok(format!("answered `{code}` and kept serving"))
            }
            other => Err(format!("expected an error response, got {other:?}")),
        }
    })();
    report.push("malformed_input", malformed);

    let bad: Vec<f64> = s
        .metrics
        .iter()
        .copied()
        .filter(|m| !m.is_finite() || !(0.0..=1.0).contains(m))
        .collect();
    report.push(
        "metric_range",
        if bad.is_empty() && !s.metrics.is_empty() {
            Ok(format!("{} metrics in [0, 1]", s.metrics.len()))
        } else if bad.is_empty() {
            Err("no metrics observed".into())
        } else {
            Err(format!("metrics outside [0, 1]: {bad:?}"))
        },
    );

    let shutdown = s.call(TrainerRequest::Shutdown {}).and_then(|r| match r {
        TrainerResponse::Goodbye {} => Ok("goodbye".to_string()),
        other => Err(format!("expected goodbye, got {other:?}")),
    });
    report.push("shutdown", shutdown);

    report.push(
        "request_ids",
        if s.id_violations.is_empty() {
            Ok("all responses echo their request id".into())
        } else {
            Err(s.id_violations.join("; "))
        },
    );
    report
}

/// Launches `command`, runs the transcripts and checks the process exits
/// after shutdown.
pub fn run_command(command: &[String], timeout: Duration) -> Result<ConformanceReport, ProtocolError> {
    let mut child = ChildProcess::spawn(command)?;
    let mut report = run(&mut child, timeout);
    let exit = match child.wait_exit(Duration::from_secs(5))? {
        Some(status) if status.success() => Ok(format!("exited with {status}")),
        Some(status) => Err(format!("exited with {status}")),
        None => Err("still running 5s after shutdown".into()),
    };
    report.push("clean_exit", exit);
    Ok(report)
}
