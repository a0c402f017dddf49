//! Line-delimited JSON protocol between the planner and a trainer.
//!
//! Every message is one compact JSON object followed by `\n`. Requests carry
//! a strictly increasing `id`; the trainer answers each request with exactly
//! one response echoing that id. Unknown fields are ignored when reading.
//!
//! ```text
//! > {"id":1,"type":"init","run_id":"demo","seed":7}
//! < {"id":1,"type":"ready","capabilities":{"name":"optplan-sim","protocol_version":1,"initial_checkpoint":"init"}}
//! > {"id":2,"type":"train_epoch","checkpoint_ref":"init","hyperparams":{...},"epoch_index":1}
//! < {"id":2,"type":"trained","checkpoint_ref":"init/C0.0@1","metric":0.31}
//! > {"id":3,"type":"release_checkpoint","checkpoint_ref":"bogus"}
//! < {"id":3,"type":"error","code":"unknown_checkpoint","message":"..."}
//! > {"id":4,"type":"shutdown"}
//! < {"id":4,"type":"goodbye"}
//! ```

pub mod conformance;
mod transport;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{HyperParams, Sampling, TransitionGraph};

pub use transport::{ChildProcess, LocalTransport, TcpTransport, Transport};

pub const PROTOCOL_VERSION: u32 = 1;

/// Default per-request timeout.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3600);

pub mod codes {
    pub const UNKNOWN_CHECKPOINT: &str = "unknown_checkpoint";
    pub const MALFORMED_REQUEST: &str = "malformed_request";
    pub const NOT_INITIALIZED: &str = "not_initialized";
    pub const INVALID_HYPERPARAMS: &str = "invalid_hyperparams";
    pub const INTERNAL: &str = "internal";
}

/// Hyper-parameters as sent to the trainer: resolved values plus indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireHyperParams {
    pub sampling: Sampling,
    pub clip_len: u32,
    pub learning_rate: f64,
    pub clip_len_idx: usize,
    pub lr_idx: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl WireHyperParams {
    pub fn resolve(graph: &TransitionGraph, params: &HyperParams) -> Self {
        WireHyperParams {
            sampling: params.sampling,
            clip_len: graph.clip_lens()[params.clip_len_idx],
            learning_rate: graph.learning_rates()[params.lr_idx],
            clip_len_idx: params.clip_len_idx,
            lr_idx: params.lr_idx,
            extra: params.extra.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainerRequest {
    Init {
        run_id: String,
        seed: u64,
    },
    TrainEpoch {
        checkpoint_ref: String,
        hyperparams: WireHyperParams,
        epoch_index: u32,
    },
    Evaluate {
        checkpoint_ref: String,
    },
    ReleaseCheckpoint {
        checkpoint_ref: String,
    },
    Shutdown {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub name: String,
    pub protocol_version: u32,
    /// Checkpoint that transitions out of the initial state start from.
    pub initial_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainerResponse {
    Ready { capabilities: Capabilities },
    Trained { checkpoint_ref: String, metric: f64 },
    Evaluated { metric: f64 },
    Released {},
    Goodbye {},
    Error { code: String, message: String },
}

impl TrainerResponse {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        TrainerResponse::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            TrainerResponse::Ready { .. } => "ready",
            TrainerResponse::Trained { .. } => "trained",
            TrainerResponse::Evaluated { .. } => "evaluated",
            TrainerResponse::Released {} => "released",
            TrainerResponse::Goodbye {} => "goodbye",
            TrainerResponse::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub body: TrainerRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(flatten)]
    pub body: TrainerResponse,
}

impl Request {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn decode(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

impl Response {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }

    pub fn decode(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("i/o error talking to trainer: {0}")]
    Io(#[from] std::io::Error),
    #[error("trainer connection lost")]
    ConnectionLost,
    #[error("no response from trainer within {0:?}")]
    Timeout(Duration),
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error("trainer error `{code}`: {message}")]
    Remote { code: String, message: String },
    #[error("trainer not initialized")]
    NotInitialized,
}

/// Answers decoded requests; implemented by trainers.
pub trait TrainerService {
    fn handle(&mut self, request: &TrainerRequest) -> TrainerResponse;
}

/// Decodes one request line and encodes the service's answer.
///
/// Undecodable lines get an `error` response; the id is recovered from the
/// raw JSON when possible and is 0 otherwise.
pub fn handle_line<S: TrainerService + ?Sized>(service: &mut S, line: &str) -> String {
    match Request::decode(line) {
        Ok(req) => Response {
            id: req.id,
            body: service.handle(&req.body),
        }
        .encode(),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
                .unwrap_or(0);
            Response {
                id,
                body: TrainerResponse::error(codes::MALFORMED_REQUEST, e.to_string()),
            }
            .encode()
        }
    }
}

/// Serves requests from `reader` until EOF or an acknowledged shutdown.
pub fn serve<S, R, W>(service: &mut S, reader: R, mut writer: W) -> std::io::Result<()>
where
    S: TrainerService + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let out = handle_line(service, &line);
        writer.write_all(out.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if matches!(Response::decode(&out), Ok(Response { body: TrainerResponse::Goodbye {}, .. })) {
            break;
        }
    }
    Ok(())
}

/// Operations the planner needs from a trainer.
pub trait Trainer: Send {
    /// Checkpoint to fine-tune from when leaving the initial state.
    fn initial_checkpoint(&self) -> &str;
    fn train_epoch(
        &mut self,
        checkpoint_ref: &str,
        hyperparams: &WireHyperParams,
        epoch_index: u32,
    ) -> Result<(String, f64), ProtocolError>;
    fn evaluate(&mut self, checkpoint_ref: &str) -> Result<f64, ProtocolError>;
    fn release(&mut self, checkpoint_ref: &str) -> Result<(), ProtocolError>;
    fn shutdown(&mut self) -> Result<(), ProtocolError>;
}

/// Request/response client over any [`Transport`].
pub struct TrainerClient<T: Transport> {
    transport: T,
    next_id: u64,
    timeout: Duration,
    capabilities: Option<Capabilities>,
}

impl<T: Transport> TrainerClient<T> {
    pub fn new(transport: T) -> Self {
        TrainerClient {
            transport,
            next_id: 1,
            timeout: DEFAULT_TIMEOUT,
            capabilities: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn capabilities(&self) -> Option<&Capabilities> {
        self.capabilities.as_ref()
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// Sends one request and waits for its response.
    pub fn send_request(&mut self, body: TrainerRequest) -> Result<TrainerResponse, ProtocolError> {
        if self.capabilities.is_none() && !matches!(body, TrainerRequest::Init { .. }) {
            return Err(ProtocolError::NotInitialized);
        }
        let id = self.next_id;
        self.next_id += 1;
        let request = Request { id, body };
        self.transport.send_line(&request.encode())?;
        let line = self.transport.recv_line(self.timeout)?;
        let response = Response::decode(&line)
            .map_err(|e| ProtocolError::Violation(format!("malformed response `{}`: {e}", truncate(&line))))?;
        if response.id != id {
            return Err(ProtocolError::Violation(format!(
                "response id {} does not match request id {id}",
                response.id
            )));
        }
        Ok(response.body)
    }

    pub fn init(&mut self, run_id: &str, seed: u64) -> Result<Capabilities, ProtocolError> {
        let body = TrainerRequest::Init {
            run_id: run_id.to_string(),
            seed,
        };
        match self.send_request(body)? {
            TrainerResponse::Ready { capabilities } => {
                self.capabilities = Some(capabilities.clone());
                Ok(capabilities)
            }
            other => Err(unexpected("ready", other)),
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(120) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn unexpected(wanted: &str, got: TrainerResponse) -> ProtocolError {
    match got {
        TrainerResponse::Error { code, message } => ProtocolError::Remote { code, message },
        other => ProtocolError::Violation(format!("expected `{wanted}`, got `{}`", other.kind())),
    }
}

fn check_metric(metric: f64) -> Result<f64, ProtocolError> {
    if metric.is_finite() && (0.0..=1.0).contains(&metric) {
        Ok(metric)
    } else {
        Err(ProtocolError::Violation(format!("metric {metric} outside [0, 1]")))
    }
}

impl<T: Transport> Trainer for TrainerClient<T> {
    fn initial_checkpoint(&self) -> &str {
        self.capabilities
            .as_ref()
            .map(|c| c.initial_checkpoint.as_str())
            .unwrap_or("")
    }

    fn train_epoch(
        &mut self,
        checkpoint_ref: &str,
        hyperparams: &WireHyperParams,
        epoch_index: u32,
    ) -> Result<(String, f64), ProtocolError> {
        let body = TrainerRequest::TrainEpoch {
            checkpoint_ref: checkpoint_ref.to_string(),
            hyperparams: hyperparams.clone(),
            epoch_index,
        };
        match self.send_request(body)? {
            TrainerResponse::Trained {
                checkpoint_ref: fresh,
                metric,
            } => {
                if fresh == checkpoint_ref {
                    return Err(ProtocolError::Violation("trained checkpoint reuses the input ref".into()));
                }
                Ok((fresh, check_metric(metric)?))
            }
            other => Err(unexpected("trained", other)),
        }
    }

    fn evaluate(&mut self, checkpoint_ref: &str) -> Result<f64, ProtocolError> {
        let body = TrainerRequest::Evaluate {
            checkpoint_ref: checkpoint_ref.to_string(),
        };
        match self.send_request(body)? {
            TrainerResponse::Evaluated { metric } => check_metric(metric),
            other => Err(unexpected("evaluated", other)),
        }
    }

    fn release(&mut self, checkpoint_ref: &str) -> Result<(), ProtocolError> {
        let body = TrainerRequest::ReleaseCheckpoint {
            checkpoint_ref: checkpoint_ref.to_string(),
        };
        match self.send_request(body)? {
            TrainerResponse::Released {} => Ok(()),
            other => Err(unexpected("released", other)),
        }
    }

    fn shutdown(&mut self) -> Result<(), ProtocolError> {
        match self.send_request(TrainerRequest::Shutdown {})? {
            TrainerResponse::Goodbye {} => Ok(()),
            other => Err(unexpected("goodbye", other)),
        }
    }
}
