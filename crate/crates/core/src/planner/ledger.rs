//! Append-only JSON-lines run ledger.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{OptimizationPlan, StateBest, TransitionRecord};
use crate::graph::{GraphSpec, StateId};
use crate::protocol::WireHyperParams;
use crate::stopper::{StopDecision, StopperConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEvent {
    RunStarted {
        graph: GraphSpec,
        stopper: StopperConfig,
        seed: u64,
    },
    TransitionStarted {
        from: StateId,
        to: StateId,
        from_checkpoint: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from_hyperparams: Option<WireHyperParams>,
        to_hyperparams: WireHyperParams,
        attempt: u32,
    },
    EpochObserved {
        from: StateId,
        to: StateId,
        checkpoint_ref: String,
        metric: f64,
        decision: StopDecision,
    },
    TransitionStopped {
        record: TransitionRecord,
    },
    TransitionFailed {
        from: StateId,
        to: StateId,
        attempts: u32,
        error: String,
    },
    /// `best` is absent when no transition into the state succeeded.
    StateResolved {
        state: StateId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        best: Option<StateBest>,
    },
    PlanExtracted {
        plan: OptimizationPlan,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub run_id: String,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub event: LedgerEvent,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger i/o: {0}")]
    Io(#[from] io::Error),
    #[error("ledger line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("ledger belongs to run `{found}`, not `{expected}`")]
    RunMismatch { expected: String, found: String },
}

/// Parsed ledger contents.
#[derive(Debug, Clone, Default)]
pub struct LedgerContents {
    pub entries: Vec<LedgerEntry>,
    /// Byte length of the well-formed prefix.
    pub valid_len: u64,
    /// A partial final line was dropped.
    pub truncated: bool,
}

/// Reads a ledger, tolerating a torn final line.
pub fn read_ledger(path: &Path) -> Result<LedgerContents, LedgerError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(LedgerContents::default()),
        Err(e) => return Err(e.into()),
    };
    parse_ledger(BufReader::new(file))
}

pub fn parse_ledger<R: BufRead>(mut reader: R) -> Result<LedgerContents, LedgerError> {
    let mut out = LedgerContents::default();
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.last() == Some(&b'\n');
        let text = String::from_utf8_lossy(&buf);
        let trimmed = text.trim();
        if trimmed.is_empty() {
            if complete {
                out.valid_len += n as u64;
            }
            continue;
        }
        match serde_json::from_str::<LedgerEntry>(trimmed) {
            Ok(entry) if complete => {
                out.entries.push(entry);
                out.valid_len += n as u64;
            }
            // a complete-looking record without its newline is still torn
            Ok(_) => {
                out.truncated = true;
                break;
            }
            Err(e) => {
                let mut rest = Vec::new();
                reader.read_to_end(&mut rest)?;
                if rest.iter().all(|b| b.is_ascii_whitespace()) {
                    out.truncated = true;
                    break;
                }
                return Err(LedgerError::Corrupt {
                    line: line_no,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Append handle; every event is flushed before `append` returns.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    file: File,
    run_id: String,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Ledger {
    /// Starts an empty ledger, discarding any previous contents.
    pub fn create(path: &Path, run_id: &str) -> Result<Self, LedgerError> {
        let file = File::create(path)?;
        Ok(Ledger {
            path: path.to_path_buf(),
            file,
            run_id: run_id.to_string(),
        })
    }

    /// Opens an existing ledger for appending and returns its events.
    ///
    /// A torn final line is cut off so new events start on a fresh line.
    pub fn resume(path: &Path, run_id: &str) -> Result<(Self, Vec<LedgerEntry>), LedgerError> {
        let contents = read_ledger(path)?;
        if let Some(other) = contents.entries.iter().find(|e| e.run_id != run_id) {
            return Err(LedgerError::RunMismatch {
                expected: run_id.to_string(),
                found: other.run_id.clone(),
            });
        }
        let mut file = OpenOptions::new().create(true).truncate(false).write(true).open(path)?;
        if contents.truncated {
            log::warn!("dropping torn final ledger line in {}", path.display());
        }
        file.set_len(contents.valid_len)?;
        file.seek(SeekFrom::End(0))?;
        Ok((
            Ledger {
                path: path.to_path_buf(),
                file,
                run_id: run_id.to_string(),
            },
            contents.entries,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn append(&mut self, event: LedgerEvent) -> Result<(), LedgerError> {
        let entry = LedgerEntry {
            run_id: self.run_id.clone(),
            ts_ms: now_ms(),
            event,
        };
        let mut line = serde_json::to_string(&entry).expect("ledger entries serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}
