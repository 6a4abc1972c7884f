//! Black-box adapter for models living in another process.
//!
//! The child speaks a line protocol on stdio: one UTF-8 JSON object per
//! line, newline terminated, no pretty-printing. Each request is
//! `{"id":<int>,"text":<string>}`; the matching response is
//! `{"id":<int>,"label":<int>,"probs":[<float>...]?}` with the same id.
//! Responses with a mismatched id or an unparsable line abort the query
//! with a protocol error. Queries are serialized per child; run several
//! adapters for parallelism.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{BlackBoxModel, ModelError};

pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize)]
struct QueryLine<'a> {
    id: u64,
    text: &'a str,
}

#[derive(Deserialize)]
struct ResponseLine {
    id: u64,
    label: usize,
    #[serde(default)]
    probs: Option<Vec<f64>>,
}

struct AdapterState {
    child: Child,
    stdin: ChildStdin,
    responses: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// Query-only handle on a subprocess model. The child is killed when the
/// adapter drops.
pub struct ExternalModel {
    state: Mutex<AdapterState>,
    timeout: Duration,
}

/// Splits a command line on whitespace, honoring single and double quotes.
fn split_command(command_line: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    for c in command_line.chars() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), c) => current.push(c),
            (None, '\'' | '"') => quote = Some(c),
            (None, c) if c.is_whitespace() => {
                if !current.is_empty() {
                    parts.push(std::mem::take(&mut current));
                }
            }
            (None, c) => current.push(c),
        }
    }
    if !current.is_empty() {
        parts.push(current);
    }
    parts
}

/// Spawns `command_line` and wraps it as a [`BlackBoxModel`] with the
/// default per-query timeout.
pub fn connect_external(command_line: &str) -> Result<ExternalModel, ModelError> {
    connect_external_with_timeout(command_line, DEFAULT_QUERY_TIMEOUT)
}

pub fn connect_external_with_timeout(
    command_line: &str,
    timeout: Duration,
) -> Result<ExternalModel, ModelError> {
    let parts = split_command(command_line);
    let (program, args) = parts
        .split_first()
        .ok_or_else(|| ModelError::Spawn(std::io::Error::other("empty command line")))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(ModelError::Spawn)?;
    let stdin = child.stdin.take().expect("stdin was piped");
    let stdout = child.stdout.take().expect("stdout was piped");

    // Reads happen on a dedicated thread so each query can time out
    // instead of blocking forever on a wedged child.
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let reader = BufReader::new(stdout);
        for line in reader.lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    Ok(ExternalModel {
        state: Mutex::new(AdapterState {
            child,
            stdin,
            responses: rx,
            next_id: 0,
        }),
        timeout,
    })
}

impl ExternalModel {
    fn query(&self, text: &str) -> Result<ResponseLine, ModelError> {
        let mut state = self.state.lock().expect("adapter lock poisoned");
        state.next_id += 1;
        let id = state.next_id;
        let mut line = serde_json::to_string(&QueryLine { id, text })
            .map_err(|e| ModelError::Protocol(e.to_string()))?;
        line.push('\n');
        state.stdin.write_all(line.as_bytes())?;
        state.stdin.flush()?;

        let raw = match state.responses.recv_timeout(self.timeout) {
            Ok(Ok(raw)) => raw,
            Ok(Err(e)) => return Err(ModelError::Io(e)),
            Err(RecvTimeoutError::Timeout) => return Err(ModelError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(ModelError::Protocol("child closed stdout".into()))
            }
        };
        let response: ResponseLine = serde_json::from_str(&raw)
            .map_err(|e| ModelError::Protocol(format!("malformed response line: {e}")))?;
        if response.id != id {
            return Err(ModelError::Protocol(format!(
                "response id {} does not match request id {id}",
                response.id
            )));
        }
        Ok(response)
    }
}

impl BlackBoxModel for ExternalModel {
    fn predict(&self, text: &str) -> Result<usize, ModelError> {
        Ok(self.query(text)?.label)
    }

    fn predict_proba(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        self.query(text)?.probs.ok_or(ModelError::NoProbaCapability)
    }
}

impl Drop for ExternalModel {
    fn drop(&mut self) {
        if let Ok(mut state) = self.state.lock() {
            let _ = state.child.kill();
            let _ = state.child.wait();
        }
    }
}
