//! Client side of the external-model wire protocol.
//!
//! An adapter is a child process speaking line-delimited JSON over
//! stdin/stdout:
//!
//! ```text
//! request:  {"id":"<string>","task":"correct","input":"<text>"}
//! response: {"id":"<same>","output":"<text>"}
//!           {"id":"<same>","error":"<message>"}
//!           {"id":null,"error":"parse"}
//! ```
//!
//! Requests are pipelined; responses may arrive in any order and are matched
//! back to inputs by id. The batch gives up on outstanding items once the
//! adapter has been silent for the configured timeout.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterEndpoint {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Longest tolerated silence while responses are outstanding.
    pub timeout: Duration,
}

impl AdapterEndpoint {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter command is empty")]
    EmptyCommand,
    #[error("failed to launch adapter {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("adapter i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Why one item of a batch has no output.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ItemErrorKind {
    #[error("no response before timeout")]
    Timeout,
    #[error("adapter exited before responding")]
    Closed,
    #[error("adapter reported: {0}")]
    Remote(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("item {index}: {kind}")]
pub struct ItemError {
    pub index: usize,
    pub kind: ItemErrorKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchResult {
    pub outputs: Vec<Result<String, ItemError>>,
    /// Response lines that could not be attributed to a pending request:
    /// unparseable lines, unknown or repeated ids, `{"id":null,...}`.
    pub stray_lines: Vec<String>,
}

impl BatchResult {
    pub fn error_count(&self) -> usize {
        self.outputs.iter().filter(|o| o.is_err()).count()
    }
}

#[derive(Serialize)]
struct Request<'a> {
    id: &'a str,
    task: &'a str,
    input: &'a str,
}

/// Renders one request record.
pub fn request_line(id: &str, task: &str, input: &str) -> String {
    serde_json::to_string(&Request { id, task, input }).expect("request serializes")
}

/// A parsed response record.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Response {
    pub id: Option<String>,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn parse_response(line: &str) -> Option<Response> {
    let v: Value = serde_json::from_str(line).ok()?;
    if !v.is_object() {
        return None;
    }
    serde_json::from_value(v).ok()
}

/// A running adapter process.
pub struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    reader: Option<JoinHandle<()>>,
}

impl Session {
    pub fn spawn(endpoint: &AdapterEndpoint) -> Result<Self, AdapterError> {
        let (program, args) = endpoint.command.split_first().ok_or(AdapterError::EmptyCommand)?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| AdapterError::Spawn {
                command: endpoint.command.join(" "),
                source,
            })?;
        let stdout = child.stdout.take().expect("stdout piped");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        let reader = thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            reader: Some(reader),
        })
    }

    /// Writes one raw line (a newline is appended) and flushes.
    pub fn send_line(&mut self, line: &str) -> std::io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed"))?;
        stdin.write_all(line.as_bytes())?;
        stdin.write_all(b"\n")?;
        stdin.flush()
    }

    pub fn recv(&self, timeout: Duration) -> Result<String, RecvTimeoutError> {
        self.lines.recv_timeout(timeout)
    }

    /// Closes stdin so the adapter sees EOF.
    pub fn close_input(&mut self) {
        self.stdin.take();
    }

    /// Closes stdin and waits up to `grace` for a clean exit, killing the
    /// process otherwise. Returns the exit status if it exited on its own.
    pub fn finish(mut self, grace: Duration) -> Option<ExitStatus> {
        self.close_input();
        let step = Duration::from_millis(5);
        let mut waited = Duration::ZERO;
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if waited < grace => {
                    thread::sleep(step);
                    waited += step;
                }
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    break None;
                }
            }
        };
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
        status
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.reader.is_some() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

/// Sends every input as task `task` through one adapter process.
pub fn run_batch(endpoint: &AdapterEndpoint, task: &str, inputs: &[String]) -> Result<BatchResult, AdapterError> {
    let mut session = Session::spawn(endpoint)?;
    let mut stdin = session.stdin.take().expect("fresh session has stdin");
    let requests: Vec<String> = inputs
        .iter()
        .enumerate()
        .map(|(i, input)| request_line(&i.to_string(), task, input))
        .collect();
    let writer = thread::spawn(move || -> std::io::Result<()> {
        for r in requests {
            stdin.write_all(r.as_bytes())?;
            stdin.write_all(b"\n")?;
            stdin.flush()?;
        }
        Ok(())
    });

    let mut outputs: Vec<Option<Result<String, ItemError>>> = vec![None; inputs.len()];
    let mut pending: HashMap<String, usize> = (0..inputs.len()).map(|i| (i.to_string(), i)).collect();
    let mut stray_lines = Vec::new();
    let mut closed = false;
    while !pending.is_empty() {
        match session.recv(endpoint.timeout) {
            Ok(line) => {
                let Some(resp) = parse_response(&line) else {
                    stray_lines.push(line);
                    continue;
                };
                let Some(index) = resp.id.as_ref().and_then(|id| pending.remove(id)) else {
                    stray_lines.push(line);
                    continue;
                };
                let result = match (resp.output, resp.error) {
                    (Some(out), None) => Ok(out),
                    (_, Some(err)) => Err(ItemErrorKind::Remote(err)),
                    (None, None) => Err(ItemErrorKind::Malformed(line)),
                };
                outputs[index] = Some(result.map_err(|kind| ItemError { index, kind }));
            }
            Err(RecvTimeoutError::Timeout) => break,
            Err(RecvTimeoutError::Disconnected) => {
                closed = true;
                break;
            }
        }
    }
    // a writer blocked on a full pipe is released once the child is gone
    session.finish(if pending.is_empty() { Duration::from_secs(2) } else { Duration::ZERO });
    let _ = writer.join();

    let outputs = outputs
        .into_iter()
        .enumerate()
        .map(|(index, o)| {
            o.unwrap_or_else(|| {
                let kind = if closed { ItemErrorKind::Closed } else { ItemErrorKind::Timeout };
                Err(ItemError { index, kind })
            })
        })
        .collect();
    Ok(BatchResult { outputs, stray_lines })
}

/// Splits `inputs` into `lanes` contiguous chunks, each served by its own
/// adapter process, and reassembles results in input order.
pub fn run_lanes(
    endpoint: &AdapterEndpoint,
    task: &str,
    inputs: &[String],
    lanes: usize,
) -> Result<BatchResult, AdapterError> {
    let lanes = lanes.max(1).min(inputs.len().max(1));
    let chunk = inputs.len().div_ceil(lanes).max(1);
    let results: Vec<Result<BatchResult, AdapterError>> = thread::scope(|s| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| s.spawn(move || run_batch(endpoint, task, part)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("lane thread panicked")).collect()
    });
    let mut merged = BatchResult::default();
    let mut offset = 0;
    for r in results {
        let r = r?;
        let n = r.outputs.len();
        merged.outputs.extend(r.outputs.into_iter().map(|o| {
            o.map_err(|e| ItemError {
                index: e.index + offset,
                kind: e.kind,
            })
        }));
        merged.stray_lines.extend(r.stray_lines);
        offset += n;
    }
    Ok(merged)
}

/// Corrects `texts` through the adapter (task `correct`). One result per
/// input, in input order.
pub fn correct_with_adapter(
    texts: &[String],
    endpoint: &AdapterEndpoint,
) -> Result<Vec<Result<String, ItemError>>, AdapterError> {
    Ok(run_batch(endpoint, "correct", texts)?.outputs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConformanceCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Protocol conformance suite for an adapter running in echo mode.
pub fn conformance_suite(endpoint: &AdapterEndpoint) -> Result<Vec<ConformanceCheck>, AdapterError> {
    let mut checks = Vec::new();

    let inputs: Vec<String> = vec![
        "id like a room".into(),
        "  leading and trailing  ".into(),
        "ünïcödé — 東京 ✓".into(),
        "quote \" and backslash \\".into(),
        String::new(),
    ];
    let batch = run_batch(endpoint, "correct", &inputs)?;
    let echoed: Vec<_> = batch.outputs.iter().map(|o| o.as_deref().ok()).collect();
    let expected: Vec<_> = inputs.iter().map(|s| Some(s.as_str())).collect();
    checks.push(ConformanceCheck {
        name: "echo identity (incl. unicode)",
        passed: echoed == expected && batch.stray_lines.is_empty(),
        detail: format!("{echoed:?}"),
    });

    let many: Vec<String> = (0..200).map(|i| format!("utterance number {i}")).collect();
    let batch = run_batch(endpoint, "correct", &many)?;
    let ok = batch
        .outputs
        .iter()
        .zip(&many)
        .all(|(o, i)| o.as_ref().ok() == Some(i));
    checks.push(ConformanceCheck {
        name: "ids bijective over 200 pipelined requests",
        passed: ok && batch.stray_lines.is_empty(),
        detail: format!("{} errors, {} stray", batch.error_count(), batch.stray_lines.len()),
    });

    let mut session = Session::spawn(endpoint)?;
    session.send_line("not-a-record")?;
    session.send_line(&request_line("after", "correct", "still alive"))?;
    session.close_input();
    let mut seen_parse_error = false;
    let mut seen_followup = false;
    while let Ok(line) = session.recv(endpoint.timeout) {
        match parse_response(&line) {
            Some(Response { id: None, error: Some(_), .. }) => seen_parse_error = true,
            Some(Response { id: Some(id), output: Some(out), .. }) if id == "after" => {
                seen_followup = out == "still alive"
            }
            _ => {}
        }
    }
    let status = session.finish(Duration::from_secs(2));
    checks.push(ConformanceCheck {
        name: "malformed line answered with null id, session continues",
        passed: seen_parse_error && seen_followup,
        detail: format!("parse_error={seen_parse_error} followup={seen_followup}"),
    });
    checks.push(ConformanceCheck {
        name: "clean exit on EOF",
        passed: status.is_some_and(|s| s.success()),
        detail: format!("{status:?}"),
    });
    Ok(checks)
}
