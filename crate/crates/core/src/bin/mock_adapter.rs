//! Minimal adapter used by the conformance and pipeline tests.
//!
//! Usage: `dstkit-mock-adapter [MODE]...` where MODE is one of
//!
//! * `echo`       return the input verbatim (default)
//! * `upper`      return the input uppercased
//! * `reverse`    buffer everything until EOF, answer in reverse order
//! * `drop=N`     never answer the N-th request (0-based arrival order)
//! * `error=N`    answer the N-th request with an error record
//! * `garbage`    emit an unparseable line before every response
//! * `mismatch`   answer with a foreign id

use std::io::{self, BufRead, Write};

use serde_json::{json, Value};

#[derive(Default)]
struct Modes {
    upper: bool,
    reverse: bool,
    drop: Option<usize>,
    error: Option<usize>,
    garbage: bool,
    mismatch: bool,
}

fn main() -> io::Result<()> {
    let mut modes = Modes::default();
    for arg in std::env::args().skip(1) {
        match arg.as_str() {
            "echo" => {}
            "upper" => modes.upper = true,
            "reverse" => modes.reverse = true,
            "garbage" => modes.garbage = true,
            "mismatch" => modes.mismatch = true,
            a if a.starts_with("drop=") => modes.drop = a[5..].parse().ok(),
            a if a.starts_with("error=") => modes.error = a[6..].parse().ok(),
            other => {
                eprintln!("unknown mode {other:?}");
                std::process::exit(2);
            }
        }
    }

    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut buffered = Vec::new();
    for (n, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        let response = match serde_json::from_str::<Value>(&line) {
            Ok(req) if req.get("id").and_then(Value::as_str).is_some() && req.get("input").is_some() => {
                let id = req["id"].as_str().unwrap_or_default().to_string();
                let input = req["input"].as_str().unwrap_or_default();
                if modes.drop == Some(n) {
                    continue;
                }
                let id = if modes.mismatch { format!("x{id}") } else { id };
                if modes.error == Some(n) {
                    json!({"id": id, "error": "mock failure"})
                } else {
                    let output = if modes.upper { input.to_uppercase() } else { input.to_string() };
                    json!({"id": id, "output": output})
                }
            }
            _ => json!({"id": null, "error": "parse"}),
        };
        if modes.reverse {
            buffered.push(response.to_string());
            continue;
        }
        if modes.garbage {
            writeln!(out, "garbage-line")?;
        }
        writeln!(out, "{response}")?;
        out.flush()?;
    }
    for r in buffered.into_iter().rev() {
        writeln!(out, "{r}")?;
    }
    out.flush()
}
