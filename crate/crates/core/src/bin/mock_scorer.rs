//! Test double for the external scoring protocol.
//!
//! Answers every request with `logprob = -n`, `num_tokens = n`, where `n` is
//! the token count of the text. Modes inject faults:
//!
//! - `length` (default): answer in order.
//! - `shuffle --block N`: collect N requests, answer them in reverse.
//! - `malformed`: answer with a line that is not JSON.
//! - `crash-once --crash-marker PATH`: if PATH is absent, create it and exit
//!   on the first request; otherwise behave like `length`.
//! - `no-ready`: never signal readiness.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use picl_core::corpus::count_tokens;
use serde_json::{json, Value};

fn answer(out: &mut impl Write, req: &Value) -> io::Result<()> {
    let id = req["id"].as_u64().unwrap_or(u64::MAX);
    let n = count_tokens(req["text"].as_str().unwrap_or(""));
    writeln!(out, "{}", json!({"id": id, "logprob": -(n as f64), "num_tokens": n}))?;
    out.flush()
}

fn main() -> io::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut mode = "length".to_string();
    let mut block = 1usize;
    let mut marker: Option<PathBuf> = None;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--block" => {
                block = args.get(i + 1).and_then(|s| s.parse().ok()).unwrap_or(1).max(1);
                i += 1;
            }
            "--crash-marker" => {
                marker = args.get(i + 1).map(PathBuf::from);
                i += 1;
            }
            m => mode = m.to_string(),
        }
        i += 1;
    }

    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    if mode == "no-ready" {
        for _ in stdin.lock().lines() {}
        return Ok(());
    }
    writeln!(out, "{}", json!({"ready": true}))?;
    out.flush()?;

    let crash = mode == "crash-once" && marker.as_ref().is_some_and(|m| !m.exists());
    let mut held: Vec<Value> = Vec::new();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if crash {
            if let Some(m) = &marker {
                std::fs::write(m, b"crashed")?;
            }
            std::process::exit(17);
        }
        let req: Value = serde_json::from_str(&line).unwrap_or(Value::Null);
        match mode.as_str() {
            "malformed" => {
                writeln!(out, "this is not json")?;
                out.flush()?;
            }
            "shuffle" => {
                held.push(req);
                if held.len() == block {
                    for r in held.drain(..).rev() {
                        answer(&mut out, &r)?;
                    }
                }
            }
            _ => answer(&mut out, &req)?,
        }
    }
    for r in held.drain(..).rev() {
        answer(&mut out, &r)?;
    }
    Ok(())
}
