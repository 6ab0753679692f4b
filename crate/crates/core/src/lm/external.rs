//! Client for an out-of-process scorer speaking line-delimited JSON.
//!
//! The child announces `{"ready": true}`, then answers each request
//! `{"id", "text"}` with `{"id", "logprob", "num_tokens"}`. Responses may
//! arrive in any order and are matched by id. A child that exits is
//! restarted and the unanswered requests are sent again.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Capabilities, LmError, LmScorer, LogProb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScorerConfig {
    /// Run through `sh -c`.
    pub command: String,
    #[serde(default)]
    pub env: Vec<(String, String)>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_restarts")]
    pub max_restarts: usize,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_restarts() -> usize {
    3
}

impl ExternalScorerConfig {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            env: Vec::new(),
            timeout_secs: default_timeout_secs(),
            max_restarts: default_max_restarts(),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.0))
    }
}

#[derive(Serialize)]
struct Request<'a> {
    id: u64,
    text: &'a str,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    logprob: f64,
    num_tokens: u64,
}

#[derive(Deserialize)]
struct Ready {
    ready: bool,
}

/// Lines from the child's stdout; `None` marks end of stream.
type LineRx = Receiver<Option<String>>;

struct Running {
    child: Child,
    stdin: ChildStdin,
    rx: LineRx,
}

impl Running {
    fn spawn(cfg: &ExternalScorerConfig) -> Result<Self, LmError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&cfg.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        for (k, v) in &cfg.env {
            cmd.env(k, v);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| LmError::Child(format!("cannot spawn {:?}: {e}", cfg.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(Some(l)).is_err() {
                            return;
                        }
                    }
                    Err(_) => break,
                }
            }
            let _ = tx.send(None);
        });
        let mut run = Running { child, stdin, rx };
        run.await_ready(cfg.timeout())?;
        Ok(run)
    }

    fn await_ready(&mut self, timeout: Duration) -> Result<(), LmError> {
        let line = match self.rx.recv_timeout(timeout) {
            Ok(Some(l)) => l,
            Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                return Err(LmError::Child("scorer exited before signalling readiness".into()))
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(LmError::Child(format!(
                    "scorer not ready after {:.1} s",
                    timeout.as_secs_f64()
                )))
            }
        };
        match serde_json::from_str::<Ready>(&line) {
            Ok(Ready { ready: true }) => Ok(()),
            _ => Err(LmError::Protocol {
                message: "expected {\"ready\": true}".into(),
                line,
            }),
        }
    }

    fn send(&mut self, id: u64, text: &str) -> std::io::Result<()> {
        let line = serde_json::to_string(&Request { id, text }).map_err(std::io::Error::other)?;
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.write_all(b"\n")
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalScorer {
    cfg: ExternalScorerConfig,
    state: Mutex<State>,
}

struct State {
    running: Option<Running>,
    next_id: u64,
    restarts: usize,
}

impl ExternalScorer {
    /// Spawn the child and wait for its readiness line.
    pub fn spawn(cfg: ExternalScorerConfig) -> Result<Self, LmError> {
        let running = Running::spawn(&cfg)?;
        Ok(Self {
            cfg,
            state: Mutex::new(State {
                running: Some(running),
                next_id: 0,
                restarts: 0,
            }),
        })
    }

    pub fn restarts(&self) -> usize {
        self.state.lock().map(|s| s.restarts).unwrap_or(0)
    }

    fn restart(&self, st: &mut State, why: &str) -> Result<(), LmError> {
        st.running = None;
        if st.restarts >= self.cfg.max_restarts {
            return Err(LmError::Child(format!(
                "{why}; giving up after {} restarts",
                st.restarts
            )));
        }
        st.restarts += 1;
        log::warn!("external scorer {why}; restart {}/{}", st.restarts, self.cfg.max_restarts);
        st.running = Some(Running::spawn(&self.cfg)?);
        Ok(())
    }

    fn score_all(&self, texts: &[&str]) -> Result<Vec<LogProb>, LmError> {
        let mut st = self.state.lock().map_err(|_| LmError::Child("scorer lock poisoned".into()))?;
        let base = st.next_id;
        st.next_id += texts.len() as u64;
        let mut pending: HashMap<u64, usize> = (0..texts.len()).map(|i| (base + i as u64, i)).collect();
        let mut out: Vec<Option<LogProb>> = vec![None; texts.len()];
        let timeout = self.cfg.timeout();

        'attempt: loop {
            if st.running.is_none() {
                self.restart(&mut st, "scorer is not running")?;
            }
            let mut ids: Vec<u64> = pending.keys().copied().collect();
            ids.sort_unstable();
            let mut write_failed = false;
            {
                let run = st.running.as_mut().expect("running");
                for &id in &ids {
                    if run.send(id, texts[pending[&id]]).is_err() {
                        write_failed = true;
                        break;
                    }
                }
                if !write_failed && run.stdin.flush().is_err() {
                    write_failed = true;
                }
            }
            if write_failed {
                self.restart(&mut st, "scorer closed its input")?;
                continue 'attempt;
            }
            let mut deadline = Instant::now() + timeout;
            while !pending.is_empty() {
                let wait = deadline.saturating_duration_since(Instant::now());
                let msg = st.running.as_ref().expect("running").rx.recv_timeout(wait);
                let line = match msg {
                    Ok(Some(l)) => l,
                    Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                        self.restart(&mut st, "scorer exited")?;
                        continue 'attempt;
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        let id = *pending.keys().min().expect("non-empty");
                        st.running = None;
                        return Err(LmError::Timeout {
                            id,
                            secs: timeout.as_secs_f64(),
                        });
                    }
                };
                let resp: Response = serde_json::from_str(&line).map_err(|e| LmError::Protocol {
                    message: format!("malformed response: {e}"),
                    line: line.clone(),
                })?;
                let Some(idx) = pending.remove(&resp.id) else {
                    return Err(LmError::Protocol {
                        message: format!("response for unknown id {}", resp.id),
                        line,
                    });
                };
                if !resp.logprob.is_finite() || resp.logprob > 1e-9 {
                    return Err(LmError::Protocol {
                        message: "logprob must be finite and <= 0".into(),
                        line,
                    });
                }
                out[idx] = Some(LogProb::new(resp.logprob.min(0.0), resp.num_tokens as usize));
                deadline = Instant::now() + timeout;
            }
            break;
        }
        Ok(out.into_iter().map(|o| o.expect("all answered")).collect())
    }
}

impl LmScorer for ExternalScorer {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            scorable: true,
            ..Default::default()
        }
    }

    fn logprob(&self, text: &str) -> Result<LogProb, LmError> {
        Ok(self.score_all(&[text])?[0])
    }

    fn logprob_batch(&self, texts: &[&str]) -> Result<Vec<LogProb>, LmError> {
        self.score_all(texts)
    }
}
