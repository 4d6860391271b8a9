//! Pool of external worker processes speaking the framed protocol.

use std::io::{self, BufReader, BufWriter};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::wire::{read_frame, write_frame, WireRequest, WireResponse};
use super::{CodeRequest, CodeResponse, ExecStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Extra time past the request wall-time before the client kills the worker.
    #[serde(default = "default_grace")]
    pub grace_secs: f64,
}

fn default_pool_size() -> usize {
    2
}

fn default_grace() -> f64 {
    0.5
}

impl WorkerConfig {
    pub fn new(program: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            pool_size: default_pool_size(),
            grace_secs: default_grace(),
        }
    }
}

struct Worker {
    child: Child,
    requests: Sender<Vec<u8>>,
    frames: Receiver<io::Result<Vec<u8>>>,
}

impl Worker {
    fn spawn(cfg: &WorkerConfig) -> io::Result<Self> {
        let mut child = Command::new(&cfg.program)
            .args(&cfg.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        // writes happen off the caller's thread so a worker that stops
        // reading cannot block us past the deadline
        let (req_tx, req_rx) = mpsc::channel::<Vec<u8>>();
        thread::spawn(move || writer_loop(stdin, req_rx));

        let (frame_tx, frame_rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let frame = match read_frame(&mut reader) {
                    Ok(Some(f)) => Ok(f),
                    Ok(None) => Err(io::Error::new(io::ErrorKind::UnexpectedEof, "worker closed stdout")),
                    Err(e) => Err(e),
                };
                let stop = frame.is_err();
                if frame_tx.send(frame).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            requests: req_tx,
            frames: frame_rx,
        })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn writer_loop(stdin: ChildStdin, rx: Receiver<Vec<u8>>) {
    let mut w = BufWriter::new(stdin);
    for payload in rx {
        if write_frame(&mut w, &payload).is_err() {
            break;
        }
    }
}

struct PoolState {
    idle: Vec<Worker>,
    live: usize,
}

/// Exclusive-checkout pool; at most `pool_size` workers exist at once.
pub struct WorkerPool {
    cfg: WorkerConfig,
    state: Mutex<PoolState>,
    returned: Condvar,
    next_id: AtomicU64,
}

enum Outcome {
    Healthy(CodeResponse),
    Broken(CodeResponse),
}

impl WorkerPool {
    pub fn new(cfg: WorkerConfig) -> Self {
        Self {
            cfg,
            state: Mutex::new(PoolState { idle: Vec::new(), live: 0 }),
            returned: Condvar::new(),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.cfg
    }

    fn checkout(&self) -> io::Result<Worker> {
        let mut st = self.state.lock().expect("pool lock poisoned");
        loop {
            if let Some(w) = st.idle.pop() {
                return Ok(w);
            }
            if st.live < self.cfg.pool_size.max(1) {
                st.live += 1;
                drop(st);
                return Worker::spawn(&self.cfg).inspect_err(|_| self.forget_one());
            }
            st = self.returned.wait(st).expect("pool lock poisoned");
        }
    }

    fn forget_one(&self) {
        self.state.lock().expect("pool lock poisoned").live -= 1;
        self.returned.notify_one();
    }

    fn checkin(&self, w: Worker) {
        self.state.lock().expect("pool lock poisoned").idle.push(w);
        self.returned.notify_one();
    }

    /// Round-trips one request. Timeouts and protocol faults kill the
    /// worker; a fresh one is spawned on the next checkout.
    pub fn execute(&self, req: &CodeRequest) -> CodeResponse {
        let mut worker = match self.checkout() {
            Ok(w) => w,
            Err(e) => return CodeResponse::failure(ExecStatus::ProtocolError, format!("failed to spawn worker: {e}")),
        };
        match self.round_trip(&mut worker, req) {
            Outcome::Healthy(resp) => {
                self.checkin(worker);
                resp
            }
            Outcome::Broken(resp) => {
                worker.kill();
                self.forget_one();
                resp
            }
        }
    }

    fn round_trip(&self, worker: &mut Worker, req: &CodeRequest) -> Outcome {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let payload = match WireRequest::from_request(id, req).and_then(|w| serde_json::to_vec(&w).map_err(|e| e.to_string())) {
            Ok(p) => p,
            // nothing was sent, the worker is still usable
            Err(e) => return Outcome::Healthy(CodeResponse::failure(ExecStatus::ProtocolError, e)),
        };
        if worker.requests.send(payload).is_err() {
            return Outcome::Broken(CodeResponse::failure(ExecStatus::ProtocolError, "worker stdin closed".into()));
        }
        let deadline = req.limits.wall_time() + Duration::from_secs_f64(self.cfg.grace_secs.max(0.0));
        let frame = match worker.frames.recv_timeout(deadline) {
            Ok(Ok(f)) => f,
            Ok(Err(e)) => return Outcome::Broken(CodeResponse::failure(ExecStatus::ProtocolError, format!("worker: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Outcome::Broken(CodeResponse::failure(
                    ExecStatus::Timeout,
                    format!("no response within {:.1}s", deadline.as_secs_f64()),
                ))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Outcome::Broken(CodeResponse::failure(ExecStatus::ProtocolError, "worker reader exited".into()))
            }
        };
        let wire: WireResponse = match serde_json::from_slice(&frame) {
            Ok(w) => w,
            Err(e) => return Outcome::Broken(CodeResponse::failure(ExecStatus::ProtocolError, format!("bad response frame: {e}"))),
        };
        if wire.id != id {
            return Outcome::Broken(CodeResponse::failure(
                ExecStatus::ProtocolError,
                format!("response id {} does not match request id {id}", wire.id),
            ));
        }
        match wire.into_response() {
            Ok(resp) => Outcome::Healthy(resp),
            Err(e) => Outcome::Healthy(CodeResponse::failure(ExecStatus::ProtocolError, e)),
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        if let Ok(st) = self.state.get_mut() {
            for w in st.idle.drain(..) {
                w.kill();
            }
        }
    }
}
