//! Roadside unit: hands the trained policy to vehicles inside a geofence.
//!
//! Wire format is one JSON object per line over TCP. A connection carries
//! exactly one request and one response:
//!
//! ```text
//! -> {"type":"hello","vehicle_id":"cav7","x":120.0,"y":-3.2}
//! <- {"type":"policy","artifact":{...}}
//! <- {"type":"none","reason":"outside_geofence"}
//! <- {"type":"error","code":"bad_request","detail":"..."}
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imitation::PolicyArtifact;

/// Requests longer than this are rejected without being buffered further.
const MAX_LINE: u64 = 64 * 1024;
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello { vehicle_id: String, x: f64, y: f64 },
    Policy { artifact: serde_json::Value },
    None { reason: String },
    Error { code: String, detail: String },
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("message serialises");
        s.push('\n');
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end_matches(['\n', '\r']))
            .map_err(|e| Error::Protocol(format!("bad message: {e}")))
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Message::Error {
            code: "bad_request".into(),
            detail: detail.into(),
        }
    }
}

/// Half-open rectangle: `x_min <= x < x_max`, `y_min <= y < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geofence {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Geofence {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x_min <= x && x < self.x_max && self.y_min <= y && y < self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }
}

impl Default for Geofence {
    /// The acceleration lane of the built-in merge scenario.
    fn default() -> Self {
        Geofence {
            x_min: 100.0,
            x_max: 300.0,
            y_min: -25.0,
            y_max: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsuConfig {
    pub bind: String,
    pub geofence: Geofence,
    pub artifact: PathBuf,
    pub max_connections: usize,
    /// Per-request timeout, seconds.
    pub timeout: f64,
}

impl Default for RsuConfig {
    fn default() -> Self {
        RsuConfig {
            bind: "127.0.0.1:7878".into(),
            geofence: Geofence::default(),
            artifact: PathBuf::from("policy.json"),
            max_connections: 16,
            timeout: 5.0,
        }
    }
}

impl RsuConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geofence;
        if !(g.x_min < g.x_max && g.y_min < g.y_max) {
            return Err(Error::Config(format!("empty geofence {g:?}")));
        }
        if self.max_connections == 0 {
            return Err(Error::Config("max_connections must be at least 1".into()));
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(Error::Config(format!(
                "timeout must be positive, got {}",
                self.timeout
            )));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout)
    }
}

/// Response for one request; a pure function of its arguments.
pub fn handle_request(msg: &Message, geofence: &Geofence, artifact: &serde_json::Value) -> Message {
    match msg {
        Message::Hello { x, y, .. } if geofence.contains(*x, *y) => Message::Policy {
            artifact: artifact.clone(),
        },
        Message::Hello { .. } => Message::None {
            reason: "outside_geofence".into(),
        },
        _ => Message::bad_request("expected a hello message"),
    }
}

#[derive(Debug, Default)]
struct Counters {
    policies: AtomicUsize,
    outside: AtomicUsize,
    errors: AtomicUsize,
    timeouts: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServeStats {
    pub policies: usize,
    pub outside: usize,
    pub errors: usize,
    pub timeouts: usize,
}

impl ServeStats {
    /// Requests that received a response.
    pub fn served(&self) -> usize {
        self.policies + self.outside + self.errors
    }
}

struct Shared {
    geofence: Geofence,
    artifact: serde_json::Value,
    timeout: Duration,
    counters: Counters,
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    stream.set_read_timeout(Some(shared.timeout))?;
    stream.set_write_timeout(Some(shared.timeout))?;
    let mut reader = BufReader::new((&stream).take(MAX_LINE));
    let mut line = String::new();
    let c = &shared.counters;
    match reader.read_line(&mut line) {
        Ok(_) => {}
        Err(e)
            if matches!(
                e.kind(),
                std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
            ) =>
        {
            c.timeouts.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        }
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
            line.clear();
        }
        Err(e) => return Err(e),
    }
    let response = if !line.ends_with('\n') {
        Message::bad_request("request must be one newline-terminated line")
    } else {
        match Message::from_line(&line) {
            Ok(msg) => handle_request(&msg, &shared.geofence, &shared.artifact),
            Err(e) => Message::bad_request(e.to_string()),
        }
    };
    match &response {
        Message::Policy { .. } => &c.policies,
        Message::None { .. } => &c.outside,
        _ => &c.errors,
    }
    .fetch_add(1, Ordering::Relaxed);
    let mut w = &stream;
    w.write_all(response.to_line().as_bytes())?;
    w.flush()
}

/// A running server. Dropping the handle without calling
/// [`ServerHandle::shutdown`] leaves the server thread running.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<Result<ServeStats>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Stop accepting, wait for in-flight requests, return totals.
    pub fn shutdown(self) -> Result<ServeStats> {
        self.stop.store(true, Ordering::SeqCst);
        self.wait()
    }

    /// Block until some other holder of the stop flag stops the server.
    pub fn wait(self) -> Result<ServeStats> {
        self.thread
            .join()
            .unwrap_or_else(|_| Err(Error::Protocol("server thread panicked".into())))
    }
}

/// Load the artifact, bind, and serve on a background thread.
pub fn start(cfg: &RsuConfig) -> Result<ServerHandle> {
    cfg.validate()?;
    let artifact = PolicyArtifact::load(&cfg.artifact)?;
    start_with(cfg, &artifact)
}

/// As [`start`] with an artifact already in memory.
pub fn start_with(cfg: &RsuConfig, artifact: &PolicyArtifact) -> Result<ServerHandle> {
    cfg.validate()?;
    let listener = TcpListener::bind(&cfg.bind).map_err(Error::Connection)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        geofence: cfg.geofence,
        artifact: serde_json::to_value(artifact)?,
        timeout: cfg.timeout(),
        counters: Counters::default(),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let cap = cfg.max_connections;
    let flag = stop.clone();
    let thread = thread::Builder::new()
        .name("rsu-accept".into())
        .spawn(move || accept_loop(listener, shared, flag, cap))?;
    Ok(ServerHandle { addr, stop, thread })
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    cap: usize,
) -> Result<ServeStats> {
    let active = Arc::new(AtomicUsize::new(0));
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        if active.load(Ordering::SeqCst) >= cap {
            // pending clients wait in the listen backlog
            thread::sleep(POLL);
            continue;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                active.fetch_add(1, Ordering::SeqCst);
                let (shared, active) = (shared.clone(), active.clone());
                workers.push(thread::spawn(move || {
                    let _ = handle_connection(stream, &shared);
                    active.fetch_sub(1, Ordering::SeqCst);
                }));
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Connection(e)),
        }
    }
    // drain: every handler ends within its read/write timeouts
    for w in workers {
        let _ = w.join();
    }
    let c = &shared.counters;
    Ok(ServeStats {
        policies: c.policies.load(Ordering::SeqCst),
        outside: c.outside.load(Ordering::SeqCst),
        errors: c.errors.load(Ordering::SeqCst),
        timeouts: c.timeouts.load(Ordering::SeqCst),
    })
}

/// Serve until `stop` becomes true.
pub fn serve(cfg: &RsuConfig, stop: Arc<AtomicBool>) -> Result<ServeStats> {
    let handle = start(cfg)?;
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(20));
    }
    handle.shutdown()
}

/// Send one raw line and read one raw line back.
pub fn exchange(endpoint: &str, line: &str, timeout: Duration) -> Result<String> {
    let addrs: Vec<SocketAddr> = endpoint
        .to_socket_addrs()
        .map_err(Error::Connection)?
        .collect();
    let deadline = Instant::now() + timeout;
    let mut last = None;
    let mut stream = None;
    for a in &addrs {
        match TcpStream::connect_timeout(a, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = Some(e),
        }
    }
    let stream = stream.ok_or_else(|| {
        Error::Connection(last.unwrap_or_else(|| {
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "endpoint resolved to no address",
            )
        }))
    })?;
    let remaining = deadline
        .saturating_duration_since(Instant::now())
        .max(Duration::from_millis(1));
    stream
        .set_read_timeout(Some(remaining))
        .map_err(Error::Connection)?;
    stream
        .set_write_timeout(Some(remaining))
        .map_err(Error::Connection)?;
    (&stream)
        .write_all(line.as_bytes())
        .map_err(Error::Connection)?;
    let mut reply = String::new();
    BufReader::new(&stream)
        .read_line(&mut reply)
        .map_err(Error::Connection)?;
    if !reply.ends_with('\n') {
        return Err(Error::Protocol("response was not a complete line".into()));
    }
    Ok(reply)
}

/// Ask the RSU for its policy. `Ok(None)` means the vehicle is outside the
/// geofence; connection, checksum and protocol failures are distinct errors.
pub fn fetch(
    endpoint: &str,
    vehicle_id: &str,
    x: f64,
    y: f64,
    timeout: Duration,
) -> Result<Option<PolicyArtifact>> {
    let hello = Message::Hello {
        vehicle_id: vehicle_id.into(),
        x,
        y,
    };
    let reply = exchange(endpoint, &hello.to_line(), timeout)?;
    match Message::from_line(&reply)? {
        Message::Policy { artifact } => PolicyArtifact::from_json(&artifact.to_string()).map(Some),
        Message::None { .. } => Ok(None),
        Message::Error { code, detail } => {
            Err(Error::Protocol(format!("server error {code}: {detail}")))
        }
        Message::Hello { .. } => Err(Error::Protocol("server answered with hello".into())),
    }
}
