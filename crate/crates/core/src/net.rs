//! Live asynchronous mode over TCP.
//!
//! The wire format is one JSON object per line with a leading version field,
//! e.g. `{"v":1,"type":"sample","round":7,"node":2,"value":0.93}`.
//!
//! The server owns the state in a single loop fed by an event channel. One
//! reader thread per connection parses lines into events; nothing else
//! touches the state. Several queries may be outstanding at once (at most one
//! per node) and every sample is applied the moment it is dequeued, with the
//! step index equal to the number of updates applied so far. The sign term
//! therefore reads `y` as of application time, not query time.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{default_repel_magnitude, Policy, PolicyKind, QueryContext};
use crate::dynamics::step_in_place;
use crate::engine::{
    make_row, node_stream, policy_stream, scheduler_stream, AppliedUpdate, NormProbe, SimConfig,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::model::{sample_y, GroundTruth, State};
use crate::scalar::norm;

pub const PROTOCOL_VERSION: u32 = 1;

/// Protocol messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    /// First line from a client: which node it speaks for.
    Hello { node: usize },
    Query { round: u64, node: usize },
    Sample { round: u64, node: usize, value: f64 },
    /// Server iterate after `updates` applied updates, sent before each query.
    Snapshot { round: u64, updates: u64, x: Vec<f64> },
    Shutdown {},
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    v: u32,
    #[serde(flatten)]
    msg: WireMessage,
}

impl WireMessage {
    /// One line of text including the trailing newline.
    pub fn encode(&self) -> String {
        let mut s = serde_json::to_string(&Envelope {
            v: PROTOCOL_VERSION,
            msg: self.clone(),
        })
        .expect("wire messages always serialize");
        s.push('\n');
        s
    }

    pub fn decode(line: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Protocol(format!("malformed message {line:?}: {e}")))?;
        if env.v != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {}", env.v)));
        }
        if let WireMessage::Sample { value, .. } = env.msg {
            if !value.is_finite() {
                return Err(Error::Protocol("sample value must be finite".into()));
            }
        }
        Ok(env.msg)
    }
}

fn send(stream: &mut TcpStream, msg: &WireMessage) -> std::io::Result<()> {
    stream.write_all(msg.encode().as_bytes())
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// A query unanswered for this long is abandoned.
    pub timeout: Duration,
    /// Outstanding queries at once; `None` means `p`.
    pub max_in_flight: Option<usize>,
    /// Stop after this much wall-clock time even if `iterations` is not reached.
    pub window: Option<Duration>,
    /// How long to wait for all `p` clients before starting with those present.
    pub connect_wait: Duration,
    /// A disconnected node is left out of the draw for this long.
    pub reconnect_backoff: Duration,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(1),
            max_in_flight: None,
            window: None,
            connect_wait: Duration::from_secs(10),
            reconnect_backoff: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub queries: u64,
    pub applied: u64,
    pub timeouts: u64,
    pub discarded: u64,
    pub protocol_errors: u64,
    pub disconnects: u64,
}

#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub trajectory: Trajectory<f64>,
    /// Applied updates in order; replaying them reproduces the final state.
    pub log: Vec<AppliedUpdate>,
    pub stats: ServeStats,
    pub elapsed: Duration,
}

enum Event {
    Connected { node: usize, conn: u64, stream: TcpStream },
    Message { node: usize, conn: u64, msg: WireMessage },
    Violation { node: usize, conn: u64, reason: String },
    Closed { node: usize, conn: u64 },
}

struct Conn {
    id: u64,
    stream: TcpStream,
}

fn reader_thread(stream: TcpStream, conn: u64, p: usize, events: Sender<Event>) {
    let Ok(read_half) = stream.try_clone() else { return };
    let mut lines = BufReader::new(read_half).lines();
    let node = match lines.next() {
        Some(Ok(line)) => match WireMessage::decode(&line) {
            Ok(WireMessage::Hello { node }) if node < p => node,
            other => {
                warn!("connection {conn}: expected hello, got {other:?}");
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        },
        _ => return,
    };
    if events.send(Event::Connected { node, conn, stream }).is_err() {
        return;
    }
    for line in lines {
        let event = match line {
            Err(_) => break,
            Ok(line) => match WireMessage::decode(&line) {
                Ok(msg) => Event::Message { node, conn, msg },
                Err(e) => Event::Violation {
                    node,
                    conn,
                    reason: e.to_string(),
                },
            },
        };
        let stop = matches!(event, Event::Violation { .. });
        if events.send(event).is_err() || stop {
            return;
        }
    }
    let _ = events.send(Event::Closed { node, conn });
}

fn accept_thread(listener: TcpListener, p: usize, events: Sender<Event>, stop: Arc<AtomicBool>) {
    if listener.set_nonblocking(true).is_err() {
        return;
    }
    let mut next_conn = 0u64;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                debug!("accepted {peer} as connection {next_conn}");
                let tx = events.clone();
                let conn = next_conn;
                next_conn += 1;
                thread::spawn(move || reader_thread(stream, conn, p, tx));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

struct Server<'a> {
    config: &'a SimConfig<f64>,
    opts: &'a ServeOptions,
    truth: GroundTruth<f64>,
    conns: Vec<Option<Conn>>,
    outstanding: Vec<Option<(u64, Instant)>>,
    available_at: Vec<Instant>,
    rng: ChaCha8Rng,
    round: u64,
    stats: ServeStats,
}

impl Server<'_> {
    fn handle(&mut self, event: Event, state: &mut State<f64>) -> Result<Option<AppliedUpdate>> {
        match event {
            Event::Connected { node, conn, stream } => {
                info!("node {node} connected");
                if let Some(old) = self.conns[node].replace(Conn { id: conn, stream }) {
                    let _ = old.stream.shutdown(Shutdown::Both);
                }
                self.outstanding[node] = None;
            }
            Event::Closed { node, conn } => {
                if self.conns[node].as_ref().is_some_and(|c| c.id == conn) {
                    self.drop_node(node);
                }
            }
            Event::Violation { node, conn, reason } => {
                warn!("node {node}: protocol violation: {reason}");
                self.stats.protocol_errors += 1;
                if self.conns[node].as_ref().is_some_and(|c| c.id == conn) {
                    self.drop_node(node);
                }
            }
            Event::Message { node, conn, msg } => {
                if !self.conns[node].as_ref().is_some_and(|c| c.id == conn) {
                    return Ok(None);
                }
                match msg {
                    WireMessage::Sample { round, node: from, value } if from == node => {
                        if self.outstanding[node].is_some_and(|(r, _)| r == round) {
                            self.outstanding[node] = None;
                            let n = state.n;
                            step_in_place(state, node, value, &self.config.matrix, &self.config.schedule)?;
                            self.stats.applied += 1;
                            return Ok(Some(AppliedUpdate { n, node, value }));
                        }
                        debug!("discarding late sample from node {node} for round {round}");
                        self.stats.discarded += 1;
                    }
                    other => {
                        warn!("node {node}: unexpected message {other:?}");
                        self.stats.protocol_errors += 1;
                        self.drop_node(node);
                    }
                }
            }
        }
        Ok(None)
    }

    fn drop_node(&mut self, node: usize) {
        if let Some(c) = self.conns[node].take() {
            let _ = c.stream.shutdown(Shutdown::Both);
            self.stats.disconnects += 1;
        }
        self.outstanding[node] = None;
        self.available_at[node] = Instant::now() + self.opts.reconnect_backoff;
    }

    fn idle(&self, node: usize, now: Instant) -> bool {
        self.conns[node].is_some() && self.outstanding[node].is_none() && self.available_at[node] <= now
    }

    /// Issue queries until `max_in_flight` are outstanding or no node is idle.
    fn fill(&mut self, state: &State<f64>, max_in_flight: usize) {
        let p = self.conns.len();
        loop {
            let now = Instant::now();
            let in_flight = self.outstanding.iter().filter(|o| o.is_some()).count();
            if in_flight >= max_in_flight || !(0..p).any(|i| self.idle(i, now)) {
                return;
            }
            // Uniform over idle nodes by rejection from the uniform draw over all nodes.
            let node = loop {
                let i = self.rng.random_range(0..p);
                if self.idle(i, now) {
                    break i;
                }
            };
            self.round += 1;
            let round = self.round;
            let stream = &mut self.conns[node].as_mut().expect("idle node is connected").stream;
            let sent = send(
                stream,
                &WireMessage::Snapshot {
                    round,
                    updates: state.n,
                    x: state.x.clone(),
                },
            )
            .and_then(|_| send(stream, &WireMessage::Query { round, node }));
            match sent {
                Ok(()) => {
                    self.stats.queries += 1;
                    self.outstanding[node] = Some((round, now + self.opts.timeout));
                }
                Err(e) => {
                    warn!("node {node}: send failed: {e}");
                    self.drop_node(node);
                }
            }
        }
    }

    fn expire(&mut self, now: Instant) {
        for slot in &mut self.outstanding {
            if slot.is_some_and(|(_, deadline)| deadline <= now) {
                *slot = None;
                self.stats.timeouts += 1;
            }
        }
    }

    fn next_deadline(&self) -> Option<Instant> {
        self.outstanding.iter().flatten().map(|&(_, d)| d).min()
    }

    fn connected(&self) -> usize {
        self.conns.iter().filter(|c| c.is_some()).count()
    }
}

/// Run the server on an already bound listener until `config.iterations`
/// updates are applied or the window closes, then send `Shutdown` to every
/// client.
pub fn serve(config: &SimConfig<f64>, listener: TcpListener, opts: &ServeOptions) -> Result<ServeOutcome> {
    config.validate()?;
    let p = config.matrix.p();
    let truth = GroundTruth::new(&config.spec, &config.matrix)?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let stop = stop.clone();
        thread::spawn(move || accept_thread(listener, p, tx, stop))
    };
    let result = serve_loop(config, opts, truth, rx);
    stop.store(true, Ordering::Relaxed);
    let _ = acceptor.join();
    result
}

fn serve_loop(
    config: &SimConfig<f64>,
    opts: &ServeOptions,
    truth: GroundTruth<f64>,
    rx: Receiver<Event>,
) -> Result<ServeOutcome> {
    let p = config.matrix.p();
    let start = Instant::now();
    let mut server = Server {
        config,
        opts,
        truth,
        conns: (0..p).map(|_| None).collect(),
        outstanding: vec![None; p],
        available_at: vec![start; p],
        rng: scheduler_stream(config.seed),
        round: 0,
        stats: ServeStats::default(),
    };
    let mut state = State::new(config.x0.clone(), config.y0.clone());

    let connect_deadline = start + opts.connect_wait;
    while server.connected() < p {
        let wait = connect_deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(wait) {
            Ok(event) => {
                server.handle(event, &mut state)?;
            }
            Err(RecvTimeoutError::Timeout) => break,
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    if server.connected() == 0 {
        return Err(Error::Protocol("no client connected".into()));
    }
    info!("starting with {} of {p} nodes connected", server.connected());

    let run_start = Instant::now();
    let window_end = opts.window.map(|w| run_start + w);
    let max_in_flight = opts.max_in_flight.unwrap_or(p).max(1);
    let plan = config.recording.plan(config.iterations);
    let mut plan_iter = plan.iter().peekable();
    let mut rows = Vec::with_capacity(plan.len());
    let mut gammas = config.schedule.gamma_series();
    let mut log = Vec::new();
    let half = config.iterations / 2;
    let mut probe = NormProbe {
        max_full: norm(&state.x),
        max_first_half: norm(&state.x),
        argmax: 0,
    };
    let mut pending_gamma = gammas.next().unwrap_or(0.0);
    if plan_iter.peek() == Some(&&0) {
        plan_iter.next();
        rows.push(make_row(0, &state, pending_gamma, &config.matrix, &server.truth));
    }

    while state.n < config.iterations {
        let now = Instant::now();
        if window_end.is_some_and(|end| now >= end) {
            break;
        }
        server.expire(now);
        server.fill(&state, max_in_flight);
        let mut wake = now + Duration::from_millis(20);
        if let Some(d) = server.next_deadline() {
            wake = wake.min(d);
        }
        if let Some(end) = window_end {
            wake = wake.min(end);
        }
        let event = match rx.recv_timeout(wake.saturating_duration_since(now)) {
            Ok(event) => event,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        if let Some(update) = server.handle(event, &mut state)? {
            log.push(update);
            let r = norm(&state.x);
            if r > probe.max_full {
                probe.max_full = r;
                probe.argmax = state.n;
            }
            if state.n <= half && r > probe.max_first_half {
                probe.max_first_half = r;
            }
            pending_gamma = gammas.next().unwrap_or(0.0);
            if state.n < config.iterations && plan_iter.peek() == Some(&&state.n) {
                plan_iter.next();
                rows.push(make_row(state.n, &state, pending_gamma, &config.matrix, &server.truth));
            }
        }
    }
    let elapsed = run_start.elapsed();

    for (node, conn) in server.conns.iter_mut().enumerate() {
        if let Some(c) = conn.take() {
            if let Err(e) = send(&mut c.stream.try_clone()?, &WireMessage::Shutdown {}) {
                debug!("node {node}: shutdown not delivered: {e}");
            }
        }
    }
    info!(
        "applied {} updates in {elapsed:?} ({} queries, {} timeouts, {} discarded)",
        server.stats.applied, server.stats.queries, server.stats.timeouts, server.stats.discarded
    );
    Ok(ServeOutcome {
        trajectory: Trajectory {
            rows,
            iterations: state.n,
            final_state: state,
            seed: config.seed,
            probe,
            honest_count: server.truth.honest_count(),
        },
        log,
        stats: server.stats,
        elapsed,
    })
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Artificial delay before answering each query.
    pub delay: Duration,
    /// Give up after failing to reach the server for this long.
    pub connect_timeout: Duration,
    /// First wait between reconnect attempts; doubles up to 1s.
    pub backoff: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            delay: Duration::ZERO,
            connect_timeout: Duration::from_secs(10),
            backoff: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub answered: u64,
    pub reconnects: u64,
}

fn connect_with_backoff(addr: SocketAddr, opts: &ClientOptions) -> Result<TcpStream> {
    let deadline = Instant::now() + opts.connect_timeout;
    let mut wait = opts.backoff;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => {
                thread::sleep(wait);
                wait = (wait * 2).min(Duration::from_secs(1));
            }
        }
    }
}

enum SessionEnd {
    Shutdown,
    Reconnect,
}

/// Serve one node until the server sends `Shutdown`. Honest samples come
/// from the node's own stream; the policy sees the latest snapshot of `x`.
pub fn client_loop(
    node: usize,
    policy: PolicyKind,
    config: &SimConfig<f64>,
    addr: SocketAddr,
    opts: &ClientOptions,
) -> Result<ClientStats> {
    config.validate()?;
    config.matrix.check_node(node)?;
    let policy = match policy {
        PolicyKind::Repel { magnitude: None } => PolicyKind::Repel {
            magnitude: Some(default_repel_magnitude(&config.matrix, &config.x0, config.spec.mu())),
        },
        other => other,
    };
    let mut policy = Policy::new(policy, policy_stream(config.seed, node));
    let mut samples = node_stream(config.seed, node);
    let mut stats = ClientStats::default();
    let mut view = State::new(config.x0.clone(), vec![0.0; config.matrix.p()]);
    loop {
        let stream = connect_with_backoff(addr, opts)?;
        match client_session(node, stream, config, opts, &mut policy, &mut samples, &mut view, &mut stats) {
            Ok(SessionEnd::Shutdown) => return Ok(stats),
            Ok(SessionEnd::Reconnect) => {}
            Err(e) => warn!("node {node}: {e}; reconnecting"),
        }
        stats.reconnects += 1;
        thread::sleep(opts.backoff);
    }
}

#[allow(clippy::too_many_arguments)]
fn client_session(
    node: usize,
    mut stream: TcpStream,
    config: &SimConfig<f64>,
    opts: &ClientOptions,
    policy: &mut Policy,
    samples: &mut ChaCha8Rng,
    view: &mut State<f64>,
    stats: &mut ClientStats,
) -> Result<SessionEnd> {
    send(&mut stream, &WireMessage::Hello { node })?;
    let reader = BufReader::new(stream.try_clone()?);
    let mut last_round = 0u64;
    for line in reader.lines() {
        let line = line?;
        let msg = match WireMessage::decode(&line) {
            Ok(msg) => msg,
            Err(e) => {
                warn!("node {node}: {e}; dropping connection");
                let _ = stream.shutdown(Shutdown::Both);
                return Ok(SessionEnd::Reconnect);
            }
        };
        match msg {
            WireMessage::Snapshot { round, updates, x } if x.len() == config.matrix.d() && round > last_round => {
                last_round = round;
                view.x = x;
                view.n = updates;
            }
            WireMessage::Query { round, node: target } if target == node && round >= last_round => {
                last_round = round;
                if !opts.delay.is_zero() {
                    thread::sleep(opts.delay);
                }
                let true_sample = sample_y(&config.spec, &config.matrix, node, samples)?;
                let value = policy.respond(&QueryContext {
                    node,
                    state: view,
                    x_history: &[],
                    matrix: &config.matrix,
                    mu: config.spec.mu(),
                    true_sample,
                });
                send(&mut stream, &WireMessage::Sample { round, node, value })?;
                stats.answered += 1;
            }
            WireMessage::Shutdown {} => return Ok(SessionEnd::Shutdown),
            other => {
                warn!("node {node}: unexpected {other:?}; dropping connection");
                let _ = stream.shutdown(Shutdown::Both);
                return Ok(SessionEnd::Reconnect);
            }
        }
    }
    Ok(SessionEnd::Reconnect)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_round_trip_with_version() {
        let msgs = [
            WireMessage::Hello { node: 3 },
            WireMessage::Query { round: 9, node: 1 },
            WireMessage::Sample {
                round: 9,
                node: 1,
                value: -0.125,
            },
            WireMessage::Snapshot {
                round: 10,
                updates: 4,
                x: vec![0.5, 1.0],
            },
            WireMessage::Shutdown {},
        ];
        for m in msgs {
            let line = m.encode();
            assert!(line.starts_with("{\"v\":1,"), "{line}");
            assert!(line.ends_with('\n'));
            assert_eq!(WireMessage::decode(&line).unwrap(), m);
        }
    }

    #[test]
    fn decode_rejects_bad_input() {
        assert!(WireMessage::decode("not json").is_err());
        assert!(WireMessage::decode(r#"{"v":2,"type":"shutdown"}"#).is_err());
        assert!(WireMessage::decode(r#"{"type":"shutdown"}"#).is_err());
        assert!(WireMessage::decode(r#"{"v":1,"type":"query","round":1}"#).is_err());
        assert!(WireMessage::decode(r#"{"v":1,"type":"sample","round":1,"node":0,"value":1e999}"#).is_err());
    }
}
