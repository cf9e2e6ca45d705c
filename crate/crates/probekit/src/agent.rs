//! The measurement agent: a line-delimited JSON control channel in front of
//! the job scheduler.
//!
//! Requests look like
//! `{"kind":"trace","request_id":"r1","spec":{"target":"1.1.1.1"}}`; spec
//! fields left out take the usual defaults. Every response line carries
//! `type` and `request_id`. A trace produces `progress` lines and then
//! exactly one `result` or `error`.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Ipv4Addr, Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use probekit_core::probe::{HopRecord, ProbeMethod, ProbeSpec, TraceResult};
use probekit_core::sched::{JobEvent, JobId, JobScheduler, SchedulerError};
use probekit_core::time::Clock;
use probekit_core::trace::NetworkBackend;
use serde::{Deserialize, Serialize};

use crate::clock::MonotonicClock;

/// Longest accepted command line; longer input is rejected, not buffered.
pub const MAX_LINE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Trace,
    Status,
    Quit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Command {
    pub kind: CommandKind,
    pub request_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<ProbeSpec>,
}

impl Command {
    pub fn trace(request_id: impl Into<String>, spec: ProbeSpec) -> Self {
        Self {
            kind: CommandKind::Trace,
            request_id: request_id.into(),
            spec: Some(spec),
        }
    }

    pub fn status(request_id: impl Into<String>) -> Self {
        Self {
            kind: CommandKind::Status,
            request_id: request_id.into(),
            spec: None,
        }
    }

    pub fn quit(request_id: impl Into<String>) -> Self {
        Self {
            kind: CommandKind::Quit,
            request_id: request_id.into(),
            spec: None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("commands always serialize")
    }
}

/// Probe spec as sent by clients: everything but the target is optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecRequest {
    target: Ipv4Addr,
    method: Option<ProbeMethod>,
    max_ttl: Option<u8>,
    attempts_per_hop: Option<u8>,
    pps: Option<f64>,
    gap_limit: Option<u8>,
    flow_id: Option<u16>,
}

impl From<SpecRequest> for ProbeSpec {
    fn from(r: SpecRequest) -> Self {
        let d = ProbeSpec::new(r.target);
        ProbeSpec {
            target: r.target,
            method: r.method.unwrap_or(d.method),
            max_ttl: r.max_ttl.unwrap_or(d.max_ttl),
            attempts_per_hop: r.attempts_per_hop.unwrap_or(d.attempts_per_hop),
            pps: r.pps.unwrap_or(d.pps),
            gap_limit: r.gap_limit.unwrap_or(d.gap_limit),
            flow_id: r.flow_id.unwrap_or(d.flow_id),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCommand {
    kind: CommandKind,
    request_id: String,
    #[serde(default, alias = "payload")]
    spec: Option<SpecRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad command ({request_id}): {reason}")]
pub struct BadCommand {
    /// The request id if one could be recovered, otherwise `?`.
    pub request_id: String,
    pub reason: String,
}

pub fn parse_command(line: &str) -> Result<Command, BadCommand> {
    let bad = |reason: String| {
        let request_id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("request_id")?.as_str().map(str::to_owned))
            .filter(|id| !id.is_empty())
            .unwrap_or_else(|| "?".into());
        BadCommand { request_id, reason }
    };
    let raw: RawCommand = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    if raw.request_id.is_empty() {
        return Err(bad("request_id must not be empty".into()));
    }
    let spec = match (raw.kind, raw.spec) {
        (CommandKind::Trace, Some(s)) => {
            let spec = ProbeSpec::from(s);
            spec.validate().map_err(|e| bad(e.to_string()))?;
            Some(spec)
        }
        (CommandKind::Trace, None) => return Err(bad("trace requires a spec".into())),
        (_, Some(_)) => return Err(bad("only trace takes a spec".into())),
        (_, None) => None,
    };
    Ok(Command {
        kind: raw.kind,
        request_id: raw.request_id,
        spec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Progress {
        request_id: String,
        hop: HopRecord,
    },
    Result {
        request_id: String,
        result: TraceResult,
    },
    Status {
        request_id: String,
        queued: usize,
        active: usize,
        uptime_s: f64,
    },
    Error {
        request_id: String,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        partial: Option<TraceResult>,
    },
    Bye {
        request_id: String,
        /// Queued traces abandoned by the shutdown.
        dropped: usize,
    },
}

impl Response {
    pub fn request_id(&self) -> &str {
        match self {
            Response::Progress { request_id, .. }
            | Response::Result { request_id, .. }
            | Response::Status { request_id, .. }
            | Response::Error { request_id, .. }
            | Response::Bye { request_id, .. } => request_id,
        }
    }

    /// Everything but progress ends its request.
    pub fn is_final(&self) -> bool {
        !matches!(self, Response::Progress { .. })
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("responses always serialize")
    }
}

/// Agent state. `O` tags where a command came from (a connection, say) so
/// that its responses can be routed back.
#[derive(Debug)]
pub struct Agent<O> {
    sched: JobScheduler,
    jobs: BTreeMap<JobId, (O, String)>,
    quitting: bool,
    started_at: Duration,
}

impl<O: Clone> Agent<O> {
    pub fn new(max_parallel: usize, pps: f64, started_at: Duration) -> Result<Self, SchedulerError> {
        Ok(Self {
            sched: JobScheduler::new(max_parallel, pps)?,
            jobs: BTreeMap::new(),
            quitting: false,
            started_at,
        })
    }

    pub fn queued(&self) -> usize {
        self.sched.queued()
    }

    pub fn active(&self) -> usize {
        self.sched.active()
    }

    pub fn is_quitting(&self) -> bool {
        self.quitting
    }

    /// Quit was requested and every active trace has drained.
    pub fn is_finished(&self) -> bool {
        self.quitting && self.sched.is_idle()
    }

    pub fn handle_line(&mut self, origin: O, line: &str, now: Duration) -> Vec<(O, Response)> {
        match parse_command(line) {
            Ok(cmd) => self.handle(origin, cmd, now),
            Err(bad) => vec![(
                origin,
                Response::Error {
                    request_id: bad.request_id,
                    message: bad.reason,
                    partial: None,
                },
            )],
        }
    }

    pub fn handle(&mut self, origin: O, cmd: Command, now: Duration) -> Vec<(O, Response)> {
        if self.quitting {
            return vec![(
                origin,
                Response::Error {
                    request_id: cmd.request_id,
                    message: "agent is shutting down".into(),
                    partial: None,
                },
            )];
        }
        match cmd.kind {
            CommandKind::Trace => {
                let spec = cmd.spec.expect("parse_command guarantees a spec");
                match self.sched.submit(spec) {
                    Ok(job) => {
                        self.jobs.insert(job, (origin, cmd.request_id));
                        Vec::new()
                    }
                    Err(e) => vec![(
                        origin,
                        Response::Error {
                            request_id: cmd.request_id,
                            message: e.to_string(),
                            partial: None,
                        },
                    )],
                }
            }
            CommandKind::Status => vec![(
                origin,
                Response::Status {
                    request_id: cmd.request_id,
                    queued: self.sched.queued(),
                    active: self.sched.active(),
                    uptime_s: now.saturating_sub(self.started_at).as_secs_f64(),
                },
            )],
            CommandKind::Quit => {
                self.quitting = true;
                let dropped = self.sched.drop_queued();
                let mut out: Vec<_> = dropped
                    .iter()
                    .filter_map(|job| self.jobs.remove(job))
                    .map(|(o, request_id)| {
                        (
                            o,
                            Response::Error {
                                request_id,
                                message: "dropped: agent shutting down".into(),
                                partial: None,
                            },
                        )
                    })
                    .collect();
                out.push((
                    origin,
                    Response::Bye {
                        request_id: cmd.request_id,
                        dropped: dropped.len(),
                    },
                ));
                out
            }
        }
    }

    pub fn next_wakeup(&self, now: Duration) -> Option<Duration> {
        self.sched.next_wakeup(now)
    }

    /// Runs everything due at `now`.
    pub fn poll<N: NetworkBackend>(&mut self, now: Duration, net: &mut N) -> Vec<(O, Response)> {
        let mut out = Vec::new();
        while self.sched.next_wakeup(now).is_some_and(|t| t <= now) {
            for ev in self.sched.step(now, net) {
                out.extend(self.translate(ev));
            }
        }
        out
    }

    fn translate(&mut self, ev: JobEvent) -> Option<(O, Response)> {
        let id = ev.job();
        match ev {
            JobEvent::Started { .. } => None,
            JobEvent::Progress { hop, .. } => {
                let (o, request_id) = self.jobs.get(&id)?.clone();
                Some((o, Response::Progress { request_id, hop }))
            }
            JobEvent::Finished { result, .. } => {
                let (o, request_id) = self.jobs.remove(&id)?;
                Some((o, Response::Result { request_id, result }))
            }
            JobEvent::Failed { partial, error, .. } => {
                let (o, request_id) = self.jobs.remove(&id)?;
                Some((
                    o,
                    Response::Error {
                        request_id,
                        message: error.to_string(),
                        partial: Some(partial),
                    },
                ))
            }
        }
    }

    /// Drives all accepted work to completion on `clock`.
    pub fn run_until_idle<C, N, F>(&mut self, clock: &mut C, net: &mut N, mut on_response: F)
    where
        C: Clock,
        N: NetworkBackend,
        F: FnMut(O, Response),
    {
        while let Some(t) = self.next_wakeup(clock.now()) {
            clock.sleep_until(t);
            for (o, r) in self.poll(clock.now(), net) {
                on_response(o, r);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ServeConfig {
    pub max_parallel: usize,
    pub pps: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Config(#[from] SchedulerError),
}

type ConnId = u64;

enum Msg {
    Open(ConnId, TcpStream),
    Line(ConnId, String),
    Closed(ConnId),
}

/// Serves commands on `listener` until a `quit` has drained. Connections
/// are handled as they come; responses for a connection that has gone away
/// are dropped while its traces run to completion.
pub fn serve<N>(listener: TcpListener, cfg: ServeConfig, net: N) -> Result<(), ServeError>
where
    N: NetworkBackend + Send + 'static,
{
    // validate before accepting anything
    JobScheduler::new(cfg.max_parallel, cfg.pps)?;
    let (tx, rx) = mpsc::channel();
    let done = Arc::new(AtomicBool::new(false));
    let executor = {
        let done = Arc::clone(&done);
        thread::spawn(move || {
            let r = execute(rx, cfg, net);
            done.store(true, Ordering::SeqCst);
            r
        })
    };

    listener.set_nonblocking(true)?;
    let mut next_id: ConnId = 0;
    while !done.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let id = next_id;
                next_id += 1;
                if tx.send(Msg::Open(id, stream.try_clone()?)).is_err() {
                    break;
                }
                let tx = tx.clone();
                thread::spawn(move || read_lines(id, stream, tx));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e.into()),
        }
    }
    drop(tx);
    executor.join().expect("executor thread panicked")
}

fn read_lines(id: ConnId, stream: TcpStream, tx: mpsc::Sender<Msg>) {
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let limit = MAX_LINE_BYTES as u64 + 1;
        match reader.by_ref().take(limit).read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let complete = buf.last() == Some(&b'\n');
        let line = if !complete && buf.len() > MAX_LINE_BYTES {
            // skip the rest of the oversized line
            let mut sink = Vec::new();
            if reader.read_until(b'\n', &mut sink).is_err() {
                break;
            }
            String::from("<oversized line>")
        } else {
            String::from_utf8_lossy(&buf).trim_end_matches(['\n', '\r']).to_owned()
        };
        if line.trim().is_empty() {
            continue;
        }
        if tx.send(Msg::Line(id, line)).is_err() {
            return;
        }
    }
    let _ = tx.send(Msg::Closed(id));
}

fn execute<N: NetworkBackend>(rx: mpsc::Receiver<Msg>, cfg: ServeConfig, mut net: N) -> Result<(), ServeError> {
    let clock = MonotonicClock::new();
    let mut agent: Agent<ConnId> = Agent::new(cfg.max_parallel, cfg.pps, clock.now())?;
    let mut conns: HashMap<ConnId, TcpStream> = HashMap::new();

    let deliver = |conns: &mut HashMap<ConnId, TcpStream>, out: Vec<(ConnId, Response)>| {
        for (id, resp) in out {
            let Some(stream) = conns.get_mut(&id) else { continue };
            let mut line = resp.to_line();
            line.push('\n');
            if stream.write_all(line.as_bytes()).is_err() {
                conns.remove(&id);
            }
        }
    };

    loop {
        let out = agent.poll(clock.now(), &mut net);
        deliver(&mut conns, out);
        if agent.is_finished() {
            break;
        }
        let msg = match agent.next_wakeup(clock.now()) {
            Some(t) => match rx.recv_timeout(t.saturating_sub(clock.now())) {
                Ok(m) => m,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            },
            None => match rx.recv() {
                Ok(m) => m,
                Err(_) => break,
            },
        };
        match msg {
            Msg::Open(id, stream) => {
                conns.insert(id, stream);
            }
            Msg::Closed(id) => {
                conns.remove(&id);
            }
            Msg::Line(id, line) => {
                let out = agent.handle_line(id, &line, clock.now());
                deliver(&mut conns, out);
            }
        }
    }
    for stream in conns.values_mut() {
        let _ = stream.flush();
        let _ = stream.shutdown(Shutdown::Both);
    }
    Ok(())
}
