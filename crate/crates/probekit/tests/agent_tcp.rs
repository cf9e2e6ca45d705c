use std::io::{BufRead, BufReader, Write};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::process::{Command as Process, Stdio};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use probekit::agent::{serve, Command, Response, ServeConfig, ServeError};
use probekit::remote::{run_campaign_live, RemoteExecutor};
use probekit_core::controller::{CampaignPolicy, EventSchedule, NodeDescriptor};
use probekit_core::sim::{SimHop, SimNetwork, SimTopology};
use probekit_core::ProbeSpec;

const DEST: Ipv4Addr = Ipv4Addr::new(10, 9, 0, 8);

/// Eight hops, `latency_ms` each way, so a full trace takes a while in
/// real time.
fn slow_net(latency_ms: u64) -> SimNetwork {
    let hops = (1..=8).map(|i| SimHop::new(Ipv4Addr::new(10, 9, 0, i), latency_ms * 1000)).collect();
    SimNetwork::new(SimTopology::new(hops, DEST).unwrap())
}

fn start(max_parallel: usize, net: SimNetwork) -> (String, JoinHandle<Result<(), ServeError>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let h = thread::spawn(move || serve(listener, ServeConfig { max_parallel, pps: 1000.0 }, net));
    (addr, h)
}

struct Conn {
    w: TcpStream,
    r: BufReader<TcpStream>,
}

impl Conn {
    fn open(addr: &str) -> Self {
        let w = TcpStream::connect(addr).unwrap();
        w.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let r = BufReader::new(w.try_clone().unwrap());
        Self { w, r }
    }

    fn send(&mut self, cmd: &Command) {
        writeln!(self.w, "{}", cmd.to_line()).unwrap();
    }

    fn recv(&mut self) -> Response {
        let mut line = String::new();
        self.r.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("{line:?}: {e}"))
    }

    /// Reads until the final response for `id`.
    fn finish(&mut self, id: &str) -> Response {
        loop {
            let r = self.recv();
            if r.request_id() == id && r.is_final() {
                return r;
            }
        }
    }
}

fn status(addr: &str) -> (usize, usize) {
    let mut c = Conn::open(addr);
    c.send(&Command::status("s"));
    match c.recv() {
        Response::Status { queued, active, .. } => (queued, active),
        other => panic!("{other:?}"),
    }
}

fn quit(addr: &str, h: JoinHandle<Result<(), ServeError>>) {
    let mut c = Conn::open(addr);
    c.send(&Command::quit("q"));
    assert!(matches!(c.finish("q"), Response::Bye { .. }));
    h.join().unwrap().unwrap();
}

#[test]
fn trace_streams_progress_then_result() {
    let (addr, h) = start(1, slow_net(1));
    let mut c = Conn::open(&addr);
    c.send(&Command::trace("t1", ProbeSpec::new(DEST)));
    let mut progress = 0;
    let result = loop {
        match c.recv() {
            Response::Progress { request_id, .. } => {
                assert_eq!(request_id, "t1");
                progress += 1;
            }
            Response::Result { result, .. } => break result,
            other => panic!("{other:?}"),
        }
    };
    assert!(result.destination_reached);
    assert_eq!(progress, result.hops.len());
    drop(c);
    quit(&addr, h);
}

#[test]
fn dropped_client_does_not_stop_its_trace() {
    let (addr, h) = start(1, slow_net(20));
    {
        let mut c = Conn::open(&addr);
        c.send(&Command::trace("gone", ProbeSpec::new(DEST)));
        // wait for the first hop so the job is certainly running
        assert!(matches!(c.recv(), Response::Progress { .. }));
    }
    assert_eq!(status(&addr), (0, 1));
    let deadline = Instant::now() + Duration::from_secs(10);
    while status(&addr) != (0, 0) {
        assert!(Instant::now() < deadline, "orphaned trace never finished");
        thread::sleep(Duration::from_millis(20));
    }
    quit(&addr, h);
}

#[test]
fn sequential_and_concurrent_clients() {
    let (addr, h) = start(2, slow_net(1));
    for i in 0..3 {
        let mut c = Conn::open(&addr);
        let id = format!("seq-{i}");
        c.send(&Command::trace(&id, ProbeSpec::new(DEST)));
        assert!(matches!(c.finish(&id), Response::Result { .. }));
    }
    let clients: Vec<_> = (0..4)
        .map(|i| {
            let addr = addr.clone();
            thread::spawn(move || {
                let mut c = Conn::open(&addr);
                let id = format!("par-{i}");
                c.send(&Command::trace(&id, ProbeSpec::new(DEST)));
                matches!(c.finish(&id), Response::Result { .. })
            })
        })
        .collect();
    for c in clients {
        assert!(c.join().unwrap());
    }
    quit(&addr, h);
}

#[test]
fn quit_acknowledges_then_drains() {
    let (addr, h) = start(1, slow_net(20));
    let mut c = Conn::open(&addr);
    c.send(&Command::trace("a", ProbeSpec::new(DEST)));
    assert!(matches!(c.recv(), Response::Progress { .. }));
    c.send(&Command::trace("b", ProbeSpec::new(DEST)));
    c.send(&Command::quit("q"));
    let mut finals = Vec::new();
    while finals.len() < 3 {
        let r = c.recv();
        if r.is_final() {
            finals.push(r);
        }
    }
    // queued job dropped, acknowledgement, then the active job drains
    assert!(matches!(&finals[0], Response::Error { request_id, .. } if request_id == "b"));
    assert!(matches!(finals[1], Response::Bye { dropped: 1, .. }));
    assert!(matches!(&finals[2], Response::Result { request_id, .. } if request_id == "a"));
    h.join().unwrap().unwrap();
}

#[test]
fn remote_campaign_against_live_agents() {
    let agents: Vec<_> = (0..2).map(|_| start(1, slow_net(1))).collect();
    let nodes: Vec<NodeDescriptor> = agents
        .iter()
        .enumerate()
        .map(|(i, (addr, _))| NodeDescriptor::new(format!("node{i}"), addr.clone(), "lab"))
        .collect();
    let schedule = EventSchedule::periodic(Duration::ZERO, Duration::from_millis(5), 6, "agent", &DEST.to_string());
    let mut exec = RemoteExecutor::new();
    exec.deploy_command = Some("test -n \"$PROBEKIT_NODE_ID\"".into());
    exec.io_timeout = Duration::from_secs(20);
    let records = run_campaign_live(&schedule, nodes, CampaignPolicy::Wait, exec).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.is_completed()), "{records:?}");
    for (addr, h) in agents {
        quit(&addr, h);
    }
}

fn spawn_agent(listen: &str) -> std::process::Child {
    let topo = concat!(env!("CARGO_MANIFEST_DIR"), "/data/topology.toml");
    Process::new(env!("CARGO_BIN_EXE_probekit"))
        .args(["agent", "serve", "--listen", listen, "--pps", "100", "--backend", &format!("sim:{topo}")])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

#[test]
fn binary_serves_and_quits_cleanly() {
    let mut child = spawn_agent("127.0.0.1:0");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_owned();

    let mut c = Conn::open(&addr);
    c.send(&Command::trace("t", ProbeSpec::new(Ipv4Addr::new(1, 1, 1, 1))));
    let Response::Result { result, .. } = c.finish("t") else { panic!() };
    assert_eq!(result.hops.len(), 6);
    c.send(&Command::quit("q"));
    assert!(matches!(c.finish("q"), Response::Bye { dropped: 0, .. }));
    assert_eq!(child.wait().unwrap().code(), Some(0));
}

#[test]
fn binary_fails_on_occupied_port() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let out = spawn_agent(&addr).wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
