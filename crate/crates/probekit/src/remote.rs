//! Running campaigns against real nodes.
//!
//! [`RemoteExecutor`] deploys by running a shell command and executes by
//! asking the node's agent for a trace. [`run_campaign_live`] dispatches
//! events in wall-clock time with one deployment in flight per node.

use std::io::{BufRead, BufReader, Write};
use std::net::{Ipv4Addr, TcpStream, ToSocketAddrs};
use std::process::Command as Shell;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use probekit_core::controller::{
    CampaignPolicy, DeploymentRecord, DeploymentStatus, EventSchedule, ExecError, Execution, Executor, NodeDescriptor,
    NodeRegistry, RegistryError, ScheduledEvent,
};
use probekit_core::probe::ProbeSpec;

use crate::agent::{Command, Response};

/// Deploy with `sh -c`, execute by sending a trace command to the node's
/// agent. The event's `probe` field is the IPv4 target.
#[derive(Debug, Clone)]
pub struct RemoteExecutor {
    /// Run before every execution with `PROBEKIT_NODE_ID`,
    /// `PROBEKIT_ENDPOINT`, `PROBEKIT_PROFILE` and `PROBEKIT_PROBE` set.
    pub deploy_command: Option<String>,
    /// Defaults for every traced spec; only the target changes.
    pub spec: ProbeSpec,
    pub io_timeout: Duration,
}

impl RemoteExecutor {
    pub fn new() -> Self {
        Self {
            deploy_command: None,
            spec: ProbeSpec::new(Ipv4Addr::UNSPECIFIED),
            io_timeout: Duration::from_secs(300),
        }
    }

    fn trace(&self, node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Execution, String> {
        let target: Ipv4Addr = event
            .probe
            .parse()
            .map_err(|_| format!("probe `{}` is not an IPv4 target", event.probe))?;
        let spec = ProbeSpec { target, ..self.spec.clone() };
        let addr = node
            .endpoint
            .to_socket_addrs()
            .map_err(|e| format!("{}: {e}", node.endpoint))?
            .next()
            .ok_or_else(|| format!("{}: no address", node.endpoint))?;
        let t0 = Instant::now();
        let mut stream = TcpStream::connect_timeout(&addr, self.io_timeout).map_err(|e| e.to_string())?;
        stream.set_read_timeout(Some(self.io_timeout)).map_err(|e| e.to_string())?;
        let request_id = format!("event-{index}");
        let mut line = Command::trace(&request_id, spec).to_line();
        line.push('\n');
        stream.write_all(line.as_bytes()).map_err(|e| e.to_string())?;
        for reply in BufReader::new(stream).lines() {
            let reply = reply.map_err(|e| e.to_string())?;
            let resp: Response = serde_json::from_str(&reply).map_err(|e| format!("bad reply: {e}"))?;
            if resp.request_id() != request_id {
                continue;
            }
            match resp {
                Response::Result { result, .. } => {
                    return Ok(Execution {
                        duration: t0.elapsed(),
                        results: vec![result],
                    })
                }
                Response::Error { message, .. } => return Err(message),
                _ => {}
            }
        }
        Err(format!("{} closed the connection", node.endpoint))
    }
}

impl Default for RemoteExecutor {
    fn default() -> Self {
        Self::new()
    }
}

impl Executor for RemoteExecutor {
    fn deploy(&mut self, node: &NodeDescriptor, _index: usize, event: &ScheduledEvent) -> Result<Duration, ExecError> {
        let t0 = Instant::now();
        if let Some(cmd) = &self.deploy_command {
            let status = Shell::new("sh")
                .arg("-c")
                .arg(cmd)
                .env("PROBEKIT_NODE_ID", &node.node_id)
                .env("PROBEKIT_ENDPOINT", &node.endpoint)
                .env("PROBEKIT_PROFILE", &event.profile)
                .env("PROBEKIT_PROBE", &event.probe)
                .status()
                .map_err(|e| ExecError::Failed(format!("deploy: {e}")))?;
            if !status.success() {
                return Err(ExecError::Failed(format!("deploy command exited with {status}")));
            }
        }
        Ok(t0.elapsed())
    }

    fn execute(&mut self, node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Execution, ExecError> {
        self.trace(node, index, event).map_err(ExecError::Failed)
    }
}

#[derive(Debug)]
struct Live {
    busy: Vec<bool>,
    freed_at: Vec<Duration>,
    records: Vec<Option<DeploymentRecord>>,
}

fn discarded(index: usize, event: &ScheduledEvent, error: Option<String>) -> DeploymentRecord {
    DeploymentRecord {
        event_index: index,
        profile: event.profile.clone(),
        node_id: None,
        status: DeploymentStatus::Discarded,
        enqueue_time: event.offset,
        start_time: None,
        deploy_duration: None,
        exec_duration: None,
        total: None,
        error,
    }
}

/// Wall-clock counterpart of `run_campaign`: each event is released at its
/// offset, deployments run concurrently on their own threads, and the
/// node-choice rules are the same. Returns one record per event, in event
/// order, once every deployment has finished.
pub fn run_campaign_live<E>(
    schedule: &EventSchedule,
    nodes: Vec<NodeDescriptor>,
    policy: CampaignPolicy,
    executor: E,
) -> Result<Vec<DeploymentRecord>, RegistryError>
where
    E: Executor + Clone + Send + 'static,
{
    // reuse the registry's validation
    NodeRegistry::new(nodes.clone())?;
    let mut by_id: Vec<usize> = (0..nodes.len()).collect();
    by_id.sort_by(|&a, &b| nodes[a].node_id.cmp(&nodes[b].node_id));
    let nodes = Arc::new(nodes);
    let shared = Arc::new((
        Mutex::new(Live {
            busy: vec![false; nodes.len()],
            freed_at: vec![Duration::ZERO; nodes.len()],
            records: vec![None; schedule.len()],
        }),
        Condvar::new(),
    ));
    let origin = Instant::now();
    let mut workers = Vec::new();

    for (index, event) in schedule.events().iter().enumerate() {
        if let Some(wait) = event.offset.checked_sub(origin.elapsed()) {
            thread::sleep(wait);
        }
        let (lock, cvar) = &*shared;
        let mut live = lock.lock().expect("campaign state poisoned");
        let node = match by_id.iter().copied().find(|&i| !live.busy[i]) {
            Some(i) => i,
            None if policy == CampaignPolicy::Discard => {
                live.records[index] = Some(discarded(index, event, None));
                continue;
            }
            None => {
                live = cvar
                    .wait_while(live, |l| l.busy.iter().all(|&b| b))
                    .expect("campaign state poisoned");
                by_id
                    .iter()
                    .copied()
                    .filter(|&i| !live.busy[i])
                    .min_by_key(|&i| live.freed_at[i])
                    .expect("a node is free")
            }
        };
        live.busy[node] = true;
        drop(live);

        let shared = Arc::clone(&shared);
        let nodes = Arc::clone(&nodes);
        let mut exec = executor.clone();
        let event = event.clone();
        workers.push(thread::spawn(move || {
            let start = origin.elapsed();
            let descriptor = &nodes[node];
            let phases = exec
                .deploy(descriptor, index, &event)
                .and_then(|d| exec.execute(descriptor, index, &event).map(|e| (d, e.duration)));
            let end = origin.elapsed();
            let record = match phases {
                Ok((deploy, run)) => DeploymentRecord {
                    event_index: index,
                    profile: event.profile.clone(),
                    node_id: Some(descriptor.node_id.clone()),
                    status: DeploymentStatus::Completed,
                    enqueue_time: event.offset,
                    start_time: Some(start),
                    deploy_duration: Some(deploy),
                    exec_duration: Some(run),
                    total: Some(start.saturating_sub(event.offset) + deploy + run),
                    error: None,
                },
                Err(e) => discarded(index, &event, Some(e.to_string())),
            };
            let (lock, cvar) = &*shared;
            let mut live = lock.lock().expect("campaign state poisoned");
            live.busy[node] = false;
            live.freed_at[node] = end;
            live.records[index] = Some(record);
            cvar.notify_all();
        }));
    }
    for w in workers {
        w.join().expect("deployment thread panicked");
    }
    let live = Arc::try_unwrap(shared)
        .expect("workers joined")
        .0
        .into_inner()
        .expect("campaign state poisoned");
    Ok(live
        .records
        .into_iter()
        .map(|r| r.expect("every event recorded"))
        .collect())
}
