//! Campaign dispatch: deployments are bound to free nodes under a WAIT or
//! DISCARD policy, one deployment per node at a time.
//!
//! [`run_campaign`] works on a virtual timeline: the executor reports how
//! long each deploy and execute phase took and the dispatcher derives when
//! each node frees up.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::budget::ResourceProfile;
use crate::probe::{ProbeSpec, TraceResult};
use crate::sim::SimNetwork;
use crate::time::VirtualClock;
use crate::trace::run_trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NodeState {
    Free,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeDescriptor {
    pub node_id: String,
    /// `host:port` of the node's agent, or a local handle.
    pub endpoint: String,
    pub location: String,
    pub state: NodeState,
}

impl NodeDescriptor {
    pub fn new(node_id: impl Into<String>, endpoint: impl Into<String>, location: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            endpoint: endpoint.into(),
            location: location.into(),
            state: NodeState::Free,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduledEvent {
    #[cfg_attr(feature = "serde", serde(with = "crate::serde_helpers::secs"))]
    pub offset: Duration,
    /// Name of the resource profile (configuration) to deploy.
    pub profile: String,
    /// Reference to what the deployed instance should probe.
    pub probe: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventSchedule {
    events: Vec<ScheduledEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("event {index} at {offset:?} precedes the event before it")]
    Decreasing { index: usize, offset: Duration },
}

impl EventSchedule {
    pub fn new(events: Vec<ScheduledEvent>) -> Result<Self, ScheduleError> {
        for (i, w) in events.windows(2).enumerate() {
            if w[1].offset < w[0].offset {
                return Err(ScheduleError::Decreasing {
                    index: i + 1,
                    offset: w[1].offset,
                });
            }
        }
        Ok(Self { events })
    }

    /// `count` events `period` apart starting at `start`.
    pub fn periodic(start: Duration, period: Duration, count: usize, profile: &str, probe: &str) -> Self {
        let events = (0..count)
            .map(|i| ScheduledEvent {
                offset: start + period * i as u32,
                profile: profile.into(),
                probe: probe.into(),
            })
            .collect();
        Self { events }
    }

    pub fn events(&self) -> &[ScheduledEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CampaignPolicy {
    /// Queue the event until a node frees up.
    Wait,
    /// Drop the event when no node is free.
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DeploymentStatus {
    Completed,
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DeploymentRecord {
    pub event_index: usize,
    pub profile: String,
    pub node_id: Option<String>,
    pub status: DeploymentStatus,
    #[cfg_attr(feature = "serde", serde(rename = "enqueue_time_s", with = "crate::serde_helpers::secs"))]
    pub enqueue_time: Duration,
    #[cfg_attr(feature = "serde", serde(rename = "start_time_s", with = "crate::serde_helpers::opt_secs"))]
    pub start_time: Option<Duration>,
    #[cfg_attr(feature = "serde", serde(rename = "deploy_duration_s", with = "crate::serde_helpers::opt_secs"))]
    pub deploy_duration: Option<Duration>,
    #[cfg_attr(feature = "serde", serde(rename = "exec_duration_s", with = "crate::serde_helpers::opt_secs"))]
    pub exec_duration: Option<Duration>,
    #[cfg_attr(feature = "serde", serde(rename = "total_s", with = "crate::serde_helpers::opt_secs"))]
    pub total: Option<Duration>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub error: Option<String>,
}

impl DeploymentRecord {
    pub fn is_completed(&self) -> bool {
        self.status == DeploymentStatus::Completed
    }

    /// Time spent queued before the deploy began.
    pub fn wait(&self) -> Option<Duration> {
        self.start_time.map(|s| s.saturating_sub(self.enqueue_time))
    }

    /// Interval during which the node was held.
    pub fn busy_interval(&self) -> Option<(Duration, Duration)> {
        let start = self.start_time?;
        Some((start, start + self.deploy_duration? + self.exec_duration?))
    }

    fn discarded(index: usize, event: &ScheduledEvent, error: Option<String>) -> Self {
        Self {
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
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("{0}")]
    Failed(String),
}

/// Measured phases of one deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub duration: Duration,
    pub results: Vec<TraceResult>,
}

/// Carries out deployments on nodes.
pub trait Executor {
    /// Ships and initialises the instance for `event` on `node`.
    fn deploy(&mut self, node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Duration, ExecError>;

    /// Runs the deployed instance; always called after a successful deploy.
    fn execute(&mut self, node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Execution, ExecError>;
}

impl<E: Executor + ?Sized> Executor for &mut E {
    fn deploy(&mut self, node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Duration, ExecError> {
        (**self).deploy(node, index, event)
    }

    fn execute(&mut self, node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Execution, ExecError> {
        (**self).execute(node, index, event)
    }
}

/// Node availability on the campaign timeline.
#[derive(Debug, Clone)]
pub struct NodeRegistry {
    nodes: Vec<NodeDescriptor>,
    free_at: Vec<Duration>,
    busy: Vec<Duration>,
    /// Node indices sorted by `node_id`.
    by_id: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("no nodes configured")]
    Empty,
    #[error("duplicate node id `{0}`")]
    Duplicate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Assigned(usize),
    Waited { until: Duration, node: usize },
    Discarded,
}

impl NodeRegistry {
    pub fn new(nodes: Vec<NodeDescriptor>) -> Result<Self, RegistryError> {
        if nodes.is_empty() {
            return Err(RegistryError::Empty);
        }
        let mut by_id: Vec<usize> = (0..nodes.len()).collect();
        by_id.sort_by(|&a, &b| nodes[a].node_id.cmp(&nodes[b].node_id));
        for w in by_id.windows(2) {
            if nodes[w[0]].node_id == nodes[w[1]].node_id {
                return Err(RegistryError::Duplicate(nodes[w[0]].node_id.clone()));
            }
        }
        let n = nodes.len();
        Ok(Self {
            nodes,
            free_at: alloc::vec![Duration::ZERO; n],
            busy: alloc::vec![Duration::ZERO; n],
            by_id,
        })
    }

    pub fn nodes(&self) -> &[NodeDescriptor] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &NodeDescriptor {
        &self.nodes[idx]
    }

    pub fn free_at(&self, idx: usize) -> Duration {
        self.free_at[idx]
    }

    /// Marks node `idx` as held until `until`.
    pub fn occupy(&mut self, idx: usize, until: Duration) {
        self.free_at[idx] = until;
    }

    /// Cumulative time each node spent deploying and executing.
    pub fn busy_time(&self, idx: usize) -> Duration {
        self.busy[idx]
    }

    /// Updates each node's `state` to reflect time `now`.
    pub fn refresh_states(&mut self, now: Duration) {
        for (node, &free) in self.nodes.iter_mut().zip(&self.free_at) {
            node.state = if free <= now { NodeState::Free } else { NodeState::Busy };
        }
    }
}

/// Picks a node for an event arriving at `now`. Among free nodes the lowest
/// `node_id` wins; under WAIT with every node busy, the earliest-freed node
/// wins, ties again by lowest `node_id`.
pub fn select_node(registry: &NodeRegistry, policy: CampaignPolicy, now: Duration) -> Selection {
    if let Some(&idx) = registry.by_id.iter().find(|&&i| registry.free_at[i] <= now) {
        return Selection::Assigned(idx);
    }
    match policy {
        CampaignPolicy::Discard => Selection::Discarded,
        CampaignPolicy::Wait => {
            let idx = registry
                .by_id
                .iter()
                .copied()
                .min_by_key(|&i| registry.free_at[i])
                .expect("registry is never empty");
            Selection::Waited {
                until: registry.free_at[idx],
                node: idx,
            }
        }
    }
}

/// Runs every scheduled event through the executor and returns exactly one
/// record per event, in event order.
pub fn run_campaign<E: Executor>(
    schedule: &EventSchedule,
    registry: &mut NodeRegistry,
    policy: CampaignPolicy,
    mut executor: E,
) -> Vec<DeploymentRecord> {
    let mut records = Vec::with_capacity(schedule.len());
    for (index, event) in schedule.events().iter().enumerate() {
        let now = event.offset;
        let (node, start) = match select_node(registry, policy, now) {
            Selection::Discarded => {
                records.push(DeploymentRecord::discarded(index, event, None));
                continue;
            }
            Selection::Assigned(node) => (node, now),
            Selection::Waited { until, node } => (node, until),
        };
        registry.refresh_states(start);
        let descriptor = registry.nodes[node].clone();
        let phases = executor
            .deploy(&descriptor, index, event)
            .and_then(|d| executor.execute(&descriptor, index, event).map(|e| (d, e.duration)));
        match phases {
            Ok((deploy, exec)) => {
                let end = start + deploy + exec;
                registry.occupy(node, end);
                registry.busy[node] += deploy + exec;
                records.push(DeploymentRecord {
                    event_index: index,
                    profile: event.profile.clone(),
                    node_id: Some(descriptor.node_id),
                    status: DeploymentStatus::Completed,
                    enqueue_time: now,
                    start_time: Some(start),
                    deploy_duration: Some(deploy),
                    exec_duration: Some(exec),
                    total: Some((start - now) + deploy + exec),
                    error: None,
                });
            }
            Err(e) => {
                registry.occupy(node, start);
                records.push(DeploymentRecord::discarded(index, event, Some(alloc::format!("{e}"))));
            }
        }
    }
    registry.refresh_states(schedule.events().last().map_or(Duration::ZERO, |e| e.offset));
    records
}

/// Deterministic executor: phase durations come from resource profiles,
/// optionally scaled by a seeded jitter factor in `[1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone)]
pub struct SimExecutor {
    profiles: BTreeMap<String, ResourceProfile>,
    jitter: f64,
    seed: u64,
    trace: Option<(SimNetwork, ProbeSpec)>,
}

impl SimExecutor {
    pub fn new(profiles: impl IntoIterator<Item = ResourceProfile>) -> Self {
        Self {
            profiles: profiles.into_iter().map(|p| (p.name.clone(), p)).collect(),
            jitter: 0.0,
            seed: 0,
            trace: None,
        }
    }

    pub fn with_jitter(mut self, jitter: f64, seed: u64) -> Self {
        self.jitter = jitter.clamp(0.0, 1.0);
        self.seed = seed;
        self
    }

    /// Also run `spec` against a simulated network on every execute.
    pub fn with_trace(mut self, net: SimNetwork, spec: ProbeSpec) -> Self {
        self.trace = Some((net, spec));
        self
    }

    pub fn profile(&self, name: &str) -> Option<&ResourceProfile> {
        self.profiles.get(name)
    }

    fn scaled(&self, secs: f64, index: usize, phase: u64) -> Duration {
        let factor = if self.jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(((index as u64) << 1) | phase);
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            1.0 + self.jitter * (2.0 * u - 1.0)
        } else {
            1.0
        };
        Duration::from_secs_f64((secs * factor).max(0.0))
    }

    fn lookup(&self, event: &ScheduledEvent) -> Result<&ResourceProfile, ExecError> {
        self.profiles
            .get(&event.profile)
            .ok_or_else(|| ExecError::UnknownProfile(event.profile.clone()))
    }
}

impl Executor for SimExecutor {
    fn deploy(&mut self, _node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Duration, ExecError> {
        let secs = self.lookup(event)?.deploy_time_s;
        Ok(self.scaled(secs, index, 0))
    }

    fn execute(&mut self, _node: &NodeDescriptor, index: usize, event: &ScheduledEvent) -> Result<Execution, ExecError> {
        let secs = self.lookup(event)?.boot_exec_time_s;
        let duration = self.scaled(secs, index, 1);
        let mut results = Vec::new();
        if let Some((net, spec)) = &mut self.trace {
            net.clear_log();
            let r = run_trace(spec.clone(), &mut *net, VirtualClock::new())
                .map_err(|e| ExecError::Failed(alloc::format!("{e}")))?;
            results.push(r);
        }
        Ok(Execution { duration, results })
    }
}

/// Per-profile slice of a campaign.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProfileSummary {
    pub profile: String,
    pub events: usize,
    pub completed: usize,
    pub success_rate: f64,
    pub mean_total_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NodeBusy {
    pub node_id: String,
    pub busy_s: f64,
    pub deployments: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CampaignReport {
    pub events: usize,
    pub completed: usize,
    pub discarded: usize,
    pub success_rate: f64,
    pub mean_total_s: Option<f64>,
    /// Sample standard deviation (n - 1); zero for a single completion.
    pub stddev_total_s: Option<f64>,
    pub mean_deploy_s: Option<f64>,
    pub mean_exec_s: Option<f64>,
    pub mean_wait_s: Option<f64>,
    pub nodes: Vec<NodeBusy>,
    pub profiles: Vec<ProfileSummary>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_stddev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some(libm::sqrt(ss / (xs.len() - 1) as f64))
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregates campaign records. Node and profile breakdowns are ordered by
/// name.
pub fn summarize(records: &[DeploymentRecord]) -> CampaignReport {
    let done: Vec<&DeploymentRecord> = records.iter().filter(|r| r.is_completed()).collect();
    let secs = |f: fn(&DeploymentRecord) -> Option<Duration>| -> Vec<f64> {
        done.iter().filter_map(|r| f(r)).map(|d| d.as_secs_f64()).collect()
    };
    let totals = secs(|r| r.total);

    let mut nodes: BTreeMap<&str, (Duration, usize)> = BTreeMap::new();
    for r in &done {
        if let (Some(id), Some(d), Some(e)) = (&r.node_id, r.deploy_duration, r.exec_duration) {
            let slot = nodes.entry(id.as_str()).or_default();
            slot.0 += d + e;
            slot.1 += 1;
        }
    }

    let mut profiles: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let slot = profiles.entry(r.profile.as_str()).or_default();
        slot.0 += 1;
        if let (true, Some(t)) = (r.is_completed(), r.total) {
            slot.1.push(t.as_secs_f64());
        }
    }

    CampaignReport {
        events: records.len(),
        completed: done.len(),
        discarded: records.len() - done.len(),
        success_rate: rate(done.len(), records.len()),
        mean_total_s: mean(&totals),
        stddev_total_s: sample_stddev(&totals),
        mean_deploy_s: mean(&secs(|r| r.deploy_duration)),
        mean_exec_s: mean(&secs(|r| r.exec_duration)),
        mean_wait_s: mean(&secs(|r| r.wait())),
        nodes: nodes
            .into_iter()
            .map(|(id, (busy, n))| NodeBusy {
                node_id: id.into(),
                busy_s: busy.as_secs_f64(),
                deployments: n,
            })
            .collect(),
        profiles: profiles
            .into_iter()
            .map(|(name, (events, totals))| ProfileSummary {
                profile: name.into(),
                events,
                completed: totals.len(),
                success_rate: rate(totals.len(), events),
                mean_total_s: mean(&totals),
            })
            .collect(),
    }
}
