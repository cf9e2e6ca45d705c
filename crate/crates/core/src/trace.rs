//! The traceroute engine.
//!
//! [`Tracer`] is the per-trace state machine: it says which probe to send
//! next and folds each outcome into hop records. [`run_trace`] drives one
//! tracer against a backend on a clock; the agent's scheduler drives many
//! tracers interleaved on a shared clock.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use crate::fingerprint::infer_initial_ttl;
use crate::mpls::parse_icmp_extensions;
use crate::probe::{HopRecord, Probe, ProbeOutcome, ProbeSpec, ReplyKind, SpecError, TraceResult};
use crate::rate::{Pacer, RateLimiter};
use crate::time::Clock;

/// Socket-level failure reported by a backend.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("backend error: {0}")]
pub struct BackendError(pub String);

/// A network that can carry probes.
pub trait NetworkBackend {
    /// Sends `probe` at `sent_at` and reports what came back. Blocking
    /// backends return once a reply arrives or they stop waiting; simulated
    /// ones return immediately with a future `received_at`.
    fn exchange(&mut self, probe: &Probe, sent_at: Duration) -> Result<ProbeOutcome, BackendError>;
}

impl<N: NetworkBackend + ?Sized> NetworkBackend for &mut N {
    fn exchange(&mut self, probe: &Probe, sent_at: Duration) -> Result<ProbeOutcome, BackendError> {
        (**self).exchange(probe, sent_at)
    }
}

/// A trace cut short by the backend, with the hops gathered so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceAborted {
    pub partial: TraceResult,
    pub error: BackendError,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    InvalidSpec(#[from] SpecError),
    #[error("trace aborted after {} hops: {}", .0.partial.hops.len(), .0.error)]
    Aborted(Box<TraceAborted>),
}

#[derive(Debug, Clone)]
pub struct Tracer {
    spec: ProbeSpec,
    hops: Vec<HopRecord>,
    ttl: u8,
    attempt: u8,
    silent_hops: u8,
    finished: bool,
    reached: bool,
    started_at: Duration,
}

impl Tracer {
    pub fn new(spec: ProbeSpec, started_at: Duration) -> Result<Self, SpecError> {
        spec.validate()?;
        Ok(Self {
            spec,
            hops: Vec::new(),
            ttl: 1,
            attempt: 0,
            silent_hops: 0,
            finished: false,
            reached: false,
            started_at,
        })
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }

    pub fn hops(&self) -> &[HopRecord] {
        &self.hops
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn next_probe(&self) -> Option<Probe> {
        if self.finished {
            return None;
        }
        Some(Probe {
            target: self.spec.target,
            method: self.spec.method,
            ttl: self.ttl,
            attempt: self.attempt,
            flow_id: self.spec.flow_id,
        })
    }

    /// Folds the outcome of the probe last returned by [`Tracer::next_probe`]
    /// into the trace. Returns the hop record when that probe closed its hop.
    pub fn record(&mut self, sent_at: Duration, outcome: &ProbeOutcome) -> Option<&HopRecord> {
        if self.finished {
            return None;
        }
        let ttl = self.ttl;
        let hop = match outcome {
            ProbeOutcome::Reply(reply) => {
                let rtt = reply.received_at.saturating_sub(sent_at);
                // untrustworthy extensions leave the hop without labels
                let labels = parse_icmp_extensions(&reply.extensions).unwrap_or_default();
                self.silent_hops = 0;
                if reply.kind.is_terminal() {
                    self.reached = true;
                    self.finished = true;
                }
                HopRecord {
                    ttl_sent: ttl,
                    responder: Some(reply.responder),
                    reply_kind: reply.kind,
                    rtt_us: Some(u64::try_from(rtt.as_micros()).unwrap_or(u64::MAX)),
                    reply_ip_ttl: Some(reply.ip_ttl),
                    labels,
                    fingerprint: infer_initial_ttl(reply.ip_ttl, u32::from(ttl)).ok(),
                }
            }
            ProbeOutcome::Silent { .. } => {
                self.attempt += 1;
                if self.attempt < self.spec.attempts_per_hop {
                    return None;
                }
                self.silent_hops += 1;
                if self.silent_hops >= self.spec.gap_limit {
                    self.finished = true;
                }
                HopRecord::timeout(ttl)
            }
        };
        debug_assert!(hop.reply_kind != ReplyKind::Timeout || hop.responder.is_none());
        if !self.finished {
            if self.ttl >= self.spec.max_ttl {
                self.finished = true;
            } else {
                self.ttl += 1;
                self.attempt = 0;
            }
        }
        self.hops.push(hop);
        self.hops.last()
    }

    pub fn finish(self, finished_at: Duration) -> TraceResult {
        TraceResult {
            spec: self.spec,
            hops: self.hops,
            destination_reached: self.reached,
            started_at: self.started_at,
            finished_at,
        }
    }
}

/// Runs a trace paced by its own `spec.pps`.
pub fn run_trace<N, C>(spec: ProbeSpec, net: N, clock: C) -> Result<TraceResult, TraceError>
where
    N: NetworkBackend,
    C: Clock,
{
    let pacer = RateLimiter::new(spec.pps).map_err(|_| SpecError::Pps(spec.pps))?;
    run_trace_with(spec, net, clock, pacer, |_| {})
}

/// Runs a trace with an external pacer (e.g. one shared between traces),
/// calling `on_hop` as each hop completes.
pub fn run_trace_with<N, C, P, F>(
    spec: ProbeSpec,
    mut net: N,
    mut clock: C,
    mut pacer: P,
    mut on_hop: F,
) -> Result<TraceResult, TraceError>
where
    N: NetworkBackend,
    C: Clock,
    P: Pacer,
    F: FnMut(&HopRecord),
{
    let mut tracer = Tracer::new(spec, clock.now())?;
    while let Some(probe) = tracer.next_probe() {
        let permit = pacer.acquire(clock.now());
        clock.sleep_until(permit);
        let sent_at = clock.now();
        match net.exchange(&probe, sent_at) {
            Ok(outcome) => {
                clock.sleep_until(outcome.settled_at());
                if let Some(hop) = tracer.record(sent_at, &outcome) {
                    on_hop(hop);
                }
            }
            Err(error) => {
                let partial = tracer.finish(clock.now());
                return Err(TraceError::Aborted(Box::new(TraceAborted { partial, error })));
            }
        }
    }
    Ok(tracer.finish(clock.now()))
}
