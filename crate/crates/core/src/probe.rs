//! Probing requests and the per-hop evidence a trace collects.

use alloc::vec::Vec;
use core::net::Ipv4Addr;
use core::time::Duration;

use crate::fingerprint::InitialTtlClass;
use crate::mpls::MplsLabelEntry;

pub const MAX_TTL_LIMIT: u8 = 64;
pub const MAX_ATTEMPTS: u8 = 5;

pub const DEFAULT_MAX_TTL: u8 = 30;
pub const DEFAULT_ATTEMPTS: u8 = 3;
pub const DEFAULT_GAP_LIMIT: u8 = 5;
pub const DEFAULT_PPS: f64 = 100.0;
pub const DEFAULT_FLOW_ID: u16 = 0x4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ProbeMethod {
    IcmpEcho,
    Udp,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ProbeSpec {
    pub target: Ipv4Addr,
    pub method: ProbeMethod,
    pub max_ttl: u8,
    pub attempts_per_hop: u8,
    pub pps: f64,
    pub gap_limit: u8,
    /// Held constant for the whole trace so per-flow load balancers keep
    /// the probes on one path.
    pub flow_id: u16,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecError {
    #[error("max_ttl must be in 1..={MAX_TTL_LIMIT}, got {0}")]
    MaxTtl(u8),
    #[error("attempts_per_hop must be in 1..={MAX_ATTEMPTS}, got {0}")]
    Attempts(u8),
    #[error("pps must be positive and finite, got {0}")]
    Pps(f64),
    #[error("gap_limit must be at least 1")]
    GapLimit,
}

impl ProbeSpec {
    /// A spec with conventional traceroute defaults.
    pub fn new(target: Ipv4Addr) -> Self {
        Self {
            target,
            method: ProbeMethod::IcmpEcho,
            max_ttl: DEFAULT_MAX_TTL,
            attempts_per_hop: DEFAULT_ATTEMPTS,
            pps: DEFAULT_PPS,
            gap_limit: DEFAULT_GAP_LIMIT,
            flow_id: DEFAULT_FLOW_ID,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if !(1..=MAX_TTL_LIMIT).contains(&self.max_ttl) {
            return Err(SpecError::MaxTtl(self.max_ttl));
        }
        if !(1..=MAX_ATTEMPTS).contains(&self.attempts_per_hop) {
            return Err(SpecError::Attempts(self.attempts_per_hop));
        }
        if !(self.pps.is_finite() && self.pps > 0.0) {
            return Err(SpecError::Pps(self.pps));
        }
        if self.gap_limit == 0 {
            return Err(SpecError::GapLimit);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ReplyKind {
    TimeExceeded,
    EchoReply,
    DestUnreachable,
    Timeout,
}

impl ReplyKind {
    /// Replies that end a trace.
    pub fn is_terminal(self) -> bool {
        matches!(self, ReplyKind::EchoReply | ReplyKind::DestUnreachable)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct HopRecord {
    pub ttl_sent: u8,
    pub responder: Option<Ipv4Addr>,
    pub reply_kind: ReplyKind,
    pub rtt_us: Option<u64>,
    pub reply_ip_ttl: Option<u8>,
    pub labels: Vec<MplsLabelEntry>,
    pub fingerprint: Option<InitialTtlClass>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecordError {
    #[error("hop {0}: timeout, responder and rtt must be all present or all absent")]
    TimeoutShape(u8),
    #[error("hop {0}: bottom-of-stack must be set on exactly the last label")]
    LabelStack(u8),
    #[error("hops are not strictly increasing at ttl {0}")]
    Order(u8),
    #[error("destination_reached requires a terminal last hop")]
    Destination,
    #[error("hop follows a terminal reply at ttl {0}")]
    AfterTerminal(u8),
    #[error("finished_at precedes started_at")]
    Timestamps,
    #[error(transparent)]
    Spec(#[from] SpecError),
}

impl HopRecord {
    pub fn timeout(ttl_sent: u8) -> Self {
        Self {
            ttl_sent,
            responder: None,
            reply_kind: ReplyKind::Timeout,
            rtt_us: None,
            reply_ip_ttl: None,
            labels: Vec::new(),
            fingerprint: None,
        }
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let timeout = self.reply_kind == ReplyKind::Timeout;
        if timeout == self.responder.is_some() || timeout == self.rtt_us.is_some() {
            return Err(RecordError::TimeoutShape(self.ttl_sent));
        }
        if let Some((last, rest)) = self.labels.split_last() {
            if !last.bottom_of_stack() || rest.iter().any(|e| e.bottom_of_stack()) {
                return Err(RecordError::LabelStack(self.ttl_sent));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TraceResult {
    pub spec: ProbeSpec,
    pub hops: Vec<HopRecord>,
    pub destination_reached: bool,
    #[cfg_attr(feature = "serde", serde(with = "crate::serde_helpers::nanos"))]
    pub started_at: Duration,
    #[cfg_attr(feature = "serde", serde(with = "crate::serde_helpers::nanos"))]
    pub finished_at: Duration,
}

impl TraceResult {
    /// Checks every structural invariant of a result, e.g. after decoding one.
    pub fn validate(&self) -> Result<(), RecordError> {
        self.spec.validate()?;
        let mut prev: Option<u8> = None;
        let mut terminal = false;
        for hop in &self.hops {
            hop.validate()?;
            if terminal {
                return Err(RecordError::AfterTerminal(hop.ttl_sent));
            }
            if prev.is_some_and(|p| hop.ttl_sent <= p) {
                return Err(RecordError::Order(hop.ttl_sent));
            }
            prev = Some(hop.ttl_sent);
            terminal = hop.reply_kind.is_terminal();
        }
        if self.destination_reached && !terminal {
            return Err(RecordError::Destination);
        }
        if self.finished_at < self.started_at {
            return Err(RecordError::Timestamps);
        }
        Ok(())
    }
}

/// One probe as handed to a network backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub target: Ipv4Addr,
    pub method: ProbeMethod,
    pub ttl: u8,
    /// Zero-based retry index within the hop.
    pub attempt: u8,
    pub flow_id: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub responder: Ipv4Addr,
    pub kind: ReplyKind,
    pub received_at: Duration,
    pub ip_ttl: u8,
    /// Raw ICMP extension region, empty when the reply carried none.
    pub extensions: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeOutcome {
    Reply(Reply),
    /// Nothing came back; the backend stopped listening at `gave_up_at`.
    Silent { gave_up_at: Duration },
}

impl ProbeOutcome {
    /// When the probe's exchange finished, i.e. when the next one may start.
    pub fn settled_at(&self) -> Duration {
        match self {
            ProbeOutcome::Reply(r) => r.received_at,
            ProbeOutcome::Silent { gave_up_at } => *gave_up_at,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ProbeSpec {
        ProbeSpec::new(Ipv4Addr::new(1, 1, 1, 1))
    }

    #[test]
    fn spec_bounds() {
        assert!(spec().validate().is_ok());
        assert_eq!(
            ProbeSpec { max_ttl: 0, ..spec() }.validate(),
            Err(SpecError::MaxTtl(0))
        );
        assert_eq!(
            ProbeSpec { max_ttl: 65, ..spec() }.validate(),
            Err(SpecError::MaxTtl(65))
        );
        assert_eq!(
            ProbeSpec { attempts_per_hop: 6, ..spec() }.validate(),
            Err(SpecError::Attempts(6))
        );
        assert_eq!(
            ProbeSpec { pps: 0.0, ..spec() }.validate(),
            Err(SpecError::Pps(0.0))
        );
        assert_eq!(
            ProbeSpec { gap_limit: 0, ..spec() }.validate(),
            Err(SpecError::GapLimit)
        );
    }

    #[test]
    fn timeout_shape() {
        assert!(HopRecord::timeout(3).validate().is_ok());
        let mut h = HopRecord::timeout(3);
        h.rtt_us = Some(10);
        assert_eq!(h.validate(), Err(RecordError::TimeoutShape(3)));
    }

    #[test]
    fn result_order_and_destination() {
        let mut r = TraceResult {
            spec: spec(),
            hops: alloc::vec![HopRecord::timeout(2), HopRecord::timeout(1)],
            destination_reached: false,
            started_at: Duration::ZERO,
            finished_at: Duration::ZERO,
        };
        assert_eq!(r.validate(), Err(RecordError::Order(1)));
        r.hops.reverse();
        assert!(r.validate().is_ok());
        r.destination_reached = true;
        assert_eq!(r.validate(), Err(RecordError::Destination));
    }
}
