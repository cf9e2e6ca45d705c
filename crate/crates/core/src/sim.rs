//! Deterministic simulated network.
//!
//! Hop `i` (1-based) of a [`SimTopology`] answers probes sent with TTL `i`
//! with a time-exceeded reply; the last hop is the destination and answers
//! any probe with TTL at least its distance. Responsiveness is a pure
//! function of `(seed, ttl, attempt)`, so replays are bit-identical.

use alloc::vec::Vec;
use core::net::Ipv4Addr;
use core::time::Duration;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::mpls::{build_icmp_extensions, MplsLabelEntry};
use crate::probe::{Probe, ProbeMethod, ProbeOutcome, Reply, ReplyKind};
use crate::trace::{BackendError, NetworkBackend};

pub const DEFAULT_TIMEOUT_US: u64 = 1_000_000;
pub const DEFAULT_INITIAL_TTL: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SimHop {
    pub address: Ipv4Addr,
    /// One-way latency from the prober; the round trip is twice this.
    pub latency_us: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub labels: Vec<MplsLabelEntry>,
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub respond_probability: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_initial_ttl"))]
    pub initial_ttl: u8,
    /// Send a version-3 extension header instead of a valid one.
    #[cfg_attr(feature = "serde", serde(default))]
    pub malformed_extension: bool,
}

#[cfg(feature = "serde")]
fn one() -> f64 {
    1.0
}

#[cfg(feature = "serde")]
fn default_initial_ttl() -> u8 {
    DEFAULT_INITIAL_TTL
}

#[cfg(feature = "serde")]
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_US
}

impl SimHop {
    pub fn new(address: Ipv4Addr, latency_us: u64) -> Self {
        Self {
            address,
            latency_us,
            labels: Vec::new(),
            respond_probability: 1.0,
            initial_ttl: DEFAULT_INITIAL_TTL,
            malformed_extension: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SimTopology {
    pub destination: Ipv4Addr,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_timeout"))]
    pub timeout_us: u64,
    #[cfg_attr(feature = "serde", serde(rename = "hop"))]
    pub hops: Vec<SimHop>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TopologyError {
    #[error("topology needs at least one hop")]
    Empty,
    #[error("destination {destination} is not the last hop ({last})")]
    Destination { destination: Ipv4Addr, last: Ipv4Addr },
    #[error("hop {0}: respond probability must be within [0, 1]")]
    Probability(usize),
    #[error("hop {0}: bottom-of-stack must be set on exactly the last label")]
    LabelStack(usize),
}

impl SimTopology {
    pub fn new(hops: Vec<SimHop>, destination: Ipv4Addr) -> Result<Self, TopologyError> {
        let topo = Self {
            destination,
            seed: 0,
            timeout_us: DEFAULT_TIMEOUT_US,
            hops,
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let last = self.hops.last().ok_or(TopologyError::Empty)?;
        if last.address != self.destination {
            return Err(TopologyError::Destination {
                destination: self.destination,
                last: last.address,
            });
        }
        for (i, hop) in self.hops.iter().enumerate() {
            if !(0.0..=1.0).contains(&hop.respond_probability) {
                return Err(TopologyError::Probability(i + 1));
            }
            if let Some((top, rest)) = hop.labels.split_last() {
                if !top.bottom_of_stack() || rest.iter().any(|e| e.bottom_of_stack()) {
                    return Err(TopologyError::LabelStack(i + 1));
                }
            }
        }
        Ok(())
    }

    /// Distance of the destination in hops.
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// The hop that answers a probe with `ttl`, if the probe reaches one.
    pub fn hop_for(&self, target: Ipv4Addr, ttl: u8) -> Option<(usize, &SimHop)> {
        let n = self.hops.len();
        let ttl = usize::from(ttl);
        if ttl == 0 {
            None
        } else if ttl < n {
            Some((ttl, &self.hops[ttl - 1]))
        } else if target == self.destination {
            Some((n, &self.hops[n - 1]))
        } else {
            None
        }
    }

    /// Whether the hop answering `ttl` replies to retry `attempt`.
    pub fn responds(&self, target: Ipv4Addr, ttl: u8, attempt: u8) -> bool {
        let Some((_, hop)) = self.hop_for(target, ttl) else {
            return false;
        };
        let p = hop.respond_probability;
        if p >= 1.0 {
            return true;
        }
        if p <= 0.0 {
            return false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((u64::from(ttl) << 8) | u64::from(attempt));
        // 53 random mantissa bits -> uniform in [0, 1)
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u < p
    }
}

/// [`NetworkBackend`] over a [`SimTopology`]. Keeps a log of every send.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    topology: SimTopology,
    sent: Vec<(Duration, Probe)>,
}

impl SimNetwork {
    pub fn new(topology: SimTopology) -> Self {
        Self {
            topology,
            sent: Vec::new(),
        }
    }

    pub fn topology(&self) -> &SimTopology {
        &self.topology
    }

    /// Every probe sent so far, with its send time.
    pub fn sent(&self) -> &[(Duration, Probe)] {
        &self.sent
    }

    pub fn clear_log(&mut self) {
        self.sent.clear();
    }
}

impl NetworkBackend for SimNetwork {
    fn exchange(&mut self, probe: &Probe, sent_at: Duration) -> Result<ProbeOutcome, BackendError> {
        self.sent.push((sent_at, *probe));
        let topo = &self.topology;
        let silent = ProbeOutcome::Silent {
            gave_up_at: sent_at + Duration::from_micros(topo.timeout_us),
        };
        if !topo.responds(probe.target, probe.ttl, probe.attempt) {
            return Ok(silent);
        }
        let Some((distance, hop)) = topo.hop_for(probe.target, probe.ttl) else {
            return Ok(silent);
        };
        let rtt = Duration::from_micros(hop.latency_us.saturating_mul(2));
        if rtt.as_micros() > u128::from(topo.timeout_us) {
            return Ok(silent);
        }
        let at_destination = distance == topo.len();
        let kind = match (at_destination, probe.method) {
            (false, _) => ReplyKind::TimeExceeded,
            (true, ProbeMethod::IcmpEcho) => ReplyKind::EchoReply,
            (true, ProbeMethod::Udp) => ReplyKind::DestUnreachable,
        };
        let extensions = if kind == ReplyKind::TimeExceeded {
            if hop.malformed_extension {
                malformed_region(&hop.labels)
            } else {
                build_icmp_extensions(&hop.labels)
            }
        } else {
            Vec::new()
        };
        let hops_back = u8::try_from(distance - 1).unwrap_or(u8::MAX);
        Ok(ProbeOutcome::Reply(Reply {
            responder: hop.address,
            kind,
            received_at: sent_at + rtt,
            ip_ttl: hop.initial_ttl.saturating_sub(hops_back),
            extensions,
        }))
    }
}

fn malformed_region(labels: &[MplsLabelEntry]) -> Vec<u8> {
    let mut raw = build_icmp_extensions(labels);
    if raw.is_empty() {
        raw.extend_from_slice(&[0, 0, 0, 0]);
    }
    raw[0] = 3 << 4;
    raw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(i: u8) -> Ipv4Addr {
        Ipv4Addr::new(10, 0, 0, i)
    }

    #[test]
    fn validation() {
        assert_eq!(SimTopology::new(Vec::new(), addr(1)), Err(TopologyError::Empty));
        assert!(matches!(
            SimTopology::new(alloc::vec![SimHop::new(addr(1), 0)], addr(2)),
            Err(TopologyError::Destination { .. })
        ));
        let mut hop = SimHop::new(addr(1), 0);
        hop.respond_probability = 1.5;
        assert_eq!(
            SimTopology::new(alloc::vec![hop], addr(1)),
            Err(TopologyError::Probability(1))
        );
    }

    #[test]
    fn beyond_destination_answers_from_destination() {
        let topo = SimTopology::new(
            alloc::vec![SimHop::new(addr(1), 10), SimHop::new(addr(2), 20)],
            addr(2),
        )
        .unwrap();
        assert_eq!(topo.hop_for(addr(2), 9).unwrap().0, 2);
        assert!(topo.hop_for(addr(9), 9).is_none());
        assert_eq!(topo.hop_for(addr(9), 1).unwrap().0, 1);
    }

    #[test]
    fn udp_destination_is_unreachable_reply() {
        let topo = SimTopology::new(alloc::vec![SimHop::new(addr(1), 10)], addr(1)).unwrap();
        let mut net = SimNetwork::new(topo);
        let probe = Probe {
            target: addr(1),
            method: ProbeMethod::Udp,
            ttl: 1,
            attempt: 0,
            flow_id: 1,
        };
        match net.exchange(&probe, Duration::ZERO).unwrap() {
            ProbeOutcome::Reply(r) => {
                assert_eq!(r.kind, ReplyKind::DestUnreachable);
                assert_eq!(r.received_at, Duration::from_micros(20));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coin_is_stable_and_roughly_fair() {
        let mut hops: Vec<_> = (1..=200).map(|i| SimHop::new(Ipv4Addr::new(10, 0, 1, i), 1)).collect();
        for h in &mut hops {
            h.respond_probability = 0.5;
        }
        let dest = hops.last().unwrap().address;
        let mut topo = SimTopology::new(hops, dest).unwrap();
        topo.seed = 3;
        let hits = (1..=200u8).filter(|&t| topo.responds(dest, t, 0)).count();
        assert!((60..=140).contains(&hits), "{hits}");
        let again = (1..=200u8).filter(|&t| topo.responds(dest, t, 0)).count();
        assert_eq!(hits, again);
    }
}
