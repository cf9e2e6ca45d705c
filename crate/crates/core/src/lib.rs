//! Allocation-only core of the probekit measurement system.
//!
//! Everything here is deterministic and free of IO: the MPLS label-stack
//! codec and ICMP extension parser, initial-TTL fingerprinting, the
//! probes-per-second limiter, the traceroute engine and its simulated
//! network, the agent's job scheduler, the campaign dispatcher and the
//! fixed-budget instance packing simulator. The `probekit` crate wires these
//! to sockets, files and a command line.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod budget;
pub mod controller;
pub mod fingerprint;
pub mod mpls;
pub mod probe;
pub mod rate;
pub mod sched;
pub mod sim;
pub mod time;
pub mod trace;

#[cfg(feature = "serde")]
mod serde_helpers;

pub use fingerprint::{infer_initial_ttl, InitialTtlClass};
pub use mpls::{parse_icmp_extensions, MplsLabelEntry};
pub use probe::{HopRecord, ProbeMethod, ProbeSpec, ReplyKind, TraceResult};
pub use rate::{Pacer, RateLimiter};
pub use time::{Clock, VirtualClock};
pub use trace::{run_trace, NetworkBackend, TraceAborted};
