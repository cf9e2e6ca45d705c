use core::net::Ipv4Addr;
use core::time::Duration;
use std::collections::BTreeMap;

use probekit_core::sched::{JobEvent, JobScheduler};
use probekit_core::sim::{SimHop, SimNetwork, SimTopology};
use probekit_core::{run_trace, ProbeMethod, ProbeSpec, ReplyKind, VirtualClock};
use proptest::prelude::*;

fn topology() -> impl Strategy<Value = SimTopology> {
    let hop = (0u64..300_000, prop_oneof![Just(1.0), Just(0.0), Just(0.5)], prop::sample::select(vec![32u8, 64, 128, 255]));
    (prop::collection::vec(hop, 1..20), any::<u64>(), prop_oneof![Just(1_000_000u64), Just(400_000)]).prop_map(
        |(hops, seed, timeout_us)| {
            let n = hops.len() as u8;
            let hops: Vec<SimHop> = hops
                .into_iter()
                .enumerate()
                .map(|(i, (lat, p, ttl))| {
                    let mut h = SimHop::new(Ipv4Addr::new(10, 3, 0, i as u8 + 1), lat);
                    h.respond_probability = p;
                    h.initial_ttl = ttl;
                    h
                })
                .collect();
            let mut t = SimTopology::new(hops, Ipv4Addr::new(10, 3, 0, n)).unwrap();
            t.seed = seed;
            t.timeout_us = timeout_us;
            t
        },
    )
}

fn spec_for(target: Ipv4Addr) -> impl Strategy<Value = ProbeSpec> {
    (1u8..=32, 1u8..=3, 1u8..=4, prop_oneof![Just(10.0), Just(250.0)], any::<bool>()).prop_map(
        move |(max_ttl, attempts_per_hop, gap_limit, pps, udp)| ProbeSpec {
            max_ttl,
            attempts_per_hop,
            gap_limit,
            pps,
            method: if udp { ProbeMethod::Udp } else { ProbeMethod::IcmpEcho },
            ..ProbeSpec::new(target)
        },
    )
}

fn case() -> impl Strategy<Value = (SimTopology, ProbeSpec)> {
    topology().prop_flat_map(|t| {
        let dest = t.destination;
        (Just(t), spec_for(dest))
    })
}

proptest! {
    #[test]
    fn trace_invariants((topo, spec) in case()) {
        let r = run_trace(spec.clone(), SimNetwork::new(topo.clone()), VirtualClock::new()).unwrap();
        prop_assert!(r.validate().is_ok());
        prop_assert!(!r.hops.is_empty() && r.hops.len() <= usize::from(spec.max_ttl));
        for (i, h) in r.hops.iter().enumerate() {
            prop_assert_eq!(usize::from(h.ttl_sent), i + 1);
            prop_assert_eq!(h.reply_kind == ReplyKind::Timeout, h.responder.is_none());
            if let Some(rtt) = h.rtt_us {
                prop_assert!(rtt <= topo.timeout_us);
            }
        }
        let last = r.hops.last().unwrap();
        prop_assert_eq!(r.destination_reached, last.reply_kind.is_terminal());
        let silent_tail = r.hops.iter().rev().take_while(|h| h.reply_kind == ReplyKind::Timeout).count();
        prop_assert!(silent_tail <= usize::from(spec.gap_limit));
        prop_assert!(
            r.destination_reached || silent_tail == usize::from(spec.gap_limit) || r.hops.len() == usize::from(spec.max_ttl)
        );
    }

    #[test]
    fn trace_is_deterministic((topo, spec) in case()) {
        let a = run_trace(spec.clone(), SimNetwork::new(topo.clone()), VirtualClock::new()).unwrap();
        let b = run_trace(spec, SimNetwork::new(topo), VirtualClock::new()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scheduled_jobs_match_solo_runs(
        (topo, specs) in topology().prop_flat_map(|t| {
            let dest = t.destination;
            (Just(t), prop::collection::vec(spec_for(dest), 1..6))
        }),
        max_parallel in 1usize..4,
        global_pps in prop_oneof![Just(50.0), Just(1000.0)],
    ) {
        let mut sched = JobScheduler::new(max_parallel, global_pps).unwrap();
        let ids: Vec<_> = specs.iter().map(|s| sched.submit(s.clone()).unwrap()).collect();
        let mut net = SimNetwork::new(topo.clone());
        let mut clock = VirtualClock::new();
        let mut results = BTreeMap::new();
        let mut running = 0usize;
        sched.run_until_idle(&mut clock, &mut net, |ev| match ev {
            JobEvent::Started { .. } => {
                running += 1;
                assert!(running <= max_parallel);
            }
            JobEvent::Finished { job, result } => {
                running -= 1;
                results.insert(job, result);
            }
            JobEvent::Failed { .. } => panic!("simulated network never fails"),
            JobEvent::Progress { .. } => {}
        });
        prop_assert!(sched.is_idle());
        // hop content does not depend on interleaving, only timing does
        for (id, spec) in ids.iter().zip(&specs) {
            let solo = run_trace(spec.clone(), SimNetwork::new(topo.clone()), VirtualClock::new()).unwrap();
            let shared = &results[id];
            let strip = |hops: &[probekit_core::HopRecord]| {
                hops.iter().map(|h| (h.ttl_sent, h.responder, h.reply_kind, h.rtt_us, h.labels.clone())).collect::<Vec<_>>()
            };
            prop_assert_eq!(strip(&solo.hops), strip(&shared.hops));
        }
        let interval = Duration::from_nanos((1e9 / global_pps).ceil() as u64);
        for w in net.sent().windows(2) {
            prop_assert!(w[1].0 - w[0].0 >= interval);
        }
    }
}
