//! Job scheduling for the measurement agent.
//!
//! Traces are admitted FIFO, at most `max_parallel` at a time, and their
//! probes are interleaved on one clock. Every send draws a permit from the
//! job's own limiter and from the agent-wide limiter, so the merged send
//! timeline respects the global rate exactly.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::time::Duration;

use crate::probe::{HopRecord, ProbeOutcome, ProbeSpec, SpecError, TraceResult};
use crate::rate::{Pacer, RateError, RateLimiter};
use crate::time::Clock;
use crate::trace::{BackendError, NetworkBackend, Tracer};

pub type JobId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum JobEvent {
    Started { job: JobId, at: Duration },
    Progress { job: JobId, hop: HopRecord },
    Finished { job: JobId, result: TraceResult },
    Failed { job: JobId, partial: TraceResult, error: BackendError },
}

impl JobEvent {
    pub fn job(&self) -> JobId {
        match self {
            JobEvent::Started { job, .. }
            | JobEvent::Progress { job, .. }
            | JobEvent::Finished { job, .. }
            | JobEvent::Failed { job, .. } => *job,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("max_parallel must be at least 1")]
    Parallelism,
    #[error(transparent)]
    Rate(#[from] RateError),
}

#[derive(Debug)]
struct ActiveJob {
    id: JobId,
    tracer: Tracer,
    pacer: RateLimiter,
    ready_at: Duration,
    /// Outcome of the probe in flight, applied once its time has come.
    pending: Option<(Duration, ProbeOutcome)>,
}

#[derive(Debug)]
pub struct JobScheduler {
    max_parallel: usize,
    queue: VecDeque<(JobId, ProbeSpec)>,
    active: Vec<ActiveJob>,
    global: RateLimiter,
    next_id: JobId,
}

impl JobScheduler {
    pub fn new(max_parallel: usize, pps: f64) -> Result<Self, SchedulerError> {
        if max_parallel == 0 {
            return Err(SchedulerError::Parallelism);
        }
        Ok(Self {
            max_parallel,
            queue: VecDeque::new(),
            active: Vec::new(),
            global: RateLimiter::new(pps)?,
            next_id: 1,
        })
    }

    pub fn max_parallel(&self) -> usize {
        self.max_parallel
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn active(&self) -> usize {
        self.active.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.active.is_empty()
    }

    pub fn submit(&mut self, spec: ProbeSpec) -> Result<JobId, SpecError> {
        spec.validate()?;
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push_back((id, spec));
        Ok(id)
    }

    /// Removes every job that has not started yet.
    pub fn drop_queued(&mut self) -> Vec<JobId> {
        self.queue.drain(..).map(|(id, _)| id).collect()
    }

    fn promote(&mut self, now: Duration, events: &mut Vec<JobEvent>) {
        while self.active.len() < self.max_parallel {
            let Some((id, spec)) = self.queue.pop_front() else {
                break;
            };
            let pacer = RateLimiter::new(spec.pps).expect("validated on submit");
            let tracer = Tracer::new(spec, now).expect("validated on submit");
            self.active.push(ActiveJob {
                id,
                tracer,
                pacer,
                ready_at: now,
                pending: None,
            });
            events.push(JobEvent::Started { job: id, at: now });
        }
    }

    fn due(&self, job: &ActiveJob) -> Duration {
        match &job.pending {
            Some((_, outcome)) => outcome.settled_at(),
            None => {
                let t = job.pacer.peek(job.ready_at);
                self.global.peek(t)
            }
        }
    }

    /// Earliest time at which [`JobScheduler::step`] has work, or `None`
    /// when there is nothing left to do.
    pub fn next_wakeup(&self, now: Duration) -> Option<Duration> {
        if self.active.len() < self.max_parallel && !self.queue.is_empty() {
            return Some(now);
        }
        self.active.iter().map(|j| self.due(j)).min()
    }

    /// Performs the next due action (apply one outcome, or send one probe)
    /// at `now`.
    pub fn step<N: NetworkBackend>(&mut self, now: Duration, net: &mut N) -> Vec<JobEvent> {
        let mut events = Vec::new();
        self.promote(now, &mut events);
        let Some((idx, due)) = self
            .active
            .iter()
            .enumerate()
            .map(|(i, j)| (i, self.due(j)))
            .min_by_key(|&(i, due)| (due, i))
        else {
            return events;
        };
        if due > now {
            return events;
        }

        let job = &mut self.active[idx];
        if let Some((sent_at, outcome)) = job.pending.take() {
            if let Some(hop) = job.tracer.record(sent_at, &outcome) {
                events.push(JobEvent::Progress {
                    job: job.id,
                    hop: hop.clone(),
                });
            }
            job.ready_at = now;
            if job.tracer.is_finished() {
                let job = self.active.remove(idx);
                events.push(JobEvent::Finished {
                    job: job.id,
                    result: job.tracer.finish(now),
                });
                self.promote(now, &mut events);
            }
            return events;
        }

        let probe = job.tracer.next_probe().expect("finished jobs are retired");
        job.pacer.acquire(now);
        self.global.acquire(now);
        match net.exchange(&probe, now) {
            Ok(outcome) => job.pending = Some((now, outcome)),
            Err(error) => {
                let job = self.active.remove(idx);
                events.push(JobEvent::Failed {
                    job: job.id,
                    partial: job.tracer.finish(now),
                    error,
                });
                self.promote(now, &mut events);
            }
        }
        events
    }

    /// Drives every queued and active job to completion.
    pub fn run_until_idle<C, N, F>(&mut self, clock: &mut C, net: &mut N, mut on_event: F)
    where
        C: Clock,
        N: NetworkBackend,
        F: FnMut(JobEvent),
    {
        while let Some(t) = self.next_wakeup(clock.now()) {
            clock.sleep_until(t);
            for ev in self.step(clock.now(), net) {
                on_event(ev);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{SimHop, SimNetwork, SimTopology};
    use crate::time::VirtualClock;
    use core::net::Ipv4Addr;

    fn net(n: u8) -> SimNetwork {
        let hops = (1..=n).map(|i| SimHop::new(Ipv4Addr::new(10, 0, 0, i), 300)).collect();
        SimNetwork::new(SimTopology::new(hops, Ipv4Addr::new(10, 0, 0, n)).unwrap())
    }

    fn spec(pps: f64) -> ProbeSpec {
        ProbeSpec {
            pps,
            ..ProbeSpec::new(Ipv4Addr::new(10, 0, 0, 4))
        }
    }

    #[test]
    fn rejects_zero_parallelism() {
        assert_eq!(
            JobScheduler::new(0, 10.0).unwrap_err(),
            SchedulerError::Parallelism
        );
    }

    #[test]
    fn fifo_with_single_slot() {
        let mut s = JobScheduler::new(1, 1000.0).unwrap();
        let a = s.submit(spec(1000.0)).unwrap();
        let b = s.submit(spec(1000.0)).unwrap();
        let mut net = net(4);
        let mut clock = VirtualClock::new();
        let mut finished = Vec::new();
        s.run_until_idle(&mut clock, &mut net, |ev| {
            if let JobEvent::Finished { job, result } = ev {
                finished.push((job, result.started_at, result.finished_at));
            }
        });
        assert_eq!(finished.len(), 2);
        assert_eq!(finished[0].0, a);
        assert_eq!(finished[1].0, b);
        // b starts only once a is done
        assert_eq!(finished[1].1, finished[0].2);
        assert!(finished[1].2 > finished[0].2);
    }

    #[test]
    fn global_cap_holds_across_parallel_jobs() {
        let mut s = JobScheduler::new(3, 50.0).unwrap();
        for _ in 0..3 {
            s.submit(spec(1000.0)).unwrap();
        }
        let mut net = net(4);
        let mut clock = VirtualClock::new();
        let mut done = 0;
        s.run_until_idle(&mut clock, &mut net, |ev| {
            if matches!(ev, JobEvent::Finished { .. }) {
                done += 1;
            }
        });
        assert_eq!(done, 3);
        let times: Vec<_> = net.sent().iter().map(|(t, _)| *t).collect();
        assert_eq!(times.len(), 12);
        for w in times.windows(2) {
            assert!(w[1] - w[0] >= Duration::from_millis(20));
        }
    }

    #[test]
    fn per_job_rate_still_applies() {
        let mut s = JobScheduler::new(1, 1000.0).unwrap();
        s.submit(spec(10.0)).unwrap();
        let mut net = net(4);
        s.run_until_idle(&mut VirtualClock::new(), &mut net, |_| {});
        let times: Vec<_> = net.sent().iter().map(|(t, _)| t.as_millis()).collect();
        assert_eq!(times, [0, 100, 200, 300]);
    }

    #[test]
    fn drop_queued_leaves_active() {
        let mut s = JobScheduler::new(1, 100.0).unwrap();
        s.submit(spec(100.0)).unwrap();
        let b = s.submit(spec(100.0)).unwrap();
        let _ = s.step(Duration::ZERO, &mut net(4));
        assert_eq!((s.active(), s.queued()), (1, 1));
        assert_eq!(s.drop_queued(), [b]);
        assert_eq!(s.queued(), 0);
    }
}
