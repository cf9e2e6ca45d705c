//! Wall-clock time and a limiter that several threads can draw from.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use probekit_core::rate::{Pacer, RateError, RateLimiter};
use probekit_core::time::Clock;

/// Real time since the clock was created.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep_until(&mut self, t: Duration) {
        let now = self.now();
        if t > now {
            std::thread::sleep(t - now);
        }
    }
}

/// A [`RateLimiter`] behind a mutex. Clones share one budget, so traces on
/// different threads are jointly capped at its rate.
#[derive(Debug, Clone)]
pub struct SharedLimiter(Arc<Mutex<RateLimiter>>);

impl SharedLimiter {
    pub fn new(pps: f64) -> Result<Self, RateError> {
        Ok(Self(Arc::new(Mutex::new(RateLimiter::new(pps)?))))
    }
}

impl Pacer for SharedLimiter {
    fn acquire(&mut self, now: Duration) -> Duration {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).acquire(now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic_sleep() {
        let mut c = MonotonicClock::new();
        let t = c.now() + Duration::from_millis(5);
        c.sleep_until(t);
        assert!(c.now() >= t);
    }

    #[test]
    fn threads_share_one_budget() {
        let limiter = SharedLimiter::new(1000.0).unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let mut l = limiter.clone();
                std::thread::spawn(move || (0..25).map(|_| l.acquire(Duration::ZERO)).collect::<Vec<_>>())
            })
            .collect();
        let mut permits: Vec<Duration> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        permits.sort();
        assert_eq!(permits.len(), 100);
        for w in permits.windows(2) {
            assert_eq!(w[1] - w[0], Duration::from_millis(1));
        }
    }
}
