//! Probes-per-second pacing: a token bucket with a burst of one, which
//! reduces to "consecutive permits at least 1/pps apart".

use core::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum RateError {
    #[error("rate must be a positive finite number of probes per second, got {0}")]
    InvalidRate(f64),
}

/// Something that hands out send permits.
pub trait Pacer {
    /// Returns the earliest permitted send time at or after `now` and
    /// consumes that permit.
    fn acquire(&mut self, now: Duration) -> Duration;
}

impl<P: Pacer + ?Sized> Pacer for &mut P {
    fn acquire(&mut self, now: Duration) -> Duration {
        (**self).acquire(now)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateLimiter {
    pps: f64,
    interval: Duration,
    next: Option<Duration>,
}

impl RateLimiter {
    pub fn new(pps: f64) -> Result<Self, RateError> {
        if !(pps.is_finite() && pps > 0.0) {
            return Err(RateError::InvalidRate(pps));
        }
        Ok(Self {
            pps,
            interval: interval_for(pps),
            next: None,
        })
    }

    pub fn pps(&self) -> f64 {
        self.pps
    }

    /// Minimum spacing between permits, rounded up to whole nanoseconds.
    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Earliest permit at or after `now`, without consuming it.
    pub fn peek(&self, now: Duration) -> Duration {
        match self.next {
            Some(next) if next > now => next,
            _ => now,
        }
    }
}

impl Pacer for RateLimiter {
    fn acquire(&mut self, now: Duration) -> Duration {
        let at = self.peek(now);
        self.next = Some(at + self.interval);
        at
    }
}

fn interval_for(pps: f64) -> Duration {
    let ns = libm::ceil(1e9 / pps);
    if ns >= u64::MAX as f64 {
        Duration::from_nanos(u64::MAX)
    } else {
        Duration::from_nanos(ns as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_rates() {
        assert!(RateLimiter::new(0.0).is_err());
        assert!(RateLimiter::new(-3.0).is_err());
        assert!(RateLimiter::new(f64::NAN).is_err());
        assert!(RateLimiter::new(f64::INFINITY).is_err());
    }

    #[test]
    fn eleven_permits_at_100pps() {
        let mut lim = RateLimiter::new(100.0).unwrap();
        let last = (0..11).map(|_| lim.acquire(Duration::ZERO)).last().unwrap();
        assert!(last >= Duration::from_millis(100));
        assert_eq!(last, Duration::from_millis(100));
    }

    #[test]
    fn one_pps() {
        let mut lim = RateLimiter::new(1.0).unwrap();
        assert_eq!(lim.acquire(Duration::ZERO), Duration::ZERO);
        assert!(lim.acquire(Duration::ZERO) >= Duration::from_secs(1));
    }

    /// Continuous-refill token bucket, capacity 1, used as an oracle.
    struct Bucket {
        tokens: f64,
        last: f64,
        rate: f64,
    }

    impl Bucket {
        fn try_take(&mut self, t: f64) -> bool {
            self.tokens = (self.tokens + (t - self.last) * self.rate).min(1.0);
            self.last = t;
            if self.tokens >= 1.0 - 1e-12 {
                self.tokens -= 1.0;
                true
            } else {
                false
            }
        }
    }

    #[test]
    fn under_rate_requests_are_immediate() {
        let mut lim = RateLimiter::new(50.0).unwrap();
        let mut bucket = Bucket {
            tokens: 1.0,
            last: 0.0,
            rate: 50.0,
        };
        for i in 0..100u64 {
            let now = Duration::from_millis(40 * i);
            assert!(bucket.try_take(now.as_secs_f64()));
            assert_eq!(lim.acquire(now), now);
        }
    }

    #[test]
    fn fractional_rate_rounds_interval_up() {
        let lim = RateLimiter::new(3.0).unwrap();
        assert_eq!(lim.interval(), Duration::from_nanos(333_333_334));
    }

    proptest! {
        #[test]
        fn permits_spaced_and_never_in_past(
            pps in 0.5f64..5000.0,
            gaps in proptest::collection::vec(0u64..5_000_000, 1..60),
        ) {
            let mut lim = RateLimiter::new(pps).unwrap();
            let mut now = Duration::ZERO;
            let mut prev: Option<Duration> = None;
            for g in gaps {
                now += Duration::from_nanos(g);
                let at = lim.acquire(now);
                prop_assert!(at >= now);
                if let Some(p) = prev {
                    prop_assert!((at - p).as_secs_f64() * pps >= 1.0 - 1e-12);
                }
                prev = Some(at);
                now = at;
            }
        }
    }
}
