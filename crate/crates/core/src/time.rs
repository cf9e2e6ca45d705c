//! Clocks. Timestamps are `Duration`s since the clock's own epoch.

use core::time::Duration;

/// A monotonic time source that the engine can also wait on.
pub trait Clock {
    fn now(&self) -> Duration;

    /// Blocks (or advances virtual time) until `t`. A `t` in the past is a no-op.
    fn sleep_until(&mut self, t: Duration);
}

impl<C: Clock + ?Sized> Clock for &mut C {
    fn now(&self) -> Duration {
        (**self).now()
    }

    fn sleep_until(&mut self, t: Duration) {
        (**self).sleep_until(t)
    }
}

/// Virtual clock: time only moves when someone sleeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now: Duration,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(now: Duration) -> Self {
        Self { now }
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        self.now
    }

    fn sleep_until(&mut self, t: Duration) {
        if t > self.now {
            self.now = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_never_goes_backwards() {
        let mut clock = VirtualClock::new();
        clock.sleep_until(Duration::from_millis(5));
        clock.sleep_until(Duration::from_millis(2));
        assert_eq!(clock.now(), Duration::from_millis(5));
    }
}
