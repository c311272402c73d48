use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Time since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock that only moves when slept on or advanced. Records every sleep.
#[derive(Default)]
pub struct VirtualClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.state.lock().unwrap().0 += d;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }

    fn sleep(&self, d: Duration) {
        let mut s = self.state.lock().unwrap();
        s.0 += d;
        s.1.push(d);
    }
}

/// Sliding-window limiter: at most `capacity` dispatches in any window of
/// length `window`. A rate below 1/s becomes one dispatch per `1/rate` s.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    recent: VecDeque<Duration>,
}

impl RateLimiter {
    pub fn per_second(rate: f64) -> Option<RateLimiter> {
        if !(rate.is_finite() && rate > 0.0) {
            return None;
        }
        let (capacity, window) = if rate >= 1.0 {
            (rate.floor() as usize, Duration::from_secs(1))
        } else {
            (1, Duration::from_secs_f64(1.0 / rate))
        };
        Some(RateLimiter {
            capacity,
            window,
            recent: VecDeque::new(),
        })
    }

    /// Blocks on `clock` until a dispatch is allowed, then records it.
    pub fn acquire(&mut self, clock: &dyn Clock) -> Duration {
        loop {
            let now = clock.now();
            while let Some(&t) = self.recent.front() {
                if now >= t + self.window {
                    self.recent.pop_front();
                } else {
                    break;
                }
            }
            if self.recent.len() < self.capacity {
                self.recent.push_back(now);
                return now;
            }
            let wait = self.recent[0] + self.window - now;
            clock.sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_window_exceeds_capacity() {
        for rate in [1.0, 2.0, 3.5, 10.0, 0.5] {
            let clock = VirtualClock::new();
            let mut lim = RateLimiter::per_second(rate).unwrap();
            let mut stamps = Vec::new();
            for i in 0..60 {
                if i % 7 == 3 {
                    clock.advance(Duration::from_millis(130));
                }
                stamps.push(lim.acquire(&clock));
            }
            let cap = rate.floor().max(1.0) as usize;
            let window = if rate >= 1.0 { 1.0 } else { 1.0 / rate };
            for (i, &t) in stamps.iter().enumerate() {
                let inside = stamps[i..]
                    .iter()
                    .filter(|&&s| s < t + Duration::from_secs_f64(window))
                    .count();
                assert!(inside <= cap, "rate {rate}: {inside} dispatches in window at {t:?}");
            }
        }
    }

    #[test]
    fn zero_rate_means_unlimited() {
        assert!(RateLimiter::per_second(0.0).is_none());
    }
}
