use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Blocking token bucket shared by all workers.
pub struct TokenBucket {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: f64, refill_per_sec: f64) -> Self {
        TokenBucket {
            capacity,
            refill_per_sec,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Takes a token if one is available right now.
    pub fn try_acquire(&self) -> bool {
        self.try_acquire_at(Instant::now()).is_none()
    }

    fn try_acquire_at(&self, now: Instant) -> Option<Duration> {
        let mut state = self.state.lock().unwrap();
        let (tokens, last) = *state;
        let elapsed = now.saturating_duration_since(last).as_secs_f64();
        let tokens = (tokens + elapsed * self.refill_per_sec).min(self.capacity);
        if tokens >= 1.0 {
            *state = (tokens - 1.0, now);
            None
        } else {
            *state = (tokens, now);
            Some(Duration::from_secs_f64((1.0 - tokens) / self.refill_per_sec))
        }
    }

    /// Waits until a token is available and takes it.
    pub fn acquire(&self) {
        while let Some(wait) = self.try_acquire_at(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burst_then_refill() {
        let b = TokenBucket::new(2.0, 1000.0);
        let t0 = Instant::now();
        assert!(b.try_acquire_at(t0).is_none());
        assert!(b.try_acquire_at(t0).is_none());
        assert!(b.try_acquire_at(t0).is_some());
        assert!(b.try_acquire_at(t0 + Duration::from_millis(2)).is_none());
    }

    #[test]
    fn acquire_paces_requests() {
        let b = TokenBucket::new(1.0, 100.0);
        let start = Instant::now();
        for _ in 0..4 {
            b.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(25));
    }
}
