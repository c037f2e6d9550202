//! Token-bucket pacing for backend transfers, used to emulate a slow
//! remote store in-process.

use std::sync::Mutex;
use std::time::{Duration, Instant};

/// A shared token bucket. `acquire(n)` blocks until `n` bytes worth of
/// tokens are available, so sustained throughput converges on `rate`
/// regardless of caller count.
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<BucketState>,
}

struct BucketState {
    tokens: f64,
    last_refill: Instant,
}

impl TokenBucket {
    pub fn new(rate_bytes_per_sec: u64) -> TokenBucket {
        let rate = rate_bytes_per_sec.max(1) as f64;
        // Small burst keeps short transfers cheap without skewing long ones.
        let burst = (rate / 20.0).max(64.0 * 1024.0);
        TokenBucket {
            rate,
            burst,
            state: Mutex::new(BucketState { tokens: burst, last_refill: Instant::now() }),
        }
    }

    pub fn rate(&self) -> u64 {
        self.rate as u64
    }

    /// Consumes `n` tokens, sleeping as needed.
    pub fn acquire(&self, n: u64) {
        let mut need = n as f64;
        while need > 0.0 {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(st.last_refill).as_secs_f64();
                st.tokens = (st.tokens + elapsed * self.rate).min(self.burst);
                st.last_refill = now;
                if st.tokens > 0.0 {
                    let take = st.tokens.min(need);
                    st.tokens -= take;
                    need -= take;
                }
                if need > 0.0 {
                    // Sleep until the remaining need (capped at one burst)
                    // has accumulated.
                    Duration::from_secs_f64(need.min(self.burst) / self.rate)
                } else {
                    Duration::ZERO
                }
            };
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivered_rate_tracks_limit() {
        let rate = 4 * 1024 * 1024;
        let bucket = TokenBucket::new(rate);
        let total: u64 = 2 * 1024 * 1024;
        let start = Instant::now();
        let mut left = total;
        while left > 0 {
            let chunk = left.min(64 * 1024);
            bucket.acquire(chunk);
            left -= chunk;
        }
        let secs = start.elapsed().as_secs_f64();
        // 2 MiB at 4 MiB/s is 0.5 s minus the initial burst allowance.
        let expected = (total as f64 - rate as f64 / 20.0) / rate as f64;
        assert!(secs >= expected * 0.85, "too fast: {secs} vs {expected}");
        assert!(secs <= expected * 1.35 + 0.05, "too slow: {secs} vs {expected}");
    }

    #[test]
    fn shared_bucket_halves_per_caller_rate() {
        use std::sync::Arc;
        let bucket = Arc::new(TokenBucket::new(8 * 1024 * 1024));
        let start = Instant::now();
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let b = bucket.clone();
                std::thread::spawn(move || {
                    let mut left: u64 = 2 * 1024 * 1024;
                    while left > 0 {
                        let chunk = left.min(128 * 1024);
                        b.acquire(chunk);
                        left -= chunk;
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        // 4 MiB total through an 8 MiB/s bucket: roughly half a second.
        let secs = start.elapsed().as_secs_f64();
        assert!(secs >= 0.35, "shared bucket not enforced: {secs}");
    }
}
