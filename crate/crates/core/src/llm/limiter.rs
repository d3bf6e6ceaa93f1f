//! Concurrency cap and request spacing for provider calls.
//!
//! Browser builds have no threads or monotonic clock through `std`, so the
//! limiter degrades to a no-op there.

#[cfg(not(target_arch = "wasm32"))]
mod imp {
    use std::sync::{Condvar, Mutex};
    use std::time::{Duration, Instant};

    pub struct Limiter {
        capacity: usize,
        in_flight: Mutex<usize>,
        freed: Condvar,
        min_interval: Duration,
        last_start: Mutex<Option<Instant>>,
    }

    pub struct Permit<'a>(&'a Limiter);

    impl Drop for Permit<'_> {
        fn drop(&mut self) {
            let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            *n -= 1;
            self.0.freed.notify_one();
        }
    }

    impl Limiter {
        pub fn new(capacity: usize, min_interval: Duration) -> Self {
            Self {
                capacity: capacity.max(1),
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                min_interval,
                last_start: Mutex::new(None),
            }
        }

        pub fn acquire(&self) -> Permit<'_> {
            let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            while *n >= self.capacity {
                n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
            }
            *n += 1;
            drop(n);
            if !self.min_interval.is_zero() {
                let mut last = self.last_start.lock().unwrap_or_else(|e| e.into_inner());
                if let Some(prev) = *last {
                    let since = prev.elapsed();
                    if since < self.min_interval {
                        std::thread::sleep(self.min_interval - since);
                    }
                }
                *last = Some(Instant::now());
            }
            Permit(self)
        }
    }

    pub fn sleep(d: Duration) {
        if !d.is_zero() {
            std::thread::sleep(d);
        }
    }

    pub fn now() -> Option<Instant> {
        Some(Instant::now())
    }

    pub fn elapsed_ms(start: Option<Instant>) -> u64 {
        start.map_or(0, |s| s.elapsed().as_millis() as u64)
    }
}

#[cfg(target_arch = "wasm32")]
mod imp {
    use std::time::Duration;

    pub struct Limiter;
    pub struct Permit;

    impl Limiter {
        pub fn new(_capacity: usize, _min_interval: Duration) -> Self {
            Limiter
        }

        pub fn acquire(&self) -> Permit {
            Permit
        }
    }

    pub fn sleep(_d: Duration) {}

    pub fn now() -> Option<()> {
        None
    }

    pub fn elapsed_ms(_start: Option<()>) -> u64 {
        0
    }
}

pub use imp::{elapsed_ms, now, sleep, Limiter};
