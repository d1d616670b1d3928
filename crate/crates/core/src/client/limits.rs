use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard, PoisonError};
use std::time::{Duration, Instant};

use super::BackendError;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = lock(&self.available);
        while *available == 0 {
            available = self
                .freed
                .wait(available)
                .unwrap_or_else(PoisonError::into_inner);
        }
        *available -= 1;
        Permit { sem: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *lock(&self.sem.available) += 1;
        self.sem.freed.notify_one();
    }
}

/// Sliding-window request cap: at most `cap` acquisitions in any `window`.
#[derive(Debug)]
pub struct RateWindow {
    cap: usize,
    window: Duration,
    stamps: Mutex<VecDeque<Instant>>,
}

impl RateWindow {
    pub fn per_minute(cap: u32) -> Self {
        Self::new(cap as usize, Duration::from_secs(60))
    }

    pub fn new(cap: usize, window: Duration) -> Self {
        assert!(cap > 0, "rate cap must be positive");
        Self {
            cap,
            window,
            stamps: Mutex::new(VecDeque::with_capacity(cap)),
        }
    }

    /// Blocks until a slot is free in the current window, then claims it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut stamps = lock(&self.stamps);
                let now = Instant::now();
                while stamps
                    .front()
                    .is_some_and(|t| now.duration_since(*t) >= self.window)
                {
                    stamps.pop_front();
                }
                if stamps.len() < self.cap {
                    stamps.push_back(now);
                    return;
                }
                (stamps[0] + self.window).saturating_duration_since(now)
            };
            std::thread::sleep(wait.max(Duration::from_millis(1)));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retry_limit: u32,
    pub backoff_base: Duration,
}

impl RetryPolicy {
    /// Delay after the `attempt`-th failure (1-based): base · 2^(attempt−1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.saturating_sub(1).min(20);
        self.backoff_base.saturating_mul(factor)
    }
}

/// Outcome of one attempt.
pub type Attempt<T> = Result<T, BackendError>;

/// Runs `op` until it succeeds, fails with a non-retryable error, or has been
/// tried `retry_limit + 1` times. `op` receives the 1-based attempt number.
/// Returns the value together with the number of attempts used.
pub fn retry_with_backoff<T>(
    policy: RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut op: impl FnMut(u32) -> Attempt<T>,
) -> Result<(T, u32), BackendError> {
    let max_attempts = policy.retry_limit + 1;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op(attempt) {
            Ok(value) => return Ok((value, attempt)),
            Err(err) if !err.is_retryable() => return Err(err),
            Err(err) if attempt >= max_attempts => {
                return Err(BackendError::RetriesExhausted {
                    attempts: attempt,
                    last_status: err.status(),
                    last_error: err.to_string(),
                })
            }
            Err(err) => {
                log::debug!("attempt {attempt} failed ({err}); backing off");
                sleep(policy.backoff(attempt));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn status(s: u16) -> BackendError {
        BackendError::Status {
            status: s,
            body: String::new(),
        }
    }

    #[test]
    fn backoff_is_geometric() {
        let p = RetryPolicy {
            retry_limit: 5,
            backoff_base: Duration::from_millis(100),
        };
        let delays: Vec<_> = (1..=4).map(|a| p.backoff(a).as_millis()).collect();
        assert_eq!(delays, vec![100, 200, 400, 800]);
    }

    #[test]
    fn retries_until_success() {
        let policy = RetryPolicy {
            retry_limit: 3,
            backoff_base: Duration::from_millis(10),
        };
        let mut slept = Vec::new();
        let mut script = vec![Err(status(429)), Err(status(429)), Ok("done")].into_iter();
        let (value, attempts) =
            retry_with_backoff(policy, |d| slept.push(d), |_| script.next().unwrap()).unwrap();
        assert_eq!((value, attempts), ("done", 3));
        assert_eq!(slept, vec![Duration::from_millis(10), Duration::from_millis(20)]);
    }

    #[test]
    fn exhausts_and_reports_last_status() {
        let policy = RetryPolicy {
            retry_limit: 2,
            backoff_base: Duration::ZERO,
        };
        let mut calls = 0;
        let err = retry_with_backoff::<()>(policy, |_| {}, |_| {
            calls += 1;
            Err(status(500))
        })
        .unwrap_err();
        assert_eq!(calls, 3);
        assert!(matches!(
            err,
            BackendError::RetriesExhausted {
                attempts: 3,
                last_status: Some(500),
                ..
            }
        ));
    }

    #[test]
    fn client_errors_fail_fast() {
        let policy = RetryPolicy {
            retry_limit: 5,
            backoff_base: Duration::ZERO,
        };
        let mut calls = 0;
        let err = retry_with_backoff::<()>(policy, |_| {}, |_| {
            calls += 1;
            Err(status(401))
        })
        .unwrap_err();
        assert_eq!(calls, 1);
        assert_eq!(err.status(), Some(401));
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Arc::new(Semaphore::new(3));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..12 {
                let (sem, active, peak) = (sem.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    let _permit = sem.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(15));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert_eq!(peak.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rate_window_delays_excess_requests() {
        let window = RateWindow::new(2, Duration::from_millis(150));
        let start = Instant::now();
        window.acquire();
        window.acquire();
        assert!(start.elapsed() < Duration::from_millis(100));
        window.acquire();
        assert!(start.elapsed() >= Duration::from_millis(150));
    }
}
