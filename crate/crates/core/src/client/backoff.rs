//! Reconnect backoff: exponential with a cap and jitter.
//!
//! The delay after `n` consecutive failures is
//! `min(base * factor^(n-1), cap)`, stretched by a uniform jitter of
//! `±jitter_frac`. The very first attempt (zero failures) is immediate.

use std::time::Duration;

use rand::Rng;

#[derive(Debug, Clone)]
pub struct BackoffConfig {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
    pub jitter_frac: f64,
}

impl Default for BackoffConfig {
    fn default() -> Self {
        BackoffConfig {
            base: Duration::from_millis(100),
            factor: 2.0,
            cap: Duration::from_secs(5),
            jitter_frac: 0.2,
        }
    }
}

impl BackoffConfig {
    /// Nominal (jitter-free) delay after `failures` consecutive failures.
    pub fn nominal(&self, failures: u32) -> Duration {
        if failures == 0 {
            return Duration::ZERO;
        }
        let exp = self.factor.powi(failures.saturating_sub(1) as i32);
        let nanos = self.base.as_nanos() as f64 * exp;
        let capped = nanos.min(self.cap.as_nanos() as f64);
        Duration::from_nanos(capped as u64)
    }

    /// Jittered delay actually waited before the next attempt.
    pub fn delay<R: Rng>(&self, failures: u32, rng: &mut R) -> Duration {
        let nominal = self.nominal(failures);
        if nominal.is_zero() || self.jitter_frac <= 0.0 {
            return nominal;
        }
        let spread = rng.gen_range(-self.jitter_frac..=self.jitter_frac);
        let nanos = nominal.as_nanos() as f64 * (1.0 + spread);
        Duration::from_nanos(nanos.max(0.0) as u64)
    }

    /// Inclusive delay bounds after `failures` failures; the no-flapping
    /// audit checks observed gaps against the lower bound.
    pub fn bounds(&self, failures: u32) -> (Duration, Duration) {
        let nominal = self.nominal(failures);
        let lo = nominal.as_nanos() as f64 * (1.0 - self.jitter_frac);
        let hi = nominal.as_nanos() as f64 * (1.0 + self.jitter_frac);
        (
            Duration::from_nanos(lo.max(0.0) as u64),
            Duration::from_nanos(hi as u64),
        )
    }
}
