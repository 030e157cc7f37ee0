use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Capped exponential backoff with multiplicative jitter.
///
/// The n-th consecutive failure waits `min(cap, base·2ⁿ)` scaled by a factor
/// drawn uniformly from `[1 − jitter, 1 + jitter]`.
#[derive(Clone, Debug)]
pub struct Backoff {
    pub base_ms: u64,
    pub cap_ms: u64,
    pub jitter: f64,
    failures: u32,
    rng: ChaCha8Rng,
}

impl Backoff {
    pub const BASE_MS: u64 = 500;
    pub const CAP_MS: u64 = 30_000;
    pub const JITTER: f64 = 0.2;

    pub fn new(seed: u64) -> Self {
        Self::with_params(Self::BASE_MS, Self::CAP_MS, Self::JITTER, seed)
    }

    pub fn with_params(base_ms: u64, cap_ms: u64, jitter: f64, seed: u64) -> Self {
        Self {
            base_ms,
            cap_ms,
            jitter,
            failures: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }

    /// Un-jittered delay for the current failure count.
    pub fn nominal_delay_ms(&self) -> u64 {
        let exp = self.failures.min(32);
        self.base_ms.saturating_mul(1u64 << exp).min(self.cap_ms)
    }

    /// Records a failure and returns how long to wait before the next attempt.
    pub fn next_delay_ms(&mut self) -> u64 {
        let nominal = self.nominal_delay_ms() as f64;
        self.failures = self.failures.saturating_add(1);
        let factor = if self.jitter > 0.0 {
            self.rng.gen_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        (nominal * factor).round() as u64
    }

    pub fn reset(&mut self) {
        self.failures = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_then_caps() {
        let mut b = Backoff::with_params(500, 30_000, 0.0, 1);
        let delays: Vec<u64> = (0..9).map(|_| b.next_delay_ms()).collect();
        assert_eq!(delays, [500, 1000, 2000, 4000, 8000, 16000, 30000, 30000, 30000]);
        b.reset();
        assert_eq!(b.next_delay_ms(), 500);
    }

    #[test]
    fn jitter_stays_within_twenty_percent() {
        let mut b = Backoff::new(42);
        let mut seen_low = false;
        let mut seen_high = false;
        for _ in 0..2000 {
            let nominal = b.nominal_delay_ms() as f64;
            let d = b.next_delay_ms() as f64;
            assert!(d >= (nominal * 0.8).floor() && d <= (nominal * 1.2).ceil(), "{d} vs {nominal}");
            seen_low |= d < nominal * 0.9;
            seen_high |= d > nominal * 1.1;
            if b.failures() > 10 {
                b.reset();
            }
        }
        assert!(seen_low && seen_high);
    }

    #[test]
    fn same_seed_same_delays() {
        let mut a = Backoff::new(3);
        let mut b = Backoff::new(3);
        for _ in 0..20 {
            assert_eq!(a.next_delay_ms(), b.next_delay_ms());
        }
    }
}
