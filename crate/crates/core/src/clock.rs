//! Time helpers shared by the live and simulated paths.
//!
//! Node events carry integer nanoseconds since run start; request records and
//! metric samples carry `f64` seconds on the same axis.

use std::time::{Duration, Instant};

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

pub fn secs_to_nanos(secs: f64) -> u64 {
    if secs <= 0.0 {
        return 0;
    }
    (secs * NANOS_PER_SEC as f64).round() as u64
}

pub fn nanos_to_secs(nanos: u64) -> f64 {
    nanos as f64 / NANOS_PER_SEC as f64
}

/// Monotonic clock anchored at run start.
#[derive(Debug, Clone, Copy)]
pub struct RunClock {
    anchor: Instant,
}

impl RunClock {
    pub fn start() -> Self {
        Self {
            anchor: Instant::now(),
        }
    }

    pub fn anchored_at(anchor: Instant) -> Self {
        Self { anchor }
    }

    pub fn anchor(&self) -> Instant {
        self.anchor
    }

    pub fn now_nanos(&self) -> u64 {
        self.anchor.elapsed().as_nanos() as u64
    }

    pub fn now_secs(&self) -> f64 {
        self.anchor.elapsed().as_secs_f64()
    }

    /// Instant corresponding to `secs` on the run axis.
    pub fn instant_at(&self, secs: f64) -> Instant {
        self.anchor + Duration::from_secs_f64(secs.max(0.0))
    }
}

impl Default for RunClock {
    fn default() -> Self {
        Self::start()
    }
}
