use std::time::{Duration, Instant};

use super::{Adapter, AdapterError, ExecContext, RequestRecord, ServerHandle};
use crate::config::WorkloadProfile;

/// Seconds one request of `profile` occupies on an idle device.
pub fn profile_seconds(profile: &WorkloadProfile) -> f64 {
    let kernels: f64 = profile
        .kernels
        .iter()
        .flatten()
        .map(|k| k.duration.get())
        .sum();
    profile.sleep.map(|s| s.get()).unwrap_or(0.0) + kernels
}

/// Hold the thread for the profile's duration; the final stretch spins for precision.
pub fn synthetic_execute(ctx: &ExecContext, request_id: u32, profile: &WorkloadProfile) -> RequestRecord {
    let clock = ctx.clock;
    let t_submit = clock.now_secs();
    let mut rec = ctx.record(request_id, t_submit);
    let until = Instant::now() + Duration::from_secs_f64(profile_seconds(profile));
    let spin = Duration::from_millis(2);
    loop {
        let now = Instant::now();
        if now >= until {
            break;
        }
        let left = until - now;
        if left > spin {
            std::thread::sleep(left - spin);
        } else {
            std::hint::spin_loop();
        }
    }
    rec.t_complete = clock.now_secs();
    rec.t_first_output = Some(rec.t_complete);
    rec
}

#[derive(Debug, Default)]
pub struct SyntheticAdapter;

impl Adapter for SyntheticAdapter {
    fn execute(&self, _handle: &ServerHandle, ctx: &ExecContext) -> Result<Vec<RequestRecord>, AdapterError> {
        let profile = ctx.task.profile.clone().unwrap_or_default();
        let mut out = Vec::new();
        for i in 0..ctx.task.num_requests {
            if ctx.cancelled() {
                break;
            }
            out.push(synthetic_execute(ctx, i, &profile));
        }
        Ok(out)
    }
}
