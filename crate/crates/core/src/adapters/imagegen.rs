use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    builtin_prompts, endpoint_of, join_url, load_prompts, request_rng, sample_prompts, Adapter, AdapterError,
    ExecContext, Marks, RequestRecord, ServerHandle,
};

pub const DEFAULT_STEPS: u32 = 8;
const POLL_EVERY: Duration = Duration::from_millis(50);

/// `n` equal steps covering `total` seconds.
pub fn uniform_steps(total: f64, n: u32) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    vec![total / f64::from(n); n as usize]
}

/// Per-step durations from `(time, completed_steps)` progress observations.
///
/// The first time a step count is seen marks the end of that step; steps that
/// completed between two polls share the elapsed time evenly. Returns `None`
/// when no intermediate step was ever observed (a single-step run needs none).
pub fn steps_from_progress(observations: &[(f64, u32)], t_submit: f64, t_complete: f64, steps: u32) -> Option<Vec<f64>> {
    if steps == 0 {
        return Some(Vec::new());
    }
    let mut known: Vec<(u32, f64)> = vec![(0, t_submit)];
    for &(t, s) in observations {
        let last = known.last().map(|k| k.0).unwrap_or(0);
        if s > last && s < steps && t >= known.last().map(|k| k.1).unwrap_or(t_submit) && t <= t_complete {
            known.push((s, t));
        }
    }
    if known.len() == 1 && steps > 1 {
        return None;
    }
    known.push((steps, t_complete));
    let mut out = Vec::with_capacity(steps as usize);
    for w in known.windows(2) {
        let (k0, t0) = w[0];
        let (k1, t1) = w[1];
        let each = (t1 - t0) / f64::from(k1 - k0);
        out.extend(std::iter::repeat_n(each, (k1 - k0) as usize));
    }
    Some(out)
}

fn completed_steps(progress: &Value) -> Option<u32> {
    progress["state"]["sampling_step"].as_u64().map(|s| s as u32)
}

/// One text-to-image request with per-step timing from the progress endpoint.
pub fn imagegen_execute(handle: &ServerHandle, ctx: &ExecContext, request_id: u32, prompt: &str) -> RequestRecord {
    let clock = ctx.clock;
    let steps = ctx.task.steps.unwrap_or(DEFAULT_STEPS);
    let t_submit = clock.now_secs();
    let mut rec = ctx.record(request_id, t_submit);
    let Some(ep) = handle.endpoint().map(str::to_string).or_else(|| endpoint_of(&ctx.task)) else {
        return rec.failed(t_submit, "no endpoint configured");
    };
    let done = AtomicBool::new(false);
    let observed: Mutex<Vec<(f64, u32)>> = Mutex::new(Vec::new());
    let progress_ok = AtomicBool::new(true);
    let agent = ctx.agent();
    let body = json!({"prompt": prompt, "steps": steps});
    let result = std::thread::scope(|s| {
        s.spawn(|| {
            let poller = super::http_agent(Some(Duration::from_secs(2)));
            let url = join_url(&ep, "/sdapi/v1/progress?skip_current_image=true");
            while !done.load(Ordering::Relaxed) {
                match poller.get(&url).call().and_then(|r| r.into_body().read_to_string()) {
                    Ok(text) => {
                        let t = clock.now_secs();
                        if let Some(step) = serde_json::from_str::<Value>(&text).ok().as_ref().and_then(completed_steps) {
                            observed.lock().unwrap_or_else(|e| e.into_inner()).push((t, step));
                        }
                    }
                    Err(_) => {
                        progress_ok.store(false, Ordering::Relaxed);
                        break;
                    }
                }
                std::thread::sleep(POLL_EVERY);
            }
        });
        let r = agent
            .post(&join_url(&ep, "/sdapi/v1/txt2img"))
            .header("Content-Type", "application/json")
            .send(body.to_string())
            .and_then(|r| r.into_body().read_to_string());
        done.store(true, Ordering::Relaxed);
        r
    });
    let t_complete = clock.now_secs();
    if let Err(e) = result {
        return rec.failed(t_complete, AdapterError::Connection(e.to_string()).to_string());
    }
    rec.t_complete = t_complete;
    let obs = observed.into_inner().unwrap_or_else(|e| e.into_inner());
    let (step_times, fallback) = match steps_from_progress(&obs, t_submit, t_complete, steps) {
        Some(st) => (st, false),
        None => (uniform_steps(t_complete - t_submit, steps), true),
    };
    if fallback {
        let why = if progress_ok.load(Ordering::Relaxed) {
            "no per-step progress observed"
        } else {
            "progress endpoint unavailable"
        };
        rec.detail = Some(format!("{why}; step times split uniformly"));
    }
    rec.t_first_output = step_times.first().map(|d| t_submit + d);
    rec.marks = Marks::Steps { step_times, fallback };
    rec
}

#[derive(Debug, Default)]
pub struct ImageGenAdapter;

impl Adapter for ImageGenAdapter {
    fn execute(&self, handle: &ServerHandle, ctx: &ExecContext) -> Result<Vec<RequestRecord>, AdapterError> {
        let pool = match &ctx.task.dataset {
            Some(p) => load_prompts(p)?,
            None => builtin_prompts(),
        };
        let prompts = sample_prompts(&pool, ctx.task.num_requests as usize, &mut request_rng(ctx.seed, &ctx.node_id));
        let mut out = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            if ctx.cancelled() {
                break;
            }
            out.push(imagegen_execute(handle, ctx, i as u32, p));
        }
        Ok(out)
    }
}
