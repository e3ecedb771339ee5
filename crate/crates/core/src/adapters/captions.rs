use std::io::Cursor;
use std::path::Path;
use std::time::Duration;

use super::{endpoint_of, join_url, Adapter, AdapterError, ExecContext, Marks, RequestRecord, ServerHandle};

pub const DEFAULT_SEGMENT_SECONDS: f64 = 2.0;

/// Split a 16-bit PCM WAV file into segments of `seconds` each (the last may be shorter).
pub fn segment_wav(path: &Path, seconds: f64) -> Result<(hound::WavSpec, Vec<Vec<i16>>), AdapterError> {
    let bad = |e: hound::Error| AdapterError::Dataset(format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(bad)?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(AdapterError::Dataset(format!("{}: expected 16-bit PCM", path.display())));
    }
    let samples: Vec<i16> = reader.samples::<i16>().collect::<Result<_, _>>().map_err(bad)?;
    let per_segment = ((seconds * f64::from(spec.sample_rate)).round() as usize).max(1) * usize::from(spec.channels);
    Ok((spec, samples.chunks(per_segment).map(<[i16]>::to_vec).collect()))
}

fn encode(spec: hound::WavSpec, samples: &[i16]) -> Result<Vec<u8>, hound::Error> {
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec)?;
        for &s in samples {
            w.write_sample(s)?;
        }
        w.finalize()?;
    }
    Ok(buf.into_inner())
}

/// Send segment `i` at `i · period` after the call starts, each on its own
/// thread so a slow response never delays later submissions.
pub fn livecaptions_execute(
    handle: &ServerHandle,
    ctx: &ExecContext,
    spec: hound::WavSpec,
    segments: &[Vec<i16>],
    first_request_id: u32,
) -> Vec<RequestRecord> {
    let clock = ctx.clock;
    let period = ctx.task.segment_seconds.unwrap_or(DEFAULT_SEGMENT_SECONDS);
    let endpoint = handle.endpoint().map(str::to_string).or_else(|| endpoint_of(&ctx.task));
    let start = clock.now_secs();
    let mut out: Vec<RequestRecord> = std::thread::scope(|s| {
        let mut workers = Vec::new();
        for (i, seg) in segments.iter().enumerate() {
            let target = start + i as f64 * period;
            let wait = target - clock.now_secs();
            if wait > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(wait));
            }
            if ctx.cancelled() {
                break;
            }
            let endpoint = endpoint.clone();
            let agent = ctx.agent();
            workers.push(s.spawn(move || {
                let t_submit = clock.now_secs();
                let mut rec = ctx.record(first_request_id + i as u32, t_submit);
                let Some(ep) = endpoint else {
                    return rec.failed(t_submit, "no endpoint configured");
                };
                let body = match encode(spec, seg) {
                    Ok(b) => b,
                    Err(e) => return rec.failed(clock.now_secs(), format!("segment dropped: {e}")),
                };
                let result = agent
                    .post(&join_url(&ep, "/transcribe"))
                    .header("Content-Type", "audio/wav")
                    .send(&body[..])
                    .and_then(|r| r.into_body().read_to_string());
                let t_done = clock.now_secs();
                rec.marks = Marks::Segment {
                    segment_index: i as u32,
                    segment_latency: t_done - t_submit,
                };
                match result {
                    Ok(_) => {
                        rec.t_first_output = Some(t_done);
                        rec.t_complete = t_done;
                        rec
                    }
                    Err(e) => rec.failed(t_done, format!("segment dropped: {e}")),
                }
            }));
        }
        workers.into_iter().filter_map(|w| w.join().ok()).collect()
    });
    out.sort_by_key(|r| r.request_id);
    out
}

#[derive(Debug, Default)]
pub struct LiveCaptionsAdapter;

impl Adapter for LiveCaptionsAdapter {
    fn execute(&self, handle: &ServerHandle, ctx: &ExecContext) -> Result<Vec<RequestRecord>, AdapterError> {
        let path = ctx
            .task
            .dataset
            .as_ref()
            .ok_or_else(|| AdapterError::Dataset(format!("task `{}` needs a WAV dataset", ctx.task.name)))?;
        let period = ctx.task.segment_seconds.unwrap_or(DEFAULT_SEGMENT_SECONDS);
        let (spec, mut segments) = segment_wav(path, period)?;
        if let Some(limit) = ctx.task.segments {
            segments.truncate(limit as usize);
        }
        let mut out = Vec::new();
        for pass in 0..ctx.task.num_requests {
            if ctx.cancelled() {
                break;
            }
            out.extend(livecaptions_execute(handle, ctx, spec, &segments, pass * segments.len() as u32));
        }
        Ok(out)
    }
}
