use std::io::{BufRead, BufReader};

use serde_json::{json, Value};

use super::{
    builtin_prompts, endpoint_of, join_url, load_prompts, request_rng, sample_prompts, Adapter, AdapterError,
    ExecContext, Marks, RequestRecord, ServerHandle,
};

const DEFAULT_MAX_TOKENS: u32 = 128;
const RESEARCH_MAX_TOKENS: u32 = 1024;

/// Token arrival times from timestamped server-sent event lines.
///
/// Every `data:` event with non-empty `delta.content` (or `text`) counts as one
/// token. Stops at `data: [DONE]`; an `error` event aborts the stream.
pub fn tokens_from_sse<I>(lines: I) -> Result<Vec<f64>, (Vec<f64>, AdapterError)>
where
    I: IntoIterator<Item = (f64, String)>,
{
    let mut tokens = Vec::new();
    for (t, line) in lines {
        let Some(payload) = line.trim_end().strip_prefix("data:") else {
            continue;
        };
        let payload = payload.trim();
        if payload == "[DONE]" {
            return Ok(tokens);
        }
        let v: Value = match serde_json::from_str(payload) {
            Ok(v) => v,
            Err(e) => return Err((tokens, AdapterError::StreamAborted(format!("bad event: {e}")))),
        };
        if let Some(err) = v.get("error") {
            return Err((tokens, AdapterError::StreamAborted(err.to_string())));
        }
        let choice = &v["choices"][0];
        let text = choice["delta"]["content"].as_str().or_else(|| choice["text"].as_str());
        if text.is_some_and(|s| !s.is_empty()) {
            tokens.push(t);
        }
    }
    Ok(tokens)
}

fn prompts_for(ctx: &ExecContext) -> Result<Vec<String>, AdapterError> {
    let pool = match &ctx.task.dataset {
        Some(p) => load_prompts(p)?,
        None => builtin_prompts(),
    };
    let mut rng = request_rng(ctx.seed, &ctx.node_id);
    Ok(sample_prompts(&pool, ctx.task.num_requests as usize, &mut rng))
}

fn endpoint(handle: &ServerHandle, ctx: &ExecContext) -> Result<String, AdapterError> {
    handle
        .endpoint()
        .map(str::to_string)
        .or_else(|| endpoint_of(&ctx.task))
        .ok_or_else(|| AdapterError::Connection("no endpoint configured".into()))
}

/// One streamed chat completion; token times are taken as events arrive.
pub fn chatbot_execute(handle: &ServerHandle, ctx: &ExecContext, request_id: u32, prompt: &str) -> RequestRecord {
    let clock = ctx.clock;
    let t_submit = clock.now_secs();
    let rec = ctx.record(request_id, t_submit);
    let ep = match endpoint(handle, ctx) {
        Ok(ep) => ep,
        Err(e) => return rec.failed(clock.now_secs(), e.to_string()),
    };
    let body = json!({
        "model": handle.model().or(ctx.task.model.as_deref()).unwrap_or("default"),
        "messages": [{"role": "user", "content": prompt}],
        "stream": true,
        "max_tokens": ctx.task.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS),
    });
    let resp = ctx
        .agent()
        .post(&join_url(&ep, "/v1/chat/completions"))
        .header("Content-Type", "application/json")
        .send(body.to_string());
    let resp = match resp {
        Ok(r) => r,
        Err(e) => return rec.failed(clock.now_secs(), AdapterError::Connection(e.to_string()).to_string()),
    };
    let reader = BufReader::new(resp.into_body().into_reader());
    let lines = reader
        .lines()
        .map_while(Result::ok)
        .map(|l| (clock.now_secs(), l));
    let (tokens, err) = match tokens_from_sse(lines) {
        Ok(t) => (t, None),
        Err((t, e)) => (t, Some(e)),
    };
    let mut rec = rec;
    rec.t_first_output = tokens.first().copied();
    rec.t_complete = tokens.last().copied().unwrap_or_else(|| clock.now_secs());
    rec.marks = Marks::Tokens { token_times: tokens };
    match err {
        Some(e) => {
            let t = rec.t_complete;
            rec.failed(t, e.to_string())
        }
        None if matches!(&rec.marks, Marks::Tokens { token_times } if token_times.is_empty()) => {
            let t = clock.now_secs();
            rec.failed(t, "stream ended without tokens")
        }
        None => rec,
    }
}

#[derive(Debug, Default)]
pub struct ChatbotAdapter;

impl Adapter for ChatbotAdapter {
    fn execute(&self, handle: &ServerHandle, ctx: &ExecContext) -> Result<Vec<RequestRecord>, AdapterError> {
        let mut out = Vec::new();
        for (i, prompt) in prompts_for(ctx)?.iter().enumerate() {
            if ctx.cancelled() {
                break;
            }
            out.push(chatbot_execute(handle, ctx, i as u32, prompt));
        }
        Ok(out)
    }
}

/// One long, unstreamed completion; only submit and completion are recorded.
pub fn deep_research_execute(handle: &ServerHandle, ctx: &ExecContext, request_id: u32, prompt: &str) -> RequestRecord {
    let clock = ctx.clock;
    let rec = ctx.record(request_id, clock.now_secs());
    let ep = match endpoint(handle, ctx) {
        Ok(ep) => ep,
        Err(e) => return rec.failed(clock.now_secs(), e.to_string()),
    };
    let body = json!({
        "model": handle.model().or(ctx.task.model.as_deref()).unwrap_or("default"),
        "messages": [
            {"role": "system", "content": "You are a research agent. Investigate the topic thoroughly and write a report."},
            {"role": "user", "content": prompt},
        ],
        "stream": false,
        "max_tokens": ctx.task.max_tokens.unwrap_or(RESEARCH_MAX_TOKENS),
    });
    let result = ctx
        .agent()
        .post(&join_url(&ep, "/v1/chat/completions"))
        .header("Content-Type", "application/json")
        .send(body.to_string())
        .and_then(|r| r.into_body().read_to_string());
    let mut rec = rec;
    match result {
        Ok(_) => {
            rec.t_complete = clock.now_secs();
            rec
        }
        Err(e) => rec.failed(clock.now_secs(), AdapterError::Connection(e.to_string()).to_string()),
    }
}

#[derive(Debug, Default)]
pub struct DeepResearchAdapter;

impl Adapter for DeepResearchAdapter {
    fn execute(&self, handle: &ServerHandle, ctx: &ExecContext) -> Result<Vec<RequestRecord>, AdapterError> {
        let mut out = Vec::new();
        for (i, prompt) in prompts_for(ctx)?.iter().enumerate() {
            if ctx.cancelled() {
                break;
            }
            out.push(deep_research_execute(handle, ctx, i as u32, prompt));
        }
        Ok(out)
    }
}
