use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AdapterError;

/// Prompts from a text file (one per line) or JSON lines (`prompt`, `text`
/// or the first string field of each object).
pub fn load_prompts(path: &Path) -> Result<Vec<String>, AdapterError> {
    let text = std::fs::read_to_string(path).map_err(|e| AdapterError::Dataset(format!("{}: {e}", path.display())))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl" || e == "json");
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !jsonl {
            out.push(line.to_string());
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| AdapterError::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let prompt = match &v {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Object(m) => m
                .get("prompt")
                .or_else(|| m.get("text"))
                .and_then(|p| p.as_str())
                .or_else(|| m.values().find_map(|p| p.as_str()))
                .map(str::to_string),
            _ => None,
        };
        out.push(prompt.ok_or_else(|| AdapterError::Dataset(format!("{}:{}: no prompt field", path.display(), i + 1)))?);
    }
    if out.is_empty() {
        return Err(AdapterError::Dataset(format!("{} has no prompts", path.display())));
    }
    Ok(out)
}

pub fn builtin_prompts() -> Vec<String> {
    [
        "Suggest five titles for a video about home composting.",
        "Summarize the trade-offs between solar and wind power in three sentences.",
        "Write a short outline for a tutorial on sourdough bread.",
        "List ideas for a thumbnail showing a mountain bike trail.",
        "Explain how a heat pump works to a ten-year-old.",
        "Draft an introduction for a podcast episode on city gardening.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Deterministic per-node generator derived from the run seed.
pub fn request_rng(seed: u64, node_id: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in node_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// `n` prompts drawn uniformly with replacement.
pub fn sample_prompts(prompts: &[String], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    if prompts.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| prompts[rng.random_range(0..prompts.len())].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_seeded() {
        let p = builtin_prompts();
        let a = sample_prompts(&p, 10, &mut request_rng(7, "n"));
        let b = sample_prompts(&p, 10, &mut request_rng(7, "n"));
        assert_eq!(a, b);
        assert_ne!(a, sample_prompts(&p, 10, &mut request_rng(8, "n")));
    }

    #[test]
    fn jsonl_prompt_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, "{\"prompt\":\"a\"}\n{\"text\":\"b\"}\n\"c\"\n").unwrap();
        assert_eq!(load_prompts(&path).unwrap(), ["a", "b", "c"]);
    }
}
