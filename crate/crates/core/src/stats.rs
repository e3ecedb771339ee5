use serde::{Deserialize, Serialize};

/// Nearest-rank percentile of an ascending slice: the value at rank `⌈p/100 · n⌉`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Summary statistics; an empty input is an explicit variant rather than NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Summary {
    Empty,
    Stats {
        count: usize,
        mean: f64,
        p50: f64,
        p95: f64,
        max: f64,
    },
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Summary::Empty;
        }
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Summary::Stats {
            count: v.len(),
            mean,
            p50: nearest_rank(&v, 50.0).unwrap_or(0.0),
            p95: nearest_rank(&v, 95.0).unwrap_or(0.0),
            max: v[v.len() - 1],
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match self {
            Summary::Stats { mean, .. } => Some(*mean),
            Summary::Empty => None,
        }
    }

    pub fn max(&self) -> Option<f64> {
        match self {
            Summary::Stats { max, .. } => Some(*max),
            Summary::Empty => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Summary::Empty)
    }
}
