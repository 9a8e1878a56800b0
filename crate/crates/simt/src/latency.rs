//! Token-level average lagging (AL / LAAL) and the time-based LAAL that
//! projects the lag onto real seconds via linear interpolation over source
//! word end times.

use thiserror::Error;

use crate::corpus::SourceTranscript;

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("delay sequence must be non-empty")]
    EmptyDelays,
    #[error("delay {delay} at position {index} exceeds source length {src_len}")]
    DelayOutOfRange {
        delay: usize,
        index: usize,
        src_len: usize,
    },
    #[error("delays must be non-decreasing (position {index})")]
    NonMonotonic { index: usize },
    #[error("LAAL requires the reference length")]
    MissingRefLen,
    #[error("emission onsets must be non-decreasing (position {index})")]
    NonMonotonicOnsets { index: usize },
}

/// Per-token delays g(t): source words fully observed when the t-th target
/// unit was emitted. g may be 0 for units emitted before any source end.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySequence {
    pub g: Vec<usize>,
    pub src_len: usize,
    pub ref_len: Option<usize>,
}

impl DelaySequence {
    pub fn new(g: Vec<usize>, src_len: usize, ref_len: Option<usize>) -> Result<Self, LatencyError> {
        if g.is_empty() {
            return Err(LatencyError::EmptyDelays);
        }
        for (i, w) in g.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(LatencyError::NonMonotonic { index: i + 1 });
            }
        }
        if let Some((i, &d)) = g.iter().enumerate().find(|&(_, &d)| d > src_len) {
            return Err(LatencyError::DelayOutOfRange {
                delay: d,
                index: i,
                src_len,
            });
        }
        Ok(Self { g, src_len, ref_len })
    }
}

/// Target unit onset times, one per emitted unit, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedEmission {
    pub onsets: Vec<f64>,
}

impl TimedEmission {
    pub fn new(onsets: Vec<f64>) -> Result<Self, LatencyError> {
        for (i, w) in onsets.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(LatencyError::NonMonotonicOnsets { index: i + 1 });
            }
        }
        Ok(Self { onsets })
    }
}

/// g(t) = number of source words whose end time is <= the t-th onset.
/// Ties count as observed.
pub fn compute_g_from_times(source: &SourceTranscript, emission: &TimedEmission) -> Vec<usize> {
    let ends = source.end_times();
    emission
        .onsets
        .iter()
        .map(|&tau| ends.iter().filter(|&&e| e <= tau).count())
        .collect()
}

/// First step covering the whole source, or |Y| if none does.
fn cutoff(g: &[usize], src_len: usize) -> usize {
    g.iter()
        .position(|&d| d == src_len)
        .map(|p| p + 1)
        .unwrap_or(g.len())
}

/// Token-level average lagging:
/// AL = (1/tau*) * sum_{t<=tau*} [g(t) - (t-1)/gamma], gamma = |Y|/|X|.
pub fn al_token(d: &DelaySequence) -> f64 {
    let gamma = d.g.len() as f64 / d.src_len as f64;
    lag_mean(&d.g, d.src_len, gamma)
}

/// Length-adaptive AL: the length ratio uses the longer of hypothesis and
/// reference, so over-generation is not rewarded.
pub fn laal_token(d: &DelaySequence) -> Result<f64, LatencyError> {
    let ref_len = d.ref_len.ok_or(LatencyError::MissingRefLen)?;
    let gamma = d.g.len().max(ref_len) as f64 / d.src_len as f64;
    Ok(lag_mean(&d.g, d.src_len, gamma))
}

fn lag_mean(g: &[usize], src_len: usize, gamma: f64) -> f64 {
    let tau = cutoff(g, src_len);
    let sum: f64 = g[..tau]
        .iter()
        .enumerate()
        .map(|(i, &d)| d as f64 - i as f64 / gamma)
        .sum();
    sum / tau as f64
}

/// Map a (possibly fractional) source index onto the time axis by linear
/// interpolation over the word end times; clamps outside [1, |X|].
pub fn time_at_index(x: f64, ends: &[f64]) -> f64 {
    let n = ends.len();
    if x <= 1.0 {
        return ends[0];
    }
    if x >= n as f64 {
        return ends[n - 1];
    }
    let i = x.floor() as usize; // 1-based
    let w = x - i as f64;
    (1.0 - w) * ends[i - 1] + w * ends[i]
}

/// Time-based LAAL in seconds: the mean gap between the policy's emission
/// position and the length-adaptive diagonal, both projected onto the source
/// time axis.
pub fn laal_sec(source: &SourceTranscript, emission: &TimedEmission) -> f64 {
    let ends = source.end_times();
    let src_len = source.len();
    let g = compute_g_from_times(source, emission);
    if g.is_empty() {
        return 0.0;
    }
    let tau = cutoff(&g, src_len);
    let mut sum = 0.0;
    for t in 1..=tau {
        let gt = g[t - 1] as f64;
        let x_pol = gt.min(src_len as f64).max(1.0);
        let x_diag = (gt / t as f64 * (t as f64 - 1.0))
            .min(src_len as f64)
            .max(1.0);
        sum += time_at_index(x_pol, &ends) - time_at_index(x_diag, &ends);
    }
    sum / tau as f64
}
