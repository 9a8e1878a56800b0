//! Causal scheduling of target speech: derive per-token source requirements
//! from word alignments, insert segment boundaries (`<WAIT>`) so no target
//! unit is spoken before its aligned source word finishes, and project a
//! timetable with a duration model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, SentenceAlignment, SourceTranscript};
use crate::latency::TimedEmission;

/// Literal marker used in serialized causal-target files. Internally
/// boundaries are positions, not tokens.
pub const WAIT_TOKEN: &str = "<WAIT>";

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Alignment(#[from] CorpusError),
    #[error("duration must be > 0 (got {0})")]
    BadDuration(f64),
    #[error("measured durations count {got} does not match unit count {expected}")]
    DurationCountMismatch { got: usize, expected: usize },
    #[error("causal target refers to source index {idx} beyond length {src_len}")]
    SourceIndexOutOfRange { idx: usize, src_len: usize },
}

/// A target token stream annotated with the running source requirement and
/// the segment boundaries implied by it.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalTarget {
    /// (token, required source index after the running-max transform);
    /// 0 means "no source constraint yet".
    pub units: Vec<(String, usize)>,
    /// Positions j (0-based token index) where a boundary precedes token j.
    pub boundaries: Vec<usize>,
}

impl CausalTarget {
    /// Serialize with literal `<WAIT>` markers interleaved, one sentence per
    /// line in the file format.
    pub fn to_marked_line(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        for (j, (tok, _)) in self.units.iter().enumerate() {
            if self.boundaries.contains(&j) {
                parts.push(WAIT_TOKEN);
            }
            parts.push(tok);
        }
        parts.join(" ")
    }

    /// Token runs between boundaries, in order.
    pub fn segments(&self) -> Vec<Vec<(String, usize)>> {
        let mut segs: Vec<Vec<(String, usize)>> = Vec::new();
        for (j, unit) in self.units.iter().enumerate() {
            if j == 0 || self.boundaries.contains(&j) {
                segs.push(Vec::new());
            }
            segs.last_mut().expect("segment opened").push(unit.clone());
        }
        segs
    }
}

/// Stand-in for synthesized speech timing: constant seconds per unit, or
/// externally measured per-unit durations.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationModel {
    pub per_unit_s: f64,
    pub measured_s: Option<Vec<f64>>,
}

impl DurationModel {
    pub const DEFAULT_WORD_S: f64 = 0.30;
    pub const DEFAULT_CHAR_S: f64 = 0.20;

    pub fn constant(per_unit_s: f64) -> Result<Self, ScheduleError> {
        if per_unit_s <= 0.0 || !per_unit_s.is_finite() {
            return Err(ScheduleError::BadDuration(per_unit_s));
        }
        Ok(Self {
            per_unit_s,
            measured_s: None,
        })
    }

    pub fn measured(durations: Vec<f64>) -> Result<Self, ScheduleError> {
        if let Some(&d) = durations.iter().find(|&&d| d <= 0.0 || !d.is_finite()) {
            return Err(ScheduleError::BadDuration(d));
        }
        Ok(Self {
            per_unit_s: Self::DEFAULT_WORD_S,
            measured_s: Some(durations),
        })
    }

    /// Whether timings come from real measurements or the constant-rate model.
    pub fn source_label(&self) -> &'static str {
        if self.measured_s.is_some() {
            "measured"
        } else {
            "model"
        }
    }

    fn duration_of(&self, unit_index: usize) -> f64 {
        match &self.measured_s {
            Some(m) => m[unit_index],
            None => self.per_unit_s,
        }
    }
}

/// A scheduled stretch of continuous target speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<String>,
    pub earliest_start_s: f64,
    pub projected_end_s: f64,
    /// Global index of the first unit in this segment.
    #[serde(skip)]
    pub first_unit: usize,
}

/// Annotate each target token with the source index it must wait for and
/// insert a boundary wherever the running requirement increases.
///
/// A token's own requirement is the largest source index aligned to it (0 if
/// unaligned); the running maximum makes requirements non-decreasing, so
/// unaligned tokens simply follow their clause.
pub fn insert_waits(
    target: &[String],
    align: &SentenceAlignment,
    source: &SourceTranscript,
) -> Result<CausalTarget, ScheduleError> {
    align.validate(source.len(), target.len())?;
    let mut units = Vec::with_capacity(target.len());
    let mut boundaries = Vec::new();
    let mut running = 0usize;
    for (j, tok) in target.iter().enumerate() {
        let own = align.max_source_for_target(j + 1).unwrap_or(0);
        if own > running {
            if j > 0 {
                boundaries.push(j);
            }
            running = own;
        }
        units.push((tok.clone(), running));
    }
    Ok(CausalTarget { units, boundaries })
}

/// Project speech timing for a causal target.
///
/// Each raw segment's constraint time is the end time of the source word its
/// first token requires (0 maps to 0.0). Segment 1 starts at its constraint;
/// a later segment starts at its constraint if that lies beyond the previous
/// segment's projected end, otherwise it is merged into the previous segment
/// as continuous speech.
pub fn build_timetable(
    ct: &CausalTarget,
    source: &SourceTranscript,
    dm: &DurationModel,
) -> Result<Vec<Segment>, ScheduleError> {
    if let Some(&(_, idx)) = ct.units.iter().find(|&&(_, idx)| idx > source.len()) {
        return Err(ScheduleError::SourceIndexOutOfRange {
            idx,
            src_len: source.len(),
        });
    }
    if let Some(m) = &dm.measured_s {
        if m.len() != ct.units.len() {
            return Err(ScheduleError::DurationCountMismatch {
                got: m.len(),
                expected: ct.units.len(),
            });
        }
    }
    let ends = source.end_times();
    let constraint = |req: usize| -> f64 {
        if req == 0 {
            0.0
        } else {
            ends[req - 1]
        }
    };

    let mut out: Vec<Segment> = Vec::new();
    let mut unit_index = 0usize;
    for seg in ct.segments() {
        let c = constraint(seg[0].1);
        let first_unit = unit_index;
        let seg_duration: f64 = (0..seg.len()).map(|i| dm.duration_of(unit_index + i)).sum();
        unit_index += seg.len();
        let tokens: Vec<String> = seg.into_iter().map(|(t, _)| t).collect();
        match out.last_mut() {
            Some(prev) if c <= prev.projected_end_s => {
                // Source word already spoken before the previous target word
                // finished: merge into continuous speech.
                prev.tokens.extend(tokens);
                prev.projected_end_s += seg_duration;
            }
            _ => {
                let start = c.max(0.0);
                out.push(Segment {
                    tokens,
                    earliest_start_s: start,
                    projected_end_s: start + seg_duration,
                    first_unit,
                });
            }
        }
    }
    Ok(out)
}

/// Per-unit onset times: within a segment, unit i starts at
/// `start + sum(durations of earlier units in the segment)`.
pub fn emission_times(timetable: &[Segment], dm: &DurationModel) -> TimedEmission {
    let mut onsets = Vec::new();
    for seg in timetable {
        let mut t = seg.earliest_start_s;
        for i in 0..seg.tokens.len() {
            onsets.push(t);
            t += dm.duration_of(seg.first_unit + i);
        }
    }
    TimedEmission::new(onsets).expect("segment onsets are monotone by construction")
}

/// Serialize a timetable as the line-delimited file format:
/// `{"seg":k,"start":s,"tokens":[...]}` per line.
pub fn timetable_to_lines(timetable: &[Segment]) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        seg: usize,
        start: f64,
        tokens: &'a [String],
    }
    let mut out = String::new();
    for (k, seg) in timetable.iter().enumerate() {
        let line = Line {
            seg: k + 1,
            start: seg.earliest_start_s,
            tokens: &seg.tokens,
        };
        out.push_str(&serde_json::to_string(&line).expect("segment serializes"));
        out.push('\n');
    }
    out
}
