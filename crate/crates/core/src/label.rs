//! Ground-truth labeling: convert the portal event timeline into stable,
//! guard-trimmed segments.
//!
//! A stable segment is a maximal interval of constant portal state. A
//! guard interval of `guard_s` seconds is discarded on each side of every
//! state change so transition transients never contaminate labeled data;
//! trace endpoints are not state changes and are not trimmed. Segments
//! shorter than `t_min_s` after trimming are dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{PolicyState, PortalEvent};
use crate::stats::Timestamp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("ambiguous portal state: conflicting events at ts={0}")]
    AmbiguousPortalState(f64),
    #[error("invalid label config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Seconds discarded on each side of a portal state change.
    pub guard_s: f64,
    /// Minimum trimmed segment length kept, seconds.
    pub t_min_s: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            guard_s: 120.0,
            t_min_s: 600.0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !self.guard_s.is_finite() || self.guard_s < 0.0 {
            return Err(LabelError::Config(format!(
                "guard_s must be finite and >= 0, got {}",
                self.guard_s
            )));
        }
        if !self.t_min_s.is_finite() || self.t_min_s <= 0.0 {
            return Err(LabelError::Config(format!(
                "t_min_s must be finite and > 0, got {}",
                self.t_min_s
            )));
        }
        Ok(())
    }
}

/// A guard-trimmed constant-state interval `[start, end]`. Segments from
/// one timeline never overlap with positive length; a sample landing on a
/// shared boundary point belongs to the earlier segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub start: Timestamp,
    pub end: Timestamp,
    pub state: PolicyState,
}

impl LabeledSegment {
    pub fn duration_s(&self) -> f64 {
        self.end.seconds_since(self.start)
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts <= self.end
    }
}

/// Find the segment containing `ts` in a sorted, disjoint segment list.
/// Earlier segment wins if `ts` sits exactly on two touching boundaries.
pub fn segment_at(segments: &[LabeledSegment], ts: Timestamp) -> Option<&LabeledSegment> {
    let idx = segments.partition_point(|s| s.end < ts);
    segments.get(idx).filter(|s| s.contains(ts))
}

/// Extract guard-trimmed stable segments from a sorted portal event
/// timeline over `[trace_start, trace_end]`.
///
/// The last event at or before `trace_start` defines the initial state; if
/// no such event exists the prefix up to the first event stays unlabeled
/// and that first event is treated as a state change (guarded), since the
/// prior state is unknown. Events that merely repeat the current state
/// (quota updates) are not state changes. Conflicting events at the same
/// timestamp are an error: ground truth is never tie-broken.
pub fn extract_segments(
    events: &[PortalEvent],
    trace_start: Timestamp,
    trace_end: Timestamp,
    cfg: &LabelConfig,
) -> Result<Vec<LabeledSegment>, LabelError> {
    cfg.validate()?;
    if trace_start > trace_end {
        return Err(LabelError::Precondition(format!(
            "trace_start {} after trace_end {}",
            trace_start, trace_end
        )));
    }
    for pair in events.windows(2) {
        if pair[1].ts < pair[0].ts {
            return Err(LabelError::Precondition(
                "portal events must be sorted by ts".into(),
            ));
        }
        if pair[1].ts == pair[0].ts && pair[1].state != pair[0].state {
            return Err(LabelError::AmbiguousPortalState(pair[0].ts.as_secs()));
        }
    }

    // Initial state from the last event at or before trace_start.
    let initial: Option<PolicyState> = events
        .iter()
        .take_while(|e| e.ts <= trace_start)
        .last()
        .map(|e| e.state);

    // (change_ts, new_state) for genuine state changes inside the trace,
    // plus the first-observation boundary when the prefix is unlabeled.
    let mut running = initial;
    let mut changes: Vec<(Timestamp, Option<PolicyState>)> = Vec::new();
    for event in events {
        if event.ts <= trace_start || event.ts > trace_end {
            continue;
        }
        if running != Some(event.state) {
            changes.push((event.ts, Some(event.state)));
            running = Some(event.state);
        }
    }

    // Assemble intervals between change points, trimming guarded ends.
    let mut segments = Vec::new();
    let mut cursor = trace_start;
    let mut cursor_guarded = false;
    let mut state = initial;
    for (change_ts, new_state) in changes.iter().chain(std::iter::once(&(trace_end, None))) {
        let end_guarded = new_state.is_some();
        if let Some(s) = state {
            let lo = if cursor_guarded {
                cursor.offset(cfg.guard_s)
            } else {
                cursor
            };
            let hi_secs = change_ts.as_secs() - if end_guarded { cfg.guard_s } else { 0.0 };
            if hi_secs - lo.as_secs() >= cfg.t_min_s {
                segments.push(LabeledSegment {
                    start: lo,
                    end: Timestamp::new(hi_secs).map_err(|e| {
                        LabelError::Precondition(format!("trimmed segment end invalid: {e}"))
                    })?,
                    state: s,
                });
            }
        }
        cursor = *change_ts;
        cursor_guarded = end_guarded;
        state = *new_state;
    }

    Ok(segments)
}
