//! The policy-state detector and the quota enforcement-delay measurement.
//!
//! A window is high-speed only if its median download strictly exceeds
//! `t_d_mbps` AND its median ratio is strictly below `t_r`; boundary
//! values classify low-rate. Low-rate windows are sub-classified to the
//! nearer of two configurable plateau centers (the stay-active and
//! post-quota caps observed on the deployment). Thresholds are
//! deployment-specific: `calibrate_thresholds` re-derives them from any
//! labeled trace and refuses when the clusters overlap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::WindowFeature;
use crate::ingest::{PolicyState, PortalEvent, ThroughputTest};
use crate::stats::{percentile, Timestamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("insufficient data for calibration: {0}")]
    InsufficientData(String),
    #[error("no separation between classes: {0}")]
    NoSeparation(OverlapReport),
}

/// Why calibration refused: the observed clusters overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// (low-rate p90, high-speed p10) of window median download, Mbps.
    pub down_bounds: (f64, f64),
    /// (high-speed p90, low-rate p10) of window median ratio.
    pub r_bounds: (f64, f64),
    /// Windows the proposed thresholds would misclassify, if bounds alone
    /// looked fine.
    pub misclassified: usize,
}

impl std::fmt::Display for OverlapReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "download gap ({:.4}, {:.4}), ratio gap ({:.4}, {:.4}), {} window(s) misclassified",
            self.down_bounds.0,
            self.down_bounds.1,
            self.r_bounds.0,
            self.r_bounds.1,
            self.misclassified
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Download threshold T_d, Mbps.
    pub t_d_mbps: f64,
    /// Ratio threshold T_r, dimensionless.
    pub t_r: f64,
    /// Stay-active plateau center, Mbps.
    pub plateau_s1_mbps: f64,
    /// Post-quota plateau center, Mbps.
    pub plateau_s3_mbps: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            t_d_mbps: 50.0,
            t_r: 14.5,
            plateau_s1_mbps: 0.4737,
            plateau_s3_mbps: 0.9153,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), AuditError> {
        for (name, v) in [
            ("t_d_mbps", self.t_d_mbps),
            ("t_r", self.t_r),
            ("plateau_s1_mbps", self.plateau_s1_mbps),
            ("plateau_s3_mbps", self.plateau_s3_mbps),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(AuditError::Config(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        if !(self.plateau_s1_mbps < self.plateau_s3_mbps && self.plateau_s3_mbps < self.t_d_mbps) {
            return Err(AuditError::Config(format!(
                "plateaus must satisfy s1 < s3 < t_d, got {} / {} / {}",
                self.plateau_s1_mbps, self.plateau_s3_mbps, self.t_d_mbps
            )));
        }
        Ok(())
    }
}

/// Detector output class. HighSpeed covers S2, S4, and the enforcement
/// delay after quota depletion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyClass {
    HighSpeed,
    LowRateS1,
    LowRateS3,
    Unknown,
}

impl PolicyClass {
    /// The class a portal-labeled state should map to.
    pub fn from_state(state: PolicyState) -> PolicyClass {
        match state {
            PolicyState::S1 => PolicyClass::LowRateS1,
            PolicyState::S3 => PolicyClass::LowRateS3,
            PolicyState::S2 | PolicyState::S4 => PolicyClass::HighSpeed,
        }
    }
}

impl std::fmt::Display for PolicyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PolicyClass::HighSpeed => "HighSpeed",
            PolicyClass::LowRateS1 => "LowRateS1",
            PolicyClass::LowRateS3 => "LowRateS3",
            PolicyClass::Unknown => "Unknown",
        };
        f.write_str(s)
    }
}

/// Classify one window fingerprint. Windows missing either median are
/// Unknown and excluded from accuracy accounting downstream.
pub fn classify_window(wf: &WindowFeature, cfg: &DetectorConfig) -> PolicyClass {
    let (down, r) = match (wf.median_down_mbps, wf.median_r) {
        (Some(down), Some(r)) => (down, r),
        _ => return PolicyClass::Unknown,
    };
    if down > cfg.t_d_mbps && r < cfg.t_r {
        return PolicyClass::HighSpeed;
    }
    let d1 = (down - cfg.plateau_s1_mbps).abs();
    let d3 = (down - cfg.plateau_s3_mbps).abs();
    if d1 < d3 {
        PolicyClass::LowRateS1
    } else {
        PolicyClass::LowRateS3
    }
}

/// Element-wise classification of a window sequence, order preserved.
pub fn classify_trace(
    windows: &[WindowFeature],
    cfg: &DetectorConfig,
) -> Vec<(Timestamp, PolicyClass)> {
    windows
        .iter()
        .map(|wf| (wf.window_start, classify_window(wf, cfg)))
        .collect()
}

/// Calibration result: proposed thresholds and the gaps they sit in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub t_d_mbps: f64,
    pub t_r: f64,
    /// (low-rate p90, high-speed p10) of window median download.
    pub down_gap: (f64, f64),
    /// (high-speed p90, low-rate p10) of window median ratio.
    pub r_gap: (f64, f64),
    pub n_high_speed_windows: usize,
    pub n_low_rate_windows: usize,
}

/// Derive deployment-specific thresholds from portal-labeled windows.
///
/// Gap bounds come from per-class percentiles of the window medians; the
/// proposed thresholds are the geometric midpoints of the gaps (throughput
/// clusters span orders of magnitude, so the geometric mean is the natural
/// center). Calibration refuses with [`AuditError::NoSeparation`] rather
/// than returning thresholds that misclassify any calibration window.
pub fn calibrate_thresholds(
    labeled_windows: &[(WindowFeature, PolicyState)],
) -> Result<Calibration, AuditError> {
    let mut hs_down = Vec::new();
    let mut hs_r = Vec::new();
    // Low-rate medians grouped per state: S1 and S3 plateaus sit at
    // different levels, so per-state percentiles bound the gap tighter
    // than pooling would.
    let mut lr_down: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut lr_r: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (wf, state) in labeled_windows {
        let (down, r) = match (wf.median_down_mbps, wf.median_r) {
            (Some(down), Some(r)) => (down, r),
            _ => continue,
        };
        match state {
            PolicyState::S2 | PolicyState::S4 => {
                hs_down.push(down);
                hs_r.push(r);
            }
            PolicyState::S1 => {
                lr_down[0].push(down);
                lr_r[0].push(r);
            }
            PolicyState::S3 => {
                lr_down[1].push(down);
                lr_r[1].push(r);
            }
        }
    }

    if hs_down.is_empty() {
        return Err(AuditError::InsufficientData(
            "no high-speed-labeled window with both medians".into(),
        ));
    }
    if lr_down.iter().all(|v| v.is_empty()) {
        return Err(AuditError::InsufficientData(
            "no low-rate-labeled window with both medians".into(),
        ));
    }

    let down_lo = lr_down
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| percentile(v, 90.0).expect("nonempty"))
        .fold(f64::NEG_INFINITY, f64::max);
    let down_hi = percentile(&hs_down, 10.0).expect("nonempty");
    let r_lo = percentile(&hs_r, 90.0).expect("nonempty");
    let r_hi = lr_r
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| percentile(v, 10.0).expect("nonempty"))
        .fold(f64::INFINITY, f64::min);

    let overlap = |misclassified: usize| {
        AuditError::NoSeparation(OverlapReport {
            down_bounds: (down_lo, down_hi),
            r_bounds: (r_lo, r_hi),
            misclassified,
        })
    };

    if down_lo >= down_hi || r_lo >= r_hi {
        return Err(overlap(0));
    }

    let t_d = (down_lo * down_hi).sqrt();
    let t_r = (r_lo * r_hi).sqrt();

    // Percentile bounds leave the distribution tails outside the gap;
    // verify the proposal separates the calibration set exactly.
    let mut misclassified = 0usize;
    for (wf, state) in labeled_windows {
        let (down, r) = match (wf.median_down_mbps, wf.median_r) {
            (Some(down), Some(r)) => (down, r),
            _ => continue,
        };
        let rule_high = down > t_d && r < t_r;
        if rule_high != state.is_high_speed() {
            misclassified += 1;
        }
    }
    if misclassified > 0 {
        return Err(overlap(misclassified));
    }

    Ok(Calibration {
        t_d_mbps: t_d,
        t_r,
        down_gap: (down_lo, down_hi),
        r_gap: (r_lo, r_hi),
        n_high_speed_windows: hs_down.len(),
        n_low_rate_windows: lr_down.iter().map(Vec::len).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraceConfig {
    /// Post-quota hard cap, Mbps.
    pub cap_mbps: f64,
    /// A test counts as throttled when down <= cap_mbps * onset_factor.
    pub onset_factor: f64,
    /// Consecutive sub-cap tests required to call the onset; rejects
    /// single-test outliers at the cost of one extra test interval.
    pub persistence_tests: usize,
}

impl Default for GraceConfig {
    fn default() -> Self {
        GraceConfig {
            cap_mbps: 1.0,
            onset_factor: 1.5,
            persistence_tests: 2,
        }
    }
}

impl GraceConfig {
    pub fn validate(&self) -> Result<(), AuditError> {
        if !self.cap_mbps.is_finite() || self.cap_mbps <= 0.0 {
            return Err(AuditError::Config(format!(
                "cap_mbps must be finite and > 0, got {}",
                self.cap_mbps
            )));
        }
        if !self.onset_factor.is_finite() || self.onset_factor <= 1.0 {
            return Err(AuditError::Config(format!(
                "onset_factor must be > 1, got {}",
                self.onset_factor
            )));
        }
        if self.persistence_tests == 0 {
            return Err(AuditError::Config(
                "persistence_tests must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The measured enforcement-delay window between the portal reporting
/// zero quota and the throttle actually engaging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraceReport {
    pub t_quota_zero: Timestamp,
    pub t_throttle_onset: Timestamp,
    pub g_duration_s: f64,
}

/// When the portal first reported zero remaining quota: the first event
/// with `quota_remaining_gb == 0`, falling back to the first observed
/// transition into S3 when no zero-quota event exists.
pub fn detect_quota_zero(events: &[PortalEvent]) -> Option<Timestamp> {
    if let Some(event) = events
        .iter()
        .find(|e| matches!(e.quota_remaining_gb, Some(q) if q <= 0.0))
    {
        return Some(event.ts);
    }
    events
        .windows(2)
        .find(|w| w[0].state != PolicyState::S3 && w[1].state == PolicyState::S3)
        .map(|w| w[1].ts)
}

/// First test at or after `after` that starts a run of
/// `persistence_tests` consecutive tests at or below the throttled bound.
/// Tests strictly before `after` never influence the result.
pub fn detect_throttle_onset(
    tests: &[ThroughputTest],
    after: Timestamp,
    cfg: &GraceConfig,
) -> Option<Timestamp> {
    cfg.validate().ok()?;
    let bound = cfg.cap_mbps * cfg.onset_factor;
    let start = tests.partition_point(|t| t.ts < after);
    let candidates = &tests[start..];
    candidates
        .windows(cfg.persistence_tests)
        .find(|run| run.iter().all(|t| t.down_mbps <= bound))
        .map(|run| run[0].ts)
}

/// Compose quota-zero and throttle-onset detection into the grace window
/// G. `None` if either timestamp is missing.
pub fn grace_window(
    events: &[PortalEvent],
    tests: &[ThroughputTest],
    cfg: &GraceConfig,
) -> Option<GraceReport> {
    let t_quota_zero = detect_quota_zero(events)?;
    let t_throttle_onset = detect_throttle_onset(tests, t_quota_zero, cfg)?;
    Some(GraceReport {
        t_quota_zero,
        t_throttle_onset,
        g_duration_s: t_throttle_onset.seconds_since(t_quota_zero),
    })
}
