//! Pipeline orchestration: load the log streams, run labeling, feature
//! extraction, detection, calibration and grace measurement, and emit the
//! report bundle as plain CSV/JSON files.
//!
//! Output files are deterministic functions of (inputs, config, seed):
//! rows follow fixed orders, floats are written in shortest round-trip
//! form, and timestamps are echoed as UTC epoch seconds with millisecond
//! precision. Every bundle carries a manifest.json listing each emitted
//! file with its row count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{
    calibrate_thresholds, classify_trace, grace_window, AuditError, Calibration, DetectorConfig,
    GraceConfig, GraceReport, PolicyClass,
};
use crate::features::{
    align_ratios, per_state_summary, window_features, AlignStats, FeatureConfig, FeatureError,
    RatioSample, RttSeries, StateSummary, WindowFeature,
};
use crate::ingest::{
    parse_portal, parse_probes, parse_telemetry, sort_timeline, write_jsonl, IngestError,
    LogFormat, PingProbe, PolicyState, PortalEvent, ProbeLog, RejectedLine, TelemetrySample,
    ThroughputTest, Timestamped,
};
use crate::label::{extract_segments, LabelConfig, LabelError, LabeledSegment};
use crate::sim::{simulate, Scenario, SimError, SimOutput};
use crate::stats::{empirical_cdf, Timestamp};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Input(String),
}

/// A pipeline error annotated with the stage that raised it.
#[derive(Debug, Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: PipelineError,
}

fn at<E: Into<PipelineError>>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |e| StageError {
        stage,
        source: e.into(),
    }
}

/// Full run configuration: input paths (logs or a scenario), output
/// directory, and the per-stage tuning knobs. Every default matches the
/// reference deployment values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditRunConfig {
    pub telemetry: Option<PathBuf>,
    pub probes: Option<PathBuf>,
    pub portal: Option<PathBuf>,
    /// Simulate this scenario instead of reading logs.
    pub scenario: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub label: Option<LabelConfig>,
    pub feature: Option<FeatureConfig>,
    pub detector: Option<DetectorConfig>,
    pub grace: Option<GraceConfig>,
    /// Overrides the scenario seed when set.
    pub seed: Option<u64>,
}

impl AuditRunConfig {
    pub fn label_cfg(&self) -> LabelConfig {
        self.label.unwrap_or_default()
    }
    pub fn feature_cfg(&self) -> FeatureConfig {
        self.feature.unwrap_or_default()
    }
    pub fn detector_cfg(&self) -> DetectorConfig {
        self.detector.unwrap_or_default()
    }
    pub fn grace_cfg(&self) -> GraceConfig {
        self.grace.unwrap_or_default()
    }
}

/// Parsed, normalized in-memory inputs for one audit run.
#[derive(Debug, Clone, Default)]
pub struct AuditInputs {
    pub telemetry: Vec<TelemetrySample>,
    pub pings: Vec<PingProbe>,
    pub speedtests: Vec<ThroughputTest>,
    pub iface: Vec<crate::ingest::IfaceCounterSample>,
    /// Sorted but not deduplicated: conflicting same-timestamp portal
    /// events must surface as an error in labeling, not be tie-broken.
    pub portal: Vec<PortalEvent>,
    pub telemetry_rejects: Vec<RejectedLine>,
    pub probe_rejects: Vec<RejectedLine>,
    pub portal_rejects: Vec<RejectedLine>,
}

impl AuditInputs {
    pub fn from_sim(out: &SimOutput) -> AuditInputs {
        AuditInputs {
            telemetry: out.telemetry.clone(),
            pings: out.pings.clone(),
            speedtests: out.speedtests.clone(),
            iface: out.iface.clone(),
            portal: out.portal.clone(),
            ..AuditInputs::default()
        }
    }

    /// Earliest timestamp across the performance streams; windows anchor
    /// here.
    pub fn trace_start(&self) -> Option<Timestamp> {
        [
            self.telemetry.first().map(|s| s.ts),
            self.pings.first().map(|p| p.ts),
            self.speedtests.first().map(|t| t.ts),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    pub fn trace_end(&self) -> Option<Timestamp> {
        [
            self.telemetry.last().map(|s| s.ts),
            self.pings.last().map(|p| p.ts),
            self.speedtests.last().map(|t| t.ts),
        ]
        .into_iter()
        .flatten()
        .max()
    }
}

fn open(path: &Path, stage: &'static str) -> Result<File, StageError> {
    File::open(path).map_err(at(stage))
}

fn detected_format(path: &Path) -> LogFormat {
    LogFormat::from_path(path).unwrap_or(LogFormat::Jsonl)
}

/// Load and normalize whichever input files are present.
pub fn load_inputs(
    telemetry: Option<&Path>,
    probes: Option<&Path>,
    portal: Option<&Path>,
) -> Result<AuditInputs, StageError> {
    let mut inputs = AuditInputs::default();
    if let Some(path) = telemetry {
        let report = parse_telemetry(open(path, "open telemetry")?, detected_format(path))
            .map_err(at("parse telemetry"))?;
        inputs.telemetry = crate::ingest::normalize_timeline(report.records);
        inputs.telemetry_rejects = report.rejects;
    }
    if let Some(path) = probes {
        let log: ProbeLog = parse_probes(open(path, "open probes")?, detected_format(path))
            .map_err(at("parse probes"))?;
        inputs.pings = crate::ingest::normalize_timeline(log.pings);
        inputs.speedtests = crate::ingest::normalize_timeline(log.speedtests);
        inputs.iface = crate::ingest::normalize_timeline(log.iface);
        inputs.probe_rejects = log.rejects;
    }
    if let Some(path) = portal {
        let report = parse_portal(open(path, "open portal")?).map_err(at("parse portal"))?;
        inputs.portal = sort_timeline(report.records);
        inputs.portal_rejects = report.rejects;
    }
    Ok(inputs)
}

/// Windows fully contained in one labeled segment, paired with its state.
pub fn label_windows(
    windows: &[WindowFeature],
    segments: &[LabeledSegment],
    window_s: f64,
) -> Vec<(WindowFeature, PolicyState)> {
    windows
        .iter()
        .filter_map(|wf| {
            let win_end = wf.window_start.offset(window_s);
            segments
                .iter()
                .find(|seg| seg.start <= wf.window_start && win_end <= seg.end)
                .map(|seg| (*wf, seg.state))
        })
        .collect()
}

pub const CLASS_ORDER: [PolicyClass; 4] = [
    PolicyClass::HighSpeed,
    PolicyClass::LowRateS1,
    PolicyClass::LowRateS3,
    PolicyClass::Unknown,
];

/// Confusion counts over labeled windows. Rows are true classes
/// (HighSpeed, LowRateS1, LowRateS3), columns the predicted class plus
/// Unknown. Unknown predictions are reported but excluded from accuracy
/// accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 4]; 3],
}

impl ConfusionMatrix {
    pub fn tally(pairs: &[(PolicyClass, PolicyClass)]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::default();
        for &(truth, predicted) in pairs {
            let row = CLASS_ORDER[..3].iter().position(|c| *c == truth);
            let col = CLASS_ORDER.iter().position(|c| *c == predicted);
            if let (Some(row), Some(col)) = (row, col) {
                m.counts[row][col] += 1;
            }
        }
        m
    }

    /// Confusions between the high-speed regime and either low-rate class.
    pub fn high_low_confusions(&self) -> usize {
        self.counts[0][1] + self.counts[0][2] + self.counts[1][0] + self.counts[2][0]
    }

    /// Confusions between the two low-rate classes.
    pub fn s1_s3_confusions(&self) -> usize {
        self.counts[1][2] + self.counts[2][1]
    }

    pub fn unknown_predictions(&self) -> usize {
        self.counts.iter().map(|row| row[3]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub rows: usize,
}

/// What a report run produced, for callers that want the numbers without
/// re-reading the files.
#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub files: Vec<FileEntry>,
    pub warnings: Vec<String>,
    pub n_windows: usize,
    pub n_unknown_windows: usize,
    pub align: AlignStats,
    pub summaries: Vec<StateSummary>,
    pub confusion: Option<ConfusionMatrix>,
    pub grace: Option<GraceReport>,
}

/// Collects the emitted files of one bundle and finishes with the
/// manifest.
pub struct BundleWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl BundleWriter {
    pub fn new(dir: &Path) -> Result<Self, StageError> {
        std::fs::create_dir_all(dir).map_err(at("create output directory"))?;
        Ok(BundleWriter {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        rows: usize,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<(), StageError> {
        let path = self.dir.join(name);
        let mut writer = BufWriter::new(File::create(&path).map_err(at("write output"))?);
        body(&mut writer).map_err(at("write output"))?;
        writer.flush().map_err(at("write output"))?;
        self.files.push(FileEntry {
            name: name.to_string(),
            rows,
        });
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<FileEntry>, StageError> {
        self.files.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = serde_json::json!({ "files": self.files });
        let path = self.dir.join("manifest.json");
        let mut writer = BufWriter::new(File::create(path).map_err(at("write manifest"))?);
        serde_json::to_writer_pretty(&mut writer, &manifest).map_err(at("write manifest"))?;
        writer.write_all(b"\n").map_err(at("write manifest"))?;
        writer.flush().map_err(at("write manifest"))?;
        Ok(self.files)
    }
}

fn fmt_ts(ts: Timestamp) -> String {
    format!("{:.3}", ts.as_secs())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn round_ms(secs: f64) -> f64 {
    (secs * 1000.0).round() / 1000.0
}

/// Write the simulator's logs (ingest-compatible formats) plus the exact
/// ground truth into the bundle.
fn write_sim_logs(bundle: &mut BundleWriter, out: &SimOutput) -> Result<(), StageError> {
    bundle.write("telemetry.jsonl", out.telemetry.len(), |w| {
        write_jsonl(w, &out.telemetry)
    })?;
    let probes = out.probe_records();
    bundle.write("probes.jsonl", probes.len(), |w| write_jsonl(w, &probes))?;
    bundle.write("portal.jsonl", out.portal.len(), |w| {
        write_jsonl(w, &out.portal)
    })?;
    bundle.write("ground_truth.json", 1, |w| {
        serde_json::to_writer_pretty(&mut *w, &out.ground_truth)?;
        w.write_all(b"\n")
    })?;
    Ok(())
}

/// Simulate a scenario file and write its logs and ground truth.
pub fn cmd_simulate(
    scenario_path: &Path,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<(Scenario, Vec<FileEntry>), StageError> {
    let file = open(scenario_path, "open scenario")?;
    let mut scenario: Scenario = serde_json::from_reader(file)
        .map_err(|e| at("parse scenario")(PipelineError::Input(e.to_string())))?;
    if let Some(seed) = seed_override {
        scenario.seed = seed;
    }
    let output = simulate(&scenario).map_err(at("simulate"))?;
    let mut bundle = BundleWriter::new(out_dir)?;
    write_sim_logs(&mut bundle, &output)?;
    let files = bundle.finish()?;
    Ok((scenario, files))
}

/// Extract labeled segments from a portal log and write segments.jsonl.
pub fn cmd_label(
    portal_path: &Path,
    out_dir: &Path,
    cfg: &LabelConfig,
) -> Result<Vec<LabeledSegment>, StageError> {
    let inputs = load_inputs(None, None, Some(portal_path))?;
    let (start, end) = portal_span(&inputs.portal)
        .ok_or_else(|| at("label")(PipelineError::Input("portal log holds no events".into())))?;
    let segments = extract_segments(&inputs.portal, start, end, cfg).map_err(at("label"))?;
    let mut bundle = BundleWriter::new(out_dir)?;
    bundle.write("segments.jsonl", segments.len(), |w| {
        write_jsonl(w, &segments)
    })?;
    bundle.finish()?;
    Ok(segments)
}

fn portal_span(events: &[PortalEvent]) -> Option<(Timestamp, Timestamp)> {
    Some((events.first()?.ts, events.last()?.ts))
}

/// Output of the shared feature-extraction stage.
pub struct FeatureStage {
    pub trace_start: Timestamp,
    pub windows: Vec<WindowFeature>,
    pub ratios: Vec<RatioSample>,
    pub align: AlignStats,
}

pub fn extract_features(
    inputs: &AuditInputs,
    cfg: &FeatureConfig,
) -> Result<FeatureStage, StageError> {
    let trace_start = inputs
        .trace_start()
        .ok_or_else(|| at("features")(PipelineError::Input("no samples in any stream".into())))?;
    let (ratios, align) = align_ratios(&inputs.speedtests, &inputs.telemetry, cfg.align_tol_s);
    let windows = window_features(
        &inputs.speedtests,
        &ratios,
        RttSeries::PopTelemetry(&inputs.telemetry),
        cfg,
        trace_start,
    )
    .map_err(at("features"))?;
    Ok(FeatureStage {
        trace_start,
        windows,
        ratios,
        align,
    })
}

fn write_features_csv(
    bundle: &mut BundleWriter,
    windows: &[WindowFeature],
) -> Result<(), StageError> {
    bundle.write("features.csv", windows.len(), |w| {
        writeln!(
            w,
            "window_start,n_tests,median_down_mbps,median_r,median_pop_rtt_ms"
        )?;
        for wf in windows {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_ts(wf.window_start),
                wf.n_tests,
                fmt_opt(wf.median_down_mbps),
                fmt_opt(wf.median_r),
                fmt_opt(wf.median_pop_rtt_ms)
            )?;
        }
        Ok(())
    })
}

fn write_detections_csv(
    bundle: &mut BundleWriter,
    windows: &[WindowFeature],
    classes: &[(Timestamp, PolicyClass)],
) -> Result<(), StageError> {
    bundle.write("detections.csv", classes.len(), |w| {
        writeln!(w, "window_start,class,median_down_mbps,median_r")?;
        for (wf, (ts, class)) in windows.iter().zip(classes.iter()) {
            writeln!(
                w,
                "{},{},{},{}",
                fmt_ts(*ts),
                class,
                fmt_opt(wf.median_down_mbps),
                fmt_opt(wf.median_r)
            )?;
        }
        Ok(())
    })
}

/// Extract window features and write features.csv.
pub fn cmd_features(
    telemetry: &Path,
    probes: &Path,
    out_dir: &Path,
    cfg: &FeatureConfig,
) -> Result<Vec<WindowFeature>, StageError> {
    let inputs = load_inputs(Some(telemetry), Some(probes), None)?;
    let stage = extract_features(&inputs, cfg)?;
    let mut bundle = BundleWriter::new(out_dir)?;
    write_features_csv(&mut bundle, &stage.windows)?;
    bundle.finish()?;
    Ok(stage.windows)
}

/// Classify every window and write detections.csv.
pub fn cmd_detect(
    telemetry: &Path,
    probes: &Path,
    out_dir: &Path,
    feature_cfg: &FeatureConfig,
    detector_cfg: &DetectorConfig,
) -> Result<Vec<(Timestamp, PolicyClass)>, StageError> {
    detector_cfg.validate().map_err(at("detect"))?;
    let inputs = load_inputs(Some(telemetry), Some(probes), None)?;
    let stage = extract_features(&inputs, feature_cfg)?;
    let classes = classify_trace(&stage.windows, detector_cfg);
    let mut bundle = BundleWriter::new(out_dir)?;
    write_detections_csv(&mut bundle, &stage.windows, &classes)?;
    bundle.finish()?;
    Ok(classes)
}

/// Re-derive thresholds from a labeled trace and write calibration.json.
pub fn cmd_calibrate(
    telemetry: &Path,
    probes: &Path,
    portal: &Path,
    out_dir: &Path,
    label_cfg: &LabelConfig,
    feature_cfg: &FeatureConfig,
) -> Result<Calibration, StageError> {
    let inputs = load_inputs(Some(telemetry), Some(probes), Some(portal))?;
    let stage = extract_features(&inputs, feature_cfg)?;
    let end = inputs.trace_end().expect("nonempty by extract_features");
    let segments = extract_segments(&inputs.portal, stage.trace_start, end, label_cfg)
        .map_err(at("label"))?;
    let labeled = label_windows(&stage.windows, &segments, feature_cfg.window_s);
    let calibration = calibrate_thresholds(&labeled).map_err(at("calibrate"))?;
    let mut bundle = BundleWriter::new(out_dir)?;
    bundle.write("calibration.json", 1, |w| {
        serde_json::to_writer_pretty(&mut *w, &calibration)?;
        w.write_all(b"\n")
    })?;
    bundle.finish()?;
    Ok(calibration)
}

/// Measure the enforcement-delay window and write grace.json.
pub fn cmd_grace(
    probes: &Path,
    portal: &Path,
    out_dir: &Path,
    cfg: &GraceConfig,
) -> Result<Option<GraceReport>, StageError> {
    cfg.validate().map_err(at("grace"))?;
    let inputs = load_inputs(None, Some(probes), Some(portal))?;
    let report = grace_window(&inputs.portal, &inputs.speedtests, cfg);
    let mut bundle = BundleWriter::new(out_dir)?;
    write_grace_json(&mut bundle, report.as_ref())?;
    bundle.finish()?;
    Ok(report)
}

fn write_grace_json(
    bundle: &mut BundleWriter,
    report: Option<&GraceReport>,
) -> Result<(), StageError> {
    if let Some(report) = report {
        let body = serde_json::json!({
            "t_quota_zero": round_ms(report.t_quota_zero.as_secs()),
            "t_throttle_onset": round_ms(report.t_throttle_onset.as_secs()),
            "g_duration_s": round_ms(report.g_duration_s),
        });
        bundle.write("grace.json", 1, |w| {
            serde_json::to_writer_pretty(&mut *w, &body)?;
            w.write_all(b"\n")
        })?;
    }
    Ok(())
}

/// The full report: summary table, CDF and scatter plot data, detections,
/// grace window, confusion matrix, manifest.
pub fn cmd_report(cfg: &AuditRunConfig) -> Result<ReportSummary, StageError> {
    let out_dir = cfg
        .out
        .clone()
        .ok_or_else(|| at("report")(PipelineError::Input("output directory required".into())))?;
    cfg.detector_cfg().validate().map_err(at("report"))?;
    cfg.grace_cfg().validate().map_err(at("report"))?;

    let mut bundle = BundleWriter::new(&out_dir)?;
    let mut warnings: Vec<String> = Vec::new();

    // Inputs: simulated or read from disk.
    let inputs = if let Some(scenario_path) = &cfg.scenario {
        let file = open(scenario_path, "open scenario")?;
        let mut scenario: Scenario = serde_json::from_reader(file)
            .map_err(|e| at("parse scenario")(PipelineError::Input(e.to_string())))?;
        if let Some(seed) = cfg.seed {
            scenario.seed = seed;
        }
        let output = simulate(&scenario).map_err(at("simulate"))?;
        write_sim_logs(&mut bundle, &output)?;
        AuditInputs::from_sim(&output)
    } else {
        if cfg.telemetry.is_none() || cfg.probes.is_none() {
            return Err(at("report")(PipelineError::Input(
                "report needs --telemetry and --probes, or --scenario".into(),
            )));
        }
        load_inputs(
            cfg.telemetry.as_deref(),
            cfg.probes.as_deref(),
            cfg.portal.as_deref(),
        )?
    };

    for (name, rejects) in [
        ("telemetry_rejects.jsonl", &inputs.telemetry_rejects),
        ("probes_rejects.jsonl", &inputs.probe_rejects),
        ("portal_rejects.jsonl", &inputs.portal_rejects),
    ] {
        if !rejects.is_empty() {
            warnings.push(format!("{} rejected record(s) in {}", rejects.len(), name));
            bundle.write(name, rejects.len(), |w| write_jsonl(w, rejects))?;
        }
    }

    // Features and detections.
    let feature_cfg = cfg.feature_cfg();
    let stage = extract_features(&inputs, &feature_cfg)?;
    let detector_cfg = cfg.detector_cfg();
    let classes = classify_trace(&stage.windows, &detector_cfg);
    write_features_csv(&mut bundle, &stage.windows)?;
    write_detections_csv(&mut bundle, &stage.windows, &classes)?;

    // Labels, summaries, confusion: only with portal ground truth.
    let segments: Vec<LabeledSegment> = if inputs.portal.is_empty() {
        warnings.push(
            "portal log empty: skipping segments, summary, CDFs, and confusion matrix".into(),
        );
        Vec::new()
    } else {
        let end = inputs.trace_end().expect("nonempty");
        extract_segments(&inputs.portal, stage.trace_start, end, &cfg.label_cfg())
            .map_err(at("label"))?
    };

    let mut summaries: Vec<StateSummary> = Vec::new();
    let mut confusion: Option<ConfusionMatrix> = None;
    if !segments.is_empty() {
        bundle.write("segments.jsonl", segments.len(), |w| {
            write_jsonl(w, &segments)
        })?;

        let (state_summaries, summary_warnings) = per_state_summary(
            &inputs.speedtests,
            &stage.ratios,
            &inputs.pings,
            &inputs.telemetry,
            &segments,
            true,
        );
        for warning in &summary_warnings {
            warnings.push(format!(
                "state {} has no {} samples; omitted from summary",
                warning.group, warning.missing
            ));
        }
        summaries = state_summaries;
        write_summary_csv(&mut bundle, &summaries)?;
        write_cdf_files(&mut bundle, &inputs, &stage.ratios, &segments)?;

        let labeled = label_windows(&stage.windows, &segments, feature_cfg.window_s);
        let pairs: Vec<(PolicyClass, PolicyClass)> = labeled
            .iter()
            .map(|(wf, state)| {
                (
                    PolicyClass::from_state(*state),
                    crate::audit::classify_window(wf, &detector_cfg),
                )
            })
            .collect();
        let matrix = ConfusionMatrix::tally(&pairs);
        write_confusion_csv(&mut bundle, &matrix)?;
        confusion = Some(matrix);
    }

    // Scatter data: every window, labeled or not.
    write_scatter_csv(
        &mut bundle,
        &stage.windows,
        &classes,
        &segments,
        feature_cfg.window_s,
    )?;

    // Grace window, when the portal shows a depletion.
    let grace = if inputs.portal.is_empty() {
        None
    } else {
        grace_window(&inputs.portal, &inputs.speedtests, &cfg.grace_cfg())
    };
    write_grace_json(&mut bundle, grace.as_ref())?;
    if grace.is_none() && !inputs.portal.is_empty() {
        warnings.push("no quota depletion found: grace.json not emitted".into());
    }

    let n_unknown = classes
        .iter()
        .filter(|(_, c)| *c == PolicyClass::Unknown)
        .count();
    let files = bundle.finish()?;
    Ok(ReportSummary {
        files,
        warnings,
        n_windows: stage.windows.len(),
        n_unknown_windows: n_unknown,
        align: stage.align,
        summaries,
        confusion,
        grace,
    })
}

fn write_summary_csv(
    bundle: &mut BundleWriter,
    summaries: &[StateSummary],
) -> Result<(), StageError> {
    bundle.write("summary.csv", summaries.len(), |w| {
        writeln!(
            w,
            "state,down_mbps_median,down_mbps_p10,down_mbps_p90,\
             host_rtt_ms_median,host_rtt_ms_p10,host_rtt_ms_p90,\
             pop_rtt_ms_median,pop_rtt_ms_p10,pop_rtt_ms_p90,\
             r_median,r_p10,r_p90"
        )?;
        for s in summaries {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.group,
                s.down_mbps.median,
                s.down_mbps.p10,
                s.down_mbps.p90,
                s.host_rtt_ms.median,
                s.host_rtt_ms.p10,
                s.host_rtt_ms.p90,
                s.pop_rtt_ms.median,
                s.pop_rtt_ms.p10,
                s.pop_rtt_ms.p90,
                s.r.median,
                s.r.p10,
                s.r.p90
            )?;
        }
        Ok(())
    })
}

fn write_cdf_files(
    bundle: &mut BundleWriter,
    inputs: &AuditInputs,
    ratios: &[RatioSample],
    segments: &[LabeledSegment],
) -> Result<(), StageError> {
    use crate::features::StateGroup;
    use crate::label::segment_at;

    let group_of = |ts: Timestamp| -> Option<StateGroup> {
        segment_at(segments, ts).map(|seg| {
            if seg.state.is_high_speed() {
                StateGroup::HighSpeed
            } else {
                StateGroup::Single(seg.state)
            }
        })
    };
    let groups = [
        StateGroup::Single(PolicyState::S1),
        StateGroup::HighSpeed,
        StateGroup::Single(PolicyState::S3),
    ];

    let mut down_body: Vec<String> = Vec::new();
    for group in groups {
        let values: Vec<f64> = inputs
            .speedtests
            .iter()
            .filter(|t| group_of(t.ts) == Some(group))
            .map(|t| t.down_mbps)
            .collect();
        for (value, cdf) in empirical_cdf(&values) {
            down_body.push(format!("{group},{value},{cdf}"));
        }
    }
    bundle.write("cdf_down.csv", down_body.len(), |w| {
        writeln!(w, "state,down_mbps,cdf")?;
        for line in &down_body {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;

    let mut rtt_body: Vec<String> = Vec::new();
    for group in groups {
        let host: Vec<f64> = inputs
            .pings
            .iter()
            .filter(|p| group_of(p.ts) == Some(group))
            .map(|p| p.avg_rtt_ms)
            .collect();
        for (value, cdf) in empirical_cdf(&host) {
            rtt_body.push(format!("{group},host,{value},{cdf}"));
        }
        let pop: Vec<f64> = inputs
            .telemetry
            .iter()
            .filter(|s| group_of(s.ts) == Some(group))
            .map(|s| s.pop_rtt_ms)
            .collect();
        for (value, cdf) in empirical_cdf(&pop) {
            rtt_body.push(format!("{group},pop,{value},{cdf}"));
        }
    }
    bundle.write("cdf_rtt.csv", rtt_body.len(), |w| {
        writeln!(w, "state,source,rtt_ms,cdf")?;
        for line in &rtt_body {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;

    // Ratio CDF rides along for the fingerprint plots.
    let mut r_body: Vec<String> = Vec::new();
    for group in groups {
        let values: Vec<f64> = ratios
            .iter()
            .filter(|r| group_of(r.ts) == Some(group))
            .map(|r| r.r)
            .collect();
        for (value, cdf) in empirical_cdf(&values) {
            r_body.push(format!("{group},{value},{cdf}"));
        }
    }
    bundle.write("cdf_r.csv", r_body.len(), |w| {
        writeln!(w, "state,r,cdf")?;
        for line in &r_body {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    Ok(())
}

fn write_scatter_csv(
    bundle: &mut BundleWriter,
    windows: &[WindowFeature],
    classes: &[(Timestamp, PolicyClass)],
    segments: &[LabeledSegment],
    window_s: f64,
) -> Result<(), StageError> {
    bundle.write("scatter.csv", windows.len(), |w| {
        writeln!(
            w,
            "window_start,median_down_mbps,median_r,true_label,predicted_class"
        )?;
        for (wf, (_, class)) in windows.iter().zip(classes.iter()) {
            let win_end = wf.window_start.offset(window_s);
            let true_label = segments
                .iter()
                .find(|seg| seg.start <= wf.window_start && win_end <= seg.end)
                .map(|seg| seg.state.to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_ts(wf.window_start),
                fmt_opt(wf.median_down_mbps),
                fmt_opt(wf.median_r),
                true_label,
                class
            )?;
        }
        Ok(())
    })
}

fn write_confusion_csv(
    bundle: &mut BundleWriter,
    matrix: &ConfusionMatrix,
) -> Result<(), StageError> {
    bundle.write("confusion.csv", 3, |w| {
        writeln!(
            w,
            "true_class,pred_high_speed,pred_low_rate_s1,pred_low_rate_s3,pred_unknown"
        )?;
        for (row, truth) in CLASS_ORDER[..3].iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                truth,
                matrix.counts[row][0],
                matrix.counts[row][1],
                matrix.counts[row][2],
                matrix.counts[row][3]
            )?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Validation (parse-only pass)
// ---------------------------------------------------------------------------

/// Cadence and coverage facts for one record stream.
#[derive(Debug, Clone, Serialize)]
pub struct StreamValidation {
    pub stream: String,
    pub records: usize,
    pub span: Option<(f64, f64)>,
    pub median_interval_s: Option<f64>,
    /// Expected cadence, when the collection design fixes one.
    pub nominal_interval_s: Option<f64>,
    /// True when the estimated cadence deviates from nominal by more
    /// than 20%.
    pub cadence_flag: bool,
    /// (gap_start, gap_seconds) for holes well beyond the cadence.
    pub gaps: Vec<(f64, f64)>,
    /// Cumulative-counter resets (iface stream only): each starts a new
    /// delta epoch.
    pub counter_resets: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub streams: Vec<StreamValidation>,
    /// (file label, rejected record count)
    pub rejects: Vec<(String, usize)>,
}

fn validate_stream<T: Timestamped>(
    name: &str,
    records: &[T],
    nominal: Option<f64>,
) -> StreamValidation {
    let timestamps: Vec<f64> = records.iter().map(|r| r.ts().as_secs()).collect();
    let span = match (timestamps.first(), timestamps.last()) {
        (Some(&a), Some(&b)) => Some((a, b)),
        _ => None,
    };
    let mut intervals: Vec<f64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    intervals.sort_by(f64::total_cmp);
    let median_interval = if intervals.is_empty() {
        None
    } else {
        Some(intervals[intervals.len() / 2])
    };
    let cadence_flag = match (median_interval, nominal) {
        (Some(est), Some(nom)) => (est - nom).abs() / nom > 0.20,
        _ => false,
    };
    let gap_threshold = median_interval.map(|m| (10.0 * m).max(30.0)).unwrap_or(30.0);
    let gaps: Vec<(f64, f64)> = timestamps
        .windows(2)
        .filter(|w| w[1] - w[0] > gap_threshold)
        .map(|w| (w[0], w[1] - w[0]))
        .collect();
    StreamValidation {
        stream: name.to_string(),
        records: records.len(),
        span,
        median_interval_s: median_interval,
        nominal_interval_s: nominal,
        cadence_flag,
        gaps,
        counter_resets: 0,
    }
}

/// Parse-only pass over whichever inputs are given: counts, rejects,
/// spans, cadence estimates, gaps. Format errors (wrong file, majority
/// rejects) stay hard errors.
pub fn cmd_validate(
    telemetry: Option<&Path>,
    probes: Option<&Path>,
    portal: Option<&Path>,
) -> Result<ValidationReport, StageError> {
    let inputs = load_inputs(telemetry, probes, portal)?;
    let mut streams = Vec::new();
    if telemetry.is_some() {
        streams.push(validate_stream("telemetry", &inputs.telemetry, Some(1.0)));
    }
    if probes.is_some() {
        streams.push(validate_stream("probes/ping", &inputs.pings, None));
        streams.push(validate_stream(
            "probes/speedtest",
            &inputs.speedtests,
            Some(120.0),
        ));
        let mut iface = validate_stream("probes/iface", &inputs.iface, None);
        iface.counter_resets = crate::ingest::split_counter_epochs(&inputs.iface)
            .len()
            .saturating_sub(1);
        streams.push(iface);
    }
    if portal.is_some() {
        streams.push(validate_stream("portal", &inputs.portal, None));
    }
    let mut rejects = Vec::new();
    if telemetry.is_some() {
        rejects.push(("telemetry".to_string(), inputs.telemetry_rejects.len()));
    }
    if probes.is_some() {
        rejects.push(("probes".to_string(), inputs.probe_rejects.len()));
    }
    if portal.is_some() {
        rejects.push(("portal".to_string(), inputs.portal_rejects.len()));
    }
    Ok(ValidationReport { streams, rejects })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Scenario;

    #[test]
    fn label_windows_requires_full_containment() {
        let seg = LabeledSegment {
            start: Timestamp::new(100.0).unwrap(),
            end: Timestamp::new(500.0).unwrap(),
            state: PolicyState::S2,
        };
        let wf = |start: f64| WindowFeature {
            window_start: Timestamp::new(start).unwrap(),
            n_tests: 1,
            median_down_mbps: Some(100.0),
            median_r: Some(10.7),
            median_pop_rtt_ms: None,
        };
        let windows = vec![wf(0.0), wf(180.0), wf(360.0)];
        let labeled = label_windows(&windows, &[seg], 180.0);
        // [0,180) starts before the segment; [360,540) ends after it.
        assert_eq!(labeled.len(), 1);
        assert_eq!(labeled[0].0.window_start.as_secs(), 180.0);
    }

    #[test]
    fn confusion_matrix_counts_by_class() {
        let pairs = vec![
            (PolicyClass::HighSpeed, PolicyClass::HighSpeed),
            (PolicyClass::HighSpeed, PolicyClass::LowRateS1),
            (PolicyClass::LowRateS1, PolicyClass::LowRateS1),
            (PolicyClass::LowRateS3, PolicyClass::LowRateS1),
            (PolicyClass::LowRateS3, PolicyClass::Unknown),
        ];
        let m = ConfusionMatrix::tally(&pairs);
        assert_eq!(m.counts[0][0], 1);
        assert_eq!(m.counts[0][1], 1);
        assert_eq!(m.high_low_confusions(), 1);
        assert_eq!(m.s1_s3_confusions(), 1);
        assert_eq!(m.unknown_predictions(), 1);
    }

    #[test]
    fn report_bundle_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = Scenario::depletion_case(7, 480.0);
        let scenario_path = dir.path().join("scenario.json");
        std::fs::write(
            &scenario_path,
            serde_json::to_string_pretty(&scenario).unwrap(),
        )
        .unwrap();

        let run = |out: &Path| -> ReportSummary {
            cmd_report(&AuditRunConfig {
                scenario: Some(scenario_path.clone()),
                out: Some(out.to_path_buf()),
                ..AuditRunConfig::default()
            })
            .unwrap()
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let summary_a = run(&out_a);
        let summary_b = run(&out_b);
        assert_eq!(summary_a.files, summary_b.files);
        assert!(summary_a.grace.is_some());

        for entry in &summary_a.files {
            let bytes_a = std::fs::read(out_a.join(&entry.name)).unwrap();
            let bytes_b = std::fs::read(out_b.join(&entry.name)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{} differs between runs", entry.name);
        }
        // Manifest lists every emitted file.
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out_a.join("manifest.json")).unwrap()).unwrap();
        let listed: Vec<String> = manifest["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["name"].as_str().unwrap().to_string())
            .collect();
        for entry in &summary_a.files {
            assert!(listed.contains(&entry.name));
        }
    }

    #[test]
    fn empty_portal_still_produces_detections() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = Scenario::depletion_case(3, 240.0);
        let out = crate::sim::simulate(&scenario).unwrap();
        let telemetry_path = dir.path().join("telemetry.jsonl");
        let probes_path = dir.path().join("probes.jsonl");
        let portal_path = dir.path().join("portal.jsonl");
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &out.telemetry).unwrap();
        std::fs::write(&telemetry_path, &buf).unwrap();
        buf.clear();
        write_jsonl(&mut buf, &out.probe_records()).unwrap();
        std::fs::write(&probes_path, &buf).unwrap();
        std::fs::write(&portal_path, b"").unwrap();

        let summary = cmd_report(&AuditRunConfig {
            telemetry: Some(telemetry_path),
            probes: Some(probes_path),
            portal: Some(portal_path),
            out: Some(dir.path().join("out")),
            ..AuditRunConfig::default()
        })
        .unwrap();
        assert!(summary.files.iter().any(|f| f.name == "detections.csv"));
        assert!(!summary.files.iter().any(|f| f.name == "summary.csv"));
        assert!(!summary.files.iter().any(|f| f.name == "confusion.csv"));
        assert!(summary
            .warnings
            .iter()
            .any(|w| w.contains("portal log empty")));
    }

    #[test]
    fn validation_reports_cadence_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = Scenario::depletion_case(5, 240.0);
        let out = crate::sim::simulate(&scenario).unwrap();
        // Remove 10 minutes of telemetry to create a gap.
        let t0 = out.telemetry[0].ts.as_secs();
        let telemetry: Vec<TelemetrySample> = out
            .telemetry
            .iter()
            .filter(|s| {
                let offset = s.ts.as_secs() - t0;
                !(1000.0..1600.0).contains(&offset)
            })
            .cloned()
            .collect();
        let telemetry_path = dir.path().join("telemetry.jsonl");
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &telemetry).unwrap();
        std::fs::write(&telemetry_path, &buf).unwrap();

        let report = cmd_validate(Some(&telemetry_path), None, None).unwrap();
        let stream = &report.streams[0];
        assert_eq!(stream.records, telemetry.len());
        assert_eq!(stream.median_interval_s, Some(1.0));
        assert!(!stream.cadence_flag);
        assert_eq!(stream.gaps.len(), 1);
        assert!((stream.gaps[0].1 - 600.0).abs() < 1.5);
    }

    #[test]
    fn validation_counts_counter_resets() {
        let dir = tempfile::tempdir().unwrap();
        let probes_path = dir.path().join("probes.jsonl");
        let mut lines = String::new();
        for (i, rx) in [100u64, 200, 300, 50, 150].iter().enumerate() {
            lines.push_str(&format!(
                "{{\"kind\":\"iface\",\"ts\":{},\"rx_bytes\":{},\"tx_bytes\":0}}\n",
                i as f64 * 5.0,
                rx
            ));
        }
        std::fs::write(&probes_path, lines).unwrap();
        let report = cmd_validate(None, Some(&probes_path), None).unwrap();
        let iface = report
            .streams
            .iter()
            .find(|s| s.stream == "probes/iface")
            .unwrap();
        assert_eq!(iface.records, 5);
        assert_eq!(iface.counter_resets, 1);
    }
}
