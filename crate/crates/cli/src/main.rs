//! linkaudit: edge-side auditing of service tiers and quota throttling on
//! LEO access links.
//!
//! Exit codes: 0 ok, 1 usage/config, 2 input format, 3 no separation
//! between classes (calibration refused), 4 internal.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use linkaudit::audit::{AuditError, DetectorConfig, GraceConfig};
use linkaudit::features::FeatureConfig;
use linkaudit::ingest::IngestError;
use linkaudit::label::{LabelConfig, LabelError};
use linkaudit::report::{
    cmd_calibrate, cmd_detect, cmd_features, cmd_grace, cmd_label, cmd_report, cmd_simulate,
    cmd_validate, AuditRunConfig, PipelineError, ReportSummary, StageError, ValidationReport,
    CLASS_ORDER,
};

const EXIT_USAGE: u8 = 1;
const EXIT_FORMAT: u8 = 2;
const EXIT_NO_SEPARATION: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "linkaudit",
    version,
    about = "Audit service-tier and quota-throttling policy on a LEO access link from cross-layer logs"
)]
struct Cli {
    /// JSON config file providing defaults for paths and tuning flags
    /// (flags > config file > built-in defaults).
    #[arg(long, global = true, env = "LINKAUDIT_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default, Clone)]
struct Inputs {
    /// Terminal telemetry log (.jsonl or .csv)
    #[arg(long)]
    telemetry: Option<PathBuf>,
    /// Host probe log with ping/speedtest/iface records (.jsonl or .csv)
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Portal plan/quota event log (.jsonl)
    #[arg(long)]
    portal: Option<PathBuf>,
}

#[derive(Args, Default, Clone)]
struct Tuning {
    /// Detector window length W, seconds
    #[arg(long)]
    window_s: Option<f64>,
    /// Test-to-telemetry alignment tolerance, seconds
    #[arg(long)]
    align_tol_s: Option<f64>,
    /// Minimum tests per window for medians to count
    #[arg(long)]
    min_tests_per_window: Option<usize>,
    /// Guard interval trimmed around portal state changes, seconds
    #[arg(long)]
    guard_s: Option<f64>,
    /// Minimum stable-segment length kept, seconds
    #[arg(long)]
    t_min_s: Option<f64>,
    /// Download threshold T_d, Mbps
    #[arg(long)]
    td_mbps: Option<f64>,
    /// Ratio threshold T_r
    #[arg(long)]
    tr: Option<f64>,
    /// Stay-active plateau center, Mbps
    #[arg(long)]
    plateau_s1: Option<f64>,
    /// Post-quota plateau center, Mbps
    #[arg(long)]
    plateau_s3: Option<f64>,
    /// Post-quota hard cap, Mbps
    #[arg(long)]
    cap_mbps: Option<f64>,
    /// Throttle bound multiplier over the cap
    #[arg(long)]
    onset_factor: Option<f64>,
    /// Consecutive sub-cap tests required to call the onset
    #[arg(long)]
    persistence_tests: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse-only pass: record counts, rejects, time spans, cadence, gaps
    Validate {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Extract guard-trimmed stable segments from the portal log
    Label {
        #[arg(long)]
        portal: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Reduce the trace to per-window fingerprints (features.csv)
    Features {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Classify every window (detections.csv)
    Detect {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Re-derive thresholds from a labeled trace (calibration.json)
    Calibrate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Measure the quota enforcement-delay window (grace.json)
    Grace {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Generate logs plus ground truth from a scenario file
    Simulate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full report bundle: summary, CDF/scatter data, detections,
    /// confusion matrix, grace window, manifest
    Report {
        #[command(flatten)]
        inputs: Inputs,
        /// Simulate this scenario instead of reading logs
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        tuning: Tuning,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Stage(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

enum CliError {
    Usage(String),
    Stage(StageError),
}

impl From<StageError> for CliError {
    fn from(err: StageError) -> Self {
        CliError::Stage(err)
    }
}

fn exit_code(err: &StageError) -> u8 {
    match &err.source {
        PipelineError::Ingest(IngestError::Format { .. })
        | PipelineError::Ingest(IngestError::MissingColumn(_)) => EXIT_FORMAT,
        PipelineError::Ingest(IngestError::Io(_)) => EXIT_FORMAT,
        PipelineError::Label(LabelError::Config(_)) => EXIT_USAGE,
        PipelineError::Label(_) => EXIT_FORMAT,
        PipelineError::Feature(_) => EXIT_USAGE,
        PipelineError::Audit(AuditError::NoSeparation(_)) => EXIT_NO_SEPARATION,
        PipelineError::Audit(AuditError::Config(_)) => EXIT_USAGE,
        PipelineError::Audit(AuditError::InsufficientData(_)) => EXIT_FORMAT,
        PipelineError::Sim(_) => EXIT_FORMAT,
        PipelineError::Input(_) => EXIT_USAGE,
        PipelineError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        PipelineError::Io(_) | PipelineError::Json(_) => EXIT_INTERNAL,
    }
}

/// flags > config file > built-in defaults.
struct Effective {
    base: AuditRunConfig,
}

impl Effective {
    fn load(config_path: Option<&PathBuf>) -> Result<Self, CliError> {
        let base = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {path:?}: {e}")))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("bad config {path:?}: {e}")))?
            }
            None => AuditRunConfig::default(),
        };
        Ok(Effective { base })
    }

    fn label(&self, t: &Tuning) -> LabelConfig {
        let mut cfg = self.base.label.unwrap_or_default();
        if let Some(v) = t.guard_s {
            cfg.guard_s = v;
        }
        if let Some(v) = t.t_min_s {
            cfg.t_min_s = v;
        }
        cfg
    }

    fn feature(&self, t: &Tuning) -> FeatureConfig {
        let mut cfg = self.base.feature.unwrap_or_default();
        if let Some(v) = t.window_s {
            cfg.window_s = v;
        }
        if let Some(v) = t.align_tol_s {
            cfg.align_tol_s = v;
        }
        if let Some(v) = t.min_tests_per_window {
            cfg.min_tests_per_window = v;
        }
        cfg
    }

    fn detector(&self, t: &Tuning) -> DetectorConfig {
        let mut cfg = self.base.detector.unwrap_or_default();
        if let Some(v) = t.td_mbps {
            cfg.t_d_mbps = v;
        }
        if let Some(v) = t.tr {
            cfg.t_r = v;
        }
        if let Some(v) = t.plateau_s1 {
            cfg.plateau_s1_mbps = v;
        }
        if let Some(v) = t.plateau_s3 {
            cfg.plateau_s3_mbps = v;
        }
        cfg
    }

    fn grace(&self, t: &Tuning) -> GraceConfig {
        let mut cfg = self.base.grace.unwrap_or_default();
        if let Some(v) = t.cap_mbps {
            cfg.cap_mbps = v;
        }
        if let Some(v) = t.onset_factor {
            cfg.onset_factor = v;
        }
        if let Some(v) = t.persistence_tests {
            cfg.persistence_tests = v;
        }
        cfg
    }

    fn path(
        &self,
        flag: &Option<PathBuf>,
        from_config: impl Fn(&AuditRunConfig) -> Option<PathBuf>,
        name: &str,
    ) -> Result<PathBuf, CliError> {
        flag.clone()
            .or_else(|| from_config(&self.base))
            .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
    }

    fn opt_path(
        &self,
        flag: &Option<PathBuf>,
        from_config: impl Fn(&AuditRunConfig) -> Option<PathBuf>,
    ) -> Option<PathBuf> {
        flag.clone().or_else(|| from_config(&self.base))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let eff = Effective::load(cli.config.as_ref())?;
    match cli.command {
        Command::Validate { inputs } => {
            let telemetry = eff.opt_path(&inputs.telemetry, |c| c.telemetry.clone());
            let probes = eff.opt_path(&inputs.probes, |c| c.probes.clone());
            let portal = eff.opt_path(&inputs.portal, |c| c.portal.clone());
            if telemetry.is_none() && probes.is_none() && portal.is_none() {
                return Err(CliError::Usage(
                    "validate needs at least one of --telemetry, --probes, --portal".into(),
                ));
            }
            let report = cmd_validate(
                telemetry.as_deref(),
                probes.as_deref(),
                portal.as_deref(),
            )?;
            print_validation(&report);
            Ok(())
        }
        Command::Label { portal, out, tuning } => {
            let portal = eff.path(&portal, |c| c.portal.clone(), "portal")?;
            let out = eff.path(&out, |c| c.out.clone(), "out")?;
            let segments = cmd_label(&portal, &out, &eff.label(&tuning))?;
            println!(
                "wrote {} segment(s) to {}",
                segments.len(),
                out.join("segments.jsonl").display()
            );
            Ok(())
        }
        Command::Features { inputs, out, tuning } => {
            let telemetry = eff.path(&inputs.telemetry, |c| c.telemetry.clone(), "telemetry")?;
            let probes = eff.path(&inputs.probes, |c| c.probes.clone(), "probes")?;
            let out = eff.path(&out, |c| c.out.clone(), "out")?;
            let windows = cmd_features(&telemetry, &probes, &out, &eff.feature(&tuning))?;
            println!(
                "wrote {} window(s) to {}",
                windows.len(),
                out.join("features.csv").display()
            );
            Ok(())
        }
        Command::Detect { inputs, out, tuning } => {
            let telemetry = eff.path(&inputs.telemetry, |c| c.telemetry.clone(), "telemetry")?;
            let probes = eff.path(&inputs.probes, |c| c.probes.clone(), "probes")?;
            let out = eff.path(&out, |c| c.out.clone(), "out")?;
            let classes = cmd_detect(
                &telemetry,
                &probes,
                &out,
                &eff.feature(&tuning),
                &eff.detector(&tuning),
            )?;
            let mut counts = [0usize; 4];
            for (_, class) in &classes {
                counts[CLASS_ORDER.iter().position(|c| c == class).unwrap()] += 1;
            }
            println!(
                "classified {} window(s): {} high-speed, {} stay-active, {} throttled, {} unknown",
                classes.len(),
                counts[0],
                counts[1],
                counts[2],
                counts[3]
            );
            Ok(())
        }
        Command::Calibrate { inputs, out, tuning } => {
            let telemetry = eff.path(&inputs.telemetry, |c| c.telemetry.clone(), "telemetry")?;
            let probes = eff.path(&inputs.probes, |c| c.probes.clone(), "probes")?;
            let portal = eff.path(&inputs.portal, |c| c.portal.clone(), "portal")?;
            let out = eff.path(&out, |c| c.out.clone(), "out")?;
            let cal = cmd_calibrate(
                &telemetry,
                &probes,
                &portal,
                &out,
                &eff.label(&tuning),
                &eff.feature(&tuning),
            )?;
            println!(
                "calibrated: t_d = {:.4} Mbps in gap ({:.4}, {:.4}); t_r = {:.4} in gap ({:.4}, {:.4})",
                cal.t_d_mbps,
                cal.down_gap.0,
                cal.down_gap.1,
                cal.t_r,
                cal.r_gap.0,
                cal.r_gap.1
            );
            Ok(())
        }
        Command::Grace { inputs, out, tuning } => {
            let probes = eff.path(&inputs.probes, |c| c.probes.clone(), "probes")?;
            let portal = eff.path(&inputs.portal, |c| c.portal.clone(), "portal")?;
            let out = eff.path(&out, |c| c.out.clone(), "out")?;
            match cmd_grace(&probes, &portal, &out, &eff.grace(&tuning))? {
                Some(report) => println!(
                    "grace window: quota zero at {:.3}, throttle onset at {:.3}, G = {:.1} s",
                    report.t_quota_zero.as_secs(),
                    report.t_throttle_onset.as_secs(),
                    report.g_duration_s
                ),
                None => println!("no quota depletion with a subsequent throttle onset found"),
            }
            Ok(())
        }
        Command::Simulate { scenario, out, seed } => {
            let scenario = eff.path(&scenario, |c| c.scenario.clone(), "scenario")?;
            let out = eff.path(&out, |c| c.out.clone(), "out")?;
            let seed = seed.or(eff.base.seed);
            let (scenario, files) = cmd_simulate(&scenario, seed, &out)?;
            println!(
                "simulated {:.1} h (seed {}) into {}:",
                scenario.duration_s / 3600.0,
                scenario.seed,
                out.display()
            );
            for file in files {
                println!("  {} ({} rows)", file.name, file.rows);
            }
            Ok(())
        }
        Command::Report {
            inputs,
            scenario,
            out,
            seed,
            tuning,
        } => {
            let run_cfg = AuditRunConfig {
                telemetry: eff.opt_path(&inputs.telemetry, |c| c.telemetry.clone()),
                probes: eff.opt_path(&inputs.probes, |c| c.probes.clone()),
                portal: eff.opt_path(&inputs.portal, |c| c.portal.clone()),
                scenario: eff.opt_path(&scenario, |c| c.scenario.clone()),
                out: Some(eff.path(&out, |c| c.out.clone(), "out")?),
                label: Some(eff.label(&tuning)),
                feature: Some(eff.feature(&tuning)),
                detector: Some(eff.detector(&tuning)),
                grace: Some(eff.grace(&tuning)),
                seed: seed.or(eff.base.seed),
            };
            let summary = cmd_report(&run_cfg)?;
            print_report(&summary);
            Ok(())
        }
    }
}

fn print_validation(report: &ValidationReport) {
    for stream in &report.streams {
        let span = stream
            .span
            .map(|(a, b)| format!("{a:.3}..{b:.3}"))
            .unwrap_or_else(|| "-".into());
        let cadence = stream
            .median_interval_s
            .map(|c| format!("{c:.3} s"))
            .unwrap_or_else(|| "-".into());
        let nominal = stream
            .nominal_interval_s
            .map(|n| format!(" (nominal {n:.0} s)"))
            .unwrap_or_default();
        let flag = if stream.cadence_flag {
            "  [CADENCE DEVIATES >20% FROM NOMINAL]"
        } else {
            ""
        };
        let resets = if stream.counter_resets > 0 {
            format!(", {} counter reset(s)", stream.counter_resets)
        } else {
            String::new()
        };
        println!(
            "{}: {} records, span {}, cadence {}{}{}{}",
            stream.stream, stream.records, span, cadence, nominal, flag, resets
        );
        for (gap_start, gap_s) in &stream.gaps {
            println!("  gap after {gap_start:.3}: {gap_s:.1} s");
        }
    }
    for (file, count) in &report.rejects {
        println!("{file}: {count} rejected record(s)");
    }
}

fn print_report(summary: &ReportSummary) {
    println!(
        "{} window(s), {} unknown; {} ratio sample(s) aligned ({} zero-goodput, {} out of tolerance)",
        summary.n_windows,
        summary.n_unknown_windows,
        summary.align.aligned,
        summary.align.zero_goodput,
        summary.align.out_of_tolerance
    );
    if let Some(m) = &summary.confusion {
        println!(
            "confusion over labeled windows: {} high/low confusions, {} S1/S3 confusions, {} unknown",
            m.high_low_confusions(),
            m.s1_s3_confusions(),
            m.unknown_predictions()
        );
    }
    if let Some(grace) = &summary.grace {
        println!(
            "grace window: quota zero at {:.3}, onset at {:.3}, G = {:.1} s",
            grace.t_quota_zero.as_secs(),
            grace.t_throttle_onset.as_secs(),
            grace.g_duration_s
        );
    }
    for warning in &summary.warnings {
        println!("warning: {warning}");
    }
    println!("files:");
    for file in &summary.files {
        println!("  {} ({} rows)", file.name, file.rows);
    }
}
