//! Command implementations behind the `coreg` binary. Each command returns a
//! process exit code; errors are mapped onto the stable code table in
//! [`CliError::exit_code`].

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;

use coreg_core::inlet::{serve_inlet, InletConfig, InletError, DEFAULT_PROBE_PERIOD_S};
use coreg_core::pipeline::{self, AnalysisConfig, AnalysisReport, PipelineError};
use coreg_core::sim::{self, SimConfig, SimError};
use coreg_core::stats::Rating;
use coreg_core::xdf::{self, XdfError, BOUNDARY_INTERVAL_S};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const SESSION_FILE: &str = "session.xdf";
pub const TRUTH_FILE: &str = "truth.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const FEATURES_CSV: &str = "features.csv";
pub const SENTENCES_CSV: &str = "sentences.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: XdfError },
    #[error("missing data: {0}")]
    Missing(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 0 success, 1 config, 2 I/O, 3 format, 4 missing data.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Other(_) => 2,
            CliError::Format { .. } => 3,
            CliError::Missing(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InletSettings {
    pub listen: String,
    pub probe_period_s: f64,
    pub boundary_interval_s: f64,
}

impl Default for InletSettings {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7700".into(),
            probe_period_s: DEFAULT_PROBE_PERIOD_S,
            boundary_interval_s: BOUNDARY_INTERVAL_S,
        }
    }
}

/// Every tunable, resolved from defaults, then the config file, then flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub analysis: AnalysisConfig,
    pub inlet: InletSettings,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub listen: Option<String>,
    pub k_sentences: Option<usize>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a partial config document layered over the defaults.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let patch: Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("not valid JSON: {e}")))?;
        if !patch.is_object() {
            return Err(CliError::Config("top level must be an object".into()));
        }
        let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::from_json(&fs::read_to_string(p).map_err(io_err(p))?)?,
            None => Self::default(),
        };
        if let Some(seed) = ov.seed {
            cfg.sim.seed = seed;
            cfg.analysis.stats.seed = seed;
        }
        if let Some(l) = &ov.listen {
            cfg.inlet.listen = l.clone();
        }
        if let Some(k) = ov.k_sentences {
            cfg.analysis.k_sentences = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate().map_err(|e| match e {
            SimError::InvalidConfig { field, reason } => {
                CliError::Config(format!("sim.{field}: {reason}"))
            }
            other => CliError::Config(other.to_string()),
        })?;
        self.analysis
            .validate()
            .map_err(|(f, r)| CliError::Config(format!("analysis.{f}: {r}")))?;
        if !(self.inlet.probe_period_s > 0.0 && self.inlet.boundary_interval_s > 0.0) {
            return Err(CliError::Config(
                "inlet: probe_period_s and boundary_interval_s must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Simulates a session into `out/session.xdf` plus the `out/truth.json` sidecar.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let (rec, truth) = sim::simulate_session(&cfg.sim).map_err(|e| match e {
        SimError::InvalidConfig { .. } => CliError::Config(e.to_string()),
        other => CliError::Other(other.to_string()),
    })?;
    let bytes = xdf::encode_session(&rec).map_err(|e| CliError::Other(e.to_string()))?;
    let path = out.join(SESSION_FILE);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    let tpath = out.join(TRUTH_FILE);
    sim::export_ground_truth(&truth, &tpath).map_err(|e| match e {
        SimError::IoFailure(source) => CliError::Io {
            path: tpath.clone(),
            source,
        },
        other => CliError::Other(other.to_string()),
    })?;
    cfg.write_resolved(out)?;
    log::info!("wrote {} and {}", path.display(), tpath.display());
    Ok(())
}

/// Records connected clients into `out/session.xdf` until `stop` is set.
pub fn cmd_serve(
    cfg: &RunConfig,
    out: &Path,
    stop: std::sync::Arc<std::sync::atomic::AtomicBool>,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let path = out.join(SESSION_FILE);
    let inlet_cfg = InletConfig {
        probe_period_s: cfg.inlet.probe_period_s,
        boundary_interval_s: cfg.inlet.boundary_interval_s,
        output: Some(path.clone()),
    };
    let handle = serve_inlet(&cfg.inlet.listen, inlet_cfg).map_err(|e| match e {
        InletError::BindFailure { .. } => CliError::Config(e.to_string()),
        InletError::Io(source) => CliError::Io {
            path: path.clone(),
            source,
        },
        other => CliError::Other(other.to_string()),
    })?;
    eprintln!("listening on {}", handle.url());
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    let rec = handle
        .shutdown()
        .map_err(|e| CliError::Other(e.to_string()))?;
    eprintln!(
        "recorded {} stream(s) into {}",
        rec.streams.len(),
        path.display()
    );
    Ok(())
}

fn read_xdf(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

/// Renders the per-stream summary table of an XDF file.
pub fn cmd_inspect(path: &Path) -> Result<String, CliError> {
    let bytes = read_xdf(path)?;
    let summary = xdf::inspect(&bytes).map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    let mut s = format!(
        "{:<16} {:<8} {:>9} {:>4} {:>9} {:>11} {:>7}\n",
        "stream", "kind", "rate_hz", "ch", "samples", "duration_s", "probes"
    );
    for st in &summary.streams {
        s += &format!(
            "{:<16} {:<8} {:>9.2} {:>4} {:>9} {:>11.3} {:>7}\n",
            st.stream_id,
            st.kind.as_str(),
            st.nominal_rate_hz,
            st.channel_count,
            st.sample_count,
            st.duration_s,
            st.offset_probe_count
        );
    }
    for w in &summary.warnings {
        s += &format!("warning: {w}\n");
    }
    Ok(s)
}

/// Ratings from a simulator truth sidecar: congruent sentences rate 5, incongruent 1.
pub fn ratings_from_truth(path: &Path) -> Result<Vec<Rating>, CliError> {
    let gt = sim::load_ground_truth(path).map_err(|e| match e {
        SimError::IoFailure(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Config(format!("{}: {other}", path.display())),
    })?;
    Ok(gt
        .sentences
        .iter()
        .filter(|s| s.read)
        .map(|s| Rating {
            sentence_id: s.sentence_id.clone(),
            agreement: if s.congruence == coreg_core::stats::Congruence::Congruent {
                5
            } else {
                1
            },
        })
        .collect())
}

/// Runs the analysis and writes features, tables and both report renderings into `out`.
pub fn cmd_analyze(
    cfg: &RunConfig,
    xdf_path: &Path,
    truth: Option<&Path>,
    out: &Path,
) -> Result<AnalysisReport, CliError> {
    let bytes = read_xdf(xdf_path)?;
    let session = xdf::decode_session(&bytes).map_err(|source| CliError::Format {
        path: xdf_path.to_path_buf(),
        source,
    })?;
    let sidecar = match truth {
        Some(p) => Some(p.to_path_buf()),
        None => Some(xdf_path.with_file_name(TRUTH_FILE)).filter(|p| p.exists()),
    };
    let fallback = match &sidecar {
        Some(p) => Some(ratings_from_truth(p)?),
        None => None,
    };
    let label = sidecar.as_ref().map(|p| {
        format!(
            "truth sidecar {}",
            p.file_name().unwrap_or_default().to_string_lossy()
        )
    });
    let output = pipeline::analyze_session(&session, label.as_deref().zip(fallback), &cfg.analysis)
        .map_err(|e| match e {
            PipelineError::MissingStream(_) | PipelineError::NoRatings => {
                CliError::Missing(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        })?;

    ensure_dir(out)?;
    cfg.write_resolved(out)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write(FEATURES_CSV, pipeline::words_csv(&output.words))?;
    write(SENTENCES_CSV, output.sentence_table.to_csv())?;
    write(
        REPORT_JSON,
        serde_json::to_string_pretty(&output.report).expect("report serializes") + "\n",
    )?;
    write(REPORT_MD, pipeline::report_markdown(&output.report))?;
    for w in &output.report.warnings {
        log::warn!("{w}");
    }
    Ok(output.report)
}

/// Re-renders the Markdown report from `report.json` in a run directory.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let path = if dir.is_dir() {
        dir.join(REPORT_JSON)
    } else {
        dir.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let report: AnalysisReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: not a report: {e}", path.display())))?;
    Ok(pipeline::report_markdown(&report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layered_config_keeps_unset_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"sim":{"duration_s":30},"analysis":{"eeg":{"artifact_threshold_uv":100}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.sim.duration_s, 30.0);
        assert_eq!(cfg.sim.n_sentences, SimConfig::default().n_sentences);
        assert_eq!(cfg.analysis.eeg.artifact_threshold_uv, 100.0);
        assert_eq!(cfg.analysis.eeg.n400_window_ms, (300.0, 500.0));
    }

    #[test]
    fn typos_and_bad_values_are_config_errors() {
        assert_eq!(
            RunConfig::from_json(r#"{"sim":{"durration_s":30}}"#)
                .unwrap_err()
                .exit_code(),
            1
        );
        let mut cfg = RunConfig::default();
        cfg.sim.duration_s = -1.0;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("duration_s"), "{err}");
    }

    #[test]
    fn seed_flag_reaches_both_simulator_and_stats() {
        let cfg = RunConfig::resolve(
            None,
            &Overrides {
                seed: Some(9),
                k_sentences: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            (
                cfg.sim.seed,
                cfg.analysis.stats.seed,
                cfg.analysis.k_sentences
            ),
            (9, 9, 2)
        );
    }
}
