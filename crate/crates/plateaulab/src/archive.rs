//! On-disk run artifacts.
//!
//! A run archive is a directory holding everything needed to re-analyze a
//! training run without re-running it: the config snapshot, the metric
//! stream, checkpoints, probe reports, an environment fingerprint, and the
//! final analysis summary. Every file carries a schema version. Files are
//! written atomically (temp file + rename) except the metric stream, which
//! is an append-only log with one JSON record per line.
//!
//! Checkpoints are indexed by boundary: `epoch_0000` is the initialization
//! and `epoch_000k` the state after `k` completed epochs. Probe report
//! files are always derived from a stored checkpoint (not from in-memory
//! weights), so re-deriving them is byte-stable; training-time probe
//! scores live in the metric stream only.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::RunSummary;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, TransformerWeights};
use crate::probes::ProbeReport;
use crate::training::{EpochSink, MetricRecord, METRIC_SCHEMA_VERSION};

pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ENVIRONMENT_FILE: &str = "environment.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PROBE_DIR: &str = "probes";
/// Sweep outputs, written to the sweep's base directory.
pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";
pub const SWEEP_CSV_FILE: &str = "runs.csv";

/// Build and runtime fingerprint stored alongside each run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub schema_version: u32,
    pub crate_version: String,
    pub build_profile: String,
    pub target_os: String,
    pub target_arch: String,
    /// Whether the parallel feature was compiled in.
    pub parallel: bool,
    /// Numeric precision mode of the run ("f32" or "f64").
    pub precision: String,
}

/// Captures the current build's fingerprint.
pub fn environment_fingerprint(precision: &str) -> Environment {
    Environment {
        schema_version: ARCHIVE_SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        build_profile: if cfg!(debug_assertions) { "debug" } else { "release" }.to_string(),
        target_os: std::env::consts::OS.to_string(),
        target_arch: std::env::consts::ARCH.to_string(),
        parallel: cfg!(feature = "parallel"),
        precision: precision.to_string(),
    }
}

/// Writes `bytes` to `path` atomically via a sibling temp file.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path)?;
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes `value` as JSON and writes it atomically.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes)
}

fn temp_sibling(path: &Path) -> Result<PathBuf> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("path {} has no file name", path.display())))?;
    let mut tmp = name.to_os_string();
    tmp.push(".tmp");
    Ok(path.with_file_name(tmp))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Envelope for the stored run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub schema_version: u32,
    pub run: RunSummary,
}

/// Handle to a run archive directory.
#[derive(Debug, Clone)]
pub struct RunArchive {
    dir: PathBuf,
}

impl RunArchive {
    /// Creates a fresh archive, writing the config snapshot and environment
    /// fingerprint. Refuses a directory that already holds an archive so a
    /// rerun cannot silently mix two metric streams.
    pub fn create<C: Serialize>(dir: &Path, config: &C, env: &Environment) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let config_path = dir.join(CONFIG_FILE);
        if config_path.exists() {
            return Err(Error::Config(format!(
                "output directory {} already contains an archive; choose a fresh directory",
                dir.display()
            )));
        }
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        fs::create_dir_all(dir.join(PROBE_DIR))?;
        write_json_atomic(&config_path, config)?;
        write_json_atomic(&dir.join(ENVIRONMENT_FILE), env)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    /// Opens an existing archive.
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.join(CONFIG_FILE).is_file() {
            return Err(Error::Config(format!(
                "{} is not a run archive (no {CONFIG_FILE})",
                dir.display()
            )));
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// A short name for the run, used as the run id in merged CSV exports.
    pub fn run_id(&self) -> String {
        self.dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.dir.display().to_string())
    }

    pub fn read_config<C: DeserializeOwned>(&self) -> Result<C> {
        read_json(&self.dir.join(CONFIG_FILE))
    }

    pub fn read_environment(&self) -> Result<Environment> {
        read_json(&self.dir.join(ENVIRONMENT_FILE))
    }

    /// Appends one record to the metric stream.
    pub fn append_metric(&self, record: &MetricRecord) -> Result<()> {
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(METRICS_FILE))?;
        let line = serde_json::to_string(record)?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }

    /// Reads the full metric stream, enforcing the schema version per line.
    pub fn read_metrics(&self) -> Result<Vec<MetricRecord>> {
        let path = self.dir.join(METRICS_FILE);
        let file = fs::File::open(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: MetricRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), idx + 1))
            })?;
            if record.schema_version != METRIC_SCHEMA_VERSION {
                return Err(Error::Format(format!(
                    "{}:{}: metric schema {} is not the supported {}",
                    path.display(),
                    idx + 1,
                    record.schema_version,
                    METRIC_SCHEMA_VERSION
                )));
            }
            records.push(record);
        }
        Ok(records)
    }

    fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir
            .join(CHECKPOINT_DIR)
            .join(format!("epoch_{epoch:04}.ckpt"))
    }

    /// Writes the checkpoint for an epoch boundary atomically.
    pub fn write_checkpoint(
        &self,
        epoch: usize,
        weights: &TransformerWeights,
        seed: u64,
    ) -> Result<()> {
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, weights, seed)?;
        write_bytes_atomic(&self.checkpoint_path(epoch), &bytes)
    }

    /// Loads a checkpoint, listing the available boundaries on a miss.
    pub fn load_checkpoint(&self, epoch: usize) -> Result<(TransformerWeights, u64)> {
        let path = self.checkpoint_path(epoch);
        if !path.is_file() {
            return Err(Error::Config(format!(
                "no checkpoint at epoch {epoch}; available: {:?}",
                self.checkpoint_epochs()?
            )));
        }
        let mut file = fs::File::open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        load_checkpoint(&mut bytes.as_slice())
    }

    /// Sorted list of epoch boundaries with a stored checkpoint.
    pub fn checkpoint_epochs(&self) -> Result<Vec<usize>> {
        let dir = self.dir.join(CHECKPOINT_DIR);
        let mut epochs = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(&dir)? {
                let name = entry?.file_name();
                let name = name.to_string_lossy();
                if let Some(num) = name
                    .strip_prefix("epoch_")
                    .and_then(|rest| rest.strip_suffix(".ckpt"))
                {
                    if let Ok(epoch) = num.parse::<usize>() {
                        epochs.push(epoch);
                    }
                }
            }
        }
        epochs.sort_unstable();
        Ok(epochs)
    }

    fn probe_path(&self, epoch: usize, mode: &str) -> PathBuf {
        self.dir
            .join(PROBE_DIR)
            .join(format!("epoch_{epoch:04}.{mode}.json"))
    }

    /// Stores a probe report for an epoch boundary, named by its mode.
    pub fn write_probe_report(&self, epoch: usize, report: &ProbeReport) -> Result<()> {
        write_json_atomic(&self.probe_path(epoch, &report.mode), report)
    }

    pub fn read_probe_report(&self, epoch: usize, mode: &str) -> Result<ProbeReport> {
        read_json(&self.probe_path(epoch, mode))
    }

    pub fn has_probe_report(&self, epoch: usize, mode: &str) -> bool {
        self.probe_path(epoch, mode).is_file()
    }

    pub fn write_summary(&self, run: &RunSummary) -> Result<()> {
        let file = SummaryFile {
            schema_version: ARCHIVE_SCHEMA_VERSION,
            run: run.clone(),
        };
        write_json_atomic(&self.dir.join(SUMMARY_FILE), &file)
    }

    pub fn read_summary(&self) -> Result<RunSummary> {
        let file: SummaryFile = read_json(&self.dir.join(SUMMARY_FILE))?;
        if file.schema_version != ARCHIVE_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "summary schema {} is not the supported {ARCHIVE_SCHEMA_VERSION}",
                file.schema_version
            )));
        }
        Ok(file.run)
    }
}

/// Epoch callback wiring a training run into an archive: every record is
/// appended to the metric stream, and checkpoints are written at the
/// configured cadence (plus always at the final boundary).
pub struct ArchiveSink<'a> {
    archive: &'a RunArchive,
    /// Keep the checkpoint after every `every`-th epoch boundary.
    every: usize,
    total_epochs: usize,
    seed: u64,
    completed: usize,
}

impl<'a> ArchiveSink<'a> {
    pub fn new(archive: &'a RunArchive, every: usize, total_epochs: usize, seed: u64) -> Self {
        Self {
            archive,
            every: every.max(1),
            total_epochs,
            seed,
            completed: 0,
        }
    }

    /// Epochs fully recorded so far.
    pub fn completed(&self) -> usize {
        self.completed
    }
}

impl EpochSink for ArchiveSink<'_> {
    fn on_epoch(&mut self, record: &MetricRecord, weights: &TransformerWeights) -> Result<()> {
        self.archive.append_metric(record)?;
        let boundary = record.epoch + 1;
        if boundary % self.every == 0 || boundary == self.total_epochs {
            self.archive.write_checkpoint(boundary, weights, self.seed)?;
        }
        self.completed = self.completed.max(boundary);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::Transition;
    use crate::model::{AttentionKind, ModelConfig};

    fn tiny_weights(seed: u64) -> TransformerWeights {
        let config = ModelConfig {
            layers: 1,
            heads: 1,
            embed_dim: 8,
            max_positions: 4,
            label_alphabet_size: 3,
            token_input_dim: 5,
            attention: AttentionKind::Softmax,
            normalization: true,
        };
        TransformerWeights::init(&config, seed).unwrap()
    }

    fn record(epoch: usize) -> MetricRecord {
        MetricRecord {
            schema_version: METRIC_SCHEMA_VERSION,
            epoch,
            train_loss: 1.0 / (epoch + 1) as f64,
            test_accuracy: 0.5,
            weights_comp_score: None,
            context_comp_score: None,
            strategy: "baseline".into(),
            seed: 1,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn create_open_round_trip_and_clobber_guard() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let env = environment_fingerprint("f64");
        let archive =
            RunArchive::create(&dir, &serde_json::json!({"seed": 1}), &env).unwrap();
        assert_eq!(archive.run_id(), "run");
        let back: serde_json::Value = archive.read_config().unwrap();
        assert_eq!(back["seed"], 1);
        assert_eq!(archive.read_environment().unwrap(), env);
        // A second create on the same directory must refuse.
        let again = RunArchive::create(&dir, &serde_json::json!({}), &env);
        assert!(matches!(again, Err(Error::Config(_))));
        assert!(RunArchive::open(&dir).is_ok());
        assert!(RunArchive::open(&dir.join("missing")).is_err());
    }

    #[test]
    fn metric_stream_appends_and_validates_schema() {
        let tmp = tempfile::tempdir().unwrap();
        let archive = RunArchive::create(
            &tmp.path().join("run"),
            &serde_json::json!({}),
            &environment_fingerprint("f32"),
        )
        .unwrap();
        for epoch in 0..3 {
            archive.append_metric(&record(epoch)).unwrap();
        }
        let metrics = archive.read_metrics().unwrap();
        assert_eq!(metrics.len(), 3);
        assert_eq!(metrics[2].epoch, 2);
        // A line from a future schema is rejected with its location.
        let path = archive.dir().join(METRICS_FILE);
        let mut raw = fs::read_to_string(&path).unwrap();
        raw.push_str(&serde_json::to_string(&MetricRecord {
            schema_version: 99,
            ..record(3)
        })
        .unwrap());
        raw.push('\n');
        fs::write(&path, raw).unwrap();
        match archive.read_metrics() {
            Err(Error::Format(msg)) => assert!(msg.contains(":4:"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoints_round_trip_and_list_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        let archive = RunArchive::create(
            &tmp.path().join("run"),
            &serde_json::json!({}),
            &environment_fingerprint("f64"),
        )
        .unwrap();
        let weights = tiny_weights(3);
        archive.write_checkpoint(0, &weights, 3).unwrap();
        archive.write_checkpoint(10, &weights, 3).unwrap();
        archive.write_checkpoint(2, &weights, 3).unwrap();
        assert_eq!(archive.checkpoint_epochs().unwrap(), vec![0, 2, 10]);
        let (loaded, seed) = archive.load_checkpoint(10).unwrap();
        assert_eq!(seed, 3);
        assert_eq!(loaded.config, weights.config);
        // Missing boundary names the available ones.
        match archive.load_checkpoint(5) {
            Err(Error::Config(msg)) => assert!(msg.contains("[0, 2, 10]"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn sink_checkpoints_at_cadence_and_final_boundary() {
        let tmp = tempfile::tempdir().unwrap();
        let archive = RunArchive::create(
            &tmp.path().join("run"),
            &serde_json::json!({}),
            &environment_fingerprint("f64"),
        )
        .unwrap();
        let weights = tiny_weights(5);
        let mut sink = ArchiveSink::new(&archive, 3, 7, 5);
        for epoch in 0..7 {
            sink.on_epoch(&record(epoch), &weights).unwrap();
        }
        assert_eq!(sink.completed(), 7);
        // Boundaries 3 and 6 by cadence, 7 as the final state.
        assert_eq!(archive.checkpoint_epochs().unwrap(), vec![3, 6, 7]);
        assert_eq!(archive.read_metrics().unwrap().len(), 7);
    }

    #[test]
    fn summary_and_probe_reports_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let archive = RunArchive::create(
            &tmp.path().join("run"),
            &serde_json::json!({}),
            &environment_fingerprint("f64"),
        )
        .unwrap();
        let summary = RunSummary {
            entropy: 1.5,
            seed: 9,
            transition: Transition {
                epoch: Some(4),
                plateau_length: 4,
                censored: false,
                threshold: 0.32,
            },
            final_accuracy: 0.9,
            final_weights_score: Some(0.7),
            final_context_score: None,
            dysfunction: Some(false),
        };
        archive.write_summary(&summary).unwrap();
        assert_eq!(archive.read_summary().unwrap(), summary);
        let report = ProbeReport {
            schema_version: 1,
            mode: "weights".into(),
            per_layer_scores: vec![0.3, 0.6],
            best_layer: 1,
            score: 0.6,
            n_eval: 100,
            seed: 9,
        };
        archive.write_probe_report(0, &report).unwrap();
        assert!(archive.has_probe_report(0, "weights"));
        assert!(!archive.has_probe_report(0, "context"));
        assert_eq!(archive.read_probe_report(0, "weights").unwrap(), report);
        // Idempotent rewrite produces identical bytes.
        let path = archive.dir().join(PROBE_DIR).join("epoch_0000.weights.json");
        let first = fs::read(&path).unwrap();
        archive.write_probe_report(0, &report).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }
}
