//! Run orchestration: config files, archived training runs, pool-size
//! sweeps, post-hoc probing, metric export and re-analysis.
//!
//! A run is described by a [`RunConfig`] (JSON on disk), executed by
//! [`run_with_config`] into a [`RunArchive`], and summarized into the
//! archive's `summary.json`. Every random choice is drawn from a stream
//! of the run seed, one stream id per purpose, so reruns of the same
//! config are byte-identical and later commands (`probe`, `analyze`) can
//! regenerate the exact datasets from the stored config alone.
//!
//! Command entry points (`cmd_*`) return rich results and leave process
//! exit codes to the binary: config and schema problems map to 2,
//! runtime failures to 3, and a sweep with recorded per-run failures
//! reports them so the binary can exit with 4.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    detect_transition, dysfunction_flag, run_csv_row, sweep_summary, transition_threshold,
    RunSummary, SweepSummary, RUN_CSV_HEADER,
};
use crate::archive::{
    environment_fingerprint, write_json_atomic, ArchiveSink, RunArchive, SWEEP_CSV_FILE,
    SWEEP_REPORT_FILE,
};
use crate::construction::{verify_report, ConstructVerifyReport, ConstructionSpec};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, ModelConfig, TransformerWeights};
use crate::probes::{
    context_probe_report, reconstruction_mse_at_layer, weights_probe_report, ProbeReport,
    PROBE_SCHEMA_VERSION,
};
use crate::tasks::{
    entropy, gen_factored_sequence, gen_simple_function_sequence, split_dataset, FactorSpec,
    FrozenEncoder, MappingPool, SequenceSample, SequenceSetting, SimpleFunctionSample,
    SimpleFunctionSpec, SplitSet,
};
use crate::training::{
    train, Precision, ProbeHook, SimpleFunctionTask, TrainConfig, TrainOutcome, TrainTask,
};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment override for the run seed; applies after `--set` overrides.
pub const ENV_SEED: &str = "PLATEAULAB_SEED";
/// Environment override for the output directory.
pub const ENV_OUT: &str = "PLATEAULAB_OUT";

// Stream ids carving one run seed into independent generators.
const SPLIT_STREAM: u64 = 0x53_50_4C_54;
const POOL_STREAM: u64 = 0x50_4F_4F_4C;
const DATA_STREAM: u64 = 0x44_41_54_41;
const PROBE_DATA_STREAM: u64 = 0x50_44_41_54;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Factored hidden-factor task block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactoredBlock {
    pub n_factors: usize,
    pub n_values: usize,
    /// Label alphabet size; defaults to `n_values`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_alphabet_size: Option<usize>,
    /// Context examples per sequence (the prompt adds one more position).
    pub seq_len: usize,
    /// Mapping-pool size; 1 reproduces the fixed-mapping regime.
    pub pool_k: usize,
    #[serde(default = "default_train_sequences")]
    pub train_sequences: usize,
    #[serde(default = "default_test_sequences")]
    pub test_sequences: usize,
    /// Share of factor combinations placed in the train split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Width of the frozen value encoding.
    #[serde(default = "default_d_tok")]
    pub d_tok: usize,
}

fn default_train_sequences() -> usize {
    20_000
}

fn default_test_sequences() -> usize {
    2_000
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_d_tok() -> usize {
    16
}

impl FactoredBlock {
    pub fn alphabet(&self) -> usize {
        self.label_alphabet_size.unwrap_or(self.n_values)
    }

    fn validate(&self) -> Result<()> {
        if self.n_factors == 0 || self.n_values < 2 {
            return Err(Error::Config(
                "factored task needs n_factors >= 1 and n_values >= 2".into(),
            ));
        }
        if self.alphabet() < self.n_values {
            return Err(Error::Config(format!(
                "label alphabet {} cannot injectively host {} values",
                self.alphabet(),
                self.n_values
            )));
        }
        if self.seq_len == 0 || self.pool_k == 0 {
            return Err(Error::Config("seq_len and pool_k must be >= 1".into()));
        }
        if self.train_sequences == 0 || self.test_sequences == 0 {
            return Err(Error::Config("sequence counts must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0,1)",
                self.train_fraction
            )));
        }
        if self.d_tok == 0 {
            return Err(Error::Config("d_tok must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear sign task block (`y = sign(w . x)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimpleFunctionBlock {
    pub dimension: usize,
    pub seq_len: usize,
    #[serde(default = "default_train_sequences")]
    pub train_sequences: usize,
    #[serde(default = "default_test_sequences")]
    pub test_sequences: usize,
}

impl SimpleFunctionBlock {
    fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.seq_len == 0 {
            return Err(Error::Config(
                "simple_function task needs dimension >= 1 and seq_len >= 1".into(),
            ));
        }
        if self.train_sequences == 0 || self.test_sequences == 0 {
            return Err(Error::Config("sequence counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Word-selection toy task block. Sequences can be generated and exported,
/// but the task has no tokenizer, so training and probing reject it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordSelectionBlock {
    pub vocabulary: usize,
    pub n_options: usize,
    pub context_examples: usize,
}

impl WordSelectionBlock {
    fn validate(&self) -> Result<()> {
        if self.vocabulary < 2 || self.n_options < 2 || self.context_examples == 0 {
            return Err(Error::Config(
                "word_selection needs vocabulary >= 2, n_options >= 2, context_examples >= 1"
                    .into(),
            ));
        }
        if self.n_options > self.vocabulary {
            return Err(Error::Config(format!(
                "n_options {} exceeds vocabulary {}",
                self.n_options, self.vocabulary
            )));
        }
        Ok(())
    }
}

/// Which data the run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskBlock {
    Factored(FactoredBlock),
    SimpleFunction(SimpleFunctionBlock),
    WordSelection(WordSelectionBlock),
}

/// Model shape; positions and input width are derived from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    #[serde(default = "default_normalization")]
    pub normalization: bool,
}

fn default_normalization() -> bool {
    true
}

/// Probe settings: `cadence = 0` disables training-time probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    #[serde(default)]
    pub cadence: usize,
    #[serde(default = "default_probe_train")]
    pub train_samples: usize,
    #[serde(default = "default_probe_eval")]
    pub eval_samples: usize,
}

fn default_probe_train() -> usize {
    1024
}

fn default_probe_eval() -> usize {
    256
}

impl Default for ProbeBlock {
    fn default() -> Self {
        ProbeBlock {
            cadence: 0,
            train_samples: default_probe_train(),
            eval_samples: default_probe_eval(),
        }
    }
}

/// Transition-detection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    /// Accuracy threshold override; default chance + 0.07.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Moving-average window for the accuracy curve; 1 = raw.
    #[serde(default = "default_smooth_window")]
    pub smooth_window: usize,
}

fn default_smooth_window() -> usize {
    1
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        AnalysisBlock {
            threshold: None,
            smooth_window: default_smooth_window(),
        }
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_schema")]
    pub schema_version: u32,
    pub task: TaskBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    /// Master seed; overrides `train.seed` and feeds every data stream.
    pub seed: u64,
    pub output_dir: String,
    /// Keep a checkpoint after every k-th epoch (the final one is always
    /// kept, and the initialization is stored as boundary 0).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_run_schema() -> u32 {
    RUN_CONFIG_SCHEMA_VERSION
}

fn default_checkpoint_every() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "run config schema {} is not the supported {RUN_CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        match &self.task {
            TaskBlock::Factored(b) => b.validate()?,
            TaskBlock::SimpleFunction(b) => b.validate()?,
            TaskBlock::WordSelection(b) => b.validate()?,
        }
        if self.model.layers == 0 || self.model.heads == 0 || self.model.embed_dim == 0 {
            return Err(Error::Config(
                "model needs layers, heads and embed_dim >= 1".into(),
            ));
        }
        self.train.validate()?;
        if self.analysis.smooth_window == 0 {
            return Err(Error::Config("smooth_window must be >= 1".into()));
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Label alphabet size the trained head predicts over.
    pub fn label_alphabet(&self) -> Result<usize> {
        match &self.task {
            TaskBlock::Factored(b) => Ok(b.alphabet()),
            TaskBlock::SimpleFunction(_) => Ok(2),
            TaskBlock::WordSelection(_) => Err(word_selection_unsupported()),
        }
    }
}

fn word_selection_unsupported() -> Error {
    Error::Config(
        "word-selection sequences are generate-only; training and probing support the \
         factored and simple_function tasks"
            .into(),
    )
}

/// Applies `path=value` assignments to the raw config document. Paths are
/// dot-separated; values parse as JSON, falling back to plain strings.
/// Missing intermediate objects are created (so optional blocks can be set
/// wholesale); a typo still fails later with the full field path when the
/// typed schema rejects it.
pub fn apply_overrides(value: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    for set in sets {
        let (path, raw) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {set:?} is not of the form path=value")))?;
        let segments: Vec<&str> = path.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("override path {path:?} has an empty segment")));
        }
        let mut cursor = &mut *value;
        for seg in &segments[..segments.len() - 1] {
            let map = cursor.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override path `{path}`: `{seg}` is not inside an object"))
            })?;
            cursor = map
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path `{path}` does not end inside an object"))
        })?;
        let parsed = serde_json::from_str(raw.trim())
            .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        map.insert(segments[segments.len() - 1].to_string(), parsed);
    }
    Ok(())
}

/// Parses a config document, applying `--set` overrides and then the two
/// supported environment overrides (seed and output directory) read through
/// `env`. Field-level schema violations name the offending path.
pub fn parse_run_config_with<F>(raw: &str, sets: &[String], env: F) -> Result<RunConfig>
where
    F: Fn(&str) -> Option<String>,
{
    let mut value: serde_json::Value = serde_json::from_str(raw)?;
    apply_overrides(&mut value, sets)?;
    let mut cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        Error::Config(format!("config field `{}`: {}", e.path(), e.inner()))
    })?;
    if let Some(s) = env(ENV_SEED) {
        cfg.seed = s.trim().parse().map_err(|_| {
            Error::Config(format!("{ENV_SEED} must be an unsigned integer, got {s:?}"))
        })?;
    }
    if let Some(dir) = env(ENV_OUT) {
        cfg.output_dir = dir;
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a run config from disk with overrides and process environment.
pub fn load_run_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config_with(&raw, sets, |name| std::env::var(name).ok())
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// Deterministic factored-task machinery shared by training, probing and
/// re-analysis: spec, mapping pool, frozen encoder and the combination split.
pub struct FactoredContext {
    pub spec: FactorSpec,
    pub pool: MappingPool,
    pub encoder: FrozenEncoder,
    pub train_dom: SplitSet,
    pub test_dom: SplitSet,
    pub entropy: f64,
}

/// Rebuilds the factored context from a config; `None` for other tasks.
pub fn factored_context(cfg: &RunConfig) -> Result<Option<FactoredContext>> {
    let TaskBlock::Factored(b) = &cfg.task else {
        return Ok(None);
    };
    let mut spec = FactorSpec::uniform(b.n_factors, b.n_values);
    spec.label_alphabet_size = b.alphabet();
    spec.validate()?;
    let (train_dom, test_dom) =
        split_dataset(&spec, b.train_fraction, &mut stream_rng(cfg.seed, SPLIT_STREAM))?;
    let pool = MappingPool::sample(&spec, b.pool_k, &mut stream_rng(cfg.seed, POOL_STREAM))?;
    let h = entropy(&pool)?;
    let encoder = FrozenEncoder::new(&spec, b.d_tok, cfg.seed)?;
    Ok(Some(FactoredContext {
        spec,
        pool,
        encoder,
        train_dom,
        test_dom,
        entropy: h,
    }))
}

fn gen_factored_set(
    ctx: &FactoredContext,
    setting: SequenceSetting,
    l: usize,
    domain: &SplitSet,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SequenceSample>> {
    (0..count)
        .map(|_| gen_factored_sequence(&ctx.spec, &ctx.pool, setting, l, &ctx.encoder, domain, rng))
        .collect()
}

/// Generates an accuracy-evaluation set, resampling any sequence whose final
/// value combination already appears among its own context examples. At desk
/// scale the value domain is small enough that such repeats occur a few
/// percent of the time, and a model can score them by verbatim copying
/// rather than by inferring the hidden factor, which lifts the whole
/// accuracy curve a few points above chance. Training data is left exactly
/// as generated; only the measurement set is filtered.
fn gen_factored_eval_set(
    ctx: &FactoredContext,
    l: usize,
    domain: &SplitSet,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SequenceSample>> {
    const MAX_ATTEMPTS: usize = 1_000;
    (0..count)
        .map(|_| {
            for _ in 0..MAX_ATTEMPTS {
                let s = gen_factored_sequence(
                    &ctx.spec,
                    &ctx.pool,
                    SequenceSetting::Rnd,
                    l,
                    &ctx.encoder,
                    domain,
                    rng,
                )?;
                let (prompt, context) = s.factor_values.split_last().expect("nonempty sequence");
                if !context.contains(prompt) {
                    return Ok(s);
                }
            }
            Err(Error::Task(format!(
                "could not draw a repeat-free evaluation sequence of length {l} from a domain \
                 of {} combinations",
                domain.codes.len()
            )))
        })
        .collect()
}

fn gen_sign_sets(
    block: &SimpleFunctionBlock,
    n_train: usize,
    n_test: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<SimpleFunctionSample>, Vec<SimpleFunctionSample>)> {
    let spec = SimpleFunctionSpec {
        dimension: block.dimension,
        seq_len: block.seq_len,
    };
    let mut rng = stream_rng(seed, stream);
    let train: Result<Vec<_>> = (0..n_train)
        .map(|_| gen_simple_function_sequence(&spec, &mut rng))
        .collect();
    let test: Result<Vec<_>> = (0..n_test)
        .map(|_| gen_simple_function_sequence(&spec, &mut rng))
        .collect();
    Ok((train?, test?))
}

/// Materializes the training datasets named by the config.
pub fn build_train_task(cfg: &RunConfig, ctx: Option<&FactoredContext>) -> Result<TrainTask> {
    match &cfg.task {
        TaskBlock::Factored(b) => {
            let ctx = ctx.ok_or_else(|| {
                Error::Config("factored task needs its generation context".into())
            })?;
            let mut rng = stream_rng(cfg.seed, DATA_STREAM);
            let train_fix = gen_factored_set(
                ctx,
                SequenceSetting::Fix,
                b.seq_len,
                &ctx.train_dom,
                b.train_sequences,
                &mut rng,
            )?;
            let train_rnd = gen_factored_set(
                ctx,
                SequenceSetting::Rnd,
                b.seq_len,
                &ctx.train_dom,
                b.train_sequences,
                &mut rng,
            )?;
            let test = gen_factored_eval_set(
                ctx,
                b.seq_len,
                &ctx.test_dom,
                b.test_sequences,
                &mut rng,
            )?;
            Ok(TrainTask::Factored(crate::training::FactoredTask {
                spec: ctx.spec.clone(),
                train_fix,
                train_rnd,
                test,
            }))
        }
        TaskBlock::SimpleFunction(b) => {
            let (train, test) =
                gen_sign_sets(b, b.train_sequences, b.test_sequences, cfg.seed, DATA_STREAM)?;
            Ok(TrainTask::SimpleFunction(SimpleFunctionTask {
                dimension: b.dimension,
                train,
                test,
            }))
        }
        TaskBlock::WordSelection(_) => Err(word_selection_unsupported()),
    }
}

/// Probe datasets for the factored task: context-free single-example
/// sequences for value decoding, full-length varied-mapping sequences for
/// hidden-factor decoding. Drawn from their own stream so probing never
/// perturbs training data.
pub struct ProbeData {
    pub spec: FactorSpec,
    pub w_train: Vec<SequenceSample>,
    pub w_test: Vec<SequenceSample>,
    pub c_train: Vec<SequenceSample>,
    pub c_test: Vec<SequenceSample>,
    pub has_context: bool,
}

/// Builds factored probe datasets; `None` for tasks probed differently.
pub fn build_probe_data(cfg: &RunConfig, ctx: Option<&FactoredContext>) -> Result<Option<ProbeData>> {
    let TaskBlock::Factored(b) = &cfg.task else {
        return Ok(None);
    };
    let ctx = ctx
        .ok_or_else(|| Error::Config("factored task needs its generation context".into()))?;
    let mut rng = stream_rng(cfg.seed, PROBE_DATA_STREAM);
    let w_train = gen_factored_set(
        ctx,
        SequenceSetting::Fix,
        1,
        &ctx.train_dom,
        cfg.probe.train_samples,
        &mut rng,
    )?;
    let w_test = gen_factored_set(
        ctx,
        SequenceSetting::Fix,
        1,
        &ctx.test_dom,
        cfg.probe.eval_samples,
        &mut rng,
    )?;
    let has_context = ctx.spec.n_factors() >= 2;
    let (c_train, c_test) = if has_context {
        (
            gen_factored_set(
                ctx,
                SequenceSetting::Rnd,
                b.seq_len,
                &ctx.train_dom,
                cfg.probe.train_samples,
                &mut rng,
            )?,
            gen_factored_set(
                ctx,
                SequenceSetting::Rnd,
                b.seq_len,
                &ctx.test_dom,
                cfg.probe.eval_samples,
                &mut rng,
            )?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Some(ProbeData {
        spec: ctx.spec.clone(),
        w_train,
        w_test,
        c_train,
        c_test,
        has_context,
    }))
}

fn probe_reports_for(
    weights: &TransformerWeights,
    data: &ProbeData,
    seed: u64,
) -> Result<Vec<ProbeReport>> {
    let mut reports = vec![weights_probe_report(
        weights,
        &data.w_train,
        &data.w_test,
        &data.spec,
        seed,
        false,
    )?];
    if data.has_context {
        reports.push(context_probe_report(
            weights,
            &data.c_train,
            &data.c_test,
            &data.spec,
            seed,
            false,
        )?);
    }
    Ok(reports)
}

/// Derives the full model configuration from the run config.
pub fn build_model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let (max_positions, label_alphabet_size, token_input_dim) = match &cfg.task {
        TaskBlock::Factored(b) => (2 * b.seq_len, b.alphabet(), b.d_tok),
        TaskBlock::SimpleFunction(b) => (2 * b.seq_len, 2, b.dimension),
        TaskBlock::WordSelection(_) => return Err(word_selection_unsupported()),
    };
    let model = ModelConfig {
        layers: cfg.model.layers,
        heads: cfg.model.heads,
        embed_dim: cfg.model.embed_dim,
        max_positions,
        label_alphabet_size,
        token_input_dim,
        attention: AttentionKind::Softmax,
        normalization: cfg.model.normalization,
    };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Training command
// ---------------------------------------------------------------------------

/// A finished training run: its archive, summary and in-memory outcome.
pub struct TrainedRun {
    pub archive: RunArchive,
    pub summary: RunSummary,
    pub outcome: TrainOutcome,
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

/// Builds the run summary from the metric stream, the initialization probe
/// baseline and the sampling entropy. Shared by training and `analyze` so
/// both derive byte-identical summaries.
fn summarize(
    cfg: &RunConfig,
    metrics: &[crate::training::MetricRecord],
    init_weights_score: Option<f64>,
    entropy_nats: f64,
) -> Result<RunSummary> {
    let threshold = transition_threshold(cfg.label_alphabet()?, cfg.analysis.threshold)?;
    let curve: Vec<f64> = metrics.iter().map(|m| m.test_accuracy).collect();
    let transition = detect_transition(&curve, threshold, cfg.analysis.smooth_window)?;
    let final_weights_score = metrics.iter().rev().find_map(|m| m.weights_comp_score);
    let final_context_score = metrics.iter().rev().find_map(|m| m.context_comp_score);
    let dysfunction = match (final_weights_score, init_weights_score) {
        (Some(fin), Some(init)) => Some(dysfunction_flag(fin, init)),
        _ => None,
    };
    Ok(RunSummary {
        entropy: entropy_nats,
        seed: cfg.seed,
        transition,
        final_accuracy: metrics.last().map(|m| m.test_accuracy).unwrap_or(0.0),
        final_weights_score,
        final_context_score,
        dysfunction,
    })
}

/// Runs one training run into a fresh archive: config snapshot, environment
/// fingerprint, per-epoch metrics, checkpoints at the configured cadence,
/// initialization probe reports, and the summary.
pub fn run_with_config(cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let model_config = build_model_config(cfg)?;
    let mut train_config = cfg.train.clone();
    train_config.seed = cfg.seed;
    let ctx = factored_context(cfg)?;
    let task = build_train_task(cfg, ctx.as_ref())?;
    let probe_data = if cfg.probe.cadence > 0 {
        build_probe_data(cfg, ctx.as_ref())?
    } else {
        None
    };

    let env = environment_fingerprint(precision_name(train_config.precision));
    let archive = RunArchive::create(Path::new(&cfg.output_dir), cfg, &env)?;

    // Boundary 0: store the initialization, then reload it so the archived
    // probe baseline is computed from exactly what the archive holds.
    let init = TransformerWeights::init(&model_config, cfg.seed)?;
    archive.write_checkpoint(0, &init, cfg.seed)?;
    let mut init_weights_score = None;
    if let Some(data) = &probe_data {
        let (stored_init, _) = archive.load_checkpoint(0)?;
        let reports = probe_reports_for(&stored_init, data, cfg.seed)?;
        for report in &reports {
            archive.write_probe_report(0, report)?;
        }
        init_weights_score = reports.iter().find(|r| r.mode == "weights").map(|r| r.score);
    }

    let seed = cfg.seed;
    let mut hook_fn;
    let hook: Option<ProbeHook<'_>> = match &probe_data {
        Some(data) => {
            hook_fn = |_epoch: usize, weights: &TransformerWeights| {
                let reports = probe_reports_for(weights, data, seed)?;
                let w = reports.iter().find(|r| r.mode == "weights").map(|r| r.score);
                let c = reports.iter().find(|r| r.mode == "context").map(|r| r.score);
                Ok((w, c))
            };
            Some(&mut hook_fn)
        }
        None => None,
    };

    let mut sink = ArchiveSink::new(&archive, cfg.checkpoint_every, train_config.epochs, seed);
    let outcome = train(
        &model_config,
        &train_config,
        &task,
        cfg.probe.cadence,
        hook,
        Some(&mut sink),
    )
    .map_err(|e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!(
            "{msg}; archive keeps the {} completed epochs",
            sink.completed()
        )),
        other => other,
    })?;

    let entropy_nats = ctx.as_ref().map(|c| c.entropy).unwrap_or(0.0);
    let summary = summarize(cfg, &outcome.metrics, init_weights_score, entropy_nats)?;
    archive.write_summary(&summary)?;
    Ok(TrainedRun {
        archive,
        summary,
        outcome,
    })
}

/// `train` command: load a config (with overrides) and run it.
pub fn cmd_train(config_path: &Path, sets: &[String]) -> Result<TrainedRun> {
    let cfg = load_run_config(config_path, sets)?;
    run_with_config(&cfg)
}

// ---------------------------------------------------------------------------
// Sweep command
// ---------------------------------------------------------------------------

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

/// One grid cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunRecord {
    pub pool_k: usize,
    pub seed: u64,
    pub output_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    /// Failure message when the run did not finish; the sweep continues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Sweep outcome written to `sweep_report.json` in the base directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub pool_ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRunRecord>,
    /// Aggregate over entropy levels; present once the grid holds at least
    /// three levels with three finished runs each.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SweepSummary>,
    pub failed: usize,
}

pub struct SweepOutcome {
    pub report: SweepReport,
    pub report_path: PathBuf,
    pub csv_path: PathBuf,
}

fn sweep_run_dir(base: &str, pool_k: usize, seed: u64) -> String {
    Path::new(base)
        .join(format!("k{pool_k:04}_seed{seed:04}"))
        .to_string_lossy()
        .into_owned()
}

fn derive_sweep_config(base: &RunConfig, pool_k: usize, seed: u64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let TaskBlock::Factored(b) = &mut cfg.task else {
        return Err(Error::Config(
            "sweeps vary the mapping-pool size, which only the factored task has".into(),
        ));
    };
    b.pool_k = pool_k;
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.output_dir = sweep_run_dir(&base.output_dir, pool_k, seed);
    Ok(cfg)
}

/// Runs `f(i)` for each job index on up to `workers` threads. Without the
/// `parallel` feature jobs run sequentially and `workers` is ignored.
#[cfg(feature = "parallel")]
fn run_jobs<T: Send, F: Fn(usize) -> T + Sync>(n: usize, workers: usize, f: F) -> Vec<T> {
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| crate::par::par_map(n, &f));
        }
    }
    (0..n).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<T: Send, F: Fn(usize) -> T + Sync>(n: usize, _workers: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// `sweep` command: a pool-size x seed grid of runs under one base
/// directory. Individual failures are recorded and the grid continues; the
/// caller signals partial failure through the exit code when `failed > 0`.
pub fn cmd_sweep(
    config_path: &Path,
    sets: &[String],
    pool_ks: &[usize],
    seeds: &[u64],
    workers: usize,
) -> Result<SweepOutcome> {
    let base = load_run_config(config_path, sets)?;
    if !matches!(base.task, TaskBlock::Factored(_)) {
        return Err(Error::Config(
            "sweeps vary the mapping-pool size, which only the factored task has".into(),
        ));
    }
    let mut ks: Vec<usize> = Vec::new();
    for &k in pool_ks {
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    if ks.len() < 2 {
        return Err(Error::Config(
            "a sweep needs at least two distinct pool sizes".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let unique_seeds: HashSet<u64> = seeds.iter().copied().collect();
    if unique_seeds.len() != seeds.len() {
        return Err(Error::Config("sweep seeds must be distinct".into()));
    }
    let base_dir = PathBuf::from(&base.output_dir);
    fs::create_dir_all(&base_dir)?;

    let jobs: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let records = run_jobs(jobs.len(), workers, |i| {
        let (k, s) = jobs[i];
        match derive_sweep_config(&base, k, s).and_then(|cfg| run_with_config(&cfg)) {
            Ok(run) => SweepRunRecord {
                pool_k: k,
                seed: s,
                output_dir: run.archive.dir().display().to_string(),
                summary: Some(run.summary),
                error: None,
            },
            Err(e) => SweepRunRecord {
                pool_k: k,
                seed: s,
                output_dir: sweep_run_dir(&base.output_dir, k, s),
                summary: None,
                error: Some(e.to_string()),
            },
        }
    });

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let summaries: Vec<RunSummary> = records
        .iter()
        .filter_map(|r| r.summary.clone())
        .collect();
    let aggregate = aggregate_summary(&summaries)?;

    let report = SweepReport {
        schema_version: SWEEP_SCHEMA_VERSION,
        pool_ks: ks,
        seeds: seeds.to_vec(),
        runs: records,
        summary: aggregate,
        failed,
    };
    let report_path = base_dir.join(SWEEP_REPORT_FILE);
    write_json_atomic(&report_path, &report)?;
    let csv_path = base_dir.join(SWEEP_CSV_FILE);
    crate::archive::write_bytes_atomic(&csv_path, summaries_csv(&summaries).as_bytes())?;
    Ok(SweepOutcome {
        report,
        report_path,
        csv_path,
    })
}

/// Aggregates once the grid is deep enough (>= 3 entropy levels with >= 3
/// finished runs each); smaller grids report per-run rows only.
fn aggregate_summary(summaries: &[RunSummary]) -> Result<Option<SweepSummary>> {
    let mut by_level: BTreeMap<u64, usize> = BTreeMap::new();
    for s in summaries {
        *by_level.entry(s.entropy.to_bits()).or_insert(0) += 1;
    }
    if by_level.len() >= 3 && by_level.values().all(|&n| n >= 3) {
        Ok(Some(sweep_summary(summaries)?))
    } else {
        Ok(None)
    }
}

fn summaries_csv(summaries: &[RunSummary]) -> String {
    let mut csv = String::from(RUN_CSV_HEADER);
    csv.push('\n');
    for s in summaries {
        csv.push_str(&run_csv_row(s));
        csv.push('\n');
    }
    csv
}

// ---------------------------------------------------------------------------
// Probe command
// ---------------------------------------------------------------------------

/// `probe` command: load a stored checkpoint and write probe reports for
/// that boundary. Factored runs get weights and context reports; sign runs
/// get a per-layer input-reconstruction report. Reports are derived from
/// the stored checkpoint and the config's own data streams, so reruns are
/// byte-identical.
pub fn cmd_probe(archive_dir: &Path, epoch: usize) -> Result<Vec<ProbeReport>> {
    let archive = RunArchive::open(archive_dir)?;
    let cfg: RunConfig = archive.read_config()?;
    cfg.validate()?;
    let (weights, _) = archive.load_checkpoint(epoch)?;
    let reports = match &cfg.task {
        TaskBlock::Factored(_) => {
            let ctx = factored_context(&cfg)?;
            let data = build_probe_data(&cfg, ctx.as_ref())?
                .ok_or_else(|| Error::Config("factored probe data unavailable".into()))?;
            probe_reports_for(&weights, &data, cfg.seed)?
        }
        TaskBlock::SimpleFunction(b) => {
            let (train, test) = gen_sign_sets(
                b,
                cfg.probe.train_samples,
                cfg.probe.eval_samples,
                cfg.seed,
                PROBE_DATA_STREAM,
            )?;
            let mut per_layer = Vec::with_capacity(cfg.model.layers + 1);
            for layer in 0..=cfg.model.layers {
                per_layer.push(reconstruction_mse_at_layer(&weights, &train, &test, layer)?);
            }
            let mut best = 0;
            for (i, &v) in per_layer.iter().enumerate() {
                if v < per_layer[best] {
                    best = i;
                }
            }
            vec![ProbeReport {
                schema_version: PROBE_SCHEMA_VERSION,
                mode: "reconstruction".into(),
                score: per_layer[best],
                best_layer: best,
                per_layer_scores: per_layer,
                n_eval: test.len(),
                seed: cfg.seed,
            }]
        }
        TaskBlock::WordSelection(_) => return Err(word_selection_unsupported()),
    };
    for report in &reports {
        archive.write_probe_report(epoch, report)?;
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Construction verifier command
// ---------------------------------------------------------------------------

/// `construct-verify` command: build the report for a factored shape and
/// optionally write it. The caller exits nonzero when `pass` is false.
pub fn cmd_construct_verify(
    n_factors: usize,
    n_values: usize,
    i_max: usize,
    samples: usize,
    equivalence_sequences: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<ConstructVerifyReport> {
    let spec = ConstructionSpec::new(n_factors, n_values, i_max + 1);
    let report = verify_report(&spec, i_max, samples, equivalence_sequences, seed)?;
    if let Some(path) = out {
        write_json_atomic(path, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Export command
// ---------------------------------------------------------------------------

pub const EXPORT_CSV_HEADER: &str =
    "run,schema_version,epoch,train_loss,test_accuracy,weights_comp_score,context_comp_score,strategy,seed";

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt_float(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// `export-csv` command: flatten the metric streams of one or more archives
/// into a single CSV document with stable columns. Floats are printed with
/// round-trip precision; absent probe scores become empty cells. Run ids
/// are directory basenames, widened to full paths when basenames collide.
pub fn cmd_export_csv(archive_dirs: &[PathBuf]) -> Result<String> {
    let archives: Vec<RunArchive> = archive_dirs
        .iter()
        .map(|d| RunArchive::open(d))
        .collect::<Result<_>>()?;
    let short: Vec<String> = archives.iter().map(|a| a.run_id()).collect();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for id in &short {
        *seen.entry(id.as_str()).or_insert(0) += 1;
    }
    let ids: Vec<String> = archives
        .iter()
        .zip(&short)
        .map(|(a, id)| {
            if seen[id.as_str()] > 1 {
                a.dir().display().to_string()
            } else {
                id.clone()
            }
        })
        .collect();

    let mut csv = String::from(EXPORT_CSV_HEADER);
    csv.push('\n');
    for (archive, id) in archives.iter().zip(&ids) {
        for m in archive.read_metrics()? {
            csv.push_str(&format!(
                "{},{},{},{:?},{:?},{},{},{},{}\n",
                csv_field(id),
                m.schema_version,
                m.epoch,
                m.train_loss,
                m.test_accuracy,
                opt_float(m.weights_comp_score),
                opt_float(m.context_comp_score),
                csv_field(&m.strategy),
                m.seed
            ));
        }
    }
    Ok(csv)
}

// ---------------------------------------------------------------------------
// Analyze command
// ---------------------------------------------------------------------------

/// Re-derived summaries for a set of archives.
pub struct AnalyzeReport {
    /// `(run id, summary)` in input order.
    pub summaries: Vec<(String, RunSummary)>,
    /// Aggregate when the runs form a deep-enough entropy grid.
    pub aggregate: Option<SweepSummary>,
    /// Per-run summary rows.
    pub csv: String,
}

/// `analyze` command: recompute each archive's summary from its stored
/// metric stream, config and initialization probe report, rewrite
/// `summary.json`, and aggregate across runs when the grid allows. Running
/// it after `train` reproduces the training-time summary byte for byte.
pub fn cmd_analyze(archive_dirs: &[PathBuf]) -> Result<AnalyzeReport> {
    let mut summaries = Vec::with_capacity(archive_dirs.len());
    for dir in archive_dirs {
        let archive = RunArchive::open(dir)?;
        let cfg: RunConfig = archive.read_config()?;
        cfg.validate()?;
        let metrics = archive.read_metrics()?;
        let init_weights_score = if archive.has_probe_report(0, "weights") {
            Some(archive.read_probe_report(0, "weights")?.score)
        } else {
            None
        };
        let entropy_nats = match factored_context(&cfg)? {
            Some(ctx) => ctx.entropy,
            None => 0.0,
        };
        let summary = summarize(&cfg, &metrics, init_weights_score, entropy_nats)?;
        archive.write_summary(&summary)?;
        summaries.push((archive.run_id(), summary));
    }
    let runs: Vec<RunSummary> = summaries.iter().map(|(_, s)| s.clone()).collect();
    let aggregate = aggregate_summary(&runs)?;
    let csv = summaries_csv(&runs);
    Ok(AnalyzeReport {
        summaries,
        aggregate,
        csv,
    })
}
