//! Training loop: sequence loss, auxiliary component losses, Adam, and the
//! intervention schedules (warm-up, mixed batches, extra losses).
//!
//! The optimized objective is the mean next-label cross entropy at the `x`
//! positions, optionally plus `lambda` times exactly one auxiliary loss:
//! either per-factor value classification or hidden-factor classification,
//! both attached to the pre-classifier representation. On the
//! sign-of-linear-function task the "weights" auxiliary becomes a linear
//! reconstruction of the input with a mean Euclidean-norm penalty.

use std::time::Instant;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_from_nodes, tokenize_batch, ForwardNodes, ModelConfig, TokenBatch, TransformerWeights,
};
use crate::numerics::{NodeId, Scalar, Tape};
use crate::tasks::{FactorSpec, SequenceSample, SimpleFunctionSample};

/// Abort threshold on the global gradient norm. Crossing it is treated as
/// divergence: the run aborts with an error, never silently clips.
pub const DIVERGENCE_GRAD_NORM: f64 = 100.0;

const SHUFFLE_STREAM: u64 = 0x53_48_55_46;
const AUX_STREAM: u64 = 0x41_55_58;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    /// Fixed mapping until `switch_epoch`, then the full pool.
    WarmUp { switch_epoch: usize },
    /// Strictly alternating fixed/full batches at the given fixed fraction.
    Mixed {
        #[serde(default = "default_ratio")]
        ratio: f64,
    },
    ExtraWeightsLoss,
    ExtraContextLoss,
}

fn default_ratio() -> f64 {
    0.5
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::WarmUp { .. } => "warm_up",
            Strategy::Mixed { .. } => "mixed",
            Strategy::ExtraWeightsLoss => "extra_weights_loss",
            Strategy::ExtraContextLoss => "extra_context_loss",
        }
    }

    fn aux_kind(&self) -> AuxKind {
        match self {
            Strategy::ExtraWeightsLoss => AuxKind::Weights,
            Strategy::ExtraContextLoss => AuxKind::Context,
            _ => AuxKind::None,
        }
    }
}

/// Which auxiliary loss is attached. The combined objective accepts at most
/// one; requesting both is structurally impossible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxKind {
    None,
    Weights,
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub strategy: Strategy,
    /// Overridden by the run-level seed when part of a run config.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    128
}

fn default_lambda() -> f64 {
    0.1
}

fn default_precision() -> Precision {
    Precision::F32
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size and epochs must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if let Strategy::Mixed { ratio } = self.strategy {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::Config(format!("mixed ratio {ratio} outside (0,1)")));
            }
        }
        Ok(())
    }
}

/// Factored-task training data: paired fixed-mapping and full-pool versions
/// of the train split, plus the held-out test split.
#[derive(Debug, Clone)]
pub struct FactoredTask {
    pub spec: FactorSpec,
    pub train_fix: Vec<SequenceSample>,
    pub train_rnd: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

#[derive(Debug, Clone)]
pub struct SimpleFunctionTask {
    pub dimension: usize,
    pub train: Vec<SimpleFunctionSample>,
    pub test: Vec<SimpleFunctionSample>,
}

#[derive(Debug, Clone)]
pub enum TrainTask {
    Factored(FactoredTask),
    SimpleFunction(SimpleFunctionTask),
}

impl TrainTask {
    pub fn n_train(&self) -> usize {
        match self {
            TrainTask::Factored(t) => t.train_rnd.len(),
            TrainTask::SimpleFunction(t) => t.train.len(),
        }
    }

    pub fn seq_len(&self) -> Result<usize> {
        let l = match self {
            TrainTask::Factored(t) => t.train_rnd.first().map(|s| s.len()),
            TrainTask::SimpleFunction(t) => t.train.first().map(|s| s.labels.len()),
        };
        l.ok_or_else(|| Error::Config("empty training set".into()))
    }

    fn validate_strategy(&self, strategy: &Strategy) -> Result<()> {
        if let TrainTask::SimpleFunction(_) = self {
            match strategy {
                Strategy::WarmUp { .. } | Strategy::Mixed { .. } => {
                    return Err(Error::Config(
                        "mapping schedules do not apply to the sign task".into(),
                    ))
                }
                Strategy::ExtraContextLoss => {
                    return Err(Error::Config(
                        "the sign task has no hidden factor to classify".into(),
                    ))
                }
                _ => {}
            }
        }
        if let (TrainTask::Factored(t), true) = (self, matches!(strategy, Strategy::WarmUp { .. } | Strategy::Mixed { .. })) {
            if t.train_fix.len() != t.train_rnd.len() {
                return Err(Error::Config(
                    "warm-up and mixed schedules need paired fixed/full train sets".into(),
                ));
            }
        }
        Ok(())
    }

    /// Tokenizes the training sequences at `idxs`, from the fixed-mapping
    /// set when `fixed` is true and from the full-pool set otherwise.
    pub fn train_batch(&self, idxs: &[usize], fixed: bool) -> Result<TokenBatch> {
        match self {
            TrainTask::Factored(t) => {
                let source = if fixed { &t.train_fix } else { &t.train_rnd };
                let refs: Vec<&SequenceSample> = idxs.iter().map(|&i| &source[i]).collect();
                tokenize_batch(&refs)
            }
            TrainTask::SimpleFunction(t) => {
                sign_batch(&idxs.iter().map(|&i| &t.train[i]).collect::<Vec<_>>())
            }
        }
    }

    fn eval_batches(&self, batch_size: usize) -> Result<Vec<TokenBatch>> {
        let mut out = Vec::new();
        match self {
            TrainTask::Factored(t) => {
                for chunk in t.test.chunks(batch_size) {
                    let refs: Vec<&SequenceSample> = chunk.iter().collect();
                    out.push(tokenize_batch(&refs)?);
                }
            }
            TrainTask::SimpleFunction(t) => {
                for chunk in t.test.chunks(batch_size) {
                    out.push(sign_batch(&chunk.iter().collect::<Vec<_>>())?);
                }
            }
        }
        Ok(out)
    }

    /// Auxiliary head output dimensions for the given kind.
    fn aux_dims(&self, kind: AuxKind) -> Vec<usize> {
        match (self, kind) {
            (_, AuxKind::None) => Vec::new(),
            (TrainTask::Factored(t), AuxKind::Weights) => t.spec.cardinalities.clone(),
            (TrainTask::Factored(t), AuxKind::Context) => vec![t.spec.n_factors()],
            (TrainTask::SimpleFunction(t), AuxKind::Weights) => vec![t.dimension],
            (TrainTask::SimpleFunction(_), AuxKind::Context) => Vec::new(),
        }
    }

    /// Per-head integer targets for a factored batch (per-factor values, or
    /// the hidden factor repeated along the sequence).
    fn aux_targets(&self, idxs: &[usize], fixed: bool, kind: AuxKind) -> Vec<Vec<usize>> {
        match (self, kind) {
            (TrainTask::Factored(t), AuxKind::Weights) => {
                let source = if fixed { &t.train_fix } else { &t.train_rnd };
                let n_e = t.spec.n_factors();
                let mut targets = vec![Vec::new(); n_e];
                for &i in idxs {
                    for values in &source[i].factor_values {
                        for (e, &v) in values.iter().enumerate() {
                            targets[e].push(v);
                        }
                    }
                }
                targets
            }
            (TrainTask::Factored(t), AuxKind::Context) => {
                let source = if fixed { &t.train_fix } else { &t.train_rnd };
                let mut target = Vec::new();
                for &i in idxs {
                    let s = &source[i];
                    target.extend(std::iter::repeat(s.hidden_factor).take(s.len()));
                }
                vec![target]
            }
            _ => Vec::new(),
        }
    }
}

fn sign_batch(samples: &[&SimpleFunctionSample]) -> Result<TokenBatch> {
    crate::model::tokenize_sign_batch(samples)
}

/// Auxiliary head parameters: one linear head per output block, each a
/// `[embed_dim, out]` matrix plus an `[out]` bias, in f64 masters.
#[derive(Debug, Clone)]
pub struct AuxHeads {
    pub kind: AuxKind,
    pub params: Vec<ArrayD<f64>>,
    /// True when the single head is a regression head (sign-task input
    /// reconstruction) rather than a classifier.
    pub regression: bool,
}

impl AuxHeads {
    fn init(task: &TrainTask, kind: AuxKind, embed_dim: usize, seed: u64) -> Result<Self> {
        let dims = task.aux_dims(kind);
        if kind != AuxKind::None && dims.is_empty() {
            return Err(Error::Config("auxiliary loss undefined for this task".into()));
        }
        let mut params = Vec::with_capacity(2 * dims.len());
        for (i, &out) in dims.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(AUX_STREAM + i as u64);
            params.push(ArrayD::from_shape_fn(vec![embed_dim, out].as_slice(), |_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * 0.02
            }));
            params.push(ArrayD::from_elem(vec![out].as_slice(), 0.0));
        }
        let regression =
            matches!(task, TrainTask::SimpleFunction(_)) && kind == AuxKind::Weights;
        Ok(AuxHeads {
            kind,
            params,
            regression,
        })
    }

    fn n_heads(&self) -> usize {
        self.params.len() / 2
    }
}

/// Mean next-label cross entropy at the `x` positions (the sequence loss).
pub fn sequence_loss<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &ForwardNodes,
    targets: &[usize],
) -> Result<NodeId> {
    tape.cross_entropy(nodes.logits, targets)
}

/// Builds the combined loss: sequence loss plus `lambda` times the single
/// auxiliary loss selected by `aux.kind`.
#[allow(clippy::too_many_arguments)]
fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: &ForwardNodes,
    targets: &[usize],
    aux: &AuxHeads,
    aux_param_nodes: &[NodeId],
    aux_targets: &[Vec<usize>],
    recon_targets: Option<NodeId>,
    lambda: f64,
) -> Result<NodeId> {
    let seq = sequence_loss(tape, nodes, targets)?;
    if aux.kind == AuxKind::None {
        return Ok(seq);
    }
    let n_heads = aux.n_heads();
    let mut head_losses = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let w = aux_param_nodes[2 * h];
        let b = aux_param_nodes[2 * h + 1];
        let out = tape.matmul(nodes.final_repr, w)?;
        let out = tape.add_bias(out, b)?;
        let loss = if aux.regression {
            let target = recon_targets
                .ok_or_else(|| Error::Shape("reconstruction targets missing".into()))?;
            let diff = tape.sub(out, target)?;
            let norms = tape.row_l2(diff)?;
            tape.mean_all(norms)
        } else {
            tape.cross_entropy(out, &aux_targets[h])?
        };
        head_losses.push(loss);
    }
    let mut total = head_losses[0];
    for &l in &head_losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean_aux = tape.scale(total, 1.0 / n_heads as f64);
    let scaled = tape.scale(mean_aux, lambda);
    tape.add(seq, scaled)
}

/// Adam with bias correction; state and updates in f64 masters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, params: &[ArrayD<f64>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| ArrayD::zeros(p.shape())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip_update(p, g, m, v, self.beta1, self.beta2, self.lr, self.eps, c1, c2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut ArrayD<f64>,
    g: &ArrayD<f64>,
    m: &mut ArrayD<f64>,
    v: &mut ArrayD<f64>,
    b1: f64,
    b2: f64,
    lr: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
}

/// One line of the metric stream (serialized as JSONL).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_comp_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_comp_score: Option<f64>,
    pub strategy: String,
    pub seed: u64,
    /// Elapsed seconds since training started. Kept out of the serialized
    /// stream so metric files are byte-reproducible across reruns.
    #[serde(skip)]
    pub wall_time_s: f64,
}

pub const METRIC_SCHEMA_VERSION: u32 = 1;

/// Per-epoch callback: receives the metric record and the current weights
/// (e.g. for checkpointing into an archive).
pub trait EpochSink {
    fn on_epoch(&mut self, record: &MetricRecord, weights: &TransformerWeights) -> Result<()>;
}

/// Probe callback signature: `(epoch, weights) -> (weights_score, context_score)`.
pub type ProbeHook<'a> =
    &'a mut dyn FnMut(usize, &TransformerWeights) -> Result<(Option<f64>, Option<f64>)>;

pub struct TrainOutcome {
    pub weights: TransformerWeights,
    pub aux: AuxHeads,
    pub metrics: Vec<MetricRecord>,
}

/// Runs the full training loop. `probe_cadence = 0` disables probing.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    task: &TrainTask,
    probe_cadence: usize,
    mut probe_hook: Option<ProbeHook<'_>>,
    mut sink: Option<&mut dyn EpochSink>,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    model_config.validate()?;
    task.validate_strategy(&train_config.strategy)?;
    let n_train = task.n_train();
    if n_train == 0 {
        return Err(Error::Config("empty training set".into()));
    }

    let mut weights = TransformerWeights::init(model_config, train_config.seed)?;
    let aux_kind = train_config.strategy.aux_kind();
    let mut aux = AuxHeads::init(task, aux_kind, model_config.embed_dim, train_config.seed)?;
    let mut adam = Adam::new(train_config.lr, &all_params(&weights, &aux));

    let eval_batches = task.eval_batches(256.max(train_config.batch_size))?;
    let mut metrics = Vec::with_capacity(train_config.epochs);
    let started = Instant::now();

    for epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        shuffle_rng.set_stream(SHUFFLE_STREAM.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut loss_rows = 0usize;
        for (batch_idx, idxs) in order.chunks(train_config.batch_size).enumerate() {
            let fixed = match train_config.strategy {
                Strategy::Baseline
                | Strategy::ExtraWeightsLoss
                | Strategy::ExtraContextLoss => false,
                Strategy::WarmUp { switch_epoch } => epoch < switch_epoch,
                Strategy::Mixed { ratio } => {
                    // Evenly spread fixed batches at the requested fraction;
                    // at ratio 0.5 this is strict alternation.
                    let f = |i: usize| (i as f64 * ratio).floor();
                    f(batch_idx + 1) > f(batch_idx)
                }
            };
            let batch = task.train_batch(idxs, fixed)?;
            let aux_targets = task.aux_targets(idxs, fixed, aux_kind);
            let rows = batch.payloads.nrows();
            let loss = match train_config.precision {
                Precision::F32 => train_step::<f32>(
                    &mut weights,
                    &mut aux,
                    &mut adam,
                    model_config,
                    train_config,
                    &batch,
                    &aux_targets,
                )?,
                Precision::F64 => train_step::<f64>(
                    &mut weights,
                    &mut aux,
                    &mut adam,
                    model_config,
                    train_config,
                    &batch,
                    &aux_targets,
                )?,
            };
            loss_sum += loss * rows as f64;
            loss_rows += rows;
        }

        let test_accuracy = match train_config.precision {
            Precision::F32 => eval_accuracy::<f32>(&weights, &eval_batches)?,
            Precision::F64 => eval_accuracy::<f64>(&weights, &eval_batches)?,
        };
        let (weights_comp_score, context_comp_score) = match (&mut probe_hook, probe_cadence) {
            (Some(hook), c) if c > 0 && epoch % c == 0 => hook(epoch, &weights)?,
            _ => (None, None),
        };
        let record = MetricRecord {
            schema_version: METRIC_SCHEMA_VERSION,
            epoch,
            train_loss: loss_sum / loss_rows.max(1) as f64,
            test_accuracy,
            weights_comp_score,
            context_comp_score,
            strategy: train_config.strategy.name().to_string(),
            seed: train_config.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(s) = sink.as_deref_mut() {
            s.on_epoch(&record, &weights)?;
        }
        metrics.push(record);
    }

    Ok(TrainOutcome {
        weights,
        aux,
        metrics,
    })
}

fn all_params(weights: &TransformerWeights, aux: &AuxHeads) -> Vec<ArrayD<f64>> {
    weights
        .params
        .iter()
        .chain(aux.params.iter())
        .cloned()
        .collect()
}

fn train_step<T: Scalar>(
    weights: &mut TransformerWeights,
    aux: &mut AuxHeads,
    adam: &mut Adam,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    batch: &TokenBatch,
    aux_targets: &[Vec<usize>],
) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let model_nodes: Vec<NodeId> = weights
        .cast::<T>()
        .into_iter()
        .map(|p| tape.input(p))
        .collect();
    let aux_nodes: Vec<NodeId> = aux
        .params
        .iter()
        .map(|p| tape.input(p.mapv(|v| T::from_f64(v))))
        .collect();
    let nodes = forward_from_nodes(&mut tape, &model_nodes, model_config, batch)?;
    let recon_targets = if aux.regression {
        // Reconstruction targets are the raw payload rows.
        Some(tape.input2(batch.payloads.mapv(|v| T::from_f64(v))))
    } else {
        None
    };
    let loss = combined_loss(
        &mut tape,
        &nodes,
        &batch.targets,
        aux,
        &aux_nodes,
        aux_targets,
        recon_targets,
        train_config.lambda,
    )?;
    let loss_value = tape.value(loss).iter().next().unwrap().to_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss became {loss_value} at step {}",
            adam.t + 1
        )));
    }
    let mut grads = tape.backward(loss)?;
    let mut grad_arrays: Vec<ArrayD<f64>> = Vec::with_capacity(model_nodes.len() + aux_nodes.len());
    for (&id, p) in model_nodes.iter().chain(aux_nodes.iter()).zip(
        weights
            .params
            .iter()
            .chain(aux.params.iter()),
    ) {
        let g = match grads.take(id) {
            Some(g) => g.mapv(|v| v.to_f64()),
            None => ArrayD::zeros(p.shape()),
        };
        grad_arrays.push(g);
    }
    let norm_sq: f64 = grad_arrays
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let grad_norm = norm_sq.sqrt();
    if !grad_norm.is_finite() || grad_norm > DIVERGENCE_GRAD_NORM {
        return Err(Error::NonFinite(format!(
            "global gradient norm {grad_norm:.3e} exceeded the divergence threshold \
             {DIVERGENCE_GRAD_NORM} at step {}; aborting without clipping",
            adam.t + 1
        )));
    }

    let n_model = weights.params.len();
    let mut params = all_params(weights, aux);
    adam.step(&mut params, &grad_arrays);
    for (dst, src) in weights.params.iter_mut().zip(&params[..n_model]) {
        dst.clone_from(src);
    }
    for (dst, src) in aux.params.iter_mut().zip(&params[n_model..]) {
        dst.clone_from(src);
    }
    Ok(loss_value)
}

/// Central-difference check of the full objective — sequence cross-entropy
/// plus the `lambda`-weighted auxiliary loss picked by the strategy — in
/// double precision. Initializes weights and heads from the config seed,
/// takes the first `n_sequences` training sequences as one batch, and
/// sweeps every parameter element.
pub fn objective_grad_check(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    task: &TrainTask,
    n_sequences: usize,
    fd_step: f64,
) -> Result<crate::numerics::GradCheckReport> {
    model_config.validate()?;
    train_config.validate()?;
    task.validate_strategy(&train_config.strategy)?;
    if n_sequences == 0 || n_sequences > task.n_train() {
        return Err(Error::Config(format!(
            "gradient check needs 1..={} sequences",
            task.n_train()
        )));
    }
    let weights = TransformerWeights::init(model_config, train_config.seed)?;
    let aux_kind = train_config.strategy.aux_kind();
    let aux = AuxHeads::init(task, aux_kind, model_config.embed_dim, train_config.seed)?;
    let idxs: Vec<usize> = (0..n_sequences).collect();
    let batch = task.train_batch(&idxs, false)?;
    let aux_targets = task.aux_targets(&idxs, false, aux_kind);
    let n_model = weights.params.len();
    let params = all_params(&weights, &aux);
    crate::numerics::grad_check(
        &params,
        |tape, ids| {
            let nodes = forward_from_nodes(tape, &ids[..n_model], model_config, &batch)?;
            let recon = if aux.regression {
                Some(tape.input2(batch.payloads.clone()))
            } else {
                None
            };
            combined_loss(
                tape,
                &nodes,
                &batch.targets,
                &aux,
                &ids[n_model..],
                &aux_targets,
                recon,
                train_config.lambda,
            )
        },
        fd_step,
    )
}

/// Accuracy of the final-position prediction (prompt with `L-1` context
/// examples) over pre-tokenized evaluation batches.
pub fn eval_accuracy<T: Scalar>(
    weights: &TransformerWeights,
    batches: &[TokenBatch],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in batches {
        let fwd = crate::model::forward::<T>(weights, batch)?;
        let logits = fwd.tape.value(fwd.nodes.logits);
        let l = batch.seq_examples;
        let n_labels = logits.shape()[1];
        for b in 0..batch.batch {
            let row = b * l + (l - 1);
            let mut best = 0usize;
            let mut best_v = logits[[row, 0]];
            for c in 1..n_labels {
                if logits[[row, c]] > best_v {
                    best_v = logits[[row, c]];
                    best = c;
                }
            }
            if best == batch.targets[row] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}
