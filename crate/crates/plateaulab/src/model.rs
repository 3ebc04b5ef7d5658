//! Causal transformer over interleaved example/label tokens.
//!
//! Every in-context episode of length `L` becomes `2L` tokens
//! `[x_1, y_1, ..., x_L, y_L]`: example payloads are projected into the
//! model width, labels come from a learned embedding table. Predictions are
//! read at the `x` positions, so under the causal mask the trailing label
//! token never influences any readout. Blocks are pre-norm with a final
//! layer norm; the forward pass records every per-layer hidden state so
//! probes can attach anywhere.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttnMeta, NodeId, Scalar, Tape};
use crate::tasks::{SequenceSample, SimpleFunctionSample};

/// Attention variant. Trained models use `Softmax`; the exact relaxed
/// variant (`Identity`, raw masked scores) is evaluated by the construction
/// module and rejected here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub max_positions: usize,
    pub label_alphabet_size: usize,
    pub token_input_dim: usize,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    #[serde(default = "default_normalization")]
    pub normalization: bool,
}

fn default_attention() -> AttentionKind {
    AttentionKind::Softmax
}

fn default_normalization() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 {
            return Err(Error::Config("layers, heads and embed_dim must be >= 1".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.label_alphabet_size == 0 || self.token_input_dim == 0 {
            return Err(Error::Config("label alphabet and token input dim must be >= 1".into()));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must cover at least one example".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.embed_dim
    }

    /// Parameter names and shapes in their frozen enumeration order. This
    /// order defines the checkpoint payload layout and the optimizer state
    /// layout.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let mut specs = vec![
            ParamSpec::new("input_proj", &[self.token_input_dim, d]),
            ParamSpec::new("input_bias", &[d]),
            ParamSpec::new("label_embed", &[self.label_alphabet_size, d]),
            ParamSpec::new("positions", &[self.max_positions, d]),
        ];
        for b in 0..self.layers {
            let p = |name: &str, shape: &[usize]| ParamSpec::new(&format!("block{b}.{name}"), shape);
            if self.normalization {
                specs.push(p("ln1_g", &[d]));
                specs.push(p("ln1_b", &[d]));
            }
            specs.push(p("wq", &[d, d]));
            specs.push(p("bq", &[d]));
            specs.push(p("wk", &[d, d]));
            specs.push(p("bk", &[d]));
            specs.push(p("wv", &[d, d]));
            specs.push(p("bv", &[d]));
            specs.push(p("wo", &[d, d]));
            specs.push(p("bo", &[d]));
            if self.normalization {
                specs.push(p("ln2_g", &[d]));
                specs.push(p("ln2_b", &[d]));
            }
            specs.push(p("w1", &[d, h]));
            specs.push(p("b1", &[h]));
            specs.push(p("w2", &[h, d]));
            specs.push(p("b2", &[d]));
        }
        if self.normalization {
            specs.push(ParamSpec::new("final_g", &[d]));
            specs.push(ParamSpec::new("final_b", &[d]));
        }
        specs.push(ParamSpec::new("classifier", &[d, self.label_alphabet_size]));
        specs.push(ParamSpec::new("cls_bias", &[self.label_alphabet_size]));
        specs
    }

    /// Parameter count as an explicit algebraic expression, kept independent
    /// of [`Self::param_specs`] so the two can cross-check each other.
    pub fn count_params_closed_form(&self) -> usize {
        let d = self.embed_dim;
        let nl = self.label_alphabet_size;
        let embed = self.token_input_dim * d + d + nl * d + self.max_positions * d;
        let attn = 4 * d * d + 4 * d;
        let mlp = d * (4 * d) + 4 * d + (4 * d) * d + d;
        let norms_per_block = if self.normalization { 4 * d } else { 0 };
        let blocks = self.layers * (attn + mlp + norms_per_block);
        let final_norm = if self.normalization { 2 * d } else { 0 };
        let head = d * nl + nl;
        embed + blocks + final_norm + head
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn new(name: &str, shape: &[usize]) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
        }
    }
}

/// All trainable parameters, stored as f64 masters in the frozen
/// enumeration order of [`ModelConfig::param_specs`].
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub params: Vec<ArrayD<f64>>,
}

impl TransformerWeights {
    /// Seeded initialization: N(0, 0.02^2) everywhere, except output
    /// projections (`wo`, `w2`) which are shrunk by `1/sqrt(2*layers)`,
    /// biases at zero and norm gains at one. Each parameter draws from its
    /// own rng stream, so values do not shift if an unrelated parameter is
    /// resized.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.attention == AttentionKind::Identity {
            return Err(Error::Config(
                "identity attention is evaluated exactly by the construction module; \
                 trained models use softmax attention"
                    .into(),
            ));
        }
        let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let params = config
            .param_specs()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let base = spec.name.rsplit('.').next().unwrap();
                let std = match base {
                    "wo" | "w2" => 0.02 * residual_scale,
                    "input_bias" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "cls_bias"
                    | "ln1_b" | "ln2_b" | "final_b" => 0.0,
                    "ln1_g" | "ln2_g" | "final_g" => {
                        return ArrayD::from_elem(spec.shape.as_slice(), 1.0)
                    }
                    _ => 0.02,
                };
                ArrayD::from_shape_fn(spec.shape.as_slice(), |_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * std
                })
            })
            .collect();
        Ok(TransformerWeights {
            config: config.clone(),
            params,
        })
    }

    pub fn count_params_enumerated(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Parameter lookup by name (linear scan; for introspection and tests).
    pub fn param(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.config
            .param_specs()
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.params[i])
    }

    pub fn cast<T: Scalar>(&self) -> Vec<ArrayD<T>> {
        self.params
            .iter()
            .map(|p| p.mapv(|v| T::from_f64(v)))
            .collect()
    }
}

/// A flattened batch of interleaved sequences: `batch` sequences of
/// `seq_examples` examples each.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `[batch * seq_examples, token_input_dim]` example payloads.
    pub payloads: Array2<f64>,
    /// Label token ids, one per example (row of `payloads`).
    pub label_ids: Vec<usize>,
    /// Prediction targets at the `x` positions (equal to `label_ids` for
    /// next-label tasks).
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq_examples: usize,
}

impl TokenBatch {
    pub fn from_rows(
        payloads: Array2<f64>,
        labels: Vec<usize>,
        batch: usize,
        seq_examples: usize,
    ) -> Result<Self> {
        if payloads.nrows() != batch * seq_examples || labels.len() != payloads.nrows() {
            return Err(Error::Shape(format!(
                "batch geometry: {} payload rows, {} labels, batch {batch} x {seq_examples}",
                payloads.nrows(),
                labels.len()
            )));
        }
        Ok(TokenBatch {
            payloads,
            targets: labels.clone(),
            label_ids: labels,
            batch,
            seq_examples,
        })
    }

    pub fn n_tokens(&self) -> usize {
        2 * self.seq_examples
    }

    /// Flat row indices of the `x` positions inside the interleaved
    /// `[batch * 2L, d]` token matrix.
    pub fn x_rows(&self) -> Vec<usize> {
        let t = self.n_tokens();
        let mut rows = Vec::with_capacity(self.batch * self.seq_examples);
        for b in 0..self.batch {
            for i in 0..self.seq_examples {
                rows.push(b * t + 2 * i);
            }
        }
        rows
    }
}

/// Interleaves factored-task samples into one batch. All sequences must
/// share a length and payload width.
pub fn tokenize_batch(samples: &[&SequenceSample]) -> Result<TokenBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let l = first.len();
    let d = first.payloads.ncols();
    let mut payloads = Array2::<f64>::zeros((samples.len() * l, d));
    let mut labels = Vec::with_capacity(samples.len() * l);
    for (s_i, s) in samples.iter().enumerate() {
        if s.len() != l || s.payloads.ncols() != d {
            return Err(Error::Shape("ragged batch".into()));
        }
        for i in 0..l {
            for j in 0..d {
                payloads[[s_i * l + i, j]] = s.payloads[[i, j]] as f64;
            }
        }
        labels.extend_from_slice(&s.labels);
    }
    TokenBatch::from_rows(payloads, labels, samples.len(), l)
}

/// Packs sign-task sequences into a token batch; the raw input vector is
/// the token payload and the binary label feeds the label embedding.
pub fn tokenize_sign_batch(samples: &[&SimpleFunctionSample]) -> Result<TokenBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let l = first.labels.len();
    let d = first.xs.ncols();
    let mut payloads = Array2::<f64>::zeros((samples.len() * l, d));
    let mut labels = Vec::with_capacity(samples.len() * l);
    for (s_i, s) in samples.iter().enumerate() {
        if s.labels.len() != l || s.xs.ncols() != d {
            return Err(Error::Shape("ragged batch".into()));
        }
        for i in 0..l {
            for j in 0..d {
                payloads[[s_i * l + i, j]] = s.xs[[i, j]] as f64;
            }
        }
        labels.extend_from_slice(&s.labels);
    }
    TokenBatch::from_rows(payloads, labels, samples.len(), l)
}

/// Node handles of one forward pass.
pub struct ForwardNodes {
    /// `hidden[0]` is the embedding output (the input of block 1);
    /// `hidden[l]` is the output of block `l`, i.e. the input of block
    /// `l+1`. The final entry is after the last block, before the final
    /// norm.
    pub hidden: Vec<NodeId>,
    /// Post-final-norm representation at the `x` positions
    /// (`[batch*L, embed_dim]`): the classifier input.
    pub final_repr: NodeId,
    /// `[batch*L, label_alphabet_size]` logits at the `x` positions.
    pub logits: NodeId,
    pub x_rows: Vec<usize>,
}

/// Builds the forward graph from existing parameter nodes (in
/// `param_specs` order). Exposed separately so gradient checking can drive
/// the same graph from its own inputs.
pub fn forward_from_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[NodeId],
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<ForwardNodes> {
    config.validate()?;
    if config.attention == AttentionKind::Identity {
        return Err(Error::Config(
            "identity attention is evaluated exactly by the construction module".into(),
        ));
    }
    let specs = config.param_specs();
    if params.len() != specs.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter nodes, got {}",
            specs.len(),
            params.len()
        )));
    }
    let t_tokens = batch.n_tokens();
    if t_tokens > config.max_positions {
        return Err(Error::Config(format!(
            "sequence needs {} positions, model has {}",
            t_tokens, config.max_positions
        )));
    }
    if batch.payloads.ncols() != config.token_input_dim {
        return Err(Error::Shape(format!(
            "payload width {} vs token_input_dim {}",
            batch.payloads.ncols(),
            config.token_input_dim
        )));
    }
    if let Some(&bad) = batch.label_ids.iter().find(|&&y| y >= config.label_alphabet_size) {
        return Err(Error::Task(format!(
            "label id {bad} outside alphabet of {}",
            config.label_alphabet_size
        )));
    }

    let mut cursor = params.iter().copied();
    let mut next = || cursor.next().expect("param cursor in sync with specs");
    let input_proj = next();
    let input_bias = next();
    let label_embed = next();
    let positions = next();

    // Embedding: project payloads, look up labels, interleave, add positions.
    let payload_node = tape.input2(batch.payloads.mapv(|v| T::from_f64(v)));
    let x_tok = tape.matmul(payload_node, input_proj)?;
    let x_tok = tape.add_bias(x_tok, input_bias)?;
    let y_tok = tape.embedding(label_embed, &batch.label_ids)?;
    let tokens = tape.interleave_rows(x_tok, y_tok, batch.seq_examples)?;
    let pos_rows: Vec<usize> = (0..t_tokens).collect();
    let pos_slice = tape.gather_rows(positions, &pos_rows)?;
    let mut h = tape.add_position(tokens, pos_slice)?;

    let meta = AttnMeta {
        batch: batch.batch,
        seq: t_tokens,
        heads: config.heads,
        include_self: true,
    };
    let mut hidden = vec![h];
    for _ in 0..config.layers {
        // Attention sublayer.
        let normed = if config.normalization {
            let g = next();
            let b = next();
            tape.layer_norm(h, g, b)?
        } else {
            h
        };
        let q = {
            let w = next();
            let b = next();
            let m = tape.matmul(normed, w)?;
            tape.add_bias(m, b)?
        };
        let k = {
            let w = next();
            let b = next();
            let m = tape.matmul(normed, w)?;
            tape.add_bias(m, b)?
        };
        let v = {
            let w = next();
            let b = next();
            let m = tape.matmul(normed, w)?;
            tape.add_bias(m, b)?
        };
        let att = tape.causal_attention(q, k, v, meta)?;
        let wo = next();
        let bo = next();
        let proj = tape.matmul(att, wo)?;
        let proj = tape.add_bias(proj, bo)?;
        h = tape.add(h, proj)?;

        // MLP sublayer.
        let normed2 = if config.normalization {
            let g = next();
            let b = next();
            tape.layer_norm(h, g, b)?
        } else {
            h
        };
        let w1 = next();
        let b1 = next();
        let w2 = next();
        let b2 = next();
        let m = tape.matmul(normed2, w1)?;
        let m = tape.add_bias(m, b1)?;
        let m = tape.relu(m);
        let m = tape.matmul(m, w2)?;
        let m = tape.add_bias(m, b2)?;
        h = tape.add(h, m)?;
        hidden.push(h);
    }

    let final_h = if config.normalization {
        let g = next();
        let b = next();
        tape.layer_norm(h, g, b)?
    } else {
        h
    };
    let x_rows = batch.x_rows();
    let final_repr = tape.gather_rows(final_h, &x_rows)?;
    let classifier = next();
    let cls_bias = next();
    let logits = tape.matmul(final_repr, classifier)?;
    let logits = tape.add_bias(logits, cls_bias)?;
    debug_assert!(cursor.next().is_none());

    Ok(ForwardNodes {
        hidden,
        final_repr,
        logits,
        x_rows,
    })
}

/// A forward pass with its tape and parameter nodes (for backprop).
pub struct Forward<T: Scalar> {
    pub tape: Tape<T>,
    pub param_nodes: Vec<NodeId>,
    pub nodes: ForwardNodes,
}

pub fn forward<T: Scalar>(weights: &TransformerWeights, batch: &TokenBatch) -> Result<Forward<T>> {
    let mut tape = Tape::<T>::new();
    let param_nodes: Vec<NodeId> = weights
        .cast::<T>()
        .into_iter()
        .map(|p| tape.input(p))
        .collect();
    let nodes = forward_from_nodes(&mut tape, &param_nodes, &weights.config, batch)?;
    Ok(Forward {
        tape,
        param_nodes,
        nodes,
    })
}

/// Materialized forward trace: per-layer hidden states and logits, in f64.
pub struct ForwardTrace {
    /// `hidden[l]` is `[batch * 2L, embed_dim]`; index 0 is the embedding.
    pub hidden: Vec<Array2<f64>>,
    /// `[batch * L, label_alphabet_size]` logits at `x` positions.
    pub logits: Array2<f64>,
    pub batch: usize,
    pub seq_examples: usize,
}

impl ForwardTrace {
    /// Row of `hidden[l]` holding token `t` of sequence `b`.
    pub fn token_row(&self, b: usize, t: usize) -> usize {
        b * 2 * self.seq_examples + t
    }
}

pub fn forward_trace(weights: &TransformerWeights, batch: &TokenBatch) -> Result<ForwardTrace> {
    let fwd = forward::<f64>(weights, batch)?;
    let to2 = |id: NodeId| -> Array2<f64> {
        let v = fwd.tape.value(id);
        let shape = (v.shape()[0], v.shape()[1]);
        Array2::from_shape_vec(shape, v.iter().copied().collect()).expect("2-d node")
    };
    Ok(ForwardTrace {
        hidden: fwd.nodes.hidden.iter().map(|&id| to2(id)).collect(),
        logits: to2(fwd.nodes.logits),
        batch: batch.batch,
        seq_examples: batch.seq_examples,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    kind: String,
    config: ModelConfig,
    seed: u64,
    arrays: Vec<ArrayManifest>,
    payload_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayManifest {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Writes a checkpoint: one JSON header line, then the concatenated
/// little-endian f32 payload in parameter order.
pub fn save_checkpoint<W: Write>(
    out: &mut W,
    weights: &TransformerWeights,
    seed: u64,
) -> Result<()> {
    let specs = weights.config.param_specs();
    let mut arrays = Vec::with_capacity(specs.len());
    let mut offset = 0usize;
    for (spec, param) in specs.iter().zip(&weights.params) {
        arrays.push(ArrayManifest {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            offset,
        });
        offset += 4 * param.len();
    }
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: "checkpoint".into(),
        config: weights.config.clone(),
        seed,
        arrays,
        payload_bytes: offset,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(offset);
    for param in &weights.params {
        for &v in param.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Returns the weights
/// (lifted to f64 masters) and the stored seed.
pub fn load_checkpoint<R: Read>(input: &mut R) -> Result<(TransformerWeights, u64)> {
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        input.read_exact(&mut byte).map_err(Error::Io)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 20 {
            return Err(Error::Format("checkpoint header exceeds 1 MiB".into()));
        }
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint schema {}",
            header.schema_version
        )));
    }
    let mut payload = vec![0u8; header.payload_bytes];
    input.read_exact(&mut payload).map_err(Error::Io)?;
    let specs = header.config.param_specs();
    if specs.len() != header.arrays.len() {
        return Err(Error::Format("array manifest does not match config".into()));
    }
    let mut params = Vec::with_capacity(specs.len());
    for (spec, man) in specs.iter().zip(&header.arrays) {
        if spec.name != man.name || spec.shape != man.shape {
            return Err(Error::Format(format!(
                "array {} {:?} does not match config layout {} {:?}",
                man.name, man.shape, spec.name, spec.shape
            )));
        }
        let n: usize = man.shape.iter().product();
        let end = man.offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Format(format!("array {} overruns payload", man.name)));
        }
        let values: Vec<f64> = payload[man.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.push(
            ArrayD::from_shape_vec(man.shape.as_slice(), values)
                .map_err(|e| Error::Format(format!("array {}: {e}", man.name)))?,
        );
    }
    Ok((
        TransformerWeights {
            config: header.config,
            params,
        },
        header.seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn small_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            embed_dim: 8,
            max_positions: 12,
            label_alphabet_size: 3,
            token_input_dim: 4,
            attention: AttentionKind::Softmax,
            normalization: true,
        }
    }

    fn random_batch(config: &ModelConfig, batch: usize, l: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let payloads = Array2::from_shape_fn((batch * l, config.token_input_dim), |_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g
        });
        let labels: Vec<usize> = (0..batch * l)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..config.label_alphabet_size))
            .collect();
        TokenBatch::from_rows(payloads, labels, batch, l).unwrap()
    }

    #[test]
    fn param_count_closed_form_matches_enumeration() {
        for normalization in [true, false] {
            let mut config = small_config();
            config.normalization = normalization;
            let w = TransformerWeights::init(&config, 3).unwrap();
            assert_eq!(w.count_params_enumerated(), config.count_params_closed_form());
        }
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let config = small_config();
        let a = TransformerWeights::init(&config, 9).unwrap();
        let b = TransformerWeights::init(&config, 9).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x, y);
        }
        let gain = a.param("block0.ln1_g").unwrap();
        assert!(gain.iter().all(|&v| v == 1.0));
        let bias = a.param("block0.bq").unwrap();
        assert!(bias.iter().all(|&v| v == 0.0));
        // Output projections carry the residual shrink factor.
        let wq_std = stat_std(a.param("block0.wq").unwrap());
        let wo_std = stat_std(a.param("block0.wo").unwrap());
        let expect_ratio = 1.0 / (2.0f64 * 2.0).sqrt();
        assert!((wo_std / wq_std - expect_ratio).abs() < 0.25 * expect_ratio);
    }

    fn stat_std(a: &ArrayD<f64>) -> f64 {
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn identity_attention_is_rejected_for_training() {
        let mut config = small_config();
        config.attention = AttentionKind::Identity;
        assert!(matches!(
            TransformerWeights::init(&config, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let config = small_config();
        let w = TransformerWeights::init(&config, 5).unwrap();
        let batch = random_batch(&config, 2, 3, 8);
        let a = forward_trace(&w, &batch).unwrap();
        let b = forward_trace(&w, &batch).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.hidden.len(), config.layers + 1);
        assert_eq!(a.logits.nrows(), 2 * 3);
    }

    #[test]
    fn causality_holds_under_perturbation() {
        let config = small_config();
        let w = TransformerWeights::init(&config, 11).unwrap();
        let l = 4;
        let base = random_batch(&config, 2, l, 21);
        let base_trace = forward_trace(&w, &base).unwrap();

        // Perturb the payload of example 2 in sequence 0 (token index 4).
        let mut bumped = base.clone();
        bumped.payloads[[2, 0]] += 1.0;
        let t = forward_trace(&w, &bumped).unwrap();
        for b in 0..2 {
            for i in 0..l {
                let row = b * l + i;
                let before = base_trace.logits.row(row);
                let after = t.logits.row(row);
                let diff: f64 = before
                    .iter()
                    .zip(after.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                let token_index = 2 * i;
                if b == 1 || token_index < 4 {
                    assert!(diff < 1e-10, "seq {b} x-position {i} changed by {diff}");
                } else if token_index > 4 {
                    assert!(diff > 1e-10, "seq {b} x-position {i} unexpectedly frozen");
                }
            }
        }

        // Perturb the final label token: no x-position readout may move.
        let mut last = base.clone();
        let flip = base.label_ids[l - 1];
        last.label_ids[l - 1] = (flip + 1) % config.label_alphabet_size;
        let t = forward_trace(&w, &last).unwrap();
        for row in 0..2 * l {
            let diff: f64 = base_trace
                .logits
                .row(row)
                .iter()
                .zip(t.logits.row(row).iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if row == l - 1 {
                // Prediction *at* the final x position precedes its label.
                assert!(diff < 1e-10);
            } else {
                assert!(diff < 1e-10);
            }
        }
    }

    /// Recomputes one block by hand from the traced hidden state and checks
    /// it lands on the next traced hidden state: the trace really exposes
    /// layer inputs.
    #[test]
    fn trace_exposes_true_layer_inputs() {
        let config = small_config();
        let w = TransformerWeights::init(&config, 13).unwrap();
        let batch = random_batch(&config, 2, 3, 31);
        let trace = forward_trace(&w, &batch).unwrap();
        for l in 0..config.layers {
            let input = &trace.hidden[l];
            let got = hand_block(&w, l, input, batch.batch, batch.n_tokens());
            let want = &trace.hidden[l + 1];
            let diff = got
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "block {l} recompute off by {diff}");
        }
    }

    fn hand_block(
        w: &TransformerWeights,
        block: usize,
        h: &Array2<f64>,
        batch: usize,
        t: usize,
    ) -> Array2<f64> {
        let d = w.config.embed_dim;
        let heads = w.config.heads;
        let dh = d / heads;
        let p = |name: &str| {
            let a = w.param(&format!("block{block}.{name}")).unwrap();
            a.clone()
        };
        let mat = |a: ArrayD<f64>| {
            let shape = (a.shape()[0], a.shape()[1]);
            Array2::from_shape_vec(shape, a.iter().copied().collect()).unwrap()
        };
        let vec1 = |a: ArrayD<f64>| -> Vec<f64> { a.iter().copied().collect() };
        let ln = |x: &Array2<f64>, g: &[f64], b: &[f64]| -> Array2<f64> {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let mean = row.sum() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + 1e-5).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * rstd * g[j] + b[j];
                }
            }
            out
        };
        let affine = |x: &Array2<f64>, w: &Array2<f64>, b: &[f64]| -> Array2<f64> {
            let mut out = x.dot(w);
            for mut row in out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b[j];
                }
            }
            out
        };
        let n1 = ln(h, &vec1(p("ln1_g")), &vec1(p("ln1_b")));
        let q = affine(&n1, &mat(p("wq")), &vec1(p("bq")));
        let k = affine(&n1, &mat(p("wk")), &vec1(p("bk")));
        let v = affine(&n1, &mat(p("wv")), &vec1(p("bv")));
        let mut att = Array2::<f64>::zeros((h.nrows(), d));
        for b in 0..batch {
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..t {
                    let qi = q.row(b * t + i);
                    let mut scores = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let kj = k.row(b * t + j);
                        let s: f64 = cols
                            .clone()
                            .map(|c| qi[c] * kj[c])
                            .sum::<f64>()
                            / (dh as f64).sqrt();
                        scores.push(s);
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        let vj = v.row(b * t + j);
                        for c in cols.clone() {
                            att[[b * t + i, c]] += e / z * vj[c];
                        }
                    }
                }
            }
        }
        let proj = affine(&att, &mat(p("wo")), &vec1(p("bo")));
        let h1 = h + &proj;
        let n2 = ln(&h1, &vec1(p("ln2_g")), &vec1(p("ln2_b")));
        let mut m = affine(&n2, &mat(p("w1")), &vec1(p("b1")));
        m.mapv_inplace(|v| v.max(0.0));
        let m = affine(&m, &mat(p("w2")), &vec1(p("b2")));
        h1 + &m
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let config = ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 8,
            max_positions: 8,
            label_alphabet_size: 3,
            token_input_dim: 3,
            attention: AttentionKind::Softmax,
            normalization: true,
        };
        let w = TransformerWeights::init(&config, 17).unwrap();
        let batch = random_batch(&config, 1, 2, 3);
        let report = grad_check(
            &w.params,
            |tape, params| {
                let nodes = forward_from_nodes(tape, params, &config, &batch)?;
                tape.cross_entropy(nodes.logits, &batch.targets)
            },
            1e-5,
        )
        .unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {:.3e} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn checkpoint_round_trips() {
        let config = small_config();
        let w = TransformerWeights::init(&config, 23).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &w, 23).unwrap();
        let (loaded, seed) = load_checkpoint(&mut std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(seed, 23);
        assert_eq!(loaded.config, config);
        // A second generation is byte-identical (f32 quantization is
        // idempotent).
        let mut buf2 = Vec::new();
        save_checkpoint(&mut buf2, &loaded, 23).unwrap();
        assert_eq!(buf, buf2);
        // And quantization error is bounded by f32 resolution.
        for (a, b) in w.params.iter().zip(&loaded.params) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= x.abs().max(1.0) * 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_layout() {
        let config = small_config();
        let w = TransformerWeights::init(&config, 1).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &w, 1).unwrap();
        // Corrupt the declared shape of the first array.
        let text_end = buf.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(buf[..text_end].to_vec()).unwrap();
        let bad = header.replacen("[4,8]", "[8,4]", 1);
        let mut corrupted = bad.into_bytes();
        corrupted.push(b'\n');
        corrupted.extend_from_slice(&buf[text_end + 1..]);
        assert!(load_checkpoint(&mut std::io::Cursor::new(&corrupted)).is_err());
    }

    #[test]
    fn oversized_sequences_are_rejected() {
        let config = small_config(); // max_positions = 12
        let w = TransformerWeights::init(&config, 2).unwrap();
        let batch = random_batch(&config, 1, 7, 0); // needs 14 positions
        assert!(matches!(
            forward_trace(&w, &batch),
            Err(Error::Config(_))
        ));
    }
}
