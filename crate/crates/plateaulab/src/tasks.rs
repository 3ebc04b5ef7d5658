//! Synthetic task generators.
//!
//! Three families: the factored hidden-factor task (the main object of
//! study), sign-of-linear-function sequences, and a word-selection toy. The
//! factored family is controlled by a pool of label mappings whose selection
//! entropy sets task complexity, and ships with an exact Bayes oracle for
//! small pools.

use std::io::{BufRead, Write};

use base64::Engine;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Factor structure of the factored task: per-factor value-set sizes and the
/// size of the shared label alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    /// One entry per factor: the number of values that factor can take.
    pub cardinalities: Vec<usize>,
    pub label_alphabet_size: usize,
}

impl FactorSpec {
    /// Uniform spec: `n_factors` factors of `n_values` values each, labels
    /// drawn from an alphabet of the same size as one factor.
    pub fn uniform(n_factors: usize, n_values: usize) -> Self {
        FactorSpec {
            cardinalities: vec![n_values; n_factors],
            label_alphabet_size: n_values,
        }
    }

    /// Default desk-scale spec: 4 factors x 5 values.
    pub fn desk_default() -> Self {
        Self::uniform(4, 5)
    }

    /// The Shapes3D-like reference spec (6 ground-truth factors).
    pub fn shapes3d_like() -> Self {
        FactorSpec {
            cardinalities: vec![10, 10, 10, 8, 4, 15],
            label_alphabet_size: 15,
        }
    }

    pub fn n_factors(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() {
            return Err(Error::Config("factor spec needs at least one factor".into()));
        }
        if let Some(&bad) = self.cardinalities.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!(
                "every factor needs at least 2 values, got {bad}"
            )));
        }
        let max_card = *self.cardinalities.iter().max().unwrap();
        if self.label_alphabet_size < max_card {
            return Err(Error::Config(format!(
                "label alphabet {} smaller than largest factor cardinality {max_card}",
                self.label_alphabet_size
            )));
        }
        Ok(())
    }

    /// Number of distinct factor-value combinations.
    pub fn combination_count(&self) -> Result<u64> {
        let mut n: u64 = 1;
        for &c in &self.cardinalities {
            n = n
                .checked_mul(c as u64)
                .ok_or_else(|| Error::Config("combination space overflows u64".into()))?;
        }
        Ok(n)
    }

    /// Mixed-radix code of one combination (factor 0 is the least
    /// significant digit).
    pub fn encode_combination(&self, values: &[usize]) -> u64 {
        debug_assert_eq!(values.len(), self.n_factors());
        let mut code: u64 = 0;
        for (v, c) in values.iter().zip(&self.cardinalities).rev() {
            code = code * *c as u64 + *v as u64;
        }
        code
    }

    pub fn decode_combination(&self, mut code: u64) -> Vec<usize> {
        let mut values = Vec::with_capacity(self.n_factors());
        for &c in &self.cardinalities {
            values.push((code % c as u64) as usize);
            code /= c as u64;
        }
        values
    }

    /// Dimension of the concatenated one-hot encoding of a combination.
    pub fn one_hot_dim(&self) -> usize {
        self.cardinalities.iter().sum()
    }
}

/// A pool of label mappings: for each factor, `k` injective maps from that
/// factor's values into the label alphabet, plus the selection distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingPool {
    /// `maps[factor][mapping_id][value] -> label`.
    pub maps: Vec<Vec<Vec<usize>>>,
    /// Selection probabilities over mapping ids (shared across factors).
    pub probs: Vec<f64>,
}

impl MappingPool {
    /// Samples `k` distinct injective maps per factor, uniform selection.
    pub fn sample(spec: &FactorSpec, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if k == 0 {
            return Err(Error::Config("mapping pool needs k >= 1".into()));
        }
        let a = spec.label_alphabet_size;
        let mut maps = Vec::with_capacity(spec.n_factors());
        for &card in &spec.cardinalities {
            // Count of injections V_e -> labels: a!/(a-card)!.
            let mut injections: u128 = 1;
            for i in 0..card {
                injections = injections.saturating_mul((a - i) as u128);
            }
            if (k as u128) > injections {
                return Err(Error::Config(format!(
                    "k={k} exceeds the {injections} distinct injective maps for a factor \
                     with {card} values into {a} labels"
                )));
            }
            let mut factor_maps: Vec<Vec<usize>> = Vec::with_capacity(k);
            while factor_maps.len() < k {
                let m = sample_injection(card, a, rng);
                if !factor_maps.contains(&m) {
                    factor_maps.push(m);
                }
            }
            maps.push(factor_maps);
        }
        Ok(MappingPool {
            maps,
            probs: vec![1.0 / k as f64; k],
        })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn validate(&self, spec: &FactorSpec) -> Result<()> {
        if self.probs.is_empty() || self.maps.len() != spec.n_factors() {
            return Err(Error::Config("mapping pool shape mismatch".into()));
        }
        let psum: f64 = self.probs.iter().sum();
        if (psum - 1.0).abs() > 1e-9 || self.probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("mapping probabilities must form a distribution".into()));
        }
        for (maps_e, &card) in self.maps.iter().zip(&spec.cardinalities) {
            if maps_e.len() != self.k() {
                return Err(Error::Config("per-factor map count differs from k".into()));
            }
            for m in maps_e {
                if m.len() != card {
                    return Err(Error::Config("mapping arity differs from factor cardinality".into()));
                }
                if m.iter().any(|&l| l >= spec.label_alphabet_size) {
                    return Err(Error::Config("mapping target outside label alphabet".into()));
                }
                let mut seen = vec![false; spec.label_alphabet_size];
                for &l in m {
                    if seen[l] {
                        return Err(Error::Config("mapping is not injective".into()));
                    }
                    seen[l] = true;
                }
            }
        }
        Ok(())
    }
}

fn sample_injection(card: usize, alphabet: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // Partial Fisher-Yates over the alphabet: first `card` entries of a
    // random permutation.
    let mut pool: Vec<usize> = (0..alphabet).collect();
    for i in 0..card {
        let j = rng.gen_range(i..alphabet);
        pool.swap(i, j);
    }
    pool.truncate(card);
    pool
}

/// Entropy (nats) of the pool's selection distribution.
pub fn entropy(pool: &MappingPool) -> Result<f64> {
    if pool.probs.is_empty() {
        return Err(Error::Config("entropy of an empty pool".into()));
    }
    Ok(pool
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum())
}

/// Config-level data setting for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSetting {
    /// Single mapping (the pool's entry 0) with probability 1.
    Fix,
    /// Uniform over the full pool.
    Rnd,
    /// Alternating batches: `ratio` of the data from the fixed mapping.
    Mix {
        #[serde(default = "default_mix_ratio")]
        ratio: f64,
    },
    /// Fixed mapping until `switch_epoch`, uniform afterwards.
    FixThenRnd { switch_epoch: usize },
}

fn default_mix_ratio() -> f64 {
    0.5
}

impl DataSetting {
    pub fn validate(&self) -> Result<()> {
        if let DataSetting::Mix { ratio } = self {
            if !(*ratio > 0.0 && *ratio < 1.0) {
                return Err(Error::Config(format!("mix ratio {ratio} outside (0,1)")));
            }
        }
        Ok(())
    }
}

/// Per-sequence resolution of a [`DataSetting`]: by generation time every
/// sequence is either fixed-mapping or random-mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceSetting {
    Fix,
    Rnd,
}

/// Which side of the factor-combination split a sequence draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One side of an 80/20-style partition of the combination space.
#[derive(Debug, Clone)]
pub struct SplitSet {
    /// Sorted combination codes belonging to this side.
    pub codes: Vec<u64>,
    pub split: Split,
}

impl SplitSet {
    pub fn contains(&self, code: u64) -> bool {
        self.codes.binary_search(&code).is_ok()
    }
}

/// Partitions the factor-combination space; no combination appears on both
/// sides.
pub fn split_dataset(
    spec: &FactorSpec,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(SplitSet, SplitSet)> {
    spec.validate()?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0,1)")));
    }
    let n = spec.combination_count()?;
    if n > 4_000_000 {
        return Err(Error::Config(format!(
            "combination space of {n} is too large to enumerate for splitting"
        )));
    }
    let n_train = (fraction * n as f64).round() as u64;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "combination space of {n} is too small to split at fraction {fraction}"
        )));
    }
    let mut codes: Vec<u64> = (0..n).collect();
    // Fisher-Yates with the run rng; deterministic per seed.
    for i in (1..codes.len()).rev() {
        let j = rng.gen_range(0..=i);
        codes.swap(i, j);
    }
    let mut train: Vec<u64> = codes[..n_train as usize].to_vec();
    let mut test: Vec<u64> = codes[n_train as usize..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        SplitSet {
            codes: train,
            split: Split::Train,
        },
        SplitSet {
            codes: test,
            split: Split::Test,
        },
    ))
}

/// Frozen random encoder standing in for a pretrained image encoder: a
/// seeded two-layer tanh map from concatenated factor one-hots to a real
/// token vector. Never trained.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    w1: Array2<f64>,
    b1: Vec<f64>,
    w2: Array2<f64>,
    b2: Vec<f64>,
    pub d_tok: usize,
    offsets: Vec<usize>,
}

impl FrozenEncoder {
    pub fn new(spec: &FactorSpec, d_tok: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if d_tok == 0 {
            return Err(Error::Config("encoder output dimension must be >= 1".into()));
        }
        let input_dim = spec.one_hot_dim();
        let hidden = 4 * input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xE6C0DE);
        fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
            Array2::from_shape_fn((rows, cols), |_| {
                let g: f64 = StandardNormal.sample(rng);
                g * scale
            })
        }
        fn gauss_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(rng);
                    g * scale
                })
                .collect()
        }
        let w1 = gauss(&mut rng, input_dim, hidden, 1.0 / (input_dim as f64).sqrt());
        let b1 = gauss_vec(&mut rng, hidden, 0.1);
        let w2 = gauss(&mut rng, hidden, d_tok, 1.0 / (hidden as f64).sqrt());
        let b2 = gauss_vec(&mut rng, d_tok, 0.1);
        let mut offsets = Vec::with_capacity(spec.n_factors());
        let mut at = 0;
        for &c in &spec.cardinalities {
            offsets.push(at);
            at += c;
        }
        Ok(FrozenEncoder {
            w1,
            b1,
            w2,
            b2,
            d_tok,
            offsets,
        })
    }

    /// Encodes one factor combination to a token payload (quantized to f32
    /// once, so files and in-memory data agree bit-for-bit).
    pub fn encode(&self, values: &[usize]) -> Vec<f32> {
        debug_assert_eq!(values.len(), self.offsets.len());
        let hidden = self.w1.ncols();
        let mut h = self.b1.clone();
        // One-hot input: only |E| rows of w1 contribute.
        for (f, &v) in values.iter().enumerate() {
            let row = self.w1.row(self.offsets[f] + v);
            for (hj, &wj) in h.iter_mut().zip(row.iter()) {
                *hj += wj;
            }
        }
        for hj in h.iter_mut() {
            *hj = hj.tanh();
        }
        let mut out = self.b2.clone();
        for j in 0..hidden {
            let row = self.w2.row(j);
            let hj = h[j];
            for (oj, &wj) in out.iter_mut().zip(row.iter()) {
                *oj += hj * wj;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Verifies injectivity over the combination space: exhaustive pairwise
    /// distance check up to 4000 combinations; beyond that, an exact
    /// duplicate scan plus a pairwise check of a 4000-combination subsample.
    pub fn verify_injectivity(&self, spec: &FactorSpec) -> Result<f64> {
        let n = spec.combination_count()?;
        let exhaustive_cap: u64 = 4000;
        let codes: Vec<u64> = if n <= exhaustive_cap {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x1A7EC7);
            let mut picked: Vec<u64> = (0..exhaustive_cap)
                .map(|_| rng.gen_range(0..n))
                .collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let encs: Vec<Vec<f32>> = codes
            .iter()
            .map(|&c| self.encode(&spec.decode_combination(c)))
            .collect();
        if n > exhaustive_cap {
            // Exact duplicate scan over the full space via sorted bit
            // patterns.
            let mut keys: Vec<Vec<u32>> = (0..n)
                .map(|c| {
                    self.encode(&spec.decode_combination(c))
                        .iter()
                        .map(|v| v.to_bits())
                        .collect()
                })
                .collect();
            keys.sort_unstable();
            for w in keys.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::Injectivity(
                        "two factor combinations encode to identical payloads".into(),
                    ));
                }
            }
        }
        let mut min_dist = f64::INFINITY;
        for i in 0..encs.len() {
            for j in (i + 1)..encs.len() {
                let d2: f64 = encs[i]
                    .iter()
                    .zip(&encs[j])
                    .map(|(a, b)| {
                        let d = (*a - *b) as f64;
                        d * d
                    })
                    .sum();
                let d = d2.sqrt();
                if d < min_dist {
                    min_dist = d;
                }
            }
        }
        if min_dist <= 1e-6 {
            return Err(Error::Injectivity(format!(
                "minimum pairwise payload distance {min_dist:.3e} <= 1e-6"
            )));
        }
        Ok(min_dist)
    }
}

/// One in-context episode of the factored task. The last example is the
/// prompt; everything before it is context.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    /// `factor_values[i][e]` = value of factor `e` in example `i`.
    pub factor_values: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub hidden_factor: usize,
    pub mapping_id: usize,
    /// Encoder payloads, one row per example.
    pub payloads: Array2<f32>,
    pub split: Split,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Generates one sequence: hidden factor uniform, mapping per the resolved
/// setting, examples drawn uniformly from the split's combinations.
#[allow(clippy::too_many_arguments)]
pub fn gen_factored_sequence(
    spec: &FactorSpec,
    pool: &MappingPool,
    setting: SequenceSetting,
    l: usize,
    encoder: &FrozenEncoder,
    domain: &SplitSet,
    rng: &mut ChaCha8Rng,
) -> Result<SequenceSample> {
    if l == 0 {
        return Err(Error::Config("sequence length must be >= 1".into()));
    }
    if domain.codes.is_empty() {
        return Err(Error::Task("empty combination domain".into()));
    }
    let hidden_factor = rng.gen_range(0..spec.n_factors());
    let mapping_id = match setting {
        SequenceSetting::Fix => 0,
        SequenceSetting::Rnd => sample_index(&pool.probs, rng),
    };
    let mut factor_values = Vec::with_capacity(l);
    let mut labels = Vec::with_capacity(l);
    let mut payloads = Array2::<f32>::zeros((l, encoder.d_tok));
    for i in 0..l {
        let code = domain.codes[rng.gen_range(0..domain.codes.len())];
        let values = spec.decode_combination(code);
        let y = pool.maps[hidden_factor][mapping_id][values[hidden_factor]];
        let enc = encoder.encode(&values);
        for (j, &v) in enc.iter().enumerate() {
            payloads[[i, j]] = v;
        }
        factor_values.push(values);
        labels.push(y);
    }
    Ok(SequenceSample {
        factor_values,
        labels,
        hidden_factor,
        mapping_id,
        payloads,
        split: domain.split,
    })
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact Bayes posterior over the prompt label, by enumerating the
/// `(mapping, hidden factor)` pairs consistent with the context. Computed by
/// the factored-posterior chain P(m | s_c) -> P(e | s_c, m) -> P(y | v_p, m, e);
/// tests compare it against direct joint enumeration.
pub fn conditional_label_distribution(
    prompt_values: &[usize],
    context: &[(Vec<usize>, usize)],
    spec: &FactorSpec,
    pool: &MappingPool,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let n_e = spec.n_factors();
    let k = pool.k();
    if (k as u64).saturating_mul(n_e as u64) > 1_000_000 {
        return Err(Error::Task(format!(
            "pool enumeration of {k} mappings x {n_e} factors exceeds 10^6 pairs"
        )));
    }
    pool.validate(spec)?;
    if prompt_values.len() != n_e {
        return Err(Error::Task("prompt arity differs from factor count".into()));
    }
    let consistent = |m: usize, e: usize| -> bool {
        context
            .iter()
            .all(|(v, y)| pool.maps[e][m][v[e]] == *y)
    };
    // P(m | s_c) ∝ P(m) · Σ_e P(e) · 1[consistent].
    let pe = 1.0 / n_e as f64;
    let mut post_m = vec![0.0; k];
    for (m, pm) in pool.probs.iter().enumerate() {
        let evidence: f64 = (0..n_e).map(|e| if consistent(m, e) { pe } else { 0.0 }).sum();
        post_m[m] = pm * evidence;
    }
    let z: f64 = post_m.iter().sum();
    if z <= 0.0 {
        return Err(Error::Task("context is inconsistent with every pool member".into()));
    }
    for p in post_m.iter_mut() {
        *p /= z;
    }
    let mut dist = vec![0.0; spec.label_alphabet_size];
    for m in 0..k {
        if post_m[m] == 0.0 {
            continue;
        }
        // P(e | s_c, m) ∝ P(e) · 1[consistent].
        let weights: Vec<f64> = (0..n_e)
            .map(|e| if consistent(m, e) { pe } else { 0.0 })
            .collect();
        let ze: f64 = weights.iter().sum();
        for (e, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                let y = pool.maps[e][m][prompt_values[e]];
                dist[y] += post_m[m] * w / ze;
            }
        }
    }
    Ok(dist)
}

/// Spec of the sign-of-linear-function task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimpleFunctionSpec {
    pub dimension: usize,
    pub seq_len: usize,
}

/// One sign-task sequence: `y_i = sign(w . x_i)` with a fresh `w` per
/// sequence. Labels are stored as alphabet ids (0 for -1, 1 for +1), with
/// `sign(0) = +1`.
#[derive(Debug, Clone)]
pub struct SimpleFunctionSample {
    pub xs: Array2<f32>,
    pub labels: Vec<usize>,
    pub w: Vec<f64>,
}

pub fn gen_simple_function_sequence(
    spec: &SimpleFunctionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<SimpleFunctionSample> {
    if spec.dimension == 0 || spec.seq_len == 0 {
        return Err(Error::Config("simple-function spec needs d >= 1 and L >= 1".into()));
    }
    let d = spec.dimension;
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut xs = Array2::<f32>::zeros((spec.seq_len, d));
    let mut labels = Vec::with_capacity(spec.seq_len);
    for i in 0..spec.seq_len {
        let mut dot = 0.0f64;
        for j in 0..d {
            let x: f64 = StandardNormal.sample(rng);
            // Quantize once so files and memory agree.
            let xq = x as f32;
            xs[[i, j]] = xq;
            dot += w[j] * xq as f64;
        }
        labels.push(if dot >= 0.0 { 1 } else { 0 });
    }
    Ok(SimpleFunctionSample { xs, labels, w })
}

/// Spec of the word-selection toy task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSelectionSpec {
    pub vocabulary: usize,
    pub n_options: usize,
    pub context_examples: usize,
}

impl Default for WordSelectionSpec {
    fn default() -> Self {
        WordSelectionSpec {
            vocabulary: 2000,
            n_options: 4,
            context_examples: 5,
        }
    }
}

/// One word-selection sequence: each example is `n_options` distinct words
/// followed by the answer word; the answer's option index is shared across
/// the sequence.
#[derive(Debug, Clone)]
pub struct WordSelectionSample {
    /// `(options, answer_word)` per example; the last example is the prompt.
    pub examples: Vec<(Vec<usize>, usize)>,
    pub answer_position: usize,
}

impl WordSelectionSample {
    /// Flattened token stream: options then answer, per example.
    pub fn token_stream(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (options, answer) in &self.examples {
            out.extend_from_slice(options);
            out.push(*answer);
        }
        out
    }
}

pub fn gen_word_selection_sequence(
    spec: &WordSelectionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<WordSelectionSample> {
    if spec.n_options == 0 || spec.vocabulary < spec.n_options {
        return Err(Error::Config(format!(
            "word selection needs vocabulary >= n_options >= 1, got {}/{}",
            spec.vocabulary, spec.n_options
        )));
    }
    let answer_position = rng.gen_range(0..spec.n_options);
    let n_examples = spec.context_examples + 1;
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let mut options = Vec::with_capacity(spec.n_options);
        while options.len() < spec.n_options {
            let w = rng.gen_range(0..spec.vocabulary);
            if !options.contains(&w) {
                options.push(w);
            }
        }
        let answer = options[answer_position];
        examples.push((options, answer));
    }
    Ok(WordSelectionSample {
        examples,
        answer_position,
    })
}

/// Serialized form of one factored-task record (one JSON object per line).
#[derive(Debug, Serialize, Deserialize)]
struct FactoredRecord {
    factor_values: Vec<Vec<usize>>,
    labels: Vec<usize>,
    hidden_factor: usize,
    mapping_id: usize,
    split: Split,
    /// Base64 of the little-endian f32 payload matrix, row-major.
    token_payload: String,
}

/// Writes one split of factored sequences, record per line.
pub fn export_factored_dataset<W: Write>(out: &mut W, samples: &[SequenceSample]) -> Result<()> {
    let b64 = base64::engine::general_purpose::STANDARD;
    for s in samples {
        let mut bytes = Vec::with_capacity(s.payloads.len() * 4);
        for &v in s.payloads.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let rec = FactoredRecord {
            factor_values: s.factor_values.clone(),
            labels: s.labels.clone(),
            hidden_factor: s.hidden_factor,
            mapping_id: s.mapping_id,
            split: s.split,
            token_payload: b64.encode(&bytes),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a dataset written by [`export_factored_dataset`]. `d_tok` must
/// match the payload width.
pub fn import_factored_dataset<R: BufRead>(input: R, d_tok: usize) -> Result<Vec<SequenceSample>> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FactoredRecord = serde_json::from_str(&line)?;
        let bytes = b64
            .decode(rec.token_payload.as_bytes())
            .map_err(|e| Error::Format(format!("payload base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("payload byte count not a multiple of 4".into()));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let l = rec.labels.len();
        if l == 0 || floats.len() != l * d_tok || rec.factor_values.len() != l {
            return Err(Error::Format(format!(
                "record geometry mismatch: {} labels, {} floats, d_tok {}",
                l,
                floats.len(),
                d_tok
            )));
        }
        let payloads = Array2::from_shape_vec((l, d_tok), floats)
            .map_err(|e| Error::Format(format!("payload shape: {e}")))?;
        out.push(SequenceSample {
            factor_values: rec.factor_values,
            labels: rec.labels,
            hidden_factor: rec.hidden_factor,
            mapping_id: rec.mapping_id,
            payloads,
            split: rec.split,
        });
    }
    Ok(out)
}

/// Full combination space as a single "split" (used when no holdout is
/// wanted, e.g. by the construction oracle).
pub fn full_domain(spec: &FactorSpec, split: Split) -> Result<SplitSet> {
    let n = spec.combination_count()?;
    if n > 4_000_000 {
        return Err(Error::Config(format!(
            "combination space of {n} too large to enumerate"
        )));
    }
    Ok(SplitSet {
        codes: (0..n).collect(),
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn desk() -> (FactorSpec, FrozenEncoder) {
        let spec = FactorSpec::desk_default();
        let enc = FrozenEncoder::new(&spec, 16, 7).unwrap();
        (spec, enc)
    }

    #[test]
    fn entropy_matches_hand_values() {
        let spec = FactorSpec::uniform(2, 3);
        let p1 = MappingPool::sample(&spec, 1, &mut rng(0)).unwrap();
        assert_eq!(entropy(&p1).unwrap(), 0.0);
        let p4 = MappingPool::sample(&spec, 4, &mut rng(0)).unwrap();
        assert!((entropy(&p4).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        let mut two_point = MappingPool::sample(&spec, 4, &mut rng(0)).unwrap();
        two_point.probs = vec![0.5, 0.5, 0.0, 0.0];
        assert!((entropy(&two_point).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_monotone_in_pool_size() {
        let spec = FactorSpec::uniform(3, 5);
        let mut last = -1.0;
        for k in [1usize, 2, 4, 8, 16] {
            let p = MappingPool::sample(&spec, k, &mut rng(1)).unwrap();
            let h = entropy(&p).unwrap();
            assert!(h > last, "entropy not increasing at k={k}");
            last = h;
        }
    }

    #[test]
    fn pool_mappings_are_distinct_and_injective() {
        let spec = FactorSpec::desk_default();
        let pool = MappingPool::sample(&spec, 64, &mut rng(3)).unwrap();
        pool.validate(&spec).unwrap();
        for factor_maps in &pool.maps {
            for i in 0..factor_maps.len() {
                for j in (i + 1)..factor_maps.len() {
                    assert_ne!(factor_maps[i], factor_maps[j]);
                }
            }
        }
    }

    #[test]
    fn pool_rejects_more_maps_than_exist() {
        let spec = FactorSpec::uniform(1, 2);
        // 2 values into 2 labels: only 2 injections.
        assert!(matches!(
            MappingPool::sample(&spec, 3, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn labels_follow_hidden_factor_mapping() {
        let (spec, enc) = desk();
        let pool = MappingPool::sample(&spec, 8, &mut rng(5)).unwrap();
        let domain = full_domain(&spec, Split::Train).unwrap();
        for seed in 0..20 {
            let s = gen_factored_sequence(
                &spec,
                &pool,
                SequenceSetting::Rnd,
                10,
                &enc,
                &domain,
                &mut rng(100 + seed),
            )
            .unwrap();
            for i in 0..s.len() {
                let v = s.factor_values[i][s.hidden_factor];
                assert_eq!(s.labels[i], pool.maps[s.hidden_factor][s.mapping_id][v]);
            }
        }
    }

    #[test]
    fn fix_setting_always_uses_mapping_zero() {
        let (spec, enc) = desk();
        let pool = MappingPool::sample(&spec, 16, &mut rng(6)).unwrap();
        let domain = full_domain(&spec, Split::Train).unwrap();
        for seed in 0..10 {
            let s = gen_factored_sequence(
                &spec,
                &pool,
                SequenceSetting::Fix,
                5,
                &enc,
                &domain,
                &mut rng(seed),
            )
            .unwrap();
            assert_eq!(s.mapping_id, 0);
        }
    }

    #[test]
    fn single_factor_spec_pins_hidden_factor() {
        let spec = FactorSpec::uniform(1, 4);
        let enc = FrozenEncoder::new(&spec, 8, 1).unwrap();
        let pool = MappingPool::sample(&spec, 2, &mut rng(0)).unwrap();
        let domain = full_domain(&spec, Split::Train).unwrap();
        for seed in 0..10 {
            let s = gen_factored_sequence(
                &spec,
                &pool,
                SequenceSetting::Rnd,
                4,
                &enc,
                &domain,
                &mut rng(seed),
            )
            .unwrap();
            assert_eq!(s.hidden_factor, 0);
        }
    }

    #[test]
    fn label_marginal_is_uniform_under_bijective_pools() {
        // Alphabet size equals cardinality, so every mapping is a bijection
        // and the label marginal at any fixed position is exactly uniform.
        let (spec, enc) = desk();
        let pool = MappingPool::sample(&spec, 16, &mut rng(9)).unwrap();
        let domain = full_domain(&spec, Split::Train).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; spec.label_alphabet_size];
        let mut r = rng(42);
        for _ in 0..n {
            let s =
                gen_factored_sequence(&spec, &pool, SequenceSetting::Rnd, 1, &enc, &domain, &mut r)
                    .unwrap();
            counts[s.labels[0]] += 1;
        }
        let p = 1.0 / spec.label_alphabet_size as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (label, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(
                dev <= 3.0 * sigma,
                "label {label}: count {c}, expected {:.0} +- {sigma:.0}",
                n as f64 * p
            );
        }
    }

    /// Joint-enumeration reference for the Bayes oracle: computes
    /// P(y | prompt, context) by summing the unnormalized joint over all
    /// (mapping, factor) pairs, the opposite normalization order from the
    /// library's factored-posterior chain.
    fn joint_enumeration(
        prompt_values: &[usize],
        context: &[(Vec<usize>, usize)],
        spec: &FactorSpec,
        pool: &MappingPool,
    ) -> Vec<f64> {
        let n_e = spec.n_factors();
        let pe = 1.0 / n_e as f64;
        let mut dist = vec![0.0; spec.label_alphabet_size];
        for (m, pm) in pool.probs.iter().enumerate() {
            for e in 0..n_e {
                let ok = context.iter().all(|(v, y)| pool.maps[e][m][v[e]] == *y);
                if ok {
                    dist[pool.maps[e][m][prompt_values[e]]] += pm * pe;
                }
            }
        }
        let z: f64 = dist.iter().sum();
        dist.into_iter().map(|d| d / z).collect()
    }

    #[test]
    fn bayes_oracle_point_mass_when_fully_determined() {
        let spec = FactorSpec::uniform(1, 3);
        let pool = MappingPool::sample(&spec, 1, &mut rng(2)).unwrap();
        let dist = conditional_label_distribution(&[2], &[], &spec, &pool).unwrap();
        let y = pool.maps[0][0][2];
        for (label, &p) in dist.iter().enumerate() {
            let expect = if label == y { 1.0 } else { 0.0 };
            assert!((p - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn bayes_oracle_matches_joint_enumeration() {
        let spec = FactorSpec::uniform(2, 2);
        let pool = MappingPool::sample(&spec, 2, &mut rng(11)).unwrap();
        let enc = FrozenEncoder::new(&spec, 4, 0).unwrap();
        let domain = full_domain(&spec, Split::Train).unwrap();
        let mut r = rng(77);
        for _ in 0..200 {
            let s = gen_factored_sequence(
                &spec,
                &pool,
                SequenceSetting::Rnd,
                4,
                &enc,
                &domain,
                &mut r,
            )
            .unwrap();
            let prompt = s.factor_values.last().unwrap();
            let context: Vec<(Vec<usize>, usize)> = s.factor_values[..s.len() - 1]
                .iter()
                .cloned()
                .zip(s.labels[..s.len() - 1].iter().copied())
                .collect();
            let got = conditional_label_distribution(prompt, &context, &spec, &pool).unwrap();
            let want = joint_enumeration(prompt, &context, &spec, &pool);
            let total: f64 = got.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "not normalized: {total}");
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "decomposition mismatch {g} vs {w}");
            }
        }
    }

    #[test]
    fn bayes_oracle_empty_context_is_prior_predictive() {
        let spec = FactorSpec::uniform(2, 3);
        let pool = MappingPool::sample(&spec, 4, &mut rng(13)).unwrap();
        let got = conditional_label_distribution(&[1, 2], &[], &spec, &pool).unwrap();
        let want = joint_enumeration(&[1, 2], &[], &spec, &pool);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bayes_oracle_rejects_oversized_pools() {
        let spec = FactorSpec::uniform(2, 3);
        let mut pool = MappingPool::sample(&spec, 2, &mut rng(0)).unwrap();
        // Fake a huge K without building the maps.
        pool.probs = vec![1.0 / 600_000.0; 600_000];
        assert!(matches!(
            conditional_label_distribution(&[0, 0], &[], &spec, &pool),
            Err(Error::Task(_))
        ));
    }

    #[test]
    fn split_is_a_partition_with_pinned_sizes() {
        let spec = FactorSpec::desk_default(); // 625 combinations
        let (train, test) = split_dataset(&spec, 0.8, &mut rng(4)).unwrap();
        assert_eq!(train.codes.len(), 500);
        assert_eq!(test.codes.len(), 125);
        for &c in &train.codes {
            assert!(!test.contains(c));
        }
        // 2500-combination case from the source protocol.
        let spec2 = FactorSpec {
            cardinalities: vec![50, 50],
            label_alphabet_size: 50,
        };
        let (tr2, te2) = split_dataset(&spec2, 0.8, &mut rng(4)).unwrap();
        assert_eq!((tr2.codes.len(), te2.codes.len()), (2000, 500));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let spec = FactorSpec::desk_default();
        let (a, _) = split_dataset(&spec, 0.8, &mut rng(19)).unwrap();
        let (b, _) = split_dataset(&spec, 0.8, &mut rng(19)).unwrap();
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn split_rejects_degenerate_spaces() {
        let spec = FactorSpec::uniform(1, 2);
        assert!(matches!(
            split_dataset(&spec, 0.1, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_is_deterministic_and_injective_on_desk_spec() {
        let (spec, enc) = desk();
        let enc2 = FrozenEncoder::new(&spec, 16, 7).unwrap();
        let v = vec![1, 2, 3, 4];
        assert_eq!(enc.encode(&v), enc2.encode(&v));
        let min_dist = enc.verify_injectivity(&spec).unwrap();
        assert!(min_dist > 1e-6);
    }

    #[test]
    fn sign_task_scalar_case_and_balance() {
        let spec = SimpleFunctionSpec {
            dimension: 1,
            seq_len: 8,
        };
        let mut r = rng(3);
        for _ in 0..50 {
            let s = gen_simple_function_sequence(&spec, &mut r).unwrap();
            for i in 0..spec.seq_len {
                let prod = s.w[0] * s.xs[[i, 0]] as f64;
                let expect = if prod >= 0.0 { 1 } else { 0 };
                assert_eq!(s.labels[i], expect);
            }
        }
        // Mean label over many draws is 1/2 within 3 sigma.
        let spec = SimpleFunctionSpec {
            dimension: 5,
            seq_len: 1,
        };
        let n = 100_000;
        let mut pos = 0usize;
        let mut r = rng(8);
        for _ in 0..n {
            pos += gen_simple_function_sequence(&spec, &mut r).unwrap().labels[0];
        }
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((pos as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
    }

    #[test]
    fn sign_task_deterministic_per_seed() {
        let spec = SimpleFunctionSpec {
            dimension: 6,
            seq_len: 5,
        };
        let a = gen_simple_function_sequence(&spec, &mut rng(21)).unwrap();
        let b = gen_simple_function_sequence(&spec, &mut rng(21)).unwrap();
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn word_selection_answer_is_a_shared_position_option() {
        let spec = WordSelectionSpec::default();
        let mut r = rng(15);
        for _ in 0..100 {
            let s = gen_word_selection_sequence(&spec, &mut r).unwrap();
            assert_eq!(s.examples.len(), 6);
            for (options, answer) in &s.examples {
                assert_eq!(options.len(), 4);
                let mut sorted = options.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), 4, "duplicate options");
                assert_eq!(*answer, options[s.answer_position]);
            }
        }
    }

    #[test]
    fn word_selection_single_option_is_forced() {
        let spec = WordSelectionSpec {
            vocabulary: 10,
            n_options: 1,
            context_examples: 2,
        };
        let s = gen_word_selection_sequence(&spec, &mut rng(0)).unwrap();
        for (options, answer) in &s.examples {
            assert_eq!(*answer, options[0]);
        }
    }

    #[test]
    fn word_selection_answer_position_uniform() {
        let spec = WordSelectionSpec::default();
        let n = 10_000;
        let mut counts = [0usize; 4];
        let mut r = rng(33);
        for _ in 0..n {
            counts[gen_word_selection_sequence(&spec, &mut r).unwrap().answer_position] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn dataset_export_round_trips_bit_exact() {
        let (spec, enc) = desk();
        let pool = MappingPool::sample(&spec, 4, &mut rng(2)).unwrap();
        let domain = full_domain(&spec, Split::Test).unwrap();
        let mut r = rng(55);
        let samples: Vec<SequenceSample> = (0..5)
            .map(|_| {
                gen_factored_sequence(&spec, &pool, SequenceSetting::Rnd, 6, &enc, &domain, &mut r)
                    .unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        export_factored_dataset(&mut buf, &samples).unwrap();
        let back = import_factored_dataset(std::io::Cursor::new(&buf), enc.d_tok).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.factor_values, b.factor_values);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.hidden_factor, b.hidden_factor);
            assert_eq!(a.payloads, b.payloads);
        }
        let mut buf2 = Vec::new();
        export_factored_dataset(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2, "second export not byte-identical");
    }

    proptest! {
        #[test]
        fn prop_label_consistency(
            n_e in 1usize..4,
            n_v in 2usize..5,
            k in 1usize..4,
            l in 1usize..8,
            seed in 0u64..500,
        ) {
            let spec = FactorSpec::uniform(n_e, n_v);
            let mut r = rng(seed);
            // A binary alphabet only has two distinct injective maps.
            let k = if n_v == 2 { k.min(2) } else { k };
            let pool = MappingPool::sample(&spec, k, &mut r).unwrap();
            let enc = FrozenEncoder::new(&spec, 8, seed).unwrap();
            let domain = full_domain(&spec, Split::Train).unwrap();
            let s = gen_factored_sequence(
                &spec, &pool, SequenceSetting::Rnd, l, &enc, &domain, &mut r,
            ).unwrap();
            for i in 0..s.len() {
                let v = s.factor_values[i][s.hidden_factor];
                prop_assert_eq!(s.labels[i], pool.maps[s.hidden_factor][s.mapping_id][v]);
            }
        }

        #[test]
        fn prop_split_partitions_space(seed in 0u64..200, frac in 0.2f64..0.8) {
            let spec = FactorSpec::uniform(3, 4); // 64 combos
            let mut r = rng(seed);
            let (train, test) = split_dataset(&spec, frac, &mut r).unwrap();
            let n = spec.combination_count().unwrap();
            prop_assert_eq!(train.codes.len() + test.codes.len(), n as usize);
            for &c in &train.codes {
                prop_assert!(!test.contains(c));
            }
        }

        #[test]
        fn prop_oracle_normalized(seed in 0u64..100) {
            let spec = FactorSpec::uniform(2, 3);
            let mut r = rng(seed);
            let pool = MappingPool::sample(&spec, 3, &mut r).unwrap();
            let enc = FrozenEncoder::new(&spec, 4, seed).unwrap();
            let domain = full_domain(&spec, Split::Train).unwrap();
            let s = gen_factored_sequence(
                &spec, &pool, SequenceSetting::Rnd, 5, &enc, &domain, &mut r,
            ).unwrap();
            let prompt = s.factor_values.last().unwrap();
            let ctx: Vec<(Vec<usize>, usize)> = s.factor_values[..4].iter().cloned()
                .zip(s.labels[..4].iter().copied()).collect();
            let dist = conditional_label_distribution(prompt, &ctx, &spec, &pool).unwrap();
            let total: f64 = dist.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
