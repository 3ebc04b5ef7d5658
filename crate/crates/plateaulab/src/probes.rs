//! Linear probing of hidden representations.
//!
//! Two capability scores are read off a frozen model: the "weights" score
//! (can factor values be decoded from the representation of a single,
//! context-free example?) and the "context" score (can the hidden factor be
//! decoded at the prompt position of a full sequence?). Both use a single
//! linear layer trained on the train split and scored on the held-out
//! split, sweeping every traced layer and reporting the best. A ridge
//! regression probe measures input reconstruction error for the sign task.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_trace, tokenize_batch, tokenize_sign_batch, TransformerWeights};
use crate::tasks::{FactorSpec, SequenceSample, SimpleFunctionSample};
use crate::training::Adam;

pub const PROBE_LR: f64 = 1e-3;
pub const PROBE_BATCH: usize = 256;
pub const WEIGHTS_PROBE_EPOCHS: usize = 1;
pub const CONTEXT_PROBE_EPOCHS: usize = 2;
pub const RIDGE_LAMBDA: f64 = 1e-6;
pub const PROBE_SCHEMA_VERSION: u32 = 1;

/// Where representations are read from the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepPosition {
    /// The final `x` position of each sequence (the prompt).
    FinalPrompt,
    /// Every `x` position.
    AllX,
}

/// Probe outcome over a layer sweep.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    pub schema_version: u32,
    /// "weights", "context" or "reconstruction".
    pub mode: String,
    /// One score per traced layer (index 0 = embedding output).
    pub per_layer_scores: Vec<f64>,
    pub best_layer: usize,
    /// Score at the best layer.
    pub score: f64,
    pub n_eval: usize,
    pub seed: u64,
}

/// A fitted linear probe.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub w: Array2<f64>,
    pub b: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, reps: &Array2<f64>) -> Array2<f64> {
        let mut out = reps.dot(&self.w);
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.b[j];
            }
        }
        out
    }

    /// Argmax prediction accuracy (ties resolve to the lowest index).
    pub fn accuracy(&self, reps: &Array2<f64>, targets: &[usize]) -> f64 {
        let logits = self.logits(reps);
        let mut correct = 0usize;
        for (row, &t) in logits.rows().into_iter().zip(targets) {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best == t {
                correct += 1;
            }
        }
        correct as f64 / targets.len().max(1) as f64
    }

    /// Mean Euclidean norm of the reconstruction residual.
    pub fn mean_l2(&self, reps: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let pred = self.logits(reps);
        let mut total = 0.0;
        for (p, t) in pred.rows().into_iter().zip(targets.rows()) {
            let sq: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            total += sq.sqrt();
        }
        total / reps.nrows().max(1) as f64
    }
}

/// Fits a linear classification probe with minibatch Adam (lr 1e-3,
/// batch 256). Rejects degenerate target sets with a single class.
pub fn fit_classifier_probe(
    reps: &Array2<f64>,
    targets: &[usize],
    n_classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<LinearProbe> {
    if reps.nrows() != targets.len() || reps.nrows() == 0 {
        return Err(Error::Shape(format!(
            "probe fit: {} rows vs {} targets",
            reps.nrows(),
            targets.len()
        )));
    }
    if n_classes < 2 {
        return Err(Error::Task("probe needs at least two classes".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(Error::Task(format!("probe target {bad} outside {n_classes} classes")));
    }
    let first = targets[0];
    if targets.iter().all(|&t| t == first) {
        return Err(Error::Task(
            "degenerate probe targets: every example has the same class".into(),
        ));
    }
    let d = reps.ncols();
    let mut params = vec![
        ArrayD::zeros(vec![d, n_classes].as_slice()),
        ArrayD::zeros(vec![n_classes].as_slice()),
    ];
    let mut adam = Adam::new(PROBE_LR, &params);
    let n = reps.nrows();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x50_52_4F_42 + epoch as u64);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(PROBE_BATCH) {
            let (gw, gb) = probe_grads(&params, reps, targets, chunk, n_classes);
            adam.step(&mut params, &[gw, gb]);
        }
    }
    let w = Array2::from_shape_vec((d, n_classes), params[0].iter().copied().collect())
        .expect("probe weight shape");
    let b: Vec<f64> = params[1].iter().copied().collect();
    Ok(LinearProbe { w, b })
}

fn probe_grads(
    params: &[ArrayD<f64>],
    reps: &Array2<f64>,
    targets: &[usize],
    rows: &[usize],
    n_classes: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let d = reps.ncols();
    let bsz = rows.len();
    let mut gw = Array2::<f64>::zeros((d, n_classes));
    let mut gb = vec![0.0f64; n_classes];
    for &r in rows {
        let h = reps.row(r);
        // logits = h . W + b
        let mut logits = vec![0.0f64; n_classes];
        for c in 0..n_classes {
            let mut s = params[1][[c]];
            for j in 0..d {
                s += h[j] * params[0][[j, c]];
            }
            logits[c] = s;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - m).exp();
            z += *l;
        }
        for (c, l) in logits.iter().enumerate() {
            let p = l / z;
            let delta = p - if c == targets[r] { 1.0 } else { 0.0 };
            let scaled = delta / bsz as f64;
            gb[c] += scaled;
            for j in 0..d {
                gw[[j, c]] += h[j] * scaled;
            }
        }
    }
    (
        gw.into_dyn(),
        ArrayD::from_shape_vec(vec![n_classes].as_slice(), gb).unwrap(),
    )
}

/// Solves `A X = B` for symmetric positive-definite `A` via Cholesky.
fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Shape("cholesky: dimension mismatch".into()));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NonFinite(
                        "cholesky: matrix not positive definite".into(),
                    ));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let m = b.ncols();
    let mut x = b.clone();
    // Forward substitution: L Y = B.
    for col in 0..m {
        for i in 0..n {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    // Back substitution: L^T X = Y.
    for col in 0..m {
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

/// Closed-form ridge regression (bias absorbed via an appended constant
/// column; the tiny ridge term also touches the bias).
pub fn fit_ridge_probe(
    reps: &Array2<f64>,
    targets: &Array2<f64>,
    lambda: f64,
) -> Result<LinearProbe> {
    let n = reps.nrows();
    if n == 0 || targets.nrows() != n {
        return Err(Error::Shape("ridge fit: row mismatch".into()));
    }
    let d = reps.ncols();
    let mut aug = Array2::<f64>::ones((n, d + 1));
    aug.slice_mut(ndarray::s![.., ..d]).assign(reps);
    let mut gram = aug.t().dot(&aug);
    for i in 0..d + 1 {
        gram[[i, i]] += lambda;
    }
    let rhs = aug.t().dot(targets);
    let sol = cholesky_solve(&gram, &rhs)?;
    let w = sol.slice(ndarray::s![..d, ..]).to_owned();
    let b: Vec<f64> = sol.row(d).iter().copied().collect();
    Ok(LinearProbe { w, b })
}

/// Collects per-layer representations at the requested positions.
fn collect_reps(
    model: &TransformerWeights,
    batches: &[crate::model::TokenBatch],
    position: RepPosition,
) -> Result<Vec<Array2<f64>>> {
    let n_layers = model.config.layers + 1;
    let d = model.config.embed_dim;
    let total: usize = batches
        .iter()
        .map(|b| match position {
            RepPosition::FinalPrompt => b.batch,
            RepPosition::AllX => b.batch * b.seq_examples,
        })
        .sum();
    let mut out = vec![Array2::<f64>::zeros((total, d)); n_layers];
    let mut at = 0usize;
    for batch in batches {
        let trace = forward_trace(model, batch)?;
        let l = batch.seq_examples;
        let rows: Vec<usize> = match position {
            RepPosition::FinalPrompt => (0..batch.batch)
                .map(|b| trace.token_row(b, 2 * (l - 1)))
                .collect(),
            RepPosition::AllX => {
                let mut v = Vec::with_capacity(batch.batch * l);
                for b in 0..batch.batch {
                    for i in 0..l {
                        v.push(trace.token_row(b, 2 * i));
                    }
                }
                v
            }
        };
        for (layer, hidden) in trace.hidden.iter().enumerate() {
            for (k, &r) in rows.iter().enumerate() {
                out[layer].row_mut(at + k).assign(&hidden.row(r));
            }
        }
        at += rows.len();
    }
    Ok(out)
}

fn batched<'a, T, F>(samples: &'a [T], f: F) -> Result<Vec<crate::model::TokenBatch>>
where
    F: Fn(&[&'a T]) -> Result<crate::model::TokenBatch>,
{
    samples
        .chunks(PROBE_BATCH)
        .map(|chunk| f(&chunk.iter().collect::<Vec<_>>()))
        .collect()
}

fn shuffle_targets(targets: &mut [usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x53_48_46_4C);
    for i in (1..targets.len()).rev() {
        let j = rng.gen_range(0..=i);
        targets.swap(i, j);
    }
}

/// Weights-component probe: per-factor value decoding from context-free
/// single-example sequences, averaged over factors, swept over layers.
/// `shuffled` breaks the representation/target link for null calibration.
pub fn weights_probe_report(
    model: &TransformerWeights,
    train: &[SequenceSample],
    test: &[SequenceSample],
    spec: &FactorSpec,
    seed: u64,
    shuffled: bool,
) -> Result<ProbeReport> {
    if train.iter().chain(test).any(|s| s.len() != 1) {
        return Err(Error::Config(
            "weights probing requires context-free single-example sequences".into(),
        ));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test sets".into()));
    }
    let train_reps = collect_reps(model, &batched(train, |c| tokenize_batch(c))?, RepPosition::FinalPrompt)?;
    let test_reps = collect_reps(model, &batched(test, |c| tokenize_batch(c))?, RepPosition::FinalPrompt)?;
    let n_e = spec.n_factors();
    let mut per_layer = Vec::with_capacity(train_reps.len());
    for (layer, (htr, hte)) in train_reps.iter().zip(&test_reps).enumerate() {
        let mut factor_acc = 0.0;
        for e in 0..n_e {
            let mut ttr: Vec<usize> = train.iter().map(|s| s.factor_values[0][e]).collect();
            let tte: Vec<usize> = test.iter().map(|s| s.factor_values[0][e]).collect();
            if shuffled {
                shuffle_targets(&mut ttr, seed ^ (layer as u64) << 8 ^ e as u64);
            }
            let probe = fit_classifier_probe(
                htr,
                &ttr,
                spec.cardinalities[e],
                WEIGHTS_PROBE_EPOCHS,
                seed.wrapping_add((layer * n_e + e) as u64),
            )?;
            factor_acc += probe.accuracy(hte, &tte);
        }
        per_layer.push(factor_acc / n_e as f64);
    }
    Ok(finish_report("weights", per_layer, test.len(), seed))
}

/// Context-component probe: hidden-factor decoding at the prompt position
/// of full sequences, swept over layers.
pub fn context_probe_report(
    model: &TransformerWeights,
    train: &[SequenceSample],
    test: &[SequenceSample],
    spec: &FactorSpec,
    seed: u64,
    shuffled: bool,
) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test sets".into()));
    }
    let n_e = spec.n_factors();
    if n_e < 2 {
        return Err(Error::Task(
            "context probing needs at least two factors".into(),
        ));
    }
    let train_reps = collect_reps(model, &batched(train, |c| tokenize_batch(c))?, RepPosition::FinalPrompt)?;
    let test_reps = collect_reps(model, &batched(test, |c| tokenize_batch(c))?, RepPosition::FinalPrompt)?;
    let mut ttr_base: Vec<usize> = train.iter().map(|s| s.hidden_factor).collect();
    let tte: Vec<usize> = test.iter().map(|s| s.hidden_factor).collect();
    let mut per_layer = Vec::with_capacity(train_reps.len());
    for (layer, (htr, hte)) in train_reps.iter().zip(&test_reps).enumerate() {
        let mut ttr = ttr_base.clone();
        if shuffled {
            shuffle_targets(&mut ttr, seed ^ (layer as u64) << 8);
        }
        let probe = fit_classifier_probe(
            htr,
            &ttr,
            n_e,
            CONTEXT_PROBE_EPOCHS,
            seed.wrapping_add(layer as u64),
        )?;
        per_layer.push(probe.accuracy(hte, &tte));
    }
    ttr_base.clear();
    Ok(finish_report("context", per_layer, test.len(), seed))
}

/// Input-reconstruction error (mean Euclidean norm) of a ridge probe at one
/// layer, over all `x` positions of sign-task sequences.
pub fn reconstruction_mse_at_layer(
    model: &TransformerWeights,
    train: &[SimpleFunctionSample],
    test: &[SimpleFunctionSample],
    layer: usize,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe needs non-empty train and test sets".into()));
    }
    let train_b = batched(train, |c| tokenize_sign_batch(c))?;
    let test_b = batched(test, |c| tokenize_sign_batch(c))?;
    let train_reps = collect_reps(model, &train_b, RepPosition::AllX)?;
    let test_reps = collect_reps(model, &test_b, RepPosition::AllX)?;
    if layer >= train_reps.len() {
        return Err(Error::Config(format!(
            "layer {layer} outside trace of {} layers",
            train_reps.len()
        )));
    }
    let stack = |batches: &[crate::model::TokenBatch]| {
        let rows: usize = batches.iter().map(|b| b.payloads.nrows()).sum();
        let d = batches[0].payloads.ncols();
        let mut out = Array2::<f64>::zeros((rows, d));
        let mut at = 0;
        for b in batches {
            out.slice_mut(ndarray::s![at..at + b.payloads.nrows(), ..])
                .assign(&b.payloads);
            at += b.payloads.nrows();
        }
        out
    };
    let xtr = stack(&train_b);
    let xte = stack(&test_b);
    let probe = fit_ridge_probe(&train_reps[layer], &xtr, RIDGE_LAMBDA)?;
    Ok(probe.mean_l2(&test_reps[layer], &xte))
}

fn finish_report(mode: &str, per_layer: Vec<f64>, n_eval: usize, seed: u64) -> ProbeReport {
    let mut best_layer = 0usize;
    for (i, &s) in per_layer.iter().enumerate() {
        if s > per_layer[best_layer] {
            best_layer = i;
        }
    }
    let score = per_layer[best_layer];
    ProbeReport {
        schema_version: PROBE_SCHEMA_VERSION,
        mode: mode.into(),
        per_layer_scores: per_layer,
        best_layer,
        score,
        n_eval,
        seed,
    }
}

/// Standard error of an aggregate accuracy under the null that each of the
/// `heads` components guesses independently at its own chance rate, with
/// `n` evaluations per component.
pub fn aggregate_binomial_sigma(chances: &[f64], n: usize) -> f64 {
    let var: f64 = chances
        .iter()
        .map(|&p| p * (1.0 - p) / n.max(1) as f64)
        .sum::<f64>()
        / (chances.len() as f64).powi(2);
    var.sqrt()
}
