//! The tape: node storage, forward primitives, reverse sweep.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix1, Ix2};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::par::par_map;

/// Layer norm epsilon, fixed by contract.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Geometry of a fused causal attention call over a flattened `[B*T, D]`
/// token matrix.
#[derive(Debug, Clone, Copy)]
pub struct AttnMeta {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Standard causal masking attends to `j <= i`; the strict variant
    /// (`include_self = false`) attends to `j < i` and leaves the first row
    /// with an empty window (its output is zero).
    pub include_self: bool,
}

enum Op<T: Scalar> {
    Input,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Relu {
        x: NodeId,
    },
    Sign,
    SoftmaxLast {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatLast {
        parts: Vec<NodeId>,
    },
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    InterleaveRows {
        a: NodeId,
        b: NodeId,
        group: usize,
    },
    AddPosition {
        x: NodeId,
        pos: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    RowL2 {
        x: NodeId,
    },
    L2Norm {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Array2<T>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        meta: AttnMeta,
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// Gradients of one reverse sweep, indexed by [`NodeId`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the swept scalar with respect to the node, if the node
    /// influences it.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.grads[id.0].take()
    }
}

/// Records primitive tensor operations for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<T: Scalar>(v: &ArrayD<T>, what: &str) -> Result<Array2<T>> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map(|a| a.to_owned())
        .map_err(|_| Error::Shape(format!("{what}: expected 2-d, got {:?}", v.shape())))
}

fn view2<'a, T: Scalar>(v: &'a ArrayD<T>, what: &str) -> Result<ndarray::ArrayView2<'a, T>> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("{what}: expected 2-d, got {:?}", v.shape())))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input (leaf) tensor.
    pub fn input(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Registers a 2-d input.
    pub fn input2(&mut self, value: Array2<T>) -> NodeId {
        self.push(value.into_dyn(), Op::Input)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = view2(self.value(a), "matmul lhs")?;
        let bv = view2(self.value(b), "matmul rhs")?;
        if av.ncols() != bv.nrows() {
            return Err(Error::Shape(format!(
                "matmul: [{},{}] x [{},{}]",
                av.nrows(),
                av.ncols(),
                bv.nrows(),
                bv.ncols()
            )));
        }
        let out = av.dot(&bv).into_dyn();
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// `[n,d] + [d]` broadcast along rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = view2(self.value(x), "add_bias input")?;
        let bv = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape("add_bias: bias must be 1-d".into()))?;
        if xv.ncols() != bv.len() {
            return Err(Error::Shape(format!(
                "add_bias: {} cols vs bias len {}",
                xv.ncols(),
                bv.len()
            )));
        }
        let out = (&xv + &bv).into_dyn();
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cs = T::from_f64(c);
        let out = self.value(x).mapv(|v| v * cs);
        self.push(out, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| v.maximum(T::zero()));
        self.push(out, Op::Relu { x })
    }

    /// Elementwise sign with the convention `sign(0) = 0`; gradient is zero
    /// everywhere (subgradient choice).
    pub fn sign(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                T::zero() - T::one()
            } else {
                T::zero()
            }
        });
        self.push(out, Op::Sign)
    }

    /// Softmax over the last axis of a 2-d tensor.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "softmax input")?;
        let mut out = xv;
        for mut row in out.rows_mut() {
            let mut m = row[0];
            for &v in row.iter() {
                m = m.maximum(v);
            }
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Ok(self.push(out.into_dyn(), Op::SoftmaxLast { x }))
    }

    /// Layer norm over the last axis of `[n,d]` with learned gain and bias,
    /// epsilon [`LN_EPS`].
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = as2(self.value(x), "layer_norm input")?;
        let d = xv.ncols();
        let gv = self
            .value(gain)
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape("layer_norm: gain must be 1-d".into()))?
            .to_owned();
        let bv = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| Error::Shape("layer_norm: bias must be 1-d".into()))?
            .to_owned();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm: dim {} vs gain {} bias {}",
                d,
                gv.len(),
                bv.len()
            )));
        }
        let n = xv.nrows();
        let mut xhat = xv.clone();
        let mut rstd = vec![T::zero(); n];
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(LN_EPS);
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mut mean = T::zero();
            for &v in row.iter() {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for v in row.iter_mut() {
                *v = *v - mean;
                var = var + *v * *v;
            }
            var = var * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for v in row.iter_mut() {
                *v = *v * r;
            }
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            out.into_dyn(),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup: `table[ids[i], :] -> out[i, :]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = view2(self.value(table), "embedding table")?;
        let (v, d) = (tv.nrows(), tv.ncols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!(
                "embedding: id {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Array2::<T>::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(id));
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates 2-d tensors with equal row counts along the last axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_last: no parts".into()));
        }
        let n = view2(self.value(parts[0]), "concat part")?.nrows();
        let mut total = 0;
        for &p in parts {
            let pv = view2(self.value(p), "concat part")?;
            if pv.nrows() != n {
                return Err(Error::Shape(format!(
                    "concat_last: row mismatch {} vs {}",
                    pv.nrows(),
                    n
                )));
            }
            total += pv.ncols();
        }
        let mut out = Array2::<T>::zeros((n, total));
        let mut at = 0;
        for &p in parts {
            let pv = view2(self.value(p), "concat part")?;
            let w = pv.ncols();
            out.slice_mut(ndarray::s![.., at..at + w]).assign(&pv);
            at += w;
        }
        Ok(self.push(
            out.into_dyn(),
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Column slice `[.., start..start+len]` of a 2-d tensor.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = view2(self.value(x), "slice_last input")?;
        if start + len > xv.ncols() {
            return Err(Error::Shape(format!(
                "slice_last: {}..{} of {} cols",
                start,
                start + len,
                xv.ncols()
            )));
        }
        let out = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(out.into_dyn(), Op::SliceLast { x, start, len }))
    }

    /// Row gather: `out[i, :] = x[rows[i], :]`.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = view2(self.value(x), "gather_rows input")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.nrows()) {
            return Err(Error::Shape(format!(
                "gather_rows: row {bad} out of range ({} rows)",
                xv.nrows()
            )));
        }
        let mut out = Array2::<T>::zeros((rows.len(), xv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&xv.row(r));
        }
        Ok(self.push(
            out.into_dyn(),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Interleaves two `[n,d]` row blocks pairwise within groups of `group`
    /// rows: for each group `s` and offset `l`, output rows alternate
    /// `a[s*group+l]`, `b[s*group+l]`. Used to build `[x1,y1,...,xL,yL]`
    /// token streams from per-kind embeddings.
    pub fn interleave_rows(&mut self, a: NodeId, b: NodeId, group: usize) -> Result<NodeId> {
        self.binary_same_shape(a, b, "interleave_rows")?;
        let av = view2(self.value(a), "interleave_rows input")?;
        let n = av.nrows();
        if group == 0 || n % group != 0 {
            return Err(Error::Shape(format!(
                "interleave_rows: {n} rows not divisible by group {group}"
            )));
        }
        let bv = view2(self.value(b), "interleave_rows input")?;
        let d = av.ncols();
        let mut out = Array2::<T>::zeros((2 * n, d));
        for s in 0..n / group {
            for l in 0..group {
                out.row_mut(s * 2 * group + 2 * l).assign(&av.row(s * group + l));
                out.row_mut(s * 2 * group + 2 * l + 1)
                    .assign(&bv.row(s * group + l));
            }
        }
        Ok(self.push(out.into_dyn(), Op::InterleaveRows { a, b, group }))
    }

    /// `x[b*T + t, :] += pos[t, :]` for a `[B*T, d]` token matrix and a
    /// `[T, d]` position table.
    pub fn add_position(&mut self, x: NodeId, pos: NodeId) -> Result<NodeId> {
        let xv = view2(self.value(x), "add_position input")?;
        let pv = view2(self.value(pos), "add_position table")?;
        let t = pv.nrows();
        if t == 0 || xv.nrows() % t != 0 || xv.ncols() != pv.ncols() {
            return Err(Error::Shape(format!(
                "add_position: tokens {:?} vs table {:?}",
                xv.shape(),
                pv.shape()
            )));
        }
        let mut out = xv.to_owned();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row += &pv.row(r % t);
        }
        Ok(self.push(out.into_dyn(), Op::AddPosition { x, pos }))
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut s = T::zero();
        for &v in xv.iter() {
            s = s + v;
        }
        let m = s * T::from_f64(1.0 / xv.len() as f64);
        self.push(ndarray::arr0(m).into_dyn(), Op::MeanAll { x })
    }

    /// Mean over one axis of a 2-d tensor.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = as2(self.value(x), "mean_axis input")?;
        if axis > 1 {
            return Err(Error::Shape(format!("mean_axis: axis {axis} of 2-d tensor")));
        }
        let denom = xv.len_of(Axis(axis));
        if denom == 0 {
            return Err(Error::Shape("mean_axis: empty axis".into()));
        }
        let c = T::from_f64(1.0 / denom as f64);
        let out = xv.sum_axis(Axis(axis)).mapv(|v| v * c);
        Ok(self.push(out.into_dyn(), Op::MeanAxis { x, axis }))
    }

    /// Per-row Euclidean norm of `[n,d] -> [n]`.
    pub fn row_l2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = view2(self.value(x), "row_l2 input")?;
        let mut out = Array1::<T>::zeros(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mut s = T::zero();
            for &v in row.iter() {
                s = s + v * v;
            }
            out[i] = s.sqrt();
        }
        Ok(self.push(out.into_dyn(), Op::RowL2 { x }))
    }

    /// Euclidean norm of the whole tensor, as a 0-d tensor.
    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.value(x).iter() {
            s = s + v * v;
        }
        self.push(ndarray::arr0(s.sqrt()).into_dyn(), Op::L2Norm { x })
    }

    /// Mean cross-entropy of row logits against integer targets, as a 0-d
    /// tensor. Numerically stable log-softmax; the softmax is cached for the
    /// backward pass.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = view2(self.value(logits), "cross_entropy logits")?;
        let (n, k) = (lv.nrows(), lv.ncols());
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {n} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Shape(format!(
                "cross_entropy: target {bad} out of range for {k} classes"
            )));
        }
        let mut probs = lv.to_owned();
        let mut loss = 0.0f64;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let mut m = row[0];
            for &v in row.iter() {
                m = m.maximum(v);
            }
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
            loss -= row[targets[i]].to_f64().max(f64::MIN_POSITIVE).ln();
        }
        let mean = T::from_f64(loss / n as f64);
        Ok(self.push(
            ndarray::arr0(mean).into_dyn(),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Fused multi-head causal self attention over a flattened `[B*T, D]`
    /// token matrix; scores are scaled by `1/sqrt(D/heads)` and softmaxed
    /// over the causal window. Attention probabilities are cached for the
    /// backward pass.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        meta: AttnMeta,
    ) -> Result<NodeId> {
        self.binary_same_shape(q, k, "attention q/k")?;
        self.binary_same_shape(q, v, "attention q/v")?;
        let qv = view2(self.value(q), "attention q")?;
        let (bt, d) = (qv.nrows(), qv.ncols());
        let AttnMeta {
            batch,
            seq,
            heads,
            include_self,
        } = meta;
        if batch * seq != bt || heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: tokens {bt}x{d} vs batch {batch} seq {seq} heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qs = self.value(q).as_slice().expect("standard layout");
        let ks = self.value(k).as_slice().expect("standard layout");
        let vs = self.value(v).as_slice().expect("standard layout");

        // One (out, probs) block per batch element; assembled in index order.
        let blocks = par_map(batch, |b| {
            let base = b * seq * d;
            let mut out = vec![T::zero(); seq * d];
            let mut probs = vec![T::zero(); heads * seq * seq];
            let mut scores = vec![T::zero(); seq];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seq {
                    let lim = if include_self { i + 1 } else { i };
                    if lim == 0 {
                        continue;
                    }
                    let qrow = &qs[base + i * d + c0..base + i * d + c0 + dh];
                    let mut m = T::from_f64(f64::NEG_INFINITY);
                    for (j, sc) in scores.iter_mut().enumerate().take(lim) {
                        let krow = &ks[base + j * d + c0..base + j * d + c0 + dh];
                        let mut dot = T::zero();
                        for c in 0..dh {
                            dot = dot + qrow[c] * krow[c];
                        }
                        *sc = dot * scale;
                        m = m.maximum(*sc);
                    }
                    let mut sum = T::zero();
                    for sc in scores.iter_mut().take(lim) {
                        *sc = (*sc - m).exp();
                        sum = sum + *sc;
                    }
                    let p0 = h * seq * seq + i * seq;
                    let orow = i * d + c0;
                    for j in 0..lim {
                        let p = scores[j] / sum;
                        probs[p0 + j] = p;
                        let vrow = &vs[base + j * d + c0..base + j * d + c0 + dh];
                        for c in 0..dh {
                            out[orow + c] = out[orow + c] + p * vrow[c];
                        }
                    }
                }
            }
            (out, probs)
        });

        let mut out = Array2::<T>::zeros((bt, d));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let outs = out.as_slice_mut().expect("standard layout");
        for (b, (ob, pb)) in blocks.into_iter().enumerate() {
            outs[b * seq * d..(b + 1) * seq * d].copy_from_slice(&ob);
            probs[b * heads * seq * seq..(b + 1) * heads * seq * seq].copy_from_slice(&pb);
        }
        Ok(self.push(
            out.into_dyn(),
            Op::CausalAttention {
                q,
                k,
                v,
                meta,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar (0-d or single-element) node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(idx, &g, &mut grads)?;
            // Leaves keep their gradient; interior nodes may be queried too.
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn step_backward(
        &self,
        idx: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
    ) -> Result<()> {
        fn acc<T: Scalar>(grads: &mut [Option<ArrayD<T>>], id: NodeId, delta: ArrayD<T>) {
            match &mut grads[id.0] {
                Some(a) => *a += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        match &self.nodes[idx].op {
            Op::Input | Op::Sign => {}
            Op::MatMul { a, b } => {
                let gv = view2(g, "grad")?;
                let av = view2(self.value(*a), "matmul lhs")?;
                let bv = view2(self.value(*b), "matmul rhs")?;
                acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|v| T::zero() - v));
            }
            Op::Mul { a, b } => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::AddBias { x, bias } => {
                acc(grads, *x, g.clone());
                let gv = view2(g, "grad")?;
                let mut db = Array1::<T>::zeros(gv.ncols());
                for row in gv.rows() {
                    db += &row;
                }
                acc(grads, *bias, db.into_dyn());
            }
            Op::Scale { x, c } => {
                let cs = T::from_f64(*c);
                acc(grads, *x, g.mapv(|v| v * cs));
            }
            Op::Relu { x } => {
                // Subgradient at 0 is 0.
                let mask = self.value(*x).mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                acc(grads, *x, g * &mask);
            }
            Op::SoftmaxLast { x } => {
                let p = view2(&self.nodes[idx].value, "softmax out")?;
                let gv = view2(g, "grad")?;
                let mut dx = p.to_owned();
                for (mut drow, (prow, grow)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(p.rows().into_iter().zip(gv.rows()))
                {
                    let mut dot = T::zero();
                    for (pv, gvv) in prow.iter().zip(grow.iter()) {
                        dot = dot + *pv * *gvv;
                    }
                    for (d, (pv, gvv)) in drow.iter_mut().zip(prow.iter().zip(grow.iter())) {
                        *d = *pv * (*gvv - dot);
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = view2(g, "grad")?;
                let gainv = self
                    .value(*gain)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("checked at forward");
                let (n, d) = (gv.nrows(), gv.ncols());
                let inv_d = T::from_f64(1.0 / d as f64);
                let mut dx = Array2::<T>::zeros((n, d));
                let mut dgain = Array1::<T>::zeros(d);
                let mut dbias = Array1::<T>::zeros(d);
                for i in 0..n {
                    let grow = gv.row(i);
                    let hrow = xhat.row(i);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gainv[j];
                        m1 = m1 + dh;
                        m2 = m2 + dh * hrow[j];
                        dgain[j] = dgain[j] + grow[j] * hrow[j];
                        dbias[j] = dbias[j] + grow[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    let r = rstd[i];
                    let mut drow = dx.row_mut(i);
                    for j in 0..d {
                        let dh = grow[j] * gainv[j];
                        drow[j] = r * (dh - m1 - hrow[j] * m2);
                    }
                }
                acc(grads, *x, dx.into_dyn());
                acc(grads, *gain, dgain.into_dyn());
                acc(grads, *bias, dbias.into_dyn());
            }
            Op::Embedding { table, ids } => {
                let gv = view2(g, "grad")?;
                let tv = view2(self.value(*table), "embedding table")?;
                let mut dt = Array2::<T>::zeros((tv.nrows(), tv.ncols()));
                for (r, &id) in ids.iter().enumerate() {
                    let mut dst = dt.row_mut(id);
                    dst += &gv.row(r);
                }
                acc(grads, *table, dt.into_dyn());
            }
            Op::ConcatLast { parts } => {
                let gv = view2(g, "grad")?;
                let mut at = 0;
                for &p in parts {
                    let w = view2(self.value(p), "concat part")?.ncols();
                    let dp = gv.slice(ndarray::s![.., at..at + w]).to_owned();
                    acc(grads, p, dp.into_dyn());
                    at += w;
                }
            }
            Op::SliceLast { x, start, len } => {
                let gv = view2(g, "grad")?;
                let xv = view2(self.value(*x), "slice input")?;
                let mut dx = Array2::<T>::zeros((xv.nrows(), xv.ncols()));
                dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&gv);
                acc(grads, *x, dx.into_dyn());
            }
            Op::GatherRows { x, rows } => {
                let gv = view2(g, "grad")?;
                let xv = view2(self.value(*x), "gather input")?;
                let mut dx = Array2::<T>::zeros((xv.nrows(), xv.ncols()));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &gv.row(i);
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::InterleaveRows { a, b, group } => {
                let gv = view2(g, "grad")?;
                let n = gv.nrows() / 2;
                let d = gv.ncols();
                let gsz = *group;
                let mut da = Array2::<T>::zeros((n, d));
                let mut db = Array2::<T>::zeros((n, d));
                for s in 0..n / gsz {
                    for l in 0..gsz {
                        da.row_mut(s * gsz + l).assign(&gv.row(s * 2 * gsz + 2 * l));
                        db.row_mut(s * gsz + l)
                            .assign(&gv.row(s * 2 * gsz + 2 * l + 1));
                    }
                }
                acc(grads, *a, da.into_dyn());
                acc(grads, *b, db.into_dyn());
            }
            Op::AddPosition { x, pos } => {
                acc(grads, *x, g.clone());
                let gv = view2(g, "grad")?;
                let pv = view2(self.value(*pos), "position table")?;
                let t = pv.nrows();
                let mut dp = Array2::<T>::zeros((t, pv.ncols()));
                for (r, row) in gv.rows().into_iter().enumerate() {
                    let mut dst = dp.row_mut(r % t);
                    dst += &row;
                }
                acc(grads, *pos, dp.into_dyn());
            }
            Op::MeanAll { x } => {
                let xv = self.value(*x);
                let go = g.iter().next().copied().unwrap_or_else(T::zero);
                let c = go * T::from_f64(1.0 / xv.len() as f64);
                acc(grads, *x, ArrayD::from_elem(xv.raw_dim(), c));
            }
            Op::MeanAxis { x, axis } => {
                let xv = view2(self.value(*x), "mean input")?;
                let gv = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
                let (n, d) = (xv.nrows(), xv.ncols());
                let mut dx = Array2::<T>::zeros((n, d));
                if *axis == 0 {
                    let c = T::from_f64(1.0 / n as f64);
                    for mut row in dx.rows_mut() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = gv[j] * c;
                        }
                    }
                } else {
                    let c = T::from_f64(1.0 / d as f64);
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let gi = gv[i] * c;
                        for v in row.iter_mut() {
                            *v = gi;
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::RowL2 { x } => {
                let xv = view2(self.value(*x), "row_l2 input")?;
                let nv = self.nodes[idx]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("1-d norms");
                let gv = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
                let mut dx = Array2::<T>::zeros((xv.nrows(), xv.ncols()));
                for (i, row) in xv.rows().into_iter().enumerate() {
                    if nv[i] > T::zero() {
                        let c = gv[i] / nv[i];
                        let mut drow = dx.row_mut(i);
                        for (dvv, &xvv) in drow.iter_mut().zip(row.iter()) {
                            *dvv = c * xvv;
                        }
                    }
                }
                acc(grads, *x, dx.into_dyn());
            }
            Op::L2Norm { x } => {
                let norm = self.nodes[idx].value.iter().next().copied().unwrap();
                let go = g.iter().next().copied().unwrap_or_else(T::zero);
                let dx = if norm > T::zero() {
                    self.value(*x).mapv(|v| go * v / norm)
                } else {
                    ArrayD::zeros(self.value(*x).raw_dim())
                };
                acc(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let go = g.iter().next().copied().unwrap_or_else(T::zero);
                let n = targets.len();
                let c = go * T::from_f64(1.0 / n as f64);
                let mut dl = probs.clone();
                for (i, mut row) in dl.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v * c);
                    row[targets[i]] = row[targets[i]] - c;
                }
                acc(grads, *logits, dl.into_dyn());
            }
            Op::CausalAttention {
                q,
                k,
                v,
                meta,
                probs,
            } => {
                let AttnMeta {
                    batch,
                    seq,
                    heads,
                    include_self,
                } = *meta;
                let d = view2(self.value(*q), "attention q")?.ncols();
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let qs = self.value(*q).as_slice().expect("standard layout");
                let ks = self.value(*k).as_slice().expect("standard layout");
                let vs = self.value(*v).as_slice().expect("standard layout");
                let gs = g.as_slice().expect("standard layout");

                let blocks = par_map(batch, |b| {
                    let base = b * seq * d;
                    let pbase = b * heads * seq * seq;
                    let mut dq = vec![T::zero(); seq * d];
                    let mut dk = vec![T::zero(); seq * d];
                    let mut dv = vec![T::zero(); seq * d];
                    let mut dp = vec![T::zero(); seq];
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..seq {
                            let lim = if include_self { i + 1 } else { i };
                            if lim == 0 {
                                continue;
                            }
                            let grow = &gs[base + i * d + c0..base + i * d + c0 + dh];
                            let prow = &probs[pbase + h * seq * seq + i * seq..][..lim];
                            let mut rowdot = T::zero();
                            for j in 0..lim {
                                let vrow = &vs[base + j * d + c0..base + j * d + c0 + dh];
                                let mut dot = T::zero();
                                for c in 0..dh {
                                    dot = dot + grow[c] * vrow[c];
                                }
                                dp[j] = dot;
                                rowdot = rowdot + dot * prow[j];
                                // dV accumulation: P^T dO
                                let dvrow = &mut dv[j * d + c0..j * d + c0 + dh];
                                for c in 0..dh {
                                    dvrow[c] = dvrow[c] + prow[j] * grow[c];
                                }
                            }
                            let qrow = &qs[base + i * d + c0..base + i * d + c0 + dh];
                            let dqrow_base = i * d + c0;
                            for j in 0..lim {
                                let ds = prow[j] * (dp[j] - rowdot) * scale;
                                let krow = &ks[base + j * d + c0..base + j * d + c0 + dh];
                                let dkrow = &mut dk[j * d + c0..j * d + c0 + dh];
                                for c in 0..dh {
                                    dkrow[c] = dkrow[c] + ds * qrow[c];
                                }
                                let dqrow = &mut dq[dqrow_base..dqrow_base + dh];
                                for c in 0..dh {
                                    dqrow[c] = dqrow[c] + ds * krow[c];
                                }
                            }
                        }
                    }
                    (dq, dk, dv)
                });

                let bt = batch * seq;
                let mut dqa = Array2::<T>::zeros((bt, d));
                let mut dka = Array2::<T>::zeros((bt, d));
                let mut dva = Array2::<T>::zeros((bt, d));
                {
                    let (dqs, dks, dvs) = (
                        dqa.as_slice_mut().unwrap(),
                        dka.as_slice_mut().unwrap(),
                        dva.as_slice_mut().unwrap(),
                    );
                    for (b, (dq, dk, dv)) in blocks.into_iter().enumerate() {
                        dqs[b * seq * d..(b + 1) * seq * d].copy_from_slice(&dq);
                        dks[b * seq * d..(b + 1) * seq * d].copy_from_slice(&dk);
                        dvs[b * seq * d..(b + 1) * seq * d].copy_from_slice(&dv);
                    }
                }
                acc(grads, *q, dqa.into_dyn());
                acc(grads, *k, dka.into_dyn());
                acc(grads, *v, dva.into_dyn());
            }
        }
        Ok(())
    }
}

/// Borrow-free view of a node value as 2-d (copying only on error paths is
/// avoided; this is a plain view).
#[cfg(test)]
pub(crate) fn value2<'t, T: Scalar>(tape: &'t Tape<T>, id: NodeId) -> ndarray::ArrayView2<'t, T> {
    tape.value(id)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d node")
}

#[allow(dead_code)]
fn debug_shape<T: Scalar>(v: ArrayViewD<'_, T>) -> Vec<usize> {
    v.shape().to_vec()
}
