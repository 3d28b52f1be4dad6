//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in execution order; [`Tensor`] is a
//! cheap handle to a recorded node. [`Tape::backward`] walks the tape once in
//! reverse and returns gradients for all leaves created with
//! `requires_grad`. A tape can be differentiated only once.

mod check;
mod params;

use rand::Rng;
use thiserror::Error;

pub use check::{finite_difference_check, GradCheck, SCALE_FLOOR};
pub use params::{init_seed, BoundParams, ParamData, ParamId, ParamStore};

/// Stabilizer inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange { op: &'static str, index: usize, size: usize },
    #[error("masked_softmax: row {row} has every entry masked")]
    FullyMaskedRow { row: usize },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape was already differentiated; record a new forward pass")]
    StaleTape,
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    LeakyRelu { a: usize, slope: f64 },
    Concat { parts: Vec<usize> },
    Slice { a: usize, start: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Gather { a: usize, index: Vec<Option<usize>> },
    ScatterSum { a: usize, index: Vec<usize> },
    Reshape { a: usize },
    Dropout { a: usize, mask: Vec<f64> },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Mae { a: usize, target: Vec<f64>, weight: Vec<f64> },
    Bce { a: usize, target: Vec<f64>, weight: Vec<f64> },
    Pick { a: usize, index: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by tensor.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` if it did not influence the
    /// root or does not require gradients.
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize]) -> Tensor {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Tensor(self.nodes.len() - 1)
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.len() > 3 || numel(shape) != len {
            return Err(AutodiffError::Invalid(format!(
                "shape {shape:?} does not describe {len} values (rank 1 to 3)"
            )));
        }
        Ok(())
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_shape(shape, value.len())?;
        self.nodes.push(Node { shape: shape.to_vec(), value, op: Op::Leaf, requires_grad: true });
        Ok(Tensor(self.nodes.len() - 1))
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_shape(shape, value.len())?;
        self.nodes.push(Node { shape: shape.to_vec(), value, op: Op::Leaf, requires_grad: false });
        Ok(Tensor(self.nodes.len() - 1))
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.0]
    }

    /// `a @ b` over the last two dims. `a` is `[m, k]` or `[batch, m, k]`;
    /// `b` is `[k, n]` (shared across the batch) or `[batch, k, n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        let mismatch = || AutodiffError::ShapeMismatch { op: "matmul", left: sa.clone(), right: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() == 3;
        if k != kb || (b_batched && (sa.len() != 3 || sb[0] != sa[0])) {
            return Err(mismatch());
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if b_batched { bi * k * n } else { 0 };
            for i in 0..m {
                let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
                for p in 0..k {
                    let x = av[(bi * m + i) * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[boff + p * n..boff + (p + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(shape, out, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.node(a).shape.clone();
        if s.len() < 2 {
            return Err(AutodiffError::ShapeMismatch { op: "transpose", left: s, right: vec![] });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s) / (r * c);
        let v = &self.node(a).value;
        let mut out = vec![0.0; v.len()];
        for bi in 0..batch {
            for i in 0..r {
                for j in 0..c {
                    out[bi * r * c + j * r + i] = v[bi * r * c + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Ok(self.push(shape, out, Op::Transpose { a: a.0 }, &[a.0]))
    }

    fn broadcast_check(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if suffix || numel(sb) == 1 {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch { op, left: sa.clone(), right: sb.clone() })
        }
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (or `b` has one element).
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.broadcast_check("add", a, b)?;
        let bv = &self.node(b).value;
        let out: Vec<f64> =
            self.node(a).value.iter().enumerate().map(|(i, &x)| x + bv[i % bv.len()]).collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Elementwise `a * b` with the broadcasting of [`Tape::add`].
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.broadcast_check("mul", a, b)?;
        let bv = &self.node(b).value;
        let out: Vec<f64> =
            self.node(a).value.iter().enumerate().map(|(i, &x)| x * bv[i % bv.len()]).collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let out = self.node(a).value.iter().map(|x| x * c).collect();
        let shape = self.node(a).shape.clone();
        self.push(shape, out, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let out = self.node(a).value.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.node(a).shape.clone();
        self.push(shape, out, Op::Relu { a: a.0 }, &[a.0])
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        let out = self.node(a).value.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let shape = self.node(a).shape.clone();
        self.push(shape, out, Op::LeakyRelu { a: a.0, slope }, &[a.0])
    }

    /// Concatenation along the last dim; leading dims must agree.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| AutodiffError::Invalid("concat of nothing".into()))?;
        let lead = self.node(*first).shape[..self.node(*first).shape.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.node(p).shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(AutodiffError::ShapeMismatch { op: "concat", left: self.node(*first).shape.clone(), right: s.clone() });
            }
            widths.push(last(s));
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.node(p).value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, out, Op::Concat { parts: ids.clone() }, &ids))
    }

    /// Columns `start..start + len` of the last dim.
    pub fn slice_last(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = self.node(a).shape.clone();
        let w = last(&s);
        if start + len > w || len == 0 {
            return Err(AutodiffError::IndexOutOfRange { op: "slice_last", index: start + len, size: w });
        }
        let rows = numel(&s) / w;
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, out, Op::Slice { a: a.0, start }, &[a.0]))
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let s = self.node(a).value.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { a: a.0 }, &[a.0])
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let v = &self.node(a).value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::MeanAll { a: a.0 }, &[a.0])
    }

    /// Rows of a `[r, d]` tensor by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Tensor, index: &[Option<usize>]) -> Result<Tensor> {
        let s = &self.node(a).shape;
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch { op: "gather_rows", left: s.clone(), right: vec![] });
        }
        let (r, d) = (s[0], s[1]);
        let v = &self.node(a).value;
        let mut out = vec![0.0; index.len() * d];
        for (k, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= r {
                    return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: i, size: r });
                }
                out[k * d..(k + 1) * d].copy_from_slice(&v[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(vec![index.len(), d], out, Op::Gather { a: a.0, index: index.to_vec() }, &[a.0]))
    }

    /// Embedding lookup: rows of `table` by id.
    pub fn embed(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &index)
    }

    /// Row `r` of the output is the sum of the value rows with `index == r`.
    pub fn scatter_sum(&mut self, values: Tensor, index: &[usize], out_size: usize) -> Result<Tensor> {
        let s = self.node(values).shape.clone();
        if s.len() != 2 || s[0] != index.len() {
            return Err(AutodiffError::ShapeMismatch { op: "scatter_sum", left: s, right: vec![index.len()] });
        }
        let d = s[1];
        let v = &self.node(values).value;
        let mut out = vec![0.0; out_size * d];
        for (k, &r) in index.iter().enumerate() {
            if r >= out_size {
                return Err(AutodiffError::IndexOutOfRange { op: "scatter_sum", index: r, size: out_size });
            }
            for j in 0..d {
                out[r * d + j] += v[k * d + j];
            }
        }
        Ok(self.push(vec![out_size, d], out, Op::ScatterSum { a: values.0, index: index.to_vec() }, &[values.0]))
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        let n = self.node(a).value.len();
        Self::check_shape(shape, n)?;
        let out = self.node(a).value.clone();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Inverted dropout: each entry is zeroed with probability `p` and the
    /// survivors are scaled by `1 / (1 - p)`. `p == 0` returns `a` itself.
    pub fn dropout(&mut self, a: Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.node(a).value.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out = self.node(a).value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, out, Op::Dropout { a: a.0, mask }, &[a.0]))
    }

    /// Softmax over the last dim; entries with `mask == false` are exactly 0.
    /// `mask` has one flag per element of `logits`.
    pub fn masked_softmax(&mut self, logits: Tensor, mask: &[bool]) -> Result<Tensor> {
        let s = self.node(logits).shape.clone();
        let v = &self.node(logits).value;
        if mask.len() != v.len() {
            return Err(AutodiffError::ShapeMismatch { op: "masked_softmax", left: s, right: vec![mask.len()] });
        }
        let w = last(&s);
        let mut out = vec![0.0; v.len()];
        for r in 0..v.len() / w {
            let row = r * w..(r + 1) * w;
            let max = v[row.clone()]
                .iter()
                .zip(&mask[row.clone()])
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(AutodiffError::FullyMaskedRow { row: r });
            }
            let mut total = 0.0;
            for j in row.clone() {
                if mask[j] {
                    out[j] = (v[j] - max).exp();
                    total += out[j];
                }
            }
            for o in &mut out[row] {
                *o /= total;
            }
        }
        Ok(self.push(s, out, Op::Softmax { a: logits.0 }, &[logits.0]))
    }

    /// Normalizes the last dim to zero mean and unit variance, then applies
    /// `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor) -> Result<Tensor> {
        let s = self.node(x).shape.clone();
        let d = last(&s);
        for t in [gain, bias] {
            if self.node(t).shape != [d] {
                return Err(AutodiffError::ShapeMismatch { op: "layer_norm", left: s, right: self.node(t).shape.clone() });
            }
        }
        let v = &self.node(x).value;
        let (g, b) = (&self.node(gain).value, &self.node(bias).value);
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std };
        Ok(self.push(s, out, op, &[x.0, gain.0, bias.0]))
    }

    fn loss_weights(&self, a: Tensor, target: &[f64], mask: &[bool], denom: Option<f64>) -> Result<Vec<f64>> {
        let n = self.node(a).value.len();
        if target.len() != n || mask.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "loss",
                left: self.node(a).shape.clone(),
                right: vec![target.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count() as f64;
        let denom = denom.unwrap_or(count);
        let w = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        Ok(mask.iter().map(|&m| if m { w } else { 0.0 }).collect())
    }

    /// `sum(mask * |a - target|) / denom`, where `denom` defaults to the number
    /// of unmasked entries. A fixed `denom` lets shard losses add up to the
    /// full-batch loss.
    pub fn mae_loss(&mut self, a: Tensor, target: &[f64], mask: &[bool], denom: Option<f64>) -> Result<Tensor> {
        let weight = self.loss_weights(a, target, mask, denom)?;
        let v = &self.node(a).value;
        let loss = v.iter().zip(target).zip(&weight).map(|((p, t), w)| if *w > 0.0 { w * (p - t).abs() } else { 0.0 }).sum();
        let op = Op::Mae { a: a.0, target: target.to_vec(), weight };
        Ok(self.push(vec![1], vec![loss], op, &[a.0]))
    }

    /// Binary cross-entropy on logits with the masking rules of
    /// [`Tape::mae_loss`].
    pub fn bce_with_logits(&mut self, a: Tensor, target: &[f64], mask: &[bool], denom: Option<f64>) -> Result<Tensor> {
        let weight = self.loss_weights(a, target, mask, denom)?;
        let v = &self.node(a).value;
        let loss = v
            .iter()
            .zip(target)
            .zip(&weight)
            .map(|((&z, &y), &w)| {
                if w > 0.0 {
                    w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                } else {
                    0.0
                }
            })
            .sum();
        let op = Op::Bce { a: a.0, target: target.to_vec(), weight };
        Ok(self.push(vec![1], vec![loss], op, &[a.0]))
    }

    /// Element `index` (flat) as a scalar.
    pub fn pick(&mut self, a: Tensor, index: usize) -> Result<Tensor> {
        let v = &self.node(a).value;
        if index >= v.len() {
            return Err(AutodiffError::IndexOutOfRange { op: "pick", index, size: v.len() });
        }
        let x = v[index];
        Ok(self.push(vec![1], vec![x], Op::Pick { a: a.0, index }, &[a.0]))
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&mut self, root: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::StaleTape);
        }
        if self.node(root).value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(self.node(root).shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (sa, sb) = (&na.shape, &nb.shape);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(sa) / (m * k);
                let b_batched = sb.len() == 3;
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let brow = &nb.value[boff + p * n..boff + (p + 1) * n];
                                ga[(bi * m + i) * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let x = na.value[(bi * m + i) * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &y) in gb[boff + p * n..boff + (p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..batch {
                        for i in 0..r {
                            for j in 0..c {
                                ga[bi * r * c + j * r + i] += g[bi * r * c + i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.accumulate(grads, *b, |gb| {
                    let l = gb.len();
                    for (i, x) in g.iter().enumerate() {
                        gb[i % l] += x;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in g.iter().enumerate() {
                        ga[i] += x * bv[i % bv.len()];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let l = gb.len();
                    for (i, x) in g.iter().enumerate() {
                        gb[i % l] += x * av[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x));
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += if av[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Concat { parts } => {
                let total = last(&node.shape);
                let rows = g.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = last(&self.nodes[p].shape);
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Slice { a, start } => {
                let w = last(&self.nodes[*a].shape);
                let len = last(&node.shape);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.len() / len {
                        for j in 0..len {
                            ga[r * w + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::SumAll { a } => self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::MeanAll { a } => {
                self.accumulate(grads, *a, |ga| {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                });
            }
            Op::Gather { a, index } => {
                let d = last(&node.shape);
                self.accumulate(grads, *a, |ga| {
                    for (k, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            for j in 0..d {
                                ga[i * d + j] += g[k * d + j];
                            }
                        }
                    }
                });
            }
            Op::ScatterSum { a, index } => {
                let d = last(&node.shape);
                self.accumulate(grads, *a, |ga| {
                    for (k, &r) in index.iter().enumerate() {
                        for j in 0..d {
                            ga[k * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)),
            Op::Dropout { a, mask } => {
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let w = last(&node.shape);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.len() / w {
                        let row = r * w..(r + 1) * w;
                        let dot: f64 = row.clone().map(|j| g[j] * y[j]).sum();
                        for j in row {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = last(&node.shape);
                let gv = &self.nodes[*gain].value;
                let rows = g.len() / d;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        let df = d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] += inv_std[r] / df * (df * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (i, x) in g.iter().enumerate() {
                        gg[i % d] += x * xhat[i];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (i, x) in g.iter().enumerate() {
                        gb[i % d] += x;
                    }
                });
            }
            Op::Mae { a, target, weight } => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        let diff = av[i] - target[i];
                        let s = if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                        ga[i] += g[0] * weight[i] * s;
                    }
                });
            }
            Op::Bce { a, target, weight } => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[0] * weight[i] * (sigmoid(av[i]) - target[i]);
                    }
                });
            }
            Op::Pick { a, index } => self.accumulate(grads, *a, |ga| ga[*index] += g[0]),
        }
    }
}
