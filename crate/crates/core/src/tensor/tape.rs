use std::collections::HashMap;

use super::kernels::{self, dot};
use super::{numel, Element, ParamId, ParamStore, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

/// One recorded operation. Index-valued attributes (ids, rows, targets) are
/// constants of the trace and carry no gradient.
#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Stitch {
        parts: Vec<Var>,
        rows: Vec<Vec<usize>>,
        total: usize,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        reduction: Reduction,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    AddScalars(Vec<Var>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalAttention { .. } => "causal_attention",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::Stitch { .. } => "stitch",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Pick { .. } => "pick",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(_) => "sum",
            Op::AddScalars(_) => "add_scalars",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::Sigmoid(x) | Op::Gelu(x) | Op::SoftmaxRows(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Embedding { table, .. } => vec![*table],
            Op::GatherRows { x, .. } | Op::Pick { x, .. } | Op::WeightedSum { x, .. } => vec![*x],
            Op::Stitch { parts, .. } => parts.clone(),
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::AddScalars(xs) => xs.clone(),
        }
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Node<T: Element> {
    shape: Vec<usize>,
    value: Vec<T>,
    /// Op-specific saved forward state (softmax probabilities, row stats).
    aux: Vec<T>,
    op: Op,
    needs_grad: bool,
}

struct Computed<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    aux: Vec<T>,
}

impl<T> Computed<T> {
    fn plain(shape: Vec<usize>, value: Vec<T>) -> Self {
        Computed {
            shape,
            value,
            aux: Vec::new(),
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order: every
/// node's inputs precede it.
#[derive(Debug, Clone)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    marks: Vec<(Var, &'static str)>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            marks: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it needs a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().map(|n| &n.op)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "node {} is not a scalar", v.0);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Attaches a label to a node, for structural assertions on the trace.
    pub fn mark(&mut self, v: Var, label: &'static str) {
        self.marks.push((v, label));
    }

    pub fn marked(&self, label: &str) -> Vec<Var> {
        self.marks
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.marks.iter().map(|(_, l)| *l).collect()
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Contract(format!("variable {} is not on this tape", v.0)))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        for v in op.inputs() {
            self.check(v)?;
        }
        let computed = self.compute(&op)?;
        let needs_grad = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape: computed.shape,
            value: computed.value,
            aux: computed.aux,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            aux: Vec::new(),
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf copied from a tensor; differentiable iff the tensor requires grad.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), Op::Input, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        ensure!(
            numel(&shape) == value.len(),
            Dimension,
            "constant shape {:?} needs {} values, got {}",
            shape,
            numel(&shape),
            value.len()
        );
        Ok(self.leaf(shape, value, Op::Input, false))
    }

    /// Leaf bound to a store parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), t.requires_grad());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Row-wise bias: `x[r, :] + b`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.push(Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    /// Multi-head causal self-attention over rows that hold consecutive
    /// sequences of `seq_len` tokens each.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        self.push(Op::CausalAttention {
            q,
            k,
            v,
            heads,
            seq_len,
        })
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows {
            x,
            rows: rows.to_vec(),
        })
    }

    /// Scatters the rows of each part into a `total`-row output; rows not
    /// covered by any part are zero.
    pub fn stitch(&mut self, parts: &[Var], rows: &[Vec<usize>], total: usize) -> Result<Var> {
        self.push(Op::Stitch {
            parts: parts.to_vec(),
            rows: rows.to_vec(),
            total,
        })
    }

    /// `x[r, :] * s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleRows { x, s })
    }

    /// `out[r] = x[r, cols[r]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        self.push(Op::Pick {
            x,
            cols: cols.to_vec(),
        })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(x))
    }

    /// Softmax cross-entropy of each logit row against its target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            reduction,
        })
    }

    /// `−log softmax(logits)[target]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.cross_entropy(logits, &[target], Reduction::Sum)
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        self.push(Op::WeightedSum { x, weights })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?.value.len();
        ensure!(n > 0, Contract, "mean of an empty tensor");
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::AddScalars(xs.to_vec()))
    }

    // ---------------------------------------------------------------- forward

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        ensure!(s.len() == 2, Dimension, "{what} must be a matrix, got shape {:?}", s);
        Ok((s[0], s[1]))
    }

    /// (rows, row width) view of a tensor with at least one axis.
    fn rows_of(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        ensure!(!s.is_empty(), Dimension, "{what} needs a leading row axis, got a scalar");
        let r = s[0];
        let w = self.node(v).value.len().checked_div(r).unwrap_or_else(|| numel(&s[1..]));
        Ok((r, w))
    }

    fn compute(&self, op: &Op) -> Result<Computed<T>> {
        match op {
            Op::Input | Op::Param(_) => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix(*a, "matmul lhs")?;
                let (k2, n) = self.matrix(*b, "matmul rhs")?;
                ensure!(
                    k == k2,
                    Dimension,
                    "matmul inner extents differ: {:?} x {:?}",
                    self.node(*a).shape,
                    self.node(*b).shape
                );
                let mut c = vec![T::zero(); m * n];
                kernels::matmul_acc(&self.node(*a).value, &self.node(*b).value, &mut c, m, k, n);
                Ok(Computed::plain(vec![m, n], c))
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.matrix(*a, "matmul_nt lhs")?;
                let (n, k2) = self.matrix(*b, "matmul_nt rhs")?;
                ensure!(
                    k == k2,
                    Dimension,
                    "matmul_nt inner extents differ: {:?} x {:?}ᵀ",
                    self.node(*a).shape,
                    self.node(*b).shape
                );
                let mut c = vec![T::zero(); m * n];
                kernels::matmul_nt_acc(&self.node(*a).value, &self.node(*b).value, &mut c, m, k, n);
                Ok(Computed::plain(vec![m, n], c))
            }
            Op::Add(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                ensure!(
                    na.shape == nb.shape,
                    Dimension,
                    "add shapes differ: {:?} vs {:?}",
                    na.shape,
                    nb.shape
                );
                let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| x + y).collect();
                Ok(Computed::plain(na.shape.clone(), v))
            }
            Op::Mul(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                ensure!(
                    na.shape == nb.shape,
                    Dimension,
                    "mul shapes differ: {:?} vs {:?}",
                    na.shape,
                    nb.shape
                );
                let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| x * y).collect();
                Ok(Computed::plain(na.shape.clone(), v))
            }
            Op::AddBias(x, b) => {
                let (r, c) = self.matrix(*x, "add_bias input")?;
                let nb = self.node(*b);
                ensure!(
                    nb.shape == [c],
                    Dimension,
                    "bias shape {:?} does not match row width {c}",
                    nb.shape
                );
                let mut v = self.node(*x).value.clone();
                for row in v.chunks_mut(c.max(1)).take(r) {
                    row.iter_mut().zip(&nb.value).for_each(|(y, &bb)| *y += bb);
                }
                Ok(Computed::plain(vec![r, c], v))
            }
            Op::Scale(x, c) => {
                let n = self.node(*x);
                let c = T::of(*c);
                Ok(Computed::plain(n.shape.clone(), n.value.iter().map(|&y| y * c).collect()))
            }
            Op::Sigmoid(x) => {
                let n = self.node(*x);
                Ok(Computed::plain(
                    n.shape.clone(),
                    n.value.iter().map(|&y| kernels::sigmoid(y)).collect(),
                ))
            }
            Op::Gelu(x) => {
                let n = self.node(*x);
                Ok(Computed::plain(
                    n.shape.clone(),
                    n.value.iter().map(|&y| kernels::gelu(y).0).collect(),
                ))
            }
            Op::LayerNorm { x, gain, bias } => self.layer_norm_forward(*x, *gain, *bias),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
            } => self.attention_forward(*q, *k, *v, *heads, *seq_len),
            Op::Embedding { table, ids } => {
                let (vocab, w) = self.matrix(*table, "embedding table")?;
                let tv = &self.node(*table).value;
                let mut out = Vec::with_capacity(ids.len() * w);
                for &id in ids {
                    ensure!(id < vocab, Index, "id {id} out of range for table of {vocab} rows");
                    out.extend_from_slice(&tv[id * w..(id + 1) * w]);
                }
                Ok(Computed::plain(vec![ids.len(), w], out))
            }
            Op::GatherRows { x, rows } => {
                let (r, w) = self.rows_of(*x, "gather_rows input")?;
                let xv = &self.node(*x).value;
                let mut out = Vec::with_capacity(rows.len() * w);
                for &row in rows {
                    ensure!(row < r, Index, "row {row} out of range for {r} rows");
                    out.extend_from_slice(&xv[row * w..(row + 1) * w]);
                }
                let mut shape = self.node(*x).shape.clone();
                shape[0] = rows.len();
                Ok(Computed::plain(shape, out))
            }
            Op::Stitch { parts, rows, total } => {
                ensure!(!parts.is_empty(), Contract, "stitch needs at least one part");
                ensure!(
                    parts.len() == rows.len(),
                    Contract,
                    "stitch got {} parts but {} row lists",
                    parts.len(),
                    rows.len()
                );
                let tail = self.node(parts[0]).shape[1..].to_vec();
                let w = numel(&tail);
                let mut out = vec![T::zero(); total * w];
                for (p, idx) in parts.iter().zip(rows) {
                    let pn = self.node(*p);
                    ensure!(
                        pn.shape.len() == tail.len() + 1 && pn.shape[1..] == tail[..] && pn.shape[0] == idx.len(),
                        Dimension,
                        "stitch part shape {:?} inconsistent with {} rows of width {:?}",
                        pn.shape,
                        idx.len(),
                        tail
                    );
                    for (src, &dst) in idx.iter().enumerate() {
                        ensure!(dst < *total, Index, "stitch row {dst} out of range for {total}");
                        let o = &mut out[dst * w..(dst + 1) * w];
                        o.iter_mut()
                            .zip(&pn.value[src * w..(src + 1) * w])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
                let mut shape = vec![*total];
                shape.extend(tail);
                Ok(Computed::plain(shape, out))
            }
            Op::ScaleRows { x, s } => {
                let (r, w) = self.rows_of(*x, "scale_rows input")?;
                let sn = self.node(*s);
                ensure!(
                    sn.shape == [r],
                    Dimension,
                    "row scales {:?} do not match {r} rows",
                    sn.shape
                );
                let mut v = self.node(*x).value.clone();
                if w > 0 {
                    for (row, &c) in v.chunks_mut(w).zip(&sn.value) {
                        row.iter_mut().for_each(|y| *y *= c);
                    }
                }
                Ok(Computed::plain(self.node(*x).shape.clone(), v))
            }
            Op::Pick { x, cols } => {
                let (r, c) = self.matrix(*x, "pick input")?;
                ensure!(
                    cols.len() == r,
                    Dimension,
                    "pick needs one column per row: {} rows, {} columns",
                    r,
                    cols.len()
                );
                let xv = &self.node(*x).value;
                let mut out = Vec::with_capacity(r);
                for (row, &col) in cols.iter().enumerate() {
                    ensure!(col < c, Index, "column {col} out of range for {c} columns");
                    out.push(xv[row * c + col]);
                }
                Ok(Computed::plain(vec![r], out))
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = self.matrix(*x, "softmax input")?;
                let xv = &self.node(*x).value;
                let mut out = vec![T::zero(); xv.len()];
                if c > 0 {
                    for (src, dst) in xv.chunks(c).zip(out.chunks_mut(c)) {
                        softmax_into(src, dst);
                    }
                }
                Ok(Computed::plain(self.node(*x).shape.clone(), out))
            }
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                let shape = &self.node(*logits).shape;
                let (r, c) = match shape.len() {
                    1 => (1, shape[0]),
                    2 => (shape[0], shape[1]),
                    _ => {
                        return Err(Error::Dimension(format!(
                            "cross-entropy logits must be a vector or matrix, got {:?}",
                            shape
                        )))
                    }
                };
                ensure!(
                    targets.len() == r,
                    Contract,
                    "cross-entropy got {} targets for {} rows",
                    targets.len(),
                    r
                );
                ensure!(r > 0 && c > 0, Contract, "cross-entropy over an empty tensor");
                let xv = &self.node(*logits).value;
                let mut probs = vec![T::zero(); xv.len()];
                let mut total = 0.0f64;
                for (row, &t) in targets.iter().enumerate() {
                    ensure!(t < c, Index, "target {t} out of range for {c} classes");
                    let src = &xv[row * c..(row + 1) * c];
                    let max = src.iter().fold(f64::NEG_INFINITY, |m, &y| m.max(y.f64()));
                    let z: f64 = src.iter().map(|&y| (y.f64() - max).exp()).sum();
                    let lse = max + z.ln();
                    total += lse - src[t].f64();
                    for (p, &y) in probs[row * c..(row + 1) * c].iter_mut().zip(src) {
                        *p = T::of((y.f64() - lse).exp());
                    }
                }
                if *reduction == Reduction::Mean {
                    total /= r as f64;
                }
                Ok(Computed {
                    shape: Vec::new(),
                    value: vec![T::of(total)],
                    aux: probs,
                })
            }
            Op::WeightedSum { x, weights } => {
                let xv = &self.node(*x).value;
                ensure!(
                    weights.len() == xv.len(),
                    Dimension,
                    "weighted_sum got {} weights for {} values",
                    weights.len(),
                    xv.len()
                );
                let s: f64 = xv.iter().zip(weights).map(|(&y, &w)| y.f64() * w).sum();
                Ok(Computed::plain(Vec::new(), vec![T::of(s)]))
            }
            Op::Sum(x) => {
                let s: f64 = self.node(*x).value.iter().map(|y| y.f64()).sum();
                Ok(Computed::plain(Vec::new(), vec![T::of(s)]))
            }
            Op::AddScalars(xs) => {
                let mut s = 0.0f64;
                for x in xs {
                    let n = self.node(*x);
                    ensure!(
                        n.value.len() == 1,
                        Dimension,
                        "add_scalars operand has shape {:?}",
                        n.shape
                    );
                    s += n.value[0].f64();
                }
                Ok(Computed::plain(Vec::new(), vec![T::of(s)]))
            }
        }
    }

    fn layer_norm_forward(&self, x: Var, gain: Var, bias: Var) -> Result<Computed<T>> {
        let (r, c) = self.matrix(x, "layer_norm input")?;
        ensure!(
            self.node(gain).shape == [c] && self.node(bias).shape == [c],
            Dimension,
            "layer_norm gain {:?} / bias {:?} must have width {c}",
            self.node(gain).shape,
            self.node(bias).shape
        );
        let xv = &self.node(x).value;
        let g = &self.node(gain).value;
        let b = &self.node(bias).value;
        let mut out = vec![T::zero(); r * c];
        let mut aux = Vec::with_capacity(2 * r);
        for row in 0..r {
            let src = &xv[row * c..(row + 1) * c];
            let mean = src.iter().map(|y| y.f64()).sum::<f64>() / c as f64;
            let var = src.iter().map(|y| (y.f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            let (mean_t, rstd_t) = (T::of(mean), T::of(rstd));
            for j in 0..c {
                out[row * c + j] = (src[j] - mean_t) * rstd_t * g[j] + b[j];
            }
            aux.push(mean_t);
            aux.push(rstd_t);
        }
        Ok(Computed {
            shape: vec![r, c],
            value: out,
            aux,
        })
    }

    fn attention_forward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    ) -> Result<Computed<T>> {
        let (r, d) = self.matrix(q, "attention query")?;
        ensure!(
            self.node(k).shape == [r, d] && self.node(v).shape == [r, d],
            Dimension,
            "attention q/k/v shapes differ: {:?} {:?} {:?}",
            self.node(q).shape,
            self.node(k).shape,
            self.node(v).shape
        );
        ensure!(heads > 0 && d % heads == 0, Dimension, "width {d} not divisible by {heads} heads");
        ensure!(
            seq_len > 0 && r % seq_len == 0,
            Dimension,
            "{r} rows do not split into sequences of {seq_len}"
        );
        let (qv, kv, vv) = (&self.node(q).value, &self.node(k).value, &self.node(v).value);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let batches = r / seq_len;
        let s = seq_len;
        let mut out = vec![T::zero(); r * d];
        let mut probs = vec![T::zero(); batches * heads * s * s];
        let mut logits = vec![T::zero(); s];
        for b in 0..batches {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * s * s;
                for i in 0..s {
                    let qi = &qv[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &kv[(b * s + j) * d + off..(b * s + j) * d + off + dh];
                        logits[j] = dot(qi, kj) * scale;
                        max = max.max(logits[j]);
                    }
                    let mut z = T::zero();
                    for l in logits.iter_mut().take(i + 1) {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    let prow = &mut probs[pbase + i * s..pbase + i * s + s];
                    let orow = &mut out[(b * s + i) * d + off..(b * s + i) * d + off + dh];
                    for j in 0..=i {
                        let p = logits[j] / z;
                        prow[j] = p;
                        kernels::axpy(p, &vv[(b * s + j) * d + off..(b * s + j) * d + off + dh], orow);
                    }
                }
            }
        }
        Ok(Computed {
            shape: vec![r, d],
            value: out,
            aux: probs,
        })
    }

    /// Re-evaluates every non-leaf node from its recorded inputs and reports
    /// whether all values come out bit-identical.
    pub fn replay(&self) -> Result<bool> {
        for n in &self.nodes {
            if matches!(n.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let c = self.compute(&n.op)?;
            let same = c.shape == n.shape
                && c.value.len() == n.value.len()
                && c.value.iter().zip(&n.value).all(|(a, b)| a.to_bits_eq(*b));
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    // --------------------------------------------------------------- backward

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// needs one.
    pub fn gradients(&self, root: Var) -> Result<Gradients<T>> {
        let rn = self.check(root)?;
        ensure!(
            rn.value.len() == 1,
            Contract,
            "backward root must be a scalar, got shape {:?}",
            rn.shape
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !rn.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that also accumulates into every trainable parameter of
    /// `store` referenced by this tape. Calls accumulate until
    /// [`ParamStore::zero_grads`].
    pub fn backward(&self, root: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(root)?;
        for (&id, &v) in &self.params {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.node(*a).shape[0], self.node(*a).shape[1]);
                let n = self.node(*b).shape[1];
                if wants(a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, &self.node(*b).value, ga, m, n, k);
                }
                if wants(b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(&self.node(*a).value, g, gb, k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.node(*a).shape[0], self.node(*a).shape[1]);
                let n = self.node(*b).shape[0];
                if wants(a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_acc(g, &self.node(*b).value, ga, m, n, k);
                }
                if wants(b) {
                    let gb = slot(grads, *b, n * k);
                    kernels::matmul_tn_acc(g, &self.node(*a).value, gb, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if wants(x) {
                        let gx = slot(grads, *x, g.len());
                        gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if wants(x) {
                        let ov = &self.node(*other).value;
                        let gx = slot(grads, *x, g.len());
                        for ((s, &d), &o) in gx.iter_mut().zip(g).zip(ov) {
                            *s += d * o;
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let c = self.node(*b).value.len();
                if wants(x) {
                    let gx = slot(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
                if wants(b) && c > 0 {
                    let gb = slot(grads, *b, c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(x) {
                    let c = T::of(*c);
                    let gx = slot(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(s, &d)| *s += d * c);
                }
            }
            Op::Sigmoid(x) => {
                if wants(x) {
                    let gx = slot(grads, *x, g.len());
                    for ((s, &d), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *s += d * y * (T::one() - y);
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let xv = &self.node(*x).value;
                    let gx = slot(grads, *x, g.len());
                    for ((s, &d), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *s += d * kernels::gelu(xi).1;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => self.layer_norm_backward(node, *x, *gain, *bias, g, grads),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                seq_len,
            } => self.attention_backward(node, (*q, *k, *v), *heads, *seq_len, g, grads),
            Op::Embedding { table, ids } => {
                if wants(table) {
                    let (vocab, w) = (self.node(*table).shape[0], self.node(*table).shape[1]);
                    let gt = slot(grads, *table, vocab * w);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * w..(id + 1) * w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(x) {
                    let n = self.node(*x).value.len();
                    let w = if rows.is_empty() { 0 } else { g.len() / rows.len() };
                    let gx = slot(grads, *x, n);
                    for (r, &row) in rows.iter().enumerate() {
                        let dst = &mut gx[row * w..(row + 1) * w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Stitch { parts, rows, total } => {
                let w = if *total == 0 { 0 } else { g.len() / total };
                for (p, idx) in parts.iter().zip(rows) {
                    if !wants(p) {
                        continue;
                    }
                    let gp = slot(grads, *p, idx.len() * w);
                    for (src, &dst) in idx.iter().enumerate() {
                        gp[src * w..(src + 1) * w]
                            .iter_mut()
                            .zip(&g[dst * w..(dst + 1) * w])
                            .for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let r = self.node(*s).value.len();
                let w = g.len().checked_div(r).unwrap_or(0);
                if w == 0 {
                    return;
                }
                if wants(x) {
                    let sv = &self.node(*s).value;
                    let gx = slot(grads, *x, g.len());
                    for ((dst, src), &c) in gx.chunks_mut(w).zip(g.chunks(w)).zip(sv) {
                        dst.iter_mut().zip(src).for_each(|(a, &d)| *a += d * c);
                    }
                }
                if wants(s) {
                    let xv = &self.node(*x).value;
                    let gs = slot(grads, *s, r);
                    for (row, gsr) in gs.iter_mut().enumerate() {
                        *gsr += dot(&g[row * w..(row + 1) * w], &xv[row * w..(row + 1) * w]);
                    }
                }
            }
            Op::Pick { x, cols } => {
                if wants(x) {
                    let c = self.node(*x).shape[1];
                    let gx = slot(grads, *x, self.node(*x).value.len());
                    for (row, &col) in cols.iter().enumerate() {
                        gx[row * c + col] += g[row];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(x) {
                    let c = node.shape[1];
                    if c == 0 {
                        return;
                    }
                    let gx = slot(grads, *x, g.len());
                    for ((dst, gr), pr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let inner = dot(gr, pr);
                        for ((a, &d), &p) in dst.iter_mut().zip(gr).zip(pr) {
                            *a += p * (d - inner);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                if wants(logits) {
                    let r = targets.len();
                    let c = node.aux.len() / r;
                    let mut scale = g[0];
                    if *reduction == Reduction::Mean {
                        scale = scale / T::of(r as f64);
                    }
                    let gx = slot(grads, *logits, node.aux.len());
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let mut p = node.aux[row * c + j];
                            if j == t {
                                p -= T::one();
                            }
                            gx[row * c + j] += scale * p;
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if wants(x) {
                    let gx = slot(grads, *x, weights.len());
                    for (a, &w) in gx.iter_mut().zip(weights) {
                        *a += g[0] * T::of(w);
                    }
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let n = self.node(*x).value.len();
                    let gx = slot(grads, *x, n);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::AddScalars(xs) => {
                for x in xs {
                    if wants(x) {
                        slot(grads, *x, 1)[0] += g[0];
                    }
                }
            }
        }
    }

    fn layer_norm_backward(
        &self,
        node: &Node<T>,
        x: Var,
        gain: Var,
        bias: Var,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (r, c) = (node.shape[0], node.shape[1]);
        let xv = &self.node(x).value;
        let gv = &self.node(gain).value;
        let mut dgain = vec![T::zero(); c];
        let mut dbias = vec![T::zero(); c];
        let mut dx = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); c];
        let mut dxhat = vec![T::zero(); c];
        let inv_c = T::of(1.0 / c as f64);
        for row in 0..r {
            let (mean, rstd) = (node.aux[2 * row], node.aux[2 * row + 1]);
            let gr = &g[row * c..(row + 1) * c];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for j in 0..c {
                xhat[j] = (xv[row * c + j] - mean) * rstd;
                dxhat[j] = gr[j] * gv[j];
                dgain[j] += gr[j] * xhat[j];
                dbias[j] += gr[j];
                sum_d += dxhat[j];
                sum_dx += dxhat[j] * xhat[j];
            }
            for j in 0..c {
                dx[row * c + j] = rstd * (dxhat[j] - inv_c * sum_d - xhat[j] * inv_c * sum_dx);
            }
        }
        for (v, d) in [(x, dx), (gain, dgain), (bias, dbias)] {
            if self.nodes[v.0].needs_grad {
                let dst = slot(grads, v, d.len());
                dst.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node<T>,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        s: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (r, d) = (node.shape[0], node.shape[1]);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (&self.node(q).value, &self.node(k).value, &self.node(v).value);
        let mut dq = vec![T::zero(); r * d];
        let mut dk = vec![T::zero(); r * d];
        let mut dv = vec![T::zero(); r * d];
        let mut dp = vec![T::zero(); s];
        let batches = r / s;
        let row = |t: usize, off: usize| t * d + off..t * d + off + dh;
        for b in 0..batches {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * s * s;
                for i in 0..s {
                    let ti = b * s + i;
                    let go = &g[row(ti, off)];
                    let prow = &node.aux[pbase + i * s..pbase + i * s + s];
                    let mut inner = T::zero();
                    for j in 0..=i {
                        let tj = b * s + j;
                        dp[j] = dot(go, &vv[row(tj, off)]);
                        inner += prow[j] * dp[j];
                        kernels::axpy(prow[j], go, &mut dv[row(tj, off)]);
                    }
                    for j in 0..=i {
                        let tj = b * s + j;
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds != T::zero() {
                            kernels::axpy(ds, &kv[row(tj, off)], &mut dq[row(ti, off)]);
                            kernels::axpy(ds, &qv[row(ti, off)], &mut dk[row(tj, off)]);
                        }
                    }
                }
            }
        }
        for (var, dvar) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                let dst = slot(grads, var, dvar.len());
                dst.iter_mut().zip(&dvar).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

fn slot<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn softmax_into<T: Element>(src: &[T], dst: &mut [T]) {
    let max = src.iter().fold(T::neg_infinity(), |m, &y| m.max(y));
    let mut z = T::zero();
    for (d, &y) in dst.iter_mut().zip(src) {
        *d = (y - max).exp();
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d = *d / z);
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Element> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        self.f64().to_bits() == other.f64().to_bits()
    }
}
