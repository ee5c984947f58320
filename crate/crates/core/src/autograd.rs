//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state for its backward rule. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Parameters are bound by reference: a tape borrows one trainable
//! [`ParamStore`] and any number of frozen ones, so evaluating a batch never
//! copies weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{matmul_into, Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softmax,
    Sigmoid,
    Gelu,
    LayerNorm,
}

/// Values captured from one attention call, for token scoring and diagnostics.
#[derive(Clone, Debug)]
pub struct AttentionCapture<T> {
    pub tokens: usize,
    pub heads: usize,
    /// Scaled dot-product scores before softmax, averaged over heads; `n x n`.
    pub raw_mean: Vec<T>,
    /// Post-softmax attention per head; `heads x n x n`.
    pub probs: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulRow {
        x: Var,
        gain: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Shift {
        x: Var,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        row: usize,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
        row: usize,
    },
    Reshape {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    MeanRows {
        x: Var,
        rows: usize,
    },
    Softmax {
        x: Var,
        width: usize,
    },
    Sigmoid {
        x: Var,
    },
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    LayerNorm {
        x: Var,
        width: usize,
        rstd: Vec<T>,
    },
    Ln {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        tokens: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
enum Value<T> {
    Owned(Vec<T>),
    Bound { slot: usize, index: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Binding<'p, T> {
    store: &'p ParamStore<T>,
    trainable: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<'p, T: Scalar> {
    stores: Vec<Binding<'p, T>>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` when `v` was unreachable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_len(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape whose parameter bindings come from `store` and receive gradients.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Tape {
            stores: vec![Binding {
                store,
                trainable: true,
            }],
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// A tape with no trainable store; useful for pure value computations.
    pub fn detached() -> Self {
        Tape {
            stores: Vec::new(),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// Makes the parameters of `store` bindable as constants on this tape.
    pub fn attach_frozen(&mut self, store: &'p ParamStore<T>) -> Result<()> {
        if self.stores.iter().any(|b| b.store.key() == store.key()) {
            return Err(Error::invalid("attach_frozen", "store already bound to this tape"));
        }
        self.stores.push(Binding {
            store,
            trainable: false,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(data) => data,
            Value::Bound { slot, index } => self.stores[*slot].store.by_index(*index).tensor.data(),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Binds a parameter. Repeated binds of the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let slot = self
            .stores
            .iter()
            .position(|b| b.store.key() == id.store)
            .expect("parameter store is not bound to this tape");
        let binding = &self.stores[slot];
        let param = binding.store.param(id);
        let node = Node {
            shape: param.tensor.shape().to_vec(),
            value: Value::Bound {
                slot,
                index: id.index(),
            },
            op: Op::Leaf,
            requires_grad: binding.trainable && param.requires_grad,
        };
        self.nodes.push(node);
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// A free leaf that does receive a gradient (useful in tests and probes).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let data = self.value(v).to_vec();
        let shape = self.shape(v).to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    // ----- primitives ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n, ta, tb, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                ta,
                tb,
            },
            rg,
        ))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    fn row_vector_check(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let sx = self.shape(x);
        let width = *sx.last().unwrap();
        if sx.len() < 2 || numel(self.shape(v)) != width {
            return Err(Error::shape(op, sx, self.shape(v)));
        }
        Ok(width)
    }

    /// `x[r, c] + bias[c]`, broadcasting over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let width = self.row_vector_check("add_bias", x, bias)?;
        let b = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .chunks(width)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, rg))
    }

    /// `x[r, c] * gain[c]`, broadcasting over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let width = self.row_vector_check("mul_row", x, gain)?;
        let g = self.value(gain);
        let out: Vec<T> = self
            .value(x)
            .chunks(width)
            .flat_map(|row| row.iter().zip(g).map(|(&v, &gg)| v * gg))
            .collect();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow { x, gain }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(x).iter().map(|&v| v * f).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor: f }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Shift { x }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, rg))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {} rows", s[0]),
            ));
        }
        let row = row_len(&s);
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                row,
            },
            rg,
        ))
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero tensor with `rows_out`
    /// rows. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows_out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s[0] != idx.len() {
            return Err(Error::invalid(
                "scatter_rows",
                format!("{} rows but {} indices", s[0], idx.len()),
            ));
        }
        let mut seen = vec![false; rows_out];
        for &i in idx {
            if i >= rows_out || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(
                    "scatter_rows",
                    format!("index {i} out of range or repeated (rows_out {rows_out})"),
                ));
            }
        }
        let row = row_len(&s);
        let src = self.value(x);
        let mut out = vec![T::zero(); rows_out * row];
        for (r, &i) in idx.iter().enumerate() {
            out[i * row..(i + 1) * row].copy_from_slice(&src[r * row..(r + 1) * row]);
        }
        let mut shape = s;
        shape[0] = rows_out;
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
                row,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s / n], Op::MeanAll { x }, rg)
    }

    /// Mean over the first axis: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("mean_rows", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![T::zero(); cols];
        for row in self.value(x).chunks(cols) {
            add_into(&mut out, row);
        }
        let inv = T::one() / T::of(rows as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1, cols], out, Op::MeanRows { x, rows }, rg))
    }

    // ----- activations --------------------------------------------------

    fn check_finite(&self, what: &str, x: Var) -> Result<()> {
        if self.value(x).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: format!("{what} input"),
            })
        }
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        match kind {
            Activation::Softmax => self.softmax(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Gelu => self.gelu(x),
            Activation::LayerNorm => self.layer_norm(x),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax", x)?;
        let width = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        out.chunks_mut(width).for_each(softmax_in_place);
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, width }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_finite("sigmoid", x)?;
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Sigmoid { x }, rg))
    }

    /// Gelu, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_finite("gelu", x)?;
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
        let xv = self.value(x);
        let tanh: Vec<T> = xv.iter().map(|&v| fast_tanh(c * (v + k * v * v * v))).collect();
        let out = xv
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Gelu { x, tanh }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.check_finite("layer_norm", x)?;
        let width = *self.shape(x).last().unwrap();
        if width < 2 {
            return Err(Error::invalid("layer_norm", "last axis must have at least 2 entries"));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_w = T::one() / T::of(width as f64);
        let mut out = self.value(x).to_vec();
        let mut rstd = Vec::with_capacity(out.len() / width);
        for row in out.chunks_mut(width) {
            let mean = row.iter().copied().sum::<T>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, width, rstd },
            rg,
        ))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|v| !(**v > T::zero())) {
            return Err(Error::invalid("ln", format!("non-positive input {v}")));
        }
        let out = self.value(x).iter().map(|&v| v.ln()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Ln { x }, rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Clamp { x, lo, hi }, rg)
    }

    // ----- losses -------------------------------------------------------

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse_loss", self.shape(pred), self.shape(target)));
        }
        let n = T::of(self.value(pred).len() as f64);
        let s: T = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![s / n], Op::Mse { a: pred, b: target }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} outside {classes} classes"),
            ));
        }
        self.check_finite("cross_entropy", logits)?;
        let mut probs = self.value(logits).to_vec();
        probs.chunks_mut(classes).for_each(softmax_in_place);
        let total: T = probs
            .chunks(classes)
            .zip(labels)
            .map(|(p, &y)| -p[y].max(T::min_positive_value()).ln())
            .sum();
        let loss = total / T::of(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- fused multi-head attention ----------------------------------

    /// Scaled dot-product attention over a packed `[n, 3d]` projection laid
    /// out as `[q | k | v]`, each split into `heads` contiguous column blocks.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        collect: bool,
    ) -> Result<(Var, Option<AttentionCapture<T>>)> {
        let s = self.shape(qkv);
        if s.len() != 2 || s[1] % 3 != 0 || heads == 0 || (s[1] / 3) % heads != 0 {
            return Err(Error::shape("attention", s, &[heads]));
        }
        let (n, d) = (s[0], s[1] / 3);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv);
        let stride = 3 * d;
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        let mut raw_mean = if collect { vec![T::zero(); n * n] } else { Vec::new() };
        let inv_heads = T::one() / T::of(heads as f64);
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            // S = scale * Q K^T
            T::gemm(
                n,
                dh,
                n,
                scale,
                &src[h * dh..],
                stride as isize,
                1,
                &src[d + h * dh..],
                1,
                stride as isize,
                T::zero(),
                p,
                n as isize,
                1,
            );
            if collect {
                for (acc, &v) in raw_mean.iter_mut().zip(p.iter()) {
                    *acc += v * inv_heads;
                }
            }
            p.chunks_mut(n).for_each(softmax_in_place);
            // O_h = P V_h
            T::gemm(
                n,
                n,
                dh,
                T::one(),
                p,
                n as isize,
                1,
                &src[2 * d + h * dh..],
                stride as isize,
                1,
                T::zero(),
                &mut out[h * dh..],
                d as isize,
                1,
            );
        }
        let capture = collect.then(|| AttentionCapture {
            tokens: n,
            heads,
            raw_mean,
            probs: probs.clone(),
        });
        let rg = self.rg(&[qkv]);
        let v = self.push(
            vec![n, d],
            out,
            Op::Attention {
                qkv,
                heads,
                tokens: n,
                probs,
            },
            rg,
        );
        Ok((v, capture))
    }

    // ----- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every parameter of the trainable store; parameters the
    /// loss does not reach get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Result<ParamGrads<T>> {
        let binding = self
            .stores
            .first()
            .filter(|b| b.trainable)
            .ok_or_else(|| Error::invalid("param_grads", "tape has no trainable store"))?;
        let mut out = ParamGrads::zeros_like(binding.store);
        for (id, &v) in &self.bound {
            if id.store != binding.store.key() {
                continue;
            }
            if let Some(g) = grads.get(v) {
                out.slot_mut(id.index()).copy_from_slice(g);
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, node: &Node<T>, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i));
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                ta,
                tb,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(da) = self.grad_buf(grads, a) {
                    if ta {
                        matmul_into(bv, g, da, k, n, m, tb, true, true);
                    } else {
                        matmul_into(g, bv, da, m, n, k, false, !tb, true);
                    }
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    if tb {
                        matmul_into(g, av, db, n, m, k, true, ta, true);
                    } else {
                        matmul_into(av, g, db, k, m, n, !ta, false, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.grad_buf(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.grad_buf(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &gg)| *d -= gg);
                }
            }
            &Op::Mul(a, b) => {
                let ga: Vec<T> = g.iter().zip(self.value(b)).map(|(&gg, &y)| gg * y).collect();
                let gb: Vec<T> = g.iter().zip(self.value(a)).map(|(&gg, &x)| gg * x).collect();
                if let Some(da) = self.grad_buf(grads, a) {
                    add_into(da, &ga);
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    add_into(db, &gb);
                }
            }
            &Op::AddBias { x, bias } => {
                let width = self.value(bias).len();
                if let Some(dx) = self.grad_buf(grads, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.grad_buf(grads, bias) {
                    for row in g.chunks(width) {
                        add_into(db, row);
                    }
                }
            }
            &Op::MulRow { x, gain } => {
                let gv = self.value(gain).to_vec();
                let width = gv.len();
                let xv = self.value(x);
                let mut dgain = vec![T::zero(); width];
                for (grow, xrow) in g.chunks(width).zip(xv.chunks(width)) {
                    for j in 0..width {
                        dgain[j] += grow[j] * xrow[j];
                    }
                }
                if let Some(dx) = self.grad_buf(grads, x) {
                    for (drow, grow) in dx.chunks_mut(width).zip(g.chunks(width)) {
                        for j in 0..width {
                            drow[j] += grow[j] * gv[j];
                        }
                    }
                }
                if let Some(dg) = self.grad_buf(grads, gain) {
                    add_into(dg, &dgain);
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * factor);
                }
            }
            &Op::Shift { x } | &Op::Reshape { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    add_into(dx, g);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.grad_buf(grads, p) {
                        add_into(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx, row } => {
                let row = *row;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * row..(src + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                }
            }
            Op::ScatterRows { x, idx, row } => {
                let row = *row;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut dx[r * row..(r + 1) * row], &g[dst * row..(dst + 1) * row]);
                    }
                }
            }
            &Op::SumAll { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::MeanAll { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let share = g[0] / T::of(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += share);
                }
            }
            &Op::MeanRows { x, rows } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    let inv = T::one() / T::of(rows as f64);
                    for drow in dx.chunks_mut(g.len()) {
                        drow.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * inv);
                    }
                }
            }
            &Op::Softmax { x, width } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(out.chunks(width))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..width {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ((d, &gg), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gg * y * (T::one() - y);
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
                let three = T::of(3.0);
                let xv = self.value(*x);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (((d, &gg), &v), &t) in dx.iter_mut().zip(g).zip(xv).zip(tanh) {
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *d += gg * (half * (T::one() + t) + half * v * dt);
                    }
                }
            }
            Op::LayerNorm { x, width, rstd } => {
                let width = *width;
                let inv_w = T::one() / T::of(width as f64);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for (((drow, grow), yrow), &r) in dx
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(out.chunks(width))
                        .zip(rstd)
                    {
                        let mean_g = grow.iter().copied().sum::<T>() * inv_w;
                        let mean_gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
                        for j in 0..width {
                            drow[j] += r * (grow[j] - mean_g - yrow[j] * mean_gy);
                        }
                    }
                }
            }
            &Op::Ln { x } => {
                let xv = self.value(x);
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gg / v;
                    }
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = self.value(x);
                if let Some(dx) = self.grad_buf(grads, x) {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v >= lo && v <= hi {
                            *d += gg;
                        }
                    }
                }
            }
            &Op::Mse { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let f = T::of(2.0) * g[0] / T::of(av.len() as f64);
                let diff: Vec<T> = av.iter().zip(bv).map(|(&p, &t)| f * (p - t)).collect();
                if let Some(da) = self.grad_buf(grads, a) {
                    add_into(da, &diff);
                }
                if let Some(db) = self.grad_buf(grads, b) {
                    db.iter_mut().zip(&diff).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let f = g[0] / T::of(labels.len() as f64);
                if let Some(dl) = self.grad_buf(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == y { T::one() } else { T::zero() };
                            dl[r * classes + c] += f * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                heads,
                tokens,
                probs,
            } => {
                let (n, heads) = (*tokens, *heads);
                let src = self.value(*qkv);
                let d = src.len() / (3 * n);
                let dh = d / heads;
                let stride = (3 * d) as isize;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let Some(dqkv) = self.grad_buf(grads, *qkv) else {
                    return;
                };
                let mut dp = vec![T::zero(); n * n];
                for h in 0..heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    // dV_h += P^T dO_h
                    T::gemm(
                        n,
                        n,
                        dh,
                        T::one(),
                        p,
                        1,
                        n as isize,
                        &g[h * dh..],
                        d as isize,
                        1,
                        T::one(),
                        &mut dqkv[2 * d + h * dh..],
                        stride,
                        1,
                    );
                    // dP = dO_h V_h^T
                    T::gemm(
                        n,
                        dh,
                        n,
                        T::one(),
                        &g[h * dh..],
                        d as isize,
                        1,
                        &src[2 * d + h * dh..],
                        1,
                        stride,
                        T::zero(),
                        &mut dp,
                        n as isize,
                        1,
                    );
                    // dS = scale * P ⊙ (dP - rowsum(dP ⊙ P))
                    for (dprow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                        let dot: T = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dprow[j] = scale * prow[j] * (dprow[j] - dot);
                        }
                    }
                    // dQ_h += dS K_h
                    T::gemm(
                        n,
                        n,
                        dh,
                        T::one(),
                        &dp,
                        n as isize,
                        1,
                        &src[d + h * dh..],
                        stride,
                        1,
                        T::one(),
                        &mut dqkv[h * dh..],
                        stride,
                        1,
                    );
                    // dK_h += dS^T Q_h
                    T::gemm(
                        n,
                        n,
                        dh,
                        T::one(),
                        &dp,
                        1,
                        n as isize,
                        &src[h * dh..],
                        stride,
                        1,
                        T::one(),
                        &mut dqkv[d + h * dh..],
                        stride,
                        1,
                    );
                }
            }
        }
    }
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
#[inline]
fn fast_tanh<T: Scalar>(v: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * v).exp() + T::one())
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[2.0, 3.0]);
    }

    #[test]
    fn concat_and_gather() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
        let x = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let gth = tape.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(gth), &[30.0, 10.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
        assert!(tape.mse_loss(a, c).is_err());
    }

    #[test]
    fn activations_match_hand_values() {
        let mut tape = Tape::<f64>::detached();
        let z = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let zero = tape.constant(t(&[1], &[0.0]));
        let sg = tape.sigmoid(zero).unwrap();
        assert_eq!(tape.value(sg), &[0.5]);
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let ln = tape.layer_norm(x).unwrap();
        // (x - 2) / sqrt(2/3 + eps)
        let expect = [-1.224_735, 0.0, 1.224_735];
        for (v, e) in tape.value(ln).iter().zip(expect) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }
        let one = tape.constant(t(&[1, 1], &[1.0]));
        assert!(tape.layer_norm(one).is_err());
        let bad = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.sigmoid(bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.constant(t(&[2], &[1.0, 3.0]));
        let b = tape.constant(t(&[2], &[2.0, 5.0]));
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.item(l), 2.5);
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let o = tape.constant(t(&[2], &[1.0, 1.0]));
        let l = tape.mse_loss(z, o).unwrap();
        assert_eq!(tape.item(l), 1.0);
        let l = tape.mse_loss(a, a).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn backward_hand_derivatives() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let w = tape.leaf(t(&[1], &[2.0]));
        let zero = tape.constant(t(&[1], &[0.0]));
        let l = tape.mse_loss(w, zero).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[4.0]);

        let mut tape = Tape::new(&store);
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_unreachable() {
        let mut store = ParamStore::<f64>::new();
        let pw = store.add("w", t(&[2], &[1.0, 1.0])).unwrap();
        let pu = store.add("u", t(&[2], &[1.0, 1.0])).unwrap();
        let mut tape = Tape::new(&store);
        let w = tape.param(pw);
        let _u = tape.param(pu);
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss { .. })));
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        let pg = tape.param_grads(&g).unwrap();
        assert_eq!(pg.get(pw), &[1.0, 1.0]);
        assert_eq!(pg.get(pu), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_store_gets_no_gradient() {
        let mut a = ParamStore::<f64>::new();
        let pa = a.add("a", t(&[1], &[3.0])).unwrap();
        let mut b = ParamStore::<f64>::new();
        let pb = b.add("b", t(&[1], &[5.0])).unwrap();
        let mut tape = Tape::new(&a);
        tape.attach_frozen(&b).unwrap();
        let va = tape.param(pa);
        let vb = tape.param(pb);
        assert!(!tape.requires_grad(vb));
        let prod = tape.mul(va, vb).unwrap();
        let g = tape.backward(prod).unwrap();
        assert_eq!(g.get(va).unwrap(), &[5.0]);
        assert!(g.get(vb).is_none());
    }

    #[test]
    fn attention_single_token_is_one() {
        let mut tape = Tape::<f64>::detached();
        let qkv = tape.constant(t(&[1, 6], &[0.3, -0.2, 1.0, 0.5, 2.0, -1.0]));
        let (out, cap) = tape.attention(qkv, 2, true).unwrap();
        let cap = cap.unwrap();
        assert_eq!(cap.probs, vec![1.0, 1.0]);
        // one token attends fully to itself: output equals v
        assert_eq!(tape.value(out), &[2.0, -1.0]);
    }
}
