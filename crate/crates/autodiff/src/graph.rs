use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation implemented outside this crate.
///
/// The forward value is computed by the caller; `backward` maps the output
/// gradient to one gradient per input (`None` for inputs that get nothing).
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Matmul(Var, Var),
    MatmulT(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        width: usize,
    },
    MaxRows(Var, Vec<usize>),
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// [`Graph::backward`] visits them once each by walking the tape backwards.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    grad_enabled: bool,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Graph<T> {
    /// A tape that records gradients, in evaluation mode (dropout off).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
            grad_enabled: true,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A tape in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    /// A tape that never needs gradients (pure inference).
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Excludes parameters from differentiation on this tape.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// An input whose gradient is wanted.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let ng = self.grad_enabled;
        self.push_with(value, Op::Leaf, ng)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let ng = self.grad_enabled && !self.frozen.contains(&id);
        let v = self.push_with(store.get(id).clone(), Op::Param, ng);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a vector `b` (length `cols`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(xv.cols(), bv.len(), "add_row: bias length");
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &q) in row.iter_mut().zip(bv.data()) {
                *o += q;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    /// Adds a constant tensor of the same shape (e.g. an attention mask).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), c.shape(), "add_const: shape");
        let data = xv.data().iter().zip(c.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        self.push(out, Op::AddConst(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar: scalar operand");
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalar(x, s), &[x, s])
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rank(), 2, "matmul: lhs must be a matrix");
        assert_eq!(y.rank(), 2, "matmul: rhs must be a matrix");
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        assert_eq!(y.rows(), k, "matmul: inner dimensions");
        let out = Tensor::matrix(m, n, kernels::matmul(x.data(), y.data(), m, k, n)).unwrap();
        self.push(out, Op::Matmul(a, b), &[a, b])
    }

    /// `[m,k] x [n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rank(), 2, "matmul_t: lhs must be a matrix");
        assert_eq!(y.rank(), 2, "matmul_t: rhs must be a matrix");
        let (m, k, n) = (x.rows(), x.cols(), y.rows());
        assert_eq!(y.cols(), k, "matmul_t: inner dimensions");
        let out = Tensor::matrix(m, n, kernels::matmul_bt(x.data(), y.data(), m, k, n)).unwrap();
        self.push(out, Op::MatmulT(a, b), &[a, b])
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat: row counts differ");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data).unwrap();
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows: column counts differ");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data).unwrap();
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols(), "slice_cols: out of range");
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data).unwrap();
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.rows(), "slice_rows: out of range");
        let c = v.cols();
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data).unwrap();
        self.push(out, Op::SliceRows(x, start), &[x])
    }

    /// Embedding lookup: rows `ids` of `table`, `[ids.len(), cols]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = self.value(table);
        let (rows, c) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < rows, "gather: index {i} out of range for {rows} rows");
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::matrix(ids.len(), c, data).unwrap();
        self.push(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), kernels::softmax_rows(v.data(), v.cols())).unwrap();
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(c) {
            let lse = kernels::logsumexp(row);
            data.extend(row.iter().map(|&z| z - lse));
        }
        let out = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Log-sum-exp over the last axis; one value per row.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data: Vec<T> = v.data().chunks(v.cols()).map(kernels::logsumexp).collect();
        let out = Tensor::vector(data);
        self.push(out, Op::LogSumExp(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        let c = v.cols();
        assert_eq!(v.rows(), targets.len(), "cross_entropy: one target per row");
        assert!(!targets.is_empty(), "cross_entropy: no rows");
        let probs = kernels::softmax_rows(v.data(), c);
        // Row losses summed in f64 so that equal rows average back exactly.
        let mut total = 0.0f64;
        for (row, &t) in v.data().chunks(c).zip(targets) {
            assert!(t < c, "cross_entropy: target {t} out of range");
            let loss = kernels::logsumexp(row) - row[t];
            total += loss.f64();
        }
        let out = Tensor::scalar(T::lit(total / targets.len() as f64));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(out, op, &[logits])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.len(), c, "layer_norm: gain width");
        assert_eq!(b.len(), c, "layer_norm: bias width");
        let n = T::lit(c as f64);
        let mut xhat = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.rows());
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::lit(eps)).sqrt();
            inv_std.push(inv);
            for (j, &z) in row.iter().enumerate() {
                let h = (z - mean) * inv;
                xhat.push(h);
                data.push(h * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).unwrap();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push(out, op, &[x, gain, bias])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// 1-D convolution with "same" padding.
    ///
    /// `x` is `[len, c_in]`, `w` is `[width * c_in, c_out]` (window-major), `b` is
    /// `[c_out]`. Output position `t` sees inputs `t - (width-1)/2 ..` over `width`
    /// steps, zero outside the sequence.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, width: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (len, c_in) = (xv.rows(), xv.cols());
        assert_eq!(wv.rows(), width * c_in, "conv1d: weight rows");
        let c_out = wv.cols();
        assert_eq!(self.value(b).len(), c_out, "conv1d: bias width");
        let patches = im2col(xv.data(), len, c_in, width);
        let mut data = kernels::matmul(&patches, wv.data(), len, width * c_in, c_out);
        let bv = self.value(b).data();
        for row in data.chunks_mut(c_out) {
            for (o, &q) in row.iter_mut().zip(bv) {
                *o += q;
            }
        }
        let out = Tensor::matrix(len, c_out, data).unwrap();
        self.push(out, Op::Conv1d { x, w, b, width }, &[x, w, b])
    }

    /// Max over rows (time), `[len, c] -> [1, c]`. Ties go to the earliest row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, c) = (v.rows(), v.cols());
        assert!(rows > 0, "max_rows: empty input");
        let mut arg = vec![0usize; c];
        let mut best = v.row(0).to_vec();
        for r in 1..rows {
            for (j, &z) in v.row(r).iter().enumerate() {
                if z > best[j] {
                    best[j] = z;
                    arg[j] = r;
                }
            }
        }
        let out = Tensor::matrix(1, c, best).unwrap();
        self.push(out, Op::MaxRows(x, arg), &[x])
    }

    /// Inverted dropout. The identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push(out, Op::Dropout(x, mask), &[x])
    }

    /// Sum of all elements (accumulated in f64).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    /// Mean of all elements (accumulated in f64).
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|v| v.f64()).sum();
        let out = Tensor::scalar(T::lit(s / v.len() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Scaled dot-product attention with an additive mask.
    ///
    /// `q` is `[n, d]`, `k` and `v` are `[m, d]`, `mask` is `[n, m]` with 0 where
    /// attention is allowed and a large negative number where it is not.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Tensor<T>) -> Var {
        let d = self.value(q).cols();
        let scores = self.matmul_t(q, k);
        let scaled = self.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
        let masked = self.add_const(scaled, mask);
        let weights = self.softmax(masked);
        self.matmul(weights, v)
    }

    /// Records a custom operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip_map(g, bv, |x, y| x * y));
                self.acc(grads, *b, || zip_map(g, av, |x, y| x * y));
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *b, || {
                    let c = g.cols();
                    let mut s = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (o, &v) in s.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::new(self.shape(*b).to_vec(), s).unwrap()
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, || Tensor::new(shape, gd.to_vec()).unwrap());
            }
            Op::Scale(x, c) => self.acc(grads, *x, || g.map(|v| v * *c)),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                self.acc(grads, *x, || g.map(|v| v * c));
                self.acc(grads, *s, || {
                    let dot: f64 = gd
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&p, &q)| p.f64() * q.f64())
                        .sum();
                    Tensor::new(self.shape(*s).to_vec(), vec![T::lit(dot)]).unwrap()
                });
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, || {
                    Tensor::matrix(m, k, kernels::matmul_bt(gd, bv.data(), m, n, k)).unwrap()
                });
                self.acc(grads, *b, || {
                    Tensor::matrix(k, n, kernels::matmul_at(av.data(), gd, m, k, n)).unwrap()
                });
            }
            Op::MatmulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                self.acc(grads, *a, || {
                    Tensor::matrix(m, k, kernels::matmul(gd, bv.data(), m, n, k)).unwrap()
                });
                self.acc(grads, *b, || {
                    Tensor::matrix(n, k, kernels::matmul_at(gd, av.data(), m, n, k)).unwrap()
                });
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let o = offset;
                    self.acc(grads, p, || {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[o..o + w]);
                        }
                        Tensor::new(self.shape(p).to_vec(), d).unwrap()
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let o = offset;
                    self.acc(grads, p, || {
                        Tensor::new(self.shape(p).to_vec(), gd[o..o + n].to_vec()).unwrap()
                    });
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (rows, cols, w) = (xv.rows(), xv.cols(), g.cols());
                self.acc(grads, *x, || {
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                    }
                    Tensor::new(xv.shape().to_vec(), d).unwrap()
                });
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                self.acc(grads, *x, || {
                    let mut d = vec![T::zero(); xv.len()];
                    d[start * c..start * c + gd.len()].copy_from_slice(gd);
                    Tensor::new(xv.shape().to_vec(), d).unwrap()
                });
            }
            Op::Gather(table, ids) => {
                let tv = self.value(*table);
                let c = tv.cols();
                self.acc(grads, *table, || {
                    let mut d = vec![T::zero(); tv.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, &v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    Tensor::new(tv.shape().to_vec(), d).unwrap()
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                self.acc(grads, *x, || {
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(c).zip(gd.chunks(c)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        d.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                    }
                    Tensor::new(y.shape().to_vec(), d).unwrap()
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                self.acc(grads, *x, || {
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(c).zip(gd.chunks(c)) {
                        let s = gr.iter().copied().fold(T::zero(), |a, b| a + b);
                        d.extend(yr.iter().zip(gr).map(|(&p, &q)| q - p.exp() * s));
                    }
                    Tensor::new(y.shape().to_vec(), d).unwrap()
                });
            }
            Op::LogSumExp(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                self.acc(grads, *x, || {
                    let p = kernels::softmax_rows(xv.data(), c);
                    let d = p
                        .chunks(c)
                        .zip(gd)
                        .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
                        .collect();
                    Tensor::new(xv.shape().to_vec(), d).unwrap()
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let c = *shape.last().unwrap();
                let scale = gd[0] / T::lit(targets.len() as f64);
                self.acc(grads, *logits, || {
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * c + t] -= scale;
                    }
                    Tensor::new(shape, d).unwrap()
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gv = self.value(*gain).data();
                self.acc(grads, *x, || {
                    let n = T::lit(c as f64);
                    let mut d = Vec::with_capacity(gd.len());
                    for ((gr, hr), &inv) in gd.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let s1 = dh.iter().copied().fold(T::zero(), |a, b| a + b);
                        let s2 = dh.iter().zip(hr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        d.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&p, &h)| inv / n * (n * p - s1 - h * s2)),
                        );
                    }
                    Tensor::new(self.shape(*x).to_vec(), d).unwrap()
                });
                self.acc(grads, *gain, || {
                    let mut d = vec![T::zero(); c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                    Tensor::new(self.shape(*gain).to_vec(), d).unwrap()
                });
                self.acc(grads, *bias, || {
                    let mut d = vec![T::zero(); c];
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            d[j] += gr[j];
                        }
                    }
                    Tensor::new(self.shape(*bias).to_vec(), d).unwrap()
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, || {
                    zip_map(g, xv, |q, z| if z > T::zero() { q } else { T::zero() })
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, || zip_map(g, xv, |q, z| q * kernels::gelu_grad(z)));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, *x, || zip_map(g, y, |q, s| q * s * (T::one() - s)));
            }
            Op::Tanh(x) => {
                let y = &node.value;
                self.acc(grads, *x, || zip_map(g, y, |q, t| q * (T::one() - t * t)));
            }
            Op::Conv1d { x, w, b, width } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (len, c_in, c_out) = (xv.rows(), xv.cols(), wv.cols());
                let kdim = width * c_in;
                if self.wants(*w) {
                    let patches = im2col(xv.data(), len, c_in, *width);
                    let dw = kernels::matmul_at(&patches, gd, len, kdim, c_out);
                    self.acc(grads, *w, || Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                self.acc(grads, *b, || {
                    let mut d = vec![T::zero(); c_out];
                    for row in gd.chunks(c_out) {
                        for (o, &v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::new(self.shape(*b).to_vec(), d).unwrap()
                });
                self.acc(grads, *x, || {
                    let dp = kernels::matmul_bt(gd, wv.data(), len, c_out, kdim);
                    let d = col2im(&dp, len, c_in, *width);
                    Tensor::new(xv.shape().to_vec(), d).unwrap()
                });
            }
            Op::MaxRows(x, arg) => {
                let xv = self.value(*x);
                let c = xv.cols();
                self.acc(grads, *x, || {
                    let mut d = vec![T::zero(); xv.len()];
                    for (j, &r) in arg.iter().enumerate() {
                        d[r * c + j] = gd[j];
                    }
                    Tensor::new(xv.shape().to_vec(), d).unwrap()
                });
            }
            Op::Dropout(x, mask) => {
                self.acc(grads, *x, || {
                    let d = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    Tensor::new(g.shape().to_vec(), d).unwrap()
                });
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, || Tensor::full(shape, gd[0]));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).len();
                self.acc(grads, *x, || Tensor::full(shape, gd[0] / T::lit(n as f64)));
            }
            Op::Custom(inputs, op) => {
                if !inputs.iter().any(|&v| self.wants(v)) {
                    return;
                }
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                assert_eq!(outs.len(), inputs.len(), "{}: gradient count", op.name());
                for (&v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        assert_eq!(d.shape(), self.shape(v), "{}: gradient shape", op.name());
                        self.acc(grads, v, || d);
                    }
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, make: impl FnOnce() -> Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        let d = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), d).unwrap()
}

fn im2col<T: Scalar>(x: &[T], len: usize, c_in: usize, width: usize) -> Vec<T> {
    let left = (width - 1) / 2;
    let mut out = vec![T::zero(); len * width * c_in];
    for t in 0..len {
        for k in 0..width {
            let src = t as isize + k as isize - left as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src = src as usize;
            let dst = t * width * c_in + k * c_in;
            out[dst..dst + c_in].copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
        }
    }
    out
}

fn col2im<T: Scalar>(patches: &[T], len: usize, c_in: usize, width: usize) -> Vec<T> {
    let left = (width - 1) / 2;
    let mut out = vec![T::zero(); len * c_in];
    for t in 0..len {
        for k in 0..width {
            let dst = t as isize + k as isize - left as isize;
            if dst < 0 || dst >= len as isize {
                continue;
            }
            let dst = dst as usize;
            let src = t * width * c_in + k * c_in;
            for j in 0..c_in {
                out[dst * c_in + j] += patches[src + j];
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a tape value, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter, if it was on the tape and reached.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Dense per-parameter gradients; parameters off the path get zeros.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros_like(store);
        let Gradients { mut grads, params } = self;
        for (id, v) in params {
            if let Some(g) = grads.get_mut(v.0).and_then(Option::take) {
                *out.get_mut(id) = g;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_then_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap());
        let y = g.softmax(z);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(z).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::vector(vec![3.0]));
        let a = g.mul(x, x);
        let b = g.mul(x, x);
        let s = g.add(a, b);
        let l = g.sum(s);
        assert_eq!(g.backward(l).unwrap().wrt(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.5), x);
    }

    #[test]
    fn unreached_param_gets_zeros() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = store.add("b", Tensor::vector(vec![5.0])).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let l = g.sum(av);
        let grads = g.backward(l).unwrap().into_param_grads(&store);
        assert_eq!(grads.get(a).data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).data(), &[0.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::vector(vec![1.0])).unwrap();
        let mut g = Graph::new();
        g.freeze([a]);
        let av = g.param(&store, a);
        let l = g.sum(av);
        assert!(g.backward(l).unwrap().param(a).is_none());
    }

    #[test]
    fn conv_same_padding_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        // width 2 has no right padding: output t = x[t] + x[t+1]
        let w = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, w, b, 2);
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 3.0]);
        let w3 = g.constant(Tensor::matrix(3, 1, vec![1.0, 10.0, 100.0]).unwrap());
        let y3 = g.conv1d(x, w3, b, 3);
        assert_eq!(g.value(y3).data(), &[210.0, 321.0, 32.0]);
    }
}
