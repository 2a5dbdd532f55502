//! Reverse-mode differentiation over a linear recording of tensor ops.
//!
//! Values are 2-D matrices (or vectors/scalars) in row-major order. Every op
//! views its inputs as `rows × cols`, where `cols` is the last axis.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{ParamId, ParameterSet};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn_acc, Tensor};

/// Layer-norm epsilon, added to the variance under the square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleRows(Var, Vec<T>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, T),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    Embedding(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Pick(Var, Vec<usize>),
    RepeatRows(Var, usize),
    GroupSum(Var, usize),
    BlockSoftmax(Var, usize, T),
    WeightedPool {
        alpha: Var,
        values: Var,
        block: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A single-threaded computation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    loaded: HashMap<ParamId, Var>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            loaded: HashMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-op finiteness check.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when a stochastic op (active dropout) has been recorded.
    pub fn has_stochastic_ops(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.op, Op::Dropout(..)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {name}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter; repeated loads return the same handle so that
    /// gradients from every use accumulate into one buffer.
    pub fn param(&mut self, set: &ParameterSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.loaded.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: set.get(id).value.clone(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.loaded.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn shape_str(&self, v: Var) -> String {
        format!("{:?}", self.value(v).shape())
    }

    /// `a[n×k] · b[k×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 || self.value(b).rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", self.shape_str(a), self.shape_str(b)),
            ));
        }
        let c = gemm_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::from_vec(&[n, m], c)?, Op::MatMul(a, b), "matmul")
    }

    /// `a[n×k] · b[m×k]ᵀ`, the usual `x · Wᵀ` of a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 || self.value(b).rank() != 2 {
            return Err(Error::dim(
                "matmul_t",
                format!("{} x {}ᵀ", self.shape_str(a), self.shape_str(b)),
            ));
        }
        let c = gemm_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::from_vec(&[n, m], c)?, Op::MatMulT(a, b), "matmul_t")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{} vs {}", self.shape_str(a), self.shape_str(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(&mut self, x: Var, b: Var, mulp: bool) -> Result<Var> {
        let name = if mulp { "mul_row" } else { "add_row" };
        let (_, c) = self.dims(x);
        if self.value(b).len() != c {
            return Err(Error::dim(
                name,
                format!("{} with row vector {}", self.shape_str(x), self.shape_str(b)),
            ));
        }
        let tb = self.value(b).data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &w) in row.iter_mut().zip(&tb) {
                if mulp {
                    *v *= w
                } else {
                    *v += w
                }
            }
        }
        let out = Tensor::from_vec(tx.shape(), data)?;
        let op = if mulp { Op::MulRow(x, b) } else { Op::AddRow(x, b) };
        self.push(out, op, name)
    }

    /// Adds a vector to every row (broadcast over the leading dim).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, false)
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        self.row_broadcast(x, w, true)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &'static str) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::from_vec(tx.shape(), tx.data().iter().map(|&v| f(v)).collect())?;
        self.push(out, op, name)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map(x, |v| v * c, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.map(x, |v| v + c, Op::AddScalar(x), "add_scalar")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.tanh(), Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    /// Multiplies row `r` by the constant `weights[r]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if weights.len() != r {
            return Err(Error::dim(
                "scale_rows",
                format!("{} rows vs {} weights", r, weights.len()),
            ));
        }
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for (row, &w) in data.chunks_mut(c).zip(weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let out = Tensor::from_vec(tx.shape(), data)?;
        self.push(out, Op::ScaleRows(x, weights.to_vec()), "scale_rows")
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let rows = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape_str(p)).collect();
            return Err(Error::dim("concat", shapes.join(", ")));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::from_vec(&[rows, total], data)?,
            Op::Concat(parts.to_vec()),
            "concat",
        )
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("[{start}, {}) of {}", start + len, self.shape_str(x)),
            ));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        self.push(
            Tensor::from_vec(&[r, len], data)?,
            Op::SliceCols(x, start),
            "slice_cols",
        )
    }

    /// Splits a matrix column-wise into consecutive blocks of the given sizes.
    pub fn split_cols(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.dims(x).1;
        if sizes.iter().sum::<usize>() != c {
            return Err(Error::dim(
                "split",
                format!("sizes {sizes:?} of {}", self.shape_str(x)),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice_cols(x, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        if temperature <= T::zero() {
            return Err(Error::Argument("softmax temperature must be > 0".into()));
        }
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row, temperature);
        }
        let out = Tensor::from_vec(tx.shape(), data)?;
        self.push(out, Op::Softmax(x, temperature), "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_vec(tx.shape(), data)?;
        self.push(out, Op::LogSoftmax(x), "log_softmax")
    }

    /// Normalizes each contiguous group of `cols / groups` entries along the
    /// last axis, then applies a per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(
                "layer_norm",
                format!("{} columns in {groups} groups", c),
            ));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {} gain {} bias {}",
                    self.shape_str(x),
                    self.shape_str(gain),
                    self.shape_str(bias)
                ),
            ));
        }
        let gsize = c / groups;
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(gsize as f64);
        let tx = self.value(x);
        let tg = self.value(gain).data();
        let tb = self.value(bias).data();
        let mut xhat = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(r * groups);
        for seg in xhat.chunks_mut(gsize) {
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            seg.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(tg).zip(tb) {
                *v = *v * g + b;
            }
        }
        let out = Tensor::from_vec(tx.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(tx.shape(), data)?;
        self.push(out, Op::Dropout(x, mask), "dropout")
    }

    /// Gathers columns `ids` of a `dim × vocab` table, one output row per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (dim, vocab) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Range(format!(
                "embedding id {bad} outside vocabulary of {vocab}"
            )));
        }
        let tt = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend((0..dim).map(|d| tt[d * vocab + id]));
        }
        self.push(
            Tensor::from_vec(&[ids.len(), dim], data)?,
            Op::Embedding(table, ids.to_vec()),
            "embedding",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(x), "sum_squares")
    }

    /// Picks `x[r, idx[r]]` for every row, giving a length-`rows` vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(Error::dim(
                "pick",
                format!("{} indices into {}", idx.len(), self.shape_str(x)),
            ));
        }
        let tx = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| tx.row(i)[j]).collect();
        self.push(Tensor::from_vec(&[r], data)?, Op::Pick(x, idx.to_vec()), "pick")
    }

    /// Repeats every row `times` times consecutively: `[B×C] → [B·times×C]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let tx = self.value(x);
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(tx.row(i));
            }
        }
        self.push(
            Tensor::from_vec(&[r * times, c], data)?,
            Op::RepeatRows(x, times),
            "repeat_rows",
        )
    }

    /// Sums contiguous column groups: `[R×C] → [R×groups]`.
    pub fn group_sum(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim("group_sum", format!("{c} columns in {groups} groups")));
        }
        let gs = c / groups;
        let tx = self.value(x);
        let data = tx
            .data()
            .chunks(gs)
            .map(|seg| seg.iter().copied().sum())
            .collect();
        self.push(
            Tensor::from_vec(&[r, groups], data)?,
            Op::GroupSum(x, groups),
            "group_sum",
        )
    }

    /// Softmax down the rows of each consecutive block of `block` rows,
    /// independently per column. For `[B·F × g]` scores this normalizes over
    /// the `F` locations of each batch item and head.
    pub fn block_softmax(&mut self, x: Var, block: usize, temperature: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        if block == 0 || r % block != 0 {
            return Err(Error::dim(
                "block_softmax",
                format!("{r} rows in blocks of {block}"),
            ));
        }
        if temperature <= T::zero() {
            return Err(Error::Argument("softmax temperature must be > 0".into()));
        }
        let mut data = self.value(x).data().to_vec();
        let mut col = vec![T::zero(); block];
        for b in 0..r / block {
            for h in 0..c {
                for j in 0..block {
                    col[j] = data[(b * block + j) * c + h];
                }
                softmax_in_place(&mut col, temperature);
                for j in 0..block {
                    data[(b * block + j) * c + h] = col[j];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[r, c], data)?,
            Op::BlockSoftmax(x, block, temperature),
            "block_softmax",
        )
    }

    /// Attention pooling. `alpha` is `[B·F × g]`, `values` is `[B·F × q]`;
    /// column `i` of the output is weighted by head `i / (q / g)`.
    /// Output is `[B × q]`.
    pub fn weighted_pool(&mut self, alpha: Var, values: Var, block: usize) -> Result<Var> {
        let (ra, g) = self.dims(alpha);
        let (rv, q) = self.dims(values);
        if ra != rv || block == 0 || ra % block != 0 || g == 0 || q % g != 0 {
            return Err(Error::dim(
                "weighted_pool",
                format!(
                    "alpha {} values {} block {block}",
                    self.shape_str(alpha),
                    self.shape_str(values)
                ),
            ));
        }
        let bsz = ra / block;
        let hs = q / g;
        let ta = self.value(alpha).data();
        let tv = self.value(values).data();
        let mut out = vec![T::zero(); bsz * q];
        for b in 0..bsz {
            let orow = &mut out[b * q..(b + 1) * q];
            for j in 0..block {
                let r = b * block + j;
                let arow = &ta[r * g..(r + 1) * g];
                let vrow = &tv[r * q..(r + 1) * q];
                for (i, o) in orow.iter_mut().enumerate() {
                    *o += arow[i / hs] * vrow[i];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[bsz, q], out)?,
            Op::WeightedPool {
                alpha,
                values,
                block,
            },
            "weighted_pool",
        )
    }

    /// Propagates `d loss / d node` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape_str(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(id) = node.op {
                let g = grads[idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params.push((id, g));
            }
        }
        Ok(Gradients { by_var: grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let dyd = dy.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).cols();
                let da = gemm_nt(dyd, val(*b).data(), n, m, k);
                accumulate(grads, *a, val(*a).shape(), &da);
                let mut db = vec![T::zero(); k * m];
                gemm_tn_acc(&mut db, val(*a).data(), dyd, n, k, m);
                accumulate(grads, *b, val(*b).shape(), &db);
            }
            Op::MatMulT(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).rows();
                let da = gemm_nn(dyd, val(*b).data(), n, m, k);
                accumulate(grads, *a, val(*a).shape(), &da);
                let mut db = vec![T::zero(); m * k];
                gemm_tn_acc(&mut db, dyd, val(*a).data(), n, m, k);
                accumulate(grads, *b, val(*b).shape(), &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, y.shape(), dyd);
                accumulate(grads, *b, y.shape(), dyd);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, y.shape(), dyd);
                let neg: Vec<T> = dyd.iter().map(|&v| -v).collect();
                accumulate(grads, *b, y.shape(), &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = dyd.iter().zip(val(*b).data()).map(|(&d, &v)| d * v).collect();
                let db: Vec<T> = dyd.iter().zip(val(*a).data()).map(|(&d, &v)| d * v).collect();
                accumulate(grads, *a, y.shape(), &da);
                accumulate(grads, *b, y.shape(), &db);
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, y.shape(), dyd);
                let c = y.cols();
                let mut db = vec![T::zero(); c];
                for row in dyd.chunks(c) {
                    for (g, &d) in db.iter_mut().zip(row) {
                        *g += d;
                    }
                }
                accumulate(grads, *b, val(*b).shape(), &db);
            }
            Op::MulRow(x, w) => {
                let c = y.cols();
                let tw = val(*w).data();
                let tx = val(*x).data();
                let mut dx = Vec::with_capacity(dyd.len());
                let mut dw = vec![T::zero(); c];
                for (drow, xrow) in dyd.chunks(c).zip(tx.chunks(c)) {
                    for j in 0..c {
                        dx.push(drow[j] * tw[j]);
                        dw[j] += drow[j] * xrow[j];
                    }
                }
                accumulate(grads, *x, y.shape(), &dx);
                accumulate(grads, *w, val(*w).shape(), &dw);
            }
            Op::Scale(x, c) => {
                let dx: Vec<T> = dyd.iter().map(|&d| d * *c).collect();
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::AddScalar(x) => accumulate(grads, *x, y.shape(), dyd),
            Op::ScaleRows(x, w) => {
                let c = y.cols();
                let mut dx = dyd.to_vec();
                for (row, &wr) in dx.chunks_mut(c).zip(w) {
                    row.iter_mut().for_each(|v| *v *= wr);
                }
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::Concat(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&dyd[r * total + start..r * total + start + w]);
                    }
                    accumulate(grads, p, val(p).shape(), &dp);
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let len = y.cols();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&dyd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, val(*x).shape(), &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<T> = dyd
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &t)| d * (T::one() - t * t))
                    .collect();
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<T> = dyd
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::Softmax(x, temp) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(dyd.len());
                for (drow, yrow) in dyd.chunks(c).zip(y.data().chunks(c)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                    dx.extend(drow.iter().zip(yrow).map(|(&d, &p)| p * (d - dot) / *temp));
                }
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(dyd.len());
                for (drow, yrow) in dyd.chunks(c).zip(y.data().chunks(c)) {
                    let total: T = drow.iter().copied().sum();
                    dx.extend(drow.iter().zip(yrow).map(|(&d, &lp)| d - lp.exp() * total));
                }
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                inv_std,
            } => {
                let c = y.cols();
                let gs = c / groups;
                let n = T::of(gs as f64);
                let tg = val(*gain).data();
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut dx = vec![T::zero(); dyd.len()];
                for (s, ((dseg, xseg), out)) in dyd
                    .chunks(gs)
                    .zip(xhat.chunks(gs))
                    .zip(dx.chunks_mut(gs))
                    .enumerate()
                {
                    let col0 = (s * gs) % c;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..gs {
                        let dxh = dseg[j] * tg[col0 + j];
                        sum_d += dxh;
                        sum_dx += dxh * xseg[j];
                        dgain[col0 + j] += dseg[j] * xseg[j];
                        dbias[col0 + j] += dseg[j];
                    }
                    let is = inv_std[s];
                    for j in 0..gs {
                        let dxh = dseg[j] * tg[col0 + j];
                        out[j] = is * (dxh - sum_d / n - xseg[j] * sum_dx / n);
                    }
                }
                accumulate(grads, *x, y.shape(), &dx);
                accumulate(grads, *gain, val(*gain).shape(), &dgain);
                accumulate(grads, *bias, val(*bias).shape(), &dbias);
            }
            Op::Dropout(x, mask) => {
                let dx: Vec<T> = dyd.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::Embedding(table, ids) => {
                let (dim, vocab) = (val(*table).rows(), val(*table).cols());
                let mut dt = vec![T::zero(); dim * vocab];
                for (r, &id) in ids.iter().enumerate() {
                    for d in 0..dim {
                        dt[d * vocab + id] += dyd[r * dim + d];
                    }
                }
                accumulate(grads, *table, val(*table).shape(), &dt);
            }
            Op::Sum(x) => {
                let dx = vec![dyd[0]; val(*x).len()];
                accumulate(grads, *x, val(*x).shape(), &dx);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let dx = vec![dyd[0] / T::of(n as f64); n];
                accumulate(grads, *x, val(*x).shape(), &dx);
            }
            Op::SumSquares(x) => {
                let two = T::of(2.0);
                let dx: Vec<T> = val(*x).data().iter().map(|&v| two * v * dyd[0]).collect();
                accumulate(grads, *x, val(*x).shape(), &dx);
            }
            Op::Pick(x, idx) => {
                let c = val(*x).cols();
                let mut dx = vec![T::zero(); val(*x).len()];
                for (r, &j) in idx.iter().enumerate() {
                    dx[r * c + j] += dyd[r];
                }
                accumulate(grads, *x, val(*x).shape(), &dx);
            }
            Op::RepeatRows(x, times) => {
                let c = y.cols();
                let r = val(*x).rows();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for t in 0..*times {
                        let src = &dyd[(i * times + t) * c..(i * times + t + 1) * c];
                        for (o, &d) in dx[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *o += d;
                        }
                    }
                }
                accumulate(grads, *x, val(*x).shape(), &dx);
            }
            Op::GroupSum(x, groups) => {
                let c = val(*x).cols();
                let gs = c / groups;
                let dx: Vec<T> = (0..val(*x).len()).map(|i| dyd[i / gs]).collect();
                accumulate(grads, *x, val(*x).shape(), &dx);
            }
            Op::BlockSoftmax(x, block, temp) => {
                let (r, c) = (y.rows(), y.cols());
                let yd = y.data();
                let mut dx = vec![T::zero(); r * c];
                for b in 0..r / block {
                    for h in 0..c {
                        let at = |j: usize| (b * block + j) * c + h;
                        let dot: T = (0..*block).map(|j| dyd[at(j)] * yd[at(j)]).sum();
                        for j in 0..*block {
                            dx[at(j)] = yd[at(j)] * (dyd[at(j)] - dot) / *temp;
                        }
                    }
                }
                accumulate(grads, *x, y.shape(), &dx);
            }
            Op::WeightedPool {
                alpha,
                values,
                block,
            } => {
                let g = val(*alpha).cols();
                let q = val(*values).cols();
                let hs = q / g;
                let ta = val(*alpha).data();
                let tv = val(*values).data();
                let rows = val(*alpha).rows();
                let mut da = vec![T::zero(); rows * g];
                let mut dv = vec![T::zero(); rows * q];
                for r in 0..rows {
                    let b = r / block;
                    let drow = &dyd[b * q..(b + 1) * q];
                    for i in 0..q {
                        let h = i / hs;
                        da[r * g + h] += drow[i] * tv[r * q + i];
                        dv[r * q + i] = ta[r * g + h] * drow[i];
                    }
                }
                accumulate(grads, *alpha, val(*alpha).shape(), &da);
                accumulate(grads, *values, val(*values).shape(), &dv);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], d: &[T]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, &b) in g.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_vec(shape, d.to_vec()).expect("gradient shape"));
        }
    }
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

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], temperature: T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_var: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if it influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    /// Adds parameter gradients into the set's gradient buffers.
    pub fn accumulate_into(&self, set: &mut ParameterSet<T>) {
        for (id, g) in &self.params {
            set.get_mut(*id).grad.add_assign(g);
        }
    }
}
