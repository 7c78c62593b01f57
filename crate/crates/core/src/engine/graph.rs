use std::sync::Arc;

use super::gemm::gemm;
use super::kernels::{
    gelu, gelu_grad, layer_norm_forward, rope_apply, sigmoid, softmax_row, softplus,
};
use super::{EngineError, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Real),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { input: Var, rows: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize, end: usize },
    Sum(Var),
    Mean(Var),
    Variance(Var),
    MaskedSoftmax { input: Var, permit: Arc<Vec<bool>> },
    LayerNorm { input: Var, gain: Var, bias: Var, xhat: Vec<Real>, inv_std: Vec<Real> },
    Rope { input: Var, positions: Arc<Vec<usize>>, heads: usize, base: Real },
    PairDiff { input: Var, pairs: Arc<Vec<(usize, usize)>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<Real>>,
}

/// A recorded computation. Leaves registered with [`Graph::leaf`] receive
/// gradients from [`Graph::backward`]; constants never do.
///
/// Each graph belongs to one thread of execution; run independent graphs
/// side by side for data parallelism.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(t, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(t, Op::Sub(a, b), tracked)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(t, Op::Mul(a, b), tracked)
    }

    /// `[r, c] + [c]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, b) = (self.value(a), self.value(row));
        let (_, cols) = x.dims2();
        assert_eq!(b.len(), cols, "add_row width mismatch");
        let mut data = x.data().to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            for (v, bb) in chunk.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(t, Op::AddRow(a, row), tracked)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, c), tracked)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        let tracked = self.tracked(a) || self.tracked(s);
        self.push(t, Op::ScaleBy(a, s), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = x.dims2();
        let (k2, n) = y.dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} x {:?}", x.shape(), y.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, 0.0, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        self.push(Tensor::matrix(c, r, out), Op::Transpose(a), tracked)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Real::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        let tracked = self.tracked(a);
        self.push(t, op, tracked)
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = select_rows(self.value(table), ids);
        let tracked = self.tracked(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        )
    }

    /// Rows of `input` at `rows`, in that order.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Var {
        let out = select_rows(self.value(input), rows);
        let tracked = self.tracked(input);
        self.push(
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            tracked,
        )
    }

    /// Concatenates 2-d tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| self.value(*p).dims2()).collect();
        let out = match axis {
            0 => {
                let cols = dims[0].1;
                assert!(dims.iter().all(|d| d.1 == cols), "concat rows width mismatch");
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    data.extend_from_slice(self.value(*p).data());
                }
                Tensor::matrix(rows, cols, data)
            }
            1 => {
                let rows = dims[0].0;
                assert!(dims.iter().all(|d| d.0 == rows), "concat cols height mismatch");
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for (p, d) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.value(*p).data()[r * d.1..(r + 1) * d.1]);
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
            _ => panic!("concat axis must be 0 or 1"),
        };
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        )
    }

    /// `input[start..end]` along `axis`. Vectors are sliced along their only axis.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Var {
        let x = self.value(input);
        let out = if x.shape().len() == 1 {
            assert_eq!(axis, 0, "vectors only have axis 0");
            Tensor::vector(x.data()[start..end].to_vec())
        } else {
            let (r, c) = x.dims2();
            match axis {
                0 => {
                    assert!(end <= r && start <= end);
                    Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())
                }
                1 => {
                    assert!(end <= c && start <= end);
                    let w = end - start;
                    let mut data = Vec::with_capacity(r * w);
                    for row in x.data().chunks_exact(c) {
                        data.extend_from_slice(&row[start..end]);
                    }
                    Tensor::matrix(r, w, data)
                }
                _ => panic!("slice axis must be 0 or 1"),
            }
        };
        let tracked = self.tracked(input);
        self.push(
            out,
            Op::Slice {
                input,
                axis,
                start,
                end,
            },
            tracked,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<Real>() / x.len() as Real;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len() as Real;
        let mean = x.data().iter().sum::<Real>() / n;
        let v = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(v), Op::Variance(a), tracked)
    }

    /// Row-wise softmax restricted to `permit` (row-major, same shape as the input).
    pub fn masked_softmax(&mut self, input: Var, permit: Arc<Vec<bool>>) -> Result<Var, EngineError> {
        let x = self.value(input);
        let (rows, cols) = x.dims2();
        assert_eq!(permit.len(), rows * cols, "permit shape mismatch");
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            softmax_row(&x.data()[span.clone()], &permit[span.clone()], &mut out[span])
                .map_err(|()| EngineError::EmptyAttentionRow { row: r })?;
        }
        let t = Tensor::new(x.shape().to_vec(), out);
        let tracked = self.tracked(input);
        Ok(self.push(t, Op::MaskedSoftmax { input, permit }, tracked))
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: Real) -> Var {
        let x = self.value(input);
        let (rows, cols) = x.dims2();
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        layer_norm_forward(
            x.data(),
            cols,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        let t = Tensor::new(x.shape().to_vec(), out);
        let tracked = self.tracked(input) || self.tracked(gain) || self.tracked(bias);
        self.push(
            t,
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        )
    }

    /// Rotary position encoding applied per head with explicit per-row positions.
    pub fn rope(&mut self, input: Var, positions: Arc<Vec<usize>>, heads: usize, base: Real) -> Var {
        let x = self.value(input);
        let (rows, cols) = x.dims2();
        assert_eq!(rows, positions.len(), "one position per row");
        assert_eq!(cols % heads, 0, "width must split into heads");
        let mut out = vec![0.0; rows * cols];
        rope_apply(x.data(), cols, &positions, heads, base, 1.0, &mut out);
        let t = Tensor::new(x.shape().to_vec(), out);
        let tracked = self.tracked(input);
        self.push(
            t,
            Op::Rope {
                input,
                positions,
                heads,
                base,
            },
            tracked,
        )
    }

    /// `out[p] = x[j] - x[i]` for each `(i, j)` in `pairs`, over the flattened input.
    pub fn pair_diff(&mut self, input: Var, pairs: Arc<Vec<(usize, usize)>>) -> Var {
        let x = self.value(input).data();
        let out: Vec<Real> = pairs.iter().map(|&(i, j)| x[j] - x[i]).collect();
        let tracked = self.tracked(input);
        self.push(Tensor::vector(out), Op::PairDiff { input, pairs }, tracked)
    }

    /// Reverse-mode pass from a single-element `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), EngineError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(EngineError::NonScalarLoss { shape });
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse-mode pass seeded with explicit output adjoints.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<Real>)]) -> Result<(), EngineError> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut adj: Vec<Option<Vec<Real>>> = vec![None; top + 1];
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(EngineError::SeedShape {
                    expected: self.value(*v).len(),
                    got: g.len(),
                });
            }
            accumulate(&mut adj[v.0], g);
        }
        for i in (0..=top).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<Real>, adj: &mut [Option<Vec<Real>>]) {
        if matches!(self.nodes[i].op, Op::Leaf) {
            accumulate(&mut self.nodes[i].grad, &g);
            return;
        }
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].tracked;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(&mut adj[a.0], &g);
                }
                if tracked(*b) {
                    accumulate(&mut adj[b.0], &g);
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    accumulate(&mut adj[a.0], &g);
                }
                if tracked(*b) {
                    let neg: Vec<Real> = g.iter().map(|v| -v).collect();
                    accumulate(&mut adj[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let d: Vec<Real> = g.iter().zip(val(*b).data()).map(|(p, q)| p * q).collect();
                    accumulate(&mut adj[a.0], &d);
                }
                if tracked(*b) {
                    let d: Vec<Real> = g.iter().zip(val(*a).data()).map(|(p, q)| p * q).collect();
                    accumulate(&mut adj[b.0], &d);
                }
            }
            Op::AddRow(a, row) => {
                if tracked(*a) {
                    accumulate(&mut adj[a.0], &g);
                }
                if tracked(*row) {
                    let cols = val(*row).len();
                    let mut d = vec![0.0; cols];
                    for chunk in g.chunks_exact(cols) {
                        for (x, y) in d.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                    accumulate(&mut adj[row.0], &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<Real> = g.iter().map(|v| v * c).collect();
                accumulate(&mut adj[a.0], &d);
            }
            Op::ScaleBy(a, s) => {
                if tracked(*a) {
                    let c = val(*s).item();
                    let d: Vec<Real> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut adj[a.0], &d);
                }
                if tracked(*s) {
                    let d: Real = g.iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                    accumulate(&mut adj[s.0], &[d]);
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k) = x.dims2();
                let (_, n) = y.dims2();
                if tracked(*a) {
                    // dA = G * B^T
                    let slot = adj[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, &g, false, y.data(), true, 1.0, slot);
                }
                if tracked(*b) {
                    // dB = A^T * G
                    let slot = adj[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, x.data(), true, &g, false, 1.0, slot);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut adj[a.0], &d);
            }
            Op::Gelu(a) => {
                let d: Vec<Real> = g.iter().zip(val(*a).data()).map(|(gg, x)| gg * gelu_grad(*x)).collect();
                accumulate(&mut adj[a.0], &d);
            }
            Op::Exp(a) => {
                let y = nodes[i].value.data();
                let d: Vec<Real> = g.iter().zip(y).map(|(gg, yy)| gg * yy).collect();
                accumulate(&mut adj[a.0], &d);
            }
            Op::Log(a) => {
                let d: Vec<Real> = g.iter().zip(val(*a).data()).map(|(gg, x)| gg / x).collect();
                accumulate(&mut adj[a.0], &d);
            }
            Op::Softplus(a) => {
                let d: Vec<Real> = g.iter().zip(val(*a).data()).map(|(gg, x)| gg * sigmoid(*x)).collect();
                accumulate(&mut adj[a.0], &d);
            }
            Op::Gather { table, ids } => {
                let (v, cols) = val(*table).dims2();
                let slot = adj[table.0].get_or_insert_with(|| vec![0.0; v * cols]);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut slot[id * cols..(id + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *x += y;
                    }
                }
            }
            Op::SelectRows { input, rows } => {
                let (r, cols) = val(*input).dims2();
                let slot = adj[input.0].get_or_insert_with(|| vec![0.0; r * cols]);
                for (k, &src) in rows.iter().enumerate() {
                    let dst = &mut slot[src * cols..(src + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                        *x += y;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let dims: Vec<(usize, usize)> = parts.iter().map(|p| val(*p).dims2()).collect();
                match axis {
                    0 => {
                        let mut off = 0;
                        for (p, d) in parts.iter().zip(&dims) {
                            let n = d.0 * d.1;
                            if tracked(*p) {
                                accumulate(&mut adj[p.0], &g[off..off + n]);
                            }
                            off += n;
                        }
                    }
                    _ => {
                        let total: usize = dims.iter().map(|d| d.1).sum();
                        let mut col = 0;
                        for (p, d) in parts.iter().zip(&dims) {
                            if tracked(*p) {
                                let mut part = Vec::with_capacity(d.0 * d.1);
                                for r in 0..d.0 {
                                    part.extend_from_slice(&g[r * total + col..r * total + col + d.1]);
                                }
                                accumulate(&mut adj[p.0], &part);
                            }
                            col += d.1;
                        }
                    }
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let x = val(*input);
                let n = x.len();
                let slot = adj[input.0].get_or_insert_with(|| vec![0.0; n]);
                if x.shape().len() == 1 || *axis == 0 {
                    let c = if x.shape().len() == 1 { 1 } else { x.dims2().1 };
                    for (d, s) in slot[start * c..end * c].iter_mut().zip(&g) {
                        *d += s;
                    }
                } else {
                    let (r, c) = x.dims2();
                    let w = end - start;
                    for row in 0..r {
                        for k in 0..w {
                            slot[row * c + start + k] += g[row * w + k];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(&mut adj[a.0], &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                accumulate(&mut adj[a.0], &vec![g[0] / n as Real; n]);
            }
            Op::Variance(a) => {
                let x = val(*a).data();
                let n = x.len() as Real;
                let mean = x.iter().sum::<Real>() / n;
                let d: Vec<Real> = x.iter().map(|v| g[0] * 2.0 * (v - mean) / n).collect();
                accumulate(&mut adj[a.0], &d);
            }
            Op::MaskedSoftmax { input, permit } => {
                let y = nodes[i].value.data();
                let (rows, cols) = nodes[i].value.dims2();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: Real = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                    for c in span {
                        if permit[c] {
                            d[c] = y[c] * (g[c] - dot);
                        }
                    }
                }
                accumulate(&mut adj[input.0], &d);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = val(*gain).len();
                let gn = val(*gain).data();
                if tracked(*input) {
                    let mut d = vec![0.0; g.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gn[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= cols as Real;
                        m2 /= cols as Real;
                        for c in 0..cols {
                            d[r * cols + c] = inv * (gr[c] * gn[c] - m1 - hr[c] * m2);
                        }
                    }
                    accumulate(&mut adj[input.0], &d);
                }
                if tracked(*gain) || tracked(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    if tracked(*gain) {
                        accumulate(&mut adj[gain.0], &dg);
                    }
                    if tracked(*bias) {
                        accumulate(&mut adj[bias.0], &db);
                    }
                }
            }
            Op::Rope {
                input,
                positions,
                heads,
                base,
            } => {
                let (_, cols) = val(*input).dims2();
                let mut d = vec![0.0; g.len()];
                rope_apply(&g, cols, positions, *heads, *base, -1.0, &mut d);
                accumulate(&mut adj[input.0], &d);
            }
            Op::PairDiff { input, pairs } => {
                let n = val(*input).len();
                let slot = adj[input.0].get_or_insert_with(|| vec![0.0; n]);
                for (gg, &(a, b)) in g.iter().zip(pairs.iter()) {
                    slot[b] += gg;
                    slot[a] -= gg;
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<Real>>, g: &[Real]) {
    match slot {
        Some(buf) => {
            for (x, y) in buf.iter_mut().zip(g) {
                *x += y;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn select_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let (r, cols) = x.dims2();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &i in rows {
        assert!(i < r, "row {i} out of range for {r} rows");
        data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::matrix(rows.len(), cols, data)
}
