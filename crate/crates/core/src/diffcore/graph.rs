//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]; node creation order is a
//! topological order, so [`Graph::backward`] simply walks the tape in reverse.
//! Operations view their operands as matrices: the trailing extent is the
//! column count and all leading extents fold into the row count.
//!
//! Broadcasting (for [`Graph::add`] and [`Graph::mul`]) is deliberately narrow.
//! The right operand `b` of an `R x C` left operand may be
//!
//! * the same shape,
//! * `[1, C]` or `[C]`, broadcast over the leading (row) axis,
//! * `[R, 1]`, broadcast over the trailing (column) axis,
//! * a single element, broadcast everywhere.
//!
//! Anything else is a shape error naming both shapes.

use std::collections::HashMap;

use crate::diffcore::{ParamId, ParamStore, Real, Tensor, LN_EPS};
use crate::error::{Error, Result};

/// Additive mask value for a blocked attention entry.
pub const NEG_LARGE: f64 = -1e9;

/// Entries at or below this are treated as blocked.
const BLOCKED: f64 = NEG_LARGE * 0.5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize], rows: usize, cols: usize) -> Result<Self> {
        let bn: usize = b.iter().product();
        if a == b {
            return Ok(Bcast::Same);
        }
        if bn == 1 {
            return Ok(Bcast::Scalar);
        }
        let b_cols = *b.last().unwrap_or(&0);
        let b_rows = bn / b_cols.max(1);
        if b_cols == cols && b_rows == 1 {
            return Ok(Bcast::Row);
        }
        if b_cols == 1 && b_rows == rows && a.len() == b.len() {
            return Ok(Bcast::Col);
        }
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i * cols + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Scale { a: Var, c: T },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Mean { a: Var, axis: usize },
    Sum { a: Var },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward computation and its reverse sweep.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<'static, T> {
    /// A graph with no parameter store; leaves come from `constant`/`input`.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            backward_done: false,
        }
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store.expect("graph has no parameter store")
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter once per graph. Frozen parameters become
    /// constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store();
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---------------------------------------------------------------- ops

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n, rsb, csb) = if tb {
            (bv.cols(), bv.rows(), 1isize, bv.cols() as isize)
        } else {
            (bv.rows(), bv.cols(), bv.cols() as isize, 1isize)
        };
        if k != bk || bv.shape().len() > 2 {
            return Err(Error::Shape {
                op: if tb { "matmul_t" } else { "matmul" },
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        // SAFETY: dimensions and strides describe the row-major buffers above.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                av.data().as_ptr(),
                k as isize,
                1,
                bv.data().as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |bc| Op::Add { a, b, bc })
    }

    /// Elementwise product with the broadcast rule in the module docs.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |bc| Op::Mul { a, b, bc })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Bcast) -> Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, cols) = (av.rows(), av.cols());
        let bc = Bcast::resolve(name, av.shape(), bv.shape(), rows, cols)?;
        let (ad, bd) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(ad.len());
        for i in 0..rows {
            for j in 0..cols {
                out.push(f(ad[i * cols + j], bd[bc.index(i, j, cols)]));
            }
        }
        let t = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op(bc), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |a| Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |a| Op::Sigmoid { a })
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: impl FnOnce(Var) -> Op<T>) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op(a), rg)
    }

    /// Mean over axis 0 (rows, giving `[1, C]`) or axis 1 (columns, giving
    /// `[R, 1]`) of the matrix view.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let d = av.data();
        let t = match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                let n = T::lit(r as f64);
                out.iter_mut().for_each(|o| *o = *o / n);
                Tensor::new(&[1, c], out)?
            }
            1 => {
                let n = T::lit(c as f64);
                let out = (0..r)
                    .map(|i| d[i * c..(i + 1) * c].iter().copied().sum::<T>() / n)
                    .collect();
                Tensor::new(&[r, 1], out)?
            }
            _ => {
                return Err(Error::Shape {
                    op: "mean",
                    lhs: av.shape().to_vec(),
                    rhs: vec![axis],
                })
            }
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mean { a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Layer normalization over the trailing axis, `LN_EPS` in the variance
    /// denominator, then an optional per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let eps = T::lit(LN_EPS);
        let n = T::lit(c as f64);
        let d = xv.data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let g = gain.map(|v| self.value(v).data().to_vec());
        let b = bias.map(|v| self.value(v).data().to_vec());
        let mut out = xhat.clone();
        for i in 0..r {
            for j in 0..c {
                let o = &mut out[i * c + j];
                if let Some(g) = &g {
                    *o = *o * g[j];
                }
                if let Some(b) = &b {
                    *o += b[j];
                }
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || gain.is_some_and(|v| self.rg(v)) || bias.is_some_and(|v| self.rg(v));
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax of `logits + mask`.
    ///
    /// `mask` is `[R, C]` or `[1, C]` (shared by every row) with entries 0 or
    /// [`NEG_LARGE`]. A row with no open entry is an error rather than NaN.
    pub fn softmax_masked(&mut self, logits: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        let shared = match mask {
            None => false,
            Some(m) if m.cols() == c && m.rows() == r => false,
            Some(m) if m.cols() == c && m.rows() == 1 => true,
            Some(m) => {
                return Err(Error::Shape {
                    op: "softmax_masked",
                    lhs: lv.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                })
            }
        };
        let blocked = T::lit(BLOCKED);
        let d = lv.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let mrow = mask.map(|m| if shared { m.row(0) } else { m.row(i) });
            if let Some(mrow) = mrow {
                if mrow.iter().all(|&v| v <= blocked) {
                    return Err(Error::FullyMaskedRow { row: i });
                }
            }
            let z = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                z[j] = d[i * c + j] + mrow.map_or(T::zero(), |m| m[j]);
            }
            softmax_in_place(z);
        }
        let t = Tensor::new(lv.shape(), out)?;
        let rg = self.rg(logits);
        Ok(self.push(t, Op::Softmax { a: logits }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[rows, c], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[r, cols], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if len == 0 || start + len > av.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let t = Tensor::new(&[len, c], av.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows { a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[r, len], data)?, Op::SliceCols { a, start }, rg))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (r, c) = (tv.rows(), tv.cols());
        if ids.is_empty() || ids.iter().any(|&i| i >= r) {
            return Err(Error::Shape {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: ids.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), c], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over `(row, class)` targets of row-wise
    /// softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if targets.is_empty() {
            return Err(Error::EmptyAnswer);
        }
        if targets.iter().any(|&(i, k)| i >= r || k >= c) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: targets.iter().flat_map(|&(i, k)| [i, k]).collect(),
            });
        }
        let mut probs = Vec::with_capacity(targets.len() * c);
        let mut nll = T::zero();
        for &(i, k) in targets {
            let mut z = lv.row(i).to_vec();
            softmax_in_place(&mut z);
            // log p_k computed from the logits directly to stay accurate.
            let row = lv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            nll += lse - row[k];
            probs.extend_from_slice(&z);
        }
        let loss = nll / T::lit(targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar sink. May run once per graph.
    pub fn backward(&mut self, sink: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(sink).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarSink(shape));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(sink) {
            return Ok(());
        }
        self.grads[sink.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=sink.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of `v` after [`backward`](Self::backward); zeros when `v` is
    /// not reachable from the sink.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.value(v).shape()),
        }
    }

    /// Gradients of every trainable parameter bound into this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter(|(_, &v)| self.rg(v))
            .map(|(&id, &v)| (id, self.grad(v)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<T>) {
        // The op is moved out temporarily so parents' grads can be borrowed.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let gd = g.data();
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (m, k) = (av.rows(), av.cols());
                let n = if tb { bv.rows() } else { bv.cols() };
                // B' = op(B) as a logical k x n matrix.
                let (rsb, csb) = if tb {
                    (1isize, k as isize)
                } else {
                    (n as isize, 1isize)
                };
                if let Some(ga) = self.acc(a) {
                    // dA += dC · B'ᵀ
                    unsafe {
                        T::gemm(
                            m, n, k, T::one(), gd.as_ptr(), n as isize, 1,
                            bv.data().as_ptr(), csb, rsb, T::one(), ga.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if let Some(gb) = self.acc(b) {
                    // dB' += Aᵀ · dC, written through B's storage strides.
                    unsafe {
                        T::gemm(
                            k, m, n, T::one(), av.data().as_ptr(), 1, k as isize,
                            gd.as_ptr(), n as isize, 1, T::one(), gb.as_mut_ptr(), rsb, csb,
                        );
                    }
                }
            }
            &Op::Add { a, b, bc } => {
                let cols = self.nodes[a.0].value.cols();
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(gd).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(b) {
                    for (idx, &y) in gd.iter().enumerate() {
                        gb[bc.index(idx / cols, idx % cols, cols)] += y;
                    }
                }
            }
            &Op::Mul { a, b, bc } => {
                let cols = self.nodes[a.0].value.cols();
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for (idx, &y) in gd.iter().enumerate() {
                        ga[idx] += y * bv[bc.index(idx / cols, idx % cols, cols)];
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for (idx, &y) in gd.iter().enumerate() {
                        gb[bc.index(idx / cols, idx % cols, cols)] += y * av[idx];
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * c);
                }
            }
            &Op::Tanh { a } => {
                let out = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((x, &y), &o) in ga.iter_mut().zip(gd).zip(&out) {
                        *x += y * (T::one() - o * o);
                    }
                }
            }
            &Op::Sigmoid { a } => {
                let out = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((x, &y), &o) in ga.iter_mut().zip(gd).zip(&out) {
                        *x += y * o * (T::one() - o);
                    }
                }
            }
            &Op::Mean { a, axis } => {
                let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                if let Some(ga) = self.acc(a) {
                    if axis == 0 {
                        let n = T::lit(r as f64);
                        for ii in 0..r {
                            for j in 0..c {
                                ga[ii * c + j] += gd[j] / n;
                            }
                        }
                    } else {
                        let n = T::lit(c as f64);
                        for ii in 0..r {
                            for j in 0..c {
                                ga[ii * c + j] += gd[ii] / n;
                            }
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().for_each(|x| *x += gd[0]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = self.nodes[x.0].value.cols();
                let r = rstd.len();
                let gv = gain.map(|v| self.nodes[v.0].value.data().to_vec());
                if let Some(gb) = bias.and_then(|b| self.acc(b)) {
                    for ii in 0..r {
                        for j in 0..c {
                            gb[j] += gd[ii * c + j];
                        }
                    }
                }
                if let Some(gg) = gain.and_then(|v| self.acc(v)) {
                    for ii in 0..r {
                        for j in 0..c {
                            gg[j] += gd[ii * c + j] * xhat[ii * c + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(x) {
                    let n = T::lit(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for ii in 0..r {
                        for j in 0..c {
                            let y = gd[ii * c + j];
                            dxhat[j] = gv.as_ref().map_or(y, |g| y * g[j]);
                        }
                        let xh = &xhat[ii * c..(ii + 1) * c];
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / n;
                        for j in 0..c {
                            gx[ii * c + j] += rstd[ii] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                let out = self.nodes[i].value.clone();
                let c = out.cols();
                if let Some(ga) = self.acc(a) {
                    for ii in 0..out.rows() {
                        let y = out.row(ii);
                        let gr = &gd[ii * c..(ii + 1) * c];
                        let dot = y.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                        for j in 0..c {
                            ga[ii * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(p) {
                        gp.iter_mut().zip(&gd[off..off + n]).for_each(|(x, &y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = self.nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = (self.nodes[p.0].value.rows(), self.nodes[p.0].value.cols());
                    if let Some(gp) = self.acc(p) {
                        for ii in 0..r {
                            for j in 0..c {
                                gp[ii * c + j] += gd[ii * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            &Op::SliceRows { a, start } => {
                let c = self.nodes[a.0].value.cols();
                if let Some(ga) = self.acc(a) {
                    ga[start * c..start * c + gd.len()]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            &Op::SliceCols { a, start } => {
                let c = self.nodes[a.0].value.cols();
                let len = g.cols();
                if let Some(ga) = self.acc(a) {
                    for (ii, chunk) in gd.chunks(len).enumerate() {
                        for (j, &y) in chunk.iter().enumerate() {
                            ga[ii * c + start + j] += y;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = self.nodes[table.0].value.cols();
                if let Some(gt) = self.acc(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += gd[r * c + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.nodes[logits.0].value.cols();
                let scale = gd[0] / T::lit(targets.len() as f64);
                if let Some(gl) = self.acc(*logits) {
                    for (t, &(row, k)) in targets.iter().enumerate() {
                        let p = &probs[t * c..(t + 1) * c];
                        for j in 0..c {
                            let onehot = if j == k { T::one() } else { T::zero() };
                            gl[row * c + j] += scale * (p[j] - onehot);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Real>(z: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v = *v / s;
    }
}
