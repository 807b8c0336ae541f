use super::params::{Gradients, ParamId, ParamSet};
use super::{sigmoid, softmax_into, squash_into, Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Storage<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Dot(Var, Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    Row {
        src: Var,
        row: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    SquashRows(Var),
    RowNorms(Var),
    RouteSum {
        c: Var,
        p: Var,
    },
    Agreement {
        p: Var,
        v: Var,
    },
    Bilinear {
        p: Var,
        w: Var,
        u: Var,
        r: Vec<F>,
    },
    NllClip {
        probs: Var,
        targets: Vec<usize>,
        floor: F,
    },
    MarginLoss {
        norms: Var,
        target: usize,
        pos: F,
        neg: F,
        lambda: F,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    storage: Storage<F>,
    op: Op<F>,
    tracked: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so node order is a topological
/// order. Parameters are referenced from the borrowed [`ParamSet`] rather than
/// copied; their gradients go to the [`Gradients`] passed to
/// [`Graph::backward`]. Gradients of tracked [`Graph::leaf`] inputs are kept on
/// the graph and accumulate across repeated backward calls.
pub struct Graph<'p, F: Real> {
    params: &'p ParamSet<F>,
    frozen: Vec<bool>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<F>>,
    leaf_grads: Vec<Option<Vec<F>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self {
            params,
            frozen: vec![false; params.len()],
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    /// Stops gradient flow into a parameter. Must precede [`Graph::param`].
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(data),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is recorded.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            shape: self.params.get(id).shape().to_vec(),
            storage: Storage::Param(id),
            op: Op::Param,
            tracked: !self.frozen[id.0],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].storage {
            Storage::Owned(d) => d,
            Storage::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("graph nodes hold consistent shapes")
    }

    /// First element; meant for scalar nodes.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked_any(&[x]);
        self.push(shape, data, op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, data, Op::Add(a, b), tracked))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        if self.value(bias).len() != n {
            return Err(mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let data = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a, bias]);
        Ok(self.push(shape, data, Op::AddBias(a, bias), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(shape, data, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.map_unary(a, |x| s * x, Op::Scale(a, s))
    }

    /// Elementwise product with a fixed (non-differentiable) factor.
    pub fn mul_const(&mut self, a: Var, factor: Vec<F>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(mismatch("mul_const", self.shape(a), &[factor.len()]));
        }
        let data = self.value(a).iter().zip(&factor).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(shape, data, Op::MulConst(a, factor), tracked))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut total = F::zero();
        for &v in self.value(a) {
            total += v;
        }
        let tracked = self.tracked_any(&[a]);
        self.push(vec![1], vec![total], Op::Sum(a), tracked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(mismatch("dot", self.shape(a), self.shape(b)));
        }
        let mut total = F::zero();
        for (&x, &y) in self.value(a).iter().zip(self.value(b)) {
            total += x * y;
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(vec![1], vec![total], Op::Dot(a, b), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), tracked))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (m, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != m {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(vec![m, total], data, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(TensorError::Empty { op: "stack_rows" })?;
        let n = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if self.value(r).len() != n {
                return Err(mismatch("stack_rows", self.shape(first), self.shape(r)));
            }
            data.extend_from_slice(self.value(r));
        }
        let tracked = self.tracked_any(rows);
        Ok(self.push(vec![rows.len(), n], data, Op::StackRows(rows.to_vec()), tracked))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(src));
        if start + len > n || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let v = self.value(src);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        let tracked = self.tracked_any(&[src]);
        Ok(self.push(vec![m, len], data, Op::SliceCols { src, start }, tracked))
    }

    /// One row of a matrix, as a `1×n` matrix.
    pub fn row(&mut self, src: Var, row: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(src));
        if row >= m {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index: row,
                bound: m,
            });
        }
        let data = self.value(src)[row * n..(row + 1) * n].to_vec();
        let tracked = self.tracked_any(&[src]);
        Ok(self.push(vec![1, n], data, Op::Row { src, row }, tracked))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "gather" });
        }
        let (rows, d) = rows_cols(self.shape(table));
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let tracked = self.tracked_any(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Softmax over the last axis of each row (a vector is a single row).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if m * n == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let mut out = vec![F::zero(); m * n];
        for (src, dst) in self.value(x).chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(src, dst);
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(shape, out, Op::SoftmaxRows(x), tracked))
    }

    /// Applies `squash` to each row.
    pub fn squash_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if m * n == 0 {
            return Err(TensorError::Empty { op: "squash" });
        }
        let mut out = vec![F::zero(); m * n];
        for (src, dst) in self.value(x).chunks(n).zip(out.chunks_mut(n)) {
            squash_into(src, dst);
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(shape, out, Op::SquashRows(x), tracked))
    }

    /// L2 norm of each row, shape `[m]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if m * n == 0 {
            return Err(TensorError::Empty { op: "l2norm" });
        }
        let data = self.value(x).chunks(n).map(super::l2norm).collect();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(vec![m], data, Op::RowNorms(x), tracked))
    }

    fn capsule_dims(&self, op: &'static str, p: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(p) {
            [n, m, d] => Ok((n, m, d)),
            ref s => Err(mismatch(op, s, &[0, 0, 0])),
        }
    }

    /// Agreement-weighted sum of prediction vectors.
    ///
    /// `c` is `[lower, upper]`, `p` is `[lower, upper, dim]`; output row `j` is
    /// `Σ_i c[i,j]·p[i,j,:]`, summed in increasing `i`.
    pub fn route_sum(&mut self, c: Var, p: Var) -> Result<Var> {
        let (n, m, d) = self.capsule_dims("route_sum", p)?;
        if rows_cols(self.shape(c)) != (n, m) {
            return Err(mismatch("route_sum", self.shape(c), self.shape(p)));
        }
        let (cv, pv) = (self.value(c), self.value(p));
        let mut out = vec![F::zero(); m * d];
        for j in 0..m {
            let s = &mut out[j * d..(j + 1) * d];
            for i in 0..n {
                let w = cv[i * m + j];
                let pred = &pv[(i * m + j) * d..(i * m + j + 1) * d];
                for (acc, &x) in s.iter_mut().zip(pred) {
                    *acc += w * x;
                }
            }
        }
        let tracked = self.tracked_any(&[c, p]);
        Ok(self.push(vec![m, d], out, Op::RouteSum { c, p }, tracked))
    }

    /// Dot products `p[i,j,:]·v[j,:]`, shape `[lower, upper]`.
    pub fn agreement(&mut self, p: Var, v: Var) -> Result<Var> {
        let (n, m, d) = self.capsule_dims("agreement", p)?;
        if rows_cols(self.shape(v)) != (m, d) {
            return Err(mismatch("agreement", self.shape(p), self.shape(v)));
        }
        let (pv, vv) = (self.value(p), self.value(v));
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                let pred = &pv[(i * m + j) * d..(i * m + j + 1) * d];
                let act = &vv[j * d..(j + 1) * d];
                let mut acc = F::zero();
                for (&x, &y) in pred.iter().zip(act) {
                    acc += x * y;
                }
                out[i * m + j] = acc;
            }
        }
        let tracked = self.tracked_any(&[p, v]);
        Ok(self.push(vec![n, m], out, Op::Agreement { p, v }, tracked))
    }

    /// Bilinear scores `p[i,j,:]ᵀ · W · u`, shape `[lower, upper]`.
    ///
    /// `W` is `[dim, e]` and `u` holds `e` values; `r = W·u` is formed first.
    pub fn bilinear(&mut self, p: Var, w: Var, u: Var) -> Result<Var> {
        let (n, m, d) = self.capsule_dims("bilinear", p)?;
        let e = self.value(u).len();
        if rows_cols(self.shape(w)) != (d, e) {
            return Err(mismatch("bilinear", self.shape(w), &[d, e]));
        }
        let (wv, uv) = (self.value(w), self.value(u));
        let mut r = vec![F::zero(); d];
        for (i, ri) in r.iter_mut().enumerate() {
            let mut acc = F::zero();
            for (&wij, &uj) in wv[i * e..(i + 1) * e].iter().zip(uv) {
                acc += wij * uj;
            }
            *ri = acc;
        }
        let pv = self.value(p);
        let mut out = vec![F::zero(); n * m];
        for (o, pred) in out.iter_mut().zip(pv.chunks(d)) {
            let mut acc = F::zero();
            for (&x, &y) in pred.iter().zip(&r) {
                acc += x * y;
            }
            *o = acc;
        }
        let tracked = self.tracked_any(&[p, w, u]);
        Ok(self.push(vec![n, m], out, Op::Bilinear { p, w, u, r }, tracked))
    }

    /// `-Σ_i ln(max(probs[i, targets[i]], floor))`.
    pub fn nll_clip(&mut self, probs: Var, targets: &[usize], floor: F) -> Result<Var> {
        let (n, m) = rows_cols(self.shape(probs));
        if targets.len() != n {
            return Err(mismatch("nll", self.shape(probs), &[targets.len()]));
        }
        let pv = self.value(probs);
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll",
                    index: t,
                    bound: m,
                });
            }
            total -= pv[i * m + t].max(floor).ln();
        }
        let tracked = self.tracked_any(&[probs]);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::NllClip {
                probs,
                targets: targets.to_vec(),
                floor,
            },
            tracked,
        ))
    }

    /// Capsule margin loss over activation norms:
    /// `Σ_l [l = target]·max(0, pos − n_l)² + λ·[l ≠ target]·max(0, n_l − neg)²`.
    pub fn margin_loss(&mut self, norms: Var, target: usize, pos: F, neg: F, lambda: F) -> Result<Var> {
        let nv = self.value(norms);
        if target >= nv.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "margin_loss",
                index: target,
                bound: nv.len(),
            });
        }
        let mut total = F::zero();
        for (l, &n) in nv.iter().enumerate() {
            if l == target {
                let h = (pos - n).max(F::zero());
                total += h * h;
            } else {
                let h = (n - neg).max(F::zero());
                total += lambda * h * h;
            }
        }
        let tracked = self.tracked_any(&[norms]);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::MarginLoss {
                norms,
                target,
                pos,
                neg,
                lambda,
            },
            tracked,
        ))
    }

    /// Propagates d`root`/d(·) to every tracked leaf and parameter.
    ///
    /// Parameter gradients are added to `param_grads`; leaf gradients are
    /// added to the graph's own accumulators (see [`Graph::grad`]).
    pub fn backward(&mut self, root: Var, param_grads: &mut Gradients<F>) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        assert_eq!(param_grads.len(), self.params.len(), "gradient buffer layout");
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![F::one()]);
        let mut sink = Sink {
            nodes: &self.nodes,
            grads: &mut grads,
            params: param_grads,
        };
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = sink.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut sink);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[idx].op) {
                if self.leaf_grads.len() <= idx {
                    self.leaf_grads.resize_with(idx + 1, || None);
                }
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[F], sink: &mut Sink<'_, F>) {
        let node = &self.nodes[idx];
        let out = match &node.storage {
            Storage::Owned(d) => d.as_slice(),
            Storage::Param(_) => unreachable!("parameters are leaves"),
        };
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf | Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = sink.buf(*a) {
                    F::gemm(m, n, k, g, false, val(*b), true, ga, true);
                }
                if let Some(gb) = sink.buf(*b) {
                    F::gemm(k, m, n, val(*a), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = sink.buf(v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = sink.buf(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = sink.buf(*bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = sink.buf(*a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = sink.buf(*b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = sink.buf(*a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += *s * gi;
                    }
                }
            }
            Op::MulConst(a, factor) => {
                if let Some(ga) = sink.buf(*a) {
                    for ((o, &gi), &f) in ga.iter_mut().zip(g).zip(factor) {
                        *o += gi * f;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = sink.buf(*a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gi * (F::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = sink.buf(*a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gi * y * (F::one() - y);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = sink.buf(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Dot(a, b) => {
                if let Some(ga) = sink.buf(*a) {
                    for (o, &y) in ga.iter_mut().zip(val(*b)) {
                        *o += g[0] * y;
                    }
                }
                if let Some(gb) = sink.buf(*b) {
                    for (o, &x) in gb.iter_mut().zip(val(*a)) {
                        *o += g[0] * x;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = sink.buf(*a) {
                    add_into(ga, g);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = rows_cols(self.shape(p));
                    if let Some(gp) = sink.buf(p) {
                        for i in 0..m {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let n = node.shape[1];
                for (i, &r) in rows.iter().enumerate() {
                    if let Some(gr) = sink.buf(r) {
                        add_into(gr, &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let (m, len) = rows_cols(&node.shape);
                let (_, n) = rows_cols(self.shape(*src));
                if let Some(gs) = sink.buf(*src) {
                    for i in 0..m {
                        add_into(&mut gs[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::Row { src, row } => {
                let n = g.len();
                if let Some(gs) = sink.buf(*src) {
                    add_into(&mut gs[row * n..(row + 1) * n], g);
                }
            }
            Op::Gather { table, ids } => {
                let d = node.shape[1];
                if let Some(gt) = sink.buf(*table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = rows_cols(&node.shape);
                if let Some(gx) = sink.buf(*x) {
                    for ((dst, y), gy) in gx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let mut inner = F::zero();
                        for (&a, &b) in y.iter().zip(gy) {
                            inner += a * b;
                        }
                        for ((o, &yi), &gi) in dst.iter_mut().zip(y).zip(gy) {
                            *o += yi * (gi - inner);
                        }
                    }
                }
            }
            Op::SquashRows(x) => {
                let (_, n) = rows_cols(&node.shape);
                let xv = val(*x);
                if let Some(gx) = sink.buf(*x) {
                    for ((dst, s), gv) in gx.chunks_mut(n).zip(xv.chunks(n)).zip(g.chunks(n)) {
                        let mut sq = F::zero();
                        let mut sg = F::zero();
                        for (&si, &gi) in s.iter().zip(gv) {
                            sq += si * si;
                            sg += si * gi;
                        }
                        // Zero subgradient at the origin.
                        if sq == F::zero() {
                            continue;
                        }
                        let norm = sq.sqrt();
                        let denom = F::one() + sq;
                        let f = norm / denom;
                        let df = (F::one() - sq) / (denom * denom);
                        let coef = df / norm * sg;
                        for ((o, &si), &gi) in dst.iter_mut().zip(s).zip(gv) {
                            *o += f * gi + coef * si;
                        }
                    }
                }
            }
            Op::RowNorms(x) => {
                let (_, n) = rows_cols(self.shape(*x));
                let xv = val(*x);
                if let Some(gx) = sink.buf(*x) {
                    for (i, dst) in gx.chunks_mut(n).enumerate() {
                        let norm = out[i];
                        if norm == F::zero() {
                            continue;
                        }
                        let k = g[i] / norm;
                        for (o, &xi) in dst.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                            *o += k * xi;
                        }
                    }
                }
            }
            Op::RouteSum { c, p } => {
                let (n, m, d) = (self.shape(*p)[0], self.shape(*p)[1], self.shape(*p)[2]);
                let (cv, pv) = (val(*c), val(*p));
                if let Some(gc) = sink.buf(*c) {
                    for i in 0..n {
                        for j in 0..m {
                            let pred = &pv[(i * m + j) * d..(i * m + j + 1) * d];
                            let mut acc = F::zero();
                            for (&x, &y) in pred.iter().zip(&g[j * d..(j + 1) * d]) {
                                acc += x * y;
                            }
                            gc[i * m + j] += acc;
                        }
                    }
                }
                if let Some(gp) = sink.buf(*p) {
                    for i in 0..n {
                        for j in 0..m {
                            let w = cv[i * m + j];
                            let dst = &mut gp[(i * m + j) * d..(i * m + j + 1) * d];
                            for (o, &y) in dst.iter_mut().zip(&g[j * d..(j + 1) * d]) {
                                *o += w * y;
                            }
                        }
                    }
                }
            }
            Op::Agreement { p, v } => {
                let (n, m, d) = (self.shape(*p)[0], self.shape(*p)[1], self.shape(*p)[2]);
                let (pv, vv) = (val(*p), val(*v));
                if let Some(gp) = sink.buf(*p) {
                    for i in 0..n {
                        for j in 0..m {
                            let k = g[i * m + j];
                            let dst = &mut gp[(i * m + j) * d..(i * m + j + 1) * d];
                            for (o, &y) in dst.iter_mut().zip(&vv[j * d..(j + 1) * d]) {
                                *o += k * y;
                            }
                        }
                    }
                }
                if let Some(gv) = sink.buf(*v) {
                    for i in 0..n {
                        for j in 0..m {
                            let k = g[i * m + j];
                            let pred = &pv[(i * m + j) * d..(i * m + j + 1) * d];
                            for (o, &x) in gv[j * d..(j + 1) * d].iter_mut().zip(pred) {
                                *o += k * x;
                            }
                        }
                    }
                }
            }
            Op::Bilinear { p, w, u, r } => {
                let d = r.len();
                let pv = val(*p);
                if let Some(gp) = sink.buf(*p) {
                    for (dst, &k) in gp.chunks_mut(d).zip(g) {
                        for (o, &ri) in dst.iter_mut().zip(r) {
                            *o += k * ri;
                        }
                    }
                }
                let track_w = sink.tracked(*w);
                let track_u = sink.tracked(*u);
                if track_w || track_u {
                    let mut gr = vec![F::zero(); d];
                    for (pred, &k) in pv.chunks(d).zip(g) {
                        for (o, &x) in gr.iter_mut().zip(pred) {
                            *o += k * x;
                        }
                    }
                    let (wv, uv) = (val(*w), val(*u));
                    let e = uv.len();
                    if let Some(gw) = sink.buf(*w) {
                        for (i, &gri) in gr.iter().enumerate() {
                            for (o, &uj) in gw[i * e..(i + 1) * e].iter_mut().zip(uv) {
                                *o += gri * uj;
                            }
                        }
                    }
                    if let Some(gu) = sink.buf(*u) {
                        for (i, &gri) in gr.iter().enumerate() {
                            for (o, &wij) in gu.iter_mut().zip(&wv[i * e..(i + 1) * e]) {
                                *o += gri * wij;
                            }
                        }
                    }
                }
            }
            Op::NllClip { probs, targets, floor } => {
                let (_, m) = rows_cols(self.shape(*probs));
                let pv = val(*probs);
                if let Some(gp) = sink.buf(*probs) {
                    for (i, &t) in targets.iter().enumerate() {
                        let q = pv[i * m + t];
                        if q > *floor {
                            gp[i * m + t] -= g[0] / q;
                        }
                    }
                }
            }
            Op::MarginLoss {
                norms,
                target,
                pos,
                neg,
                lambda,
            } => {
                let nv = val(*norms);
                if let Some(gn) = sink.buf(*norms) {
                    let two = F::one() + F::one();
                    for (l, (o, &n)) in gn.iter_mut().zip(nv).enumerate() {
                        if l == *target {
                            *o -= g[0] * two * (*pos - n).max(F::zero());
                        } else {
                            *o += g[0] * two * *lambda * (n - *neg).max(F::zero());
                        }
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

struct Sink<'a, F: Real> {
    nodes: &'a [Node<F>],
    grads: &'a mut Vec<Option<Vec<F>>>,
    params: &'a mut Gradients<F>,
}

impl<F: Real> Sink<'_, F> {
    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient accumulator for `v`, or `None` when `v` is untracked.
    fn buf(&mut self, v: Var) -> Option<&mut [F]> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        match node.storage {
            Storage::Param(id) => Some(self.params.get_mut(id)),
            Storage::Owned(ref d) => {
                let len = d.len();
                Some(self.grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(out), &[3.0, 7.0]);
        assert_eq!(g.shape(out), &[2, 1]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out), g.value(a));

        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let out = g.matmul(zero, a).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(
            g.matmul(a, bad),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn square_gradient() {
        let p = ParamSet::<f64>::new();
        let mut grads = Gradients::zeros_like(&p);
        let mut g = Graph::new(&p);
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut grads).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // accumulates without reset
        g.backward(y, &mut grads).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn tanh_sum_gradient() {
        let p = ParamSet::<f64>::new();
        let mut grads = Gradients::zeros_like(&p);
        let mut g = Graph::new(&p);
        let xs = [-1.5, 0.0, 0.3, 2.0];
        let x = g.leaf(t(&[4], &xs));
        let y = g.tanh(x);
        let s = g.sum(y);
        g.backward(s, &mut grads).unwrap();
        for (gi, xi) in g.grad(x).unwrap().iter().zip(xs) {
            let th: f64 = xi.tanh();
            assert!((gi - (1.0 - th * th)).abs() < 1e-15);
        }
        let t0 = g.constant(Tensor::scalar(0.0));
        let y0 = g.tanh(t0);
        assert_eq!(g.value(y0), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let p = ParamSet::<f64>::new();
        let mut grads = Gradients::zeros_like(&p);
        let mut g = Graph::new(&p);
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(
            g.backward(y, &mut grads),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn empty_softmax_is_an_error() {
        let p = ParamSet::<f64>::new();
        let mut g = Graph::new(&p);
        assert!(g.concat_cols(&[]).is_err());
        assert!(g.stack_rows(&[]).is_err());
    }

    #[test]
    fn constants_and_frozen_params_get_no_gradient() {
        let mut p = ParamSet::<f64>::new();
        let w = p.add("w", t(&[2], &[1.0, 2.0]));
        let fixed = p.add("fixed", t(&[2], &[3.0, 4.0]));
        let mut grads = Gradients::zeros_like(&p);
        let mut g = Graph::new(&p);
        g.freeze(fixed);
        let wv = g.param(w);
        let fv = g.param(fixed);
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let a = g.mul(wv, fv).unwrap();
        let b = g.mul(a, c).unwrap();
        let s = g.sum(b);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(w), &[15.0, 24.0]);
        assert_eq!(grads.get(fixed), &[0.0, 0.0]);
        assert!(g.grad(c).is_none());
        assert!(!g.is_tracked(fv));
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut p = ParamSet::<f64>::new();
        let table = p.add("emb", t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let mut grads = Gradients::zeros_like(&p);
        let mut g = Graph::new(&p);
        let tv = g.param(table);
        let rows = g.gather(tv, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let weights = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.mul(rows, weights).unwrap();
        let s = g.sum(y);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(table), &[3.0, 4.0, 0.0, 0.0, 6.0, 8.0]);
        assert!(g.gather(tv, &[3]).is_err());
    }

    fn weighted(g: &mut Graph<f64>, y: Var) -> Var {
        let n = g.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7 % 5) as f64) - 1.1).collect();
        let wv = g.constant(Tensor::vector(w).reshape(g.shape(y)).unwrap());
        let prod = g.mul(y, wv).unwrap();
        g.sum(prod)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x = t(&[2, 3], &[0.3, -0.7, 1.2, 0.05, -1.4, 0.9]);
        type Build = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;
        let checks: Vec<(&str, Build)> = vec![
            (
                "tanh",
                Box::new(|g, x| {
                    let y = g.tanh(x);
                    Ok(weighted(g, y))
                }),
            ),
            (
                "sigmoid",
                Box::new(|g, x| {
                    let y = g.sigmoid(x);
                    Ok(weighted(g, y))
                }),
            ),
            (
                "softmax",
                Box::new(|g, x| {
                    let y = g.softmax_rows(x)?;
                    Ok(weighted(g, y))
                }),
            ),
            (
                "squash",
                Box::new(|g, x| {
                    let y = g.squash_rows(x)?;
                    Ok(weighted(g, y))
                }),
            ),
            (
                "norms",
                Box::new(|g, x| {
                    let y = g.row_norms(x)?;
                    Ok(weighted(g, y))
                }),
            ),
            (
                "mul",
                Box::new(|g, x| {
                    let y = g.mul(x, x)?;
                    Ok(weighted(g, y))
                }),
            ),
            (
                "scale",
                Box::new(|g, x| {
                    let y = g.scale(x, -2.5);
                    Ok(weighted(g, y))
                }),
            ),
            (
                "dot",
                Box::new(|g, x| {
                    let c = g.constant(t(&[6], &[1.0, -2.0, 0.5, 3.0, 0.1, -0.4]));
                    g.dot(x, c)
                }),
            ),
            (
                "matmul",
                Box::new(|g, x| {
                    let w = g.constant(t(&[3, 2], &[0.2, -0.3, 1.1, 0.4, -0.6, 0.8]));
                    let y = g.matmul(x, w)?;
                    let z = g.matmul(y, x)?;
                    Ok(weighted(g, z))
                }),
            ),
            (
                "add_bias",
                Box::new(|g, x| {
                    let r = g.row(x, 1)?;
                    let y = g.add_bias(x, r)?;
                    let z = g.tanh(y);
                    Ok(weighted(g, z))
                }),
            ),
            (
                "concat_slice",
                Box::new(|g, x| {
                    let a = g.slice_cols(x, 1, 2)?;
                    let b = g.slice_cols(x, 0, 1)?;
                    let c = g.concat_cols(&[a, b, a])?;
                    let d = g.tanh(c);
                    Ok(weighted(g, d))
                }),
            ),
            (
                "stack",
                Box::new(|g, x| {
                    let r0 = g.row(x, 0)?;
                    let r1 = g.row(x, 1)?;
                    let s = g.stack_rows(&[r1, r0, r1])?;
                    let y = g.sigmoid(s);
                    Ok(weighted(g, y))
                }),
            ),
            (
                "nll",
                Box::new(|g, x| {
                    let p = g.softmax_rows(x)?;
                    g.nll_clip(p, &[2, 0], 1e-12)
                }),
            ),
            (
                "margin",
                Box::new(|g, x| {
                    let s = g.squash_rows(x)?;
                    let n = g.row_norms(s)?;
                    g.margin_loss(n, 1, 0.8, 0.2, 0.5)
                }),
            ),
            (
                "squash_linear",
                Box::new(|g, x| {
                    let w = g.constant(t(
                        &[3, 4],
                        &[0.2, -0.3, 1.1, 0.4, -0.6, 0.8, 0.1, 0.9, -0.2, 0.5, 0.3, -1.0],
                    ));
                    let y = g.matmul(x, w)?;
                    let v = g.squash_rows(y)?;
                    Ok(weighted(g, v))
                }),
            ),
        ];
        for (name, f) in &checks {
            let err = grad_check(|g, v| f(g, v), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: rel error {err}");
        }
    }

    #[test]
    fn capsule_op_gradients_match_finite_differences() {
        // p: [lower=2, upper=3, dim=2]
        let p = t(
            &[2, 3, 2],
            &[0.4, -0.2, 0.1, 0.9, -0.5, 0.3, 0.7, 0.2, -0.3, -0.6, 0.25, 0.8],
        );
        let route = |g: &mut Graph<f64>, p: Var| -> Result<Var> {
            let b = g.constant(t(&[2, 3], &[0.1, -0.4, 0.3, 0.0, 0.2, -0.1]));
            let c = g.softmax_rows(b)?;
            let s = g.route_sum(c, p)?;
            let v = g.squash_rows(s)?;
            let a = g.agreement(p, v)?;
            let w = g.constant(t(&[2, 2], &[0.3, -0.7, 0.5, 0.2]));
            let u = g.constant(t(&[2], &[0.6, -0.4]));
            let r = g.bilinear(p, w, u)?;
            let z = g.add(a, r)?;
            let c2 = g.softmax_rows(z)?;
            Ok(weighted(g, c2))
        };
        assert!(grad_check(route, &p, 1e-5).unwrap() < 1e-4);

        // gradient wrt the agreements of a weighted sum
        let c = t(&[2, 3], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]);
        let f = |g: &mut Graph<f64>, c: Var| -> Result<Var> {
            let pv = g.constant(p.clone());
            let s = g.route_sum(c, pv)?;
            let v = g.squash_rows(s)?;
            Ok(weighted(g, v))
        };
        assert!(grad_check(f, &c, 1e-5).unwrap() < 1e-4);

        // gradients wrt W and u of the bilinear map
        let wu = t(&[1, 6], &[0.3, -0.7, 0.5, 0.2, 0.6, -0.4]);
        let f = |g: &mut Graph<f64>, wu: Var| -> Result<Var> {
            let w = g.slice_cols(wu, 0, 4)?;
            let w = g.reshape(w, &[2, 2])?;
            let u = g.slice_cols(wu, 4, 2)?;
            let pv = g.constant(p.clone());
            let r = g.bilinear(pv, w, u)?;
            let y = g.tanh(r);
            Ok(weighted(g, y))
        };
        assert!(grad_check(f, &wu, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn squash_gradient_is_zero_at_origin() {
        let p = ParamSet::<f64>::new();
        let mut grads = Gradients::zeros_like(&p);
        let mut g = Graph::new(&p);
        let x = g.leaf(Tensor::zeros(&[1, 3]));
        let v = g.squash_rows(x).unwrap();
        let s = g.sum(v);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }
}
