use super::tensor::Tensor;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How the operands of a binary op line up.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum { x: Var, axis: Option<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    IndexAxis { x: Var, axis: usize, index: usize },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of tensor operations. Nodes are appended in execution
/// order, so inputs always precede their consumers.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that reaches it.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `v`'s shape when the root does not
    /// depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

// Split a shape around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// Batched matrix product of `[B×m×k]` and `[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AutodiffError::Shape(format!("bmm of {sa:?} and {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            "bmm",
            Tensor::from_parts(vec![bs, m, n], out),
            Op::BatchMatMul(a, b),
            &[a, b],
        )
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s.len() > 3 {
            return Err(AutodiffError::Shape(format!("transpose of {s:?}")));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch = s[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        self.push(
            "transpose",
            Tensor::from_parts(shape, out),
            Op::Transpose(x),
            &[x],
        )
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = if ta.shape() == tb.shape() {
            Bcast::Same
        } else if ta.shape().is_empty() || (ta.is_scalar() && tb.len() > 1) {
            Bcast::LeftScalar
        } else if tb.shape().is_empty() || (tb.is_scalar() && ta.len() > 1) {
            Bcast::RightScalar
        } else {
            return Err(AutodiffError::Shape(format!(
                "{kind:?} of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<f64>) = match bcast {
            Bcast::Same => (
                ta.shape().to_vec(),
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Bcast::LeftScalar => {
                let s = ta.item();
                (
                    tb.shape().to_vec(),
                    tb.data().iter().map(|&y| f(s, y)).collect(),
                )
            }
            Bcast::RightScalar => {
                let s = tb.item();
                (
                    ta.shape().to_vec(),
                    ta.data().iter().map(|&x| f(x, s)).collect(),
                )
            }
        };
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.push(
            name,
            Tensor::from_parts(shape, data),
            Op::Binary(kind, a, b),
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Adds a `[n]` bias to every row of a `[..×n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.last_dim() != tb.len() || tx.rank() == 0 {
            return Err(AutodiffError::Shape(format!(
                "bias {:?} for input {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let b = tb.data();
        let data = tx
            .rows()
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = vec![0.0; tx.len()];
        for (row, o) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, o);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = vec![0.0; tx.len()];
        for (row, o) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_row(row, o);
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Sum over one axis, or over everything into a scalar when `axis` is `None`.
    pub fn sum_axis(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let tx = self.value(x);
        let value = match axis {
            None => Tensor::scalar(tx.sum()),
            Some(ax) => {
                if ax >= tx.rank() {
                    return Err(AutodiffError::Shape(format!(
                        "axis {ax} of {:?}",
                        tx.shape()
                    )));
                }
                let (outer, ext, inner) = split_axis(tx.shape(), ax);
                let src = tx.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                let mut shape = tx.shape().to_vec();
                shape.remove(ax);
                Tensor::from_parts(shape, out)
            }
        };
        self.push("sum", value, Op::Sum { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.sum_axis(x, None)
    }

    pub fn mean_axis(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let tx = self.value(x);
        let count = match axis {
            None => tx.len(),
            Some(ax) if ax < tx.rank() => tx.shape()[ax],
            Some(ax) => {
                return Err(AutodiffError::Shape(format!(
                    "axis {ax} of {:?}",
                    tx.shape()
                )))
            }
        };
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / count as f64)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.mean_axis(x, None)
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(AutodiffError::Shape("concat of nothing".into())),
        };
        if axis >= first.len() {
            return Err(AutodiffError::Shape(format!(
                "concat axis {axis} of {first:?}"
            )));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Shape(format!(
                    "concat of {first:?} and {s:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut s = self.shape(v).to_vec();
            if axis > s.len() {
                return Err(AutodiffError::Shape(format!("stack axis {axis} of {s:?}")));
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(v, &s)?);
        }
        self.concat(&expanded, axis)
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(AutodiffError::Shape(format!("gather from {:?}", t.shape())));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(AutodiffError::Shape("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::Index(format!(
                    "row {id} of table with {rows} rows"
                )));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Embedding lookup; identical to [`Tape::gather_rows`].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Picks one entry per row: `out[b] = x[b, idx[b]]` for `x` of shape `[B×n]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(AutodiffError::Shape(format!(
                "pick {} indices from {:?}",
                idx.len(),
                t.shape()
            )));
        }
        let n = t.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(AutodiffError::Index(format!("target {i} with {n} classes")));
            }
            out.push(t.data()[row * n + i]);
        }
        let value = Tensor::from_parts(vec![idx.len()], out);
        self.push(
            "pick",
            value,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Selects position `index` along `axis`, dropping that axis.
    pub fn index_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(AutodiffError::Shape(format!(
                "axis {axis} of {:?}",
                t.shape()
            )));
        }
        let (outer, ext, inner) = split_axis(t.shape(), axis);
        if index >= ext {
            return Err(AutodiffError::Index(format!(
                "index {index} on axis of extent {ext}"
            )));
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * ext + index) * inner;
            out.extend_from_slice(&t.data()[base..base + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        self.push("index_axis", value, Op::IndexAxis { x, axis, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[b×n]` logits, computed in log space.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, targets)?;
        self.mean(rows)
    }

    /// Per-row negative log-likelihoods, shape `[b]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let logits = match s.len() {
            1 => self.reshape(logits, &[1, s[0]])?,
            2 => logits,
            _ => return Err(AutodiffError::Shape(format!("cross entropy of {s:?}"))),
        };
        let n = *s.last().unwrap();
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(AutodiffError::Index(format!("target {t} with {n} classes")));
        }
        let lp = self.log_softmax(logits)?;
        let picked = self.pick(lp, targets)?;
        self.neg(picked)
    }

    /// Reverse-mode sweep from a scalar `root`, seeded with 1.0.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    // Allocates a zero gradient for `v` (if it needs one) and hands it to `f`.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let acc = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(acc.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate_with(grads, *a, |acc| gemm_nt_acc(gd, tb.data(), acc, m, k, n));
                self.accumulate_with(grads, *b, |acc| gemm_tn_acc(ta.data(), gd, acc, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                self.accumulate_with(grads, *a, |acc| {
                    for i in 0..bs {
                        gemm_nt_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut acc[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for i in 0..bs {
                        gemm_tn_acc(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut acc[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                let batch = s[..r - 2].iter().product::<usize>();
                self.accumulate_with(grads, *x, |acc| {
                    for b in 0..batch {
                        let off = b * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                acc[off + j * rows + i] += gd[off + i * cols + j];
                            }
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
                    Binary::Mul => {
                        let expand = |t: &Tensor| -> Vec<f64> {
                            if t.len() == gd.len() {
                                t.data().to_vec()
                            } else {
                                vec![t.item(); gd.len()]
                            }
                        };
                        let (va, vb) = (expand(ta), expand(tb));
                        (
                            gd.iter().zip(&vb).map(|(g, y)| g * y).collect(),
                            gd.iter().zip(&va).map(|(g, x)| g * x).collect(),
                        )
                    }
                };
                let reduce = |v: Vec<f64>, t: &Tensor| -> Tensor {
                    if t.len() == v.len() {
                        Tensor::from_parts(t.shape().to_vec(), v)
                    } else {
                        Tensor::from_parts(t.shape().to_vec(), vec![v.iter().sum()])
                    }
                };
                self.accumulate(grads, *a, reduce(ga, ta));
                self.accumulate(grads, *b, reduce(gb, tb));
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let n = self.value(*bias).len();
                self.accumulate_with(grads, *bias, |acc| {
                    for row in gd.chunks(n) {
                        for (a, r) in acc.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(y_shape(node), d));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, Tensor::from_parts(y_shape(node), d));
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let n = node.value.last_dim();
                let mut d = vec![0.0; s.len()];
                for ((srow, grow), drow) in s.chunks(n).zip(gd.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((o, &si), &gi) in drow.iter_mut().zip(srow).zip(grow) {
                        *o = si * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y_shape(node), d));
            }
            Op::LogSoftmax(x) => {
                let lp = node.value.data();
                let n = node.value.last_dim();
                let mut d = vec![0.0; lp.len()];
                for ((lrow, grow), drow) in lp.chunks(n).zip(gd.chunks(n)).zip(d.chunks_mut(n)) {
                    let total: f64 = grow.iter().sum();
                    for ((o, &l), &gi) in drow.iter_mut().zip(lrow).zip(grow) {
                        *o = gi - l.exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y_shape(node), d));
            }
            Op::Sum { x, axis } => {
                let shape = self.value(*x).shape().to_vec();
                let d = match axis {
                    None => vec![g.item(); shape.iter().product()],
                    Some(ax) => {
                        let (outer, ext, inner) = split_axis(&shape, *ax);
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            for _ in 0..ext {
                                d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                            }
                        }
                        d
                    }
                };
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let ext = self.value(v).shape()[*axis];
                    self.accumulate_with(grads, v, |acc| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for (a, s) in acc[dst..dst + ext * inner].iter_mut().zip(&gd[src..]) {
                                *a += s;
                            }
                        }
                    });
                    offset += ext;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = node.value.shape()[1];
                self.accumulate_with(grads, *table, |acc| {
                    for (row, &id) in ids.iter().enumerate() {
                        for (a, s) in acc[id * d..(id + 1) * d].iter_mut().zip(&gd[row * d..]) {
                            *a += s;
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let n = self.value(*x).shape()[1];
                self.accumulate_with(grads, *x, |acc| {
                    for (row, &i) in idx.iter().enumerate() {
                        acc[row * n + i] += gd[row];
                    }
                });
            }
            Op::IndexAxis { x, axis, index } => {
                let (outer, ext, inner) = split_axis(self.value(*x).shape(), *axis);
                self.accumulate_with(grads, *x, |acc| {
                    for o in 0..outer {
                        let base = (o * ext + index) * inner;
                        for (a, s) in acc[base..base + inner].iter_mut().zip(&gd[o * inner..]) {
                            *a += s;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
        }
    }
}

fn y_shape(node: &Node) -> Vec<usize> {
    node.value.shape().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let m2 = tape.constant(mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let p2 = tape.matmul(sel, m2).unwrap();
        assert_eq!(tape.value(p2).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("dimension"), "{err}");
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transposed() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let b = tape.leaf(mat(&[&[1.0, -1.0, 2.0, 0.5], &[0.0, 3.0, -2.0, 1.0]]));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        // row sums of B, repeated for each row of A
        assert_eq!(g.wrt(&tape, a).data(), &[2.5, 2.0, 2.5, 2.0, 2.5, 2.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let zero = tape.scalar(0.0);
        let z = tape.mul(a, zero).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
        let root = tape.sum(z).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(&tape, a).data(), &[0.0, 0.0]);

        let d = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 0.0]);

        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, bad), Err(AutodiffError::Shape(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4]));
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
        let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = tape.softmax(big).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let u4 = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(u4, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let u16 = tape.constant(Tensor::zeros(&[3, 16]));
        let l = tape.cross_entropy(u16, &[0, 5, 15]).unwrap();
        assert!((tape.value(l).item() - 16f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 4];
        sat[1] = 20.0;
        let x = tape.constant(Tensor::new(vec![1, 4], sat).unwrap());
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!(tape.value(l).item() < 1e-8);
        assert!(matches!(
            tape.cross_entropy(x, &[4]),
            Err(AutodiffError::Index(_))
        ));
    }

    #[test]
    fn reduce_tanh_embed_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);

        let z = tape.leaf(Tensor::scalar(0.0));
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
        let g = tape.backward(t).unwrap();
        assert_eq!(g.wrt(&tape, z).item(), 1.0);

        let table = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let e = tape.embed(table, &[0, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 2.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(matches!(
            tape.embed(table, &[3]),
            Err(AutodiffError::Index(_))
        ));

        let tot = tape.sum(e).unwrap();
        let g = tape.backward(tot).unwrap();
        assert_eq!(g.wrt(&tape, table).data(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.leaf(Tensor::vector(vec![7.0, 8.0]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.wrt(&tape, y).data(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(sq), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn node_count_matches_recorded_ops() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        let _ = tape.sum(y).unwrap();
        assert_eq!(tape.len(), 3);
    }

    #[test]
    fn concat_stack_index_axis_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(mat(&[&[5.0], &[6.0]]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.stack(&[a, a], 1).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 2, 2]);
        let back = tape.index_axis(s, 1, 1).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1e300]));
        assert_eq!(tape.mul(x, x).unwrap_err(), AutodiffError::NonFinite("mul"));
    }
}
