//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise functions with registered analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Negate,
    Scale(f64),
    AddConst(f64),
    Sqrt,
    Recip,
    /// `max(x, floor)`; gradient passes only where `x > floor`.
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Dim(usize),
}

/// Deliberately wrong backward rules, used to prove that gradient checking
/// catches broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Uses `1 - y` instead of `1 - y²` for tanh.
    Tanh,
    /// Drops the `dB = Aᵀ·dC` half of the matmul rule.
    MatmulRhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBias(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Unary(Var, Unary),
    Softmax(Var),
    Reduce(Var, ReduceKind, Axis),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Diag(Var),
    LogSumExpRows(Var, bool),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

/// A single-use computation graph. Build it during the forward pass, then
/// call [`Graph::backward`] on a scalar.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::Shape(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shapes checked");
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(AutodiffError::Shape(format!(
                "matmul: [{m}x{k}] x [{k2}x{n}] inner dimensions disagree"
            )));
        }
        let data = gemm(self.value(a).data(), false, self.value(b).data(), false, m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "div")?;
        if let Some(i) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                index: i,
                value: 0.0,
            });
        }
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// `x[i, j] + bias[j]` for a matrix `x` and a vector `bias`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(bias) != [n] {
            return Err(AutodiffError::Shape(format!(
                "add_row_bias: bias {:?} does not match [{m}x{n}]",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), tracked))
    }

    /// `x[i, j] * s[i]`; `s` is `[m]` or `[m x 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(s).len() != m || self.shape(s).len() > 2 {
            return Err(AutodiffError::Shape(format!(
                "scale_rows: scales {:?} do not match [{m}x{n}]",
                self.shape(s)
            )));
        }
        let sv = self.value(s).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (row, si) in data.chunks_mut(n.max(1)).zip(&sv) {
            for v in row.iter_mut() {
                *v *= si;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let tracked = self.tracked(&[x, s]);
        Ok(self.push(value, Op::ScaleRows(x, s), tracked))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "scale_by: expected a scalar, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        let tracked = self.tracked(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), tracked))
    }

    pub fn apply_unary(&mut self, x: Var, f: Unary) -> Result<Var, AutodiffError> {
        let input = self.value(x);
        let check_positive = |op: &'static str| {
            input
                .data()
                .iter()
                .position(|&v| v <= 0.0)
                .map(|i| AutodiffError::Domain {
                    op,
                    index: i,
                    value: input.data()[i],
                })
        };
        match f {
            Unary::Log => {
                if let Some(e) = check_positive("log") {
                    return Err(e);
                }
            }
            Unary::Recip => {
                if let Some(i) = input.data().iter().position(|&v| v == 0.0) {
                    return Err(AutodiffError::Domain {
                        op: "recip",
                        index: i,
                        value: 0.0,
                    });
                }
            }
            Unary::Sqrt => {
                if let Some(i) = input.data().iter().position(|&v| v < 0.0) {
                    return Err(AutodiffError::Domain {
                        op: "sqrt",
                        index: i,
                        value: input.data()[i],
                    });
                }
            }
            _ => {}
        }
        let value = match f {
            Unary::Tanh => input.map(f64::tanh),
            Unary::Sigmoid => input.map(sigmoid),
            Unary::Exp => input.map(f64::exp),
            Unary::Log => input.map(f64::ln),
            Unary::Negate => input.map(|v| -v),
            Unary::Scale(c) => input.map(|v| v * c),
            Unary::AddConst(c) => input.map(|v| v + c),
            Unary::Sqrt => input.map(f64::sqrt),
            Unary::Recip => input.map(|v| 1.0 / v),
            Unary::ClampMin(floor) => input.map(|v| v.max(floor)),
        };
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Unary(x, f), tracked))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply_unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply_unary(x, Unary::Sigmoid)
    }

    /// Softmax along the last axis of a vector or of every row of a matrix.
    pub fn softmax_row(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let input = self.value(x);
        let n = match input.shape() {
            [n] | [_, n] => *n,
            s => {
                return Err(AutodiffError::Shape(format!(
                    "softmax_row: expected a vector or matrix, got {s:?}"
                )))
            }
        };
        if n == 0 {
            return Err(AutodiffError::Shape("softmax_row: empty row".into()));
        }
        let mut data = input.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(input.shape().to_vec(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax(x), tracked))
    }

    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Axis) -> Result<Var, AutodiffError> {
        let input = self.value(x);
        let value = match axis {
            Axis::All => {
                let s: f64 = input.data().iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / input.len().max(1) as f64,
                };
                Tensor::scalar(v)
            }
            Axis::Dim(d) => {
                let shape = input.shape();
                if d >= shape.len() {
                    return Err(AutodiffError::Axis {
                        axis: d,
                        rank: shape.len(),
                    });
                }
                let (outer, size, inner) = split_axis(shape, d);
                let mut out = vec![0.0; outer * inner];
                let data = input.data();
                for o in 0..outer {
                    for k in 0..size {
                        let base = (o * size + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += data[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean && size > 0 {
                    for v in &mut out {
                        *v /= size as f64;
                    }
                }
                let mut out_shape = shape.to_vec();
                out_shape.remove(d);
                Tensor::new(out_shape, out)?
            }
        };
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reduce(x, kind, axis), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(x, ReduceKind::Sum, Axis::All)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.reduce(x, ReduceKind::Mean, Axis::All)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (m, n) = self.value(x).dims2()?;
        if start > end || end > n {
            return Err(AutodiffError::Shape(format!(
                "slice_cols: range {start}..{end} out of bounds for {n} columns"
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start, end), tracked))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (m, n) = self.value(x).dims2()?;
        if start > end || end > m {
            return Err(AutodiffError::Shape(format!(
                "slice_rows: range {start}..{end} out of bounds for {m} rows"
            )));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), tracked))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Shape("concat_cols: nothing to concatenate".into()));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(AutodiffError::Shape(format!(
                    "concat_cols: row counts {m} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let value = self.value(x).transpose()?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Transpose(x), tracked))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.value(x).dims2()?;
        if m != n {
            return Err(AutodiffError::Shape(format!("diag: [{m}x{n}] is not square")));
        }
        let v = self.value(x);
        let data = (0..n).map(|i| v.get2(i, i)).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Diag(x), tracked))
    }

    /// Row-wise `log Σ_j exp(x[i, j])`, optionally skipping `j == i`.
    pub fn logsumexp_rows(&mut self, x: Var, exclude_diagonal: bool) -> Result<Var, AutodiffError> {
        let (m, n) = self.value(x).dims2()?;
        if exclude_diagonal && (m != n || n < 2) {
            return Err(AutodiffError::Shape(format!(
                "logsumexp_rows: excluding the diagonal needs a square matrix with n >= 2, got [{m}x{n}]"
            )));
        }
        if n == 0 {
            return Err(AutodiffError::Shape("logsumexp_rows: empty row".into()));
        }
        let v = self.value(x);
        let data = (0..m)
            .map(|i| {
                let row = v.row(i);
                let keep = |j: usize| !(exclude_diagonal && j == i);
                let max = (0..n)
                    .filter(|&j| keep(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
                max + s.ln()
            })
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::vector(data),
            Op::LogSumExpRows(x, exclude_diagonal),
            tracked,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].tracked {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), AutodiffError> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.nodes[a.0].tracked {
                    let da = gemm(dy.data(), false, self.value(*b).data(), true, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].tracked && self.fault != Some(BackwardFault::MatmulRhs) {
                    let db = gemm(self.value(*a).data(), true, dy.data(), false, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip(dy, vb, |g, x| g * x));
                self.accumulate(grads, *b, zip(dy, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                self.accumulate(grads, *a, zip(dy, vb, |g, x| g / x));
                let gb: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(vb.data())
                    .map(|((g, q), d)| -g * q / d)
                    .collect();
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                let n = dy.dims2()?.1;
                let mut gb = vec![0.0; n];
                for row in dy.data().chunks(n.max(1)) {
                    for (acc, g) in gb.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                self.accumulate(grads, *bias, Tensor::vector(gb));
            }
            Op::ScaleRows(x, s) => {
                let (m, n) = dy.dims2()?;
                let sv = self.value(*s);
                let xv = self.value(*x);
                let mut gx = dy.data().to_vec();
                let mut gs = vec![0.0; m];
                for i in 0..m {
                    let si = sv.data()[i];
                    for j in 0..n {
                        let g = dy.data()[i * n + j];
                        gx[i * n + j] = g * si;
                        gs[i] += g * xv.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], gx)?);
                self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), gs)?);
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                self.accumulate(grads, *x, dy.map(|g| g * c));
                let gs: f64 = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| g * v)
                    .sum();
                let shape = self.shape(*s).to_vec();
                self.accumulate(grads, *s, Tensor::new(shape, vec![gs])?);
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                let g = match f {
                    Unary::Tanh => {
                        if self.fault == Some(BackwardFault::Tanh) {
                            zip(dy, y, |g, t| g * (1.0 - t))
                        } else {
                            zip(dy, y, |g, t| g * (1.0 - t * t))
                        }
                    }
                    Unary::Sigmoid => zip(dy, y, |g, s| g * s * (1.0 - s)),
                    Unary::Exp => zip(dy, y, |g, e| g * e),
                    Unary::Log => zip(dy, xv, |g, v| g / v),
                    Unary::Negate => dy.map(|g| -g),
                    Unary::Scale(c) => dy.map(|g| g * c),
                    Unary::AddConst(_) => dy.clone(),
                    Unary::Sqrt => zip(dy, y, |g, r| if r > 0.0 { g / (2.0 * r) } else { 0.0 }),
                    Unary::Recip => zip(dy, y, |g, r| -g * r * r),
                    Unary::ClampMin(floor) => {
                        zip(dy, xv, |g, v| if v > *floor { g } else { 0.0 })
                    }
                };
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().expect("softmax output has a last axis");
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), dr) in gx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(dy.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Reduce(x, kind, axis) => {
                let shape = self.shape(*x).to_vec();
                let g = match axis {
                    Axis::All => {
                        let n = shape.iter().product::<usize>().max(1);
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / n as f64,
                        };
                        Tensor::full(&shape, dy.item() * scale)
                    }
                    Axis::Dim(d) => {
                        let (outer, size, inner) = split_axis(&shape, *d);
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / size.max(1) as f64,
                        };
                        let mut out = vec![0.0; outer * size * inner];
                        for o in 0..outer {
                            for k in 0..size {
                                let base = (o * size + k) * inner;
                                for i in 0..inner {
                                    out[base + i] = dy.data()[o * inner + i] * scale;
                                }
                            }
                        }
                        Tensor::new(shape, out)?
                    }
                };
                self.accumulate(grads, *x, g);
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = self.value(*x).dims2()?;
                let w = end - start;
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    g[i * n + start..i * n + end].copy_from_slice(&dy.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], g)?);
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.value(*x).dims2()?;
                let mut g = vec![0.0; m * n];
                g[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, *x, Tensor::new(vec![m, n], g)?);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dy.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    let mut g = Vec::with_capacity(m * w);
                    for i in 0..m {
                        g.extend_from_slice(&dy.data()[i * total + offset..i * total + offset + w]);
                    }
                    self.accumulate(grads, p, Tensor::new(vec![m, w], g)?);
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, dy.transpose()?);
            }
            Op::Diag(x) => {
                let n = dy.len();
                let mut g = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    g.data_mut()[i * n + i] = dy.data()[i];
                }
                self.accumulate(grads, *x, g);
            }
            Op::LogSumExpRows(x, exclude_diagonal) => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2()?;
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        if *exclude_diagonal && i == j {
                            continue;
                        }
                        let p = (xv.get2(i, j) - y.data()[i]).exp();
                        g[i * n + j] = dy.data()[i] * p;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], g)?);
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("matching shapes")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
