use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    MulScalar { a: usize, s: f64 },
    AddConst { a: usize },
    MulConst { a: usize, c: Vec<f64> },
    Gelu { a: usize },
    Relu { a: usize },
    LayerNorm { a: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    SoftmaxRows { a: usize },
    LogSoftmaxRows { a: usize },
    Ln { a: usize },
    ClampMin { a: usize, min: f64 },
    Sum { a: usize },
    Mean { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in execution order, so the vector is already a
/// topological order; `backward` walks it once in reverse. A tape is
/// single-use: a second `backward` is rejected.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Adjoint buffer for node `j`, or None when it needs no gradient.
fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let n = nodes[j].value.numel();
    Some(grads[j].get_or_insert_with(|| vec![0.0; n]))
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("shape checked at record time")
}

fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("shape checked at record time")
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

    /// Drops every node recorded after the first `len` and re-arms the tape.
    /// Vars created past `len` become invalid. Used to reuse bound constants
    /// across many forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Values of constant subgraphs are kept, but nothing is recorded for them.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(AutodiffError::NotAMatrix {
                op,
                shape: other.to_vec(),
            }),
        }
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AutodiffError> {
        let (ra, ca) = self.matrix_dims("matmul", a)?;
        let (rb, cb) = self.matrix_dims("matmul", b)?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = view2(self.nodes[a.0].value.data(), ra, ca);
            let bv = view2(self.nodes[b.0].value.data(), rb, cb);
            let av = if ta { av.t() } else { av };
            let bv = if tb { bv.t() } else { bv };
            general_mat_mul(1.0, &av, &bv, 0.0, &mut view2_mut(&mut out, m, n));
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`, the layout of a linear layer with weight `b` of shape out×in.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, b, false, true)
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(op_name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<usize, AutodiffError> {
        let cols = self.nodes[a.0].value.cols();
        if self.nodes[row.0].value.numel() != cols {
            return Err(self.mismatch(op, a, row));
        }
        Ok(cols)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let cols = self.check_row("add_row", a, row)?;
        let r = self.nodes[row.0].value.data();
        let av = &self.nodes[a.0].value;
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { a: a.0, row: row.0 }, &[a, row]))
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let cols = self.check_row("mul_row", a, row)?;
        let r = self.nodes[row.0].value.data();
        let av = &self.nodes[a.0].value;
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % cols])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulRow { a: a.0, row: row.0 }, &[a, row]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape as input");
        self.push(value, op, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::MulScalar { a: a.0, s })
    }

    /// Adds a constant tensor that takes no gradient (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, AutodiffError> {
        if self.shape(a) != c.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddConst { a: a.0 }, &[a]))
    }

    /// Elementwise product with a constant tensor that takes no gradient.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, AutodiffError> {
        if self.shape(a) != c.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MulConst {
                a: a.0,
                c: c.into_data(),
            },
            &[a],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln { a: a.0 })
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.map(a, |x| x.max(min), Op::ClampMin { a: a.0, min })
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        let mut xhat = vec![0.0; av.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = av.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), xhat.clone()).expect("same shape");
        self.push(value, Op::LayerNorm { a: a.0, xhat, inv_std }, &[a])
    }

    /// Gathers rows of a 2-D `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims("embedding_lookup", table)?;
        if ids.is_empty() {
            return Err(AutodiffError::EmptyExtent(vec![0, cols]));
        }
        let tv = &self.nodes[table.0].value;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise softmax via max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows { a: a.0 }, &[a])
    }

    /// Row-wise log-softmax: `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v = *v - max - lse;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmaxRows { a: a.0 }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a])
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::EmptyExtent(vec![0]))?;
        let (r0, c0) = self.matrix_dims("concat", first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat", p)?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(AutodiffError::BadAxis { op: "concat", axis }),
            };
            if !ok {
                return Err(self.mismatch("concat", first, p));
            }
            total += if axis == 0 { r } else { c };
        }
        let value = if axis == 0 {
            let data = parts
                .iter()
                .flat_map(|p| self.nodes[p.0].value.data().iter().copied())
                .collect();
            Tensor::new(vec![total, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for r in 0..r0 {
                for p in parts {
                    data.extend_from_slice(self.nodes[p.0].value.row(r));
                }
            }
            Tensor::new(vec![r0, total], data)?
        };
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            axis,
        };
        Ok(self.push(value, op, parts))
    }

    /// Contiguous range `start..start+len` of a 2-D tensor along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims("slice", a)?;
        let extent = match axis {
            0 => rows,
            1 => cols,
            _ => return Err(AutodiffError::BadAxis { op: "slice", axis }),
        };
        if len == 0 || start + len > extent {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: extent,
            });
        }
        let av = &self.nodes[a.0].value;
        let value = if axis == 0 {
            Tensor::new(vec![len, cols], av.data()[start * cols..(start + len) * cols].to_vec())?
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&av.row(r)[start..start + len]);
            }
            Tensor::new(vec![rows, len], data)?
        };
        Ok(self.push(value, Op::Slice { a: a.0, axis, start }, &[a]))
    }

    /// Reverse pass from a scalar root. Populates adjoints for every node that
    /// requires grad and is reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let root_node = self.nodes.get(root.0).ok_or(AutodiffError::UnknownVar(root.0))?;
        if !root_node.value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |j: usize| nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let (rb, cb) = (nodes[*b].value.shape()[0], nodes[*b].value.shape()[1]);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let dc = view2(g, m, n);
                let av = view2(val(*a), ra, ca);
                let bv = view2(val(*b), rb, cb);
                let ap = if *ta { av.t() } else { av };
                let bp = if *tb { bv.t() } else { bv };
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    let mut gv = view2_mut(ga, ra, ca);
                    if *ta {
                        general_mat_mul(1.0, &bp, &dc.t(), 1.0, &mut gv);
                    } else {
                        general_mat_mul(1.0, &dc, &bp.t(), 1.0, &mut gv);
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    let mut gv = view2_mut(gb, rb, cb);
                    if *tb {
                        general_mat_mul(1.0, &dc.t(), &ap, 1.0, &mut gv);
                    } else {
                        general_mat_mul(1.0, &ap.t(), &dc, 1.0, &mut gv);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += d * y;
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    for ((x, d), y) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += d * y;
                    }
                }
            }
            Op::AddRow { a, row } => {
                let cols = nodes[*row].value.numel();
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gr) = grad_slot(grads, nodes, *row) {
                    for (k, d) in g.iter().enumerate() {
                        gr[k % cols] += d;
                    }
                }
            }
            Op::MulRow { a, row } => {
                let cols = nodes[*row].value.numel();
                let r = val(*row);
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for (k, (x, d)) in ga.iter_mut().zip(g).enumerate() {
                        *x += d * r[k % cols];
                    }
                }
                if let Some(gr) = grad_slot(grads, nodes, *row) {
                    for (k, (d, x)) in g.iter().zip(val(*a)).enumerate() {
                        gr[k % cols] += d * x;
                    }
                }
            }
            Op::MulScalar { a, s } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
                }
            }
            Op::AddConst { a } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::MulConst { a, c } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((x, d), k) in ga.iter_mut().zip(g).zip(c) {
                        *x += d * k;
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *x += d * gelu_grad(*v);
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                }
            }
            Op::Ln { a } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *x += d / v;
                    }
                }
            }
            Op::ClampMin { a, min } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *v > *min {
                            *x += d;
                        }
                    }
                }
            }
            Op::LayerNorm { a, xhat, inv_std } => {
                let cols = node.value.cols();
                let n = cols as f64;
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let gr = &g[span.clone()];
                        let xr = &xhat[span.clone()];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(d, x)| d * x).sum();
                        for ((o, d), x) in ga[span].iter_mut().zip(gr).zip(xr) {
                            *o += inv / n * (n * d - sum_g - x * sum_gx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let cols = node.value.cols();
                if let Some(gt) = grad_slot(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        for (o, d) in gt[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                            *o += d;
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(d, p)| d * p).sum();
                        for ((o, d), p) in out.iter_mut().zip(gr).zip(yr) {
                            *o += p * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { a } => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, d), ly) in out.iter_mut().zip(gr).zip(yr) {
                            *o += d - ly.exp() * total;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                let n = nodes[*a].value.numel() as f64;
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (nodes[p].value.rows(), nodes[p].value.cols());
                    if let Some(gp) = grad_slot(grads, nodes, p) {
                        if *axis == 0 {
                            let src = &g[offset * pc..(offset + pr) * pc];
                            gp.iter_mut().zip(src).for_each(|(x, d)| *x += d);
                        } else {
                            for r in 0..pr {
                                let src = &g[r * total_cols + offset..r * total_cols + offset + pc];
                                for (x, d) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *x += d;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { a, axis, start } => {
                let cols_in = nodes[*a].value.cols();
                let (rows_out, cols_out) = (node.value.rows(), node.value.cols());
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    if *axis == 0 {
                        let dst = &mut ga[start * cols_in..(start + rows_out) * cols_in];
                        dst.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    } else {
                        for r in 0..rows_out {
                            let dst = &mut ga[r * cols_in + start..r * cols_in + start + cols_out];
                            for (x, d) in dst.iter_mut().zip(&g[r * cols_out..(r + 1) * cols_out]) {
                                *x += d;
                            }
                        }
                    }
                }
            }
        }
    }
}
