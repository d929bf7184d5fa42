//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node holding its output value. Nodes only ever
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.

use super::tensor::{gemm, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    Softmax { x: Var, temperature: f64 },
    Log { x: Var, floor: f64 },
    GatherRows { x: Var, index: Vec<usize> },
    MeanGroups { x: Var, group: usize },
    SumAll(Var),
    Reshape(Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient accumulators produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when nothing flowed into it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, materialising zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: copies the value into a new constant node.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::Detach,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a x b` (or `a x b^T` when `trans_b`). `a` may have any rank >= 1 and
    /// is treated as a matrix of rows; `b` must be 2-D.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() == 0 || bv.rank() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (k, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if av.cols() != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, trans_b },
            rg,
            "matmul",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Batched product of `[B, m, k] x [B, k, n]` (or `[B, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || Error::shape("batch_matmul", format!("{:?} x {:?}", av.shape(), bv.shape()));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
            "batch_matmul",
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg, "mul")
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(a), c.shape()),
            ));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::MulConst(a, c), rg, "mul_const")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, s), rg, "scale")
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, r: Var, mul: bool) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        if rv.len() != av.cols() {
            return Err(Error::shape(op, format!("{:?} with row {:?}", av.shape(), rv.shape())));
        }
        let cols = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(rv.data()) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, r]);
        let node = if mul { Op::MulRow(a, r) } else { Op::AddRow(a, r) };
        self.push(Tensor::from_parts(shape, out), node, rg, op)
    }

    /// Adds a length-`cols` vector to every row (bias).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, bias, false)
    }

    /// Multiplies every row elementwise by a length-`cols` vector (gain).
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, gain, true)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a), rg, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(a), rg, "relu")
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, rstd },
            rg,
            "layer_norm",
        )
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below `eps`
    /// are rejected rather than silently blown up.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for (i, row) in out.chunks_mut(cols).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < eps {
                return Err(Error::ZeroNorm {
                    what: "l2_normalize_rows",
                    row: i,
                });
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::L2NormRows { x, norms },
            rg,
            "l2_normalize_rows",
        )
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row, temperature);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, temperature },
            rg,
            "softmax",
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(floor).ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Log { x, floor }, rg, "log")
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![index.len(), cols], out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Averages consecutive groups of `group` rows: `[G*group, d] -> [G, d]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_groups", format!("{rows} rows in groups of {group}")));
        }
        let groups = rows / group;
        let mut out = vec![0.0; groups * cols];
        for (r, row) in xv.iter_rows().enumerate() {
            let o = &mut out[(r / group) * cols..(r / group + 1) * cols];
            for (a, b) in o.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![groups, cols], out),
            Op::MeanGroups { x, group },
            rg,
            "mean_groups",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), delta)),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if self.requires_grad(*a) {
                    // dA = dC * B^T   (or dC * B when B was used transposed)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), !trans_b, &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is [n, k]: dB = dC^T * A
                        gemm(n, m, k, gd, true, av.data(), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, &mut db, 0.0);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, out, 0.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, gd.iter().zip(c.data()).map(|(g, c)| g * c).collect());
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * s).collect());
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*r) {
                    let cols = g.cols();
                    let mut dr = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        dr.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *r, dr);
                }
            }
            Op::MulRow(a, r) => {
                let cols = g.cols();
                let (av, rv) = (self.value(*a).data(), self.value(*r).data());
                if self.requires_grad(*a) {
                    let da = gd
                        .chunks(cols)
                        .flat_map(|row| row.iter().zip(rv).map(|(g, r)| g * r))
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*r) {
                    let mut dr = vec![0.0; cols];
                    for (grow, arow) in gd.chunks(cols).zip(av.chunks(cols)) {
                        for ((d, g), x) in dr.iter_mut().zip(grow).zip(arow) {
                            *d += g * x;
                        }
                    }
                    self.accumulate(grads, *r, dr);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(av).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    gd.iter()
                        .zip(av)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::LayerNorm { x, rstd } => {
                let cols = g.cols();
                let n = cols as f64;
                let mut dx = vec![0.0; gd.len()];
                for (r, ((grow, yrow), drow)) in
                    gd.chunks(cols).zip(y.chunks(cols)).zip(dx.chunks_mut(cols)).enumerate()
                {
                    let mean_g = grow.iter().sum::<f64>() / n;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = rstd[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormRows { x, norms } => {
                let cols = g.cols();
                let mut dx = vec![0.0; gd.len()];
                for (r, ((grow, yrow), drow)) in
                    gd.chunks(cols).zip(y.chunks(cols)).zip(dx.chunks_mut(cols)).enumerate()
                {
                    let proj = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>();
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = (gi - yi * proj) / norms[r];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, temperature } => {
                let cols = g.cols();
                let mut dx = vec![0.0; gd.len()];
                for ((grow, yrow), drow) in gd.chunks(cols).zip(y.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let s = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>();
                    for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = yi * (gi - s) / temperature;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    gd.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > *floor { g / v } else { 0.0 })
                        .collect(),
                );
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (grow, &i) in gd.chunks(cols).zip(index) {
                    dx[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanGroups { x, group } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let inv = 1.0 / *group as f64;
                let mut dx = Vec::with_capacity(xv.len());
                for r in 0..xv.rows() {
                    dx.extend(g.row(r / group).iter().map(|v| v * inv));
                }
                debug_assert_eq!(dx.len(), xv.rows() * cols);
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
