//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation as a node holding its value and a
//! local gradient rule. [`Tape::backward`] walks the nodes once in reverse
//! recording order, which is a topological order by construction since a
//! node can only reference nodes that already exist.
//!
//! Broadcasting is limited to scalar-tensor pairs. Row-wise bias addition
//! is its own operation ([`Tape::add_row`]) rather than a broadcast rule.

use crate::error::{Error, Result};

/// A dense row-major array of `f64` with optional gradient storage.
/// Equality ignores the gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.values == other.values
            && self.requires_grad == other.requires_grad
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape("tensor", &shape, &[values.len()]));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.values.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.values[i * cols..(i + 1) * cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogClamped(Var, f64),
    Softplus(Var),
    Sum(Var),
    L2Norm(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
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

    /// Drops all nodes and gradients so the tape can record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads = None;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a tensor as a leaf. Gradients reach it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::shape("constant", &shape, &[values.len()]));
        }
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, out) = if sa == sb {
            (
                sa.to_vec(),
                va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            )
        } else if is_scalar(sb) {
            (sa.to_vec(), va.iter().map(|x| f(*x, vb[0])).collect())
        } else if is_scalar(sa) {
            (sb.to_vec(), vb.iter().map(|y| f(va[0], *y)).collect())
        } else {
            return Err(Error::shape(name, sa, sb));
        };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[i, j] + bias[j]` for a matrix `a` and a vector `bias`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        let cols = match (sa, sb) {
            ([_, c], [c2]) if c == c2 => *c,
            _ => return Err(Error::shape("add_row", sa, sb)),
        };
        let b = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % cols])
            .collect();
        let shape = sa.to_vec();
        let tracked = self.tracked(&[a, bias]);
        Ok(self.push(shape, out, Op::AddRow(a, bias), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(shape, out, Op::Scale(a, factor), tracked)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(shape, out, op, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    /// NaN passes through rather than being clamped.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.unary(
            a,
            move |x| if x.is_nan() { x } else { x.max(floor).ln() },
            Op::LogClamped(a, floor),
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = match shape.last() {
            Some(&c) if c >= 1 => c,
            _ => {
                return Err(Error::Contract(
                    "softmax needs a tensor with at least one axis".into(),
                ))
            }
        };
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape, out, Op::Softmax(a), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Vec::new(), vec![total], Op::Sum(a), tracked)
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let norm = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let tracked = self.tracked(&[a]);
        self.push(Vec::new(), vec![norm], Op::L2Norm(a), tracked)
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once;
    /// call [`Tape::reset`] before recording the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if !is_scalar(self.shape(loss)) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                acc(a, &|ga| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &|gb| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = va[i * k + p];
                            for (dst, gij) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *dst += a_ip * gij;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc(a, &|ga| accumulate_broadcast(ga, g, 1.0));
                acc(b, &|gb| accumulate_broadcast(gb, g, sign));
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                acc(a, &|ga| accumulate_product(ga, g, vb));
                acc(b, &|gb| accumulate_product(gb, g, va));
            }
            Op::AddRow(a, bias) => {
                let cols = self.nodes[bias.0].value.len();
                acc(a, &|ga| accumulate_broadcast(ga, g, 1.0));
                acc(bias, &|gb| {
                    for row in g.chunks(cols) {
                        for (dst, x) in gb.iter_mut().zip(row) {
                            *dst += x;
                        }
                    }
                });
            }
            Op::Scale(a, factor) => acc(a, &|ga| accumulate_broadcast(ga, g, factor)),
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                acc(a, &|ga| {
                    for ((dst, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *dst += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.nodes[a.0].value;
                acc(a, &|ga| {
                    for ((dst, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *dst += if *xi > 0.0 { *gi } else { slope * gi };
                    }
                });
            }
            Op::LogClamped(a, floor) => {
                let x = &self.nodes[a.0].value;
                acc(a, &|ga| {
                    for ((dst, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        if *xi > floor || xi.is_nan() {
                            *dst += gi / xi;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                acc(a, &|ga| {
                    for ((dst, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *dst += gi * sigmoid(*xi);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *node.shape.last().unwrap_or(&1);
                acc(a, &|ga| {
                    for ((dst, gr), yr) in
                        ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(a, &|ga| {
                for dst in ga.iter_mut() {
                    *dst += g[0];
                }
            }),
            Op::L2Norm(a) => {
                let norm = node.value[0];
                let x = &self.nodes[a.0].value;
                acc(a, &|ga| {
                    if norm > 0.0 {
                        for (dst, xi) in ga.iter_mut().zip(x) {
                            *dst += g[0] * xi / norm;
                        }
                    }
                });
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`. `None` when
    /// `v` is not tracked or the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let grads = self.grads.as_ref()?;
        if !self.nodes[v.0].tracked {
            return None;
        }
        grads[v.0].as_deref()
    }

    /// Copies the gradient of `v` into `t.grad`, zero-filled when the loss
    /// does not depend on `v`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g)
    }
}

fn accumulate_broadcast(dst: &mut [f64], g: &[f64], factor: f64) {
    if dst.len() == g.len() {
        for (d, x) in dst.iter_mut().zip(g) {
            *d += factor * x;
        }
    } else {
        // scalar operand broadcast over `g`
        dst[0] += factor * g.iter().sum::<f64>();
    }
}

fn accumulate_product(dst: &mut [f64], g: &[f64], other: &[f64]) {
    match (dst.len() == g.len(), other.len() == g.len()) {
        (true, true) => {
            for ((d, x), o) in dst.iter_mut().zip(g).zip(other) {
                *d += x * o;
            }
        }
        (true, false) => {
            for (d, x) in dst.iter_mut().zip(g) {
                *d += x * other[0];
            }
        }
        (false, _) => {
            dst[0] += g.iter().zip(other).map(|(x, o)| x * o).sum::<f64>();
        }
    }
}

/// Plain `m×k · k×n` row-major product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            for (dst, bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += a_ip * bpj;
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
