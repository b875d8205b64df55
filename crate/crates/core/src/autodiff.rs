//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] owns every value produced during a forward pass. Each primitive
//! appends one node recording its inputs and whatever it needs for the
//! backward rule, and hands back a [`Var`] handle. [`Tape::backward`] walks
//! the nodes in reverse recording order, which is a valid reverse topological
//! order because a node can only reference nodes recorded before it.
//!
//! Gradients accumulate: a value consumed by several primitives receives the
//! sum of the gradients flowing back along each use.
//!
//! ```
//! use gpoolnet::autodiff::Tape;
//! use gpoolnet::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
//! let y = tape.abs(x);
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).as_slice(), &[1.0, -1.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::validate_ascending;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Sum(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        width: usize,
    },
    Abs(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Var, Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    RowScale {
        x: Var,
        g: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of primitive applications for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
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
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; its gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`; zeros when nothing flowed into it.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let (r, c) = node.value.shape();
        match &node.grad {
            Some(g) => Tensor::from_vec(r, c, g.clone()).expect("grad shaped like value"),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// `a (n x k) * b (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_acc(
            self.value(a).as_slice(),
            self.value(b).as_slice(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(n, m, out)?, rg, Op::MatMul(a, b)))
    }

    /// Adds the `1 x c` row vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(Error::Shape(format!(
                "bias {:?} does not broadcast over {n}x{c}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).as_slice().to_vec();
        let mut out = self.value(x).clone();
        for row in out.as_mut_slice().chunks_mut(c.max(1)) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, rg, Op::AddRow(x, bias)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "hadamard {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(r, c, data)?, rg, Op::Hadamard(a, b)))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).as_slice().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_vec(1, 1, vec![s]).unwrap(), rg, Op::Sum(x))
    }

    /// Zero-padded ("same") 1-D convolution along the row dimension.
    ///
    /// `x` is `n x c_in`; `kernel` is `(width * c_in) x c_out`, i.e. the
    /// row-major flattening of a `width x c_in x c_out` array; `bias` is
    /// `1 x c_out`. Output row `i` reads input rows `i - width/2 ..= i +
    /// width/2`, with out-of-range rows treated as zero.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var, width: usize) -> Result<Var> {
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "convolution width must be odd, got {width}"
            )));
        }
        let (n, c_in) = self.shape(x);
        let (kr, c_out) = self.shape(kernel);
        if kr != width * c_in {
            return Err(Error::Shape(format!(
                "kernel has {kr} rows, expected width {width} x c_in {c_in}"
            )));
        }
        if self.shape(bias) != (1, c_out) {
            return Err(Error::Shape(format!(
                "conv bias {:?}, expected 1x{c_out}",
                self.shape(bias)
            )));
        }
        let half = width / 2;
        let xs = self.value(x).as_slice();
        let ks = self.value(kernel).as_slice();
        let bs = self.value(bias).as_slice();
        let mut out = vec![T::zero(); n * c_out];
        for i in 0..n {
            let out_row = &mut out[i * c_out..(i + 1) * c_out];
            out_row.copy_from_slice(bs);
            for d in 0..width {
                let Some(src) = (i + d).checked_sub(half).filter(|&s| s < n) else {
                    continue;
                };
                // out_row += x[src] * K[d]   (1 x c_in times c_in x c_out)
                gemm_acc(
                    &xs[src * c_in..(src + 1) * c_in],
                    &ks[d * c_in * c_out..(d + 1) * c_in * c_out],
                    out_row,
                    1,
                    c_in,
                    c_out,
                );
            }
        }
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::from_vec(n, c_out, out)?,
            rg,
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(x);
        let data = self.value(x).as_slice().iter().map(|&v| f(v)).collect();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_vec(r, c, data).unwrap(), rg, op)
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Column concatenation `[a, b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c1) = self.shape(a);
        let (n2, c2) = self.shape(b);
        if n != n2 {
            return Err(Error::Shape(format!(
                "concat of {n}-row and {n2}-row tensors"
            )));
        }
        let (av, bv) = (self.value(a).as_slice(), self.value(b).as_slice());
        let mut data = Vec::with_capacity(n * (c1 + c2));
        for i in 0..n {
            data.extend_from_slice(&av[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&bv[i * c2..(i + 1) * c2]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(n, c1 + c2, data)?, rg, Op::Concat(a, b)))
    }

    /// Rows `idx` of `x`. `idx` must be strictly ascending.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(x);
        validate_ascending(idx, n)?;
        let xv = self.value(x).as_slice();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_vec(idx.len(), c, data)?,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[i][j] = x[i][j] * g[i]` for `x: k x c` and a `k x 1` column `g`.
    pub fn rowwise_scale(&mut self, x: Var, g: Var) -> Result<Var> {
        let (k, c) = self.shape(x);
        if self.shape(g) != (k, 1) {
            return Err(Error::Shape(format!(
                "row scale {:?} for {k}x{c} input",
                self.shape(g)
            )));
        }
        let gv = self.value(g).as_slice();
        let data = self
            .value(x)
            .as_slice()
            .iter()
            .enumerate()
            .map(|(flat, &v)| v * gv[flat / c])
            .collect();
        let rg = self.any_grad(&[x, g]);
        Ok(self.push(Tensor::from_vec(k, c, data)?, rg, Op::RowScale { x, g }))
    }

    /// Column-wise maximum over the rows whose `mask` entry is true, as a
    /// `1 x c` row. Ties go to the lowest row index.
    pub fn masked_global_max_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, c) = self.shape(x);
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask of length {} for {n} rows",
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::DegenerateGraph(
                "global max pool over a graph with no real nodes".into(),
            ));
        }
        let xv = self.value(x).as_slice();
        let mut best = vec![T::neg_infinity(); c];
        let mut argmax = vec![usize::MAX; c];
        for i in (0..n).filter(|&i| mask[i]) {
            for j in 0..c {
                let v = xv[i * c + j];
                if argmax[j] == usize::MAX || v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::row_vector(best), rg, Op::MaxPool { x, argmax }))
    }

    /// Inverted dropout: at train time each unit survives with probability
    /// `keep_rate` and survivors are scaled by `1 / keep_rate`. Identity in
    /// eval mode or when `keep_rate == 1`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep_rate: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var> {
        if !(keep_rate > 0.0 && keep_rate <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep rate must lie in (0, 1], got {keep_rate}"
            )));
        }
        if !train || keep_rate == 1.0 {
            return Ok(x);
        }
        let inv = T::from_f64_lossy(1.0 / keep_rate);
        let scale: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < keep_rate {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let (r, c) = self.shape(x);
        let data = self
            .value(x)
            .as_slice()
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| v * s)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_vec(r, c, data)?, rg, Op::Dropout { x, scale }))
    }

    /// Mean softmax cross-entropy of `logits: batch x classes` against
    /// integer labels, as a `1 x 1` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.shape(logits);
        if labels.len() != b || b == 0 {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        let lv = self.value(logits).as_slice();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            for j in 0..c {
                probs[i * c + j] = exps[j] / z;
            }
            // -log softmax[label] = log z - (x_label - max)
            total = total + z.ln() - (row[labels[i]] - max);
        }
        let loss = total / T::from_usize(b).unwrap();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![loss])?,
            rg,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Back-propagates from the scalar `loss`, accumulating into the grads of
    /// every reachable node. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[id].grad.take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.propagate(id, &grad);
            }
            self.nodes[id].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); len]);
        f(g);
    }

    fn propagate(&mut self, id: usize, dout: &[T]) {
        // Inputs are borrowed by cloning what each rule needs; values are not
        // mutated during backward.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                if self.requires_grad(*a) {
                    let bv = self.value(*b).as_slice().to_vec();
                    // dA = dC * B^T
                    self.accumulate(*a, |g| gemm_nt_acc(dout, &bv, g, n, m, k));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).as_slice().to_vec();
                    // dB = A^T * dC
                    self.accumulate(*b, |g| gemm_tn_acc(&av, dout, g, n, k, m));
                }
            }
            Op::AddRow(x, bias) => {
                let c = self.shape(*x).1;
                self.accumulate(*x, |g| add_into(g, dout));
                self.accumulate(*bias, |g| {
                    for row in dout.chunks(c.max(1)) {
                        add_into(g, row);
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let av = self.value(*a).as_slice().to_vec();
                let bv = self.value(*b).as_slice().to_vec();
                self.accumulate(*a, |g| {
                    for ((gi, &d), &y) in g.iter_mut().zip(dout).zip(&bv) {
                        *gi = *gi + d * y;
                    }
                });
                self.accumulate(*b, |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(dout).zip(&av) {
                        *gi = *gi + d * x;
                    }
                });
            }
            Op::Sum(x) => {
                let d = dout[0];
                self.accumulate(*x, |g| g.iter_mut().for_each(|gi| *gi = *gi + d));
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
            } => self.conv1d_backward(*x, *kernel, *bias, *width, dout),
            Op::Abs(x) => {
                let xv = self.value(*x).as_slice().to_vec();
                self.accumulate(*x, |g| {
                    for ((gi, &d), &v) in g.iter_mut().zip(dout).zip(&xv) {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *gi = *gi + d * s;
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = self.nodes[id].value.as_slice().to_vec();
                self.accumulate(*x, |g| {
                    for ((gi, &d), &y) in g.iter_mut().zip(dout).zip(&yv) {
                        *gi = *gi + d * (T::one() - y * y);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).as_slice().to_vec();
                self.accumulate(*x, |g| {
                    for ((gi, &d), &v) in g.iter_mut().zip(dout).zip(&xv) {
                        if v > T::zero() {
                            *gi = *gi + d;
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (n, c1) = self.shape(*a);
                let c2 = self.shape(*b).1;
                let w = c1 + c2;
                self.accumulate(*a, |g| {
                    for i in 0..n {
                        add_into(&mut g[i * c1..(i + 1) * c1], &dout[i * w..i * w + c1]);
                    }
                });
                self.accumulate(*b, |g| {
                    for i in 0..n {
                        add_into(&mut g[i * c2..(i + 1) * c2], &dout[i * w + c1..(i + 1) * w]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x).1;
                self.accumulate(*x, |g| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut g[src * c..(src + 1) * c], &dout[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::RowScale { x, g: gate } => {
                let c = self.shape(*x).1;
                let xv = self.value(*x).as_slice().to_vec();
                let gv = self.value(*gate).as_slice().to_vec();
                self.accumulate(*x, |g| {
                    for (flat, (gi, &d)) in g.iter_mut().zip(dout).enumerate() {
                        *gi = *gi + d * gv[flat / c];
                    }
                });
                self.accumulate(*gate, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        let row: T = dout[i * c..(i + 1) * c]
                            .iter()
                            .zip(&xv[i * c..(i + 1) * c])
                            .map(|(&d, &v)| d * v)
                            .sum();
                        *gi = *gi + row;
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let c = self.shape(*x).1;
                self.accumulate(*x, |g| {
                    for (j, &row) in argmax.iter().enumerate() {
                        g[row * c + j] = g[row * c + j] + dout[j];
                    }
                });
            }
            Op::Dropout { x, scale } => {
                self.accumulate(*x, |g| {
                    for ((gi, &d), &s) in g.iter_mut().zip(dout).zip(scale) {
                        *gi = *gi + d * s;
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let c = self.shape(*logits).1;
                let b = labels.len();
                let scale = dout[0] / T::from_usize(b).unwrap();
                self.accumulate(*logits, |g| {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            g[i * c + j] = g[i * c + j] + (probs[i * c + j] - onehot) * scale;
                        }
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }

    fn conv1d_backward(&mut self, x: Var, kernel: Var, bias: Var, width: usize, dout: &[T]) {
        let (n, c_in) = self.shape(x);
        let c_out = self.shape(kernel).1;
        let half = width / 2;
        let taps = |i: usize| {
            (0..width).filter_map(move |d| {
                (i + d)
                    .checked_sub(half)
                    .filter(|&s| s < n)
                    .map(|s| (d, s))
            })
        };
        if self.requires_grad(x) {
            let ks = self.value(kernel).as_slice().to_vec();
            self.accumulate(x, |g| {
                for i in 0..n {
                    let d_row = &dout[i * c_out..(i + 1) * c_out];
                    for (d, src) in taps(i) {
                        // dX[src] += dOut[i] * K[d]^T
                        gemm_nt_acc(
                            d_row,
                            &ks[d * c_in * c_out..(d + 1) * c_in * c_out],
                            &mut g[src * c_in..(src + 1) * c_in],
                            1,
                            c_out,
                            c_in,
                        );
                    }
                }
            });
        }
        if self.requires_grad(kernel) {
            let xs = self.value(x).as_slice().to_vec();
            self.accumulate(kernel, |g| {
                for i in 0..n {
                    let d_row = &dout[i * c_out..(i + 1) * c_out];
                    for (d, src) in taps(i) {
                        // dK[d] += x[src]^T * dOut[i]
                        gemm_tn_acc(
                            &xs[src * c_in..(src + 1) * c_in],
                            d_row,
                            &mut g[d * c_in * c_out..(d + 1) * c_in * c_out],
                            1,
                            c_in,
                            c_out,
                        );
                    }
                }
            });
        }
        self.accumulate(bias, |g| {
            for row in dout.chunks(c_out.max(1)) {
                add_into(g, row);
            }
        });
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let x = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(2, 3));
        let b = tape.param(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn grad_of_sum_of_product_wrt_a_is_row_sums_of_b() {
        // d/dA sum(A B) = 1 B^T: every row of dA equals the row sums of B.
        let mut tape = Tape::new();
        let a = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.param(t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).as_slice(), &[11.0, 15.0, 11.0, 15.0]);
        // dB = A^T 1: each column of dB holds the column sums of A.
        assert_eq!(tape.grad(b).as_slice(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![4.0, -1.0]]));
        // width 3, c_in 2, c_out 2: only the center tap holds I.
        let mut k = Tensor::zeros(6, 2);
        k.set(2, 0, 1.0);
        k.set(3, 1, 1.0);
        let k = tape.param(k);
        let b = tape.param(Tensor::zeros(1, 2));
        let y = tape.conv1d_same(x, k, b, 3).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[4.0, -1.0]);
    }

    #[test]
    fn conv_direct_sum_example() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::column_vector(vec![1.0, 2.0, 3.0]));
        let k = tape.param(Tensor::column_vector(vec![1.0, 0.0, -1.0]));
        let b = tape.param(Tensor::zeros(1, 1));
        let y = tape.conv1d_same(x, k, b, 3).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[-2.0, -2.0, 2.0]);
    }

    #[test]
    fn conv_even_width_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(3, 1));
        let k = tape.param(Tensor::zeros(2, 1));
        let b = tape.param(Tensor::zeros(1, 1));
        assert!(matches!(
            tape.conv1d_same(x, k, b, 2).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn abs_and_relu_at_kinks() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![0.0, -2.0]]));
        let y = tape.abs(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 2.0]);
        assert_eq!(tape.grad(x).as_slice(), &[0.0, -1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![-1.0, 0.0]]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0]);
        assert_eq!(tape.grad(x).as_slice(), &[0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![0.0]]));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).as_slice(), &[0.0]);
    }

    #[test]
    fn concat_shapes_and_empty() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let e = tape.param(Tensor::zeros(2, 0));
        let y = tape.concat_cols(a, e).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        let b = tape.param(Tensor::zeros(2, 3));
        let y = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), (2, 5));
    }

    #[test]
    fn gather_requires_ascending() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0], vec![2.0], vec![3.0]]));
        let y = tape.gather_rows(x, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(matches!(
            tape.gather_rows(x, &[2, 0]).unwrap_err(),
            Error::Index(_)
        ));
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]));
        let y = tape.gather_rows(x, &[0, 2]).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).as_slice(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn rowwise_scale_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let ones = tape.param(Tensor::column_vector(vec![1.0, 1.0]));
        let y = tape.rowwise_scale(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let row = tape.param(t(&[vec![1.5, -2.0]]));
        let two = tape.param(Tensor::column_vector(vec![2.0]));
        let y = tape.rowwise_scale(row, two).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, -4.0]);
    }

    #[test]
    fn max_pool_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let y = tape.masked_global_max_pool(x, &[true, true]).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 5.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).as_slice(), &[0.0, 1.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 5.0], vec![3.0, 2.0]]));
        let y = tape.masked_global_max_pool(x, &[true, false]).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, 5.0]);
        assert!(matches!(
            tape.masked_global_max_pool(x, &[false, false]).unwrap_err(),
            Error::DegenerateGraph(_)
        ));
    }

    #[test]
    fn max_pool_ties_go_to_lowest_row() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![2.0], vec![2.0]]));
        let y = tape.masked_global_max_pool(x, &[true, true]).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0, 3.0]]));
        assert_eq!(tape.dropout(x, 0.55, &mut rng, false).unwrap(), x);
        let y = tape.dropout(x, 1.0, &mut rng, true).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(tape.dropout(x, 0.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_kept_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(1, 10_000, vec![1.0f64; 10_000]).unwrap());
        let y = tape.dropout(x, 0.55, &mut rng, true).unwrap();
        let out = tape.value(y).as_slice();
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.55).abs() <= 0.05, "kept fraction {kept}");
        for &v in out.iter().filter(|&&v| v != 0.0) {
            assert!((v - 1.0 / 0.55).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.param(t(&[vec![0.3, 0.3]]));
        let loss = tape.softmax_cross_entropy(l, &[1]).unwrap();
        assert!((tape.value(loss).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-15);

        let l = tape.param(t(&[vec![50.0, -50.0]]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(tape.value(loss).get(0, 0) < 1e-40);

        assert!(tape.softmax_cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn chain_of_two_matmuls_matches_hand_gradients() {
        // loss = sum(x W1 W2) with x: 1x2, W1: 2x2, W2: 2x1.
        // dW2 = (x W1)^T, dW1 = x^T W2^T, dx = (W1 W2)^T.
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0]]));
        let w1 = tape.param(t(&[vec![1.0, -1.0], vec![0.5, 2.0]]));
        let w2 = tape.param(t(&[vec![3.0], vec![-2.0]]));
        let h = tape.matmul(x, w1).unwrap();
        let y = tape.matmul(h, w2).unwrap();
        tape.backward(y).unwrap();
        // x W1 = [2, 3]
        assert_eq!(tape.grad(w2).as_slice(), &[2.0, 3.0]);
        // x^T W2^T = [[3,-2],[6,-4]]
        assert_eq!(tape.grad(w1).as_slice(), &[3.0, -2.0, 6.0, -4.0]);
        // W1 W2 = [5, -2.5]
        assert_eq!(tape.grad(x).as_slice(), &[5.0, -2.5]);
    }

    #[test]
    fn unreachable_and_constant_grads_stay_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0]]));
        let unused = tape.param(t(&[vec![7.0, 8.0]]));
        let c = tape.constant(t(&[vec![2.0]]));
        let y = tape.hadamard(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).as_slice(), &[2.0]);
        assert_eq!(tape.grad(unused).as_slice(), &[0.0, 0.0]);
        assert_eq!(tape.grad(c).as_slice(), &[0.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0]]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s).unwrap_err(), Error::BackwardTwice));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0]]));
        assert!(matches!(
            tape.backward(x).unwrap_err(),
            Error::NonScalarLoss { rows: 1, cols: 2 }
        ));
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // loss = sum(x*x + tanh(x)); single-path grads are 2x and 1 - tanh^2.
        let xv = [0.3, -1.2];
        let mut tape = Tape::new();
        let x = tape.param(t(&[xv.to_vec()]));
        let sq = tape.hadamard(x, x).unwrap();
        let th = tape.tanh(x);
        let both = tape.concat_cols(sq, th).unwrap();
        let s = tape.sum(both);
        tape.backward(s).unwrap();

        let mut single_sq = Tape::new();
        let xs = single_sq.param(t(&[xv.to_vec()]));
        let sq = single_sq.hadamard(xs, xs).unwrap();
        let s = single_sq.sum(sq);
        single_sq.backward(s).unwrap();

        let mut single_th = Tape::new();
        let xt = single_th.param(t(&[xv.to_vec()]));
        let th = single_th.tanh(xt);
        let s = single_th.sum(th);
        single_th.backward(s).unwrap();

        for i in 0..2 {
            let expected = single_sq.grad(xs).as_slice()[i] + single_th.grad(xt).as_slice()[i];
            assert!((tape.grad(x).as_slice()[i] - expected).abs() < 1e-15);
        }
    }
}
