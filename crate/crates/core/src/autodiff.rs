//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the [`Tape`]; a node's inputs always
//! have smaller indices, so walking the tape backwards is a valid reverse
//! topological order and each node is visited exactly once.

use crate::error::{Error, Result};
use crate::loss::{self, PROB_FLOOR};
use crate::tensor::Tensor;

/// Variance epsilon used inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    HSwish(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<f64>,
        probs: Vec<f64>,
    },
    KlDivergence {
        teacher: Vec<f64>,
        student: Var,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Per-column statistics computed by a batch-statistics normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (zeros if it received none) into `target`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension(format!(
            "expected a matrix, got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies the value of `v` out as a tensor without gradient state.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf holding a copy of `t`; it takes gradients iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a constant (never differentiated) leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a))?;
        let (k2, n) = dims2(self.shape(b))?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {m}x{k} by {k2}x{n}: inner dimensions disagree"
            )));
        }
        let out = matmul_kernel(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} for {m}x{n} input",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![m, n], out, rg, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Scale(x, s))
    }

    /// Batch normalization using the statistics of `x` itself. Returns the
    /// output and the (biased) batch moments.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchMoments)> {
        let (m, n) = dims2(self.shape(x))?;
        if m == 0 {
            return Err(Error::Dimension("batch norm over an empty batch".into()));
        }
        let xs = self.value(x);
        let mut mean = vec![0.0; n];
        for row in xs.chunks_exact(n) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for row in xs.chunks_exact(n) {
            for j in 0..n {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let moments = BatchMoments { mean, var };
        let v = self.batch_norm_with(x, gamma, beta, &moments.mean, &moments.var, true)?;
        Ok((v, moments))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        self.batch_norm_with(x, gamma, beta, mean, var, false)
    }

    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("mean", mean.len()),
            ("var", var.len()),
        ] {
            if len != n {
                return Err(Error::Dimension(format!(
                    "batch norm {name} of length {len} for width {n}"
                )));
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Vec::with_capacity(m * n);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).chunks_exact(n) {
            for j in 0..n {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::Relu(x))
    }

    /// `x * relu6(x + 3) / 6`.
    pub fn hswish(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
            .collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, rg, Op::HSwish(x))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x))?;
        let out = loss::softmax_rows(self.value(x), n)?;
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, rg, Op::Softmax(x)))
    }

    /// Mean cross entropy of `logits` against one-hot `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let (m, n) = dims2(self.shape(logits))?;
        if labels.shape() != [m, n] {
            return Err(Error::Dimension(format!(
                "labels {:?} for logits {m}x{n}",
                labels.shape()
            )));
        }
        let (value, probs) = loss::cross_entropy_kernel(self.value(logits), labels.values(), n)?;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![value],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.values().to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `KL(teacher || student)`. The teacher is a
    /// constant; only `student` (a probability matrix) receives gradient.
    pub fn kl_divergence(&mut self, teacher: &Tensor, student: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(student))?;
        if teacher.shape() != [m, n] {
            return Err(Error::Dimension(format!(
                "teacher {:?} for student {m}x{n}",
                teacher.shape()
            )));
        }
        let value = loss::kl_kernel(teacher.values(), self.value(student), n)?;
        let rg = self.rg(student);
        Ok(self.push(
            vec![],
            vec![value],
            rg,
            Op::KlDivergence {
                teacher: teacher.values().to_vec(),
                student,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(vec![], vec![s], rg, Op::Mean(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a))?;
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = dot(dyr, br);
                        }
                    }
                    add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let dyr = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            db[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(dyr)
                                .for_each(|(o, d)| *o += aip * d);
                        }
                    }
                    add_grad(grads, *b, &db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*x) {
                    add_grad(grads, *x, dy);
                }
                if self.rg(*bias) {
                    let n = node.shape[1];
                    let mut db = vec![0.0; n];
                    for row in dy.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                    add_grad(grads, *bias, &db);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_grad(grads, *a, dy);
                }
                if self.rg(*b) {
                    add_grad(grads, *b, dy);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = dy.iter().map(|d| d * s).collect();
                add_grad(grads, *x, &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (dyr, hr) in dy.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        dbeta[j] += dyr[j];
                        dgamma[j] += dyr[j] * hr[j];
                    }
                }
                if self.rg(*x) {
                    let g = self.value(*gamma);
                    let mut dx = vec![0.0; m * n];
                    if *batch_stats {
                        let mf = m as f64;
                        for i in 0..m {
                            for j in 0..n {
                                let k = i * n + j;
                                dx[k] = g[j] * inv_std[j] / mf
                                    * (mf * dy[k] - dbeta[j] - xhat[k] * dgamma[j]);
                            }
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..n {
                                let k = i * n + j;
                                dx[k] = g[j] * inv_std[j] * dy[k];
                            }
                        }
                    }
                    add_grad(grads, *x, &dx);
                }
                if self.rg(*gamma) {
                    add_grad(grads, *gamma, &dgamma);
                }
                if self.rg(*beta) {
                    add_grad(grads, *beta, &dbeta);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                add_grad(grads, *x, &dx);
            }
            Op::HSwish(x) => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| {
                        let slope = if v <= -3.0 {
                            0.0
                        } else if v >= 3.0 {
                            1.0
                        } else {
                            (2.0 * v + 3.0) / 6.0
                        };
                        slope * d
                    })
                    .collect();
                add_grad(grads, *x, &dx);
            }
            Op::Softmax(x) => {
                let n = node.shape[1];
                let mut dx = vec![0.0; node.value.len()];
                for ((pr, dyr), dxr) in node
                    .value
                    .chunks_exact(n)
                    .zip(dy.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let s = dot(pr, dyr);
                    for j in 0..n {
                        dxr[j] = pr[j] * (dyr[j] - s);
                    }
                }
                add_grad(grads, *x, &dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = self.shape(*logits)[0] as f64;
                let dx: Vec<f64> = probs
                    .iter()
                    .zip(labels)
                    .map(|(p, y)| dy[0] * (p - y) / m)
                    .collect();
                add_grad(grads, *logits, &dx);
            }
            Op::KlDivergence { teacher, student } => {
                let m = self.shape(*student)[0] as f64;
                let dx: Vec<f64> = teacher
                    .iter()
                    .zip(self.value(*student))
                    .map(|(&t, &s)| {
                        if s < PROB_FLOOR {
                            0.0
                        } else {
                            -dy[0] * t / (s * m)
                        }
                    })
                    .collect();
                add_grad(grads, *student, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![dy[0]; self.value(*x).len()];
                add_grad(grads, *x, &dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let dx = vec![dy[0] / n; self.value(*x).len()];
                add_grad(grads, *x, &dx);
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

/// Matrix product of two constant tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.constant(a);
    let bv = tape.constant(b);
    let out = tape.matmul(av, bv)?;
    Ok(tape.tensor(out))
}
