use super::{Tensor, TensorError};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Concat,
    Mean,
    Sum,
    Sigmoid,
    Softplus,
    Tanh,
    Square,
    Sqrt,
    Abs,
    Huber,
    L2Norm,
    Dot,
    Cosine,
    Softmax,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar output with respect to the tape's leaves. Every leaf
/// created with `requires_grad` appears, with zeros when it did not reach the
/// output.
#[derive(Debug)]
pub struct Gradients {
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.by_leaf.get(&id.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, &Tensor)> {
        self.by_leaf.iter().map(|(&k, v)| (VarId(k), v))
    }
}

/// Wengert list. Operations record eagerly-computed values; `backward` walks
/// the list in reverse once and then retires the tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    /// Registers `tensor` as a leaf; its `requires_grad` flag decides whether
    /// `backward` reports a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> VarId {
        let rg = tensor.requires_grad();
        self.push(Op::Leaf, vec![], tensor, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> VarId {
        self.push(Op::Leaf, vec![], tensor.with_requires_grad(false), false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> VarId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, inputs: Vec<VarId>, value: Tensor) -> VarId {
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, inputs.into_iter().map(|i| i.0).collect(), value, rg)
    }

    fn binary_values(
        &self,
        op: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let vals = ta
                .values()
                .iter()
                .zip(tb.values())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), vals)
        } else if tb.is_scalar() {
            let y = tb.item();
            let vals = ta.values().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), vals)
        } else if ta.is_scalar() {
            let x = ta.item();
            let vals = tb.values().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), vals)
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let v = self.binary_values("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let v = self.binary_values("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let v = self.binary_values("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId, TensorError> {
        let ta = self.value(a);
        let v = Tensor::new(
            ta.shape().to_vec(),
            ta.values().iter().map(|&x| x * c).collect(),
        )?;
        Ok(self.push_op(Op::Scale(c), vec![a], v))
    }

    /// Matrix product: `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        let v = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ta.values()[i * k + p];
                        for j in 0..n {
                            out[i * n + j] += aip * tb.values()[p * n + j];
                        }
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            (&[m, k], &[k2]) => {
                if k != k2 {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += ta.values()[i * k + p] * tb.values()[p];
                    }
                    out[i] = acc;
                }
                Tensor::vector(out)
            }
            _ => return Err(mismatch()),
        };
        Ok(self.push_op(Op::MatMul, vec![a, b], v))
    }

    /// Concatenation of rank-1 tensors in argument order.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut values = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(TensorError::UnsupportedRank {
                    op: "concat",
                    shape: t.shape().to_vec(),
                });
            }
            values.extend_from_slice(t.values());
        }
        Ok(self.push_op(Op::Concat, parts.to_vec(), Tensor::vector(values)))
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "mean" });
        }
        let m = ta.values().iter().sum::<f64>() / ta.numel() as f64;
        Ok(self.push_op(Op::Mean, vec![a], Tensor::scalar(m)))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let s = self.value(a).values().iter().sum::<f64>();
        Ok(self.push_op(Op::Sum, vec![a], Tensor::scalar(s)))
    }

    fn unary(&mut self, op: Op, a: VarId, f: impl Fn(f64) -> f64) -> Result<VarId, TensorError> {
        let ta = self.value(a);
        let v = Tensor::new(
            ta.shape().to_vec(),
            ta.values().iter().map(|&x| f(x)).collect(),
        )?;
        Ok(self.push_op(op, vec![a], v))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(Op::Sigmoid, a, sigmoid_stable)
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(Op::Softplus, a, softplus_stable)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId, TensorError> {
        if self.value(a).values().iter().any(|&x| x < 0.0) {
            return Err(TensorError::NegativeOperand { op: "sqrt" });
        }
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(Op::Abs, a, f64::abs)
    }

    /// Elementwise Huber transform with unit transition point: quadratic
    /// inside `[-1, 1]`, linear outside.
    pub fn huber(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(Op::Huber, a, |x| {
            if x.abs() <= 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        })
    }

    pub fn l2norm(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let n = self
            .value(a)
            .values()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if n == 0.0 {
            return Err(TensorError::ZeroNorm { op: "l2norm" });
        }
        Ok(self.push_op(Op::L2Norm, vec![a], Tensor::scalar(n)))
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let s = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| x * y)
            .sum::<f64>();
        Ok(self.push_op(Op::Dot, vec![a, b], Tensor::scalar(s)))
    }

    pub fn cosine(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let na = ta.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = tb.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::ZeroNorm { op: "cosine" });
        }
        let d = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| x * y)
            .sum::<f64>();
        Ok(self.push_op(Op::Cosine, vec![a, b], Tensor::scalar(d / (na * nb))))
    }

    /// Softmax over a rank-1 tensor, shifted by the maximum for stability.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let ta = self.value(a);
        if ta.shape().len() != 1 || ta.numel() == 0 {
            return Err(TensorError::UnsupportedRank {
                op: "softmax",
                shape: ta.shape().to_vec(),
            });
        }
        let max = ta
            .values()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = ta.values().iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(self.push_op(
            Op::Softmax,
            vec![a],
            Tensor::vector(exps.into_iter().map(|e| e / z).collect()),
        ))
    }

    /// Reverse pass from a scalar `out`. Consumes the tape's ability to run
    /// again; rebuild a fresh tape per forward pass.
    pub fn backward(&mut self, out: VarId) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let out_shape = self.nodes[out.0].value.shape().to_vec();
        if self.nodes[out.0].value.numel() != 1 {
            return Err(TensorError::NonScalarOutput { shape: out_shape });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(vec![1.0]);
        }
        let mut by_leaf: HashMap<usize, Tensor> = HashMap::new();

        for idx in (0..=out.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)
                        .expect("gradient matches leaf shape");
                    by_leaf.insert(idx, t);
                    continue;
                }
                _ => {}
            }
            let inputs = node.inputs.clone();
            let contribs = self.local_grads(idx, &g);
            for (slot, contrib) in inputs.iter().zip(contribs) {
                if !self.nodes[*slot].requires_grad {
                    continue;
                }
                let entry = grads[*slot].get_or_insert_with(|| vec![0.0; contrib.len()]);
                for (e, c) in entry.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
        }

        // Leaves never touched by the walk report zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                by_leaf
                    .entry(idx)
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { by_leaf })
    }

    /// Per-input gradient contributions of node `idx` given its output
    /// cotangent `g`. Entries align with `nodes[idx].inputs`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<Vec<f64>> {
        let node = &self.nodes[idx];
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        match node.op {
            Op::Leaf => vec![],
            Op::Add => self.binary_grads(idx, g, |_, _| 1.0, |_, _| 1.0),
            Op::Sub => self.binary_grads(idx, g, |_, _| 1.0, |_, _| -1.0),
            Op::Mul => self.binary_grads(idx, g, |_, y| y, |x, _| x),
            Op::Scale(c) => vec![g.iter().map(|gi| gi * c).collect()],
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                match (a.shape(), b.shape()) {
                    (&[m, k], &[_, n]) => {
                        let mut ga = vec![0.0; m * k];
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for p in 0..n {
                                    acc += g[i * n + p] * b.values()[j * n + p];
                                }
                                ga[i * k + j] = acc;
                            }
                        }
                        for i in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for p in 0..m {
                                    acc += a.values()[p * k + i] * g[p * n + j];
                                }
                                gb[i * n + j] = acc;
                            }
                        }
                        vec![ga, gb]
                    }
                    (&[m, k], &[_]) => {
                        let mut ga = vec![0.0; m * k];
                        let mut gx = vec![0.0; k];
                        for i in 0..m {
                            for j in 0..k {
                                ga[i * k + j] = g[i] * b.values()[j];
                                gx[j] += a.values()[i * k + j] * g[i];
                            }
                        }
                        vec![ga, gx]
                    }
                    _ => unreachable!("matmul forward validated shapes"),
                }
            }
            Op::Concat => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|&inp| {
                        let n = self.nodes[inp].value.numel();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        piece
                    })
                    .collect()
            }
            Op::Mean => {
                let n = input(0).numel() as f64;
                vec![vec![g[0] / n; input(0).numel()]]
            }
            Op::Sum => vec![vec![g[0]; input(0).numel()]],
            Op::Sigmoid => {
                let y = node.value.values();
                vec![g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect()]
            }
            Op::Softplus => {
                let x = input(0).values();
                vec![g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| gi * sigmoid_stable(xi))
                    .collect()]
            }
            Op::Tanh => {
                let y = node.value.values();
                vec![g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect()]
            }
            Op::Square => {
                let x = input(0).values();
                vec![g.iter().zip(x).map(|(gi, xi)| gi * 2.0 * xi).collect()]
            }
            Op::Sqrt => {
                let y = node.value.values();
                vec![g.iter().zip(y).map(|(gi, yi)| gi / (2.0 * yi)).collect()]
            }
            Op::Abs => {
                let x = input(0).values();
                vec![g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| gi * if *xi == 0.0 { 0.0 } else { xi.signum() })
                    .collect()]
            }
            Op::Huber => {
                let x = input(0).values();
                vec![g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| gi * xi.clamp(-1.0, 1.0))
                    .collect()]
            }
            Op::L2Norm => {
                let x = input(0).values();
                let n = node.value.item();
                vec![x.iter().map(|xi| g[0] * xi / n).collect()]
            }
            Op::Dot => {
                let (a, b) = (input(0).values(), input(1).values());
                vec![
                    b.iter().map(|bi| g[0] * bi).collect(),
                    a.iter().map(|ai| g[0] * ai).collect(),
                ]
            }
            Op::Cosine => {
                let (a, b) = (input(0).values(), input(1).values());
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let c = node.value.item();
                let ga = a
                    .iter()
                    .zip(b)
                    .map(|(ai, bi)| g[0] * (bi / (na * nb) - c * ai / (na * na)))
                    .collect();
                let gb = a
                    .iter()
                    .zip(b)
                    .map(|(ai, bi)| g[0] * (ai / (na * nb) - c * bi / (nb * nb)))
                    .collect();
                vec![ga, gb]
            }
            Op::Softmax => {
                let y = node.value.values();
                let inner: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                vec![g.iter().zip(y).map(|(gi, yi)| yi * (gi - inner)).collect()]
            }
        }
    }

    /// Gradients for elementwise binary ops including the scalar-broadcast
    /// cases; `da`/`db` give the partials at one coordinate pair.
    fn binary_grads(
        &self,
        idx: usize,
        g: &[f64],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) -> Vec<Vec<f64>> {
        let node = &self.nodes[idx];
        let a = &self.nodes[node.inputs[0]].value;
        let b = &self.nodes[node.inputs[1]].value;
        if a.shape() == b.shape() {
            let ga = g
                .iter()
                .zip(a.values().iter().zip(b.values()))
                .map(|(gi, (&x, &y))| gi * da(x, y))
                .collect();
            let gb = g
                .iter()
                .zip(a.values().iter().zip(b.values()))
                .map(|(gi, (&x, &y))| gi * db(x, y))
                .collect();
            vec![ga, gb]
        } else if b.is_scalar() {
            let y = b.item();
            let ga = g
                .iter()
                .zip(a.values())
                .map(|(gi, &x)| gi * da(x, y))
                .collect();
            let gb = vec![g.iter().zip(a.values()).map(|(gi, &x)| gi * db(x, y)).sum()];
            vec![ga, gb]
        } else {
            let x = a.item();
            let ga = vec![g.iter().zip(b.values()).map(|(gi, &y)| gi * da(x, y)).sum()];
            let gb = g
                .iter()
                .zip(b.values())
                .map(|(gi, &y)| gi * db(x, y))
                .collect();
            vec![ga, gb]
        }
    }
}

/// Central-difference gradient of `f` at `x` with step `h`. The oracle the
/// analytic backward pass is held against in tests.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor, TensorError>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = f(&probe);
        probe.values_mut()[i] = orig - h;
        let down = f(&probe);
        probe.values_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite {
                context: format!("finite-difference probe at flat index {i}"),
            });
        }
        grad.values_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
