//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids only ever refer to
//! earlier nodes, so the tape is already in topological order and
//! [`Tape::backward`] is a single reverse sweep. Gradients accumulate into
//! leaves that were created with `requires_grad` until [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Clamp applied to BCE predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Bce,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    BceElementwise(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every recorded node, keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

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

    /// Accumulated gradient of a leaf, present once `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor, inputs: &[Var], kind: Op) -> Result<Var> {
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op} (element {i})")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: kind,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.value(a).shape().len() > 2 || self.value(b).shape().len() > 2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], data), &[a, b], Op::MatMul(a, b))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data), &[a, b], kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data), &[a], kind)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite("scale coefficient".into()));
        }
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    /// `x[m x n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::add_bias_inplace(&mut data, self.value(bias).data());
        let shape = self.value(x).shape().to_vec();
        self.push("add_bias", Tensor::from_parts(shape, data), &[x, bias], Op::AddBias(x, bias))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = kernels::sum(self.value(a).data());
        self.push("sum", Tensor::from_parts(vec![1], vec![s]), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s = kernels::sum(v.data()) / v.len() as f64;
        self.push("mean", Tensor::from_parts(vec![1], vec![s]), &[a], Op::Mean(a))
    }

    /// Mean-reduced loss.
    pub fn loss(&mut self, kind: LossKind, prediction: Var, target: Var) -> Result<Var> {
        match kind {
            LossKind::Mse => {
                self.same_shape("mse", prediction, target)?;
                let p = self.value(prediction).data();
                let t = self.value(target).data();
                if p.is_empty() {
                    return Err(Error::Contract("mse of empty tensor".into()));
                }
                let s = p
                    .iter()
                    .zip(t)
                    .fold(0.0, |acc, (&a, &b)| acc + (a - b) * (a - b))
                    / p.len() as f64;
                self.push(
                    "mse",
                    Tensor::from_parts(vec![1], vec![s]),
                    &[prediction, target],
                    Op::Mse(prediction, target),
                )
            }
            LossKind::Bce => {
                let per = self.bce_elementwise(prediction, target)?;
                self.mean(per)
            }
        }
    }

    /// Unreduced binary cross-entropy. Predictions are clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`; the gradient is evaluated at the clamped point.
    pub fn bce_elementwise(&mut self, prediction: Var, target: Var) -> Result<Var> {
        self.same_shape("bce", prediction, target)?;
        let p = self.value(prediction).data();
        let t = self.value(target).data();
        if let Some(x) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Numeric(format!("bce prediction {x} outside [0, 1]")));
        }
        if let Some(x) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Numeric(format!("bce target {x} outside [0, 1]")));
        }
        let data = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .collect();
        let shape = self.value(prediction).shape().to_vec();
        self.push(
            "bce",
            Tensor::from_parts(shape, data),
            &[prediction, target],
            Op::BceElementwise(prediction, target),
        )
    }

    /// Reverse sweep from a scalar `output`. Leaf gradients accumulate across
    /// calls; every `requires_grad` leaf has a gradient afterwards (zeros when
    /// it does not influence `output`).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = output.0;
        if out >= self.nodes.len() {
            return Err(Error::Contract("backward on a var from another tape".into()));
        }
        if !self.nodes[out].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        local[out] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for idx in (0..=out).rev() {
            let Some(g) = local[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            let mut send = |v: Var, contribution: Vec<f64>| {
                if !rg(v) {
                    return;
                }
                match &mut local[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            };
            match node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = val(a).dims2();
                    let (_, n) = val(b).dims2();
                    if rg(a) {
                        send(a, kernels::matmul_a_bt(&g, val(b).data(), m, n, k));
                    }
                    if rg(b) {
                        send(b, kernels::matmul_at_b(val(a).data(), &g, m, k, n));
                    }
                }
                Op::Add(a, b) => {
                    if rg(b) {
                        send(b, g.clone());
                    }
                    send(a, g);
                }
                Op::Sub(a, b) => {
                    if rg(b) {
                        send(b, g.iter().map(|x| -x).collect());
                    }
                    send(a, g);
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        send(a, g.iter().zip(val(b).data()).map(|(g, y)| g * y).collect());
                    }
                    if rg(b) {
                        send(b, g.iter().zip(val(a).data()).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale(a, c) => send(a, g.iter().map(|x| c * x).collect()),
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    send(a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Relu(a) => {
                    let x = val(a).data();
                    send(
                        a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::AddBias(x, b) => {
                    if rg(b) {
                        let n = val(b).len();
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        send(b, gb);
                    }
                    send(x, g);
                }
                Op::Sum(a) => send(a, vec![g[0]; val(a).len()]),
                Op::Mean(a) => {
                    let n = val(a).len();
                    send(a, vec![g[0] / n as f64; n]);
                }
                Op::Mse(p, t) => {
                    let pv = val(p).data();
                    let tv = val(t).data();
                    let scale = 2.0 * g[0] / pv.len() as f64;
                    let d: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| scale * (a - b)).collect();
                    if rg(t) {
                        send(t, d.iter().map(|x| -x).collect());
                    }
                    send(p, d);
                }
                Op::BceElementwise(p, t) => {
                    let pv = val(p).data();
                    let tv = val(t).data();
                    if rg(p) {
                        let d = g
                            .iter()
                            .zip(pv.iter().zip(tv))
                            .map(|(g, (&p, &t))| {
                                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                                g * (-t / pc + (1.0 - t) / (1.0 - pc))
                            })
                            .collect();
                        send(p, d);
                    }
                    if rg(t) {
                        let d = g
                            .iter()
                            .zip(pv)
                            .map(|(g, &p)| {
                                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                                g * ((1.0 - pc).ln() - pc.ln())
                            })
                            .collect();
                        send(t, d);
                    }
                }
            }
        }

        for (idx, g) in leaf_grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of leaf {idx}")));
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let col = tape.constant(t(&[2, 1], &[3., 4.]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.]);
        assert_eq!(tape.value(d).shape(), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 3], &[0.; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., -3., 3.]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 3.]);
        let two = tape.constant(t(&[1], &[2.0]));
        let s2 = tape.sigmoid(two).unwrap();
        // 1 / (1 + e^-2)
        assert!((tape.value(s2).data()[0] - 0.880_797_077_977_882_3).abs() < 1e-15);
        let y = tape.constant(t(&[3], &[1., 1., 1.]));
        assert!(matches!(tape.add(x, two), Err(Error::Dimension { .. })));
        let sc = tape.scale(x, -2.0).unwrap();
        assert_eq!(tape.value(sc).data(), &[-0., 6., -6.]);
        let m = tape.mul(x, y).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(x).data());
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::new();
        let y = tape.constant(t(&[2], &[0.3, 0.7]));
        let l = tape.loss(LossKind::Mse, y, y).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let p = tape.constant(t(&[1], &[0.5]));
        let one = tape.constant(t(&[1], &[1.0]));
        let l = tape.loss(LossKind::Bce, p, one).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = tape.constant(t(&[1], &[0.9]));
        let l = tape.loss(LossKind::Bce, p, one).unwrap();
        // -ln 0.9
        assert!((tape.value(l).item().unwrap() - 0.105_360_515_657_826_3).abs() < 1e-15);

        let bad = tape.constant(t(&[1], &[1.5]));
        assert!(matches!(tape.loss(LossKind::Bce, bad, one), Err(Error::Numeric(_))));
    }

    #[test]
    fn bce_clamps_exact_zero_and_one() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[0.0, 1.0]));
        let y = tape.constant(t(&[2], &[1.0, 0.0]));
        let l = tape.loss(LossKind::Bce, p, y).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v - (-(BCE_EPS).ln())).abs() < 1e-9, "{v}");
        tape.backward(l).unwrap();
        assert!(tape.grad(p).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[1., 2., 3.]));
        let c = tape.constant(t(&[1], &[4.0]));
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0., 0., 0.]);

        tape.zero_grad();
        let sq = tape.mul(w, w).unwrap();
        let y = tape.sum(sq).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2., 4., 6.]);
        // accumulation without reset
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4., 8., 12.]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }
}
