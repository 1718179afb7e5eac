//! Finite-difference checking of tape gradients on random op graphs.
//!
//! Numerical derivatives use a Richardson-extrapolated central difference,
//! `(4 D(h/2) - D(h)) / 3`, whose truncation error is `O(h^4)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{LossKind, Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// One step of a recorded program. Operands index earlier steps.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Param(usize),
    Const(Tensor),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    AddBias(usize, usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Bce(usize, usize),
}

/// A program ending in a scalar, with its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct OpGraph {
    pub steps: Vec<Step>,
    pub params: Vec<Tensor>,
}

/// Inputs to a ReLU closer to 0 than this make finite differences straddle
/// the kink, so generated graphs avoid them.
const KINK_MARGIN: f64 = 1e-2;

impl OpGraph {
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replays the program on `tape` with `params` as leaves. Returns the
    /// var of every step (the last is the output) and the parameter leaves.
    pub fn record(&self, tape: &mut Tape, params: &[Tensor]) -> Result<(Vec<Var>, Vec<Var>)> {
        if self.steps.is_empty() {
            return Err(Error::Contract("empty program".into()));
        }
        let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let mut vars: Vec<Var> = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let v = match step {
                Step::Param(i) => leaves[*i],
                Step::Const(t) => tape.constant(t.clone()),
                Step::MatMul(a, b) => tape.matmul(vars[*a], vars[*b])?,
                Step::Add(a, b) => tape.add(vars[*a], vars[*b])?,
                Step::Sub(a, b) => tape.sub(vars[*a], vars[*b])?,
                Step::Mul(a, b) => tape.mul(vars[*a], vars[*b])?,
                Step::Scale(a, c) => tape.scale(vars[*a], *c)?,
                Step::Sigmoid(a) => tape.sigmoid(vars[*a])?,
                Step::Relu(a) => tape.relu(vars[*a])?,
                Step::AddBias(a, b) => tape.add_bias(vars[*a], vars[*b])?,
                Step::Sum(a) => tape.sum(vars[*a])?,
                Step::Mean(a) => tape.mean(vars[*a])?,
                Step::Mse(a, b) => tape.loss(LossKind::Mse, vars[*a], vars[*b])?,
                Step::Bce(a, b) => tape.loss(LossKind::Bce, vars[*a], vars[*b])?,
            };
            vars.push(v);
        }
        Ok((vars, leaves))
    }

    pub fn value(&self, params: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let (vars, _) = self.record(&mut tape, params)?;
        tape.value(vars[vars.len() - 1]).item()
    }

    /// Reverse-mode gradient for every parameter, flattened in order.
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (vars, leaves) = self.record(&mut tape, &self.params)?;
        tape.backward(vars[vars.len() - 1])?;
        let mut g = Vec::with_capacity(self.num_parameters());
        for v in leaves {
            g.extend_from_slice(tape.grad(v).ok_or_else(|| Error::Contract("parameter has no gradient".into()))?);
        }
        Ok(g)
    }

    /// Extrapolated central differences for every parameter, flattened in order.
    pub fn numerical_gradient(&self, h: f64) -> Result<Vec<f64>> {
        let mut g = Vec::with_capacity(self.num_parameters());
        for (p, t) in self.params.iter().enumerate() {
            for k in 0..t.len() {
                let at = |delta: f64| -> Result<f64> {
                    let mut params = self.params.clone();
                    params[p].update(|d| d[k] += delta)?;
                    self.value(&params)
                };
                let central = |h: f64| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
                let coarse = central(h)?;
                let fine = central(h / 2.0)?;
                g.push((4.0 * fine - coarse) / 3.0);
            }
        }
        Ok(g)
    }

    /// Smallest `|x|` over every ReLU input at the current parameters.
    fn relu_margin(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let (vars, _) = self.record(&mut tape, &self.params)?;
        Ok(self
            .steps
            .iter()
            .filter_map(|s| match s {
                Step::Relu(a) => Some(vars[*a]),
                _ => None,
            })
            .flat_map(|v| tape.value(v).data().iter().map(|x| x.abs()).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min))
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::from_parts(shape, data)
}

struct Builder {
    steps: Vec<Step>,
    params: Vec<Tensor>,
    shapes: Vec<Vec<usize>>,
    budget: usize,
}

impl Builder {
    fn push(&mut self, step: Step, shape: Vec<usize>) -> usize {
        self.steps.push(step);
        self.shapes.push(shape);
        self.steps.len() - 1
    }

    fn param(&mut self, rng: &mut impl Rng, shape: Vec<usize>) -> Option<usize> {
        let n: usize = shape.iter().product();
        if n > self.budget {
            return None;
        }
        self.budget -= n;
        self.params.push(normal_tensor(rng, shape.clone(), 0.8));
        Some(self.push(Step::Param(self.params.len() - 1), shape))
    }

    /// A random earlier matrix-valued step.
    fn pick(&self, rng: &mut impl Rng) -> usize {
        let matrices: Vec<usize> = (0..self.steps.len()).filter(|&i| self.shapes[i].len() == 2).collect();
        matrices[rng.random_range(0..matrices.len())]
    }

    /// A random earlier step with the same shape as `a` (possibly `a` itself).
    fn same_shape(&self, rng: &mut impl Rng, a: usize) -> usize {
        let matches: Vec<usize> = (0..self.steps.len()).filter(|&i| self.shapes[i] == self.shapes[a]).collect();
        matches[rng.random_range(0..matches.len())]
    }
}

/// A random program over at most `max_params` parameters, reduced to a
/// scalar. Operands are drawn from every earlier value, so values feed
/// several consumers. Graphs with a ReLU input too close to its kink are
/// redrawn.
pub fn random_op_graph(seed_value: u64, max_params: usize) -> OpGraph {
    for attempt in 0.. {
        let mut rng = seed::rng(seed_value, seed::INIT, attempt);
        let g = draw(&mut rng, max_params);
        if g.relu_margin().map(|m| m > KINK_MARGIN).unwrap_or(false) {
            return g;
        }
    }
    unreachable!("attempts are unbounded")
}

fn draw(rng: &mut impl Rng, max_params: usize) -> OpGraph {
    let mut b = Builder {
        steps: Vec::new(),
        params: Vec::new(),
        shapes: Vec::new(),
        budget: max_params,
    };
    let rows = rng.random_range(1..=4);
    let cols = rng.random_range(1..=5);
    b.param(rng, vec![rows, cols]).expect("first parameter fits the budget");
    let n_ops = rng.random_range(3..=9);
    for _ in 0..n_ops {
        let a = b.pick(rng);
        let shape = b.shapes[a].clone();
        match rng.random_range(0..8) {
            0 => {
                let k = rng.random_range(1..=5);
                if let Some(w) = b.param(rng, vec![shape[1], k]) {
                    b.push(Step::MatMul(a, w), vec![shape[0], k]);
                }
            }
            1 => {
                let c = b.same_shape(rng, a);
                b.push(Step::Add(a, c), shape);
            }
            2 => {
                let c = b.same_shape(rng, a);
                b.push(Step::Sub(a, c), shape);
            }
            3 => {
                let c = b.same_shape(rng, a);
                b.push(Step::Mul(a, c), shape);
            }
            4 => {
                let c = rng.random_range(-2.0..2.0);
                b.push(Step::Scale(a, c), shape);
            }
            5 => {
                b.push(Step::Sigmoid(a), shape);
            }
            6 => {
                b.push(Step::Relu(a), shape);
            }
            _ => {
                if let Some(bias) = b.param(rng, vec![shape[1]]) {
                    b.push(Step::AddBias(a, bias), shape);
                }
            }
        }
    }
    let last = b.steps.len() - 1;
    let shape = b.shapes[last].clone();
    match rng.random_range(0..4) {
        0 => {
            b.push(Step::Sum(last), vec![1]);
        }
        1 => {
            b.push(Step::Mean(last), vec![1]);
        }
        2 => {
            let t = b.push(Step::Const(normal_tensor(rng, shape, 1.0)), b.shapes[last].clone());
            b.push(Step::Mse(last, t), vec![1]);
        }
        _ => {
            let p = b.push(Step::Sigmoid(last), shape.clone());
            let n = shape.iter().product();
            let labels = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            let t = b.push(Step::Const(Tensor::from_parts(shape.clone(), labels)), shape);
            b.push(Step::Bce(p, t), vec![1]);
        }
    }
    OpGraph {
        steps: b.steps,
        params: b.params,
    }
}

/// `|a - n| / max(|a|, |n|, floor)` for each pair, maximized.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graphs_are_seeded_and_within_budget() {
        for s in 0..20 {
            let g = random_op_graph(s, 200);
            assert!(g.num_parameters() <= 200);
            assert_eq!(g, random_op_graph(s, 200));
            assert!(g.value(&g.params).unwrap().is_finite());
        }
    }

    #[test]
    fn gradient_of_a_quadratic() {
        // sum(p * p) has gradient 2p
        let p = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let g = OpGraph {
            steps: vec![Step::Param(0), Step::Mul(0, 0), Step::Sum(1)],
            params: vec![p],
        };
        assert_eq!(g.gradient().unwrap(), vec![1.0, -2.0, 4.0]);
        let n = g.numerical_gradient(1e-3).unwrap();
        assert!(max_relative_error(&g.gradient().unwrap(), &n, 1e-12) < 1e-10);
    }
}
