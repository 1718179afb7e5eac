//! Fully connected networks built on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, output_activation: OutputActivation) -> Result<Self> {
        let spec = MlpSpec {
            layer_dims,
            activation: Activation::Relu,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least two layer dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must be positive, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// Weights are stored `[in x out]` so a batch `[n x in]` multiplies on the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Tape handles for one recorded copy of an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(Mlp {
            spec,
            weights,
            biases,
        })
    }

    pub fn from_parts(spec: MlpSpec, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.num_layers() || biases.len() != spec.num_layers() {
            return Err(Error::Config(format!(
                "spec has {} layers, got {} weights and {} biases",
                spec.num_layers(),
                weights.len(),
                biases.len()
            )));
        }
        for (i, w) in spec.layer_dims.windows(2).enumerate() {
            if weights[i].shape() != [w[0], w[1]] || biases[i].shape() != [w[1]] {
                return Err(Error::dim(
                    "mlp",
                    format!(
                        "layer {i}: expected [{}, {}] / [{}], got {:?} / {:?}",
                        w[0],
                        w[1],
                        w[1],
                        weights[i].shape(),
                        biases[i].shape()
                    ),
                ));
            }
        }
        Ok(Mlp {
            spec,
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (rows, cols) = x.dims2();
        if cols != self.input_dim() {
            return Err(Error::dim(
                "mlp forward",
                format!("input {:?} does not match input dim {}", x.shape(), self.input_dim()),
            ));
        }
        Ok((rows, cols))
    }

    /// Batched forward pass without recording; `x` is `[n x in]` (or any shape
    /// whose trailing axes flatten to `in`). Returns `[n x out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, _) = self.check_input(x)?;
        let mut h = x.data().to_vec();
        let last = self.spec.num_layers() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (k, n) = w.dims2();
            h = kernels::matmul(&h, w.data(), rows, k, n);
            kernels::add_bias_inplace(&mut h, b.data());
            if i < last {
                kernels::relu_inplace(&mut h);
            } else if self.spec.output_activation == OutputActivation::Sigmoid {
                kernels::sigmoid_inplace(&mut h);
            }
        }
        Tensor::new(vec![rows, self.output_dim()], h)
    }

    /// Places every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundMlp {
        BoundMlp {
            weights: self
                .weights
                .iter()
                .map(|w| tape.leaf(w.clone(), requires_grad))
                .collect(),
            biases: self
                .biases
                .iter()
                .map(|b| tape.leaf(b.clone(), requires_grad))
                .collect(),
        }
    }

    /// Records the forward pass on `tape`. Values equal [`Mlp::forward`] bitwise.
    pub fn trace(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let (rows, cols) = self.check_input(tape.value(x))?;
        let mut h = x;
        if tape.value(x).shape() != [rows, cols] {
            let flat = tape.value(x).clone().reshape(vec![rows, cols])?;
            if tape.requires_grad(x) {
                return Err(Error::Contract(
                    "trace expects a 2-D input when it requires grad".into(),
                ));
            }
            h = tape.constant(flat);
        }
        let last = self.spec.num_layers() - 1;
        for i in 0..=last {
            h = tape.matmul(h, bound.weights[i])?;
            h = tape.add_bias(h, bound.biases[i])?;
            if i < last {
                h = tape.relu(h)?;
            } else if self.spec.output_activation == OutputActivation::Sigmoid {
                h = tape.sigmoid(h)?;
            }
        }
        Ok(h)
    }

    /// Parameters in a fixed order: w0, b0, w1, b1, ...
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn bound_vars(bound: &BoundMlp) -> Vec<Var> {
        bound
            .weights
            .iter()
            .zip(&bound.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![4], OutputActivation::None).is_err());
        assert!(MlpSpec::new(vec![4, 0, 1], OutputActivation::None).is_err());
        assert!(MlpSpec::new(vec![4, 3, 1], OutputActivation::Sigmoid).is_ok());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = MlpSpec::new(vec![10, 6, 2], OutputActivation::Sigmoid).unwrap();
        let a = Mlp::init(spec.clone(), 3).unwrap();
        let b = Mlp::init(spec.clone(), 3).unwrap();
        let c = Mlp::init(spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(a.weights[0].data().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn trace_matches_forward_bitwise() {
        let spec = MlpSpec::new(vec![5, 7, 3], OutputActivation::Sigmoid).unwrap();
        let mlp = Mlp::init(spec, 11).unwrap();
        let x = Tensor::matrix(2, 5, (0..10).map(|i| i as f64 / 7.0 - 0.6).collect()).unwrap();
        let plain = mlp.forward(&x).unwrap();
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = mlp.trace(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(out), &plain);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = MlpSpec::new(vec![5, 3], OutputActivation::None).unwrap();
        let mlp = Mlp::init(spec, 0).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(mlp.forward(&x), Err(Error::Dimension { .. })));
    }
}
