//! Autoencoder and attribute classifiers.

mod checkpoint;
mod train;

use std::sync::Arc;

pub use checkpoint::{CheckpointKind, ModelCheckpoint, TrainingMeta};
pub use train::{
    evaluate_accuracy, train_autoencoder, train_classifier, AutoencoderHyperparams,
    ClassifierHyperparams, EpochLog, TrainMode, TrainedAutoencoder, TrainedClassifier,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputActivation};
use crate::tensor::Tensor;

/// Anything that maps a flattened image to a single score and can be
/// differentiated on a tape.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;

    fn input_dim(&self) -> usize;

    /// Scores for every row of `x[n x input_dim]`.
    fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Records the computation on `tape`; the result is `[n x 1]`.
    fn trace(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    /// Score of a single image of any shape with `input_dim` elements.
    fn predict(&self, image: &Tensor) -> Result<f64> {
        if image.len() != self.input_dim() {
            return Err(Error::dim(
                "predict",
                format!(
                    "image {:?} has {} values, {} expects {}",
                    image.shape(),
                    image.len(),
                    self.name(),
                    self.input_dim()
                ),
            ));
        }
        let x = image.clone().reshape(vec![1, self.input_dim()])?;
        Ok(self.predict_batch(&x)?[0])
    }
}

/// Single-attribute classifier with a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub name: String,
    pub attribute: String,
    pub mlp: Mlp,
}

impl Classifier {
    pub fn new(name: &str, attribute: &str, mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 || mlp.spec.output_activation != OutputActivation::Sigmoid {
            return Err(Error::Config(format!(
                "classifier {name} needs a single sigmoid output, got {:?}",
                mlp.spec
            )));
        }
        Ok(Classifier {
            name: name.to_string(),
            attribute: attribute.to_string(),
            mlp,
        })
    }

    /// Classifier stored in a checkpoint; the attribute defaults to the name.
    pub fn from_checkpoint(checkpoint: &ModelCheckpoint) -> Result<Self> {
        train::classifier_from_checkpoint(checkpoint)
    }
}

impl Predictor for Classifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(x)?.into_data())
    }

    fn trace(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.mlp.bind(tape, false);
        self.mlp.trace(tape, &bound, x)
    }
}

/// `sum_i c_i * f_i(x)`, left unsquashed.
#[derive(Clone)]
pub struct CompositeClassifier {
    name: String,
    terms: Vec<(Arc<dyn Predictor>, f64)>,
}

impl std::fmt::Debug for CompositeClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompositeClassifier")
            .field("name", &self.name)
            .field(
                "terms",
                &self
                    .terms
                    .iter()
                    .map(|(p, c)| (p.name().to_string(), *c))
                    .collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl CompositeClassifier {
    pub fn new(name: &str, terms: Vec<(Arc<dyn Predictor>, f64)>) -> Result<Self> {
        let Some((first, _)) = terms.first() else {
            return Err(Error::Config(format!("composite {name} has no terms")));
        };
        let dim = first.input_dim();
        for (p, c) in &terms {
            if p.input_dim() != dim {
                return Err(Error::dim(
                    "composite",
                    format!("{} takes {} inputs, {} takes {dim}", p.name(), p.input_dim(), first.name()),
                ));
            }
            if !c.is_finite() {
                return Err(Error::Config(format!("non-finite coefficient for {}", p.name())));
            }
        }
        Ok(CompositeClassifier {
            name: name.to_string(),
            terms,
        })
    }

    /// Name of the form `a+0.3*b`.
    pub fn describe(terms: &[(Arc<dyn Predictor>, f64)]) -> String {
        terms
            .iter()
            .enumerate()
            .map(|(i, (p, c))| {
                let body = if *c == 1.0 {
                    p.name().to_string()
                } else {
                    format!("{c}*{}", p.name())
                };
                if i == 0 || c.is_sign_negative() {
                    body
                } else {
                    format!("+{body}")
                }
            })
            .collect()
    }

    pub fn terms(&self) -> &[(Arc<dyn Predictor>, f64)] {
        &self.terms
    }
}

impl Predictor for CompositeClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_dim(&self) -> usize {
        self.terms[0].0.input_dim()
    }

    fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for (p, c) in &self.terms {
            let y = p.predict_batch(x)?;
            match &mut acc {
                None => acc = Some(y.iter().map(|v| c * v).collect()),
                Some(a) => a.iter_mut().zip(&y).for_each(|(a, v)| *a += c * v),
            }
        }
        Ok(acc.unwrap())
    }

    fn trace(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (p, c) in &self.terms {
            let y = p.trace(tape, x)?;
            let scaled = tape.scale(y, *c)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        Ok(acc.unwrap())
    }
}

/// Encoder/decoder pair sharing one latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    pub fn new(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(Error::dim(
                "autoencoder",
                format!(
                    "encoder {:?} does not mirror decoder {:?}",
                    encoder.spec.layer_dims, decoder.spec.layer_dims
                ),
            ));
        }
        Ok(Autoencoder { encoder, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn image_dim(&self) -> usize {
        self.encoder.input_dim()
    }
}
