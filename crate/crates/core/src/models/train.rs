//! Minibatch training loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{CheckpointKind, ModelCheckpoint, TrainingMeta};
use super::{Autoencoder, Classifier, Predictor};
use crate::autodiff::{LossKind, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec, OutputActivation};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderHyperparams {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AutoencoderHyperparams {
    fn default() -> Self {
        AutoencoderHyperparams {
            latent_dim: 16,
            hidden: vec![256],
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Erm,
    WorstGroup,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Erm => "erm",
            TrainMode::WorstGroup => "worst_group",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierHyperparams {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Step size of the multiplicative group-weight update.
    pub eta: f64,
    /// Sensitive attribute that, with the target, defines the four groups.
    pub sensitive: Option<String>,
}

impl Default for ClassifierHyperparams {
    fn default() -> Self {
        ClassifierHyperparams {
            hidden: vec![64],
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            mode: TrainMode::Erm,
            eta: 0.1,
            sensitive: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedAutoencoder {
    pub encoder: ModelCheckpoint,
    pub decoder: ModelCheckpoint,
    pub history: Vec<EpochLog>,
}

impl TrainedAutoencoder {
    pub fn autoencoder(&self) -> Result<Autoencoder> {
        Autoencoder::new(self.encoder.mlp.clone(), self.decoder.mlp.clone())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochLog>,
}

impl TrainedClassifier {
    pub fn classifier(&self) -> Result<Classifier> {
        classifier_from_checkpoint(&self.checkpoint)
    }
}

pub(crate) fn classifier_from_checkpoint(c: &ModelCheckpoint) -> Result<Classifier> {
    Classifier::new(
        &c.name,
        c.attribute.as_deref().unwrap_or(&c.name),
        c.mlp.clone(),
    )
}

fn shuffled(rows: &[usize], seed_value: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut order = rows.to_vec();
    order.shuffle(&mut seed::rng(seed_value, stream, epoch as u64));
    order
}

fn divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(d) | Error::Numeric(d) => Error::Divergence { epoch, detail: d },
        other => other,
    }
}

fn batch_param_grads<'a>(tape: &'a Tape, vars: &[crate::autodiff::Var]) -> Vec<Option<&'a [f64]>> {
    vars.iter().map(|v| tape.grad(*v)).collect()
}

/// Trains encoder and decoder jointly on MSE reconstruction of the train split.
pub fn train_autoencoder(dataset: &Dataset, hp: &AutoencoderHyperparams) -> Result<TrainedAutoencoder> {
    if dataset.split.train.is_empty() {
        return Err(Error::InsufficientSamples("train split is empty".into()));
    }
    if hp.batch_size == 0 || hp.latent_dim == 0 {
        return Err(Error::Config("batch_size and latent_dim must be positive".into()));
    }
    let d = dataset.pixels();
    let mut enc_dims = vec![d];
    enc_dims.extend(&hp.hidden);
    enc_dims.push(hp.latent_dim);
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let mut encoder = Mlp::init(MlpSpec::new(enc_dims, OutputActivation::None)?, seed::derive(hp.seed, seed::INIT, 0))?;
    let mut decoder = Mlp::init(MlpSpec::new(dec_dims, OutputActivation::Sigmoid)?, seed::derive(hp.seed, seed::INIT, 1))?;
    let mut opt_enc = Adam::new(AdamConfig::with_lr(hp.lr), &encoder.params());
    let mut opt_dec = Adam::new(AdamConfig::with_lr(hp.lr), &decoder.params());

    let valid_x = dataset.batch(&dataset.split.valid);
    let mut history = Vec::with_capacity(hp.epochs);
    let mut tape = Tape::new();
    for epoch in 0..hp.epochs {
        let order = shuffled(&dataset.split.train, hp.seed, seed::SHUFFLE, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for rows in order.chunks(hp.batch_size) {
            tape.clear();
            let x = tape.constant(dataset.batch(rows));
            let eb = encoder.bind(&mut tape, true);
            let db = decoder.bind(&mut tape, true);
            let step = (|| {
                let z = encoder.trace(&mut tape, &eb, x)?;
                let xr = decoder.trace(&mut tape, &db, z)?;
                let loss = tape.loss(LossKind::Mse, xr, x)?;
                tape.backward(loss)?;
                tape.value(loss).item()
            })()
            .map_err(divergence(epoch))?;
            loss_sum += step;
            batches += 1;
            opt_enc
                .step(&mut encoder.params_mut(), &batch_param_grads(&tape, &Mlp::bound_vars(&eb)))
                .map_err(divergence(epoch))?;
            opt_dec
                .step(&mut decoder.params_mut(), &batch_param_grads(&tape, &Mlp::bound_vars(&db)))
                .map_err(divergence(epoch))?;
        }
        let valid_loss = if valid_x.is_empty() {
            0.0
        } else {
            reconstruction_mse(&encoder, &decoder, &valid_x).map_err(divergence(epoch))?
        };
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_loss,
            valid_accuracy: None,
        };
        log::info!(
            "autoencoder epoch {epoch}: train mse {:.5}, valid mse {:.5}",
            log.train_loss,
            log.valid_loss
        );
        history.push(log);
    }
    let last = history.last().cloned().unwrap_or(EpochLog {
        epoch: 0,
        train_loss: 0.0,
        valid_loss: 0.0,
        valid_accuracy: None,
    });
    let meta = TrainingMeta {
        seed: hp.seed,
        epochs: hp.epochs,
        final_train_loss: last.train_loss,
        final_valid_loss: last.valid_loss,
        mode: "reconstruction".into(),
        ..Default::default()
    };
    Ok(TrainedAutoencoder {
        encoder: ModelCheckpoint {
            kind: CheckpointKind::Encoder,
            name: "encoder".into(),
            attribute: None,
            mlp: encoder,
            meta: meta.clone(),
        },
        decoder: ModelCheckpoint {
            kind: CheckpointKind::Decoder,
            name: "decoder".into(),
            attribute: None,
            mlp: decoder,
            meta,
        },
        history,
    })
}

/// Mean per-pixel squared reconstruction error.
pub fn reconstruction_mse(encoder: &Mlp, decoder: &Mlp, x: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    let rows = x.dims2().0;
    let all: Vec<usize> = (0..rows).collect();
    for chunk in all.chunks(256) {
        let xb = x.select_rows(chunk);
        let xr = decoder.forward(&encoder.forward(&xb)?)?;
        total += xr
            .data()
            .iter()
            .zip(xb.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / x.len() as f64)
}

/// Trains a single-attribute classifier on the train split.
///
/// In `worst_group` mode each batch first updates group weights
/// `q_g <- q_g * exp(eta * loss_g)` (normalized) from the batch's per-group
/// mean BCE, then minimizes `mean_i(G * q_{g(i)} * bce_i)` with `G = 4`.
/// With `eta = 0` every weight stays exactly 1, reproducing ERM bit for bit.
pub fn train_classifier(
    dataset: &Dataset,
    attribute: &str,
    hp: &ClassifierHyperparams,
) -> Result<TrainedClassifier> {
    let a = dataset.attribute_index(attribute)?;
    if dataset.split.train.is_empty() {
        return Err(Error::InsufficientSamples("train split is empty".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let groups: Option<Vec<u8>> = match hp.mode {
        TrainMode::Erm => None,
        TrainMode::WorstGroup => {
            let sensitive = hp.sensitive.as_deref().ok_or_else(|| {
                Error::Config("worst_group training needs a sensitive attribute".into())
            })?;
            let s = dataset.attribute_index(sensitive)?;
            if s == a {
                return Err(Error::Config("sensitive attribute must differ from the target".into()));
            }
            let g: Vec<u8> = dataset.factors.iter().map(|f| f.group(a, s)).collect();
            let mut counts = [0usize; 4];
            for &i in &dataset.split.train {
                counts[g[i] as usize] += 1;
            }
            if let Some(empty) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Config(format!(
                    "group {empty} ({attribute}={}, {sensitive}={}) has no training samples",
                    empty / 2,
                    empty % 2
                )));
            }
            Some(g)
        }
    };
    let labels = dataset.labels(a);
    let mut dims = vec![dataset.pixels()];
    dims.extend(&hp.hidden);
    dims.push(1);
    let mut mlp = Mlp::init(MlpSpec::new(dims, OutputActivation::Sigmoid)?, seed::derive(hp.seed, seed::INIT, 2))?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: hp.lr,
            weight_decay: hp.weight_decay,
            ..Default::default()
        },
        &mlp.params(),
    );
    let mut q = [0.25f64; 4];
    let mut history = Vec::with_capacity(hp.epochs);
    let mut tape = Tape::new();
    for epoch in 0..hp.epochs {
        let order = shuffled(&dataset.split.train, hp.seed, seed::SHUFFLE, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for rows in order.chunks(hp.batch_size) {
            tape.clear();
            let x = tape.constant(dataset.batch(rows));
            let y = tape.constant(Tensor::matrix(rows.len(), 1, rows.iter().map(|&i| labels[i]).collect())?);
            let bound = mlp.bind(&mut tape, true);
            let step = (|| {
                let p = mlp.trace(&mut tape, &bound, x)?;
                let per = tape.bce_elementwise(p, y)?;
                let weights: Vec<f64> = match &groups {
                    None => vec![1.0; rows.len()],
                    Some(g) => {
                        let losses = tape.value(per).data();
                        let mut sums = [0.0f64; 4];
                        let mut counts = [0usize; 4];
                        for (r, &i) in rows.iter().enumerate() {
                            sums[g[i] as usize] += losses[r];
                            counts[g[i] as usize] += 1;
                        }
                        for k in 0..4 {
                            if counts[k] > 0 {
                                q[k] *= (hp.eta * sums[k] / counts[k] as f64).exp();
                            }
                        }
                        let total: f64 = q.iter().sum();
                        q.iter_mut().for_each(|v| *v /= total);
                        rows.iter().map(|&i| 4.0 * q[g[i] as usize]).collect()
                    }
                };
                let w = tape.constant(Tensor::matrix(rows.len(), 1, weights)?);
                let weighted = tape.mul(per, w)?;
                let loss = tape.mean(weighted)?;
                tape.backward(loss)?;
                tape.value(loss).item()
            })()
            .map_err(divergence(epoch))?;
            loss_sum += step;
            batches += 1;
            opt.step(&mut mlp.params_mut(), &batch_param_grads(&tape, &Mlp::bound_vars(&bound)))
                .map_err(divergence(epoch))?;
        }
        let clf = Classifier::new(attribute, attribute, mlp.clone())?;
        let (valid_loss, valid_accuracy) = if dataset.split.valid.is_empty() {
            (0.0, None)
        } else {
            let (l, acc) = bce_and_accuracy(&clf, dataset, &dataset.split.valid, a)?;
            (l, Some(acc))
        };
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_loss,
            valid_accuracy,
        };
        log::info!(
            "classifier {attribute} ({}) epoch {epoch}: train {:.4}, valid {:.4}, acc {:?}",
            hp.mode.as_str(),
            log.train_loss,
            log.valid_loss,
            log.valid_accuracy
        );
        history.push(log);
    }
    let last = history.last().cloned();
    let meta = TrainingMeta {
        seed: hp.seed,
        epochs: hp.epochs,
        final_train_loss: last.as_ref().map(|l| l.train_loss).unwrap_or(0.0),
        final_valid_loss: last.as_ref().map(|l| l.valid_loss).unwrap_or(0.0),
        mode: hp.mode.as_str().into(),
        eta: (hp.mode == TrainMode::WorstGroup).then_some(hp.eta),
        sensitive: hp.sensitive.clone().filter(|_| hp.mode == TrainMode::WorstGroup),
        group_weights: if hp.mode == TrainMode::WorstGroup { q.to_vec() } else { Vec::new() },
    };
    Ok(TrainedClassifier {
        checkpoint: ModelCheckpoint {
            kind: CheckpointKind::Classifier,
            name: attribute.to_string(),
            attribute: Some(attribute.to_string()),
            mlp,
            meta,
        },
        history,
    })
}

fn bce_and_accuracy(clf: &Classifier, dataset: &Dataset, rows: &[usize], a: usize) -> Result<(f64, f64)> {
    let preds = predict_rows(clf, dataset, rows)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, &i) in preds.iter().zip(rows) {
        let t = f64::from(dataset.factors[i].binary_labels[a]);
        let pc = p.clamp(crate::autodiff::BCE_EPS, 1.0 - crate::autodiff::BCE_EPS);
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        if (*p > 0.5) == (t == 1.0) {
            correct += 1;
        }
    }
    Ok((loss / rows.len() as f64, correct as f64 / rows.len() as f64))
}

/// Predictions for dataset rows, computed in fixed-size chunks.
pub(crate) fn predict_rows(p: &dyn Predictor, dataset: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(256) {
        out.extend(p.predict_batch(&dataset.batch(chunk))?);
    }
    Ok(out)
}

/// Fraction of `rows` where `p > 0.5` agrees with the attribute label.
pub fn evaluate_accuracy(p: &dyn Predictor, dataset: &Dataset, attribute: &str, rows: &[usize]) -> Result<f64> {
    let a = dataset.attribute_index(attribute)?;
    if rows.is_empty() {
        return Err(Error::InsufficientSamples("no rows to evaluate".into()));
    }
    let preds = predict_rows(p, dataset, rows)?;
    let correct = preds
        .iter()
        .zip(rows)
        .filter(|(p, &i)| (**p > 0.5) == (dataset.factors[i].binary_labels[a] == 1))
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig, BRIGHTNESS, FRAME};

    fn small(n: usize) -> Dataset {
        let mut cfg = DatasetConfig::new(n, 4);
        cfg.image_side = 12;
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn autoencoder_training_is_deterministic_and_in_range() {
        let ds = small(80);
        let hp = AutoencoderHyperparams {
            latent_dim: 4,
            hidden: vec![16],
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let a = train_autoencoder(&ds, &hp).unwrap();
        let b = train_autoencoder(&ds, &hp).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.history.len(), 2);
        let x = ds.image(ds.split.train[0]);
        let xr = a.decoder.mlp.forward(&a.encoder.mlp.forward(&x).unwrap()).unwrap();
        assert!(xr.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn worst_group_with_zero_eta_matches_erm() {
        let ds = small(120);
        let erm = ClassifierHyperparams {
            hidden: vec![8],
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        let wg = ClassifierHyperparams {
            mode: TrainMode::WorstGroup,
            eta: 0.0,
            sensitive: Some(FRAME.into()),
            ..erm.clone()
        };
        let a = train_classifier(&ds, BRIGHTNESS, &erm).unwrap();
        let b = train_classifier(&ds, BRIGHTNESS, &wg).unwrap();
        assert_eq!(a.checkpoint.mlp, b.checkpoint.mlp);
        assert_eq!(a.history, b.history);
        assert_eq!(b.checkpoint.meta.group_weights, vec![0.25; 4]);
    }

    #[test]
    fn worst_group_requires_populated_groups() {
        let ds = small(40);
        let hp = ClassifierHyperparams {
            mode: TrainMode::WorstGroup,
            sensitive: Some(BRIGHTNESS.into()),
            epochs: 1,
            ..Default::default()
        };
        // target == sensitive is a configuration error
        assert!(matches!(train_classifier(&ds, BRIGHTNESS, &hp), Err(Error::Config(_))));
        let hp = ClassifierHyperparams {
            sensitive: None,
            ..hp
        };
        assert!(matches!(train_classifier(&ds, BRIGHTNESS, &hp), Err(Error::Config(_))));
    }

    #[test]
    fn worst_group_shifts_weight() {
        let ds = small(200);
        let hp = ClassifierHyperparams {
            hidden: vec![8],
            epochs: 2,
            batch_size: 32,
            mode: TrainMode::WorstGroup,
            eta: 0.5,
            sensitive: Some(FRAME.into()),
            ..Default::default()
        };
        let t = train_classifier(&ds, BRIGHTNESS, &hp).unwrap();
        let q = &t.checkpoint.meta.group_weights;
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.iter().any(|v| (v - 0.25).abs() > 1e-6));
    }
}
