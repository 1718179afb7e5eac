//! Latent-shift counterfactuals.
//!
//! An image is encoded to `z0`, shifted to `z_lambda = z0 - lambda * g` with
//! `g = d f_b(D(z)) / dz` taken once at `z0`, and decoded again. The search walks
//! a geometric lambda schedule until the base prediction has dropped far enough
//! or starts to rise.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::format::{csv_line, g9};
use crate::models::{Autoencoder, Predictor};
use crate::nn::Mlp;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub lambda0: f64,
    pub multiplier: f64,
    pub max_steps: usize,
    /// Prediction drop that counts as crossing the decision boundary.
    pub target_drop: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda0: 1.0,
            multiplier: 1.5,
            max_steps: 40,
            target_drop: 0.6,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if !(self.multiplier > 1.0 && self.multiplier.is_finite()) {
            return Err(Error::Config(format!("multiplier must exceed 1, got {}", self.multiplier)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.target_drop.is_nan() || self.target_drop <= 0.0 {
            return Err(Error::Config(format!("target_drop must be positive, got {}", self.target_drop)));
        }
        Ok(())
    }

    /// The `k`-th lambda of the schedule, `k` starting at 0.
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambda0 * self.multiplier.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    Crossed,
    TurningPoint,
    Exhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub lambda: f64,
    pub base_prediction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CFResult {
    pub z0: Tensor,
    pub z_star: Tensor,
    /// Latent gradient at `z0`, shared by every point of the trace.
    pub gradient: Tensor,
    pub lambda_star: f64,
    pub trace: Vec<TracePoint>,
    /// Position of `lambda_star` in `trace`.
    pub star_index: usize,
    pub x0_recon: Tensor,
    pub x_cf: Tensor,
    pub base_pred_0: f64,
    pub base_pred_star: f64,
    pub status: SearchStatus,
}

impl CFResult {
    pub fn base_drop(&self) -> f64 {
        self.base_pred_0 - self.base_pred_star
    }
}

/// Encodes one image, any shape with `image_dim` values, to `[1 x latent_dim]`.
pub fn encode(encoder: &Mlp, image: &Tensor) -> Result<Tensor> {
    if image.len() != encoder.input_dim() {
        return Err(Error::dim(
            "encode",
            format!("image has {} values, encoder expects {}", image.len(), encoder.input_dim()),
        ));
    }
    encoder.forward(&image.clone().reshape(vec![1, encoder.input_dim()])?)
}

/// Decodes `[n x latent_dim]` latents to `[n x image_dim]` images.
pub fn decode(decoder: &Mlp, z: &Tensor) -> Result<Tensor> {
    let z = if z.shape().len() == 1 {
        z.clone().reshape(vec![1, z.len()])?
    } else {
        z.clone()
    };
    decoder.forward(&z)
}

/// `d f(D(z)) / dz` for a single latent, returned with the shape of `z`.
pub fn latent_gradient(f: &dyn Predictor, decoder: &Mlp, z: &Tensor) -> Result<Tensor> {
    if z.len() != decoder.input_dim() {
        return Err(Error::dim(
            "latent_gradient",
            format!("latent has {} values, decoder expects {}", z.len(), decoder.input_dim()),
        ));
    }
    let mut tape = Tape::new();
    let zv = tape.param(z.clone().reshape(vec![1, z.len()])?);
    let bound = decoder.bind(&mut tape, false);
    let x = decoder.trace(&mut tape, &bound, zv)?;
    let y = f.trace(&mut tape, x)?;
    let s = tape.sum(y)?;
    tape.backward(s)?;
    let g = tape.grad(zv).expect("latent requires grad").to_vec();
    Tensor::new(z.shape().to_vec(), g)
}

/// `z0 - lambda * g`.
pub fn shift(z0: &Tensor, g: &Tensor, lambda: f64) -> Result<Tensor> {
    let data = z0.data().iter().zip(g.data()).map(|(z, g)| z - lambda * g).collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// Runs the lambda search for one image.
pub fn lambda_search(
    f_b: &dyn Predictor,
    ae: &Autoencoder,
    image: &Tensor,
    cfg: &SearchConfig,
) -> Result<CFResult> {
    let z0 = encode(&ae.encoder, image)?;
    search_from_latent(f_b, &ae.decoder, z0, cfg)
}

/// Lambda search starting from an already encoded latent `[1 x latent_dim]`.
pub fn search_from_latent(
    f_b: &dyn Predictor,
    decoder: &Mlp,
    z0: Tensor,
    cfg: &SearchConfig,
) -> Result<CFResult> {
    cfg.validate()?;
    let x0_recon = decode(decoder, &z0)?;
    let base_pred_0 = f_b.predict_batch(&x0_recon)?[0];
    let gradient = latent_gradient(f_b, decoder, &z0)?;
    if gradient.data().iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate(format!(
            "{} has zero latent gradient, no direction to move",
            f_b.name()
        )));
    }
    let mut trace = vec![TracePoint {
        lambda: 0.0,
        base_prediction: base_pred_0,
    }];
    let mut images = vec![x0_recon.clone()];
    let mut outcome = None;
    for k in 0..cfg.max_steps {
        let lambda = cfg.lambda(k);
        let x = decode(decoder, &shift(&z0, &gradient, lambda)?)?;
        let p = f_b.predict_batch(&x)?[0];
        let prev = trace.last().expect("trace starts non-empty").base_prediction;
        trace.push(TracePoint {
            lambda,
            base_prediction: p,
        });
        images.push(x);
        if base_pred_0 - p >= cfg.target_drop {
            outcome = Some((SearchStatus::Crossed, trace.len() - 1));
            break;
        }
        if p > prev {
            outcome = Some((SearchStatus::TurningPoint, trace.len() - 2));
            break;
        }
    }
    let (status, star_index) = outcome.unwrap_or_else(|| {
        // latest lambda among the minima
        let best = trace
            .iter()
            .enumerate()
            .fold(0, |best, (i, t)| {
                if t.base_prediction <= trace[best].base_prediction {
                    i
                } else {
                    best
                }
            });
        (SearchStatus::Exhausted, best)
    });
    let lambda_star = trace[star_index].lambda;
    let z_star = if star_index == 0 {
        z0.clone()
    } else {
        shift(&z0, &gradient, lambda_star)?
    };
    Ok(CFResult {
        z0,
        z_star,
        gradient,
        lambda_star,
        base_pred_star: trace[star_index].base_prediction,
        trace,
        star_index,
        x0_recon,
        x_cf: images.swap_remove(star_index),
        base_pred_0,
        status,
    })
}

/// Predictions of every classifier along `[0, lambda_star]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTrace {
    pub base_name: String,
    pub downstream_names: Vec<String>,
    pub lambdas: Vec<f64>,
    pub base: Vec<f64>,
    /// One column per downstream classifier.
    pub downstream: Vec<Vec<f64>>,
}

impl SweepTrace {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["lambda".to_string(), format!("base:{}", self.base_name)];
        h.extend(self.downstream_names.iter().map(|n| format!("ds:{n}")));
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = csv_line(self.header());
        for (i, lambda) in self.lambdas.iter().enumerate() {
            let mut row = vec![g9(*lambda), g9(self.base[i])];
            row.extend(self.downstream.iter().map(|c| g9(c[i])));
            out.push_str(&csv_line(row));
        }
        out
    }
}

/// Decodes `n_points` evenly spaced lambdas in `[0, lambda_star]` and records
/// every classifier's prediction.
pub fn sweep(
    f_b: &dyn Predictor,
    downstream: &[&dyn Predictor],
    decoder: &Mlp,
    cf: &CFResult,
    n_points: usize,
) -> Result<SweepTrace> {
    if n_points < 2 {
        return Err(Error::Config(format!("sweep needs at least 2 points, got {n_points}")));
    }
    let lambdas: Vec<f64> = (0..n_points)
        .map(|i| {
            if i == n_points - 1 {
                cf.lambda_star
            } else {
                cf.lambda_star * i as f64 / (n_points - 1) as f64
            }
        })
        .collect();
    sweep_at(f_b, downstream, decoder, cf, lambdas)
}

/// Lambdas the search itself visited, from 0 up to and including `lambda_star`.
pub fn search_lambdas(cf: &CFResult) -> Vec<f64> {
    cf.trace[..=cf.star_index].iter().map(|t| t.lambda).collect()
}

/// Every classifier's prediction at the given lambdas along the search direction.
pub fn sweep_at(
    f_b: &dyn Predictor,
    downstream: &[&dyn Predictor],
    decoder: &Mlp,
    cf: &CFResult,
    lambdas: Vec<f64>,
) -> Result<SweepTrace> {
    let n_points = lambdas.len();
    if n_points == 0 {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    let mut z = Vec::with_capacity(n_points * cf.z0.len());
    for &lambda in &lambdas {
        if lambda == 0.0 {
            z.extend_from_slice(cf.z0.data());
        } else {
            z.extend_from_slice(shift(&cf.z0, &cf.gradient, lambda)?.data());
        }
    }
    let images = decoder.forward(&Tensor::matrix(n_points, cf.z0.len(), z)?)?;
    let base = f_b.predict_batch(&images)?;
    let downstream_cols = downstream
        .iter()
        .map(|d| d.predict_batch(&images))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTrace {
        base_name: f_b.name().to_string(),
        downstream_names: downstream.iter().map(|d| d.name().to_string()).collect(),
        lambdas,
        base,
        downstream: downstream_cols,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::kernels::sigmoid;
    use crate::models::Classifier;
    use crate::nn::{MlpSpec, OutputActivation};

    /// `[d -> d]` linear layer with identity weights and no activation.
    pub(crate) fn identity_decoder(d: usize) -> Mlp {
        let spec = MlpSpec::new(vec![d, d], OutputActivation::None).unwrap();
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Mlp::from_parts(spec, vec![Tensor::matrix(d, d, w).unwrap()], vec![Tensor::zeros(vec![d])])
            .unwrap()
    }

    /// `sigmoid(w . x + b)`.
    pub(crate) fn linear_classifier(name: &str, w: &[f64], b: f64) -> Classifier {
        let d = w.len();
        let spec = MlpSpec::new(vec![d, 1], OutputActivation::Sigmoid).unwrap();
        let mlp = Mlp::from_parts(
            spec,
            vec![Tensor::matrix(d, 1, w.to_vec()).unwrap()],
            vec![Tensor::vector(vec![b]).unwrap()],
        )
        .unwrap();
        Classifier::new(name, name, mlp).unwrap()
    }

    #[test]
    fn gradient_matches_closed_form() {
        let w = [0.7, -1.2, 0.4];
        let f = linear_classifier("f", &w, 0.0);
        let dec = identity_decoder(3);
        let z = Tensor::matrix(1, 3, vec![0.3, -0.5, 1.1]).unwrap();
        let g = latent_gradient(&f, &dec, &z).unwrap();
        let s: f64 = w.iter().zip(z.data()).map(|(a, b)| a * b).sum();
        let p = 1.0 / (1.0 + (-s).exp());
        for (gi, wi) in g.data().iter().zip(&w) {
            assert!((gi - p * (1.0 - p) * wi).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_classifier_is_degenerate() {
        let f = linear_classifier("const", &[0.0, 0.0], 2.0);
        let dec = identity_decoder(2);
        let z = Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap();
        let err = search_from_latent(&f, &dec, z, &SearchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn lambda_is_bracketed_by_the_analytic_root() {
        let w = [1.5, -0.5, 0.8];
        let f = linear_classifier("f", &w, 0.0);
        let dec = identity_decoder(3);
        let z0 = Tensor::matrix(1, 3, vec![1.0, -0.6, 0.9]).unwrap();
        let cfg = SearchConfig::default();
        let res = search_from_latent(&f, &dec, z0.clone(), &cfg).unwrap();
        assert_eq!(res.status, SearchStatus::Crossed);

        // p(lambda) = sigmoid(s0 - lambda * |w|^2 * p0 (1 - p0)); bisect p0 - p = 0.6
        let s0: f64 = w.iter().zip(z0.data()).map(|(a, b)| a * b).sum();
        let p0 = sigmoid(s0);
        let w2: f64 = w.iter().map(|v| v * v).sum();
        let drop = |l: f64| p0 - sigmoid(s0 - l * w2 * p0 * (1.0 - p0));
        let (mut lo, mut hi) = (0.0, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if drop(mid) >= 0.6 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!(res.lambda_star >= hi - 1e-9, "{} < {hi}", res.lambda_star);
        assert!(res.lambda_star / cfg.multiplier < hi, "{} overshoots {hi}", res.lambda_star);
        assert!(res.base_drop() >= 0.6);
    }

    #[test]
    fn trace_invariants_and_zero_lambda_reconstruction() {
        let f = linear_classifier("f", &[0.2, 0.1], 0.5);
        let dec = identity_decoder(2);
        let z0 = Tensor::matrix(1, 2, vec![0.4, 0.3]).unwrap();
        let res = search_from_latent(&f, &dec, z0.clone(), &SearchConfig::default()).unwrap();
        assert_eq!(res.trace[0].lambda, 0.0);
        assert_eq!(res.trace[0].base_prediction, res.base_pred_0);
        assert!(res.trace.windows(2).all(|p| p[0].lambda < p[1].lambda));
        assert_eq!(res.base_pred_star, res.trace[res.star_index].base_prediction);
        assert_eq!(decode(&dec, &shift(&z0, &res.gradient, 0.0).unwrap()).unwrap(), res.x0_recon);
    }

    #[test]
    fn exhausted_returns_the_minimum() {
        // a weak classifier cannot drop by 0.6 within three steps
        let f = linear_classifier("f", &[0.05], 0.0);
        let dec = identity_decoder(1);
        let cfg = SearchConfig {
            max_steps: 3,
            ..Default::default()
        };
        let res = search_from_latent(&f, &dec, Tensor::matrix(1, 1, vec![1.0]).unwrap(), &cfg).unwrap();
        assert_eq!(res.status, SearchStatus::Exhausted);
        assert_eq!(res.trace.len(), 4);
        assert_eq!(res.star_index, 3);
        assert_eq!(res.lambda_star, cfg.lambda(2));
    }

    #[test]
    fn turning_point_keeps_previous_lambda() {
        // sigmoid(4 (x - 0.5)^2) has its valley at x = 0.5; starting from x = 0
        // the second schedule step overshoots it and the prediction rises
        struct Valley;
        impl Predictor for Valley {
            fn name(&self) -> &str {
                "valley"
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
                Ok(x.data().iter().map(|v| sigmoid(4.0 * (v - 0.5) * (v - 0.5))).collect())
            }
            fn trace(&self, tape: &mut Tape, x: Var) -> Result<Var> {
                let c = tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
                let d = tape.sub(x, c)?;
                let sq = tape.mul(d, d)?;
                let s = tape.scale(sq, 4.0)?;
                tape.sigmoid(s)
            }
        }
        use crate::autodiff::Var;
        let dec = identity_decoder(1);
        let res = search_from_latent(&Valley, &dec, Tensor::matrix(1, 1, vec![0.0]).unwrap(), &SearchConfig::default())
            .unwrap();
        assert_eq!(res.status, SearchStatus::TurningPoint);
        let after = res.trace[res.star_index + 1].base_prediction;
        assert!(after > res.base_pred_star);
        assert_eq!(res.star_index, 1);
        assert_eq!(res.lambda_star, res.trace[res.star_index].lambda);
    }

    #[test]
    fn sweep_endpoints_and_self_column() {
        let f = linear_classifier("f", &[1.5, -0.5], 0.3);
        let g = linear_classifier("g", &[0.0, 0.0], 0.1);
        let dec = identity_decoder(2);
        let res = search_from_latent(&f, &dec, Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), &SearchConfig::default())
            .unwrap();
        let s = sweep(&f, &[&f, &g], &dec, &res, 2).unwrap();
        assert_eq!(s.base[0], res.base_pred_0);
        assert_eq!(s.base[1], res.base_pred_star);
        let s = sweep(&f, &[&f, &g], &dec, &res, 7).unwrap();
        assert_eq!(s.downstream[0], s.base);
        assert!(s.downstream[1].iter().all(|v| *v == s.downstream[1][0]));
        let csv = s.to_csv();
        assert!(csv.starts_with("lambda,base:f,ds:f,ds:g\n"));
        assert_eq!(csv.lines().count(), 8);
        assert!(sweep(&f, &[], &dec, &res, 1).is_err());
    }

    #[test]
    fn sweep_over_search_lambdas_replays_the_trace() {
        let f = linear_classifier("f", &[1.5, -0.5], 0.3);
        let dec = identity_decoder(2);
        let res = search_from_latent(&f, &dec, Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), &SearchConfig::default())
            .unwrap();
        let lambdas = search_lambdas(&res);
        assert_eq!(lambdas.len(), res.star_index + 1);
        let s = sweep_at(&f, &[], &dec, &res, lambdas).unwrap();
        let expected: Vec<f64> = res.trace[..=res.star_index].iter().map(|t| t.base_prediction).collect();
        assert_eq!(s.base, expected);
        assert!(s.base.windows(2).all(|w| w[1] <= w[0]));
    }

    proptest::proptest! {
        #[test]
        fn search_invariants_hold_for_any_schedule(
            w in proptest::collection::vec(-3.0f64..3.0, 2),
            b in -2.0f64..2.0,
            z in proptest::collection::vec(-2.0f64..2.0, 2),
            lambda0 in 0.05f64..3.0,
            multiplier in 1.05f64..3.0,
            max_steps in 1usize..25,
        ) {
            let f = linear_classifier("f", &w, b);
            let dec = identity_decoder(2);
            let z0 = Tensor::matrix(1, 2, z).unwrap();
            let cfg = SearchConfig { lambda0, multiplier, max_steps, ..Default::default() };
            let res = match search_from_latent(&f, &dec, z0.clone(), &cfg) {
                Ok(r) => r,
                Err(Error::Degenerate(_)) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            proptest::prop_assert_eq!(res.trace[0].lambda, 0.0);
            proptest::prop_assert_eq!(res.trace[0].base_prediction, res.base_pred_0);
            proptest::prop_assert!(res.trace.windows(2).all(|p| p[0].lambda < p[1].lambda));
            proptest::prop_assert_eq!(res.base_pred_star, res.trace[res.star_index].base_prediction);
            proptest::prop_assert_eq!(decode(&dec, &shift(&z0, &res.gradient, 0.0).unwrap()).unwrap(), res.x0_recon.clone());
            match res.status {
                SearchStatus::Crossed => proptest::prop_assert!(res.base_drop() >= cfg.target_drop),
                SearchStatus::TurningPoint => {
                    let next = &res.trace[res.star_index + 1];
                    proptest::prop_assert!(next.base_prediction > res.base_pred_star);
                }
                SearchStatus::Exhausted => proptest::prop_assert_eq!(res.trace.len(), max_steps + 1),
            }
        }
    }
}
