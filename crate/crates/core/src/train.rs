//! Deterministic minibatch training of model-zoo classifiers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelSpec};
use crate::tensor::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-2,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Trained parameters and the mean minibatch loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub epoch_losses: Vec<f64>,
}

pub fn train(
    spec: &ModelSpec,
    init: &ParameterSet,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<ParameterSet> {
    Ok(train_with_history(spec, init, data, config)?.params)
}

/// Minimizes mean negative log-likelihood. Lineage and roles carry over
/// from `init`.
pub fn train_with_history(
    spec: &ModelSpec,
    init: &ParameterSet,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Classifier::new(spec, init)?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    data.check_compatible(spec.input_dim, spec.num_classes)?;
    if config.epochs == 0 {
        return Ok(TrainOutcome { params: init.clone(), epoch_losses: Vec::new() });
    }

    let layout = &model.layout;
    let mut theta = model.theta.clone();
    let mut grad = vec![0.0; layout.total];
    let mut m = vec![0.0; layout.total];
    let mut v = vec![0.0; layout.total];
    let mut scratch = layout.scratch();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = -1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                let (x, y) = (data.row(i), data.label(i));
                layout.forward(&theta, x, &mut scratch);
                loss -= scratch.log_probs[y];
                layout.backward_label(&theta, x, y, &mut scratch, &mut grad, scale);
            }
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("training diverged in epoch {epoch}: loss is {loss}")));
            }
            epoch_loss += loss;
            step += 1;
            match config.optimizer {
                Optimizer::Sgd => {
                    for (t, g) in theta.iter_mut().zip(&grad) {
                        *t -= config.learning_rate * g;
                    }
                }
                Optimizer::Adam => {
                    let bc1 = 1.0 - config.beta1.powi(step);
                    let bc2 = 1.0 - config.beta2.powi(step);
                    for k in 0..theta.len() {
                        let g = grad[k];
                        m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
                        v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        theta[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
                    }
                }
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!("training diverged in epoch {epoch}: non-finite parameter")));
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }

    let params = init.with_tensors(layout.unflatten(&theta))?;
    Ok(TrainOutcome { params, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation};
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let cx = if y == 0 { -2.0 } else { 2.0 };
            f.push(cx + rng.gen_range(-1.0..1.0));
            f.push(rng.gen_range(-1.0..1.0));
            l.push(y);
        }
        LabeledDataset::new(f, 2, l, "sep").unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let spec = ModelSpec::new(2, &[(4, Activation::Tanh)], 2);
        let p = init_params(&spec, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(train(&spec, &p, &separable(20, 0), &cfg).unwrap().bit_eq(&p));
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let spec = ModelSpec::new(2, &[(8, Activation::Tanh)], 2);
        let p = init_params(&spec, 1).unwrap();
        let data = separable(200, 3);
        let out = train_with_history(&spec, &p, &data, &TrainConfig::default()).unwrap();
        let acc = crate::model::evaluate(&spec, &out.params, &data, None).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
        assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
        assert_eq!(out.params.lineage_id(), p.lineage_id());
    }

    #[test]
    fn sgd_also_reduces_loss() {
        let spec = ModelSpec::new(2, &[(8, Activation::Relu)], 2);
        let p = init_params(&spec, 5).unwrap();
        let cfg = TrainConfig { optimizer: Optimizer::Sgd, learning_rate: 0.1, epochs: 20, ..Default::default() };
        let out = train_with_history(&spec, &p, &separable(100, 4), &cfg).unwrap();
        assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let spec = ModelSpec::new(2, &[(4, Activation::Tanh)], 2);
        let p = init_params(&spec, 1).unwrap();
        let data = separable(64, 9);
        let cfg = TrainConfig { epochs: 5, seed: 42, ..Default::default() };
        let a = train(&spec, &p, &data, &cfg).unwrap();
        let b = train(&spec, &p, &data, &cfg).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(crate::checkpoint::to_bytes(&a).unwrap(), crate::checkpoint::to_bytes(&b).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let spec = ModelSpec::new(2, &[(4, Activation::Identity)], 2);
        let p = init_params(&spec, 1).unwrap();
        let cfg = TrainConfig { optimizer: Optimizer::Sgd, learning_rate: 1e200, epochs: 3, ..Default::default() };
        let err = train(&spec, &p, &separable(32, 1), &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
