//! Parameter-merged versus output-averaged ensembles of same-task models.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::merge::{merge, MergeInput, MergeMode, MergeSpec};
use crate::model::{argmax, Classifier, ModelSpec, PredictiveDistribution};
use crate::tensor::{ParameterSet, Role};

fn check_members(models: &[Classifier]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::invalid("ensemble needs at least one model"))?;
    for m in &models[1..] {
        if m.spec().num_classes != first.spec().num_classes {
            return Err(Error::incompatible(format!(
                "class-count mismatch: {} vs {}",
                m.spec().num_classes,
                first.spec().num_classes
            )));
        }
        if m.spec().input_dim != first.spec().input_dim {
            return Err(Error::incompatible("input-dim mismatch between ensemble members"));
        }
    }
    Ok(())
}

/// Arithmetic mean of the members' class probabilities, returned as logs.
pub fn predict_output_ensemble(models: &[Classifier], x: &[f64]) -> Result<PredictiveDistribution> {
    check_members(models)?;
    let c = models[0].spec().num_classes;
    let mut mean = vec![0.0; c];
    for m in models {
        for (acc, p) in mean.iter_mut().zip(m.forward(x)?.probs()) {
            *acc += p;
        }
    }
    let n = models.len() as f64;
    Ok(PredictiveDistribution { log_probs: mean.into_iter().map(|p| (p / n).ln()).collect() })
}

pub fn output_ensemble_accuracy(models: &[Classifier], data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let correct = (0..data.len())
        .map(|i| predict_output_ensemble(models, data.row(i)).map(|d| argmax(&d.log_probs) == data.label(i)))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&ok| ok)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub fisher_merged: f64,
    pub isotropic_merged: f64,
    pub output_ensemble: f64,
    pub individual: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Forward passes per prediction, output ensemble versus a merged model.
    pub inference_cost_ratio: [usize; 2],
}

impl EnsembleReport {
    /// `method,accuracy` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,accuracy\n");
        s += &format!("fisher_merged,{:?}\n", self.fisher_merged);
        s += &format!("isotropic_merged,{:?}\n", self.isotropic_merged);
        s += &format!("output_ensemble,{:?}\n", self.output_ensemble);
        for (i, a) in self.individual.iter().enumerate() {
            s += &format!("model_{i},{a:?}\n");
        }
        s
    }
}

/// Heads count as body for same-task ensembles.
fn with_shared_head(p: &ParameterSet) -> Result<ParameterSet> {
    let mut p = p.clone();
    let heads: Vec<String> = p.iter().filter(|(_, _, r)| *r == Role::Head).map(|(n, _, _)| n.to_string()).collect();
    for name in heads {
        p.set_role(&name, Role::Body)?;
    }
    Ok(p)
}

/// Evaluates equal-weight Fisher merging, isotropic merging and output
/// ensembling of `checkpoints` on `test`.
pub fn ensemble_compare(
    spec: &ModelSpec,
    checkpoints: &[ParameterSet],
    fishers: &[FisherDiagonal],
    test: &LabeledDataset,
) -> Result<EnsembleReport> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints to ensemble"));
    }
    if fishers.len() != checkpoints.len() {
        return Err(Error::invalid(format!(
            "{} checkpoints but {} Fisher diagonals",
            checkpoints.len(),
            fishers.len()
        )));
    }
    let m = checkpoints.len();
    let lambda = 1.0 / m as f64;
    let shared: Vec<ParameterSet> = checkpoints.iter().map(with_shared_head).collect::<Result<_>>()?;
    let models: Vec<Classifier> = shared.iter().map(|p| Classifier::new(spec, p)).collect::<Result<_>>()?;
    let individual = models.iter().map(|c| c.evaluate(test, None)).collect::<Result<Vec<_>>>()?;

    let merged_acc = |mode: MergeMode| -> Result<f64> {
        let inputs = shared.iter().zip(fishers).map(|(p, f)| MergeInput::new(p, Some(f), lambda)).collect();
        let report = merge(&MergeSpec::new(inputs, 0, mode)?)?;
        Classifier::new(spec, &report.merged)?.evaluate(test, None)
    };

    Ok(EnsembleReport {
        fisher_merged: merged_acc(MergeMode::Fisher)?,
        isotropic_merged: merged_acc(MergeMode::Isotropic)?,
        output_ensemble: output_ensemble_accuracy(&models, test)?,
        individual,
        lambdas: vec![lambda; m],
        inference_cost_ratio: [m, 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::tensor::Tensor;

    fn fixed_linear(bias: [f64; 2]) -> Classifier {
        let spec = ModelSpec::new(1, &[], 2);
        let mut p = ParameterSet::new("l");
        p.insert("head.weight", Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap(), Role::Head).unwrap();
        p.insert("head.bias", Tensor::from_vec(bias.to_vec()).unwrap(), Role::Head).unwrap();
        Classifier::new(&spec, &p).unwrap()
    }

    #[test]
    fn opposite_certain_models_average_to_half() {
        let a = fixed_linear([800.0, 0.0]);
        let b = fixed_linear([0.0, 800.0]);
        let d = predict_output_ensemble(&[a, b], &[1.0]).unwrap();
        let p = d.probs();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_members_match_single_model() {
        let a = fixed_linear([0.3, -0.2]);
        let single = a.forward(&[2.0]).unwrap();
        let d = predict_output_ensemble(&[a.clone(), a.clone(), a], &[2.0]).unwrap();
        for (x, y) in d.log_probs.iter().zip(&single.log_probs) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn class_mismatch_errors() {
        let a = fixed_linear([0.0, 0.0]);
        let spec3 = ModelSpec::new(1, &[(2, Activation::Tanh)], 3);
        let b = Classifier::new(&spec3, &crate::model::init_params(&spec3, 0).unwrap()).unwrap();
        assert!(predict_output_ensemble(&[a, b], &[0.0]).is_err());
        assert!(predict_output_ensemble(&[], &[0.0]).is_err());
    }
}
