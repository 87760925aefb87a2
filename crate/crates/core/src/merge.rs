//! Isotropic and Fisher-weighted parameter merging.
//!
//! Fisher merging maximizes `sum_i lambda_i log N(theta; theta_i, diag(F_i)^-1)`
//! whose per-coordinate maximizer is
//! `theta*[j] = sum_i lambda_i F_i[j] theta_i[j] / sum_i lambda_i F_i[j]`.
//! Isotropic merging is the same with every `F_i = 1`.
//!
//! Sums over models are taken in sorted-term order so the result does not
//! depend on the order the inputs were listed in.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_merge_compatibility, Partition};
use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::tensor::{ParameterSet, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Isotropic,
    Fisher,
}

/// What a coordinate gets when the weighted Fisher sum is below epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Copy the target model's value.
    #[default]
    Target,
    /// Use the lambda-weighted plain average.
    LambdaAverage,
}

#[derive(Debug, Clone, Copy)]
pub struct MergeInput<'a> {
    pub params: &'a ParameterSet,
    pub fisher: Option<&'a FisherDiagonal>,
    pub lambda: f64,
}

impl<'a> MergeInput<'a> {
    pub fn new(params: &'a ParameterSet, fisher: Option<&'a FisherDiagonal>, lambda: f64) -> Self {
        MergeInput { params, fisher, lambda }
    }
}

/// A validated merge request. Lambdas are normalized to sum to one.
#[derive(Debug, Clone)]
pub struct MergeSpec<'a> {
    inputs: Vec<MergeInput<'a>>,
    target_index: usize,
    epsilon: f64,
    mode: MergeMode,
    fallback: Fallback,
    partition: Partition,
}

/// Sum that does not depend on the order of `terms`.
fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

impl<'a> MergeSpec<'a> {
    pub fn new(inputs: Vec<MergeInput<'a>>, target_index: usize, mode: MergeMode) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("merge needs at least one input"));
        }
        if target_index >= inputs.len() {
            return Err(Error::invalid(format!(
                "target index {target_index} out of range for {} inputs",
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|i| !(i.lambda >= 0.0) || !i.lambda.is_finite()) {
            return Err(Error::invalid(format!("merging coefficients must be finite and >= 0, got {}", bad.lambda)));
        }
        let mut lambdas: Vec<f64> = inputs.iter().map(|i| i.lambda).collect();
        let total = sorted_sum(&mut lambdas);
        if total <= 0.0 {
            return Err(Error::invalid("merging coefficients are all zero"));
        }
        let inputs: Vec<MergeInput<'a>> =
            inputs.into_iter().map(|i| MergeInput { lambda: i.lambda / total, ..i }).collect();

        let sets: Vec<&ParameterSet> = inputs.iter().map(|i| i.params).collect();
        let partition = check_merge_compatibility(&sets)?;

        if mode == MergeMode::Fisher {
            for (k, input) in inputs.iter().enumerate() {
                let f = input.fisher.ok_or_else(|| Error::invalid(format!("input {k} has no Fisher diagonal")))?;
                for name in &partition.mergeable {
                    let t = input.params.get(name).expect("mergeable name present");
                    match f.get(name) {
                        Some(ft) if ft.shape() == t.shape() => {
                            if ft.data().iter().any(|v| !(*v >= 0.0)) {
                                return Err(Error::invalid(format!("negative Fisher entry in input {k} '{name}'")));
                            }
                        }
                        _ => return Err(Error::shape(format!("input {k} Fisher is not congruent at '{name}'"))),
                    }
                }
            }
        }
        Ok(MergeSpec { inputs, target_index, epsilon: DEFAULT_EPSILON, mode, fallback: Fallback::Target, partition })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be a positive real, got {epsilon}")));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn with_fallback(mut self, fallback: Fallback) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn inputs(&self) -> &[MergeInput<'a>] {
        &self.inputs
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.inputs.iter().map(|i| i.lambda).collect()
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mode(&self) -> MergeMode {
        self.mode
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    fn target(&self) -> &ParameterSet {
        self.inputs[self.target_index].params
    }

    /// Precision of input `i` at coordinate `j` of tensor `name`.
    fn precision(&self, i: usize, name: &str, j: usize) -> f64 {
        match self.mode {
            MergeMode::Isotropic => 1.0,
            MergeMode::Fisher => {
                self.inputs[i].fisher.and_then(|f| f.get(name)).expect("checked at construction").data()[j]
            }
        }
    }
}

/// Merged parameters plus bookkeeping.
#[derive(Debug, Clone)]
pub struct MergeReport {
    pub merged: ParameterSet,
    pub n_fallback_entries: usize,
    pub objective_value: f64,
    pub per_tensor_fallbacks: BTreeMap<String, usize>,
    pub mode: MergeMode,
    pub lambdas: Vec<f64>,
    pub target_index: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub mode: MergeMode,
    pub lambdas: Vec<f64>,
    pub target_index: usize,
    pub epsilon: f64,
    pub n_fallback_entries: usize,
    pub per_tensor_fallbacks: BTreeMap<String, usize>,
    pub objective_value: f64,
    pub mergeable: Vec<String>,
    pub num_params: usize,
}

impl MergeReport {
    pub fn summary(&self, spec: &MergeSpec) -> MergeSummary {
        MergeSummary {
            mode: self.mode,
            lambdas: self.lambdas.clone(),
            target_index: self.target_index,
            epsilon: self.epsilon,
            n_fallback_entries: self.n_fallback_entries,
            per_tensor_fallbacks: self.per_tensor_fallbacks.clone(),
            objective_value: self.objective_value,
            mergeable: spec.partition.mergeable.clone(),
            num_params: self.merged.num_params(),
        }
    }
}

/// Per-coordinate workspace.
struct Terms {
    active: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn lambda_average(spec: &MergeSpec, tensors: &[&Tensor], j: usize, terms: &mut Terms) -> f64 {
    if let [k] = terms.active[..] {
        return tensors[k].data()[j];
    }
    terms.a.clear();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &i in &terms.active {
        let v = tensors[i].data()[j];
        lo = lo.min(v);
        hi = hi.max(v);
        terms.a.push(spec.inputs[i].lambda * v);
    }
    sorted_sum(&mut terms.a).clamp(lo, hi)
}

fn run_merge(spec: &MergeSpec) -> Result<MergeReport> {
    let target = spec.target();
    let mut merged = target.clone();
    let mut per_tensor = BTreeMap::new();
    let mut total_fallbacks = 0;
    let mut terms = Terms {
        active: (0..spec.inputs.len()).filter(|&i| spec.inputs[i].lambda > 0.0).collect(),
        a: Vec::new(),
        b: Vec::new(),
    };

    for name in &spec.partition.mergeable {
        let tensors: Vec<&Tensor> = spec.inputs.iter().map(|i| i.params.get(name).expect("mergeable")).collect();
        let target_t = target.get(name).expect("mergeable");
        let mut out = Vec::with_capacity(target_t.len());
        let mut fallbacks = 0;
        for j in 0..target_t.len() {
            let value = match spec.mode {
                MergeMode::Isotropic => lambda_average(spec, &tensors, j, &mut terms),
                MergeMode::Fisher => {
                    terms.b.clear();
                    let mut equal = true;
                    let first = spec.precision(terms.active[0], name, j);
                    for &i in &terms.active {
                        let f = spec.precision(i, name, j);
                        equal &= f == first;
                        terms.b.push(spec.inputs[i].lambda * f);
                    }
                    let denom = sorted_sum(&mut terms.b);
                    if !(denom >= spec.epsilon) {
                        fallbacks += 1;
                        match spec.fallback {
                            Fallback::Target => target_t.data()[j],
                            Fallback::LambdaAverage => lambda_average(spec, &tensors, j, &mut terms),
                        }
                    } else if equal {
                        // identical precisions cancel
                        lambda_average(spec, &tensors, j, &mut terms)
                    } else {
                        terms.a.clear();
                        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                        for &i in &terms.active {
                            let v = tensors[i].data()[j];
                            lo = lo.min(v);
                            hi = hi.max(v);
                            terms.a.push(spec.inputs[i].lambda * spec.precision(i, name, j) * v);
                        }
                        (sorted_sum(&mut terms.a) / denom).clamp(lo, hi)
                    }
                }
            };
            out.push(value);
        }
        merged.replace_data(name, out).map_err(|e| Error::Numerical(e.to_string()))?;
        total_fallbacks += fallbacks;
        per_tensor.insert(name.clone(), fallbacks);
    }

    let objective_value = merge_objective(&merged, spec)?;
    Ok(MergeReport {
        merged,
        n_fallback_entries: total_fallbacks,
        objective_value,
        per_tensor_fallbacks: per_tensor,
        mode: spec.mode,
        lambdas: spec.lambdas(),
        target_index: spec.target_index,
        epsilon: spec.epsilon,
    })
}

/// `theta*[j] = sum_i lambda_i theta_i[j]` on mergeable tensors; everything
/// else comes from the target.
pub fn merge_isotropic(spec: &MergeSpec) -> Result<MergeReport> {
    if spec.mode != MergeMode::Isotropic {
        return Err(Error::invalid("merge_isotropic needs an isotropic MergeSpec"));
    }
    run_merge(spec)
}

/// Fisher-weighted average with target fallback where the weighted Fisher
/// sum is below epsilon.
pub fn merge_fisher(spec: &MergeSpec) -> Result<MergeReport> {
    if spec.mode != MergeMode::Fisher {
        return Err(Error::invalid("merge_fisher needs a Fisher MergeSpec"));
    }
    run_merge(spec)
}

pub fn merge(spec: &MergeSpec) -> Result<MergeReport> {
    run_merge(spec)
}

/// `-1/2 sum_i lambda_i sum_j F_i[j] (theta[j] - theta_i[j])^2` over the
/// mergeable coordinates (`F_i = 1` in isotropic mode).
pub fn merge_objective(theta: &ParameterSet, spec: &MergeSpec) -> Result<f64> {
    let mut total = 0.0;
    for name in &spec.partition.mergeable {
        let t = theta.get(name).ok_or_else(|| Error::incompatible(format!("theta lacks '{name}'")))?;
        for (i, input) in spec.inputs.iter().enumerate() {
            let own = input.params.get(name).expect("mergeable");
            if own.shape() != t.shape() {
                return Err(Error::incompatible(format!("'{name}' shape {:?} vs {:?}", t.shape(), own.shape())));
            }
            let mut s = 0.0;
            for (j, (a, b)) in t.data().iter().zip(own.data()).enumerate() {
                s += spec.precision(i, name, j) * (a - b) * (a - b);
            }
            total += input.lambda * s;
        }
    }
    Ok(-0.5 * total)
}
