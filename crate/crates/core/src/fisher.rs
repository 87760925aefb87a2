//! Diagonal Fisher information estimation.
//!
//! For chosen examples `x_1..x_N` the estimate is
//! `F[j] = 1/N * sum_i E_{y ~ p(y|x_i)} (d log p(y|x_i) / d theta_j)^2`,
//! with the inner expectation either enumerated over classes or replaced by
//! the mean over `K` sampled labels.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, Layout, ModelSpec};
use crate::tensor::{ParameterSet, Tensor, TensorMap};

/// Largest class count the exact estimator will enumerate.
pub const MAX_EXACT_CLASSES: usize = 1024;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FisherMode {
    Exact,
    Sampled { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FisherConfig {
    pub n_examples: usize,
    pub mode: FisherMode,
    pub seed: u64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        FisherConfig { n_examples: 4096, mode: FisherMode::Exact, seed: 0 }
    }
}

impl FisherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::invalid("n_examples must be at least 1"));
        }
        if let FisherMode::Sampled { k: 0 } = self.mode {
            return Err(Error::invalid("sampled Fisher needs k >= 1"));
        }
        Ok(())
    }
}

/// Provenance stored alongside a Fisher diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherInfo {
    pub n_examples_used: usize,
    pub mode: FisherMode,
    pub seed: u64,
    #[serde(default)]
    pub dataset: String,
}

/// Nonnegative per-parameter Fisher values, congruent with a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    values: ParameterSet,
    pub info: FisherInfo,
}

impl FisherDiagonal {
    /// Wraps `values`, rejecting negative or non-finite entries.
    pub fn new(values: ParameterSet, info: FisherInfo) -> Result<Self> {
        if info.n_examples_used == 0 {
            return Err(Error::invalid("Fisher must use at least one example"));
        }
        for (name, t, _) in values.iter() {
            if t.data().iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::invalid(format!("negative Fisher entry in '{name}'")));
            }
        }
        Ok(FisherDiagonal { values, info })
    }

    pub fn values(&self) -> &ParameterSet {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn lineage_id(&self) -> &str {
        self.values.lineage_id()
    }

    /// Same tensors multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<FisherDiagonal> {
        let tensors: TensorMap = self
            .values
            .tensors()
            .iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| v * c).collect();
                (n.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
            })
            .collect();
        FisherDiagonal::new(self.values.with_tensors(tensors)?, self.info.clone())
    }

    /// Checks names and shapes against the parameters it describes.
    pub fn check_congruent(&self, params: &ParameterSet) -> Result<()> {
        for (name, t, _) in params.iter() {
            match self.values.get(name) {
                Some(f) if f.shape() == t.shape() => {}
                Some(f) => {
                    return Err(Error::shape(format!(
                        "Fisher '{name}' shape {:?} vs params {:?}",
                        f.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::shape(format!("Fisher lacks tensor '{name}'"))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.values, true, Some(serde_json::to_value(&self.info)?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = checkpoint::decode(bytes)?;
        if !raw.header.fisher {
            return Err(Error::format("file holds parameters, not a Fisher diagonal"));
        }
        let info = raw.header.fisher_info.ok_or_else(|| Error::format("Fisher file lacks fisher_info"))?;
        let info: FisherInfo = serde_json::from_value(info)?;
        FisherDiagonal::new(raw.params, info).map_err(|e| Error::format(e.to_string()))
    }

    /// Writes the checkpoint file and a `<path>.json` provenance sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::json!({
            "n_examples": self.info.n_examples_used,
            "mode": self.info.mode,
            "k": match self.info.mode { FisherMode::Sampled { k } => k, FisherMode::Exact => 0 },
            "seed": self.info.seed,
            "dataset": self.info.dataset,
        });
        std::fs::write(sidecar, serde_json::to_string_pretty(&json)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        FisherDiagonal::from_bytes(&std::fs::read(path)?)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Neumaier-compensated running sums, one per coordinate.
#[derive(Debug, Clone)]
struct CompensatedSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSum {
    fn new(n: usize) -> Self {
        CompensatedSum { sum: vec![0.0; n], comp: vec![0.0; n] }
    }

    #[inline]
    fn add(&mut self, j: usize, v: f64) {
        let s = self.sum[j];
        let t = s + v;
        if s.abs() >= v.abs() {
            self.comp[j] += (s - t) + v;
        } else {
            self.comp[j] += (v - t) + s;
        }
        self.sum[j] = t;
    }

    fn merge(&mut self, other: &CompensatedSum) {
        for j in 0..self.sum.len() {
            self.add(j, other.sum[j]);
            self.comp[j] += other.comp[j];
        }
    }

    fn finish(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}

/// Sums squared-gradient contributions for one chunk of chosen examples.
fn chunk_contribution(
    model: &Classifier,
    data: &LabeledDataset,
    chosen: &[usize],
    first_position: usize,
    mode: FisherMode,
    seed: u64,
) -> CompensatedSum {
    let layout: &Layout = &model.layout;
    let theta = &model.theta;
    let c = layout.num_classes;
    let mut acc = CompensatedSum::new(layout.total);
    let mut scratch = layout.scratch();
    let mut grad = vec![0.0; layout.total];
    let mut example = vec![0.0; layout.total];
    let mut weights = vec![0.0; c];
    let mut counts = vec![0usize; c];
    let mut probs = vec![0.0; c];

    for (offset, &row) in chosen.iter().enumerate() {
        let x = data.row(row);
        layout.forward(theta, x, &mut scratch);
        for (p, l) in probs.iter_mut().zip(&scratch.log_probs) {
            *p = l.exp();
        }
        match mode {
            FisherMode::Exact => weights.copy_from_slice(&probs),
            FisherMode::Sampled { k } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((first_position + offset) as u64);
                counts.iter_mut().for_each(|v| *v = 0);
                for _ in 0..k {
                    counts[sample_class(&probs, rng.gen::<f64>())] += 1;
                }
                for (w, &n) in weights.iter_mut().zip(&counts) {
                    *w = n as f64 / k as f64;
                }
            }
        }
        example.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..c {
            if weights[y] == 0.0 {
                continue;
            }
            grad.iter_mut().for_each(|v| *v = 0.0);
            layout.backward_label(theta, x, y, &mut scratch, &mut grad, 1.0);
            for (e, g) in example.iter_mut().zip(&grad) {
                *e += weights[y] * g * g;
            }
        }
        for (j, &v) in example.iter().enumerate() {
            if v != 0.0 {
                acc.add(j, v);
            }
        }
    }
    acc
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn sample_class(probs: &[f64], u: f64) -> usize {
    let mut cdf = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cdf += p;
        if u < cdf {
            return k;
        }
    }
    // rounding left the CDF short of 1; take the last class with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Rows used for estimation: the first `n` of a seeded shuffle, or the whole
/// set when `n` exceeds it.
pub fn choose_examples(data: &LabeledDataset, n: usize, seed: u64) -> Vec<usize> {
    let mut idx = data.shuffled_indices(seed);
    idx.truncate(n.min(data.len()));
    idx
}

/// Estimates the diagonal Fisher over the given rows, in the given order.
pub fn estimate_on_rows(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LabeledDataset,
    rows: &[usize],
    mode: FisherMode,
    seed: u64,
) -> Result<FisherDiagonal> {
    let model = Classifier::new(spec, params)?;
    if rows.is_empty() {
        return Err(Error::invalid("no examples to estimate the Fisher from"));
    }
    if mode == FisherMode::Exact && spec.num_classes > MAX_EXACT_CLASSES {
        return Err(Error::invalid(format!(
            "{} classes is too many to enumerate exactly (max {MAX_EXACT_CLASSES})",
            spec.num_classes
        )));
    }
    data.check_compatible(spec.input_dim, spec.num_classes)?;

    let chunks: Vec<(usize, &[usize])> = rows.chunks(CHUNK).enumerate().map(|(i, c)| (i * CHUNK, c)).collect();
    let run = |&(pos, chunk): &(usize, &[usize])| chunk_contribution(&model, data, chunk, pos, mode, seed);
    #[cfg(feature = "parallel")]
    let partials: Vec<CompensatedSum> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<CompensatedSum> = chunks.iter().map(run).collect();

    let mut total = CompensatedSum::new(model.layout.total);
    for p in &partials {
        total.merge(p);
    }
    let n = rows.len() as f64;
    let flat: Vec<f64> = total.finish().into_iter().map(|v| v / n).collect();
    let values = params.with_tensors(model.layout.unflatten(&flat))?;
    let info = FisherInfo { n_examples_used: rows.len(), mode, seed, dataset: data.provenance.clone() };
    FisherDiagonal::new(values, info)
}

pub fn estimate_fisher(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LabeledDataset,
    config: &FisherConfig,
) -> Result<FisherDiagonal> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let rows = choose_examples(data, config.n_examples, config.seed);
    estimate_on_rows(spec, params, data, &rows, config.mode, config.seed)
}

/// Exact expectation over classes.
pub fn estimate_fisher_exact(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LabeledDataset,
    config: &FisherConfig,
) -> Result<FisherDiagonal> {
    estimate_fisher(spec, params, data, &FisherConfig { mode: FisherMode::Exact, ..*config })
}

/// Monte-Carlo expectation with `k` sampled labels per example.
pub fn estimate_fisher_sampled(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LabeledDataset,
    config: &FisherConfig,
) -> Result<FisherDiagonal> {
    match config.mode {
        FisherMode::Sampled { .. } => estimate_fisher(spec, params, data, config),
        FisherMode::Exact => Err(Error::invalid("sampled estimator needs FisherMode::Sampled")),
    }
}

/// Mean over `data` of `KL(p_theta(.|x) || p_{theta+delta}(.|x))`.
pub fn expected_kl_under_perturbation(
    spec: &ModelSpec,
    params: &ParameterSet,
    delta: &TensorMap,
    data: &LabeledDataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let base = Classifier::new(spec, params)?;
    let mut shifted = TensorMap::new();
    for (name, t, _) in params.iter() {
        let d = delta.get(name).ok_or_else(|| Error::shape(format!("delta lacks tensor '{name}'")))?;
        if d.shape() != t.shape() {
            return Err(Error::shape(format!("delta '{name}' shape {:?} vs {:?}", d.shape(), t.shape())));
        }
        let data = t.data().iter().zip(d.data()).map(|(a, b)| a + b).collect();
        shifted.insert(name.to_string(), Tensor::new(t.shape().to_vec(), data)?);
    }
    if delta.len() != params.len() {
        return Err(Error::shape("delta has tensors the model does not use"));
    }
    let moved = Classifier::new(spec, &params.with_tensors(shifted)?)?;
    let mut s0 = base.layout.scratch();
    let mut s1 = moved.layout.scratch();
    let mut total = 0.0;
    for i in 0..data.len() {
        base.layout.forward(&base.theta, data.row(i), &mut s0);
        moved.layout.forward(&moved.theta, data.row(i), &mut s1);
        total += s0.log_probs.iter().zip(&s1.log_probs).map(|(p, q)| p.exp() * (p - q)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}
