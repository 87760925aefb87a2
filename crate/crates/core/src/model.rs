//! Small feed-forward softmax classifiers with exact reverse-mode gradients
//! of the per-example log-likelihood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Role, Tensor, TensorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

fn default_head_name() -> String {
    "head".to_string()
}

/// Architecture of a feed-forward classifier.
///
/// Hidden layer `k` owns tensors `hidden{k}.weight` `[width, fan_in]` and
/// `hidden{k}.bias` `[width]`; the output layer owns `{head_name}.weight` and
/// `{head_name}.bias`. The output layer is tagged [`Role::Head`] unless
/// `share_head` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_layers: Vec<HiddenLayer>,
    pub num_classes: usize,
    #[serde(default = "default_head_name")]
    pub head_name: String,
    #[serde(default)]
    pub share_head: bool,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: &[(usize, Activation)], num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_layers: hidden.iter().map(|&(width, activation)| HiddenLayer { width, activation }).collect(),
            num_classes,
            head_name: default_head_name(),
            share_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.hidden_layers.iter().any(|l| l.width == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.head_name.is_empty() || self.head_name.starts_with("hidden") {
            return Err(Error::invalid(format!("invalid head name '{}'", self.head_name)));
        }
        Ok(())
    }

    pub fn head_role(&self) -> Role {
        if self.share_head {
            Role::Body
        } else {
            Role::Head
        }
    }

    /// `(weight name, bias name)` for every layer, output layer last.
    pub fn layer_names(&self) -> Vec<(String, String)> {
        let mut names: Vec<(String, String)> =
            (0..self.hidden_layers.len()).map(|k| (format!("hidden{k}.weight"), format!("hidden{k}.bias"))).collect();
        names.push((format!("{}.weight", self.head_name), format!("{}.bias", self.head_name)));
        names
    }

    pub fn head_tensor_names(&self) -> [String; 2] {
        [format!("{}.weight", self.head_name), format!("{}.bias", self.head_name)]
    }

    pub fn num_params(&self) -> usize {
        Layout::new(self).total
    }

    /// Stable digest of the architecture, used to derive lineage ids.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub w_offset: usize,
    pub b_offset: usize,
}

/// Flat parameter layout: layers in order, each weight then bias.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub layers: Vec<LayerShape>,
    pub total: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    names: Vec<(String, String)>,
}

/// Per-call buffers for forward/backward passes.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Layout {
        let mut layers = Vec::with_capacity(spec.hidden_layers.len() + 1);
        let mut offset = 0;
        let mut fan_in = spec.input_dim;
        let mut push = |fan_out: usize, activation: Activation, fan_in: usize| {
            let w_offset = offset;
            let b_offset = w_offset + fan_in * fan_out;
            offset = b_offset + fan_out;
            layers.push(LayerShape { fan_in, fan_out, activation, w_offset, b_offset });
        };
        for h in &spec.hidden_layers {
            push(h.width, h.activation, fan_in);
            fan_in = h.width;
        }
        push(spec.num_classes, Activation::Identity, fan_in);
        Layout {
            layers,
            total: offset,
            num_classes: spec.num_classes,
            input_dim: spec.input_dim,
            names: spec.layer_names(),
        }
    }

    pub fn scratch(&self) -> Scratch {
        let widest = self.layers.iter().map(|l| l.fan_out.max(l.fan_in)).max().unwrap_or(1);
        Scratch {
            acts: self.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
            log_probs: vec![0.0; self.num_classes],
        }
    }

    /// Flattens `params` in layout order, checking names and shapes.
    pub fn flatten(&self, params: &ParameterSet) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(self.total);
        for ((wn, bn), l) in self.names.iter().zip(&self.layers) {
            let w = params.get(wn).ok_or_else(|| Error::shape(format!("missing tensor '{wn}'")))?;
            let b = params.get(bn).ok_or_else(|| Error::shape(format!("missing tensor '{bn}'")))?;
            if w.shape() != [l.fan_out, l.fan_in] {
                return Err(Error::shape(format!(
                    "'{wn}' has shape {:?}, expected [{}, {}]",
                    w.shape(),
                    l.fan_out,
                    l.fan_in
                )));
            }
            if b.shape() != [l.fan_out] {
                return Err(Error::shape(format!("'{bn}' has shape {:?}, expected [{}]", b.shape(), l.fan_out)));
            }
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b.data());
        }
        if params.len() != 2 * self.layers.len() {
            return Err(Error::shape("parameter set has tensors the model does not use"));
        }
        Ok(flat)
    }

    /// Splits a flat vector back into named tensors.
    pub fn unflatten(&self, flat: &[f64]) -> TensorMap {
        let mut out = TensorMap::new();
        for ((wn, bn), l) in self.names.iter().zip(&self.layers) {
            let w = &flat[l.w_offset..l.b_offset];
            let b = &flat[l.b_offset..l.b_offset + l.fan_out];
            out.insert(wn.clone(), Tensor::new(vec![l.fan_out, l.fan_in], w.to_vec()).expect("layout shape"));
            out.insert(bn.clone(), Tensor::new(vec![l.fan_out], b.to_vec()).expect("layout shape"));
        }
        out
    }

    /// Runs the network; leaves activations and `log_probs` in `scratch`.
    pub fn forward(&self, theta: &[f64], x: &[f64], scratch: &mut Scratch) {
        debug_assert_eq!(x.len(), self.input_dim);
        for (k, l) in self.layers.iter().enumerate() {
            let (prev, rest) = scratch.acts.split_at_mut(k);
            let input: &[f64] = if k == 0 { x } else { &prev[k - 1] };
            let out = &mut rest[0];
            let w = &theta[l.w_offset..l.b_offset];
            let b = &theta[l.b_offset..l.b_offset + l.fan_out];
            for o in 0..l.fan_out {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                let z = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                out[o] = l.activation.apply(z);
            }
        }
        let logits = scratch.acts.last().expect("output layer");
        log_softmax_into(logits, &mut scratch.log_probs);
    }

    /// Accumulates `scale * d log p(y|x) / d theta` into `grad` for the
    /// example last passed to [`Layout::forward`].
    pub fn backward_label(
        &self,
        theta: &[f64],
        x: &[f64],
        y: usize,
        scratch: &mut Scratch,
        grad: &mut [f64],
        scale: f64,
    ) {
        let c = self.num_classes;
        for k in 0..c {
            let p = scratch.log_probs[k].exp();
            scratch.delta[k] = if k == y { 1.0 - p } else { -p };
        }
        self.backward_from_delta(theta, x, scratch, grad, scale);
    }

    /// Backpropagates `scratch.delta` (gradient w.r.t. logits).
    fn backward_from_delta(&self, theta: &[f64], x: &[f64], scratch: &mut Scratch, grad: &mut [f64], scale: f64) {
        for k in (0..self.layers.len()).rev() {
            let l = self.layers[k];
            let input: &[f64] = if k == 0 { x } else { &scratch.acts[k - 1] };
            for o in 0..l.fan_out {
                let d = scratch.delta[o];
                if d == 0.0 {
                    continue;
                }
                let sd = scale * d;
                grad[l.b_offset + o] += sd;
                let g_row = &mut grad[l.w_offset + o * l.fan_in..l.w_offset + (o + 1) * l.fan_in];
                for (g, a) in g_row.iter_mut().zip(input) {
                    *g += sd * a;
                }
            }
            if k == 0 {
                break;
            }
            let below = self.layers[k - 1];
            let w = &theta[l.w_offset..l.b_offset];
            for i in 0..l.fan_in {
                let mut s = 0.0;
                for o in 0..l.fan_out {
                    s += w[o * l.fan_in + i] * scratch.delta[o];
                }
                scratch.delta_next[i] = s * below.activation.derivative_from_output(input[i]);
            }
            std::mem::swap(&mut scratch.delta, &mut scratch.delta_next);
        }
    }
}

pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Log-probabilities over classes for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub log_probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.log_probs)
    }

    pub fn num_classes(&self) -> usize {
        self.log_probs.len()
    }
}

/// A validated (spec, parameters) pair ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ModelSpec,
    pub(crate) layout: Layout,
    pub(crate) theta: Vec<f64>,
}

impl Classifier {
    pub fn new(spec: &ModelSpec, params: &ParameterSet) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(spec);
        let theta = layout.flatten(params)?;
        Ok(Classifier { spec: spec.clone(), layout, theta })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "input dim {} does not match model input dim {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<PredictiveDistribution> {
        self.check_input(x)?;
        let mut s = self.layout.scratch();
        self.layout.forward(&self.theta, x, &mut s);
        Ok(PredictiveDistribution { log_probs: s.log_probs })
    }

    pub fn predict_all(&self, data: &LabeledDataset) -> Result<Vec<usize>> {
        data.check_compatible(self.spec.input_dim, usize::MAX)?;
        let mut s = self.layout.scratch();
        Ok((0..data.len())
            .map(|i| {
                self.layout.forward(&self.theta, data.row(i), &mut s);
                argmax(&s.log_probs)
            })
            .collect())
    }

    pub fn per_example_grad(&self, x: &[f64], y: usize) -> Result<TensorMap> {
        self.check_input(x)?;
        if y >= self.spec.num_classes {
            return Err(Error::shape(format!("label {y} outside [0, {})", self.spec.num_classes)));
        }
        let mut s = self.layout.scratch();
        let mut g = vec![0.0; self.layout.total];
        self.layout.forward(&self.theta, x, &mut s);
        self.layout.backward_label(&self.theta, x, y, &mut s, &mut g, 1.0);
        Ok(self.layout.unflatten(&g))
    }

    /// Accuracy over the first `min(limit, n)` rows.
    pub fn evaluate(&self, data: &LabeledDataset, limit: Option<usize>) -> Result<f64> {
        let n = limit.map_or(data.len(), |k| k.min(data.len()));
        if n == 0 {
            return Err(Error::invalid("empty evaluation set"));
        }
        data.check_compatible(self.spec.input_dim, self.spec.num_classes)?;
        let mut s = self.layout.scratch();
        let correct = (0..n)
            .filter(|&i| {
                self.layout.forward(&self.theta, data.row(i), &mut s);
                argmax(&s.log_probs) == data.label(i)
            })
            .count();
        Ok(correct as f64 / n as f64)
    }

    /// Mean negative log-likelihood over the whole set.
    pub fn mean_nll(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        data.check_compatible(self.spec.input_dim, self.spec.num_classes)?;
        let mut s = self.layout.scratch();
        let total: f64 = (0..data.len())
            .map(|i| {
                self.layout.forward(&self.theta, data.row(i), &mut s);
                -s.log_probs[data.label(i)]
            })
            .sum();
        Ok(total / data.len() as f64)
    }
}

/// Derives the lineage id shared by every model trained from this init.
pub fn lineage_for(spec: &ModelSpec, seed: u64) -> String {
    format!("{}-{seed:016x}", spec.digest())
}

/// Fresh parameters: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let layout = Layout::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = vec![0.0; layout.total];
    for l in &layout.layers {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        for w in &mut flat[l.w_offset..l.b_offset] {
            *w = rng.gen_range(-bound..bound);
        }
    }
    let mut params = ParameterSet::new(lineage_for(spec, seed));
    let head = spec.head_tensor_names();
    for (name, t) in layout.unflatten(&flat) {
        let role = if head.contains(&name) { spec.head_role() } else { Role::Body };
        params.insert(name, t, role)?;
    }
    Ok(params)
}

/// Replaces the output layer with freshly drawn weights for `spec`'s class
/// count, keeping the body and lineage.
pub fn reinit_head(spec: &ModelSpec, params: &ParameterSet, seed: u64) -> Result<ParameterSet> {
    let fresh = init_params(spec, seed)?;
    let head = spec.head_tensor_names();
    let mut out = ParameterSet::new(params.lineage_id());
    for (name, t, role) in params.iter() {
        if !head.iter().any(|h| h == name) {
            out.insert(name, t.clone(), role)?;
        }
    }
    for name in &head {
        out.insert(name.clone(), fresh.get(name).expect("head tensor").clone(), spec.head_role())?;
    }
    Layout::new(spec).flatten(&out)?;
    Ok(out)
}

pub fn forward(spec: &ModelSpec, params: &ParameterSet, x: &[f64]) -> Result<PredictiveDistribution> {
    Classifier::new(spec, params)?.forward(x)
}

pub fn per_example_grad(spec: &ModelSpec, params: &ParameterSet, x: &[f64], y: usize) -> Result<TensorMap> {
    Classifier::new(spec, params)?.per_example_grad(x, y)
}

pub fn evaluate(spec: &ModelSpec, params: &ParameterSet, data: &LabeledDataset, limit: Option<usize>) -> Result<f64> {
    Classifier::new(spec, params)?.evaluate(data, limit)
}
