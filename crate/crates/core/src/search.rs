//! Merging-coefficient grids, validation sweeps and interpolation curves.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::merge::{merge, Fallback, MergeInput, MergeMode, MergeSpec, DEFAULT_EPSILON};
use crate::model::{Classifier, ModelSpec};
use crate::tensor::ParameterSet;

pub const SWEEP_SCHEMA: &str = "fishmerge.sweep/1";
/// Validation prefix used to score grid points.
pub const DEFAULT_VAL_LIMIT: usize = 2048;
pub const DEFAULT_GRID_POINTS: usize = 50;

/// Coefficient vectors for `m` models.
///
/// Two models get `n_points` evenly spaced values of the first coefficient
/// over `[0, 1]`. More models get `n_points` uniform draws from the simplex
/// (seeded) followed by the `m` vertices and the barycenter.
pub fn lambda_grid(m: usize, n_points: usize) -> Result<Vec<Vec<f64>>> {
    lambda_grid_seeded(m, n_points, 0)
}

pub fn lambda_grid_seeded(m: usize, n_points: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if m < 2 {
        return Err(Error::invalid(format!("a grid needs at least 2 models, got {m}")));
    }
    if n_points < 2 {
        return Err(Error::invalid(format!("a grid needs at least 2 points, got {n_points}")));
    }
    if m == 2 {
        let last = (n_points - 1) as f64;
        return Ok((0..n_points)
            .map(|i| {
                let l1 = i as f64 / last;
                vec![l1, 1.0 - l1]
            })
            .collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid: Vec<Vec<f64>> = (0..n_points)
        .map(|_| {
            let e: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    for k in 0..m {
        let mut v = vec![0.0; m];
        v[k] = 1.0;
        grid.push(v);
    }
    grid.push(vec![1.0 / m as f64; m]);
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambdas: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema: String,
    pub points: Vec<SweepPoint>,
    pub best_index: usize,
    pub selection_metric: String,
    /// Input whose weight breaks ties in the selection metric.
    pub target_index: usize,
}

impl SweepResult {
    /// Picks the best point: highest selection metric, then most weight on
    /// the target, then earliest.
    pub fn new(points: Vec<SweepPoint>, selection_metric: &str, target_index: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("sweep produced no points"));
        }
        let score = |p: &SweepPoint| -> Result<f64> {
            p.metrics
                .get(selection_metric)
                .copied()
                .ok_or_else(|| Error::invalid(format!("unknown selection metric '{selection_metric}'")))
        };
        let mut best = 0;
        for i in 1..points.len() {
            let (s, sb) = (score(&points[i])?, score(&points[best])?);
            let (t, tb) = (points[i].lambdas[target_index], points[best].lambdas[target_index]);
            if s > sb || (s == sb && t > tb) {
                best = i;
            }
        }
        score(&points[0])?;
        Ok(SweepResult {
            schema: SWEEP_SCHEMA.to_string(),
            points,
            best_index: best,
            selection_metric: selection_metric.to_string(),
            target_index,
        })
    }

    pub fn best(&self) -> &SweepPoint {
        &self.points[self.best_index]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: SweepResult = serde_json::from_str(text)?;
        if r.schema != SWEEP_SCHEMA {
            return Err(Error::format(format!("unsupported sweep schema '{}'", r.schema)));
        }
        Ok(r)
    }

    fn metric_names(&self) -> Vec<String> {
        self.points[0].metrics.keys().cloned().collect()
    }

    /// One row per grid point: `index, lambda_0.., <metrics..>, best`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.points[0].lambdas.len();
        let metrics = self.metric_names();
        let mut header = vec!["index".to_string()];
        header.extend((0..m).map(|k| format!("lambda_{k}")));
        header.extend(metrics.iter().cloned());
        header.push("best".into());
        w.write_record(&header)?;
        for (i, p) in self.points.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(p.lambdas.iter().map(|v| format!("{v:?}")));
            rec.extend(metrics.iter().map(|k| format!("{:?}", p.metrics.get(k).copied().unwrap_or(f64::NAN))));
            rec.push(u8::from(i == self.best_index).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, selection_metric: &str, target_index: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let m = header.iter().filter(|h| h.starts_with("lambda_")).count();
        if header.first().map(String::as_str) != Some("index") || header.last().map(String::as_str) != Some("best") {
            return Err(Error::format("sweep csv must start with 'index' and end with 'best'"));
        }
        let metric_names = &header[1 + m..header.len() - 1];
        let mut points = Vec::new();
        let mut flagged = None;
        for rec in r.records() {
            let rec = rec?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(format!("bad number '{s}'")));
            let lambdas = (1..=m).map(|k| num(&rec[k])).collect::<Result<Vec<_>>>()?;
            let mut metrics = BTreeMap::new();
            for (k, name) in metric_names.iter().enumerate() {
                metrics.insert(name.clone(), num(&rec[1 + m + k])?);
            }
            if &rec[header.len() - 1] == "1" {
                flagged = Some(points.len());
            }
            points.push(SweepPoint { lambdas, metrics });
        }
        let result = SweepResult::new(points, selection_metric, target_index)?;
        if flagged.is_some_and(|f| f != result.best_index) {
            return Err(Error::format("csv 'best' flag disagrees with the selection rule"));
        }
        Ok(result)
    }
}

/// Everything a sweep needs except the coefficients.
#[derive(Debug, Clone)]
pub struct SweepTemplate<'a> {
    pub params: Vec<&'a ParameterSet>,
    pub fishers: Vec<Option<&'a FisherDiagonal>>,
    pub target_index: usize,
    pub mode: MergeMode,
    pub epsilon: f64,
    pub fallback: Fallback,
}

impl<'a> SweepTemplate<'a> {
    pub fn new(
        params: Vec<&'a ParameterSet>,
        fishers: Vec<Option<&'a FisherDiagonal>>,
        target_index: usize,
        mode: MergeMode,
    ) -> Self {
        SweepTemplate { params, fishers, target_index, mode, epsilon: DEFAULT_EPSILON, fallback: Fallback::Target }
    }

    pub fn spec(&self, lambdas: &[f64]) -> Result<MergeSpec<'a>> {
        if lambdas.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "lambda vector has {} entries for {} models",
                lambdas.len(),
                self.params.len()
            )));
        }
        let inputs =
            self.params.iter().zip(&self.fishers).zip(lambdas).map(|((p, f), &l)| MergeInput::new(p, *f, l)).collect();
        Ok(MergeSpec::new(inputs, self.target_index, self.mode)?
            .with_epsilon(self.epsilon)?
            .with_fallback(self.fallback))
    }

    /// Merges with `lambdas` and returns the merged parameters.
    pub fn merged(&self, lambdas: &[f64]) -> Result<ParameterSet> {
        Ok(merge(&self.spec(lambdas)?)?.merged)
    }
}

fn map_grid<T: Send, F>(grid: &[Vec<f64>], f: F) -> Vec<T>
where
    F: Fn(&[f64]) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        grid.par_iter().map(|l| f(l)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        grid.iter().map(|l| f(l)).collect()
    }
}

fn abort_at(lambdas: &[f64], e: Error) -> Error {
    let msg = format!("sweep aborted at lambda {lambdas:?}: {e}");
    match e {
        Error::Numerical(_) => Error::Numerical(msg),
        Error::Invalid(_) => Error::Invalid(msg),
        _ => Error::Incompatible(msg),
    }
}

/// Merges once per grid point and scores accuracy on the first `val_limit`
/// validation rows. The only metric is `"acc"`.
pub fn sweep(
    template: &SweepTemplate,
    grid: &[Vec<f64>],
    model_spec: &ModelSpec,
    val_data: &LabeledDataset,
    selection_metric: &str,
    val_limit: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    if selection_metric != "acc" {
        return Err(Error::invalid(format!("unknown selection metric '{selection_metric}' (supported: acc)")));
    }
    let results = map_grid(grid, |lambdas| -> Result<SweepPoint> {
        let report = merge(&template.spec(lambdas)?)?;
        let acc = Classifier::new(model_spec, &report.merged)?.evaluate(val_data, Some(val_limit))?;
        let mut metrics = BTreeMap::new();
        metrics.insert("acc".to_string(), acc);
        metrics.insert("n_fallback".to_string(), report.n_fallback_entries as f64);
        Ok(SweepPoint { lambdas: report.lambdas, metrics })
    });
    let points =
        results.into_iter().zip(grid).map(|(r, l)| r.map_err(|e| abort_at(l, e))).collect::<Result<Vec<_>>>()?;
    SweepResult::new(points, selection_metric, template.target_index)
}

/// Which merge modes an interpolation curve traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveModes {
    Isotropic,
    Fisher,
    Both,
}

impl CurveModes {
    pub fn modes(self) -> Vec<MergeMode> {
        match self {
            CurveModes::Isotropic => vec![MergeMode::Isotropic],
            CurveModes::Fisher => vec![MergeMode::Fisher],
            CurveModes::Both => vec![MergeMode::Isotropic, MergeMode::Fisher],
        }
    }
}

fn mode_key(mode: MergeMode) -> &'static str {
    match mode {
        MergeMode::Isotropic => "isotropic",
        MergeMode::Fisher => "fisher",
    }
}

/// Inputs for [`interpolation_curve`].
#[derive(Debug, Clone, Copy)]
pub struct CurveInputs<'a> {
    pub spec: &'a ModelSpec,
    pub pre: &'a ParameterSet,
    pub ft: &'a ParameterSet,
    pub fishers: Option<(&'a FisherDiagonal, &'a FisherDiagonal)>,
    pub iid: &'a LabeledDataset,
    pub ood: &'a LabeledDataset,
}

/// Sweeps `lambda_1` (the weight on `pre`) from 0 to 1 in `step` increments
/// and records `<mode>.iid_acc` and `<mode>.ood_acc` per point. The target
/// is whichever endpoint carries more weight, `ft` on a tie.
pub fn interpolation_curve(inputs: &CurveInputs, step: f64, modes: CurveModes) -> Result<SweepResult> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid(format!("step must be in (0, 1], got {step}")));
    }
    let intervals = (1.0 / step).round();
    if ((intervals * step) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("step {step} does not divide 1 evenly")));
    }
    let grid = lambda_grid(2, intervals as usize + 1)?;
    let modes = modes.modes();
    if modes.contains(&MergeMode::Fisher) && inputs.fishers.is_none() {
        return Err(Error::invalid("Fisher curve needs Fisher diagonals for both models"));
    }
    let (f_pre, f_ft) = match inputs.fishers {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let results = map_grid(&grid, |lambdas| -> Result<SweepPoint> {
        let target = if lambdas[0] > lambdas[1] { 0 } else { 1 };
        let mut metrics = BTreeMap::new();
        for &mode in &modes {
            let template = SweepTemplate::new(vec![inputs.pre, inputs.ft], vec![f_pre, f_ft], target, mode);
            let merged = template.merged(lambdas)?;
            let model = Classifier::new(inputs.spec, &merged)?;
            metrics.insert(format!("{}.iid_acc", mode_key(mode)), model.evaluate(inputs.iid, None)?);
            metrics.insert(format!("{}.ood_acc", mode_key(mode)), model.evaluate(inputs.ood, None)?);
        }
        Ok(SweepPoint { lambdas: lambdas.to_vec(), metrics })
    });
    let points =
        results.into_iter().zip(&grid).map(|(r, l)| r.map_err(|e| abort_at(l, e))).collect::<Result<Vec<_>>>()?;
    let selection = format!("{}.ood_acc", mode_key(*modes.last().expect("at least one mode")));
    SweepResult::new(points, &selection, 1)
}
