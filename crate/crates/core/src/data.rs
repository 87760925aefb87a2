//! Labeled datasets, their CSV form, and regression bucketization.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        input_dim: usize,
        labels: Vec<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if features.len() != input_dim * labels.len() {
            return Err(Error::shape(format!(
                "{} feature values do not form {} rows of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(LabeledDataset { features, input_dim, labels, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Largest label plus one (0 for an empty set).
    pub fn label_bound(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Checks labels lie in `[0, num_classes)` and rows have `input_dim` entries.
    pub fn check_compatible(&self, input_dim: usize, num_classes: usize) -> Result<()> {
        if self.input_dim != input_dim {
            return Err(Error::shape(format!("input dim {} vs model {}", self.input_dim, input_dim)));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::shape(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset { features, input_dim: self.input_dim, labels, provenance: self.provenance.clone() }
    }

    /// The first `k` rows (all rows if `k` exceeds the length).
    pub fn prefix(&self, k: usize) -> LabeledDataset {
        let k = k.min(self.len());
        LabeledDataset {
            features: self.features[..k * self.input_dim].to_vec(),
            input_dim: self.input_dim,
            labels: self.labels[..k].to_vec(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads `f0..f{d-1}` feature columns plus a final `label` column, or a
    /// final `target` column which requires `buckets`.
    pub fn read_csv<R: Read>(reader: R, buckets: Option<BucketSpec>, provenance: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let ncols = header.len();
        if ncols < 2 {
            return Err(Error::format("csv needs at least one feature column and a label column"));
        }
        for (j, name) in header.iter().take(ncols - 1).enumerate() {
            if name.trim() != format!("f{j}") {
                return Err(Error::format(format!("expected column 'f{j}', found '{name}'")));
            }
        }
        let last = header.get(ncols - 1).unwrap_or_default().trim().to_string();
        let input_dim = ncols - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            for j in 0..input_dim {
                let v: f64 =
                    rec[j].trim().parse().map_err(|_| Error::format(format!("row {row}: bad number '{}'", &rec[j])))?;
                features.push(v);
            }
            let cell = rec[input_dim].trim();
            match last.as_str() {
                "label" => labels
                    .push(cell.parse::<usize>().map_err(|_| Error::format(format!("row {row}: bad label '{cell}'")))?),
                "target" => targets
                    .push(cell.parse::<f64>().map_err(|_| Error::format(format!("row {row}: bad target '{cell}'")))?),
                other => {
                    return Err(Error::format(format!("last column must be 'label' or 'target', found '{other}'")))
                }
            }
        }
        if last == "target" {
            let b = buckets
                .ok_or_else(|| Error::invalid("csv has a 'target' column; bucketization parameters are required"))?;
            labels = bucketize_regression(&targets, b.lo, b.hi, b.n_buckets)?;
        }
        LabeledDataset::new(features, input_dim, labels, provenance)
    }

    pub fn load_csv(path: impl AsRef<Path>, buckets: Option<BucketSpec>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        LabeledDataset::read_csv(file, buckets, &path.display().to_string())
    }
}

/// Equal-width bucket parameters for regression targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_buckets: usize,
}

/// Maps continuous targets onto `n_buckets` equal-width classes over
/// `[lo, hi]`. Buckets are right-exclusive; values at or above `hi` land in
/// the last bucket and values below `lo` in the first.
pub fn bucketize_regression(targets: &[f64], lo: f64, hi: f64, n_buckets: usize) -> Result<Vec<usize>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("need finite lo < hi, got [{lo}, {hi}]")));
    }
    if n_buckets < 2 {
        return Err(Error::invalid("n_buckets must be at least 2"));
    }
    targets
        .iter()
        .map(|&t| {
            if !t.is_finite() {
                return Err(Error::invalid(format!("non-finite target {t}")));
            }
            let raw = (n_buckets as f64 * (t - lo) / (hi - lo)).floor();
            Ok(raw.clamp(0.0, (n_buckets - 1) as f64) as usize)
        })
        .collect()
}
