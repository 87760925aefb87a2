//! File plumbing shared by the subcommands: provenance sidecars, model spec
//! resolution and `--inputs` parsing.

use std::path::{Path, PathBuf};

use fishmerge::fisher::sidecar_path;
use fishmerge::{BucketSpec, Error, FisherDiagonal, LabeledDataset, ModelSpec, ParameterSet, Result};
use serde_json::{json, Map, Value};

/// Writes `<out>.json` recording the command and its full configuration.
/// Fields already present in the sidecar (Fisher files write their own) are
/// kept unless overwritten.
pub fn write_sidecar(out: &Path, command: &str, config: &Value, model_spec: Option<&ModelSpec>) -> Result<()> {
    let path = sidecar_path(out);
    let mut obj = match std::fs::read_to_string(&path) {
        Ok(text) => match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        },
        Err(_) => Map::new(),
    };
    obj.insert("tool".into(), json!(concat!("fishmerge ", env!("CARGO_PKG_VERSION"))));
    obj.insert("command".into(), json!(command));
    obj.insert("config".into(), config.clone());
    if let Some(spec) = model_spec {
        obj.insert("model_spec".into(), serde_json::to_value(spec)?);
    }
    std::fs::write(path, serde_json::to_string_pretty(&Value::Object(obj))? + "\n")?;
    Ok(())
}

pub fn read_spec_file(path: &Path) -> Result<ModelSpec> {
    let text = at(path, std::fs::read_to_string(path).map_err(Error::from))?;
    let spec: ModelSpec = at(path, serde_json::from_str(&text).map_err(Error::from))?;
    spec.validate()?;
    Ok(spec)
}

/// The model spec from `--spec`, falling back to the checkpoint's sidecar.
pub fn resolve_spec(explicit: Option<&Path>, ckpt: &Path) -> Result<ModelSpec> {
    if let Some(path) = explicit {
        return read_spec_file(path);
    }
    let sidecar = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|_| Error::Invalid(format!("no --spec given and {} has no provenance sidecar", ckpt.display())))?;
    let value: Value = serde_json::from_str(&text)?;
    let spec = value
        .get("model_spec")
        .ok_or_else(|| Error::Invalid(format!("{} lacks model_spec; pass --spec", sidecar.display())))?;
    let spec: ModelSpec = serde_json::from_value(spec.clone())?;
    spec.validate()?;
    Ok(spec)
}

/// Prefixes I/O and format errors with the offending path.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_data(path: &Path, buckets: Option<BucketSpec>) -> Result<LabeledDataset> {
    at(path, LabeledDataset::load_csv(path, buckets))
}

pub fn load_params(path: &Path) -> Result<ParameterSet> {
    at(path, fishmerge::load_checkpoint(path))
}

pub fn load_fisher(path: &Path) -> Result<FisherDiagonal> {
    at(path, FisherDiagonal::load(path))
}

/// Parses `LO:HI:N`.
pub fn parse_buckets(s: &str) -> std::result::Result<BucketSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected LO:HI:N, got '{s}'"));
    }
    let lo = parts[0].parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi = parts[1].parse().map_err(|e| format!("bad HI: {e}"))?;
    let n_buckets = parts[2].parse().map_err(|e| format!("bad N: {e}"))?;
    Ok(BucketSpec { lo, hi, n_buckets })
}

/// One `--inputs` entry: `ckpt[:fisher[:lambda]]`. An empty Fisher field
/// means none.
#[derive(Debug, Clone)]
pub struct InputArg {
    pub ckpt: PathBuf,
    pub fisher: Option<PathBuf>,
    pub lambda: Option<f64>,
}

pub fn parse_input(s: &str) -> std::result::Result<InputArg, String> {
    let mut parts = s.splitn(3, ':');
    let ckpt = parts.next().filter(|p| !p.is_empty()).ok_or_else(|| format!("missing checkpoint in '{s}'"))?;
    let fisher = parts.next().filter(|p| !p.is_empty()).map(PathBuf::from);
    let lambda = match parts.next() {
        Some(l) => Some(l.parse::<f64>().map_err(|e| format!("bad lambda in '{s}': {e}"))?),
        None => None,
    };
    Ok(InputArg { ckpt: ckpt.into(), fisher, lambda })
}

pub struct LoadedInput {
    pub params: ParameterSet,
    pub fisher: Option<FisherDiagonal>,
    pub lambda: Option<f64>,
}

pub fn load_inputs(args: &[InputArg]) -> Result<Vec<LoadedInput>> {
    args.iter()
        .map(|a| {
            Ok(LoadedInput {
                params: load_params(&a.ckpt)?,
                fisher: a.fisher.as_deref().map(load_fisher).transpose()?,
                lambda: a.lambda,
            })
        })
        .collect()
}
