//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FMRG" | version: u32 | header_len: u64 | header: UTF-8 JSON | payload
//! ```
//!
//! The payload is the concatenation of every tensor's data as `f64` LE, in
//! the order of the header's tensor table. `byte_offset` is relative to the
//! start of the payload. Fisher diagonals use the same layout with
//! `"fisher": true`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Role, Tensor};

pub const MAGIC: &[u8; 4] = b"FMRG";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

/// JSON header. Field order here is the serialized order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub fisher: bool,
    pub lineage_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher_info: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded file contents before interpretation as parameters or Fisher.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub header: Header,
    pub params: ParameterSet,
}

pub(crate) fn encode(params: &ParameterSet, fisher: bool, fisher_info: Option<serde_json::Value>) -> Result<Vec<u8>> {
    if params.is_empty() {
        return Err(Error::invalid("empty parameter set"));
    }
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t, role) in params.iter() {
        if !t.is_finite() {
            return Err(Error::invalid(format!("non-finite element in tensor '{name}'")));
        }
        entries.push(TensorEntry { name: name.to_string(), role, shape: t.shape().to_vec(), byte_offset: offset });
        offset += 8 * t.len() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        fisher,
        lineage_id: params.lineage_id().to_string(),
        fisher_info,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t, _) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::format("truncated preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("bad magic, not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format("truncated header"))? as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| Error::format(format!("malformed header: {e}")))?;
    if header.format_version != version {
        return Err(Error::format(format!("unsupported version {}", header.format_version)));
    }
    let payload = &bytes[header_end..];

    let mut expected_offset = 0u64;
    let mut params = ParameterSet::new(header.lineage_id.clone());
    let mut seen = BTreeSet::new();
    for entry in &header.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::format(format!("duplicate tensor '{}'", entry.name)));
        }
        if entry.byte_offset != expected_offset {
            return Err(Error::format(format!(
                "shape/offset mismatch at '{}': offset {} expected {}",
                entry.name, entry.byte_offset, expected_offset
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::format("shape overflow"))?;
        let end = numel
            .checked_mul(8)
            .and_then(|n| n.checked_add(entry.byte_offset))
            .ok_or_else(|| Error::format("shape overflow"))?;
        if end > payload.len() as u64 {
            return Err(Error::format(format!("truncated payload in tensor '{}'", entry.name)));
        }
        let raw = &payload[entry.byte_offset as usize..end as usize];
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| Error::format(e.to_string()))?;
        params.insert(entry.name.clone(), tensor, entry.role).map_err(|e| Error::format(e.to_string()))?;
        expected_offset = end;
    }
    if params.is_empty() {
        return Err(Error::format("empty parameter set"));
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::format(format!("payload has {} trailing bytes", payload.len() as u64 - expected_offset)));
    }
    Ok(RawCheckpoint { header, params })
}

/// Writes `params`, including role tags, to `path`.
pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(params, false, None)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet> {
    let raw = read_raw(path)?;
    if raw.header.fisher {
        return Err(Error::format("file holds a Fisher diagonal, not parameters"));
    }
    Ok(raw.params)
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn to_bytes(params: &ParameterSet) -> Result<Vec<u8>> {
    encode(params, false, None)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet> {
    let raw = decode(bytes)?;
    if raw.header.fisher {
        return Err(Error::format("file holds a Fisher diagonal, not parameters"));
    }
    Ok(raw.params)
}

/// Result of a compatibility check: which tensors get merged and which stay
/// private to each input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub mergeable: Vec<String>,
    pub private: Vec<Vec<String>>,
}

/// Splits tensor names into the mergeable body (tagged "body" in every set
/// with one shape) and per-set private names.
pub fn check_merge_compatibility(sets: &[&ParameterSet]) -> Result<Partition> {
    let first = sets.first().ok_or_else(|| Error::invalid("no parameter sets given"))?;
    for s in &sets[1..] {
        if s.lineage_id() != first.lineage_id() {
            return Err(Error::incompatible(format!(
                "lineage mismatch: '{}' vs '{}' (models must share an initialization)",
                first.lineage_id(),
                s.lineage_id()
            )));
        }
    }

    let mut body_shapes: BTreeMap<&str, &[usize]> = BTreeMap::new();
    for s in sets {
        for (name, t, role) in s.iter() {
            if role != Role::Body {
                continue;
            }
            match body_shapes.get(name) {
                Some(shape) if *shape != t.shape() => {
                    return Err(Error::incompatible(format!(
                        "shape conflict on '{name}': {:?} vs {:?}",
                        shape,
                        t.shape()
                    )));
                }
                Some(_) => {}
                None => {
                    body_shapes.insert(name, t.shape());
                }
            }
        }
    }

    let mergeable: Vec<String> = body_shapes
        .keys()
        .filter(|name| sets.iter().all(|s| s.role(name) == Some(Role::Body)))
        .map(|n| n.to_string())
        .collect();
    let merge_set: BTreeSet<&str> = mergeable.iter().map(String::as_str).collect();
    let private =
        sets.iter().map(|s| s.names().filter(|n| !merge_set.contains(n)).map(str::to_string).collect()).collect();
    Ok(Partition { mergeable, private })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(lineage: &str, tensors: &[(&str, Vec<usize>, Role)]) -> ParameterSet {
        let mut p = ParameterSet::new(lineage);
        for (i, (name, shape, role)) in tensors.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|k| (k + i) as f64 * 0.5).collect();
            p.insert(*name, Tensor::new(shape.clone(), data).unwrap(), *role).unwrap();
        }
        p
    }

    #[test]
    fn round_trip_single_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmrg");
        let mut p = ParameterSet::new("lin");
        p.insert("w", Tensor::from_vec(vec![1.0, 2.0]).unwrap(), Role::Body).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert!(p.bit_eq(&q));
        assert_eq!(q.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_empty_set() {
        let p = ParameterSet::new("lin");
        let err = to_bytes(&p).unwrap_err();
        assert!(err.to_string().contains("empty parameter set"));
    }

    #[test]
    fn rejects_truncated_payload() {
        let p = set("l", &[("w", vec![3], Role::Body)]);
        let bytes = to_bytes(&p).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_unsupported_version() {
        let p = set("l", &[("w", vec![3], Role::Body)]);
        let mut bytes = to_bytes(&p).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_and_garbage_header() {
        let p = set("l", &[("w", vec![3], Role::Body)]);
        let mut bytes = to_bytes(&p).unwrap();
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());

        let mut bytes = to_bytes(&p).unwrap();
        bytes[16] = b'#';
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("malformed header"), "{err}");
    }

    #[test]
    fn rejects_trailing_bytes() {
        let p = set("l", &[("w", vec![3], Role::Body)]);
        let mut bytes = to_bytes(&p).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn encoding_is_byte_reproducible() {
        let p = set("l", &[("b", vec![2, 2], Role::Body), ("a", vec![3], Role::Head)]);
        assert_eq!(to_bytes(&p).unwrap(), to_bytes(&p.clone()).unwrap());
    }

    #[test]
    fn partition_heads_are_private() {
        let a = set("l", &[("w", vec![2], Role::Body), ("h_1", vec![3], Role::Head)]);
        let b = set("l", &[("w", vec![2], Role::Body), ("h_2", vec![3], Role::Head)]);
        let part = check_merge_compatibility(&[&a, &b]).unwrap();
        assert_eq!(part.mergeable, vec!["w".to_string()]);
        assert_eq!(part.private, vec![vec!["h_1".to_string()], vec!["h_2".to_string()]]);
    }

    #[test]
    fn partition_single_set_is_all_body() {
        let a = set("l", &[("w", vec![2], Role::Body), ("v", vec![1], Role::Body), ("h", vec![1], Role::Head)]);
        let part = check_merge_compatibility(&[&a]).unwrap();
        assert_eq!(part.mergeable, vec!["v".to_string(), "w".to_string()]);
    }

    #[test]
    fn partition_shape_conflict_and_lineage() {
        let a = set("l", &[("w", vec![2], Role::Body)]);
        let b = set("l", &[("w", vec![3], Role::Body)]);
        let err = check_merge_compatibility(&[&a, &b]).unwrap_err();
        assert!(err.to_string().contains("shape conflict"));
        let c = set("other", &[("w", vec![2], Role::Body)]);
        let err = check_merge_compatibility(&[&a, &c]).unwrap_err();
        assert!(err.to_string().contains("lineage"));
        assert!(check_merge_compatibility(&[]).is_err());
    }

    #[test]
    fn partition_is_order_independent() {
        let a = set("l", &[("w", vec![2], Role::Body), ("x", vec![1], Role::Body)]);
        let b = set("l", &[("w", vec![2], Role::Body), ("y", vec![1], Role::Body)]);
        let c = set("l", &[("w", vec![2], Role::Body), ("x", vec![1], Role::Head)]);
        let abc = check_merge_compatibility(&[&a, &b, &c]).unwrap();
        let cab = check_merge_compatibility(&[&c, &a, &b]).unwrap();
        assert_eq!(abc.mergeable, cab.mergeable);
        assert_eq!(abc.private[0], cab.private[1]);
        assert_eq!(abc.private[2], cab.private[0]);
    }
}
