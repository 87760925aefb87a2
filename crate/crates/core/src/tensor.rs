//! Named tensor collections: the parameter sets that get trained, estimated
//! and merged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("shape {shape:?} must be nonempty with positive dims")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {numel} elements, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: vec![0.0; self.data.len()] }
    }
}

/// Whether a tensor takes part in merging ("body") or is task-specific ("head").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Body,
    Head,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Body => "body",
            Role::Head => "head",
        }
    }
}

/// Plain name-to-tensor map, used for gradients and Fisher diagonals.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Named model parameters sharing one initialization lineage.
///
/// Every tensor carries a role tag; names iterate in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: TensorMap,
    roles: BTreeMap<String, Role>,
    lineage_id: String,
}

impl ParameterSet {
    pub fn new(lineage_id: impl Into<String>) -> Self {
        ParameterSet { tensors: BTreeMap::new(), roles: BTreeMap::new(), lineage_id: lineage_id.into() }
    }

    /// Adds or replaces a tensor. Names must be nonempty and data finite.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, role: Role) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("tensor name must be nonempty"));
        }
        if !tensor.is_finite() {
            return Err(Error::invalid(format!("tensor '{name}' has a non-finite element")));
        }
        self.roles.insert(name.clone(), role);
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn lineage_id(&self) -> &str {
        &self.lineage_id
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.roles.get(name).copied()
    }

    pub fn set_role(&mut self, name: &str, role: Role) -> Result<()> {
        match self.roles.get_mut(name) {
            Some(r) => {
                *r = role;
                Ok(())
            }
            None => Err(Error::invalid(format!("no tensor named '{name}'"))),
        }
    }

    pub fn roles(&self) -> &BTreeMap<String, Role> {
        &self.roles
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, Role)> {
        self.tensors.iter().map(move |(k, t)| (k.as_str(), t, self.roles[k]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replaces the data of an existing tensor, keeping its shape and role.
    pub fn replace_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let t = self.tensors.get_mut(name).ok_or_else(|| Error::invalid(format!("no tensor named '{name}'")))?;
        if t.len() != data.len() {
            return Err(Error::shape(format!("'{name}' expects {} elements, got {}", t.len(), data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value written to '{name}'")));
        }
        t.data = data;
        Ok(())
    }

    /// Same names, shapes, roles and lineage as `self`, with the given data.
    pub fn with_tensors(&self, tensors: TensorMap) -> Result<ParameterSet> {
        let mut out = ParameterSet::new(self.lineage_id.clone());
        if tensors.len() != self.tensors.len() {
            return Err(Error::shape("tensor count differs"));
        }
        for (name, t) in tensors {
            let own = self.get(&name).ok_or_else(|| Error::shape(format!("unexpected tensor '{name}'")))?;
            if own.shape() != t.shape() {
                return Err(Error::shape(format!("'{name}' shape {:?} vs {:?}", t.shape(), own.shape())));
            }
            let role = self.roles[&name];
            out.insert(name, t, role)?;
        }
        Ok(out)
    }

    /// Bitwise equality of all data, shapes, roles and lineage.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.lineage_id == other.lineage_id
            && self.roles == other.roles
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((n1, a), (n2, b))| {
                n1 == n2 && a.shape == b.shape && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn rejects_non_finite_and_empty_names() {
        let mut p = ParameterSet::new("x");
        let bad = Tensor::from_vec(vec![1.0, f64::NAN]).unwrap();
        assert!(p.insert("w", bad, Role::Body).is_err());
        let ok = Tensor::from_vec(vec![1.0]).unwrap();
        assert!(p.insert("", ok, Role::Body).is_err());
    }
}
