//! Categorical attribute codes.
//!
//! An attribute schema is an ordered list of categorical groups (say
//! gender and race); a sample's attributes are one-hot encoded per group
//! and concatenated into a single p-dimensional 0/1 vector that
//! conditions both networks.

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeGroup {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered categorical groups; `dim()` is the embedded vector length p.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    groups: Vec<AttributeGroup>,
}

impl AttributeSchema {
    pub fn new(groups: Vec<AttributeGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(CoreError::InvalidArgument("schema needs at least one group".into()));
        }
        for g in &groups {
            if g.values.len() < 2 {
                return Err(CoreError::InvalidArgument(format!(
                    "attribute group '{}' needs at least two values",
                    g.name
                )));
            }
        }
        Ok(AttributeSchema { groups })
    }

    /// Parse "gender:circle|square,race:A|B".
    pub fn parse(s: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (name, values) = part.split_once(':').ok_or_else(|| {
                CoreError::Config(format!(
                    "attribute group '{part}' must look like name:value|value"
                ))
            })?;
            groups.push(AttributeGroup {
                name: name.trim().to_string(),
                values: values.split('|').map(|v| v.trim().to_string()).collect(),
            });
        }
        AttributeSchema::new(groups)
    }

    pub fn to_spec_string(&self) -> String {
        self.groups
            .iter()
            .map(|g| format!("{}:{}", g.name, g.values.join("|")))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn groups(&self) -> &[AttributeGroup] {
        &self.groups
    }

    /// Total one-hot dimension p.
    pub fn dim(&self) -> usize {
        self.groups.iter().map(|g| g.values.len()).sum()
    }

    /// One-hot encode one value per group, in group order.
    pub fn encode(&self, values: &[&str]) -> Result<AttributeVector> {
        if values.len() != self.groups.len() {
            return Err(CoreError::Data(format!(
                "expected {} attribute values, got {}",
                self.groups.len(),
                values.len()
            )));
        }
        let mut bits = vec![0u8; self.dim()];
        let mut offset = 0;
        for (group, &value) in self.groups.iter().zip(values) {
            let idx = group.values.iter().position(|v| v == value).ok_or_else(|| {
                CoreError::Data(format!(
                    "unknown attribute value '{value}' for group '{}' (known: {})",
                    group.name,
                    group.values.join(", ")
                ))
            })?;
            bits[offset + idx] = 1;
            offset += group.values.len();
        }
        Ok(AttributeVector { bits })
    }

    /// Decode back to one value per group. Errors unless the vector is a
    /// valid concatenation of one-hots.
    pub fn decode<'a>(&'a self, v: &AttributeVector) -> Result<Vec<&'a str>> {
        self.validate(v)?;
        let mut out = Vec::with_capacity(self.groups.len());
        let mut offset = 0;
        for group in &self.groups {
            let slot = v.bits[offset..offset + group.values.len()]
                .iter()
                .position(|&b| b == 1)
                .expect("validated one-hot");
            out.push(group.values[slot].as_str());
            offset += group.values.len();
        }
        Ok(out)
    }

    /// Check length and the exactly-one-hot-per-group invariant.
    pub fn validate(&self, v: &AttributeVector) -> Result<()> {
        if v.bits.len() != self.dim() {
            return Err(CoreError::Data(format!(
                "attribute vector length {} does not match schema dimension {}",
                v.bits.len(),
                self.dim()
            )));
        }
        let mut offset = 0;
        for group in &self.groups {
            let ones: usize = v.bits[offset..offset + group.values.len()]
                .iter()
                .map(|&b| b as usize)
                .sum();
            if ones != 1 {
                return Err(CoreError::Data(format!(
                    "group '{}' must have exactly one active value, found {ones}",
                    group.name
                )));
            }
            offset += group.values.len();
        }
        Ok(())
    }

    /// Every possible attribute combination, in lexicographic group order.
    pub fn all_combinations(&self) -> Vec<AttributeVector> {
        let mut combos: Vec<Vec<&str>> = vec![Vec::new()];
        for group in &self.groups {
            let mut next = Vec::new();
            for combo in &combos {
                for value in &group.values {
                    let mut c = combo.clone();
                    c.push(value.as_str());
                    next.push(c);
                }
            }
            combos = next;
        }
        combos
            .iter()
            .map(|c| self.encode(c).expect("schema-generated combination"))
            .collect()
    }
}

/// p-dimensional 0/1 conditional code.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeVector {
    bits: Vec<u8>,
}

impl AttributeVector {
    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Stable key for grouping samples by attribute cell.
    pub fn cell_key(&self) -> String {
        self.bits.iter().map(|b| char::from(b'0' + b)).collect()
    }

    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| fl(b as f64)).collect()
    }

    /// Stack a batch of vectors into an [N, p] tensor.
    pub fn stack_batch<T: Scalar>(batch: &[AttributeVector]) -> Result<Tensor<T>> {
        if batch.is_empty() {
            return Err(CoreError::InvalidArgument("empty attribute batch".into()));
        }
        let p = batch[0].dim();
        let mut data = Vec::with_capacity(batch.len() * p);
        for v in batch {
            if v.dim() != p {
                return Err(CoreError::ShapeMismatch {
                    op: "attribute stack",
                    detail: format!("mixed dims {p} and {}", v.dim()),
                });
            }
            data.extend(v.to_scalars::<T>());
        }
        Tensor::new(vec![batch.len(), p], data)
    }
}
