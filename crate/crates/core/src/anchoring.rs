//! Mean-direction targets for the concentration loss.
//!
//! Classification-style supervision uses the class prototype `w_j` directly.
//! Contrastive-style supervision uses the normalized sum of the query's
//! positives in the batch.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vmf::{UnitDescriptor, RESULTANT_EPS};

/// One unit-norm prototype per class; class ids are the dense indices `0..C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    weights: Vec<UnitDescriptor>,
}

impl PrototypeSet {
    pub fn new(weights: Vec<UnitDescriptor>) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::Domain("prototype set is empty".into()))?;
        let d = first.dim();
        if weights.iter().any(|w| w.dim() != d) {
            return Err(Error::Shape("prototypes have mixed dimensions".into()));
        }
        Ok(Self { weights })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].dim()
    }

    pub fn weights(&self) -> &[UnitDescriptor] {
        &self.weights
    }

    /// Row-major `C × d` copy of the prototype matrix.
    pub fn to_matrix(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flat_map(|w| w.as_slice().iter().copied())
            .collect()
    }

    /// Rebuilds the set from a raw `C × d` matrix, renormalizing every row.
    pub fn from_matrix(matrix: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || !matrix.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "matrix of length {} is not a multiple of d={dim}",
                matrix.len()
            )));
        }
        Self::new(
            matrix
                .chunks_exact(dim)
                .map(|row| UnitDescriptor::normalize(row.to_vec()))
                .collect::<Result<_>>()?,
        )
    }

    /// Replaces prototype `label`.
    pub fn set(&mut self, label: usize, weight: UnitDescriptor) -> Result<()> {
        if weight.dim() != self.dim() {
            return Err(Error::Shape("prototype dimension mismatch".into()));
        }
        let slot = self
            .weights
            .get_mut(label)
            .ok_or_else(|| Error::Lookup(format!("no class {label}")))?;
        *slot = weight;
        Ok(())
    }

    /// The class anchor `μ = w_label`.
    pub fn class_anchor(&self, label: usize) -> Result<&UnitDescriptor> {
        self.weights.get(label).ok_or_else(|| {
            Error::Lookup(format!(
                "class {label} out of range for {} prototypes",
                self.weights.len()
            ))
        })
    }
}

/// How the vMF mean direction is chosen for a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    #[default]
    ClassPrototype,
    BatchCentroid,
}

/// Normalized sum of the positives.
///
/// The sum runs in a canonical (lexicographic) order of the inputs so the
/// result is bit-identical under any permutation of `positives`.
pub fn batch_centroid_anchor(positives: &[&UnitDescriptor]) -> Result<UnitDescriptor> {
    let first = positives
        .first()
        .ok_or_else(|| Error::Domain("batch centroid needs at least one positive".into()))?;
    let d = first.dim();
    if positives.iter().any(|p| p.dim() != d) {
        return Err(Error::Shape("positives have mixed dimensions".into()));
    }
    let mut order: Vec<&UnitDescriptor> = positives.to_vec();
    order.sort_by(|a, b| lexicographic(a.as_slice(), b.as_slice()));
    let mut sum = vec![0.0; d];
    for p in order {
        sum.iter_mut().zip(p.as_slice()).for_each(|(s, x)| *s += x);
    }
    let n = crate::linalg::norm(&sum);
    if n < RESULTANT_EPS {
        return Err(Error::Degenerate(format!(
            "positive embeddings cancel (sum norm {n:e})"
        )));
    }
    UnitDescriptor::normalize(sum)
}

/// Centroid anchor for a query, optionally counting the query itself among
/// its positives.
pub fn centroid_for_query(
    query: &UnitDescriptor,
    positives: &[&UnitDescriptor],
    include_query: bool,
) -> Result<UnitDescriptor> {
    if include_query {
        let mut all = positives.to_vec();
        all.push(query);
        batch_centroid_anchor(&all)
    } else {
        batch_centroid_anchor(positives)
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}
