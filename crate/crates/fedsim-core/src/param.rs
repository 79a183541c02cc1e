//! Flat parameter vectors with named layer spans, plus the small linear
//! algebra every strategy is built from.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// One named span inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub name: String,
    /// Start offset into the flat vector.
    pub start: usize,
    /// Number of parameters in the span.
    pub len: usize,
}

/// Immutable description of how a flat vector splits into layers.
/// Spans are contiguous, in order, and cover the whole vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    spans: Vec<LayerSpan>,
    dim: usize,
}

impl LayerLayout {
    /// Builds a layout from `(name, len)` pairs laid out contiguously.
    pub fn new(parts: &[(&str, usize)]) -> Self {
        let mut spans = Vec::with_capacity(parts.len());
        let mut start = 0;
        for (name, len) in parts {
            spans.push(LayerSpan { name: (*name).to_string(), start, len: *len });
            start += len;
        }
        LayerLayout { spans, dim: start }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn span(&self, name: &str) -> Option<&LayerSpan> {
        self.spans.iter().find(|s| s.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.spans.iter().map(|s| s.name.as_str()).collect()
    }
}

/// A model's parameters as one flat `f64` vector plus a shared layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && self.layout == other.layout
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<LayerLayout>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(FedError::domain(format!(
                "value length {} does not match layout dim {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        ParamVector { values: vec![0.0; layout.dim()], layout }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check_layout(&self, other: &ParamVector, op: &str) -> Result<()> {
        if !self.same_layout(other) {
            return Err(FedError::domain(format!("{op}: layer layouts differ")));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other, "add")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(ParamVector { values, layout: self.layout.clone() })
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other, "sub")?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(ParamVector { values, layout: self.layout.clone() })
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        let values = self.values.iter().map(|a| a * c).collect();
        ParamVector { values, layout: self.layout.clone() }
    }

    /// In-place `self += c * other`, the SGD workhorse.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        self.check_layout(other, "axpy")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other, "dot")?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|a| a.is_finite())
    }
}

/// Weighted average of parameter vectors: `sum(w_k * v_k) / sum(w_k)`.
///
/// Summation runs in input order; callers that need exact reproducibility
/// pass inputs in canonical ascending-id order.
pub fn weighted_average(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(FedError::domain("weighted_average: empty input"));
    }
    if vectors.len() != weights.len() {
        return Err(FedError::domain(format!(
            "weighted_average: {} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(FedError::domain(format!("weighted_average: weights sum to {total}")));
    }
    let first = vectors[0];
    let mut acc = vec![0.0; first.dim()];
    for (v, &w) in vectors.iter().zip(weights) {
        first.check_layout(v, "weighted_average")?;
        for (a, b) in acc.iter_mut().zip(&v.values) {
            *a += w * b;
        }
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    Ok(ParamVector { values: acc, layout: first.layout.clone() })
}

/// Cosine similarity between two nonzero vectors of the same layout.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(FedError::domain("cosine_similarity: zero vector"));
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Splits a vector at a named boundary layer into `(base, top)` where the
/// base covers layers up to and including the boundary. The returned pieces
/// are raw value slices; `merge_at` reassembles them.
pub fn split_at(v: &ParamVector, boundary_layer: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let span = v
        .layout()
        .span(boundary_layer)
        .ok_or_else(|| FedError::domain(format!("split_at: unknown layer {boundary_layer:?}")))?;
    let cut = span.start + span.len;
    Ok((v.values[..cut].to_vec(), v.values[cut..].to_vec()))
}

/// Inverse of `split_at` under the same layout and boundary.
pub fn merge_at(
    base: &[f64],
    top: &[f64],
    layout: &Arc<LayerLayout>,
    boundary_layer: &str,
) -> Result<ParamVector> {
    let span = layout
        .span(boundary_layer)
        .ok_or_else(|| FedError::domain(format!("merge_at: unknown layer {boundary_layer:?}")))?;
    let cut = span.start + span.len;
    if base.len() != cut || top.len() != layout.dim() - cut {
        return Err(FedError::domain(format!(
            "merge_at: piece lengths ({}, {}) do not fit cut {cut} of dim {}",
            base.len(),
            top.len(),
            layout.dim()
        )));
    }
    let mut values = Vec::with_capacity(layout.dim());
    values.extend_from_slice(base);
    values.extend_from_slice(top);
    ParamVector::new(values, layout.clone())
}
