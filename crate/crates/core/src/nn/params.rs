use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered collection of named parameter tensors.
///
/// Names follow `"<layer index>.weight"` / `"<layer index>.bias"` for a single
/// graph; composite sets (e.g. matching decoders) prefix the owning block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn check_same_layout(&self, other: &ParamSet, context: &str) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid(format!(
                "{context}: parameter names differ ({:?} vs {:?})",
                self.names, other.names
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::shape(context, a.shape(), b.shape()));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, elementwise.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_same_layout(other, "ParamSet::axpy")?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            t.scale(alpha);
        }
    }

    /// `Σ coeff_i * set_i` over sets sharing one layout, accumulated in the
    /// order given.
    pub fn linear_combination(terms: &[(f64, &ParamSet)]) -> Result<ParamSet> {
        let (first_coeff, first) = terms
            .first()
            .ok_or_else(|| Error::invalid("linear combination of zero parameter sets"))?;
        let mut out = first.zeros_like();
        out.axpy(*first_coeff, first)?;
        for (c, p) in &terms[1..] {
            out.axpy(*c, p)?;
        }
        Ok(out)
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_squares).sum()
    }

    /// `Σ (self - other)²` over every scalar.
    pub fn squared_distance(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_layout(other, "ParamSet::squared_distance")?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Appends every entry of `other` with `prefix` prepended to its name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.names.push(format!("{prefix}{n}"));
            self.tensors.push(t);
        }
    }

    /// Copies out the contiguous entry range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> ParamSet {
        ParamSet {
            names: self.names[start..end].to_vec(),
            tensors: self.tensors[start..end].to_vec(),
        }
    }

    /// Flattened view of all scalars, in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// `params - lr * grads`, elementwise.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    params.axpy(-lr, grads)
}
