//! Flat parameter views shared by every trainable component.
//!
//! Each component exposes its trainable values as one flat vector. Gradients
//! use the same layout, which is what the optimiser, the finite-difference
//! checks and the checkpoint writer all work against.

use crate::error::{contract, Result};

/// Name and shape of one contiguous block of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self { name: name.into(), shape }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub trait Parameterized {
    fn num_params(&self) -> usize;

    /// Append all trainable values to `out`.
    fn write_params(&self, out: &mut Vec<f64>);

    /// Overwrite trainable values from the front of `src`; returns how many were consumed.
    fn read_params(&mut self, src: &[f64]) -> Result<usize>;

    /// Blocks in flat order; their sizes sum to `num_params`.
    fn tensor_specs(&self, prefix: &str) -> Vec<TensorSpec>;

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    fn set_params(&mut self, src: &[f64]) -> Result<()> {
        let used = self.read_params(src)?;
        if used != src.len() {
            return contract(format!(
                "parameter vector has {} entries, component uses {used}",
                src.len()
            ));
        }
        Ok(())
    }
}

pub(crate) fn take<'a>(src: &'a [f64], n: usize, what: &str) -> Result<&'a [f64]> {
    if src.len() < n {
        return contract(format!("{what}: need {n} parameters, {} left", src.len()));
    }
    Ok(&src[..n])
}
