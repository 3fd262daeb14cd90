//! Flat parameter storage with a named tensor table.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::linalg::Scalar;
use crate::packing::checksum;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// All parameters in one contiguous buffer; gradients and optimizer state
/// use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    pub data: Vec<F>,
    pub tensors: Vec<TensorInfo>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            data: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Append a tensor filled by `init`; returns its index.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], mut init: impl FnMut() -> F) -> usize {
        let info = TensorInfo {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        self.data.extend((0..info.numel()).map(|_| init()));
        self.tensors.push(info);
        self.tensors.len() - 1
    }

    /// Drop the last tensor.
    pub fn pop(&mut self) -> Option<TensorInfo> {
        let t = self.tensors.pop()?;
        self.data.truncate(t.offset);
        Some(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &[F] {
        &self.data[self.tensors[idx].range()]
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut [F] {
        let r = self.tensors[idx].range();
        &mut self.data[r]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn tensor_bytes(&self, idx: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.tensors[idx].numel() * F::BYTES);
        for &x in self.get(idx) {
            x.write_le(&mut out);
        }
        out
    }

    pub fn tensor_checksum(&self, idx: usize) -> u64 {
        checksum(&self.tensor_bytes(idx))
    }

    /// Checksum over the raw bytes of the given flat range.
    pub fn range_checksum(&self, range: Range<usize>) -> u64 {
        let mut bytes = Vec::with_capacity(range.len() * F::BYTES);
        for &x in &self.data[range] {
            x.write_le(&mut bytes);
        }
        checksum(&bytes)
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            data: self
                .data
                .iter()
                .map(|x| G::of(x.to_f64().expect("finite")))
                .collect(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}
