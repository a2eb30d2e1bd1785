//! Dense f64 tensors, a fixed-primitive reverse-mode graph, and the named
//! parameter store.
//!
//! Everything is 64-bit and single-threaded by design: the experiments are
//! desk-scale and the tests pin exact values, so there is no reason to give
//! up determinism for speed. A store and any graphs built over it belong to
//! one thread; snapshots are immutable and may be shared freely.

mod fdcheck;
mod graph;
mod serialize;
mod store;

pub use fdcheck::{finite_difference_check, FdReport, DEFAULT_FD_STEP};
pub use graph::{Graph, NodeId, LN_EPS};
pub use serialize::{read_store, write_store, SerializeError, STORE_MAGIC};
pub use store::{GradMap, GroupKind, NamedParamStore, ParamGroup, Snapshot};

use thiserror::Error;

/// Errors surfaced by the tensor substrate.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value at node {node} ({op})")]
    NumericFault { node: usize, op: String },
    #[error("snapshot incompatible with store: {0}")]
    IncompatibleSnapshot(String),
}

/// A dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Builds a tensor from raw row-major data.
    ///
    /// Panics if `data.len()` does not equal the product of `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} needs {} values, got {}", shape, n, data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape: shape.to_vec(), data: self.data.clone() }
    }
}

/// FNV-1a accumulator used for content fingerprints across the crate.
///
/// Not cryptographic; it only needs to be deterministic and sensitive to
/// single-bit changes in any recorded value.
#[derive(Clone, Debug)]
pub struct Fingerprinter(u64);

impl Fingerprinter {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;

    pub fn new() -> Self {
        Fingerprinter(Self::OFFSET)
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn write_str(&mut self, s: &str) {
        self.write_u64(s.len() as u64);
        self.write_bytes(s.as_bytes());
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write_u64(v.to_bits());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fingerprinter {
    fn default() -> Self {
        Self::new()
    }
}

/// Convenience fingerprint of a single string.
pub fn hash_str(s: &str) -> u64 {
    let mut h = Fingerprinter::new();
    h.write_str(s);
    h.finish()
}

/// Derives a per-name RNG seed from a run seed, independent of creation order.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ hash_str(name).wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_accounting() {
        let t = Tensor::zeros(&[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
        assert!(!t.is_scalar());
        assert!(Tensor::scalar(1.5).is_scalar());
    }

    #[test]
    #[should_panic(expected = "needs 6 values")]
    fn tensor_rejects_mismatched_data() {
        let _ = Tensor::from_vec(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn fingerprint_sensitive_to_single_bit() {
        let mut a = Fingerprinter::new();
        let mut b = Fingerprinter::new();
        a.write_f64(1.0);
        b.write_f64(1.0 + f64::EPSILON);
        assert_ne!(a.finish(), b.finish());
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derive_seed(7, "embed.tok"), derive_seed(7, "embed.pos"));
        assert_eq!(derive_seed(7, "embed.tok"), derive_seed(7, "embed.tok"));
    }
}
