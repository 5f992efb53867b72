//! Bit-packed pruning masks.
//!
//! A [`SparsityMask`] records, for every weight of one tensor, whether it is
//! kept (bit set) or pruned (bit clear). Masks are stored as packed 64-bit
//! words — a 235k-weight layer costs under 4 KB — and serialize to a byte
//! string with the first weight in the lowest bit of the first byte.

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use std::path::Path;

/// Keep/prune bits for one flat weight buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    bits: Vec<u64>,
    len: usize,
}

impl SparsityMask {
    /// All-kept mask (sparsity zero).
    pub fn ones(len: usize) -> Self {
        let words = len.div_ceil(64);
        let mut bits = vec![u64::MAX; words];
        Self::clear_tail(&mut bits, len);
        SparsityMask { bits, len }
    }

    /// All-pruned mask (sparsity one).
    pub fn zeros(len: usize) -> Self {
        SparsityMask { bits: vec![0; len.div_ceil(64)], len }
    }

    fn clear_tail(bits: &mut [u64], len: usize) {
        let rem = len % 64;
        if rem != 0 {
            if let Some(last) = bits.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// True if the weight at `idx` is kept.
    #[inline]
    pub fn is_kept(&self, idx: usize) -> bool {
        debug_assert!(idx < self.len);
        self.bits[idx / 64] >> (idx % 64) & 1 == 1
    }

    /// Mark a weight as kept.
    #[inline]
    pub fn keep(&mut self, idx: usize) {
        debug_assert!(idx < self.len);
        self.bits[idx / 64] |= 1 << (idx % 64);
    }

    /// Mark a weight as pruned.
    #[inline]
    pub fn prune(&mut self, idx: usize) {
        debug_assert!(idx < self.len);
        self.bits[idx / 64] &= !(1 << (idx % 64));
    }

    /// Number of kept weights.
    pub fn count_kept(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of pruned weights.
    pub fn count_pruned(&self) -> usize {
        self.len - self.count_kept()
    }

    /// Fraction of weights pruned.
    pub fn sparsity(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        self.count_pruned() as f64 / self.len as f64
    }

    /// Flat indices of kept weights, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.is_kept(i)).collect()
    }

    /// Expand to a dense 0/1 buffer in the requested scalar type.
    pub fn to_dense<S: Scalar>(&self) -> Vec<S> {
        (0..self.len).map(|i| if self.is_kept(i) { S::one() } else { S::zero() }).collect()
    }

    /// Zero out pruned entries of a matching buffer.
    pub fn apply_to<S: Scalar>(&self, data: &mut [S]) {
        assert_eq!(data.len(), self.len, "mask length does not match buffer");
        for (i, v) in data.iter_mut().enumerate() {
            if !self.is_kept(i) {
                *v = S::zero();
            }
        }
    }

    /// Packed bytes, first weight in the lowest bit of the first byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len.div_ceil(8);
        (0..nbytes).map(|j| (self.bits[j / 8] >> (8 * (j % 8))) as u8).collect()
    }

    /// Rebuild from packed bytes. The byte count must match and padding bits
    /// past `len` must be zero, so corrupted tails are caught.
    pub fn from_bytes(len: usize, bytes: &[u8], origin: &Path) -> Result<Self> {
        let nbytes = len.div_ceil(8);
        if bytes.len() != nbytes {
            return Err(Error::Checkpoint {
                path: origin.to_path_buf(),
                reason: format!("mask of {len} bits needs {nbytes} bytes, got {}", bytes.len()),
            });
        }
        let mut bits = vec![0u64; len.div_ceil(64)];
        for (j, &b) in bytes.iter().enumerate() {
            bits[j / 8] |= (b as u64) << (8 * (j % 8));
        }
        let mask = SparsityMask { bits: bits.clone(), len };
        let mut trimmed = bits;
        Self::clear_tail(&mut trimmed, len);
        if trimmed != mask.bits {
            return Err(Error::Checkpoint {
                path: origin.to_path_buf(),
                reason: "mask has nonzero padding bits past its length".into(),
            });
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn set_clear_and_counts_agree() {
        let mut m = SparsityMask::ones(130);
        assert_eq!(m.count_kept(), 130);
        assert_eq!(m.sparsity(), 0.0);
        m.prune(0);
        m.prune(64);
        m.prune(129);
        assert_eq!(m.count_pruned(), 3);
        assert!(!m.is_kept(129) && !m.is_kept(64) && !m.is_kept(0));
        assert!(m.is_kept(1) && m.is_kept(128));
        m.keep(64);
        assert_eq!(m.count_pruned(), 2);
    }

    #[test]
    fn dense_expansion_and_apply_zero_the_same_positions() {
        let mut m = SparsityMask::ones(10);
        m.prune(3);
        m.prune(7);
        let dense: Vec<f32> = m.to_dense();
        let mut buf: Vec<f32> = (1..=10).map(|i| i as f32).collect();
        m.apply_to(&mut buf);
        for i in 0..10 {
            assert_eq!(dense[i] == 0.0, buf[i] == 0.0);
            assert_eq!(buf[i] == 0.0, !m.is_kept(i));
        }
        assert_eq!(m.kept_indices().len(), 8);
    }

    #[test]
    fn byte_roundtrip_is_exact_for_awkward_lengths() {
        for len in [1usize, 7, 8, 9, 63, 64, 65, 130, 1000] {
            let mut m = SparsityMask::ones(len);
            for i in (0..len).step_by(3) {
                m.prune(i);
            }
            let bytes = m.to_bytes();
            assert_eq!(bytes.len(), len.div_ceil(8));
            let back = SparsityMask::from_bytes(len, &bytes, &PathBuf::from("test")).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn deserialization_rejects_bad_lengths_and_dirty_padding() {
        let m = SparsityMask::ones(10);
        let mut bytes = m.to_bytes();
        assert!(SparsityMask::from_bytes(10, &bytes[..1], &PathBuf::from("t")).is_err());
        // Bit 10 of a 10-bit mask is padding; setting it must be detected.
        bytes[1] |= 1 << 4;
        assert!(SparsityMask::from_bytes(10, &bytes, &PathBuf::from("t")).is_err());
    }
}
