//! Minimal numeric foundation: a scalar trait covering `f32`/`f64`, dense
//! array kernels, and a reverse-mode tape.
//!
//! Training runs in `f32`; gradient verification runs the same code in `f64`.

pub mod kernels;
pub mod tape;

use ndarray::{ArrayD, ArrayView2, Ix2, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cmp::Ordering;

/// Element dtype tag recorded in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Scalar type the whole stack is generic over.
pub trait Real: NdFloat + Send + Sync + 'static {
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// IEEE total order; used to canonicalize reduction order across slots.
    fn total_cmp_(&self, other: &Self) -> Ordering;

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(src: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn total_cmp_(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.gen_range(lo..hi)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(src: &[u8]) -> Self {
        f32::from_le_bytes(src[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn total_cmp_(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.gen_range(lo..hi)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(src: &[u8]) -> Self {
        f64::from_le_bytes(src[..8].try_into().unwrap())
    }
}

/// View a dynamic array as 2-D. Panics if the array is not 2-D (internal bug).
pub(crate) fn as2<F: Real>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

/// Sum at most `SLOT_CAP` addends in IEEE-total-order, so the result does not
/// depend on the order the caller supplies them in. Used for every reduction
/// that crosses the slot axis; it is what makes slot permutation equivariance
/// bit-exact rather than approximate.
pub const SLOT_CAP: usize = 16;

#[inline]
pub fn canonical_sum<F: Real>(vals: &mut [F]) -> F {
    debug_assert!(vals.len() <= SLOT_CAP);
    // insertion sort: n is tiny
    for i in 1..vals.len() {
        let mut j = i;
        while j > 0 && vals[j - 1].total_cmp_(&vals[j]) == Ordering::Greater {
            vals.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut acc = F::zero();
    for v in vals.iter() {
        acc = acc + *v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_sum_is_permutation_invariant() {
        let a = [0.1f32, 2.7, -3.3, 1e-8];
        let mut perms = vec![
            vec![a[0], a[1], a[2], a[3]],
            vec![a[3], a[2], a[1], a[0]],
            vec![a[1], a[3], a[0], a[2]],
        ];
        let first = canonical_sum(&mut perms[0].clone());
        for p in perms.iter_mut() {
            assert_eq!(first.to_bits(), canonical_sum(p).to_bits());
        }
    }
}
