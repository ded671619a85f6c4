//! Scalar loop helpers for reference computations outside the tape.
//!
//! These follow the same accumulation order as the tensor kernels, so results
//! agree bit-for-bit with the batched path.

use super::Element;

/// Sequential dot product accumulated from zero.
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Max-shifted softmax of one row.
pub fn softmax_row<T: Element>(z: &[T]) -> Vec<T> {
    let mut max = T::neg_infinity();
    for &v in z {
        max = max.max(v);
    }
    let mut out: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &out {
        sum += e;
    }
    for e in &mut out {
        *e /= sum;
    }
    out
}
