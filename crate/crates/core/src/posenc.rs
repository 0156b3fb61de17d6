//! Sinusoidal positional encodings for chunked features.
//!
//! The 2D table splits the feature axis in half: the first `N/2` slots encode
//! the intra-chunk position `c`, the second `N/2` encode the chunk index `i`,
//! each with sin/cos pairs at frequencies `10000^(−4u/N)`. Both indices are
//! zero-based. The 1D table encodes `c` only, so every chunk receives the
//! same encoding.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const BASE: f64 = 10000.0;

fn sincos(pos: usize, slot: usize, n: usize, exponent_scale: f64) -> f64 {
    let pair = (slot / 2) as f64;
    let freq = BASE.powf(-exponent_scale * pair / n as f64);
    let arg = pos as f64 * freq;
    if slot.is_multiple_of(2) {
        arg.sin()
    } else {
        arg.cos()
    }
}

fn check_2d(n: usize) -> Result<()> {
    if n == 0 || !n.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2D positional encoding needs N divisible by 4, got {n}"
        )));
    }
    Ok(())
}

/// Encoding vector of length `n` for intra-chunk position `c` and chunk `i`.
pub fn pe2d_vector(n: usize, c: usize, i: usize) -> Vec<f64> {
    let half = n / 2;
    (0..n)
        .map(|d| {
            if d < half {
                sincos(c, d, n, 4.0)
            } else {
                sincos(i, d - half, n, 4.0)
            }
        })
        .collect()
}

/// 2D table laid out `N×C×I`.
pub fn pe2d<T: Scalar>(n: usize, c: usize, i: usize) -> Result<Tensor<T>> {
    check_2d(n)?;
    let mut data = vec![T::ZERO; n * c * i];
    for ci in 0..c {
        for ii in 0..i {
            for (d, v) in pe2d_vector(n, ci, ii).into_iter().enumerate() {
                data[(d * c + ci) * i + ii] = T::from_f64(v);
            }
        }
    }
    Tensor::new(&[n, c, i], data)
}

/// 2D table laid out chunk-major `I×C×N`, the separator's working layout.
pub fn pe2d_chunk_major<T: Scalar>(n: usize, c: usize, i: usize) -> Result<Tensor<T>> {
    check_2d(n)?;
    let mut data = Vec::with_capacity(n * c * i);
    for ii in 0..i {
        for ci in 0..c {
            data.extend(pe2d_vector(n, ci, ii).into_iter().map(T::from_f64));
        }
    }
    Tensor::new(&[i, c, n], data)
}

/// The `c = C/2` slice of [`pe2d`], laid out `N×I`, added to the visual cue.
pub fn pe2d_visual_row<T: Scalar>(n: usize, c: usize, i: usize) -> Result<Tensor<T>> {
    check_2d(n)?;
    let row = c / 2;
    let mut data = vec![T::ZERO; n * i];
    for ii in 0..i {
        for (d, v) in pe2d_vector(n, row, ii).into_iter().enumerate() {
            data[d * i + ii] = T::from_f64(v);
        }
    }
    Tensor::new(&[n, i], data)
}

/// Classic 1D sinusoidal table over `len` positions, laid out `N×len`.
pub fn pe1d<T: Scalar>(n: usize, len: usize) -> Result<Tensor<T>> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "1D positional encoding needs even N, got {n}"
        )));
    }
    let mut data = vec![T::ZERO; n * len];
    for pos in 0..len {
        for d in 0..n {
            data[d * len + pos] = T::from_f64(sincos(pos, d, n, 2.0));
        }
    }
    Tensor::new(&[n, len], data)
}

/// Transpose a 2D `N×len` table to `len×N`.
pub(crate) fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |idx| t.data()[(idx % r) * c + idx / r])
}
