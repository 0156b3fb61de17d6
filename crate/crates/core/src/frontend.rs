//! Learnable waveform encoder and decoder.
//!
//! The encoder is a bias-free strided convolution with kernel `L` and hop
//! `L/2`; the decoder is the matching transposed convolution. Waveforms are
//! right-padded with zeros so that the last window is complete, and decoding
//! truncates back to the original length.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Encoded mixture `N×K` plus the bookkeeping needed to decode to the
/// original length.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeature<T = f32> {
    pub values: Tensor<T>,
    pub original_len: usize,
    pub padded_len: usize,
}

impl<T: Scalar> AudioFeature<T> {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Smallest `T' ≥ max(T, L)` with `(T' − L)` divisible by `L/2`.
pub fn padded_len(t: usize, kernel: usize) -> usize {
    let hop = kernel / 2;
    if t <= kernel {
        kernel
    } else {
        kernel + (t - kernel).div_ceil(hop) * hop
    }
}

/// Number of encoder frames for a waveform of `t` samples.
pub fn frame_count(t: usize, kernel: usize) -> usize {
    (padded_len(t, kernel) - kernel) / (kernel / 2) + 1
}

/// Zero-pad `samples` to [`padded_len`] as a `1×T'` tensor.
pub fn pad_signal<T: Scalar>(samples: &[T], kernel: usize) -> Result<Tensor<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("audio signal"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("audio signal samples".into()));
    }
    let mut data = samples.to_vec();
    data.resize(padded_len(samples.len(), kernel), T::ZERO);
    let len = data.len();
    Tensor::new(&[1, len], data)
}

/// Tape-level encoder: `1×T'` waveform → `N×K` feature.
pub fn encode_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let h = tape.conv1d(x, weight, cfg.encoder_hop())?;
    if cfg.encoder_relu {
        tape.relu(&h)
    } else {
        Ok(h)
    }
}

/// Tape-level decoder: `N×K` → `1×original_len`.
pub fn decode_var<T: Scalar>(
    tape: &mut Tape<T>,
    h: &Var<T>,
    weight: &Var<T>,
    cfg: &ModelConfig,
    original_len: usize,
) -> Result<Var<T>> {
    let k = h.shape()[1];
    let full = (k.max(1) - 1) * cfg.encoder_hop() + cfg.kernel_size;
    if original_len > full {
        return Err(Error::Contract(format!(
            "cannot decode {original_len} samples from {k} frames (at most {full})"
        )));
    }
    let y = tape.conv_transpose1d(h, weight, cfg.encoder_hop())?;
    if original_len == full {
        Ok(y)
    } else {
        tape.slice(&y, 1, 0, original_len)
    }
}

pub fn encode<T: Scalar>(
    x: &AudioSignal,
    weight: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<AudioFeature<T>> {
    let samples: Vec<T> = x.samples.iter().map(|&v| T::from_f64(v as f64)).collect();
    let padded = pad_signal(&samples, cfg.kernel_size)?;
    let padded_len = padded.numel();
    let mut tape = Tape::inference();
    let xv = tape.constant(padded);
    let wv = tape.constant(weight.clone());
    let h = encode_var(&mut tape, &xv, &wv, cfg)?;
    Ok(AudioFeature {
        values: h.value().clone(),
        original_len: x.len(),
        padded_len,
    })
}

/// Elementwise product `H_x ⊗ M`.
pub fn apply_mask<T: Scalar>(h: &AudioFeature<T>, mask: &Tensor<T>) -> Result<AudioFeature<T>> {
    if h.values.shape() != mask.shape() {
        return Err(Error::shape(
            "apply_mask",
            format!(
                "mask {:?} does not match feature {:?}",
                mask.shape(),
                h.values.shape()
            ),
        ));
    }
    let data = h
        .values
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&a, &b)| a * b)
        .collect();
    Ok(AudioFeature {
        values: Tensor::new(h.values.shape(), data)?,
        ..h.clone()
    })
}

pub fn decode<T: Scalar>(
    h: &AudioFeature<T>,
    weight: &Tensor<T>,
    cfg: &ModelConfig,
    original_len: usize,
) -> Result<AudioSignal> {
    let mut tape = Tape::inference();
    let hv = tape.constant(h.values.clone());
    let wv = tape.constant(weight.clone());
    let y = decode_var(&mut tape, &hv, &wv, cfg, original_len)?;
    Ok(AudioSignal::new(
        y.value().data().iter().map(|v| v.as_f64() as f32).collect(),
        cfg.sample_rate,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn weight(n: usize, l: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 1, l], |i| ((i * 7 % 13) as f32 - 6.0) / 10.0)
    }

    #[test]
    fn four_seconds_give_7999_frames() {
        assert_eq!(frame_count(64000, 16), 7999);
        assert_eq!(frame_count(16, 16), 1);
        assert_eq!(frame_count(3, 16), 1);
        assert_eq!(padded_len(17, 16), 24);
    }

    #[test]
    fn encode_shapes_and_zero_signal() {
        let c = cfg();
        let w = weight(8, 16);
        let h = encode(&AudioSignal::new(vec![0.0; 64000], 16000), &w, &c).unwrap();
        assert_eq!(h.values.shape(), &[8, 7999]);
        assert!(h.values.data().iter().all(|&v| v == 0.0));
        let h = encode(&AudioSignal::new(vec![0.5; 16], 16000), &w, &c).unwrap();
        assert_eq!(h.k(), 1);
    }

    #[test]
    fn empty_signal_is_an_error() {
        let err = encode(&AudioSignal::new(vec![], 16000), &weight(8, 16), &cfg()).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn masks_of_ones_and_zeros() {
        let c = cfg();
        let x = AudioSignal::new((0..100).map(|i| (i as f32 * 0.3).sin()).collect(), 16000);
        let h = encode(&x, &weight(8, 16), &c).unwrap();
        let ones = apply_mask(&h, &Tensor::ones(h.values.shape())).unwrap();
        assert_eq!(ones, h);
        let zeros = apply_mask(&h, &Tensor::zeros(h.values.shape())).unwrap();
        assert!(zeros.values.data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&h, &Tensor::ones(&[8, 1])).is_err());
    }

    #[test]
    fn decode_restores_length() {
        let c = cfg();
        let w = weight(8, 16);
        for t in [1, 15, 16, 17, 100, 1234] {
            let x = AudioSignal::new(vec![0.1; t], 16000);
            let h = encode(&x, &w, &c).unwrap();
            assert_eq!(decode(&h, &w, &c, t).unwrap().len(), t);
        }
    }

    #[test]
    fn decode_rejects_too_long_request() {
        let c = cfg();
        let w = weight(8, 16);
        let h = encode(&AudioSignal::new(vec![0.1; 16], 16000), &w, &c).unwrap();
        assert_eq!(decode(&h, &w, &c, 16).unwrap().len(), 16);
        assert!(decode(&h, &w, &c, 17).is_err());
    }
}
