//! Synthetic visual cue streams standing in for lip embeddings.
//!
//! Every generator looks only at the clean target source, never at the
//! mixture. [`envelope_cue`] is the realistic, weak cue: per video frame it
//! measures log-energy plus eight triangular band energies and projects the
//! nine numbers to `N` dimensions with a fixed seeded matrix.
//! [`oracle_cue`] is an upper bound: the encoded target averaged over each
//! chunk span.

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::chunking::{chunk, ChunkLayout};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frontend::{encode, frame_count, AudioSignal};
use crate::tensor::{Scalar, Tensor};

/// Number of triangular bands in the envelope cue.
pub const N_BANDS: usize = 8;
const FRAME_FEATURES: usize = N_BANDS + 1;
const ENERGY_FLOOR: f64 = 1e-10;
const FEATURE_SCALE: f64 = 0.1;
/// Projection seed used by the corpus builder and the CLI.
pub const DEFAULT_PROJECTION_SEED: u64 = 0x00C0_FFEE;

/// Cue sequence `N×I` at `frame_rate` frames per second.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeature<T = f32> {
    pub values: Tensor<T>,
    pub frame_rate: u32,
}

impl<T: Scalar> VisualFeature<T> {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> VisualFeature<U> {
        VisualFeature {
            values: self.values.cast(),
            frame_rate: self.frame_rate,
        }
    }
}

/// Number of cue frames for `t` samples: `⌊t / sample_rate · frame_rate⌋`.
pub fn cue_frames(t: usize, sample_rate: u32, frame_rate: u32) -> usize {
    (t as u64 * frame_rate as u64 / sample_rate as u64) as usize
}

/// Triangular band weights over `n_bins` spectrum bins, bands evenly spaced
/// from DC to Nyquist with half-overlapping supports.
fn band_weights(n_bins: usize) -> Vec<[f64; N_BANDS]> {
    let top = (n_bins.max(2) - 1) as f64;
    let spacing = top / (N_BANDS + 1) as f64;
    (0..n_bins)
        .map(|b| {
            let f = b as f64;
            let mut w = [0.0; N_BANDS];
            for (j, wj) in w.iter_mut().enumerate() {
                let center = spacing * (j + 1) as f64;
                *wj = (1.0 - (f - center).abs() / spacing).max(0.0);
            }
            w
        })
        .collect()
}

fn projection(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (3.0 / FRAME_FEATURES as f64).sqrt();
    (0..n * FRAME_FEATURES)
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

pub fn envelope_cue(
    target: &AudioSignal,
    n: usize,
    frame_rate: u32,
    seed: u64,
) -> Result<VisualFeature<f32>> {
    if frame_rate == 0 || !target.sample_rate.is_multiple_of(frame_rate) {
        return Err(Error::Config(format!(
            "sample rate {} is not a multiple of the cue frame rate {frame_rate}",
            target.sample_rate
        )));
    }
    let frame_len = (target.sample_rate / frame_rate) as usize;
    let frames = cue_frames(target.len(), target.sample_rate, frame_rate);
    let n_bins = frame_len / 2 + 1;
    let bands = band_weights(n_bins);
    let proj = projection(n, seed);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    let mut out = vec![0f32; n * frames];
    for f in 0..frames {
        let seg = &target.samples[f * frame_len..(f + 1) * frame_len];
        let energy = seg.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / frame_len as f64;
        for (b, &v) in buf.iter_mut().zip(seg) {
            *b = Complex::new(v as f64, 0.0);
        }
        fft.process(&mut buf);
        let mut feat = [0.0; FRAME_FEATURES];
        feat[0] = (energy + ENERGY_FLOOR).ln();
        let norm = 1.0 / (frame_len as f64 * frame_len as f64);
        let mut band_e = [0.0; N_BANDS];
        for (bin, w) in bands.iter().enumerate() {
            let p = buf[bin].norm_sqr() * norm;
            for j in 0..N_BANDS {
                band_e[j] += w[j] * p;
            }
        }
        for j in 0..N_BANDS {
            feat[j + 1] = (band_e[j] + ENERGY_FLOOR).ln();
        }
        for row in 0..n {
            let p = &proj[row * FRAME_FEATURES..(row + 1) * FRAME_FEATURES];
            let v: f64 = p.iter().zip(&feat).map(|(a, b)| a * b).sum();
            out[row * frames + f] = (v * FEATURE_SCALE) as f32;
        }
    }
    Ok(VisualFeature {
        values: Tensor::new(&[n, frames], out)?,
        frame_rate,
    })
}

/// Magnitude of the encoded target averaged over each chunk span; one frame
/// per chunk, scaled to unit RMS. Signed responses of a linear encoder would
/// cancel in the mean.
pub fn oracle_cue<T: Scalar>(
    target: &AudioSignal,
    encoder_weight: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<VisualFeature<T>> {
    let h = encode(target, encoder_weight, cfg)?;
    let chunked = chunk(&h, cfg.chunk_size)?;
    let (n, c, i) = (
        chunked.values.shape()[0],
        chunked.values.shape()[1],
        chunked.values.shape()[2],
    );
    let inv = T::from_f64(1.0 / c as f64);
    let data = chunked.values.data();
    let values = Tensor::from_fn(&[n, i], |idx| {
        let (row, col) = (idx / i, idx % i);
        let mut acc = T::ZERO;
        for ci in 0..c {
            acc += data[(row * c + ci) * i + col].abs();
        }
        acc * inv
    });
    // unit RMS so the cue is on the scale of the positional rows it is added to
    let rms = (values
        .data()
        .iter()
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        / values.numel() as f64)
        .sqrt();
    let values = if rms > 0.0 {
        let g = T::from_f64(1.0 / rms);
        values.map(|v| v * g)
    } else {
        values
    };
    Ok(VisualFeature {
        values,
        frame_rate: cfg.cue_frame_rate,
    })
}

/// All-zero cue carrying no information about the target.
pub fn constant_cue(n: usize, frames: usize, frame_rate: u32) -> VisualFeature<f32> {
    VisualFeature {
        values: Tensor::zeros(&[n, frames]),
        frame_rate,
    }
}

/// Chunk count the model will see for a clip of `t` samples.
pub fn chunk_count(t: usize, cfg: &ModelConfig) -> Result<usize> {
    Ok(ChunkLayout::new(frame_count(t, cfg.kernel_size), cfg.chunk_size)?.n_chunks)
}

/// Write a cue as `N: u32`, `I: u32`, then `N·I` row-major `f32`, all
/// little-endian.
pub fn write_cue(path: &Path, cue: &VisualFeature<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * cue.values.numel());
    bytes.extend_from_slice(&(cue.n() as u32).to_le_bytes());
    bytes.extend_from_slice(&(cue.len() as u32).to_le_bytes());
    for v in cue.values.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cue(path: &Path, frame_rate: u32) -> Result<VisualFeature<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!(
            "{}: cue header truncated",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let i = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * n * i {
        return Err(Error::Data(format!(
            "{}: cue header says {n}×{i} but body has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite cue value",
            path.display()
        )));
    }
    Ok(VisualFeature {
        values: Tensor::new(&[n, i], data)?,
        frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(t: usize) -> AudioSignal {
        AudioSignal::new(
            (0..t)
                .map(|i| 0.3 * (i as f32 * 0.05).sin() * (i as f32 * 0.0007).sin())
                .collect(),
            16000,
        )
    }

    #[test]
    fn four_seconds_give_100_frames() {
        let v = envelope_cue(&tone(64000), 16, 25, 7).unwrap();
        assert_eq!(v.values.shape(), &[16, 100]);
        assert_eq!(cue_frames(64123, 16000, 25), 100);
    }

    #[test]
    fn silent_target_gives_identical_frames() {
        let v = envelope_cue(&AudioSignal::new(vec![0.0; 6400], 16000), 8, 25, 1).unwrap();
        for row in 0..8 {
            let first = v.values.at(&[row, 0]);
            for f in 1..v.len() {
                assert_eq!(v.values.at(&[row, f]), first);
            }
        }
    }

    #[test]
    fn deterministic_for_same_seed() {
        let x = tone(16000);
        assert_eq!(
            envelope_cue(&x, 8, 25, 3).unwrap(),
            envelope_cue(&x, 8, 25, 3).unwrap()
        );
        assert_ne!(
            envelope_cue(&x, 8, 25, 3).unwrap(),
            envelope_cue(&x, 8, 25, 4).unwrap()
        );
    }

    #[test]
    fn bands_cover_interior_spectrum() {
        let w = band_weights(321);
        let total: f64 = w[160].iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(w[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_cue_matches_chunk_count_and_zero_target() {
        let cfg = ModelConfig {
            feature_dim: 8,
            ..ModelConfig::tiny()
        };
        let w = Tensor::<f32>::from_fn(&[8, 1, 16], |i| (i as f32 * 0.17).sin());
        let x = tone(4000);
        let v = oracle_cue(&x, &w, &cfg).unwrap();
        assert_eq!(v.len(), chunk_count(4000, &cfg).unwrap());
        let z = oracle_cue(&AudioSignal::new(vec![0.0; 4000], 16000), &w, &cfg).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_cue_of_constant_feature_is_constant_inside() {
        // constant input: every full window encodes identically; interior
        // chunks (away from zero padding) therefore average to the same value
        let cfg = ModelConfig {
            feature_dim: 8,
            ..ModelConfig::tiny()
        };
        let w = Tensor::<f64>::from_fn(&[8, 1, 16], |i| (i as f64 * 0.3).cos());
        let v = oracle_cue(&AudioSignal::new(vec![0.25; 1600], 16000), &w, &cfg).unwrap();
        for row in 0..8 {
            for f in 2..v.len() - 2 {
                assert!((v.values.at(&[row, f]) - v.values.at(&[row, 1])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cue_file_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cue");
        let v = envelope_cue(&tone(3200), 4, 25, 9).unwrap();
        write_cue(&path, &v).unwrap();
        assert_eq!(read_cue(&path, 25).unwrap(), v);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_cue(&path, 25), Err(Error::Data(_))));
    }
}
