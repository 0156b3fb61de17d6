//! Half-overlapping chunking and its overlap-add reconstruction.
//!
//! Padding policy: `C/2` zero columns in front, then zeros at the back until
//! at least `C/2` columns follow the signal and `(K' − C)` is a multiple of
//! `C/2`. Hence `I = ⌈K / (C/2)⌉ + 1` and every source column is covered by
//! exactly two chunks. With `L = 16`, `C = 160` at 16 kHz one chunk hop spans
//! 640 samples, i.e. 25 chunks per second.
//!
//! Internally the separator works chunk-major (`I×C×N`); the value-level
//! [`ChunkedFeature`] uses the `N×C×I` layout.

use crate::error::{Error, Result};
use crate::frontend::AudioFeature;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::visualcue::VisualFeature;

/// Geometry of chunking `K` columns with chunk length `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    pub source_k: usize,
    pub chunk: usize,
    pub pad_front: usize,
    pub pad_back: usize,
    pub n_chunks: usize,
}

impl ChunkLayout {
    pub fn new(k: usize, chunk: usize) -> Result<Self> {
        if chunk < 2 || !chunk.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "chunk length must be even and ≥ 2, got {chunk}"
            )));
        }
        if k == 0 {
            return Err(Error::Empty("feature to chunk (K = 0)"));
        }
        let hop = chunk / 2;
        let steps = k.div_ceil(hop);
        let padded = chunk + steps * hop;
        Ok(Self {
            source_k: k,
            chunk,
            pad_front: hop,
            pad_back: padded - k - hop,
            n_chunks: steps + 1,
        })
    }

    pub fn hop(&self) -> usize {
        self.chunk / 2
    }

    pub fn padded_len(&self) -> usize {
        self.pad_front + self.source_k + self.pad_back
    }

    /// Number of chunks containing each source column.
    pub fn coverage(&self) -> Vec<usize> {
        let hop = self.hop();
        (0..self.source_k)
            .map(|k| {
                let p = k + self.pad_front;
                let last = (p / hop).min(self.n_chunks - 1);
                let first = (p + 1).saturating_sub(self.chunk).div_ceil(hop);
                last + 1 - first
            })
            .collect()
    }

    fn check(&self, n_chunks: usize, chunk: usize) -> Result<()> {
        let consistent = n_chunks == self.n_chunks
            && n_chunks >= 1
            && chunk == self.chunk
            && self.padded_len() == self.chunk + (self.n_chunks - 1) * self.hop();
        if consistent {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "chunk metadata {self:?} inconsistent with {n_chunks} chunks of length {chunk}"
            )))
        }
    }
}

/// Tape-level chunking: `K×N` → `I×C×N`.
pub fn chunk_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    layout: &ChunkLayout,
) -> Result<Var<T>> {
    let (k, n) = (x.shape()[0], x.shape()[1]);
    if k != layout.source_k {
        return Err(Error::shape(
            "chunk",
            format!(
                "feature has {k} columns, layout expects {}",
                layout.source_k
            ),
        ));
    }
    let hop = layout.hop();
    let front = tape.constant(Tensor::zeros(&[layout.pad_front, n]));
    let back = tape.constant(Tensor::zeros(&[layout.pad_back, n]));
    let padded = tape.concat(&[&front, x, &back], 0)?;
    let halves = tape.reshape(&padded, &[layout.n_chunks + 1, hop, n])?;
    let first = tape.slice(&halves, 0, 0, layout.n_chunks)?;
    let second = tape.slice(&halves, 0, 1, layout.n_chunks)?;
    tape.concat(&[&first, &second], 1)
}

/// Tape-level overlap-add: `I×C×N` → `K×N` (raw sum, padding stripped).
pub fn overlap_add_var<T: Scalar>(
    tape: &mut Tape<T>,
    y: &Var<T>,
    layout: &ChunkLayout,
) -> Result<Var<T>> {
    if y.shape().len() != 3 {
        return Err(Error::shape(
            "overlap_add",
            format!("expected I×C×N, got {:?}", y.shape()),
        ));
    }
    layout.check(y.shape()[0], y.shape()[1])?;
    let n = y.shape()[2];
    let hop = layout.hop();
    let first = tape.slice(y, 1, 0, hop)?;
    let second = tape.slice(y, 1, hop, hop)?;
    let zero = tape.constant(Tensor::zeros(&[1, hop, n]));
    let first = tape.concat(&[&first, &zero], 0)?;
    let second = tape.concat(&[&zero, &second], 0)?;
    let summed = tape.add(&first, &second)?;
    let flat = tape.reshape(&summed, &[layout.padded_len(), n])?;
    tape.slice(&flat, 0, layout.pad_front, layout.source_k)
}

/// Chunked feature `N×C×I` with the padding needed to invert it.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedFeature<T = f32> {
    pub values: Tensor<T>,
    pub pad_front: usize,
    pub pad_back: usize,
    pub source_k: usize,
}

impl<T: Scalar> ChunkedFeature<T> {
    pub fn n_chunks(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn chunk_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn layout(&self) -> ChunkLayout {
        ChunkLayout {
            source_k: self.source_k,
            chunk: self.chunk_len(),
            pad_front: self.pad_front,
            pad_back: self.pad_back,
            n_chunks: self.n_chunks(),
        }
    }
}

pub fn chunk<T: Scalar>(h: &AudioFeature<T>, chunk_len: usize) -> Result<ChunkedFeature<T>> {
    let layout = ChunkLayout::new(h.k(), chunk_len)?;
    let mut tape = Tape::inference();
    let x = tape.constant(h.values.clone());
    let x = tape.permute(&x, &[1, 0])?;
    let y = chunk_var(&mut tape, &x, &layout)?;
    let y = tape.permute(&y, &[2, 1, 0])?;
    Ok(ChunkedFeature {
        values: y.value().clone(),
        pad_front: layout.pad_front,
        pad_back: layout.pad_back,
        source_k: layout.source_k,
    })
}

/// Inverse of [`chunk`] up to coverage: returns `coverage ⊙ h`.
pub fn overlap_add<T: Scalar>(m: &ChunkedFeature<T>) -> Result<Tensor<T>> {
    if m.values.ndim() != 3 {
        return Err(Error::shape(
            "overlap_add",
            format!("expected N×C×I, got {:?}", m.values.shape()),
        ));
    }
    let layout = m.layout();
    let mut tape = Tape::inference();
    let y = tape.constant(m.values.clone());
    let y = tape.permute(&y, &[2, 1, 0])?;
    let x = overlap_add_var(&mut tape, &y, &layout)?;
    let x = tape.permute(&x, &[1, 0])?;
    Ok(x.value().clone())
}

/// Truncate or edge-replicate the cue to exactly `n_chunks` frames.
pub fn align_cue<T: Scalar>(v: &VisualFeature<T>, n_chunks: usize) -> Result<VisualFeature<T>> {
    let len = v.len();
    if len.abs_diff(n_chunks) > 2 {
        return Err(Error::Alignment(format!(
            "cue has {len} frames but audio has {n_chunks} chunks; check L, C and the cue frame rate"
        )));
    }
    if len == 0 {
        return Err(Error::Alignment("cue has no frames".into()));
    }
    if len == n_chunks {
        return Ok(v.clone());
    }
    let n = v.n();
    let src = v.values.data();
    let values = Tensor::from_fn(&[n, n_chunks], |idx| {
        let (row, col) = (idx / n_chunks, idx % n_chunks);
        src[row * len + col.min(len - 1)]
    });
    Ok(VisualFeature {
        values,
        frame_rate: v.frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_layout() {
        let l = ChunkLayout::new(4, 4).unwrap();
        assert_eq!((l.pad_front, l.padded_len(), l.n_chunks), (2, 8, 3));
    }

    #[test]
    fn reference_clip_gives_101_chunks() {
        let l = ChunkLayout::new(7999, 160).unwrap();
        assert_eq!(l.n_chunks, 101);
        assert_eq!(l.pad_front, 80);
        assert_eq!((l.padded_len() - 160) % 80, 0);
    }

    #[test]
    fn layout_errors() {
        assert!(ChunkLayout::new(0, 4).is_err());
        assert!(ChunkLayout::new(10, 3).is_err());
        assert!(ChunkLayout::new(10, 0).is_err());
    }

    #[test]
    fn single_chunk_overlap_add_identity() {
        // `chunk` always pads, so build the unpadded single chunk by hand
        let values = Tensor::<f64>::from_fn(&[3, 4, 1], |i| i as f64);
        let m = ChunkedFeature {
            values: values.clone(),
            pad_front: 0,
            pad_back: 0,
            source_k: 4,
        };
        let back = overlap_add(&m).unwrap();
        assert_eq!(back.data(), values.data());
    }

    #[test]
    fn zero_in_zero_out() {
        let h = AudioFeature {
            values: Tensor::<f32>::zeros(&[3, 9]),
            original_len: 0,
            padded_len: 0,
        };
        let c = chunk(&h, 4).unwrap();
        let back = overlap_add(&ChunkedFeature {
            values: Tensor::zeros(c.values.shape()),
            ..c
        })
        .unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_metadata_rejected() {
        let h = AudioFeature {
            values: Tensor::<f32>::ones(&[2, 9]),
            original_len: 0,
            padded_len: 0,
        };
        let mut c = chunk(&h, 4).unwrap();
        c.pad_back += 1;
        assert!(matches!(overlap_add(&c), Err(Error::Contract(_))));
    }

    fn cue(len: usize) -> VisualFeature<f32> {
        VisualFeature {
            values: Tensor::from_fn(&[2, len], |i| i as f32),
            frame_rate: 25,
        }
    }

    #[test]
    fn align_cue_cases() {
        let v = align_cue(&cue(100), 101).unwrap();
        assert_eq!(v.len(), 101);
        assert_eq!(v.values.at(&[0, 100]), v.values.at(&[0, 99]));
        assert_eq!(v.values.at(&[1, 100]), 199.0);
        assert_eq!(align_cue(&cue(100), 100).unwrap(), cue(100));
        let v = align_cue(&cue(102), 100).unwrap();
        assert_eq!(v.values.at(&[1, 99]), cue(102).values.at(&[1, 99]));
        assert!(matches!(align_cue(&cue(90), 101), Err(Error::Alignment(_))));
    }
}
