//! End-to-end extractor: encode, estimate a mask from the mixture and the
//! cue, apply it, decode.

use std::collections::BTreeMap;

use crate::attention::Dropout;
use crate::chunking::{align_cue, ChunkLayout};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frontend::{decode_var, encode_var, frame_count, pad_signal, AudioSignal};
use crate::params::{Initializer, ParamStore, ParamVars};
use crate::separator::{init_separator, separate_var, separator_param_count, Hooks};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::visualcue::VisualFeature;

pub const ENCODER: &str = "encoder.weight";
pub const DECODER: &str = "decoder.weight";

/// Debug switches for a forward pass. None of them is set in normal use.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Replace the estimated mask by ones, so the output is
    /// `decode(encode(x))`.
    pub force_unit_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

/// Total number of trainable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    2 * cfg.feature_dim * cfg.kernel_size + separator_param_count(cfg)
}

fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let (encoder, decoder) = init_frontend(&mut init, cfg.feature_dim, cfg.kernel_size);
    store.insert(ENCODER, encoder);
    store.insert(DECODER, decoder);
    init_separator(&mut store, &mut init, cfg);
    store
}

/// Encoder with orthonormal columns (`WᵀW = I` when `N ≥ L`) and decoder
/// `W/2`. Every interior sample lies in two frames, so decoding the encoding
/// reproduces the input exactly away from the clip edges.
fn init_frontend<T: Scalar>(init: &mut Initializer, n: usize, l: usize) -> (Tensor<T>, Tensor<T>) {
    let raw = init.uniform::<f64>(&[n, l], 1.0);
    let mut w = raw.into_data();
    // modified Gram-Schmidt over the L columns of the row-major N×L matrix
    for j in 0..l.min(n) {
        for prev in 0..j {
            let dot: f64 = (0..n).map(|r| w[r * l + j] * w[r * l + prev]).sum();
            for r in 0..n {
                w[r * l + j] -= dot * w[r * l + prev];
            }
        }
        let norm = (0..n).map(|r| w[r * l + j].powi(2)).sum::<f64>().sqrt();
        for r in 0..n {
            w[r * l + j] /= norm;
        }
    }
    let enc = Tensor::from_fn(&[n, 1, l], |i| T::from_f64(w[i]));
    let dec = Tensor::from_fn(&[n, 1, l], |i| T::from_f64(0.5 * w[i]));
    (enc, dec)
}

/// Parameter names and shapes required by `cfg`.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    // zero-sized init would be cheaper, but the default config is only a few
    // million scalars
    init_params::<f32>(cfg, 0)
        .iter()
        .map(|(k, v)| (k.to_string(), v.shape().to_vec()))
        .collect()
}

/// Tape-level forward pass over a single waveform.
///
/// `cue` must be `N×I` with `I` equal to the chunk count of the clip.
#[allow(clippy::too_many_arguments)]
pub fn forward_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars<T>,
    mixture: &[T],
    cue: &Tensor<T>,
    cfg: &ModelConfig,
    opts: ForwardOptions,
    dropout: &mut Option<Dropout>,
    hooks: Option<&mut Hooks<T>>,
) -> Result<Var<T>> {
    let x = tape.constant(pad_signal(mixture, cfg.kernel_size)?);
    let hx = encode_var(tape, &x, p.get(ENCODER)?, cfg)?;
    let mask = if opts.force_unit_mask {
        tape.constant(Tensor::ones(hx.shape()))
    } else {
        separate_var(tape, p, &hx, cue, cfg, dropout, hooks)?
    };
    let masked = tape.mul(&hx, &mask)?;
    decode_var(tape, &masked, p.get(DECODER)?, cfg, mixture.len())
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(Self { cfg, params })
    }

    /// Wrap existing parameters after checking names and shapes against
    /// the config.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = expected_shapes(&cfg);
        for (name, t) in params.iter() {
            match expected.get(name) {
                None => return Err(Error::Checkpoint(format!("unknown tensor {name:?}"))),
                Some(s) if s.as_slice() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name:?} has shape {:?}, config requires {s:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(missing) = expected.keys().find(|k| !params.contains(k)) {
            return Err(Error::Checkpoint(format!("missing tensor {missing:?}")));
        }
        Ok(Self { cfg, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Chunk count for a clip of `t` samples.
    pub fn chunk_count(&self, t: usize) -> Result<usize> {
        Ok(ChunkLayout::new(frame_count(t, self.cfg.kernel_size), self.cfg.chunk_size)?.n_chunks)
    }

    pub fn extract(&self, mixture: &AudioSignal, cue: &VisualFeature<f32>) -> Result<AudioSignal> {
        self.extract_with(mixture, cue, ForwardOptions::default(), None)
    }

    /// Extraction with debug options and optional capture of intermediates.
    pub fn extract_with(
        &self,
        mixture: &AudioSignal,
        cue: &VisualFeature<f32>,
        opts: ForwardOptions,
        hooks: Option<&mut Hooks<T>>,
    ) -> Result<AudioSignal> {
        if mixture.sample_rate != self.cfg.sample_rate {
            return Err(Error::Data(format!(
                "mixture is {} Hz, model expects {} Hz",
                mixture.sample_rate, self.cfg.sample_rate
            )));
        }
        if cue.n() != self.cfg.feature_dim {
            return Err(Error::Alignment(format!(
                "cue has dimension {}, model expects {}",
                cue.n(),
                self.cfg.feature_dim
            )));
        }
        let cue = align_cue(&cue.cast::<T>(), self.chunk_count(mixture.len())?)?;
        let samples: Vec<T> = mixture
            .samples
            .iter()
            .map(|&v| T::from_f64(v as f64))
            .collect();
        let mut tape = Tape::inference();
        let vars = self.params.bind(&mut tape);
        let y = forward_var(
            &mut tape,
            &vars,
            &samples,
            &cue.values,
            &self.cfg,
            opts,
            &mut None,
            hooks,
        )?;
        Ok(AudioSignal::new(
            y.value().data().iter().map(|v| v.as_f64() as f32).collect(),
            self.cfg.sample_rate,
        ))
    }
}
