//! Architecture hyperparameters.
//!
//! Serialized with the symbol names used throughout the documentation
//! (`L`, `C`, `N`, `N_intra`, ...). The same keys are accepted from a TOML
//! config file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    Sigmoid,
    Relu,
}

impl std::str::FromStr for MaskActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!(
                "mask_activation must be sigmoid or relu, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder kernel size; the encoder hop is `L/2`.
    #[serde(rename = "L")]
    pub kernel_size: usize,
    /// Chunk length in encoder frames; the chunk hop is `C/2`.
    #[serde(rename = "C")]
    pub chunk_size: usize,
    /// Feature dimension shared by audio and visual streams.
    #[serde(rename = "N")]
    pub feature_dim: usize,
    #[serde(rename = "N_intra")]
    pub n_intra: usize,
    #[serde(rename = "N_inter")]
    pub n_inter: usize,
    #[serde(rename = "N_head")]
    pub n_head: usize,
    /// Number of intra → cross → inter macro repeats.
    #[serde(rename = "R")]
    pub repeats: usize,
    pub ffn_mult: usize,
    pub mask_activation: MaskActivation,
    pub use_cross_attention: bool,
    pub use_2d_pos: bool,
    pub sample_rate: u32,
    pub cue_frame_rate: u32,
    pub encoder_relu: bool,
    pub input_norm: bool,
    /// Re-add positional encodings at the start of every macro repeat.
    pub pos_every_repeat: bool,
    pub dropout: f64,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel_size: 16,
            chunk_size: 160,
            feature_dim: 256,
            n_intra: 8,
            n_inter: 7,
            n_head: 8,
            repeats: 1,
            ffn_mult: 4,
            mask_activation: MaskActivation::Sigmoid,
            use_cross_attention: true,
            use_2d_pos: true,
            sample_rate: 16000,
            cue_frame_rate: 25,
            encoder_relu: false,
            input_norm: true,
            pos_every_repeat: false,
            dropout: 0.0,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the smoke and functional tests: N=32,
    /// C=16, one block per stage, one head, cue rate 250 Hz.
    pub fn tiny() -> Self {
        Self {
            kernel_size: 16,
            chunk_size: 16,
            feature_dim: 32,
            n_intra: 1,
            n_inter: 1,
            n_head: 1,
            cue_frame_rate: 250,
            ..Self::default()
        }
    }

    pub fn encoder_hop(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn chunk_hop(&self) -> usize {
        self.chunk_size / 2
    }

    /// Waveform samples per chunk hop.
    pub fn samples_per_chunk(&self) -> usize {
        self.encoder_hop() * self.chunk_hop()
    }

    /// Chunks per second of audio.
    pub fn chunk_rate(&self) -> f64 {
        self.sample_rate as f64 / self.samples_per_chunk() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.kernel_size < 2 || !self.kernel_size.is_multiple_of(2) {
            return fail(format!("L must be even and ≥ 2, got {}", self.kernel_size));
        }
        if self.chunk_size < 2 || !self.chunk_size.is_multiple_of(2) {
            return fail(format!("C must be even and ≥ 2, got {}", self.chunk_size));
        }
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(4) {
            return fail(format!(
                "N must be a positive multiple of 4, got {}",
                self.feature_dim
            ));
        }
        if self.n_head == 0 || !self.feature_dim.is_multiple_of(self.n_head) {
            return fail(format!(
                "N_head {} must divide N {}",
                self.n_head, self.feature_dim
            ));
        }
        if self.repeats == 0 {
            return fail("R must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        if self.sample_rate == 0 || self.cue_frame_rate == 0 {
            return fail("sample_rate and cue_frame_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.layernorm_eps.is_nan() || self.layernorm_eps <= 0.0 {
            return fail("layernorm_eps must be positive".into());
        }
        let lhs = self.samples_per_chunk() as u64 * self.cue_frame_rate as u64;
        if lhs != self.sample_rate as u64 {
            return fail(format!(
                "alignment identity violated: (L/2)·(C/2)·cue_frame_rate = {}·{}·{} = {lhs} ≠ sample_rate {}",
                self.encoder_hop(),
                self.chunk_hop(),
                self.cue_frame_rate,
                self.sample_rate
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Short stable identifier of the config contents.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}
