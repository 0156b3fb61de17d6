//! Command-line surface and the flag > file > default layering.

use std::path::{Path, PathBuf};

use avsep_core::datagen::{CorpusOptions, Split};
use avsep_core::training::{CueMode, TrainOptions};
use avsep_core::{Error, MaskActivation, ModelConfig, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Parser, Debug)]
#[command(
    name = "avsep",
    version,
    about = "Audio-visual target speaker extraction on synthetic desk-scale data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-speaker corpus with cue files and a manifest
    Datagen(DatagenArgs),
    /// Train a model on a generated corpus
    Train(TrainArgs),
    /// Extract the cued speaker from a mixture WAV
    Extract(ExtractArgs),
    /// Score estimates: a checkpoint on a corpus split, or one WAV pair
    Eval(EvalArgs),
    /// Train and score the cross-attention × 2D-position grid
    Ablate(AblateArgs),
    /// Run the built-in invariant, oracle and gradient suites
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size architecture (N=256, C=160, 8 intra + 7 inter blocks)
    #[default]
    Default,
    /// N=32, C=16, one block per stage, cue rate 250 Hz
    Tiny,
}

/// Architecture keys. A flag beats the config file, which beats the preset.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    /// TOML file using the ModelConfig key names, plus an optional [train] table
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Baseline the file and flags are layered on
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Encoder kernel size
    #[arg(long = "L", value_name = "INT")]
    pub l: Option<usize>,
    /// Chunk length in encoder frames
    #[arg(long = "C", value_name = "INT")]
    pub c: Option<usize>,
    /// Feature dimension
    #[arg(long = "N", value_name = "INT")]
    pub n: Option<usize>,
    #[arg(long = "N-intra", value_name = "INT")]
    pub n_intra: Option<usize>,
    #[arg(long = "N-inter", value_name = "INT")]
    pub n_inter: Option<usize>,
    #[arg(long = "N-head", value_name = "INT")]
    pub n_head: Option<usize>,
    /// Macro repeats of intra → cross → inter
    #[arg(long = "R", value_name = "INT")]
    pub r: Option<usize>,
    #[arg(long, value_name = "INT")]
    pub ffn_mult: Option<usize>,
    #[arg(long, value_name = "sigmoid|relu")]
    pub mask_activation: Option<String>,
    #[arg(long, value_name = "BOOL")]
    pub use_cross_attention: Option<bool>,
    #[arg(long = "use-2d-pos", value_name = "BOOL")]
    pub use_2d_pos: Option<bool>,
    #[arg(long, value_name = "HZ")]
    pub sample_rate: Option<u32>,
    #[arg(long, value_name = "HZ")]
    pub cue_frame_rate: Option<u32>,
    #[arg(long, value_name = "BOOL")]
    pub encoder_relu: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub input_norm: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub pos_every_repeat: Option<bool>,
    #[arg(long, value_name = "P")]
    pub dropout: Option<f64>,
    #[arg(long, value_name = "EPS")]
    pub layernorm_eps: Option<f64>,
}

/// Optimizer and schedule keys; the file equivalents live under `[train]`.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "INT")]
    pub max_epochs: Option<usize>,
    /// Optimizer step budget (0 = unlimited)
    #[arg(long, value_name = "INT")]
    pub max_steps: Option<usize>,
    /// Seeds model initialization, shuffling and dropout
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    #[arg(long, value_enum, value_name = "MODE")]
    pub cue_mode: Option<CueArg>,
    /// Global gradient-norm ceiling (≤ 0 disables)
    #[arg(long, value_name = "NORM")]
    pub clip_norm: Option<f64>,
    /// Examples averaged per optimizer step
    #[arg(long, value_name = "INT")]
    pub accumulate: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CueArg {
    /// Per-item cue file
    Envelope,
    /// Target encoded by the model's own encoder
    Oracle,
    /// All-zero cue
    Constant,
}

impl From<CueArg> for CueMode {
    fn from(c: CueArg) -> Self {
        match c {
            CueArg::Envelope => CueMode::Envelope,
            CueArg::Oracle => CueMode::Oracle,
            CueArg::Constant => CueMode::Constant,
        }
    }
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = CorpusOptions::default().n_train)]
    pub n_train: usize,
    #[arg(long, default_value_t = CorpusOptions::default().n_val)]
    pub n_val: usize,
    #[arg(long, default_value_t = CorpusOptions::default().n_test)]
    pub n_test: usize,
    /// Clip length in seconds
    #[arg(long, default_value_t = CorpusOptions::default().clip_seconds)]
    pub clip_seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Size of the speaker pool shared by train and val
    #[arg(long, default_value_t = CorpusOptions::default().train_speakers)]
    pub train_speakers: u32,
    /// Size of the disjoint test speaker pool
    #[arg(long, default_value_t = CorpusOptions::default().test_speakers)]
    pub test_speakers: u32,
    #[command(flatten)]
    pub model: ModelFlags,
}

impl DatagenArgs {
    pub fn corpus(&self) -> CorpusOptions {
        CorpusOptions {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            clip_seconds: self.clip_seconds,
            seed: self.seed,
            train_speakers: self.train_speakers,
            test_speakers: self.test_speakers,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory (or its manifest file)
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Receives metrics.tsv, best.ckpt, state.ckpt and config.toml
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from OUT/state.ckpt. Architecture flags are ignored; step
    /// and epoch limits may be raised.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DebugMask {
    /// Use the mask predicted by the separator
    None,
    /// Mask of ones: the output is decode(encode(mixture))
    Unit,
    /// Ideal output: the estimate is the --reference signal itself
    Oracle,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "WAV")]
    pub mixture: PathBuf,
    /// Cue file; required unless --debug-mask oracle
    #[arg(long, value_name = "FILE")]
    pub cue: Option<PathBuf>,
    /// Output WAV
    #[arg(long, value_name = "WAV")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DebugMask::None)]
    pub debug_mask: DebugMask,
    /// Clean reference for --debug-mask oracle
    #[arg(long, value_name = "WAV")]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model to score on --data
    #[arg(
        long,
        value_name = "FILE",
        requires = "data",
        conflicts_with = "estimate"
    )]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = CueArg::Envelope)]
    pub cue_mode: CueArg,
    /// Single estimate WAV to score against --reference
    #[arg(long, value_name = "WAV", requires = "reference")]
    pub estimate: Option<PathBuf>,
    #[arg(long, value_name = "WAV")]
    pub reference: Option<PathBuf>,
    /// Mixture WAV, enabling SI-SDRi for a single pair
    #[arg(long, value_name = "WAV")]
    pub mixture: Option<PathBuf>,
    /// Sample rate expected of single-pair WAVs
    #[arg(long, default_value_t = 16000)]
    pub sample_rate: u32,
    /// Also write the per-item scores as a TSV record file
    #[arg(long, value_name = "FILE")]
    pub record: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// One sub-directory per cell plus ablation.tsv
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Split the trained cells are scored on
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Also print every individual check
    #[arg(long)]
    pub verbose: bool,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{what}: {e}"))
}

/// Serialize `base`, overlay `file` then `flags`, and deserialize again.
/// Unknown keys are rejected by the target type.
fn layer<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<Table>,
    flags: Vec<(&str, Value)>,
    what: &str,
) -> Result<T> {
    let mut table = Table::try_from(base).map_err(|e| config_err(what, e))?;
    table.extend(file.unwrap_or_default());
    table.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
    Value::Table(table)
        .try_into()
        .map_err(|e| config_err(what, e))
}

/// Split a config file into its model keys and the optional `[train]` table.
fn read_config_file(path: &Path) -> Result<(Table, Option<Table>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: Table = text
        .parse()
        .map_err(|e| config_err(&format!("config {}", path.display()), e))?;
    let train = match table.remove("train") {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => return Err(Error::Config("[train] must be a table".into())),
    };
    Ok((table, train))
}

fn push<V: Into<Value>>(out: &mut Vec<(&'static str, Value)>, key: &'static str, v: Option<V>) {
    if let Some(v) = v {
        out.push((key, v.into()));
    }
}

fn int(v: Option<usize>) -> Option<i64> {
    v.map(|x| x as i64)
}

impl ModelFlags {
    fn overrides(&self) -> Result<Vec<(&'static str, Value)>> {
        let mut o = Vec::new();
        push(&mut o, "L", int(self.l));
        push(&mut o, "C", int(self.c));
        push(&mut o, "N", int(self.n));
        push(&mut o, "N_intra", int(self.n_intra));
        push(&mut o, "N_inter", int(self.n_inter));
        push(&mut o, "N_head", int(self.n_head));
        push(&mut o, "R", int(self.r));
        push(&mut o, "ffn_mult", int(self.ffn_mult));
        if let Some(a) = &self.mask_activation {
            a.parse::<MaskActivation>()?;
            o.push(("mask_activation", Value::from(a.as_str())));
        }
        push(&mut o, "use_cross_attention", self.use_cross_attention);
        push(&mut o, "use_2d_pos", self.use_2d_pos);
        push(&mut o, "sample_rate", self.sample_rate.map(i64::from));
        push(&mut o, "cue_frame_rate", self.cue_frame_rate.map(i64::from));
        push(&mut o, "encoder_relu", self.encoder_relu);
        push(&mut o, "input_norm", self.input_norm);
        push(&mut o, "pos_every_repeat", self.pos_every_repeat);
        push(&mut o, "dropout", self.dropout);
        push(&mut o, "layernorm_eps", self.layernorm_eps);
        Ok(o)
    }

    fn base(&self) -> ModelConfig {
        match self.preset {
            Preset::Default => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }

    /// Resolve the architecture and, if the file has one, its `[train]` table.
    pub fn resolve(&self) -> Result<(ModelConfig, Option<Table>)> {
        let (file, train) = match &self.config {
            Some(p) => {
                let (m, t) = read_config_file(p)?;
                (Some(m), t)
            }
            None => (None, None),
        };
        let cfg: ModelConfig = layer(&self.base(), file, self.overrides()?, "model config")?;
        cfg.validate()?;
        Ok((cfg, train))
    }
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(&'static str, Value)> {
        let mut o = Vec::new();
        push(&mut o, "lr", self.lr);
        push(&mut o, "max_epochs", int(self.max_epochs));
        push(&mut o, "max_steps", int(self.max_steps));
        if let Some(c) = self.cue_mode {
            o.push(("cue_mode", Value::from(CueMode::from(c).to_string())));
        }
        push(&mut o, "clip_norm", self.clip_norm);
        push(&mut o, "accumulate", int(self.accumulate));
        o
    }

    pub fn resolve(&self, file: Option<Table>) -> Result<TrainOptions> {
        let mut opts: TrainOptions = layer(
            &TrainOptions::default(),
            file,
            self.overrides(),
            "train options",
        )?;
        // seeds may exceed the TOML integer range, so they bypass the table
        if let Some(s) = self.seed {
            opts.seed = s;
        }
        opts.validate()?;
        Ok(opts)
    }
}
