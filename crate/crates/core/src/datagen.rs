//! Synthetic two-talker corpus.
//!
//! A "speaker" is a parameterized source model: a harmonic pulse train with
//! a speaker-specific pitch band, syllable rate, spectral tilt and formant
//! region, gated on and off like speech and mixed with a little breath
//! noise. Target and interference are drawn from the same speaker pool, so
//! without the cue nothing tells the model which one to keep.
//!
//! Item seeds are derived from `(corpus seed, split, index)`, so items can be
//! generated in any order or in parallel with identical results.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::frontend::AudioSignal;
use crate::signal::{mix, MixtureSpec};
use crate::visualcue::{envelope_cue, read_cue, write_cue, VisualFeature, DEFAULT_PROJECTION_SEED};
use crate::wav::{quantize_signal, read_wav, write_wav};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "# split\titem\ttarget\tinterference\tmixture\tcue\tsnr_db\tseed";

/// Accepted clip lengths in seconds.
pub const CLIP_RANGE: (f64, f64) = (0.5, 6.0);
pub const SNR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusOptions {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub clip_seconds: f64,
    pub seed: u64,
    /// Speakers reserved for train and validation items.
    pub train_speakers: u32,
    /// Speakers reserved for test items, disjoint from the train pool.
    pub test_speakers: u32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_val: 8,
            n_test: 16,
            clip_seconds: 2.0,
            seed: 0,
            train_speakers: 12,
            test_speakers: 6,
        }
    }
}

impl CorpusOptions {
    pub fn validate(&self) -> Result<()> {
        if !(CLIP_RANGE.0..=CLIP_RANGE.1).contains(&self.clip_seconds) {
            return Err(Error::Config(format!(
                "clip_seconds must be within [{}, {}], got {}",
                CLIP_RANGE.0, CLIP_RANGE.1, self.clip_seconds
            )));
        }
        if self.train_speakers < 2 || self.test_speakers < 2 {
            return Err(Error::Config(
                "each speaker pool needs at least two speakers".into(),
            ));
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Speaker ids available to `split`. Validation shares the train pool.
    pub fn speaker_pool(&self, split: Split) -> std::ops::Range<u32> {
        match split {
            Split::Train | Split::Val => 0..self.train_speakers,
            Split::Test => 1000..1000 + self.test_speakers,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn derive_seed(parent: u64, salt: u64) -> u64 {
    let mut z = parent ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parameters of one synthetic talker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub id: u32,
    pub f0_low: f64,
    pub f0_high: f64,
    /// Syllables per second.
    pub syllable_rate: f64,
    /// In-band slope: harmonic amplitude scales as `(f/formant)^(-tilt)`.
    pub tilt: f64,
    pub formant_hz: f64,
    pub formant_width_hz: f64,
    /// Breath-noise RMS relative to the voiced part.
    pub breath: f64,
}

impl SpeakerModel {
    pub fn new(id: u32, corpus_seed: u64) -> Self {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, 0x5_0000_0000 + id as u64));
        let f0_low = rng.random_range(85.0..240.0);
        Self {
            id,
            f0_low,
            f0_high: f0_low * rng.random_range(1.15..1.4),
            syllable_rate: rng.random_range(2.5..7.0),
            tilt: rng.random_range(0.6..1.8),
            formant_hz: rng.random_range(400.0..5000.0),
            formant_width_hz: rng.random_range(250.0..800.0),
            breath: rng.random_range(0.0..0.05),
        }
    }

    /// Render `len` samples at `sample_rate`, normalized to RMS 0.1.
    pub fn synthesize(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let sr = sample_rate as f64;
        let nyquist = 0.45 * sr;
        let gate = syllable_gate(len, sr, self.syllable_rate, rng);

        // pitch contour: random walk every 10 ms, linearly interpolated
        let step = (sr * 0.01) as usize;
        let knots = len / step + 2;
        let mut f0 = rng.random_range(self.f0_low..self.f0_high);
        let mut contour = Vec::with_capacity(knots);
        for _ in 0..knots {
            contour.push(f0);
            f0 = (f0 * (1.0 + rng.random_range(-0.02..0.02))).clamp(self.f0_low, self.f0_high);
        }
        let n_harm = (nyquist / self.f0_low) as usize;
        let mut phase = 0.0f64;
        let mut voiced = Vec::with_capacity(len);
        let mut noise = Vec::with_capacity(len);
        for t in 0..len {
            let (k, frac) = (t / step, (t % step) as f64 / step as f64);
            let f = contour[k] * (1.0 - frac) + contour[k + 1] * frac;
            phase = (phase + f / sr).fract();
            let mut v = 0.0;
            for h in 1..=n_harm {
                let fh = f * h as f64;
                if fh > nyquist {
                    break;
                }
                // band-limited around the formant, tilted within the band
                let d = (fh - self.formant_hz) / self.formant_width_hz;
                if d.abs() > 3.0 {
                    continue;
                }
                let a = (-d * d).exp() * (fh / self.formant_hz).powf(-self.tilt);
                v += a * (std::f64::consts::TAU * phase * h as f64).sin();
            }
            voiced.push(v * gate[t]);
            noise.push(rng.random_range(-1.0..1.0) * gate[t]);
        }
        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
        let (rv, rn) = (rms(&voiced), rms(&noise));
        let gn = if rn > 0.0 { self.breath * rv / rn } else { 0.0 };
        let mixed: Vec<f64> = voiced.iter().zip(&noise).map(|(v, n)| v + gn * n).collect();
        let total = rms(&mixed);
        let g = if total > 0.0 { 0.1 / total } else { 0.0 };
        mixed.into_iter().map(|v| (v * g) as f32).collect()
    }
}

/// On/off envelope with raised-cosine 10 ms ramps. Segments last about one
/// syllable; the first segment is always voiced so no clip is silent.
fn syllable_gate(len: usize, sr: f64, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ramp = (0.01 * sr) as usize;
    let mut gate = vec![0.0; len];
    let mut pos = 0usize;
    let mut first = true;
    while pos < len {
        let dur = ((rng.random_range(0.5..1.5) / rate) * sr) as usize;
        let dur = dur.max(2 * ramp + 1);
        let on = first || rng.random::<f64>() < 0.5;
        first = false;
        if on {
            let end = (pos + dur).min(len);
            for (j, g) in gate[pos..end].iter_mut().enumerate() {
                let edge = j.min(dur - 1 - j);
                *g = if edge >= ramp {
                    1.0
                } else {
                    0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
                };
            }
        }
        pos += dur;
    }
    gate
}

/// One generated item held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub mixture: AudioSignal,
    /// Target as it appears inside the mixture.
    pub target: AudioSignal,
    pub cue: VisualFeature<f32>,
    pub snr_db: f64,
}

/// Raw ingredients of one item, before files are written.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemSources {
    pub id: String,
    pub seed: u64,
    pub target_speaker: u32,
    pub interference_speaker: u32,
    pub snr_db: f64,
    /// 16-bit quantized stems, exactly as stored on disk.
    pub target: AudioSignal,
    pub interference: AudioSignal,
}

fn item_id(split: Split, index: usize, target: u32, interf: u32) -> String {
    format!("{split}-{index:05}-s{target}-s{interf}")
}

/// Parse the speaker ids back out of an item id.
pub fn speakers_of(item_id: &str) -> Option<(u32, u32)> {
    let mut parts = item_id.rsplitn(3, '-');
    let b = parts.next()?.strip_prefix('s')?.parse().ok()?;
    let a = parts.next()?.strip_prefix('s')?.parse().ok()?;
    Some((a, b))
}

pub fn item_seed(corpus_seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(derive_seed(corpus_seed, split.code()), index as u64)
}

pub fn synth_sources(
    opts: &CorpusOptions,
    cfg: &ModelConfig,
    split: Split,
    index: usize,
) -> ItemSources {
    let seed = item_seed(opts.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = opts.speaker_pool(split);
    let target_speaker = rng.random_range(pool.clone());
    let mut interference_speaker = rng.random_range(pool.start..pool.end - 1);
    if interference_speaker >= target_speaker {
        interference_speaker += 1;
    }
    let snr_db = rng.random_range(SNR_RANGE.0..=SNR_RANGE.1);
    let len = (opts.clip_seconds * cfg.sample_rate as f64).round() as usize;
    let render = |spk: u32, rng: &mut ChaCha8Rng| {
        let s = SpeakerModel::new(spk, opts.seed).synthesize(len, cfg.sample_rate, rng);
        AudioSignal::new(quantize_signal(&s), cfg.sample_rate)
    };
    let target = render(target_speaker, &mut rng);
    let interference = render(interference_speaker, &mut rng);
    ItemSources {
        id: item_id(split, index, target_speaker, interference_speaker),
        seed,
        target_speaker,
        interference_speaker,
        snr_db,
        target,
        interference,
    }
}

/// Mix quantized stems and quantize the result, as stored on disk.
pub fn render_mixture(
    target: &AudioSignal,
    interference: &AudioSignal,
    snr_db: f64,
) -> Result<(AudioSignal, AudioSignal)> {
    let m = mix(&MixtureSpec {
        target: target.clone(),
        interference: interference.clone(),
        snr_db,
    })?;
    let mixture = AudioSignal::new(quantize_signal(&m.mixture.samples), m.mixture.sample_rate);
    Ok((mixture, m.target))
}

/// Generate one item in memory, cue included.
pub fn synth_example(
    opts: &CorpusOptions,
    cfg: &ModelConfig,
    split: Split,
    index: usize,
) -> Result<Example> {
    let src = synth_sources(opts, cfg, split, index);
    let (mixture, target) = render_mixture(&src.target, &src.interference, src.snr_db)?;
    let cue = envelope_cue(
        &src.target,
        cfg.feature_dim,
        cfg.cue_frame_rate,
        DEFAULT_PROJECTION_SEED,
    )?;
    Ok(Example {
        id: src.id,
        mixture,
        target,
        cue,
        snr_db: src.snr_db,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestItem {
    pub split: Split,
    pub id: String,
    /// Paths relative to the manifest directory.
    pub target: PathBuf,
    pub interference: PathBuf,
    pub mixture: PathBuf,
    pub cue: PathBuf,
    pub snr_db: f64,
    pub seed: u64,
}

impl ManifestItem {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.split,
            self.id,
            self.target.display(),
            self.interference.display(),
            self.mixture.display(),
            self.cue.display(),
            self.snr_db,
            self.seed
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Data(format!("manifest line {lineno}: {what}"));
        if f.len() != 8 {
            return Err(bad(&format!("expected 8 fields, found {}", f.len())));
        }
        Ok(Self {
            split: f[0].parse()?,
            id: f[1].to_string(),
            target: f[2].into(),
            interference: f[3].into(),
            mixture: f[4].into(),
            cue: f[5].into(),
            snr_db: f[6].parse().map_err(|_| bad("snr is not a number"))?,
            seed: f[7].parse().map_err(|_| bad("seed is not an integer"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn write(&self) -> Result<()> {
        let mut text = String::from(MANIFEST_HEADER);
        text.push('\n');
        for item in &self.items {
            text.push_str(&item.to_line());
            text.push('\n');
        }
        let path = self.path();
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Read a manifest file, or `manifest.tsv` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let items = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .map(|(n, l)| ManifestItem::parse(l, n + 1))
            .collect::<Result<Vec<_>>>()?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, items })
    }

    pub fn load_example(&self, item: &ManifestItem, cfg: &ModelConfig) -> Result<Example> {
        let target = read_wav(&self.root.join(&item.target), cfg.sample_rate)?;
        let mixture = read_wav(&self.root.join(&item.mixture), cfg.sample_rate)?;
        let cue = read_cue(&self.root.join(&item.cue), cfg.cue_frame_rate)?;
        if cue.n() != cfg.feature_dim {
            return Err(Error::Alignment(format!(
                "{}: cue dimension {} does not match N = {}",
                item.id,
                cue.n(),
                cfg.feature_dim
            )));
        }
        if target.len() != mixture.len() {
            return Err(Error::Data(format!(
                "{}: target and mixture lengths differ",
                item.id
            )));
        }
        Ok(Example {
            id: item.id.clone(),
            mixture,
            target,
            cue,
            snr_db: item.snr_db,
        })
    }

    pub fn load_split(&self, split: Split, cfg: &ModelConfig) -> Result<Vec<Example>> {
        let items: Vec<&ManifestItem> = self.split(split).collect();
        crate::par::map(items, |item| self.load_example(item, cfg))
            .into_iter()
            .collect()
    }

    /// Re-mix the stored stems and compare with the stored mixture sample by
    /// sample.
    pub fn regenerates_exactly(&self, item: &ManifestItem, cfg: &ModelConfig) -> Result<bool> {
        let target = read_wav(&self.root.join(&item.target), cfg.sample_rate)?;
        let interf = read_wav(&self.root.join(&item.interference), cfg.sample_rate)?;
        let stored = read_wav(&self.root.join(&item.mixture), cfg.sample_rate)?;
        let (mixture, _) = render_mixture(&target, &interf, item.snr_db)?;
        Ok(mixture
            .samples
            .iter()
            .map(|v| v.to_bits())
            .eq(stored.samples.iter().map(|v| v.to_bits())))
    }
}

fn write_item(
    out_dir: &Path,
    split: Split,
    index: usize,
    opts: &CorpusOptions,
    cfg: &ModelConfig,
) -> Result<ManifestItem> {
    let src = synth_sources(opts, cfg, split, index);
    let (mixture, _) = render_mixture(&src.target, &src.interference, src.snr_db)?;
    let cue = envelope_cue(
        &src.target,
        cfg.feature_dim,
        cfg.cue_frame_rate,
        DEFAULT_PROJECTION_SEED,
    )?;
    let rel = |suffix: &str| PathBuf::from(split.to_string()).join(format!("{}_{suffix}", src.id));
    let item = ManifestItem {
        split,
        id: src.id.clone(),
        target: rel("target.wav"),
        interference: rel("interference.wav"),
        mixture: rel("mixture.wav"),
        cue: rel("cue.bin"),
        snr_db: src.snr_db,
        seed: src.seed,
    };
    write_wav(&out_dir.join(&item.target), &src.target)?;
    write_wav(&out_dir.join(&item.interference), &src.interference)?;
    write_wav(&out_dir.join(&item.mixture), &mixture)?;
    write_cue(&out_dir.join(&item.cue), &cue)?;
    Ok(item)
}

/// Generate every split under `out_dir` and write the manifest.
pub fn gen_corpus(opts: &CorpusOptions, cfg: &ModelConfig, out_dir: &Path) -> Result<Manifest> {
    opts.validate()?;
    cfg.validate()?;
    for split in Split::ALL {
        let dir = out_dir.join(split.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..opts.count(s)).map(move |i| (s, i)))
        .collect();
    let items = crate::par::map(jobs, |(s, i)| write_item(out_dir, s, i, opts, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        items,
    };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    #[test]
    fn speaker_ids_round_trip_through_item_id() {
        assert_eq!(
            speakers_of(&item_id(Split::Test, 7, 1003, 1001)),
            Some((1003, 1001))
        );
    }

    #[test]
    fn synthesis_is_deterministic_and_nonsilent() {
        let opts = CorpusOptions {
            clip_seconds: 0.5,
            ..Default::default()
        };
        let a = synth_sources(&opts, &cfg(), Split::Train, 3);
        let b = synth_sources(&opts, &cfg(), Split::Train, 3);
        assert_eq!(a, b);
        assert_ne!(a.target_speaker, a.interference_speaker);
        assert!(crate::signal::mean_power(&a.target.samples) > 1e-4);
        assert!((SNR_RANGE.0..=SNR_RANGE.1).contains(&a.snr_db));
    }

    #[test]
    fn clip_range_enforced() {
        let opts = CorpusOptions {
            clip_seconds: 7.0,
            ..Default::default()
        };
        assert!(matches!(opts.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_line_round_trip() {
        let item = ManifestItem {
            split: Split::Val,
            id: "val-00001-s1-s2".into(),
            target: "val/a.wav".into(),
            interference: "val/b.wav".into(),
            mixture: "val/c.wav".into(),
            cue: "val/d.bin".into(),
            snr_db: -7.389056098930651,
            seed: u64::MAX,
        };
        assert_eq!(ManifestItem::parse(&item.to_line(), 1).unwrap(), item);
    }
}
