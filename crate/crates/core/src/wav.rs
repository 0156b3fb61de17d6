//! 16-bit PCM mono WAV input/output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::AudioSignal;

const FULL_SCALE: f32 = 32767.0;

/// Map a sample in [−1, 1] to the nearest 16-bit code (clamping outside).
pub fn quantize(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * FULL_SCALE).round() as i16
}

pub fn dequantize(q: i16) -> f32 {
    q as f32 / FULL_SCALE
}

/// Round-trip samples through the 16-bit representation.
pub fn quantize_signal(samples: &[f32]) -> Vec<f32> {
    samples.iter().map(|&v| dequantize(quantize(v))).collect()
}

pub fn read_wav(path: &Path, expected_rate: u32) -> Result<AudioSignal> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Data(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Data(format!(
            "{}: expected 16-bit PCM, found {:?} {} bits",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::Data(format!(
            "{}: sample rate {} Hz, expected {expected_rate} Hz (resampling not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(dequantize))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok(AudioSignal::new(samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &signal.samples {
        writer.write_sample(quantize(s)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
