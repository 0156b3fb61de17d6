//! SNR-controlled mixing and scale-invariant SDR.

use crate::error::{Error, Result};
use crate::frontend::AudioSignal;
use crate::tensor::{Scalar, Tape, Var};

/// Regularizer added to both energies inside the SI-SDR ratio.
pub const SI_SDR_EPS: f64 = 1e-8;
/// Reported SI-SDR values are clamped to `±SI_SDR_CAP` dB.
pub const SI_SDR_CAP: f64 = 60.0;
/// Stems with mean power at or below this are treated as silent.
pub const SILENCE_POWER: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub target: AudioSignal,
    pub interference: AudioSignal,
    pub snr_db: f64,
}

/// Result of [`mix`]: the mixture plus the stems exactly as they appear in it.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixture: AudioSignal,
    pub target: AudioSignal,
    pub interference: AudioSignal,
    /// Gain applied to the interference to reach the requested SNR.
    pub interference_gain: f64,
    /// Common gain applied afterwards to keep the peak within ±1 (1 if none).
    pub peak_gain: f64,
}

pub fn mean_power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

pub fn mix(spec: &MixtureSpec) -> Result<Mixture> {
    let (t, i) = (&spec.target, &spec.interference);
    if t.sample_rate != i.sample_rate {
        return Err(Error::Data(format!(
            "sample rates differ: {} vs {}",
            t.sample_rate, i.sample_rate
        )));
    }
    if !spec.snr_db.is_finite() {
        return Err(Error::Data("SNR must be finite".into()));
    }
    let len = t.len().min(i.len());
    let (ts, is) = (&t.samples[..len], &i.samples[..len]);
    let (pt, pi) = (mean_power(ts), mean_power(is));
    if pt <= SILENCE_POWER || pi <= SILENCE_POWER {
        return Err(Error::Data("cannot mix a silent stem".into()));
    }
    let gain = (pt / (pi * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let sum: Vec<f64> = ts
        .iter()
        .zip(is)
        .map(|(&a, &b)| a as f64 + gain * b as f64)
        .collect();
    let peak = sum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let scale =
        |x: &[f32], g: f64| -> Vec<f32> { x.iter().map(|&v| (v as f64 * g) as f32).collect() };
    let sr = t.sample_rate;
    Ok(Mixture {
        mixture: AudioSignal::new(sum.iter().map(|&v| (v * peak_gain) as f32).collect(), sr),
        target: AudioSignal::new(scale(ts, peak_gain), sr),
        interference: AudioSignal::new(scale(is, gain * peak_gain), sr),
        interference_gain: gain,
        peak_gain,
    })
}

fn zero_mean(x: &[f32]) -> Vec<f64> {
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|&v| v as f64 - mean).collect()
}

/// Uncapped SI-SDR in dB after removing the mean of both signals.
pub fn si_sdr_uncapped(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(
            "si_sdr",
            format!(
                "estimate has {} samples, reference {}",
                estimate.len(),
                reference.len()
            ),
        ));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference signal"));
    }
    let (e, s) = (zero_mean(estimate), zero_mean(reference));
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss / s.len() as f64 <= SILENCE_POWER {
        return Err(Error::Data("silent reference".into()));
    }
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&s) {
        let st = alpha * b;
        target += st * st;
        noise += (a - st) * (a - st);
    }
    Ok(10.0 * ((target + SI_SDR_EPS) / (noise + SI_SDR_EPS)).log10())
}

/// SI-SDR in dB, clamped to `±SI_SDR_CAP`.
pub fn si_sdr(estimate: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    Ok(si_sdr_uncapped(&estimate.samples, &reference.samples)?.clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

pub fn si_sdr_improvement(
    estimate: &AudioSignal,
    mixture: &AudioSignal,
    reference: &AudioSignal,
) -> Result<f64> {
    Ok(si_sdr(estimate, reference)? - si_sdr(mixture, reference)?)
}

/// Negative uncapped SI-SDR of `estimate` (`1×T` or `T`) against a constant
/// reference, recorded on the tape.
pub fn neg_si_sdr_var<T: Scalar>(
    tape: &mut Tape<T>,
    estimate: &Var<T>,
    reference: &[T],
) -> Result<Var<T>> {
    let t = estimate.value().numel();
    if t != reference.len() {
        return Err(Error::shape(
            "neg_si_sdr",
            format!("estimate has {t} samples, reference {}", reference.len()),
        ));
    }
    let mean = reference.iter().map(|v| v.as_f64()).sum::<f64>() / t as f64;
    let s: Vec<f64> = reference.iter().map(|v| v.as_f64() - mean).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss / t as f64 <= SILENCE_POWER {
        return Err(Error::Data("silent reference".into()));
    }
    let est = tape.reshape(estimate, &[t])?;
    let total = tape.sum(&est)?;
    let neg_mean = tape.scale(&total, -1.0 / t as f64)?;
    let e = tape.add(&est, &neg_mean)?;
    let s_var = tape.constant(crate::tensor::Tensor::new(
        &[t],
        s.iter().map(|&v| T::from_f64(v)).collect(),
    )?);
    // α = ⟨e, s⟩ / ‖s‖²; the reference is constant so ‖s‖² folds into a scale
    let es = tape.mul(&e, &s_var)?;
    let dot = tape.sum(&es)?;
    let alpha = tape.scale(&dot, 1.0 / ss)?;
    let st = tape.mul(&s_var, &alpha)?;
    let noise = tape.sub(&e, &st)?;
    let st2 = tape.mul(&st, &st)?;
    let target_energy = tape.sum(&st2)?;
    let n2 = tape.mul(&noise, &noise)?;
    let noise_energy = tape.sum(&n2)?;
    let num = tape.add_scalar(&target_energy, SI_SDR_EPS)?;
    let den = tape.add_scalar(&noise_energy, SI_SDR_EPS)?;
    let ln_num = tape.ln(&num)?;
    let ln_den = tape.ln(&den)?;
    let diff = tape.sub(&ln_den, &ln_num)?;
    tape.scale(&diff, 10.0 / std::f64::consts::LN_10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(v: &[f32]) -> AudioSignal {
        AudioSignal::new(v.to_vec(), 16000)
    }

    #[test]
    fn hand_projection_case_is_zero_db() {
        let v = si_sdr(&sig(&[1.0, 1.0]), &sig(&[1.0, 0.0])).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn equal_power_zero_snr_has_unit_gain() {
        let t = sig(&[0.1, -0.1, 0.1, -0.1]);
        let i = sig(&[0.1, 0.1, -0.1, -0.1]);
        let m = mix(&MixtureSpec {
            target: t,
            interference: i,
            snr_db: 0.0,
        })
        .unwrap();
        assert!((m.interference_gain - 1.0).abs() < 1e-12);
        assert_eq!(m.peak_gain, 1.0);
    }

    #[test]
    fn peak_normalization_is_recorded() {
        let t = sig(&[0.9, -0.9, 0.9]);
        let i = sig(&[0.9, -0.9, 0.9]);
        let m = mix(&MixtureSpec {
            target: t,
            interference: i,
            snr_db: 0.0,
        })
        .unwrap();
        assert!(m.peak_gain < 1.0);
        assert!(m.mixture.samples.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn silent_inputs_rejected() {
        let z = sig(&[0.0; 8]);
        let x = sig(&[0.5; 8]);
        assert!(mix(&MixtureSpec {
            target: z.clone(),
            interference: x.clone(),
            snr_db: 0.0
        })
        .is_err());
        assert!(si_sdr(&x, &z).is_err());
        assert!(si_sdr(&x, &sig(&[0.5; 4])).is_err());
    }

    #[test]
    fn tape_loss_matches_metric() {
        let s: Vec<f32> = (0..64).map(|i| (i as f32 * 0.3).sin()).collect();
        let e: Vec<f32> = (0..64)
            .map(|i| (i as f32 * 0.3).sin() + 0.2 * (i as f32 * 1.7).cos())
            .collect();
        let mut tape = Tape::<f64>::new();
        let ev = tape.param(
            crate::tensor::Tensor::new(&[1, 64], e.iter().map(|&v| v as f64).collect()).unwrap(),
        );
        let sref: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let l = neg_si_sdr_var(&mut tape, &ev, &sref).unwrap();
        let direct = si_sdr_uncapped(&e, &s).unwrap();
        assert!((l.value().data()[0] + direct).abs() < 1e-9);
    }
}
