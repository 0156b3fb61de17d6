//! Randomized invariants over chunking, softmax, convolution adjointness,
//! positional tables and the signal metrics.

use avsep_core::chunking::{align_cue, ChunkLayout};
use avsep_core::frontend::AudioSignal;
use avsep_core::posenc::{pe2d, pe2d_chunk_major, pe2d_visual_row};
use avsep_core::signal::{mean_power, mix, si_sdr, MixtureSpec};
use avsep_core::tensor::kernels::{conv1d, conv_transpose1d, softmax_lastdim};
use avsep_core::verify::chunk_oracle;
use avsep_core::visualcue::VisualFeature;
use avsep_core::Tensor;
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlap_add_of_chunk_is_coverage_times_input(k in 1usize..400, half in 1usize..48, seed: u64) {
        prop_assert!(chunk_oracle(k, 2 * half, seed).unwrap());
    }

    #[test]
    fn every_column_is_covered_twice(k in 1usize..2000, half in 1usize..100) {
        let layout = ChunkLayout::new(k, 2 * half).unwrap();
        prop_assert_eq!(layout.n_chunks, k.div_ceil(half) + 1);
        prop_assert!(layout.coverage().iter().all(|&c| c == 2));
        prop_assert_eq!((layout.padded_len() - 2 * half) % half, 0);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, scale in 0.1f64..200.0, seed: u64) {
        let x = Tensor::<f64>::from_f64_slice(&[rows, cols], &noise(seed, rows * cols))
            .unwrap()
            .map(|v| v * scale);
        let y = softmax_lastdim(&x).unwrap();
        for r in y.data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_the_adjoint(n in 1usize..6, half in 1usize..6, frames in 1usize..20, seed: u64) {
        let l = 2 * half;
        let t = (frames - 1) * half + l;
        let w = Tensor::from_f64_slice(&[n, 1, l], &noise(seed, n * l)).unwrap();
        let x = Tensor::from_f64_slice(&[1, t], &noise(seed ^ 1, t)).unwrap();
        let h = Tensor::from_f64_slice(&[n, frames], &noise(seed ^ 2, n * frames)).unwrap();
        let lhs = dot(conv1d(&x, &w, half).unwrap().data(), h.data());
        let rhs = dot(x.data(), conv_transpose1d(&h, &w, half).unwrap().data());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn positional_tables_agree_and_are_bounded(quarter in 1usize..16, c in 2usize..24, i in 1usize..24) {
        let n = 4 * quarter;
        let table = pe2d::<f64>(n, c, i).unwrap();
        prop_assert!(table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let cm = pe2d_chunk_major::<f64>(n, c, i).unwrap();
        let row = pe2d_visual_row::<f64>(n, c, i).unwrap();
        for d in 0..n {
            for ii in 0..i {
                prop_assert_eq!(row.at(&[d, ii]), table.at(&[d, c / 2, ii]));
                for ci in 0..c {
                    prop_assert_eq!(cm.at(&[ii, ci, d]), table.at(&[d, ci, ii]));
                }
            }
        }
    }

    #[test]
    fn si_sdr_ignores_gain(seed: u64, gain in 0.5f64..100.0) {
        let r: Vec<f32> = noise(seed, 400).iter().map(|&v| v as f32).collect();
        let e: Vec<f32> = r.iter().zip(noise(seed ^ 7, 400)).map(|(&a, b)| a + 0.3 * b as f32).collect();
        let scaled: Vec<f32> = e.iter().map(|&v| (v as f64 * gain) as f32).collect();
        let sig = |s: Vec<f32>| AudioSignal::new(s, 16000);
        let base = si_sdr(&sig(e), &sig(r.clone())).unwrap();
        let moved = si_sdr(&sig(scaled), &sig(r)).unwrap();
        prop_assert!((base - moved).abs() < 1e-6);
    }

    #[test]
    fn mix_hits_the_requested_snr(seed: u64, snr in -10.0f64..10.0) {
        let sig = |s: u64| AudioSignal::new(noise(s, 800).iter().map(|&v| 0.2 * v as f32).collect(), 16000);
        let m = mix(&MixtureSpec { target: sig(seed), interference: sig(seed ^ 3), snr_db: snr }).unwrap();
        let got = 10.0 * (mean_power(&m.target.samples) / mean_power(&m.interference.samples)).log10();
        prop_assert!((got - snr).abs() < 1e-4, "{got} vs {snr}");
        prop_assert!(m.mixture.samples.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn align_cue_always_matches_chunk_count(len in 1usize..60, delta in -2i64..=2) {
        let target = (len as i64 + delta).max(1) as usize;
        let cue = VisualFeature { values: Tensor::<f32>::ones(&[4, len]), frame_rate: 25 };
        let aligned = align_cue(&cue, target).unwrap();
        prop_assert_eq!(aligned.values.shape(), &[4, target][..]);
    }
}
