//! Self-check suites run by `avsep verify`: finite-difference gradients,
//! chunking oracles, alignment arithmetic, positional-encoding properties,
//! metric identities and persistence.

use std::collections::HashSet;
use std::time::Instant;

use crate::attention::{cross_block, init_block, mha, self_block, AttentionVars, BlockVars};
use crate::checkpoint::{decode_archive, encode_archive, from_archive, model_header};
use crate::chunking::{align_cue, chunk, overlap_add, ChunkLayout};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::frontend::{frame_count, AudioFeature, AudioSignal};
use crate::model::{forward_var, ForwardOptions, Model};
use crate::params::{Initializer, ParamStore, ParamVars};
use crate::posenc;
use crate::separator::{init_separator, separate_var};
use crate::signal::{mix, neg_si_sdr_var, si_sdr, si_sdr_uncapped, MixtureSpec};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::visualcue::{cue_frames, VisualFeature};

/// Maximum relative gradient error accepted in 64-bit.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Suite {
    name: &'static str,
    checks: Vec<Check>,
    start: Instant,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
            start: Instant::now(),
        }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    /// Record `r`, turning an error into a failed check.
    fn check_result(&mut self, name: impl Into<String>, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.check(name, ok, detail),
            Err(e) => self.check(name, false, format!("error: {e}")),
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name,
            checks: self.checks,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

type ScalarFn = Box<dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + Send + Sync>;

/// A differentiable function of some leaves, reduced to a scalar.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub f: ScalarFn,
    /// Probe at most this many coordinates per input.
    pub max_coords: Option<usize>,
}

impl GradCase {
    /// Largest relative error between tape and central-difference gradients.
    pub fn run(&self) -> Result<f64> {
        Ok(grad_check(&self.f, &self.inputs, FD_STEP, self.max_coords)?.max_rel_err)
    }
}

/// Contract `y` against fixed pseudo-random weights, so every output
/// element gets a distinct sensitivity.
pub fn probe_sum(tape: &mut Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let w = Tensor::from_fn(y.shape(), |i| (i as f64 * 0.7 + 0.3).sin());
    let w = tape.constant(w);
    let p = tape.mul(y, &w)?;
    tape.sum(&p)
}

fn rand(seed: u64, shape: &[usize]) -> Tensor<f64> {
    Initializer::new(seed).uniform(shape, 1.0)
}

/// Values bounded away from zero (for relu kinks and divisors).
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand(seed, shape).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

fn positive(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand(seed, shape).map(|v| v.abs() + 0.5)
}

fn case<F>(name: impl Into<String>, inputs: Vec<Tensor<f64>>, f: F) -> GradCase
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + Send + Sync + 'static,
{
    GradCase {
        name: name.into(),
        inputs,
        f: Box::new(move |t, v| {
            let y = f(t, v)?;
            probe_sum(t, &y)
        }),
        max_coords: None,
    }
}

/// One case per primitive op. `variant` (0, 1, 2, …) picks the shapes.
pub fn op_cases(variant: usize) -> Vec<GradCase> {
    let v = variant;
    let s = 17 * v as u64 + 1;
    let (b, m, k, n) = (1 + v % 2, 2 + v, 3 + v, 2 + 2 * v);
    vec![
        case(
            "matmul",
            vec![rand(s, &[b, m, k]), rand(s + 1, &[k, n])],
            |t, x| t.matmul(&x[0], &x[1]),
        ),
        case(
            "bmm",
            vec![rand(s, &[b, m, k]), rand(s + 1, &[b, k, n])],
            |t, x| t.bmm(&x[0], &x[1], false),
        ),
        case(
            "bmm_transposed",
            vec![rand(s, &[b, m, k]), rand(s + 1, &[b, n, k])],
            |t, x| t.bmm(&x[0], &x[1], true),
        ),
        case(
            "add_broadcast",
            vec![rand(s, &[b, m, n]), rand(s + 1, &[n])],
            |t, x| t.add(&x[0], &x[1]),
        ),
        case(
            "sub",
            vec![rand(s, &[m, n]), rand(s + 1, &[m, n])],
            |t, x| t.sub(&x[0], &x[1]),
        ),
        case(
            "mul_broadcast",
            vec![rand(s, &[b, m, n]), rand(s + 1, &[m, n])],
            |t, x| t.mul(&x[0], &x[1]),
        ),
        case(
            "div",
            vec![rand(s, &[m, n]), away_from_zero(s + 1, &[m, n])],
            |t, x| t.div(&x[0], &x[1]),
        ),
        case("scale", vec![rand(s, &[m, n])], |t, x| t.scale(&x[0], -1.7)),
        case("add_scalar", vec![rand(s, &[m, n])], |t, x| {
            t.add_scalar(&x[0], 0.3)
        }),
        case("relu", vec![away_from_zero(s, &[m, n])], |t, x| {
            t.relu(&x[0])
        }),
        case(
            "sigmoid",
            vec![rand(s, &[m, n]).map(|v| 3.0 * v)],
            |t, x| t.sigmoid(&x[0]),
        ),
        case("ln", vec![positive(s, &[m, n])], |t, x| t.ln(&x[0])),
        case(
            "softmax",
            vec![rand(s, &[b, m, n]).map(|v| 2.0 * v)],
            |t, x| t.softmax(&x[0]),
        ),
        case(
            "layernorm",
            vec![
                rand(s, &[m, n + 2]),
                rand(s + 1, &[n + 2]),
                rand(s + 2, &[n + 2]),
            ],
            |t, x| t.layernorm(&x[0], &x[1], &x[2], 1e-5),
        ),
        case(
            "conv1d",
            vec![rand(s, &[1, 4 + 2 * (3 + v)]), rand(s + 1, &[3, 1, 4])],
            |t, x| t.conv1d(&x[0], &x[1], 2),
        ),
        case(
            "conv_transpose1d",
            vec![rand(s, &[3, 3 + v]), rand(s + 1, &[3, 1, 4])],
            |t, x| t.conv_transpose1d(&x[0], &x[1], 2),
        ),
        case("reshape", vec![rand(s, &[m, n])], move |t, x| {
            t.reshape(&x[0], &[n, m])
        }),
        case("permute", vec![rand(s, &[2, m, n])], |t, x| {
            t.permute(&x[0], &[2, 0, 1])
        }),
        case("slice", vec![rand(s, &[m, n + 3])], move |t, x| {
            t.slice(&x[0], 1, 1, n)
        }),
        case(
            "concat",
            vec![rand(s, &[m, n]), rand(s + 1, &[m, 2])],
            |t, x| t.concat(&[&x[0], &x[1]], 1),
        ),
        case("sum", vec![rand(s, &[m, n])], |t, x| t.sum(&x[0])),
        {
            let reference: Vec<f64> = (0..32).map(|i| (i as f64 * 0.4 + v as f64).sin()).collect();
            case("neg_si_sdr", vec![rand(s, &[1, 32])], move |t, x| {
                neg_si_sdr_var(t, &x[0], &reference)
            })
        },
    ]
}

/// Flatten a parameter store into grad-check leaves plus their names.
fn leaves(store: &ParamStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    store
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .unzip()
}

fn bind(names: &[String], vars: &[Var<f64>]) -> ParamVars<f64> {
    names.iter().cloned().zip(vars.iter().cloned()).collect()
}

/// Attention, blocks, the separator at `N=8, C=4, I=3`, and the whole model
/// at the tiny config.
pub fn composite_cases(variant: usize) -> Vec<GradCase> {
    let s = 31 * variant as u64 + 5;
    let (n, len) = (8, 3 + variant);
    let heads = 1 + variant % 2;
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let mut init = Initializer::new(s);
    init_block(&mut store, &mut init, "b", n, 4, true);
    let (names, mut inputs) = leaves(&store);
    let np = names.len();
    inputs.push(rand(s + 1, &[len, n]));
    inputs.push(rand(s + 2, &[len + 1, n]));
    {
        let names = names.clone();
        out.push(case(
            format!("mha_h{heads}"),
            inputs.clone(),
            move |t, x| {
                let p = bind(&names, &x[..np]);
                let w = AttentionVars::from_params(&p, "b.attn")?;
                mha(t, &w, &x[np], &x[np + 1], &x[np + 1], heads)
            },
        ));
    }
    {
        let names = names.clone();
        let inputs = inputs[..np + 1].to_vec();
        out.push(case(format!("self_block_h{heads}"), inputs, move |t, x| {
            let p = bind(&names, &x[..np]);
            let w = BlockVars::from_params(&p, "b", false)?;
            self_block(t, &w, &x[np], heads, 1e-5, &mut None)
        }));
    }
    {
        let mut inputs = inputs[..np + 1].to_vec();
        inputs.push(rand(s + 3, &[len, n]));
        out.push(case(
            format!("cross_block_h{heads}"),
            inputs,
            move |t, x| {
                let p = bind(&names, &x[..np]);
                let w = BlockVars::from_params(&p, "b", true)?;
                cross_block(t, &w, &x[np], &x[np + 1], heads, 1e-5, &mut None)
            },
        ));
    }

    for cross in [true, false] {
        let cfg = ModelConfig {
            feature_dim: n,
            chunk_size: 4,
            n_intra: 1,
            n_inter: 1,
            n_head: 1,
            use_cross_attention: cross,
            use_2d_pos: variant.is_multiple_of(2),
            cue_frame_rate: 1000,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        init_separator(&mut store, &mut Initializer::new(s + 7), &cfg);
        let (names, mut inputs) = leaves(&store);
        let np = names.len();
        // K=4, C=4 gives I=3
        inputs.push(rand(s + 8, &[n, 4]));
        let hv = rand(s + 9, &[n, 3]);
        let label = if cross {
            "separator"
        } else {
            "separator_concat_fusion"
        };
        out.push(case(label, inputs, move |t, x| {
            let p = bind(&names, &x[..np]);
            separate_var(t, &p, &x[np], &hv, &cfg, &mut None, None)
        }));
    }

    let cfg = ModelConfig::tiny();
    let model = Model::<f64>::new(cfg.clone(), s + 11).expect("tiny config is valid");
    let (names, inputs) = leaves(&model.params);
    let t_len = 150 + 40 * variant;
    let mixture: Vec<f64> = rand(s + 12, &[t_len])
        .into_data()
        .iter()
        .map(|v| 0.5 * v)
        .collect();
    let i = model.chunk_count(t_len).expect("non-empty clip");
    let cue = rand(s + 13, &[cfg.feature_dim, i]);
    out.push(GradCase {
        name: "model_tiny".into(),
        inputs,
        f: Box::new(move |t, x| {
            let p = bind(&names, x);
            let y = forward_var(
                t,
                &p,
                &mixture,
                &cue,
                &cfg,
                ForwardOptions::default(),
                &mut None,
                None,
            )?;
            t.sum(&y)
        }),
        max_coords: Some(6),
    });
    out
}

pub fn gradient_suite() -> SuiteReport {
    let mut suite = Suite::new("gradients");
    for c in op_cases(0).into_iter().chain(composite_cases(0)) {
        let r = c
            .run()
            .map(|e| (e < GRAD_TOLERANCE, format!("max rel err {e:.2e}")));
        suite.check_result(c.name, r);
    }
    suite.finish()
}

/// Check `overlap_add(chunk(h)) == coverage ⊙ h` bit-exactly in 64-bit.
pub fn chunk_oracle(k: usize, c: usize, seed: u64) -> Result<bool> {
    let n = 3;
    let values = rand(seed, &[n, k]);
    let h = AudioFeature {
        values: values.clone(),
        original_len: 0,
        padded_len: 0,
    };
    let back = overlap_add(&chunk(&h, c)?)?;
    let cov = ChunkLayout::new(k, c)?.coverage();
    let expect = Tensor::from_fn(&[n, k], |idx| values.data()[idx] * cov[idx % k] as f64);
    Ok(back
        .data()
        .iter()
        .zip(expect.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()))
}

pub const CHUNK_SWEEP_K: std::ops::RangeInclusive<usize> = 1..=200;
pub const CHUNK_SWEEP_C: [usize; 8] = [2, 4, 6, 8, 16, 32, 100, 160];

pub fn chunking_suite() -> SuiteReport {
    let mut suite = Suite::new("chunking");
    for c in CHUNK_SWEEP_C {
        let mut bad = Vec::new();
        let mut err = None;
        for k in CHUNK_SWEEP_K {
            match chunk_oracle(k, c, (k * 1000 + c) as u64) {
                Ok(true) => {}
                Ok(false) => bad.push(k),
                Err(e) => err = Some(e),
            }
        }
        let detail = match (&err, bad.is_empty()) {
            (Some(e), _) => format!("error: {e}"),
            (None, true) => "K = 1..=200 exact".to_string(),
            (None, false) => format!("mismatch at K = {bad:?}"),
        };
        suite.check(
            format!("overlap_add_chunk_C{c}"),
            err.is_none() && bad.is_empty(),
            detail,
        );
    }
    let ok = ChunkLayout::new(4, 4).map(|l| (l.padded_len(), l.n_chunks) == (8, 3));
    suite.check_result("K4_C4_layout", ok.map(|b| (b, "K'=8, I=3".to_string())));
    let ok = ChunkLayout::new(7999, 160).map(|l| l.n_chunks == 101);
    suite.check_result("K7999_C160_layout", ok.map(|b| (b, "I=101".to_string())));
    suite.finish()
}

pub fn alignment_suite() -> SuiteReport {
    let mut suite = Suite::new("alignment");
    let cfg = ModelConfig::default();
    suite.check(
        "chunk_rate_25hz",
        cfg.chunk_rate() == 25.0,
        format!("{} Hz", cfg.chunk_rate()),
    );
    let k = frame_count(64_000, cfg.kernel_size);
    let r = ChunkLayout::new(k, cfg.chunk_size).and_then(|l| {
        let frames = cue_frames(64_000, cfg.sample_rate, cfg.cue_frame_rate);
        let cue = VisualFeature {
            values: Tensor::<f32>::from_fn(&[4, frames], |i| i as f32),
            frame_rate: 25,
        };
        let aligned = align_cue(&cue, l.n_chunks)?;
        let ok = k == 7999 && l.n_chunks == 101 && frames == 100 && aligned.len() == 101;
        Ok((
            ok,
            format!("K={k}, I={}, video frames={frames}", l.n_chunks),
        ))
    });
    suite.check_result("four_second_clip", r);
    let bad = ModelConfig {
        chunk_size: 150,
        ..ModelConfig::default()
    };
    let err = bad.validate();
    suite.check(
        "C150_rejected",
        err.as_ref().is_err_and(|e| e.to_string().contains("15000")),
        format!("{err:?}"),
    );
    suite.finish()
}

pub fn posenc_suite() -> SuiteReport {
    let mut suite = Suite::new("posenc");
    let (n, c, i) = (256, 160, 100);
    let mut seen = HashSet::new();
    let mut in_range = true;
    for ci in 0..c {
        for ii in 0..i {
            let v = posenc::pe2d_vector(n, ci, ii);
            in_range &= v.iter().all(|x| (-1.0..=1.0).contains(x));
            seen.insert(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
    suite.check(
        "pe2d_pairwise_distinct",
        seen.len() == c * i,
        format!("{} distinct of {}", seen.len(), c * i),
    );
    suite.check("pe2d_in_unit_range", in_range, "");
    let r = posenc::pe2d::<f64>(n, c, i).and_then(|full| {
        let row = posenc::pe2d_visual_row::<f64>(n, c, i)?;
        let ok = (0..n).all(|u| (0..i).all(|ii| row.at(&[u, ii]) == full.at(&[u, c / 2, ii])));
        Ok((ok, String::new()))
    });
    suite.check_result("visual_row_is_pe2d_slice", r);
    let r = posenc::pe1d::<f64>(n, c).map(|t| {
        // the 1D table is indexed by c only, so every chunk receives it unchanged
        let ok = t.data().iter().all(|x| (-1.0..=1.0).contains(x)) && t.shape() == [n, c];
        (ok, "same table for every chunk".to_string())
    });
    suite.check_result("pe1d_identical_across_chunks", r);
    suite.finish()
}

pub fn signal_suite() -> SuiteReport {
    let mut suite = Suite::new("signal");
    let sig = |v: Vec<f32>| AudioSignal::new(v, 16_000);
    let r = si_sdr(&sig(vec![1.0, 1.0]), &sig(vec![1.0, 0.0]))
        .map(|v| (v.abs() < 1e-9, format!("{v:e} dB")));
    suite.check_result("hand_projection", r);

    let s: Vec<f32> = (0..400)
        .map(|i| (i as f32 * 0.05).sin() + 0.3 * (i as f32 * 0.31).cos())
        .collect();
    let e: Vec<f32> = s
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.2 * (i as f32 * 1.3).sin())
        .collect();
    let r = si_sdr_uncapped(&e, &s).and_then(|base| {
        let mut worst = 0.0f64;
        for a in [0.5f32, 2.0, 10.0, 100.0] {
            let scaled: Vec<f32> = e.iter().map(|v| v * a).collect();
            worst = worst.max((si_sdr_uncapped(&scaled, &s)? - base).abs());
        }
        Ok((worst < 1e-6, format!("max drift {worst:.1e} dB")))
    });
    suite.check_result("scale_invariance", r);

    let interf: Vec<f32> = (0..400).map(|i| (i as f32 * 0.173).sin() * 0.7).collect();
    let mut worst = 0.0f64;
    let mut err = None;
    for snr in [-10.0, -5.0, 0.0, 5.0, 10.0] {
        let spec = MixtureSpec {
            target: sig(s.clone()),
            interference: sig(interf.clone()),
            snr_db: snr,
        };
        match mix(&spec) {
            Ok(m) => {
                let pt = crate::signal::mean_power(&m.target.samples);
                let pi = crate::signal::mean_power(&m.interference.samples);
                let want = 10f64.powf(snr / 10.0);
                worst = worst.max(((pt / pi) - want).abs() / want);
            }
            Err(e) => err = Some(e),
        }
    }
    match err {
        Some(e) => suite.check("mix_power_ratio", false, format!("error: {e}")),
        None => suite.check(
            "mix_power_ratio",
            worst < 1e-6,
            format!("max rel err {worst:.1e}"),
        ),
    }
    suite.finish()
}

pub fn persistence_suite() -> SuiteReport {
    let mut suite = Suite::new("persistence");
    let cfg = ModelConfig::tiny();
    let r = (|| -> Result<(bool, String)> {
        let a = Model::<f32>::new(cfg.clone(), 9)?;
        let b = Model::<f32>::new(cfg.clone(), 9)?;
        let bytes = encode_archive(&model_header(&a.cfg), a.params.iter());
        let back = from_archive(decode_archive(&bytes)?)?;
        let x = AudioSignal::new(
            (0..3000).map(|i| (i as f32 * 0.013).sin() * 0.2).collect(),
            cfg.sample_rate,
        );
        let frames = a.chunk_count(x.len())?;
        let cue = VisualFeature {
            values: Tensor::from_fn(&[cfg.feature_dim, frames], |i| (i as f32 * 0.1).cos()),
            frame_rate: cfg.cue_frame_rate,
        };
        let ya = a.extract(&x, &cue)?;
        let yb = b.extract(&x, &cue)?;
        let yc = back.extract(&x, &cue)?;
        let same = |p: &AudioSignal, q: &AudioSignal| {
            p.samples
                .iter()
                .map(|v| v.to_bits())
                .eq(q.samples.iter().map(|v| v.to_bits()))
        };
        Ok((
            a == back && same(&ya, &yb) && same(&ya, &yc),
            "seeded init, round trip, extract".into(),
        ))
    })();
    suite.check_result("checkpoint_round_trip", r);
    suite.finish()
}

/// Every suite, in a fixed order.
pub fn run_all() -> Vec<SuiteReport> {
    vec![
        gradient_suite(),
        chunking_suite(),
        alignment_suite(),
        posenc_suite(),
        signal_suite(),
        persistence_suite(),
    ]
}
