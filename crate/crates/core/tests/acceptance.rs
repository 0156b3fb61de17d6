//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The learning thresholds below were measured on the first validated run and
//! then frozen; the measured values are quoted next to each constant.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use avsep_core::checkpoint;
use avsep_core::chunking::{align_cue, ChunkLayout};
use avsep_core::datagen::{synth_example, CorpusOptions, Example, Split};
use avsep_core::frontend::frame_count;
use avsep_core::training::{
    evaluate, mean_scores, run_ablation, AblationData, CueMode, TrainOptions, TrainState, Trainer,
    METRICS_FILE, STATE_FILE,
};
use avsep_core::verify::{self, SuiteReport};
use avsep_core::visualcue::{cue_frames, VisualFeature};
use avsep_core::{ModelConfig, Tensor};

/// Overfit target; seeds 1 to 4 reached 17 to 22 dB.
const OVERFIT_MIN_SDRI: f64 = 10.0;
const OVERFIT_STEPS: usize = 500;
/// Oracle-cue test SI-SDRi floor; the validated run measured 8.66 dB.
const CUE_ORACLE_MIN_SDRI: f64 = 5.0;
/// Constant-cue ceiling; the validated run measured -1.46 dB.
const CUE_CONSTANT_MAX_SDRI: f64 = 1.0;
const CUE_MAX_STEPS: usize = 1000;
const LR: f64 = 2e-3;
const MODEL_SEED: u64 = 7;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn suite_outcome(r: &SuiteReport, budget: Duration) -> Outcome {
    let within = r.seconds <= budget.as_secs_f64();
    let failed: Vec<String> = r
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let mut detail = format!(
        "{}/{} checks in {:.1}s (budget {}s)",
        r.passed(),
        r.checks.len(),
        r.seconds,
        budget.as_secs()
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failing: {}", failed.join(" | ")));
    }
    outcome(r.all_passed() && within, detail)
}

fn gradients() -> Outcome {
    suite_outcome(&verify::gradient_suite(), Duration::from_secs(120))
}

fn chunk_oracle() -> Outcome {
    suite_outcome(&verify::chunking_suite(), Duration::from_secs(10))
}

fn alignment() -> Outcome {
    let cfg = ModelConfig::default();
    let t = 4 * cfg.sample_rate as usize;
    let k = frame_count(t, cfg.kernel_size);
    let i = ChunkLayout::new(k, cfg.chunk_size).unwrap().n_chunks;
    let video = cue_frames(t, cfg.sample_rate, 25);
    let cue = VisualFeature {
        values: Tensor::<f32>::ones(&[cfg.feature_dim, video]),
        frame_rate: 25,
    };
    let aligned = align_cue(&cue, i).unwrap();
    let suite = verify::alignment_suite();
    let passed = cfg.chunk_rate() == 25.0
        && k == 7999
        && i == 101
        && video == 100
        && i.abs_diff(video) <= 1
        && aligned.len() == i
        && suite.all_passed();
    outcome(
        passed,
        format!(
            "rate {} Hz, K {k}, I {i}, video {video}, aligned {}; suite {}/{}",
            cfg.chunk_rate(),
            aligned.len(),
            suite.passed(),
            suite.checks.len()
        ),
    )
}

fn posenc() -> Outcome {
    suite_outcome(&verify::posenc_suite(), Duration::from_secs(60))
}

fn si_sdr() -> Outcome {
    suite_outcome(&verify::signal_suite(), Duration::from_secs(60))
}

fn examples(opts: &CorpusOptions, split: Split, n: usize) -> Vec<Example> {
    let cfg = ModelConfig::tiny();
    (0..n)
        .map(|i| synth_example(opts, &cfg, split, i).unwrap())
        .collect()
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let corpus = CorpusOptions {
        clip_seconds: 0.5,
        seed: 1,
        ..CorpusOptions::default()
    };
    let train = examples(&corpus, Split::Train, 4);
    let opts = TrainOptions {
        lr: LR,
        max_steps: OVERFIT_STEPS,
        max_epochs: usize::MAX,
        seed: MODEL_SEED,
        ..TrainOptions::default()
    };
    let mut t = Trainer::new(
        TrainState::new(ModelConfig::tiny(), opts).unwrap(),
        &train,
        &train,
    )
    .unwrap();
    t.run().unwrap();
    let scores = evaluate(&t.state.model(), &train, CueMode::Envelope).unwrap();
    let sdri = mean_scores(&scores).2;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        sdri >= OVERFIT_MIN_SDRI && t.state.step <= OVERFIT_STEPS && secs < 300.0,
        format!(
            "train SI-SDRi {sdri:.2} dB after {} steps (need ≥ {OVERFIT_MIN_SDRI}); {secs:.0}s of 300s",
            t.state.step
        ),
    )
}

/// Corpus where the two talkers are drawn from the same pool, so only the
/// cue says which one to extract.
fn cue_corpus() -> (Vec<Example>, Vec<Example>, Vec<Example>) {
    let corpus = CorpusOptions {
        clip_seconds: 0.5,
        seed: 11,
        n_train: 32,
        n_val: 8,
        n_test: 16,
        ..CorpusOptions::default()
    };
    (
        examples(&corpus, Split::Train, 32),
        examples(&corpus, Split::Val, 8),
        examples(&corpus, Split::Test, 16),
    )
}

fn test_sdri(mode: CueMode, data: &(Vec<Example>, Vec<Example>, Vec<Example>)) -> (f64, usize) {
    let opts = TrainOptions {
        lr: LR,
        max_steps: CUE_MAX_STEPS,
        max_epochs: usize::MAX,
        seed: MODEL_SEED,
        cue_mode: mode,
        ..TrainOptions::default()
    };
    let mut t = Trainer::new(
        TrainState::new(ModelConfig::tiny(), opts).unwrap(),
        &data.0,
        &data.1,
    )
    .unwrap();
    t.run().unwrap();
    let scores = evaluate(&t.state.best_model(), &data.2, mode).unwrap();
    (mean_scores(&scores).2, t.state.step)
}

fn cue_dependence() -> Outcome {
    let data = cue_corpus();
    let (oracle, s1) = test_sdri(CueMode::Oracle, &data);
    let (constant, s2) = test_sdri(CueMode::Constant, &data);
    outcome(
        oracle >= CUE_ORACLE_MIN_SDRI && constant <= CUE_CONSTANT_MAX_SDRI,
        format!(
            "test SI-SDRi oracle cue {oracle:.2} dB ({s1} steps, need ≥ {CUE_ORACLE_MIN_SDRI}), \
             constant cue {constant:.2} dB ({s2} steps, need ≤ {CUE_CONSTANT_MAX_SDRI})"
        ),
    )
}

fn ablation() -> Outcome {
    let (train, val, test) = cue_corpus();
    let opts = TrainOptions {
        lr: LR,
        max_steps: 64,
        max_epochs: usize::MAX,
        seed: MODEL_SEED,
        cue_mode: CueMode::Oracle,
        ..TrainOptions::default()
    };
    let data = AblationData {
        train: &train,
        val: &val,
        eval: &test,
        out_dir: None,
    };
    let first = run_ablation(&ModelConfig::tiny(), &opts, &data, |_, _| {}).unwrap();
    let second = run_ablation(&ModelConfig::tiny(), &opts, &data, |_, _| {}).unwrap();
    let mut prints: Vec<&str> = first.iter().map(|c| c.fingerprint.as_str()).collect();
    prints.sort();
    prints.dedup();
    let full = first[0].si_sdr;
    let ordered = first[1..].iter().all(|c| full >= c.si_sdr);
    let cells: Vec<String> = first
        .iter()
        .map(|c| format!("{} {:.2}", c.name, c.si_sdr))
        .collect();
    outcome(
        first.len() == 4 && prints.len() == 4 && first == second,
        format!(
            "4 cells, identical across two runs: {}; full ≥ every ablated cell: {ordered} (reported only) [{}]",
            first == second,
            cells.join(", ")
        ),
    )
}

fn run_dir(dir: &Path, train: &[Example], steps: usize) -> TrainState {
    let opts = TrainOptions {
        lr: LR,
        max_steps: steps,
        seed: MODEL_SEED,
        ..TrainOptions::default()
    };
    let mut t = Trainer::new(
        TrainState::new(ModelConfig::tiny(), opts).unwrap(),
        train,
        &[],
    )
    .unwrap()
    .with_output(dir)
    .unwrap();
    t.run().unwrap();
    t.state
}

fn determinism() -> Outcome {
    let corpus = CorpusOptions {
        clip_seconds: 0.5,
        seed: 2,
        ..CorpusOptions::default()
    };
    let train = examples(&corpus, Split::Train, 4);
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();

    let a = run_dir(dirs[0].path(), &train, 14);
    run_dir(dirs[1].path(), &train, 14);
    let logs_match = read(&dirs[0], METRICS_FILE) == read(&dirs[1], METRICS_FILE);

    run_dir(dirs[2].path(), &train, 6);
    let mut state = TrainState::load(&dirs[2].path().join(STATE_FILE)).unwrap();
    state.opts.max_steps = 14;
    let mut t = Trainer::new(state, &train, &[])
        .unwrap()
        .with_output(dirs[2].path())
        .unwrap();
    t.run().unwrap();
    let resumed = t.state == a && read(&dirs[2], METRICS_FILE) == read(&dirs[0], METRICS_FILE);

    let ckpt = dirs[0].path().join("round.ckpt");
    checkpoint::save(&a.model(), &ckpt).unwrap();
    let back = checkpoint::load(&ckpt).unwrap();
    let round_trip = back.params == a.params && back.cfg == a.cfg;

    let suite = verify::persistence_suite();
    outcome(
        logs_match && resumed && round_trip && suite.all_passed(),
        format!(
            "log byte-identical {logs_match}, resume bit-exact {resumed}, checkpoint round trip {round_trip}, suite {}/{}",
            suite.passed(),
            suite.checks.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradients),
        ("chunk/overlap-add oracle", chunk_oracle),
        ("alignment identity", alignment),
        ("positional encodings", posenc),
        ("SI-SDR and mixing", si_sdr),
        ("overfit smoke test", overfit),
        ("cue dependence", cue_dependence),
        ("ablation harness", ablation),
        ("determinism and persistence", determinism),
    ];
    // `cargo test -- <filter>` runs only matching criteria
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        failures += usize::from(!result.passed);
        println!(
            "{}  {name:<28}  {}  [{:.1}s]",
            if result.passed { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
