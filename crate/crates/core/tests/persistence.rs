//! Checkpoints, resumable training state and run-to-run determinism.

use std::path::Path;

use avsep_core::checkpoint;
use avsep_core::datagen::{gen_corpus, CorpusOptions, Example, Manifest, Split};
use avsep_core::model::{param_count, Model};
use avsep_core::training::{TrainOptions, TrainState, Trainer, METRICS_FILE, STATE_FILE};
use avsep_core::{Error, ModelConfig};

/// Parameter count of the default architecture, frozen to catch accidental
/// changes to the layer inventory.
const DEFAULT_PARAM_COUNT: usize = 12_908_544;

#[test]
fn default_parameter_count_is_frozen() {
    let cfg = ModelConfig::default();
    assert_eq!(param_count(&cfg), DEFAULT_PARAM_COUNT);
    assert_eq!(
        Model::<f32>::new(cfg, 0).unwrap().param_count(),
        DEFAULT_PARAM_COUNT
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::new(ModelConfig::tiny(), 42).unwrap();
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.cfg, model.cfg);
    for ((na, a), (nb, b)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(na, nb);
        let bits =
            |t: &avsep_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{na}");
    }
    let bytes = std::fs::read(&path).unwrap();
    checkpoint::save(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&Model::<f32>::new(ModelConfig::tiny(), 1).unwrap(), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

fn corpus(dir: &Path) -> (Vec<Example>, Vec<Example>) {
    let cfg = ModelConfig::tiny();
    let opts = CorpusOptions {
        n_train: 4,
        n_val: 2,
        n_test: 0,
        clip_seconds: 0.5,
        seed: 5,
        ..CorpusOptions::default()
    };
    gen_corpus(&opts, &cfg, dir).unwrap();
    let m = Manifest::read(dir).unwrap();
    (
        m.load_split(Split::Train, &cfg).unwrap(),
        m.load_split(Split::Val, &cfg).unwrap(),
    )
}

fn opts(max_steps: usize) -> TrainOptions {
    TrainOptions {
        lr: 2e-3,
        max_steps,
        seed: 3,
        ..TrainOptions::default()
    }
}

fn train_into(out: &Path, train: &[Example], val: &[Example], steps: usize) -> TrainState {
    let state = TrainState::new(ModelConfig::tiny(), opts(steps)).unwrap();
    let mut t = Trainer::new(state, train, val)
        .unwrap()
        .with_output(out)
        .unwrap();
    t.run().unwrap();
    t.state
}

#[test]
fn seeded_runs_write_identical_logs() {
    let data = tempfile::tempdir().unwrap();
    let (train, val) = corpus(data.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_into(a.path(), &train, &val, 10);
    train_into(b.path(), &train, &val, 10);
    let log = std::fs::read(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log, std::fs::read(b.path().join(METRICS_FILE)).unwrap());
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 1 + 10 + 2);
    assert_eq!(
        std::fs::read(a.path().join(STATE_FILE)).unwrap(),
        std::fs::read(b.path().join(STATE_FILE)).unwrap()
    );
}

#[test]
fn resuming_continues_bit_exactly() {
    let data = tempfile::tempdir().unwrap();
    let (train, val) = corpus(data.path());
    let straight = tempfile::tempdir().unwrap();
    let reference = train_into(straight.path(), &train, &val, 11);

    // stop mid-epoch, reload from disk, finish the budget
    let split = tempfile::tempdir().unwrap();
    train_into(split.path(), &train, &val, 5);
    let mut state = TrainState::load(&split.path().join(STATE_FILE)).unwrap();
    assert_eq!((state.step, state.cursor), (5, 1));
    state.opts.max_steps = 11;
    let mut t = Trainer::new(state, &train, &val)
        .unwrap()
        .with_output(split.path())
        .unwrap();
    t.run().unwrap();

    assert_eq!(t.state, reference);
    assert_eq!(
        std::fs::read(split.path().join(METRICS_FILE)).unwrap(),
        std::fs::read(straight.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn state_file_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let (train, val) = corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let state = train_into(out.path(), &train, &val, 6);
    let back = TrainState::load(&out.path().join(STATE_FILE)).unwrap();
    assert_eq!(back, state);
    assert!(back.best.is_some());
}
