//! End-to-end runs of the `avsep` binary.

use std::path::Path;
use std::process::{Command, Output};

fn avsep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsep"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = avsep(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing invocation.
fn fails(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = avsep(args, cwd);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.lines().count(),
        1,
        "expected one error line, got {err:?}"
    );
    (out.status.code().unwrap(), err.trim_end().to_string())
}

const TINY: &[&str] = &["--preset", "tiny"];

fn datagen(dir: &Path, name: &str, seed: &str) {
    let mut args = vec![
        "datagen",
        "--out",
        name,
        "--n-train",
        "4",
        "--n-val",
        "2",
        "--n-test",
        "2",
        "--clip-seconds",
        "0.5",
        "--seed",
        seed,
    ];
    args.extend_from_slice(TINY);
    ok(&args, dir);
}

fn train(dir: &Path, data: &str, out: &str, steps: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--out",
        out,
        "--max-steps",
        steps,
        "--lr",
        "2e-3",
        "--seed",
        "1",
    ];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args, dir)
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

#[test]
fn help_exists_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["datagen", "train", "extract", "eval", "ablate", "verify"] {
        let text = ok(&[sub, "--help"], dir.path());
        assert!(text.contains("Usage: avsep"), "{sub}");
    }
    assert!(ok(&["--help"], dir.path()).contains("ablate"));
}

#[test]
fn verify_passes_and_lists_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["verify"], dir.path());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("suite\tpassed\ttotal\tseconds"));
    let rows: Vec<Vec<&str>> = lines
        .by_ref()
        .take(6)
        .map(|l| l.split('\t').collect())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(
        names,
        [
            "gradients",
            "chunking",
            "alignment",
            "posenc",
            "signal",
            "persistence"
        ]
    );
    for r in &rows {
        assert_eq!(r[1], r[2], "{r:?}");
        assert!(r[2].parse::<usize>().unwrap() > 0);
    }
    assert!(text.trim_end().ends_with("verify\tall_passed=true"));
}

#[test]
fn oracle_extract_then_eval_hits_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "corpus", "3");
    train(d, "corpus", "run", "2", &[]);
    let manifest = read(d, "corpus/manifest.tsv");
    let item: Vec<&str> = manifest
        .lines()
        .find(|l| l.starts_with("test\t"))
        .unwrap()
        .split('\t')
        .collect();
    let (target, mixture, cue) = (
        format!("corpus/{}", item[2]),
        format!("corpus/{}", item[4]),
        format!("corpus/{}", item[5]),
    );
    ok(
        &[
            "extract",
            "--checkpoint",
            "run/best.ckpt",
            "--mixture",
            &mixture,
            "--debug-mask",
            "oracle",
            "--reference",
            &target,
            "--out",
            "ideal.wav",
        ],
        d,
    );
    ok(
        &[
            "eval",
            "--estimate",
            "ideal.wav",
            "--reference",
            &target,
            "--mixture",
            &mixture,
            "--record",
            "ideal.tsv",
        ],
        d,
    );
    let record = read(d, "ideal.tsv");
    let mut lines = record.lines();
    assert_eq!(lines.next(), Some("# item\tsi_sdr_db\tsi_sdri_db"));
    let row: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(row[1], "60.000000");

    // the network path runs and produces a finite score
    ok(
        &[
            "extract",
            "--checkpoint",
            "run/best.ckpt",
            "--mixture",
            &mixture,
            "--cue",
            &cue,
            "--out",
            "est.wav",
        ],
        d,
    );
    let table = ok(
        &["eval", "--estimate", "est.wav", "--reference", &target],
        d,
    );
    let sdr: f64 = table
        .lines()
        .nth(1)
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(sdr.is_finite() && sdr < 60.0);
}

#[test]
fn eval_over_a_split_writes_one_row_per_item_plus_mean() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "corpus", "4");
    train(d, "corpus", "run", "2", &[]);
    let table = ok(
        &[
            "eval",
            "--checkpoint",
            "run/best.ckpt",
            "--data",
            "corpus",
            "--split",
            "test",
            "--record",
            "scores.tsv",
        ],
        d,
    );
    assert_eq!(table.lines().count(), 1 + 2 + 1);
    let record = read(d, "scores.tsv");
    let rows: Vec<&str> = record.lines().collect();
    assert_eq!(rows.len(), 1 + 2 + 1);
    assert!(rows[1].starts_with("test-00000-"));
    assert!(rows[3].starts_with("mean\t"));
}

#[test]
fn seeded_commands_are_deterministic_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "a", "8");
    datagen(d, "b", "8");
    assert_eq!(read(d, "a/manifest.tsv"), read(d, "b/manifest.tsv"));

    train(d, "a", "run1", "7", &[]);
    train(d, "a", "run2", "7", &[]);
    assert_eq!(read(d, "run1/metrics.tsv"), read(d, "run2/metrics.tsv"));

    train(d, "a", "run3", "3", &[]);
    ok(
        &[
            "train",
            "--data",
            "a",
            "--out",
            "run3",
            "--resume",
            "--max-steps",
            "7",
        ],
        d,
    );
    assert_eq!(read(d, "run1/metrics.tsv"), read(d, "run3/metrics.tsv"));
    assert_eq!(
        std::fs::read(d.join("run1/state.ckpt")).unwrap(),
        std::fs::read(d.join("run3/state.ckpt")).unwrap()
    );
}

#[test]
fn ablate_emits_four_fingerprinted_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "corpus", "5");
    let run = |out: &str| {
        let mut args = vec![
            "ablate",
            "--data",
            "corpus",
            "--out",
            out,
            "--max-steps",
            "3",
            "--seed",
            "2",
        ];
        args.extend_from_slice(TINY);
        ok(&args, d)
    };
    let stdout = run("abl1");
    run("abl2");
    let table = read(d, "abl1/ablation.tsv");
    assert_eq!(table, read(d, "abl2/ablation.tsv"));
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 4);
    let cells: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
    assert_eq!(
        cells,
        [
            ("full", "true", "true"),
            ("no-2dpos", "true", "false"),
            ("no-ca", "false", "true"),
            ("no-ca-no-2dpos", "false", "false")
        ]
    );
    let mut prints: Vec<&str> = rows.iter().map(|r| r[3]).collect();
    prints.sort();
    prints.dedup();
    assert_eq!(prints.len(), 4);
    assert!(stdout.contains("full_ge_ablated\t"));
    // rerunning into the same directory replaces rather than appends
    run("abl1");
    assert_eq!(read(d, "abl1/ablation.tsv"), table);
    assert_eq!(
        read(d, "abl1/full/metrics.tsv"),
        read(d, "abl2/full/metrics.tsv")
    );
}

#[test]
fn config_file_then_flags_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "corpus", "6");
    std::fs::write(
        d.join("cfg.toml"),
        "N = 16\nN_head = 2\nmask_activation = \"relu\"\n\n[train]\nlr = 0.01\nmax_steps = 1\n",
    )
    .unwrap();
    let mut args = vec![
        "train", "--data", "corpus", "--out", "run", "--config", "cfg.toml", "--N", "32",
    ];
    args.extend_from_slice(TINY);
    ok(&args, d);
    let cfg = read(d, "run/config.toml");
    assert!(cfg.contains("N = 32"), "{cfg}");
    assert!(cfg.contains("N_head = 2"));
    assert!(cfg.contains("mask_activation = \"relu\""));
    let log = read(d, "run/metrics.tsv");
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().nth(1).unwrap().ends_with("1.000000e-2"));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datagen(d, "corpus", "7");

    let (code, line) = fails(
        &[
            "train", "--data", "corpus", "--out", "r", "--preset", "tiny", "--C", "14",
        ],
        d,
    );
    assert_eq!(code, 2);
    assert!(
        line.starts_with("error\tcode=2\tkind=config\tmsg="),
        "{line}"
    );

    std::fs::write(d.join("bad.toml"), "N = 32\nunknown_key = 1\n").unwrap();
    assert_eq!(
        fails(&["datagen", "--out", "x", "--config", "bad.toml"], d).0,
        2
    );
    assert_eq!(fails(&["frobnicate"], d).0, 2);

    let (code, line) = fails(
        &[
            "train", "--data", "missing", "--out", "r", "--preset", "tiny",
        ],
        d,
    );
    assert_eq!(code, 3);
    assert!(line.contains("kind=io"), "{line}");

    // a corpus built for N=32 cannot feed an N=16 model
    let (code, line) = fails(
        &[
            "train", "--data", "corpus", "--out", "r", "--preset", "tiny", "--N", "16",
        ],
        d,
    );
    assert_eq!(code, 4, "{line}");
    assert!(line.contains("kind=alignment"));

    train(d, "corpus", "run", "1", &[]);
    let (code, _) = fails(
        &[
            "train", "--data", "corpus", "--out", "run", "--preset", "tiny",
        ],
        d,
    );
    assert_eq!(code, 2);
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let (code, line) = fails(
        &[
            "extract",
            "--checkpoint",
            "junk.ckpt",
            "--mixture",
            "m.wav",
            "--cue",
            "c.bin",
            "--out",
            "o.wav",
        ],
        d,
    );
    assert_eq!(code, 3);
    assert!(line.contains("kind=checkpoint"), "{line}");
}
