//! Subcommand bodies. Each returns the process result; `main` maps errors to
//! exit codes.

use std::fmt::Write as _;
use std::path::Path;

use avsep_core::checkpoint;
use avsep_core::datagen::{gen_corpus, Example, Manifest, Split};
use avsep_core::model::ForwardOptions;
use avsep_core::signal::{si_sdr, si_sdr_improvement};
use avsep_core::training::{
    evaluate, mean_scores, run_ablation, AblationData, EpochReport, ItemScore, TrainState, Trainer,
    ABLATION_CELLS, BEST_CHECKPOINT, METRICS_FILE, STATE_FILE,
};
use avsep_core::verify;
use avsep_core::visualcue::{constant_cue, read_cue};
use avsep_core::wav::{read_wav, write_wav};
use avsep_core::{Error, ModelConfig, Result};

use crate::args::{
    AblateArgs, DatagenArgs, DebugMask, EvalArgs, ExtractArgs, TrainArgs, VerifyArgs,
};

/// Header of the `eval --record` file.
pub const EVAL_HEADER: &str = "# item\tsi_sdr_db\tsi_sdri_db";
/// Header of `ablation.tsv`.
pub const ABLATION_HEADER: &str =
    "# cell\tuse_cross_attention\tuse_2d_pos\tfingerprint\tsi_sdr_db\tsi_sdri_db";
pub const ABLATION_FILE: &str = "ablation.tsv";
const CONFIG_COPY: &str = "config.toml";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn datagen(args: &DatagenArgs) -> Result<()> {
    let (cfg, _) = args.model.resolve()?;
    let manifest = gen_corpus(&args.corpus(), &cfg, &args.out)?;
    println!(
        "datagen\titems={}\tmanifest={}",
        manifest.items.len(),
        manifest.path().display()
    );
    Ok(())
}

fn load_splits(data: &Path, cfg: &ModelConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let manifest = Manifest::read(data)?;
    let train = manifest.load_split(Split::Train, cfg)?;
    let val = manifest.load_split(Split::Val, cfg)?;
    Ok((train, val))
}

fn report_epoch(prefix: &str, r: &EpochReport) {
    println!(
        "{prefix}epoch={}\tval_loss={:.4}\tval_si_sdr={:.3}\tval_si_sdri={:.3}\tlr={:.3e}{}",
        r.epoch,
        r.val_loss,
        r.val_si_sdr,
        r.val_si_sdri,
        r.lr,
        if r.event.improved { "\tbest" } else { "" }
    );
}

/// Train until `trainer` is finished, echoing each epoch.
fn drive(trainer: &mut Trainer, prefix: &str) -> Result<()> {
    while !trainer.finished() {
        if let Some(r) = trainer.step()?.epoch_end {
            report_epoch(prefix, &r);
        }
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let state_path = args.out.join(STATE_FILE);
    let state = if args.resume {
        let mut state = TrainState::load(&state_path)?;
        if let Some(n) = args.train.max_steps {
            state.opts.max_steps = n;
        }
        if let Some(n) = args.train.max_epochs {
            state.opts.max_epochs = n;
        }
        state
    } else {
        if args.out.join(METRICS_FILE).exists() {
            return Err(Error::Config(format!(
                "{} already holds a training run; pass --resume or pick a new --out",
                args.out.display()
            )));
        }
        let (cfg, train_file) = args.model.resolve()?;
        let opts = args.train.resolve(train_file)?;
        TrainState::new(cfg, opts)?
    };
    write_text(&args.out.join(CONFIG_COPY), &state.cfg.to_toml_string())?;
    let (train, val) = load_splits(&args.data, &state.cfg)?;
    let mut trainer = Trainer::new(state, &train, &val)?.with_output(&args.out)?;
    drive(&mut trainer, "")?;
    trainer.run()?;
    let s = &trainer.state;
    println!(
        "trained\tsteps={}\tepochs={}\tparams={}\tbest={}",
        s.step,
        s.epoch,
        s.params.numel(),
        args.out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

pub fn extract(args: &ExtractArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let mixture = read_wav(&args.mixture, model.cfg.sample_rate)?;
    let estimate = match args.debug_mask {
        DebugMask::Oracle => {
            let path = args
                .reference
                .as_deref()
                .ok_or_else(|| Error::Config("--debug-mask oracle needs --reference".into()))?;
            let reference = read_wav(path, model.cfg.sample_rate)?;
            if reference.len() != mixture.len() {
                return Err(Error::Data(format!(
                    "reference has {} samples, mixture {}",
                    reference.len(),
                    mixture.len()
                )));
            }
            reference
        }
        mode => {
            let cue = match &args.cue {
                Some(p) => read_cue(p, model.cfg.cue_frame_rate)?,
                None if mode == DebugMask::Unit => constant_cue(
                    model.cfg.feature_dim,
                    model.chunk_count(mixture.len())?,
                    model.cfg.cue_frame_rate,
                ),
                None => return Err(Error::Config("--cue is required".into())),
            };
            let opts = ForwardOptions {
                force_unit_mask: mode == DebugMask::Unit,
            };
            model.extract_with(&mixture, &cue, opts, None)?
        }
    };
    write_wav(&args.out, &estimate)?;
    println!(
        "extracted\tsamples={}\tout={}",
        estimate.len(),
        args.out.display()
    );
    Ok(())
}

fn render_scores(scores: &[ItemScore]) -> (String, String) {
    let (_, sdr, sdri) = mean_scores(scores);
    let width = scores.iter().map(|s| s.id.len()).max().unwrap_or(0).max(4);
    let mut table = format!("{:<width$}  {:>10}  {:>10}\n", "item", "SI-SDR", "SI-SDRi");
    let mut record = format!("{EVAL_HEADER}\n");
    let rows = scores
        .iter()
        .map(|s| (s.id.as_str(), s.si_sdr, s.si_sdri))
        .chain(std::iter::once(("mean", sdr, sdri)));
    for (id, a, b) in rows {
        let _ = writeln!(table, "{id:<width$}  {a:>10.3}  {b:>10.3}");
        let _ = writeln!(record, "{id}\t{a:.6}\t{b:.6}");
    }
    (table, record)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let scores = match (&args.checkpoint, &args.estimate) {
        (Some(ckpt), _) => {
            let model = checkpoint::load(ckpt)?;
            let data = args.data.as_deref().expect("clap enforces --data");
            let examples = Manifest::read(data)?.load_split(args.split, &model.cfg)?;
            if examples.is_empty() {
                return Err(Error::Data(format!("split {} is empty", args.split)));
            }
            evaluate(&model, &examples, args.cue_mode.into())?
        }
        (None, Some(est)) => {
            let reference = args
                .reference
                .as_deref()
                .expect("clap enforces --reference");
            vec![score_pair(args, est, reference)?]
        }
        (None, None) => {
            return Err(Error::Config(
                "eval needs --checkpoint with --data, or --estimate with --reference".into(),
            ))
        }
    };
    let (table, record) = render_scores(&scores);
    print!("{table}");
    if let Some(path) = &args.record {
        write_text(path, &record)?;
    }
    Ok(())
}

fn score_pair(args: &EvalArgs, est: &Path, reference: &Path) -> Result<ItemScore> {
    let read = |p: &Path| read_wav(p, args.sample_rate);
    let est_sig = read(est)?;
    let ref_sig = read(reference)?;
    let sdr = si_sdr(&est_sig, &ref_sig)?;
    let sdri = match &args.mixture {
        Some(m) => si_sdr_improvement(&est_sig, &read(m)?, &ref_sig)?,
        None => f64::NAN,
    };
    let id = est
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "estimate".into());
    Ok(ItemScore {
        id,
        loss: -sdr,
        si_sdr: sdr,
        si_sdri: sdri,
    })
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let (base, train_file) = args.model.resolve()?;
    let opts = args.train.resolve(train_file)?;
    let manifest = Manifest::read(&args.data)?;
    let train = manifest.load_split(Split::Train, &base)?;
    let val = manifest.load_split(Split::Val, &base)?;
    let eval_set = manifest.load_split(args.split, &base)?;
    for (name, ca, pos) in ABLATION_CELLS {
        let cfg = ModelConfig {
            use_cross_attention: ca,
            use_2d_pos: pos,
            ..base.clone()
        };
        write_text(
            &args.out.join(name).join(CONFIG_COPY),
            &cfg.to_toml_string(),
        )?;
    }
    let data = AblationData {
        train: &train,
        val: &val,
        eval: &eval_set,
        out_dir: Some(&args.out),
    };
    let cells = run_ablation(&base, &opts, &data, |name, r| {
        report_epoch(&format!("{name}\t"), r)
    })?;

    let mut record = format!("{ABLATION_HEADER}\n");
    println!(
        "{:<16}  {:>3}  {:>6}  {:<12}  {:>10}",
        "cell", "CA", "2DPos", "fingerprint", "SI-SDR"
    );
    let mark = |b: bool| if b { "yes" } else { "no" };
    for c in &cells {
        println!(
            "{:<16}  {:>3}  {:>6}  {:<12}  {:>10.3}",
            c.name,
            mark(c.use_cross_attention),
            mark(c.use_2d_pos),
            c.fingerprint,
            c.si_sdr
        );
        let _ = writeln!(
            record,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            c.name, c.use_cross_attention, c.use_2d_pos, c.fingerprint, c.si_sdr, c.si_sdri
        );
    }
    write_text(&args.out.join(ABLATION_FILE), &record)?;
    let holds = cells[1..].iter().all(|c| cells[0].si_sdr >= c.si_sdr);
    println!("full_ge_ablated\t{holds}");
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let reports = verify::run_all();
    println!("suite\tpassed\ttotal\tseconds");
    for r in &reports {
        println!(
            "{}\t{}\t{}\t{:.2}",
            r.name,
            r.passed(),
            r.checks.len(),
            r.seconds
        );
    }
    let mut failed = 0;
    for r in &reports {
        for c in &r.checks {
            if !c.passed || args.verbose {
                let tag = if c.passed { "ok" } else { "FAIL" };
                println!("{tag}\t{}\t{}\t{}", r.name, c.name, c.detail);
            }
            failed += usize::from(!c.passed);
        }
    }
    if failed > 0 {
        return Err(Error::Verification(format!("{failed} checks failed")));
    }
    println!("verify\tall_passed=true");
    Ok(())
}
