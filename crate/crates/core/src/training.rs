//! Optimization loop: negative SI-SDR loss, Adam with global-norm clipping,
//! validation-driven learning-rate halving and early stopping.
//!
//! Nothing random is carried between steps. The epoch order is a shuffle
//! seeded from `(seed, epoch)` and dropout masks are seeded from
//! `(seed, example counter)`, so a [`TrainState`] written at any step resumes
//! bit-exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::checkpoint::{self, config_from_json, read_archive, write_archive};
use crate::chunking::align_cue;
use crate::config::ModelConfig;
use crate::datagen::{derive_seed, Example};
use crate::error::{Error, Result};
use crate::frontend::AudioSignal;
use crate::model::{forward_var, ForwardOptions, Model, ENCODER};
use crate::params::ParamStore;
use crate::signal::{neg_si_sdr_var, si_sdr, si_sdr_uncapped, SI_SDR_CAP};
use crate::tensor::{Tape, Tensor};
use crate::visualcue::oracle_cue;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_HEADER: &str = "# event\tsplit\tloss\tsi_sdr\tsi_sdri\tlr";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_FILE: &str = "state.ckpt";

/// Which cue the separator sees during training and evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueMode {
    /// The per-item cue file (band-energy envelope of the target).
    #[default]
    Envelope,
    /// Target encoded with the current encoder weights, averaged per chunk.
    Oracle,
    /// All zeros; carries no information.
    Constant,
}

impl fmt::Display for CueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CueMode::Envelope => "envelope",
            CueMode::Oracle => "oracle",
            CueMode::Constant => "constant",
        })
    }
}

impl FromStr for CueMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "envelope" => Ok(CueMode::Envelope),
            "oracle" => Ok(CueMode::Oracle),
            "constant" => Ok(CueMode::Constant),
            _ => Err(Error::Config(format!(
                "unknown cue mode {s:?} (expected envelope, oracle or constant)"
            ))),
        }
    }
}

impl CueMode {
    /// The `N×I` cue for `ex`, aligned to the chunk count of its mixture.
    pub fn resolve(self, ex: &Example, model: &Model<f32>) -> Result<Tensor<f32>> {
        let i = model.chunk_count(ex.mixture.len())?;
        let n = model.cfg.feature_dim;
        match self {
            CueMode::Envelope => Ok(align_cue(&ex.cue, i)?.values),
            CueMode::Oracle => {
                let cue = oracle_cue(&ex.target, model.params.get(ENCODER)?, &model.cfg)?;
                Ok(align_cue(&cue, i)?.values)
            }
            CueMode::Constant => Ok(Tensor::zeros(&[n, i])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub seed: u64,
    pub cue_mode: CueMode,
    /// Global gradient-norm ceiling (≤ 0 disables clipping).
    pub clip_norm: f64,
    /// Examples averaged per optimizer step.
    pub accumulate: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            max_epochs: 100,
            max_steps: 0,
            seed: 0,
            cue_mode: CueMode::Envelope,
            clip_norm: 5.0,
            accumulate: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.accumulate == 0 {
            return Err(Error::Config("accumulate must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    lr: f64,
    h: AdamHyper,
) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {name}")));
    }
    state.t += 1;
    let c1 = 1.0 - h.beta1.powi(state.t as i32);
    let c2 = 1.0 - h.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient of {name} has the wrong shape"),
            ));
        }
        if !state.m.contains(name) {
            state.m.insert(name.clone(), Tensor::zeros(g.shape()));
            state.v.insert(name.clone(), Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gi = gi as f64;
            let m_new = h.beta1 * *mi as f64 + (1.0 - h.beta1) * gi;
            let v_new = h.beta2 * *vi as f64 + (1.0 - h.beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + h.eps);
            *pi = (*pi as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Learning-rate plateau schedule in units of epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub best_val_loss: Option<f64>,
    pub epochs_since_improvement: usize,
    pub stop: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleEvent {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Epochs without improvement before the learning rate is halved.
pub const HALVE_AFTER: usize = 3;
/// Epochs without improvement before training stops.
pub const STOP_AFTER: usize = 5;

impl Schedule {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best_val_loss: None,
            epochs_since_improvement: 0,
            stop: false,
        }
    }

    /// Record one epoch's validation loss.
    pub fn update(&mut self, val_loss: f64) -> ScheduleEvent {
        let mut ev = ScheduleEvent::default();
        if self.best_val_loss.is_none_or(|b| val_loss < b) {
            self.best_val_loss = Some(val_loss);
            self.epochs_since_improvement = 0;
            ev.improved = true;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement == HALVE_AFTER {
                self.lr *= 0.5;
                ev.halved = true;
            }
            if self.epochs_since_improvement >= STOP_AFTER {
                self.stop = true;
            }
        }
        ev.stop = self.stop;
        ev
    }
}

/// Steps a loss may stay above the divergence threshold before aborting.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Aborts on a NaN loss, or on a loss above `10·max(|initial|, 1)` for
/// [`DIVERGENCE_PATIENCE`] consecutive steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceGuard {
    pub initial: Option<f64>,
    pub over: usize,
}

impl DivergenceGuard {
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss is {loss} at step {step}")));
        }
        let initial = *self.initial.get_or_insert(loss);
        let limit = 10.0 * initial.abs().max(1.0);
        if loss > limit {
            self.over += 1;
            if self.over >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged(format!(
                    "loss above {limit:.3} for {} consecutive steps (now {loss:.3} at step {step})",
                    self.over
                )));
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cfg: ModelConfig,
    pub opts: TrainOptions,
    /// Optimizer steps taken.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Examples consumed in the current epoch.
    pub cursor: usize,
    /// Examples consumed overall; seeds dropout.
    pub seen: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub schedule: Schedule,
    pub guard: DivergenceGuard,
    /// Parameters at the best validation loss so far.
    pub best: Option<ParamStore<f32>>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    kind: String,
    config: serde_json::Value,
    opts: TrainOptions,
    step: usize,
    epoch: usize,
    cursor: usize,
    seen: u64,
    adam_t: u64,
    schedule: Schedule,
    guard: DivergenceGuard,
    has_best: bool,
}

const P_PARAM: &str = "param.";
const P_M: &str = "adam.m.";
const P_V: &str = "adam.v.";
const P_BEST: &str = "best.";

impl TrainState {
    pub fn new(cfg: ModelConfig, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let model = Model::new(cfg, opts.seed)?;
        Ok(Self {
            cfg: model.cfg,
            schedule: Schedule::new(opts.lr),
            opts,
            step: 0,
            epoch: 0,
            cursor: 0,
            seen: 0,
            params: model.params,
            adam: AdamState::default(),
            guard: DivergenceGuard::default(),
            best: None,
        })
    }

    pub fn model(&self) -> Model<f32> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
        }
    }

    /// Best-validation model, or the current one if no epoch has finished.
    pub fn best_model(&self) -> Model<f32> {
        Model {
            cfg: self.cfg.clone(),
            params: self.best.clone().unwrap_or_else(|| self.params.clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = StateHeader {
            kind: "train_state".into(),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            opts: self.opts.clone(),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            seen: self.seen,
            adam_t: self.adam.t,
            schedule: self.schedule.clone(),
            guard: self.guard.clone(),
            has_best: self.best.is_some(),
        };
        let mut stores = vec![
            (P_PARAM, &self.params),
            (P_M, &self.adam.m),
            (P_V, &self.adam.v),
        ];
        if let Some(best) = &self.best {
            stores.push((P_BEST, best));
        }
        let named: Vec<(String, &Tensor<f32>)> = stores
            .into_iter()
            .flat_map(|(prefix, store)| store.iter().map(move |(k, v)| (format!("{prefix}{k}"), v)))
            .collect();
        let header = serde_json::to_value(header).expect("header serializes");
        write_archive(path, &header, named.iter().map(|(k, v)| (k.as_str(), *v)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        let h: StateHeader = serde_json::from_value(archive.header)
            .map_err(|e| Error::Checkpoint(format!("training state header: {e}")))?;
        if h.kind != "train_state" {
            return Err(Error::Checkpoint(format!(
                "archive holds a {:?}, not a training state",
                h.kind
            )));
        }
        let cfg = config_from_json(h.config)?;
        let mut stores: [ParamStore<f32>; 4] = Default::default();
        for (name, t) in archive.tensors {
            let (slot, rest) = [P_PARAM, P_M, P_V, P_BEST]
                .iter()
                .enumerate()
                .find_map(|(i, p)| name.strip_prefix(p).map(|r| (i, r.to_string())))
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
            stores[slot].insert(rest, t);
        }
        let [params, m, v, best] = stores;
        let params = Model::from_params(cfg.clone(), params)?.params;
        let best = if h.has_best {
            Some(Model::from_params(cfg.clone(), best)?.params)
        } else {
            None
        };
        Ok(Self {
            cfg,
            opts: h.opts,
            step: h.step,
            epoch: h.epoch,
            cursor: h.cursor,
            seen: h.seen,
            params,
            adam: AdamState { m, v, t: h.adam_t },
            schedule: h.schedule,
            guard: h.guard,
            best,
        })
    }
}

/// Loss and gradients of one example.
pub fn example_gradients(
    model: &Model<f32>,
    ex: &Example,
    cue: &Tensor<f32>,
    dropout: &mut Option<Dropout>,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let y = forward_var(
        &mut tape,
        &vars,
        &ex.mixture.samples,
        cue,
        &model.cfg,
        ForwardOptions::default(),
        dropout,
        None,
    )?;
    let loss = neg_si_sdr_var(&mut tape, &y, &ex.target.samples)?;
    let grads = tape.backward(&loss)?;
    let out = vars
        .iter()
        .map(|(name, v)| (name.to_string(), grads.get_or_zeros(v)))
        .collect();
    Ok((loss.value().data()[0] as f64, out))
}

/// Per-item evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemScore {
    pub id: String,
    /// Negative uncapped SI-SDR of the estimate.
    pub loss: f64,
    pub si_sdr: f64,
    pub si_sdri: f64,
}

/// Mean over items of loss, SI-SDR and SI-SDRi.
pub fn mean_scores(scores: &[ItemScore]) -> (f64, f64, f64) {
    let n = scores.len().max(1) as f64;
    let sum = scores.iter().fold((0.0, 0.0, 0.0), |a, s| {
        (a.0 + s.loss, a.1 + s.si_sdr, a.2 + s.si_sdri)
    });
    (sum.0 / n, sum.1 / n, sum.2 / n)
}

pub fn score(estimate: &AudioSignal, ex: &Example) -> Result<ItemScore> {
    let raw = si_sdr_uncapped(&estimate.samples, &ex.target.samples)?;
    let capped = raw.clamp(-SI_SDR_CAP, SI_SDR_CAP);
    Ok(ItemScore {
        id: ex.id.clone(),
        loss: -raw,
        si_sdr: capped,
        si_sdri: capped - si_sdr(&ex.mixture, &ex.target)?,
    })
}

/// Score `model` on every example; items are processed in parallel.
pub fn evaluate(model: &Model<f32>, examples: &[Example], mode: CueMode) -> Result<Vec<ItemScore>> {
    let items: Vec<&Example> = examples.iter().collect();
    crate::par::map(items, |ex| {
        let cue = mode.resolve(ex, model)?;
        let cue = crate::visualcue::VisualFeature {
            values: cue,
            frame_rate: model.cfg.cue_frame_rate,
        };
        let est = model.extract(&ex.mixture, &cue)?;
        score(&est, ex)
    })
    .into_iter()
    .collect()
}

/// Append-only tab-separated metrics, mirrored to a file when one is set.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub lines: Vec<String>,
    file: Option<PathBuf>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Log appending to `path`; writes the header if the file is new.
    pub fn to_file(path: &Path) -> Result<Self> {
        let log = Self {
            lines: Vec::new(),
            file: Some(path.to_path_buf()),
        };
        if !path.exists() {
            std::fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
        Ok(log)
    }

    pub fn record(
        &mut self,
        event: &str,
        split: &str,
        loss: f64,
        si_sdr: f64,
        si_sdri: f64,
        lr: f64,
    ) -> Result<()> {
        let line = format!("{event}\t{split}\t{loss:.6}\t{si_sdr:.6}\t{si_sdri:.6}\t{lr:.6e}");
        if let Some(path) = &self.file {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.lines.push(line);
        Ok(())
    }
}

/// Outcome of a single optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    /// Set when this step finished an epoch.
    pub epoch_end: Option<EpochReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub val_loss: f64,
    pub val_si_sdr: f64,
    pub val_si_sdri: f64,
    /// Learning rate after the schedule reacted to this epoch.
    pub lr: f64,
    pub event: ScheduleEvent,
}

pub struct Trainer<'a> {
    pub state: TrainState,
    pub log: MetricsLog,
    train: &'a [Example],
    val: &'a [Example],
    out_dir: Option<PathBuf>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE0C0_0000 + epoch as u64));
    order.shuffle(&mut rng);
    order
}

impl<'a> Trainer<'a> {
    /// `val` may be empty, in which case the train split is used for
    /// validation.
    pub fn new(state: TrainState, train: &'a [Example], val: &'a [Example]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        Ok(Self {
            state,
            log: MetricsLog::in_memory(),
            train,
            val: if val.is_empty() { train } else { val },
            out_dir: None,
        })
    }

    /// Mirror the metrics log, best checkpoint and state into `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.log = MetricsLog::to_file(&dir.join(METRICS_FILE))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn finished(&self) -> bool {
        let s = &self.state;
        s.schedule.stop
            || s.epoch >= s.opts.max_epochs
            || (s.opts.max_steps > 0 && s.step >= s.opts.max_steps)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let n = self.train.len();
        let order = epoch_order(self.state.opts.seed, self.state.epoch, n);
        let take = self.state.opts.accumulate.min(n - self.state.cursor);
        let model = self.state.model();
        let mut sum: Option<BTreeMap<String, Tensor<f32>>> = None;
        let mut loss = 0.0;
        let mut sdr = 0.0;
        let mut sdri = 0.0;
        for j in 0..take {
            let ex = &self.train[order[self.state.cursor + j]];
            let cue = self.state.opts.cue_mode.resolve(ex, &model)?;
            let mut dropout = (self.cfg().dropout > 0.0).then(|| {
                Dropout::new(
                    self.cfg().dropout,
                    derive_seed(self.state.opts.seed, self.state.seen + j as u64),
                )
            });
            let (l, g) = example_gradients(&model, ex, &cue, &mut dropout)?;
            let capped = (-l).clamp(-SI_SDR_CAP, SI_SDR_CAP);
            loss += l;
            sdr += capped;
            sdri += capped - si_sdr(&ex.mixture, &ex.target)?;
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (k, t) in g {
                        let a = acc.get_mut(&k).expect("same parameter set");
                        a.data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(x, y)| *x += *y);
                    }
                }
            }
        }
        let inv = 1.0 / take as f64;
        let (loss, sdr, sdri) = (loss * inv, sdr * inv, sdri * inv);
        self.state.guard.observe(self.state.step, loss)?;
        let mut grads = sum.expect("at least one example per step");
        if take > 1 {
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv as f32);
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.state.opts.clip_norm);
        let hyper = AdamHyper {
            beta1: self.state.opts.beta1,
            beta2: self.state.opts.beta2,
            eps: self.state.opts.adam_eps,
        };
        let lr = self.state.schedule.lr;
        adam_step(
            &mut self.state.adam,
            &mut self.state.params,
            &grads,
            lr,
            hyper,
        )?;
        self.state.step += 1;
        self.state.cursor += take;
        self.state.seen += take as u64;
        self.log.record(
            &format!("step={}", self.state.step),
            "train",
            loss,
            sdr,
            sdri,
            lr,
        )?;

        let epoch_end = if self.state.cursor == n {
            Some(self.end_epoch()?)
        } else {
            None
        };
        Ok(StepReport {
            loss,
            grad_norm,
            epoch_end,
        })
    }

    fn cfg(&self) -> &ModelConfig {
        &self.state.cfg
    }

    fn end_epoch(&mut self) -> Result<EpochReport> {
        let scores = evaluate(&self.state.model(), self.val, self.state.opts.cue_mode)?;
        let (val_loss, val_si_sdr, val_si_sdri) = mean_scores(&scores);
        let event = self.state.schedule.update(val_loss);
        if event.improved {
            self.state.best = Some(self.state.params.clone());
        }
        self.state.epoch += 1;
        self.state.cursor = 0;
        self.log.record(
            &format!("epoch={}", self.state.epoch),
            "val",
            val_loss,
            val_si_sdr,
            val_si_sdri,
            self.state.schedule.lr,
        )?;
        if let Some(dir) = &self.out_dir {
            if event.improved {
                checkpoint::save(&self.state.model(), &dir.join(BEST_CHECKPOINT))?;
            }
            self.state.save(&dir.join(STATE_FILE))?;
        }
        Ok(EpochReport {
            epoch: self.state.epoch,
            val_loss,
            val_si_sdr,
            val_si_sdri,
            lr: self.state.schedule.lr,
            event,
        })
    }

    /// Step until the schedule stops, or an epoch or step limit is reached.
    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        if let Some(dir) = &self.out_dir {
            self.state.save(&dir.join(STATE_FILE))?;
            if self.state.best.is_none() {
                checkpoint::save(&self.state.model(), &dir.join(BEST_CHECKPOINT))?;
            }
        }
        Ok(())
    }
}

/// Grid cells `(name, use_cross_attention, use_2d_pos)`, full model first.
pub const ABLATION_CELLS: [(&str, bool, bool); 4] = [
    ("full", true, true),
    ("no-2dpos", true, false),
    ("no-ca", false, true),
    ("no-ca-no-2dpos", false, false),
];

/// Score of one trained ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: &'static str,
    pub use_cross_attention: bool,
    pub use_2d_pos: bool,
    pub fingerprint: String,
    pub si_sdr: f64,
    pub si_sdri: f64,
}

/// Where [`run_ablation`] reads its data and writes its artifacts.
pub struct AblationData<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    /// Split the best checkpoint of each cell is scored on.
    pub eval: &'a [Example],
    /// Per-cell run directories are created under this one when set.
    pub out_dir: Option<&'a Path>,
}

/// Train every cell of the grid from the same seed and score it.
/// `on_epoch` sees each validation pass, tagged with the cell name.
pub fn run_ablation(
    base: &ModelConfig,
    opts: &TrainOptions,
    data: &AblationData,
    mut on_epoch: impl FnMut(&str, &EpochReport),
) -> Result<Vec<AblationCell>> {
    if data.eval.is_empty() {
        return Err(Error::Data(
            "ablation needs a non-empty evaluation split".into(),
        ));
    }
    let mut cells = Vec::with_capacity(ABLATION_CELLS.len());
    for (name, ca, pos) in ABLATION_CELLS {
        let cfg = ModelConfig {
            use_cross_attention: ca,
            use_2d_pos: pos,
            ..base.clone()
        };
        let mut trainer = Trainer::new(
            TrainState::new(cfg.clone(), opts.clone())?,
            data.train,
            data.val,
        )?;
        if let Some(root) = data.out_dir {
            let dir = root.join(name);
            // a stale log would be appended to, so start each cell afresh
            for f in [METRICS_FILE, STATE_FILE, BEST_CHECKPOINT] {
                let p = dir.join(f);
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            trainer = trainer.with_output(&dir)?;
        }
        while !trainer.finished() {
            if let Some(r) = trainer.step()?.epoch_end {
                on_epoch(name, &r);
            }
        }
        trainer.run()?;
        let scores = evaluate(&trainer.state.best_model(), data.eval, opts.cue_mode)?;
        let (_, si_sdr, si_sdri) = mean_scores(&scores);
        cells.push(AblationCell {
            name,
            use_cross_attention: ca,
            use_2d_pos: pos,
            fingerprint: cfg.fingerprint(),
            si_sdr,
            si_sdri,
        });
    }
    Ok(cells)
}
