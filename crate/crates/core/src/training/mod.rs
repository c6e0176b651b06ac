//! Losses, Adam, the plateau schedule, the epoch loop and the BI ablation.

mod loss;
mod optim;

pub use loss::{loss, si_sdr_db, LossKind, SOFT_CLAMP};
pub use optim::{Adam, AdamSlot, Plateau, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::wav::read_wav;
use crate::io::Checkpoint;
use crate::metrics::{evaluate, Enhancer, MetricReport, SummaryTable};
use crate::models::{Model, ModelConfig};
use crate::nn::{Mode, ParamStore, Session};
use crate::signal::{analyze, seed_for_row, ManifestRow, MultichannelWave, FRAME_RATE};
use crate::tensor::{Precision, Tensor};

pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    /// Epochs without a strict validation improvement before the LR drops.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training window length; every epoch tiles each utterance with them.
    pub segment_seconds: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub precision: Precision,
    /// Stop after this many optimizer steps, possibly mid-epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            plateau_patience: 2,
            lr_factor: 0.5,
            epochs: 60,
            batch_size: 4,
            segment_seconds: 3.0,
            seed: 0,
            loss_kind: LossKind::NegSiSdr,
            precision: Precision::F32,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("plateau_patience must be at least 1"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::config("lr_factor must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::config("segment_seconds must be positive"));
        }
        Ok(())
    }

    pub fn segment_frames(&self) -> usize {
        ((self.segment_seconds * FRAME_RATE).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// Everything besides the weights needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub steps: u64,
    pub lr: f64,
    pub scheduler: Plateau,
    pub history: Vec<EpochLog>,
    pub best_val: Option<f64>,
}

pub fn loss_curve_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:e}",
            h.epoch, h.train_loss, h.val_loss, h.lr
        );
    }
    s
}

/// One utterance as `[2M, T, F]` mixture and target planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub mixture: Tensor,
    pub target: Tensor,
}

impl Example {
    pub fn from_waves(
        id: &str,
        mixture: &MultichannelWave,
        target: &MultichannelWave,
        precision: Precision,
    ) -> Result<Self> {
        if mixture.num_channels() != target.num_channels() || mixture.len() != target.len() {
            return Err(Error::invalid(format!(
                "{id}: mixture and target differ in shape"
            )));
        }
        let planes = |w: &MultichannelWave| -> Result<Tensor> {
            let p = analyze(w)?.to_planes();
            let s = p.shape()[1..].to_vec();
            let mut t = p.reshape(&s)?;
            precision.apply(&mut t);
            Ok(t)
        };
        Ok(Self {
            id: id.to_string(),
            mixture: planes(mixture)?,
            target: planes(target)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.mixture.shape()[1]
    }
}

/// Reads and analyzes every manifest row.
pub fn load_examples(
    rows: &[ManifestRow],
    base: &Path,
    mics: usize,
    precision: Precision,
) -> Result<Vec<Example>> {
    rows.par_iter()
        .map(|r| {
            let mixture = read_wav(&r.mixture(base))?;
            let target = read_wav(&r.target(base))?;
            if mixture.num_channels() != mics {
                return Err(Error::config(format!(
                    "{}: {} channels but the model expects {mics}",
                    r.id,
                    mixture.num_channels()
                )));
            }
            Example::from_waves(&r.id, &mixture, &target, precision)
        })
        .collect()
}

/// `(example, offset, frames)` windows of at most `frames` frames that
/// cover every example, evenly spaced so that consecutive windows overlap
/// by less than one window.
pub fn segments(examples: &[Example], frames: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        let total = e.frames();
        if total <= frames {
            out.push((i, 0, total));
            continue;
        }
        let n = total.div_ceil(frames);
        let span = total - frames;
        out.extend((0..n).map(|k| (i, (k * span + (n - 1) / 2) / (n - 1), frames)));
    }
    out
}

/// Stacked `[B, 2M, T, F]` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub mixture: Tensor,
    pub target: Tensor,
}

fn crop(t: &Tensor, start: usize, frames: usize) -> Vec<f64> {
    let (c, total, f) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(c * frames * f);
    for ch in 0..c {
        let o = (ch * total + start) * f;
        out.extend_from_slice(&t.data()[o..o + frames * f]);
    }
    out
}

impl Batch {
    /// Crops `frames` frames of each example starting at the matching offset.
    pub fn crop(examples: &[&Example], offsets: &[usize], frames: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let (c, f) = (first.mixture.shape()[0], first.mixture.shape()[2]);
        let (mut mix, mut tgt) = (Vec::new(), Vec::new());
        for (e, &o) in examples.iter().zip(offsets) {
            if e.mixture.shape()[0] != c || o + frames > e.frames() {
                return Err(Error::invalid(format!(
                    "{}: cannot crop {frames} frames at {o}",
                    e.id
                )));
            }
            mix.extend(crop(&e.mixture, o, frames));
            tgt.extend(crop(&e.target, o, frames));
        }
        let shape = vec![examples.len(), c, frames, f];
        Ok(Self {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            mixture: Tensor::new(shape.clone(), mix)?,
            target: Tensor::new(shape, tgt)?,
        })
    }

    /// Whole examples, cut to the shortest.
    pub fn whole(examples: &[&Example]) -> Result<Self> {
        let frames = examples.iter().map(|e| e.frames()).min().unwrap_or(0);
        Self::crop(examples, &vec![0; examples.len()], frames)
    }
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub state: TrainState,
}

impl Trainer {
    /// Fresh run: weights drawn from `config.seed`.
    pub fn new(model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, mut store) = Model::build(model_config, config.seed)?;
        store.round_to(config.precision);
        let adam = Adam::new(&store);
        let state = TrainState {
            lr: config.lr,
            scheduler: Plateau::new(config.plateau_patience, config.lr_factor),
            config,
            epochs_done: 0,
            steps: 0,
            history: Vec::new(),
            best_val: None,
        };
        Ok(Self {
            model,
            store,
            adam,
            state,
        })
    }

    /// Continues the run saved in `ckpt`.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let state = ckpt
            .training
            .ok_or_else(|| Error::config("checkpoint has no training state"))?;
        let mut adam = ckpt
            .optimizer
            .ok_or_else(|| Error::config("checkpoint has no optimizer state"))?;
        adam.steps = state.steps;
        Ok(Self {
            model,
            store: ckpt.store,
            adam,
            state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            store: self.store.clone(),
            optimizer: Some(self.adam.clone()),
            training: Some(self.state.clone()),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn is_done(&self) -> bool {
        self.state.epochs_done >= self.state.config.epochs || self.steps_exhausted()
    }

    fn steps_exhausted(&self) -> bool {
        self.state
            .config
            .max_steps
            .is_some_and(|m| self.state.steps >= m)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let kind = self.state.config.loss_kind;
        let (loss_value, grads, stats) = {
            let s = Session::new(&self.store, Mode::Train);
            let out = self.model.forward(&s, &s.input(batch.mixture.clone()))?;
            let l = loss(kind, &out, &s.input(batch.target.clone()))?;
            let v = l.value().item();
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} (batch {})",
                    self.state.steps + 1,
                    batch.ids.join(",")
                )));
            }
            let grads = s.backward(&l)?;
            (v, grads, s.take_batch_stats())
        };
        let precision = self.state.config.precision;
        self.adam
            .step(&mut self.store, &grads, self.state.lr, precision)?;
        self.store.apply_batch_stats(&stats)?;
        self.store.round_to(precision);
        self.state.steps += 1;
        Ok(loss_value)
    }

    /// Mean eval-mode loss over whole utterances.
    pub fn evaluate_loss(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("no validation examples"));
        }
        let kind = self.state.config.loss_kind;
        let losses: Vec<Result<f64>> = examples
            .par_iter()
            .map(|e| {
                let b = Batch::whole(&[e])?;
                let s = Session::new(&self.store, Mode::Eval);
                let out = self.model.forward(&s, &s.input(b.mixture))?;
                Ok(loss(kind, &out, &s.input(b.target))?.value().item())
            })
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / examples.len() as f64)
    }

    /// One pass over every segment of `train` in seeded random order, then
    /// validation and the plateau rule. Returns the log and whether validation improved.
    pub fn run_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<(EpochLog, bool)> {
        if train.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let cfg = self.state.config.clone();
        let epoch = self.state.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for_row(cfg.seed, epoch));
        let mut order = segments(train, cfg.segment_frames());
        order.shuffle(&mut rng);
        let lr = self.state.lr;
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if self.steps_exhausted() {
                break;
            }
            let items: Vec<&Example> = chunk.iter().map(|seg| &train[seg.0]).collect();
            let offsets: Vec<usize> = chunk.iter().map(|seg| seg.1).collect();
            let frames = chunk.iter().map(|seg| seg.2).min().unwrap();
            total += self.step(&Batch::crop(&items, &offsets, frames)?)?;
            batches += 1;
        }
        let val_loss = self.evaluate_loss(val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss after epoch {}",
                epoch + 1
            )));
        }
        if self.state.scheduler.observe(val_loss) {
            self.state.lr = self.state.scheduler.reduce(self.state.lr);
        }
        let improved = self.state.best_val.is_none_or(|b| val_loss < b);
        if improved {
            self.state.best_val = Some(val_loss);
        }
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: total / batches.max(1) as f64,
            val_loss,
            lr,
        };
        self.state.history.push(log.clone());
        self.state.epochs_done += 1;
        Ok((log, improved))
    }
}

/// Trains until the epoch or step budget is spent, writing the loss curve
/// and the best and last checkpoints into `out_dir` after every epoch. With
/// `resume`, continues from `out_dir/last.ckpt` when present.
pub fn fit(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_rows: &[ManifestRow],
    val_rows: &[ManifestRow],
    base: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<Trainer> {
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::invalid(
            "training and validation manifests must be non-empty",
        ));
    }
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last = out_dir.join(LAST_CHECKPOINT);
    let mut trainer = if resume && last.exists() {
        let t = Trainer::resume(Checkpoint::load(&last)?)?;
        if t.model.config != *model_config {
            return Err(Error::config(
                "resume checkpoint was trained with a different model config",
            ));
        }
        if t.state.config.seed != config.seed {
            return Err(Error::config(
                "resume checkpoint was trained with a different seed",
            ));
        }
        let mut t = t;
        t.state.config.epochs = config.epochs;
        t.state.config.max_steps = config.max_steps;
        t
    } else {
        Trainer::new(model_config, config.clone())?
    };
    let mics = model_config.mics;
    let train = load_examples(train_rows, base, mics, config.precision)?;
    let val = load_examples(val_rows, base, mics, config.precision)?;
    while !trainer.is_done() {
        let (_, improved) = trainer.run_epoch(&train, &val)?;
        let ckpt = trainer.checkpoint();
        ckpt.save(&last)?;
        if improved {
            ckpt.save(&out_dir.join(BEST_CHECKPOINT))?;
        }
        let csv = out_dir.join(LOSS_CURVE_FILE);
        std::fs::write(&csv, loss_curve_csv(&trainer.state.history))
            .map_err(|e| Error::io(&csv, e))?;
    }
    Ok(trainer)
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub method: String,
    pub history: Vec<EpochLog>,
    pub report: MetricReport,
}

/// PDPCRN trained with and without the interaction gates on identical data
/// and seeds, scored on the same held-out rows.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub unprocessed: MetricReport,
    pub runs: Vec<AblationRun>,
    pub table: SummaryTable,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = self.table.to_markdown();
        s.push_str("| Method | Epochs | Final train loss | Final val loss |\n|---|---|---|---|\n");
        for r in &self.runs {
            if let Some(h) = r.history.last() {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} |",
                    r.method, h.epoch, h.train_loss, h.val_loss
                );
            }
        }
        s
    }
}

pub fn ablate(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_rows: &[ManifestRow],
    val_rows: &[ManifestRow],
    eval_rows: &[ManifestRow],
    base: &Path,
    out_dir: &Path,
) -> Result<AblationReport> {
    let unprocessed = evaluate(&Enhancer::Passthrough, eval_rows, base);
    let mut runs = Vec::new();
    for (bi, dir) in [(true, "with_bi"), (false, "without_bi")] {
        let cfg = model_config.clone().with_bi_interaction(bi);
        let trainer = fit(
            &cfg,
            config,
            train_rows,
            val_rows,
            base,
            &out_dir.join(dir),
            false,
        )?;
        let enhancer = Enhancer::Network {
            model: &trainer.model,
            store: &trainer.store,
        };
        let report = evaluate(&enhancer, eval_rows, base);
        report.write_csv(&out_dir.join(dir).join("metrics.csv"))?;
        runs.push(AblationRun {
            method: enhancer.label(),
            history: trainer.state.history.clone(),
            report,
        });
    }
    let table = SummaryTable::from_reports(&[&unprocessed, &runs[0].report, &runs[1].report]);
    let report = AblationReport {
        unprocessed,
        runs,
        table,
    };
    let md = out_dir.join("ablation.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let json = out_dir.join("ablation.json");
    std::fs::write(&json, report.table.to_json()).map_err(|e| Error::io(&json, e))?;
    Ok(report)
}
