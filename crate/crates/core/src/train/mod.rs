//! Training loop, checkpoints, evaluation and ablation runs.

mod ablation;
mod checkpoint;
mod config;
mod data;
mod eval;
mod gradcheck;
mod optim;

pub use ablation::{ablation_csv, run_ablation, AblationRow, AblationVariant, ABLATION_HEADER};
pub use checkpoint::{checkpoint_name, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{AdamConfig, DataConfig, TrainConfig, VariantFlags, SEED_ENV};
pub use data::{
    crop_window, extract, foreground_mean, load_split, normalize_pair, prepare_case, random_crop,
    synth_phantoms, CropWindow, Patch, PreparedCase, PreparedSplit,
};
pub use eval::{case_metrics, evaluate, tiled_predict, NetPredictor, PatchPredictor};
pub use gradcheck::network_gradcheck;
pub use optim::{cosine_lr, Adam};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::loss::{joint_loss, recon_loss, weighted_dice_loss, ClassWeights};
use crate::net::DabsegNet;
use crate::real::{Precision, Real};
use crate::report::EvalReport;

/// What happened in one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub case_id: String,
    pub origin: [usize; 3],
    pub clean_input: bool,
    pub lr: f64,
    pub loss: f64,
    pub seg_loss: f64,
    pub rec_loss: Option<f64>,
    pub weights: [f64; 3],
}

/// Per-epoch means of the loss terms and the pooled training soft Dice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub seg_loss: f64,
    pub rec_loss: Option<f64>,
    /// `2 sum(p g) / (sum p + sum g)` over all of the epoch's patches, per
    /// region in (ET, TC, WT) order.
    pub soft_dice: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const STEP_CSV_HEADER: &str =
    "epoch,step,case_id,origin_z,origin_y,origin_x,clean_input,lr,loss,seg_loss,rec_loss";

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = format!("{STEP_CSV_HEADER}\n");
        for r in &self.steps {
            let rec = r.rec_loss.map(|v| v.to_string()).unwrap_or_default();
            let [z, y, x] = r.origin;
            let _ = writeln!(
                s,
                "{},{},{},{z},{y},{x},{},{:e},{},{},{rec}",
                r.epoch, r.step, r.case_id, r.clean_input, r.lr, r.loss, r.seg_loss
            );
        }
        s
    }

    /// One JSON object per epoch.
    pub fn epochs_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }

    /// Writes `steps.csv` and `train_log.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("steps.csv");
        std::fs::write(&p, self.steps_csv()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("train_log.jsonl");
        std::fs::write(&p, self.epochs_jsonl()).map_err(|e| Error::io(&p, e))
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct DiceAccumulator {
    inter: [f64; 3],
    total: [f64; 3],
}

impl DiceAccumulator {
    fn add(&mut self, probs: &[f64], target: &[f64]) {
        let n = probs.len() / 3;
        for r in 0..3 {
            let (p, g) = (&probs[r * n..(r + 1) * n], &target[r * n..(r + 1) * n]);
            self.inter[r] += p.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            self.total[r] += p.iter().sum::<f64>() + g.iter().sum::<f64>();
        }
    }

    fn dice(&self) -> [f64; 3] {
        std::array::from_fn(|r| {
            if self.total[r] > 0.0 {
                2.0 * self.inter[r] / self.total[r]
            } else {
                1.0
            }
        })
    }
}

/// Network, optimizer and sampling state of a run.
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub net: DabsegNet<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub log: TrainLog,
    class_weights: Option<ClassWeights>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.precision.bits() != T::BITS {
            return Err(Error::Config(format!(
                "config asks for {}-bit precision, trainer is {}-bit",
                config.precision.bits(),
                T::BITS
            )));
        }
        let net = DabsegNet::<T>::new(config.net.clone(), config.seed)?;
        let adam = Adam::new(config.adam, &net.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep sampling independent of any other stream seeded the same way
        rng.set_stream(1);
        Ok(Trainer {
            class_weights: config.class_weights(),
            config,
            net,
            adam,
            rng,
            epoch: 0,
            step: 0,
            log: TrainLog::default(),
        })
    }

    /// Restores the state saved in `ckpt`, which must come from `config`.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint<T>) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match {}",
                ckpt.config_hash,
                config.hash()
            )));
        }
        let mut t = Self::new(config)?;
        t.net.store.load_from(&ckpt.params)?;
        if ckpt.adam.m.len() != t.adam.m.len() {
            return Err(Error::Config(
                "optimizer state does not match the network".into(),
            ));
        }
        t.adam = ckpt.adam;
        t.adam.config = t.config.adam;
        t.rng = ckpt.rng;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.log = ckpt.log;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            step: self.step,
            params: self.net.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            log: self.log.clone(),
        }
    }

    pub fn steps_per_epoch(&self, cases: usize) -> usize {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch
        } else {
            cases
        }
    }

    /// Loss weights for the current epoch.
    pub fn weights(&self) -> [f64; 3] {
        self.class_weights
            .map_or(ClassWeights::UNIFORM, |w| w.at_epoch(self.epoch))
    }

    fn train_step(
        &mut self,
        case: &PreparedCase,
        lr: f64,
        acc: &mut DiceAccumulator,
    ) -> Result<StepRecord> {
        let cfg = &self.config;
        let clean_input = cfg.mix_clean && self.rng.gen_bool(0.5);
        let patch = random_crop(case, cfg.patch_size, &mut self.rng, clean_input)?;
        let [d, h, w] = cfg.patch_size;
        let weights = self.weights();
        let g = Graph::<T>::new();
        let x = g.constant(Tensor::from_f64(&[1, 4, d, h, w], &patch.input)?);
        let out = self.net.forward(&g, x)?;
        let target = Tensor::from_f64(&[1, 3, d, h, w], &patch.target)?;
        let seg = weighted_dice_loss(&g, out.probs, &target, weights, cfg.loss.dice_smooth_eps)?;
        let rec = match (cfg.reconstructs(), out.restored) {
            (true, Some(restored)) => {
                let clean = patch.clean.as_ref().ok_or_else(|| {
                    Error::Data(format!("case {}: clean reference not loaded", case.case_id))
                })?;
                let clean = Tensor::from_f64(&[1, 4, d, h, w], clean)?;
                Some(recon_loss(&g, restored, &clean, cfg.loss.rec_norm)?)
            }
            _ => None,
        };
        let loss = joint_loss(&g, seg, rec, cfg.loss.lambda_rec)?;
        let (loss_v, seg_v) = (g.value(loss).item().f64(), g.value(seg).item().f64());
        let rec_v = rec.map(|r| g.value(r).item().f64());
        if !loss_v.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                lr,
                seg_loss: seg_v,
                rec_loss: rec_v.unwrap_or(0.0),
            });
        }
        acc.add(&g.value(out.probs).to_f64(), &patch.target);
        let grads = g.backward(loss)?;
        self.net.store.zero_grads();
        self.net.store.accumulate(&g, &grads);
        drop(g);
        self.adam.step(&mut self.net.store, lr);
        Ok(StepRecord {
            epoch: self.epoch,
            step: self.step,
            case_id: case.case_id.clone(),
            origin: patch.window.origin,
            clean_input,
            lr,
            loss: loss_v,
            seg_loss: seg_v,
            rec_loss: rec_v,
            weights,
        })
    }

    /// Runs one epoch over `cases` in a freshly shuffled order.
    pub fn train_epoch(&mut self, cases: &[PreparedCase]) -> Result<EpochRecord> {
        if cases.is_empty() {
            return Err(Error::Data("no training cases".into()));
        }
        let spe = self.steps_per_epoch(cases.len());
        let total = spe * self.config.epochs;
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = DiceAccumulator::default();
        let (mut loss, mut seg, mut rec) = (0.0, 0.0, 0.0);
        let mut lr = self.config.lr0;
        for s in 0..spe {
            lr = cosine_lr(self.step, total, self.config.lr0, self.config.lr_min);
            let r = self.train_step(&cases[order[s % order.len()]], lr, &mut acc)?;
            loss += r.loss;
            seg += r.seg_loss;
            rec += r.rec_loss.unwrap_or(0.0);
            self.log.steps.push(r);
            self.step += 1;
        }
        let n = spe as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            steps: spe,
            lr,
            loss: loss / n,
            seg_loss: seg / n,
            rec_loss: self.config.reconstructs().then_some(rec / n),
            soft_dice: acc.dice(),
        };
        self.log.epochs.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Trains until `config.epochs`, writing checkpoints and logs into `out`.
    /// `on_epoch` sees every finished epoch (for progress output).
    pub fn run(
        &mut self,
        cases: &[PreparedCase],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let record = match self.train_epoch(cases) {
                Ok(r) => r,
                Err(e) => {
                    if let (Error::Diverged { .. }, Some(dir)) = (&e, out) {
                        self.write_nan_dump(dir, &e)?;
                    }
                    return Err(e);
                }
            };
            on_epoch(&record);
            let every = self.config.checkpoint_every;
            let last = self.epoch == self.config.epochs;
            if let Some(dir) = out {
                if last || (every > 0 && self.epoch.is_multiple_of(every)) {
                    self.checkpoint()
                        .save(&dir.join(checkpoint_name(self.epoch)))?;
                }
                self.log.write(dir)?;
            }
        }
        Ok(())
    }

    fn write_nan_dump(&self, dir: &Path, e: &Error) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
        let dump = serde_json::json!({
            "error": e.to_string(),
            "epoch": self.epoch,
            "step": self.step,
            "recent_steps": self.log.steps.iter().rev().take(5).collect::<Vec<_>>(),
        });
        let p = dir.join("nan_dump.json");
        std::fs::write(&p, serde_json::to_string_pretty(&dump)?)
            .map_err(|err| Error::io(&p, err))?;
        self.log.write(dir)
    }

    /// Evaluates the current network on `cases` with tiled inference.
    pub fn evaluate(&self, cases: &[PreparedCase]) -> Result<EvalReport> {
        let model = NetPredictor {
            net: &self.net,
            patch: self.config.patch_size,
        };
        let mut report = evaluate(&model, cases, 0.5)?;
        self.annotate(&mut report);
        Ok(report)
    }

    fn annotate(&self, report: &mut EvalReport) {
        report
            .metadata
            .insert("seed".into(), self.config.seed.into());
        report
            .metadata
            .insert("config_hash".into(), self.config.hash().into());
        report
            .metadata
            .insert("epochs_trained".into(), self.epoch.into());
        report.metadata.insert("precision".into(), T::BITS.into());
    }
}

/// Training log and held-out report of one run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: TrainLog,
    pub report: EvalReport,
}

fn run_typed<T: Real>(
    config: &TrainConfig,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    let split = load_split(config)?;
    let held_out = if split.test.is_empty() {
        &split.val
    } else {
        &split.test
    };
    let mut trainer = Trainer::<T>::new(config.clone())?;
    if let Some(dir) = out {
        config.write_snapshot(dir)?;
    }
    trainer.run(&split.train, out, &mut *on_epoch)?;
    let report = if held_out.is_empty() {
        EvalReport::new(Vec::new())
    } else {
        trainer.evaluate(held_out)?
    };
    if let (Some(dir), false) = (out, report.cases.is_empty()) {
        report.write(dir)?;
    }
    Ok(RunOutcome {
        log: trainer.log,
        report,
    })
}

/// Loads data, trains and evaluates on the held-out cases (test, or
/// validation when the test split is empty) at the configured precision.
pub fn train_and_evaluate(
    config: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, out, &mut on_epoch),
        Precision::F64 => run_typed::<f64>(config, out, &mut on_epoch),
    }
}

fn evaluate_typed<T: Real>(
    bytes: &[u8],
    cases: Option<&[PreparedCase]>,
) -> Result<(TrainConfig, EvalReport)> {
    let ckpt = Checkpoint::<T>::decode(bytes)?;
    let config = ckpt.config()?;
    let split;
    let cases = match cases {
        Some(c) => c,
        None => {
            split = load_split(&config)?;
            if split.test.is_empty() {
                &split.val
            } else {
                &split.test
            }
        }
    };
    let trainer = Trainer::resume(config.clone(), ckpt)?;
    Ok((config, trainer.evaluate(cases)?))
}

/// Evaluates a saved checkpoint on `cases`, or on the held-out split its
/// configuration describes.
pub fn evaluate_checkpoint(
    path: &Path,
    cases: Option<&[PreparedCase]>,
) -> Result<(TrainConfig, EvalReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match Checkpoint::<f32>::peek_bits(&bytes)? {
        32 => evaluate_typed::<f32>(&bytes, cases),
        _ => evaluate_typed::<f64>(&bytes, cases),
    }
}
