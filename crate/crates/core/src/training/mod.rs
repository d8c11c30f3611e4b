//! Pre-training and fine-tuning loops.

pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::encoder::{encode_traced, splitmix, Mode};
use crate::model::objectives::{
    argmax, classify_objective, pretrain_objective, sequence_objective, LossBreakdown,
};
use crate::model::{decoder, heads, is_encoder_tensor, Parameters};
use crate::pretrain::{build_m3lm_batch, build_rii_batch, build_ssi_batch, EncodedSample, SiblingIndex};
use crate::tokenizer::EncodedInput;
pub use optim::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Coefficient of the squared-norm penalty added to the pre-training loss.
    pub lambda: f64,
    pub seed: u64,
    /// Validation passes without improvement before fine-tuning stops.
    pub patience: Option<usize>,
    /// Alternate the three objectives step by step instead of summing them.
    pub round_robin: bool,
    pub max_len: usize,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            pretrain_epochs: 5,
            finetune_epochs: 2,
            lr_pretrain: 5e-4,
            lr_finetune: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            lambda: 0.0,
            seed: 0,
            patience: None,
            round_robin: false,
            max_len: 512,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_pretrain, self.lr_finetune];
        if rates.iter().any(|&r| !(r > 0.0)) || self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::invalid("learning rates must be positive and decay terms non-negative"));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64, total_steps: u64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            total_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub m3lm: f64,
    pub ssi: f64,
    pub rii: f64,
    pub total: f64,
    pub lr: f64,
}

pub const CURVE_HEADER: &str = "step,l_m3lm,l_ssi,l_rii,total,lr";

impl CurveRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.m3lm, self.ssi, self.rii, self.total, self.lr)
    }
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::Parse { line: i + 1, message: m.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad("bad number"));
        out.push(CurveRow {
            step: f[0].parse().map_err(|_| bad("bad step"))?,
            m3lm: num(1)?,
            ssi: num(2)?,
            rii: num(3)?,
            total: num(4)?,
            lr: num(5)?,
        });
    }
    Ok(out)
}

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-epoch{epoch}.bin"))
}

pub fn epoch_optimizer(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("optimizer-epoch{epoch}.bin"))
}

/// Row order of one pre-training epoch; fixed by seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(0xe90c + epoch as u64))));
    order
}

pub struct PretrainOutcome {
    pub params: Parameters<f32>,
    pub optimizer: AdamState<f32>,
    pub curve: Vec<CurveRow>,
}

/// Where to write per-epoch checkpoints and the loss curve, and optional resume state.
#[derive(Default)]
pub struct PretrainIo<'a> {
    pub out_dir: Option<&'a Path>,
    /// Continue from this optimizer state; its step count selects the next batch.
    pub resume: Option<AdamState<f32>>,
    /// Stop after this many total steps (for interruption tests).
    pub stop_at: Option<u64>,
}

/// Objectives trained at `step`: all three jointly, or one at a time in rotation.
fn tasks_for(step: u64, round_robin: bool) -> [bool; 3] {
    if round_robin {
        let k = (step % 3) as usize;
        [k == 0, k == 1, k == 2]
    } else {
        [true; 3]
    }
}

/// Runs the joint pre-training objective. Batches depend only on the seed,
/// the epoch and the step index, so interrupted runs resume exactly.
pub fn pretrain_loop(
    mut params: Parameters<f32>,
    pool: &[EncodedSample],
    cfg: &TrainConfig,
    io: PretrainIo<'_>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::invalid("empty pre-training corpus"));
    }
    let siblings = SiblingIndex::new(pool);
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.pretrain_epochs) as u64;
    let adam = cfg.adam(cfg.lr_pretrain, total_steps);
    let mut opt = io.resume.unwrap_or_else(|| AdamState::new(&params));
    let vocab_size = params.config.vocab_size;
    let lambda = cfg.lambda as f32;
    let mut curve = Vec::new();
    let start_epoch = opt.step as usize / steps_per_epoch.max(1);
    for epoch in start_epoch..cfg.pretrain_epochs {
        let order = epoch_order(pool.len(), cfg.seed, epoch);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let step = (epoch * steps_per_epoch + b) as u64;
            if step < opt.step {
                continue;
            }
            if io.stop_at.is_some_and(|s| step >= s) {
                return Ok(PretrainOutcome { params, optimizer: opt, curve });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(step)));
            let samples: Vec<&EncodedSample> = rows.iter().map(|&r| &pool[r]).collect();
            let [do_m, do_s, do_r] = tasks_for(step, cfg.round_robin);
            let m = if do_m { Some(build_m3lm_batch(&samples, vocab_size, cfg.max_len, &mut rng)?) } else { None };
            let s = if do_s { build_ssi_batch(rows, pool, &siblings, cfg.max_len, &mut rng).ok() } else { None };
            let r = if do_r { Some(build_rii_batch(&samples, cfg.max_len, &mut rng)?) } else { None };
            let mut grads = params.zeros_like();
            let mode = Mode::Train { seed: splitmix(cfg.seed.wrapping_add(step)) };
            let loss: LossBreakdown<f32> =
                match pretrain_objective(&params, m.as_ref(), s.as_ref(), r.as_ref(), lambda, mode, Some(&mut grads)) {
                    Ok(l) => l,
                    Err(Error::NonFiniteGradient(_)) => return Err(Error::Diverged { step }),
                    Err(e) => return Err(e),
                };
            let lr = match opt.step(&mut params, &grads, &adam, &|_| true) {
                Ok(lr) => lr,
                Err(Error::NonFiniteUpdate(_)) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            };
            let row = CurveRow {
                step,
                m3lm: loss.m3lm as f64,
                ssi: loss.ssi as f64,
                rii: loss.rii as f64,
                total: loss.total as f64,
                lr,
            };
            info!(
                "step {step} m3lm={:.4} ssi={:.4} rii={:.4} total={:.4} lr={lr:.3e}",
                row.m3lm, row.ssi, row.rii, row.total
            );
            curve.push(row);
        }
        if let Some(dir) = io.out_dir {
            save_checkpoint(&params, &[("epoch", (epoch + 1).to_string())], &epoch_checkpoint(dir, epoch + 1))?;
            opt.save(&epoch_optimizer(dir, epoch + 1))?;
        }
    }
    Ok(PretrainOutcome { params, optimizer: opt, curve })
}

/// Fine-tuning targets: class labels or output token sequences.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTargets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Sequences { targets: Vec<Vec<u32>>, starts: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub inputs: Vec<EncodedInput>,
    pub targets: TaskTargets,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> TaskSet {
        TaskSet {
            inputs: rows.iter().map(|&r| self.inputs[r].clone()).collect(),
            targets: match &self.targets {
                TaskTargets::Classes { labels, n_classes } => TaskTargets::Classes {
                    labels: rows.iter().map(|&r| labels[r]).collect(),
                    n_classes: *n_classes,
                },
                TaskTargets::Sequences { targets, starts } => TaskTargets::Sequences {
                    targets: rows.iter().map(|&r| targets[r].clone()).collect(),
                    starts: rows.iter().map(|&r| starts[r]).collect(),
                },
            },
        }
    }
}

/// Accuracy used for model selection: label accuracy for classification,
/// teacher-forced next-token accuracy for sequences.
pub fn validation_accuracy(params: &Parameters<f32>, set: &TaskSet) -> Result<f64> {
    let mut correct = 0usize;
    let mut count = 0usize;
    for (i, input) in set.inputs.iter().enumerate() {
        let hidden = encode_traced(input, params, Mode::Eval)?.output;
        match &set.targets {
            TaskTargets::Classes { labels, n_classes } => {
                let dist = heads::classify_head(&heads::cls_pool(&hidden), params, *n_classes)?;
                correct += (argmax(&dist) == labels[i]) as usize;
                count += 1;
            }
            TaskTargets::Sequences { targets, starts } => {
                let ctx = decoder::DecoderContext::new(hidden, params)?;
                let mut state = ctx.initial_state(params)?;
                let mut prev = starts[i];
                for &t in &targets[i] {
                    let (dist, next) = decoder::decode_step(prev, &state, &ctx, params)?;
                    correct += (argmax(&dist) == t as usize) as usize;
                    count += 1;
                    state = next;
                    prev = t;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { correct as f64 / count as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: f64,
}

pub struct FinetuneOutcome {
    pub best: Parameters<f32>,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub history: Vec<ValidationRecord>,
    pub last: Parameters<f32>,
}

/// Tensors updated during fine-tuning: the task head, plus the encoder
/// unless it is frozen. Pre-training heads are left untouched.
pub fn finetune_trainable(name: &str, freeze_encoder: bool) -> bool {
    let head = name.starts_with("heads.classifier.") || name.starts_with("decoder.");
    head || (!freeze_encoder && is_encoder_tensor(name))
}

/// Trains a task head (and the encoder unless frozen), validating after every
/// epoch and keeping the best-scoring parameters. Stops once `patience`
/// consecutive passes have not improved on the best score.
pub fn finetune_loop(
    mut params: Parameters<f32>,
    train: &TaskSet,
    valid: &TaskSet,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("empty fine-tuning or validation set"));
    }
    if cfg.finetune_epochs == 0 {
        return Err(Error::invalid("fine-tuning needs at least one epoch"));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let adam = cfg.adam(cfg.lr_finetune, (steps_per_epoch * cfg.finetune_epochs) as u64);
    let mut opt = AdamState::new(&params);
    let freeze = cfg.freeze_encoder;
    let trainable = move |n: &str| finetune_trainable(n, freeze);
    let mut best: Option<(f64, usize, Parameters<f32>)> = None;
    let mut history = Vec::new();
    let mut since_best = 0usize;
    for epoch in 0..cfg.finetune_epochs {
        let order = epoch_order(train.len(), cfg.seed ^ 0xf1e7, epoch);
        let mut epoch_loss = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let step = (epoch * steps_per_epoch + b) as u64;
            let batch = train.subset(rows);
            let mode = Mode::Train { seed: splitmix(cfg.seed.wrapping_add(step) ^ 0xf1e7) };
            let mut grads = params.zeros_like();
            let loss = match &batch.targets {
                TaskTargets::Classes { labels, .. } => {
                    classify_objective(&params, &batch.inputs, labels, mode, !freeze, Some(&mut grads))?.0
                }
                TaskTargets::Sequences { targets, starts } => {
                    sequence_objective(&params, &batch.inputs, targets, starts, mode, !freeze, Some(&mut grads))?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            grads.check_finite()?;
            opt.step(&mut params, &grads, &adam, &trainable)?;
            epoch_loss += loss as f64;
        }
        let metric = validation_accuracy(&params, valid)?;
        info!("epoch {epoch} train_loss={epoch_loss:.4} valid_acc={metric:.4}");
        history.push(ValidationRecord { epoch, train_loss: epoch_loss, metric });
        if best.as_ref().is_none_or(|(m, _, _)| metric > *m) {
            best = Some((metric, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    let (best_metric, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(FinetuneOutcome { best: best_params, best_metric, best_epoch, history, last: params })
}

/// Loads the encoder tensors of a pre-trained checkpoint into `params`.
pub fn init_encoder_from(params: &mut Parameters<f32>, checkpoint: &Path) -> Result<usize> {
    let (pre, _) = load_checkpoint(checkpoint)?;
    params.load_from(&pre, &is_encoder_tensor)
}
