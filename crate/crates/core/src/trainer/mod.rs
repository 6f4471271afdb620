//! Pre-training and fine-tuning loops.
//!
//! Every random draw (sample synthesis, conditions, data order, weight
//! initialization) is derived from the configured seed and a counter, so a
//! run resumed from an end-of-epoch checkpoint continues exactly as the
//! uninterrupted run would have.

mod config;
mod optim;
mod state;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom as _;
use serde::{Deserialize, Serialize};

pub use config::{lr_at, Phase, Schedule, TrainConfig};
pub use optim::{clip_grad_norm, AdamW};
pub use state::{load_model, load_state, save_state, TrainState, CHECKPOINT_DIR};

use crate::dataset::{condition_stream, Dataset};
use crate::error::{Error, Result};
use crate::featbank::FeatureBank;
use crate::matching::{binary_relabel, match_batch, set_loss, set_loss_with, Target};
use crate::nn::{DetectionTransformer, Graph, ModelConfig, Tensor};
use crate::pretext::{encode_condition, sample_condition};
use crate::rng::{self, tag};
use crate::synthesis::{synthesize_indexed, SynthesisParams};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// `pretrain`, `finetune` or `val`.
    pub phase: String,
}

/// Where and how a run persists its progress.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for the checkpoint and log; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in `out` when one exists.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub stop_after: Option<usize>,
    /// Generate the next batch on a helper thread.
    pub prefetch: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Mean training loss of every epoch run so far, read back from the log
    /// when resuming.
    pub epoch_losses: Vec<f64>,
    /// `(epoch, loss)` for every validation pass.
    pub val_losses: Vec<(usize, f64)>,
}

/// One training example, ready for the model.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub features: Tensor,
    pub targets: Vec<Target>,
    pub task: Option<Vec<f64>>,
}

/// Indices of a uniform subset of `ceil(fraction * n)` items. Subsets for
/// smaller fractions under one seed are contained in larger ones.
pub fn data_fraction_split(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, tag::SPLIT));
    let mut subset = perm[..k.min(n)].to_vec();
    subset.sort_unstable();
    Ok(subset)
}

fn sample_tensor(features: &[f32], dim: usize) -> Tensor {
    Tensor::matrix(features.len() / dim, dim, features.iter().map(|&x| f64::from(x)).collect())
}

/// Synthesis parameters of pre-training samples under `train_seed`.
pub fn pretext_params(synth: &SynthesisParams, train_seed: u64) -> SynthesisParams {
    SynthesisParams {
        seed: rng::mix64(synth.seed, train_seed),
        ..synth.clone()
    }
}

/// Pre-training item for global sample `index`.
pub fn pretext_item(
    bank: &FeatureBank,
    params: &SynthesisParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    index: u64,
) -> Result<BatchItem> {
    let mut sample = synthesize_indexed(bank, params, index)?;
    sample.condition = sample_condition(&sample, cfg.p_cond, cfg.allow_joint, &mut condition_stream(params.seed, index));
    let offset = params.category_range(bank)[0];
    let cv = encode_condition(&sample.condition, offset, model.num_target_categories, model.n_max)?;
    Ok(BatchItem {
        features: sample_tensor(&sample.features, sample.dim),
        targets: binary_relabel(&sample.targets(), sample.len()),
        task: Some(cv.concat()),
    })
}

/// Fine-tuning item: all instances, labeled by downstream class.
pub fn downstream_item(ds: &Dataset, i: usize) -> BatchItem {
    let s = &ds.samples[i];
    BatchItem {
        features: sample_tensor(&s.features, s.dim),
        targets: s
            .instances
            .iter()
            .map(|inst| Target::from_instance(ds.class_of(inst.category), inst, s.len()))
            .collect(),
        task: None,
    }
}

fn forward_batch(model: &DetectionTransformer, g: &mut Graph, batch: &[BatchItem]) -> Result<crate::nn::ForwardOutput> {
    let seqs: Vec<&Tensor> = batch.iter().map(|b| &b.features).collect();
    let task = if batch.iter().all(|b| b.task.is_some()) {
        let w = batch[0].task.as_ref().map_or(0, Vec::len);
        let data = batch.iter().flat_map(|b| b.task.clone().unwrap_or_default()).collect();
        Some(Tensor::matrix(batch.len(), w, data))
    } else {
        None
    };
    model.forward(g, &seqs, task.as_ref())
}

/// Set loss of `batch` under the current weights, without gradients.
pub fn batch_loss(model: &DetectionTransformer, batch: &[BatchItem], cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let out = forward_batch(model, &mut g, batch)?;
    let targets: Vec<Vec<Target>> = batch.iter().map(|b| b.targets.clone()).collect();
    let (loss, _) = set_loss(&mut g, out.logits, out.boxes, &targets, &cfg.match_cost)?;
    Ok(g.value(loss).data()[0])
}

/// Mean set loss over a dataset.
pub fn dataset_loss(model: &DetectionTransformer, ds: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let batch: Vec<BatchItem> = chunk.iter().map(|&i| downstream_item(ds, i)).collect();
        total += batch_loss(model, &batch, cfg)? * chunk.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

/// Forward, match, backward, clip and update. Returns the batch loss.
fn train_step(state: &mut TrainState, batch: &[BatchItem], lr: f64) -> Result<f64> {
    let cfg = &state.config;
    let mut g = Graph::new();
    let out = forward_batch(&state.model, &mut g, batch)?;
    let targets: Vec<Vec<Target>> = batch.iter().map(|b| b.targets.clone()).collect();
    let finite = |v| g.value(v).data().iter().all(|x: &f64| x.is_finite());
    if !finite(out.logits) || !finite(out.boxes) {
        return Ok(f64::NAN);
    }
    let assignments = match_batch(g.value(out.logits), g.value(out.boxes), &targets, &cfg.match_cost)?;
    let loss = set_loss_with(&mut g, out.logits, out.boxes, &targets, &assignments, &cfg.match_cost)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let clip = cfg.grad_clip;
    let params = state.model.params_mut();
    params.zero_grads();
    g.backward(loss, params)?;
    let norm = clip_grad_norm(params, clip);
    if !norm.is_finite() {
        return Ok(f64::NAN);
    }
    state.optimizer.step(state.model.params_mut(), lr);
    state.step += 1;
    Ok(value)
}

struct Logger {
    path: Option<PathBuf>,
    pending: Vec<LogRecord>,
}

impl Logger {
    /// Opens the log of `out`, keeping only records of completed epochs.
    fn open(out: Option<&Path>, completed_epochs: usize) -> Result<(Self, Vec<LogRecord>)> {
        let Some(dir) = out else {
            return Ok((Self { path: None, pending: Vec::new() }, Vec::new()));
        };
        let path = dir.join(LOG_FILE);
        let mut kept = Vec::new();
        if completed_epochs > 0 && path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let rec: LogRecord = serde_json::from_str(line)
                    .map_err(|e| Error::format(&path, 0, e.to_string()))?;
                if rec.epoch < completed_epochs {
                    kept.push(rec);
                }
            }
        }
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        crate::featbank::write_file(&path, text.as_bytes())?;
        Ok((Self { path: Some(path), pending: Vec::new() }, kept))
    }

    fn push(&mut self, rec: LogRecord) {
        self.pending.push(rec);
    }

    fn flush(&mut self) -> Result<()> {
        let Some(path) = &self.path else {
            self.pending.clear();
            return Ok(());
        };
        let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        for r in self.pending.drain(..) {
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn dump_diagnostic(out: Option<&Path>, phase: Phase, epoch: usize, step: usize, batch_seed: u64, indices: &[u64]) -> Error {
    if let Some(dir) = out {
        let diag = serde_json::json!({
            "phase": phase.as_str(),
            "epoch": epoch,
            "step": step,
            "batch_seed": batch_seed,
            "sample_indices": indices,
        });
        let _ = crate::featbank::write_file(
            &dir.join(DIAGNOSTIC_FILE),
            &serde_json::to_vec_pretty(&diag).expect("diagnostic serializes"),
        );
    }
    Error::NonFinite { epoch, step, batch_seed }
}

fn epoch_means(records: &[LogRecord], phase: &str) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in records.iter().filter(|r| r.phase == phase) {
        if sums.len() <= r.epoch {
            sums.resize(r.epoch + 1, (0.0, 0));
        }
        sums[r.epoch].0 += r.loss;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// Runs the remaining epochs of `state` with logging, validation and
/// per-epoch checkpoints.
fn run_epochs<F>(
    mut state: TrainState,
    prior: Vec<LogRecord>,
    mut logger: Logger,
    opts: &RunOptions,
    steps_per_epoch: usize,
    make_batch: F,
    validate: &dyn Fn(&DetectionTransformer, usize) -> Result<Option<f64>>,
) -> Result<TrainOutcome>
where
    F: Fn(usize, usize) -> Result<(Vec<BatchItem>, Vec<u64>)> + Sync,
{
    let phase = state.config.phase;
    let mut records = prior;
    let epochs = state.config.epochs;
    let last = opts.stop_after.map_or(epochs, |n| (state.epoch + n).min(epochs));
    while state.epoch < last {
        let epoch = state.epoch;
        let run_epoch = |state: &mut TrainState, next: &mut dyn FnMut(usize) -> Result<(Vec<BatchItem>, Vec<u64>)>| -> Result<Vec<LogRecord>> {
            let mut recs = Vec::with_capacity(steps_per_epoch);
            for s in 0..steps_per_epoch {
                let (batch, indices) = next(s)?;
                let lr = lr_at(state.step, &state.config, steps_per_epoch);
                let step = state.step;
                let loss = train_step(state, &batch, lr)?;
                if !loss.is_finite() {
                    let seed = rng::mix64(state.config.seed, step as u64);
                    return Err(dump_diagnostic(opts.out.as_deref(), phase, epoch, step, seed, &indices));
                }
                recs.push(LogRecord {
                    step,
                    epoch,
                    loss,
                    lr,
                    phase: phase.as_str().into(),
                });
            }
            Ok(recs)
        };
        let recs = if opts.prefetch && steps_per_epoch > 1 {
            std::thread::scope(|scope| {
                let (tx, rx) = mpsc::sync_channel(2);
                let mb = &make_batch;
                scope.spawn(move || {
                    for s in 0..steps_per_epoch {
                        if tx.send(mb(epoch, s)).is_err() {
                            break;
                        }
                    }
                });
                run_epoch(&mut state, &mut |_| rx.recv().expect("producer alive"))
            })?
        } else {
            run_epoch(&mut state, &mut |s| make_batch(epoch, s))?
        };
        for r in recs {
            logger.push(r.clone());
            records.push(r);
        }
        state.epoch += 1;
        if let Some(val) = validate(&state.model, state.epoch)? {
            let rec = LogRecord {
                step: state.step,
                epoch,
                loss: val,
                lr: 0.0,
                phase: "val".into(),
            };
            logger.push(rec.clone());
            records.push(rec);
        }
        logger.flush()?;
        if let Some(dir) = &opts.out {
            save_state(&dir.join(CHECKPOINT_DIR), &state)?;
        }
    }
    let val_losses = records
        .iter()
        .filter(|r| r.phase == "val")
        .map(|r| (r.epoch, r.loss))
        .collect();
    Ok(TrainOutcome {
        epoch_losses: epoch_means(&records, phase.as_str()),
        val_losses,
        state,
    })
}

fn resume_or(opts: &RunOptions, fresh: impl FnOnce() -> Result<TrainState>) -> Result<TrainState> {
    if opts.resume {
        if let Some(dir) = &opts.out {
            let ck = dir.join(CHECKPOINT_DIR);
            if ck.exists() {
                return load_state(&ck);
            }
        }
    }
    fresh()
}

/// Class-agnostic conditioned pre-training on freshly synthesized samples.
pub fn pretrain(
    bank: &FeatureBank,
    synth: &SynthesisParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Pretrain {
        return Err(Error::Config("pretrain needs phase = pretrain".into()));
    }
    synth.validate(bank)?;
    let [lo, hi] = synth.category_range(bank);
    let model_cfg = ModelConfig {
        input_dim: bank.feature_dim(),
        num_classes: 1,
        num_target_categories: hi - lo,
        n_max: synth.n_max,
        ..model_cfg.clone()
    };
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let state = resume_or(opts, || {
        let model = DetectionTransformer::new(model_cfg.clone(), rng::mix64(cfg.seed, tag::INIT))?;
        Ok(TrainState::new(model, cfg.clone()))
    })?;
    if state.config.phase != Phase::Pretrain {
        return Err(Error::Checkpoint("resumed checkpoint is not from pre-training".into()));
    }
    let cfg = state.config.clone();
    let (logger, prior) = Logger::open(opts.out.as_deref(), state.epoch)?;
    let params = pretext_params(synth, cfg.seed);
    let n = cfg.samples_per_epoch;
    let spe = n.div_ceil(cfg.batch_size);
    let mcfg = state.model.config().clone();
    let make_batch = |epoch: usize, s: usize| -> Result<(Vec<BatchItem>, Vec<u64>)> {
        let start = s * cfg.batch_size;
        let end = (start + cfg.batch_size).min(n);
        let indices: Vec<u64> = (start..end).map(|i| (epoch * n + i) as u64).collect();
        let batch = indices
            .iter()
            .map(|&i| pretext_item(bank, &params, &mcfg, &cfg, i))
            .collect::<Result<Vec<_>>>()?;
        Ok((batch, indices))
    };
    run_epochs(state, prior, logger, opts, spe, make_batch, &|_, _| Ok(None))
}

/// How fine-tuning weights start.
#[derive(Clone, Copy, Debug)]
pub enum FinetuneInit<'a> {
    /// Fresh initialization with the given architecture.
    Scratch(&'a ModelConfig),
    /// Warm start from a pre-trained model.
    Pretrained(&'a DetectionTransformer),
}

/// Model for fine-tuning on `num_classes` classes: every weight except the
/// classification head comes from the warm start (or from a fresh init).
pub fn finetune_model(init: FinetuneInit, input_dim: usize, num_classes: usize, seed: u64) -> Result<DetectionTransformer> {
    let head_seed = rng::mix64(seed, tag::HEAD);
    match init {
        FinetuneInit::Scratch(cfg) => {
            let cfg = ModelConfig {
                input_dim,
                num_classes,
                ..cfg.clone()
            };
            let mut m = DetectionTransformer::new(cfg, rng::mix64(seed, tag::INIT))?;
            m.reinit_class_head(num_classes, head_seed);
            Ok(m)
        }
        FinetuneInit::Pretrained(pre) => {
            let pc = pre.config();
            if pc.input_dim != input_dim {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects {}-dim features, dataset has {input_dim}",
                    pc.input_dim
                )));
            }
            let cfg = ModelConfig {
                num_classes,
                ..pc.clone()
            };
            let mut m = DetectionTransformer::new(cfg, rng::mix64(seed, tag::INIT))?;
            let skip = m.class_head_ids();
            let copied = m.load_matching(pre.params(), &skip);
            if copied + 2 != m.params().len() {
                return Err(Error::Checkpoint(format!(
                    "warm start copied {copied} of {} tensors",
                    m.params().len() - 2
                )));
            }
            m.reinit_class_head(num_classes, head_seed);
            Ok(m)
        }
    }
}

/// Supervised fine-tuning on a downstream dataset without task conditioning.
pub fn finetune(
    init: FinetuneInit,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Finetune {
        return Err(Error::Config("finetune needs phase = finetune".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let state = resume_or(opts, || {
        let model = finetune_model(init, train.manifest.feature_dim, train.manifest.num_classes, cfg.seed)?;
        Ok(TrainState::new(model, cfg.clone()))
    })?;
    if state.config.phase != Phase::Finetune {
        return Err(Error::Checkpoint("resumed checkpoint is not from fine-tuning".into()));
    }
    let cfg = state.config.clone();
    let subset = data_fraction_split(train.len(), cfg.train_fraction, cfg.seed)?;
    let spe = subset.len().div_ceil(cfg.batch_size);
    let (logger, prior) = Logger::open(opts.out.as_deref(), state.epoch)?;
    let order_seed = rng::mix64(cfg.seed, tag::ORDER);
    let make_batch = |epoch: usize, s: usize| -> Result<(Vec<BatchItem>, Vec<u64>)> {
        let mut order = subset.clone();
        order.shuffle(&mut rng::stream(order_seed, epoch as u64));
        let start = s * cfg.batch_size;
        let end = (start + cfg.batch_size).min(order.len());
        let idx = &order[start..end];
        Ok((
            idx.iter().map(|&i| downstream_item(train, i)).collect(),
            idx.iter().map(|&i| i as u64).collect(),
        ))
    };
    let validate = |model: &DetectionTransformer, completed: usize| -> Result<Option<f64>> {
        match val {
            Some(v) if cfg.validate_every > 0 && completed % cfg.validate_every == 0 => {
                Ok(Some(dataset_loss(model, v, &cfg)?))
            }
            _ => Ok(None),
        }
    };
    run_epochs(state, prior, logger, opts, spe, make_batch, &validate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_split_sizes_and_nesting() {
        assert_eq!(data_fraction_split(100, 1.0, 3).unwrap(), (0..100).collect::<Vec<_>>());
        assert_eq!(data_fraction_split(100, 0.5, 3).unwrap().len(), 50);
        assert_eq!(data_fraction_split(10, 0.25, 3).unwrap().len(), 3);
        let quarter = data_fraction_split(200, 0.25, 9).unwrap();
        let half = data_fraction_split(200, 0.5, 9).unwrap();
        assert!(quarter.iter().all(|i| half.contains(i)));
        assert!(data_fraction_split(10, 0.0, 1).is_err());
        assert!(data_fraction_split(10, 1.5, 1).is_err());
    }
}
