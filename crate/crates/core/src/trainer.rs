//! Optimisation: Adam with a halving learning-rate schedule, per-epoch
//! checkpoints and a JSON-lines training log.

use std::borrow::Cow;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::rng::streams;
use crate::autodiff::{read_checkpoint, write_checkpoint, ParameterSet, SeedTree, Tape, Tensor};
use crate::corpus::{Dataset, FeatureMap};
use crate::decoder::{teacher_forced_loss, Batch, LossValues, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every_epochs: usize,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            halve_every_epochs: 4,
            lr_min: 2e-4,
            epochs: 20,
            batch_size: 32,
            dropout: 0.35,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min <= self.lr0 && self.lr_min > 0.0) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr0, got lr_min {} and lr0 {}",
                self.lr_min, self.lr0
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.halve_every_epochs == 0 {
            return Err(Error::Config("epochs, batch size and halving period must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.weight_decay < 0.0 {
            return Err(Error::Config("dropout must be in [0, 1) and weight decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch: halved every `halve_every_epochs`,
/// never below `lr_min`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.halve_every_epochs).min(1024) as i32;
    (cfg.lr0 * 0.5f64.powi(halvings)).max(cfg.lr_min)
}

/// Uniform Xavier/Glorot initialisation. For ranks other than two the first
/// axis is fan-out and the flattened rest is fan-in.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_out = shape.first().copied().unwrap_or(1).max(1);
    let fan_in = shape.iter().skip(1).product::<usize>().max(1);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut ParameterSet<T>, state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.adam_eps));
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_nll: f64,
    pub loss_attn: f64,
    pub loss_l2: f64,
    pub wall_s: f64,
}

/// Optimizer progress stored next to every epoch checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Last completed 0-based epoch.
    pub epoch: usize,
    pub adam_step: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Copy of the last epoch's weights.
    pub final_checkpoint: PathBuf,
}

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

fn moments_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("adam.ckpt")
}

fn state_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("state.json")
}

/// Trains from the model's current weights for `cfg.epochs` epochs.
pub fn train<T: Scalar>(dataset: &Dataset, model: &mut Model<T>, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    let mut adam = AdamState::new(&model.params);
    let log = out_dir.join(LOG_FILE);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    run_epochs(dataset, model, &mut adam, 0, cfg, out_dir)
}

/// Continues from an epoch checkpoint written by [`train`]; the result is
/// identical to an uninterrupted run with the same configuration.
pub fn resume<T: Scalar>(
    dataset: &Dataset,
    checkpoint: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Model<T>, TrainReport)> {
    let mut model = Model::<T>::load(checkpoint)?;
    let sp = state_path(checkpoint);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let state: TrainerState = serde_json::from_str(&text)?;
    let mut adam = AdamState::new(&model.params);
    adam.step = state.adam_step;
    for (name, t) in read_checkpoint::<T>(&moments_path(checkpoint))? {
        let (kind, pname) = name
            .split_once(':')
            .ok_or_else(|| Error::Format { offset: 0, msg: format!("bad moment name {name}") })?;
        let id = model
            .params
            .id(pname)
            .ok_or_else(|| Error::Config(format!("moment for unknown parameter {pname}")))?;
        match kind {
            "m" => adam.m[id.0] = t,
            "v" => adam.v[id.0] = t,
            _ => return Err(Error::Format { offset: 0, msg: format!("bad moment name {name}") }),
        }
    }
    let report = run_epochs(dataset, &mut model, &mut adam, state.epoch + 1, cfg, out_dir)?;
    Ok((model, report))
}

/// Flattened (record, caption) training pairs, encoded for the model.
fn encode_examples<T: Scalar>(dataset: &Dataset, model: &Model<T>) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for (i, rec) in dataset.records.iter().enumerate() {
        for words in &rec.captions {
            let tokens = model
                .codec
                .encode(words)
                .map_err(|e| Error::Range(format!("record {}: {e}", rec.id)))?;
            out.push((i, tokens));
        }
    }
    Ok(out)
}

fn run_epochs<T: Scalar>(
    dataset: &Dataset,
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    first_epoch: usize,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let examples = encode_examples(dataset, model)?;
    if examples.is_empty() {
        return Err(Error::Argument("dataset has no captions".into()));
    }
    let maps: Vec<Cow<'_, FeatureMap>> = (0..dataset.len()).map(|i| dataset.feature_map(i)).collect::<Result<_>>()?;
    let seeds = SeedTree::new(cfg.seed);
    let mut model_cfg = model.cfg;
    model_cfg.dropout_rate = cfg.dropout;
    model.cfg = model_cfg;

    let log_path = out_dir.join(LOG_FILE);
    let mut logs = Vec::new();
    let mut last_ckpt = None;
    for epoch in first_epoch..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seeds.stream(&[streams::SHUFFLE, epoch as u64]));

        let mut sums = LossValues::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_maps: Vec<&FeatureMap> = chunk.iter().map(|&e| maps[examples[e].0].as_ref()).collect();
            let seqs = chunk.iter().map(|&e| examples[e].1.clone()).collect();
            let batch = Batch::<T>::new(&batch_maps, seqs)?;
            let mut rng = seeds.stream(&[streams::DROPOUT, epoch as u64, bi as u64]);
            let mut tape = Tape::new();
            let dropout: crate::decoder::DropoutRng<'_> = if cfg.dropout > 0.0 { Some(&mut rng) } else { None };
            let diverged = |what: String| {
                Error::Numeric(format!(
                    "{what} at epoch {epoch}, batch {bi}; last good checkpoint: {}",
                    last_ckpt
                        .as_ref()
                        .map(|p: &PathBuf| p.display().to_string())
                        .unwrap_or_else(|| "none".into())
                ))
            };
            let numeric = |e: Error| match e {
                Error::Numeric(m) => diverged(m),
                other => other,
            };
            let loss = teacher_forced_loss(&mut tape, model, &batch, cfg.weight_decay, dropout).map_err(numeric)?;
            let v = loss.values(&tape);
            if !v.total.is_finite() {
                return Err(diverged(format!("loss diverged ({})", v.total)));
            }
            let grads = tape.backward(loss.total).map_err(numeric)?;
            model.params.zero_grad();
            grads.accumulate_into(&mut model.params);
            adam_step(&mut model.params, adam, lr, cfg).map_err(numeric)?;
            let w = chunk.len() as f64;
            sums.total += v.total * w;
            sums.nll += v.nll * w;
            sums.attn_reg += v.attn_reg * w;
            sums.l2 += v.l2 * w;
        }

        let n = examples.len() as f64;
        let entry = EpochLog {
            epoch,
            lr,
            loss_total: sums.total / n,
            loss_nll: sums.nll / n,
            loss_attn: sums.attn_reg / n,
            loss_l2: sums.l2 / n,
            wall_s: started.elapsed().as_secs_f64(),
        };
        let ckpt = epoch_checkpoint(out_dir, epoch);
        save_epoch(model, adam, epoch, cfg, &ckpt)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
        logs.push(entry);
        last_ckpt = Some(ckpt);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    model.save(&final_checkpoint)?;
    Ok(TrainReport {
        epochs: logs,
        final_checkpoint,
    })
}

fn save_epoch<T: Scalar>(model: &Model<T>, adam: &AdamState<T>, epoch: usize, cfg: &TrainConfig, ckpt: &Path) -> Result<()> {
    model.save(ckpt)?;
    let mut moments = Vec::with_capacity(2 * adam.m.len());
    for (p, (m, v)) in model.params.iter().zip(adam.m.iter().zip(&adam.v)) {
        moments.push((format!("m:{}", p.name), m.clone()));
        moments.push((format!("v:{}", p.name), v.clone()));
    }
    write_checkpoint(&moments_path(ckpt), &moments)?;
    let state = TrainerState {
        epoch,
        adam_step: adam.step,
        config: *cfg,
    };
    let sp = state_path(ckpt);
    fs::write(&sp, serde_json::to_string_pretty(&state)? + "\n").map_err(|e| Error::io(&sp, e))
}
