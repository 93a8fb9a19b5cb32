//! Minimizing the negated ELBO: Adam, seeded mini-batches, step-decayed
//! learning rate, per-epoch validation, checkpoints and resumption.

mod history;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use history::{EpochRecord, TrainHistory};

use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::eval::{best_permutation, infer_edges, predicted_pairs};
use crate::model::checkpoint::Checkpoint;
use crate::model::{elbo_loss, Batch, ModelConfig, ModelParams};
use crate::rng::{stream, Purpose};
use crate::tensor::{Tape, Tensor};

pub const LAST_CHECKPOINT: &str = "last.nrim";
pub const BEST_CHECKPOINT: &str = "best.nrim";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Factor applied to the learning rate every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Write the resumable checkpoint every this many epochs (and after the
    /// last one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 5e-4,
            lr_decay: 0.5,
            lr_decay_every: 50,
            seed: 0,
            grad_clip: 5.0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::contract(format!(
                "invalid learning-rate schedule {} × {} every {} epochs",
                self.learning_rate, self.lr_decay, self.lr_decay_every
            )));
        }
        if !(self.grad_clip > 0.0) || self.checkpoint_every == 0 {
            return Err(Error::contract("grad_clip and checkpoint_every must be positive"));
        }
        Ok(())
    }

    /// Learning rate during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Equal apart from the epoch budget.
    fn resumable_from(&self, other: &TrainConfig) -> bool {
        TrainConfig {
            epochs: other.epochs,
            ..self.clone()
        } == *other
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: BTreeMap<String, Tensor<f32>> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update with `β = (0.9, 0.999)`, `ε = 1e-8`.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, p) in &params.tensors {
        let shape = p.shape();
        let ok = |t: Option<&Tensor<f32>>| t.is_some_and(|t| t.shape() == shape);
        if !ok(grads.get(name)) || !ok(state.m.get(name)) || !ok(state.v.get(name)) {
            return Err(Error::contract(format!(
                "gradient or optimizer state for {name} missing or not shaped {shape:?}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2_sqrt = (1.0 - ADAM_BETA2.powi(t)).sqrt();
    let step_size = lr / bc1;
    for (name, p) in params.tensors.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] as f64;
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let denom = vi.sqrt() / bc2_sqrt + ADAM_EPS;
            *w = (*w as f64 - step_size * mi / denom) as f32;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Deterministic split by simulation index: the first 90% train, the rest
/// validate (at least one of each).
pub fn split_indices(sims: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if sims < 2 {
        return Err(Error::contract(format!(
            "need at least two simulations to split off validation, got {sims}"
        )));
    }
    let n_val = (sims / 10).max(1);
    let n_train = sims - n_val;
    Ok(((0..n_train).collect(), (n_train..sims).collect()))
}

/// Validation accuracy and the relabelling of latent types that achieves it.
pub fn validate(params: &ModelParams<f32>, data: &TrajectoryDataset, indices: &[usize]) -> Result<(f64, Vec<u8>)> {
    let post = infer_edges(params, data, indices, 100)?;
    let truth: Vec<Vec<u8>> = indices.iter().map(|&s| data.graphs[s].pair_labels()).collect();
    let (perm, acc) = best_permutation(&predicted_pairs(&post), &truth, params.config.n_edge_types)?;
    Ok((acc, perm))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub best: ModelParams<f32>,
    pub last: ModelParams<f32>,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Latent type `k` corresponds to ground-truth type `label_permutation[k]`
    /// on the validation set at the best epoch.
    pub label_permutation: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    epochs_done: usize,
    adam_step: u64,
    best_epoch: usize,
    best_val_acc: f64,
    label_permutation: Vec<u8>,
    history: Vec<EpochRecord>,
}

type BatchHook<'a> = Box<dyn FnMut(usize, &[usize]) + 'a>;
type EpochHook<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;

/// Training driver. Without an output directory nothing touches the disk.
pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub out_dir: Option<PathBuf>,
    /// Continue from `last.nrim` in `out_dir` when it exists.
    pub resume: bool,
    /// Extra JSON embedded in every checkpoint under `"run"`.
    pub run_meta: Value,
    /// Called with `(epoch, simulation indices)` before each gradient step.
    pub on_batch: Option<BatchHook<'a>>,
    pub on_epoch: Option<EpochHook<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Self {
        Self {
            model,
            config,
            out_dir: None,
            resume: true,
            run_meta: Value::Null,
            on_batch: None,
            on_epoch: None,
        }
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    fn checkpoint(&self, params: &ModelParams<f32>, adam: Option<&AdamState>, state: &ResumeState) -> Checkpoint {
        let mut ck = Checkpoint::from_params(
            params,
            json!({
                "train": self.config,
                "state": state,
                "run": self.run_meta,
            }),
        );
        if let Some(adam) = adam {
            for (k, t) in &adam.m {
                ck.tensors.insert(format!("adam.m:{k}"), t.clone());
            }
            for (k, t) in &adam.v {
                ck.tensors.insert(format!("adam.v:{k}"), t.clone());
            }
        }
        ck
    }

    fn try_resume(&self) -> Result<Option<(ModelParams<f32>, AdamState, ResumeState)>> {
        let Some(path) = self.path(LAST_CHECKPOINT).filter(|p| self.resume && p.exists()) else {
            return Ok(None);
        };
        let ck = Checkpoint::load(&path)?;
        let params = ck.params()?;
        if params.config != self.model {
            return Err(Error::contract(format!(
                "{} was written for a different model configuration; use a fresh output directory or --force",
                path.display()
            )));
        }
        let saved: TrainConfig = serde_json::from_value(ck.meta["train"].clone())?;
        if !self.config.resumable_from(&saved) {
            return Err(Error::contract(format!(
                "{} was written with different training settings; use a fresh output directory or --force",
                path.display()
            )));
        }
        let state: ResumeState = serde_json::from_value(ck.meta["state"].clone())?;
        let mut adam = AdamState::new(&params);
        adam.step = state.adam_step;
        for (prefix, map) in [("adam.m:", &mut adam.m), ("adam.v:", &mut adam.v)] {
            for (k, t) in map.iter_mut() {
                *t = ck
                    .tensors
                    .get(&format!("{prefix}{k}"))
                    .cloned()
                    .ok_or_else(|| Error::Missing(format!("optimizer state {prefix}{k}")))?;
            }
        }
        Ok(Some((params, adam, state)))
    }

    pub fn run(&mut self, data: &TrajectoryDataset) -> Result<TrainOutcome> {
        self.model.validate()?;
        self.config.validate()?;
        self.model.check_dataset(data, self.model.input_frames)?;
        let (train_idx, val_idx) = split_indices(data.sims())?;
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir)?;
        }

        let (mut params, mut adam, mut state) = match self.try_resume()? {
            Some(r) => r,
            None => {
                let params = ModelParams::<f32>::init(self.model.clone(), self.config.seed)?;
                let adam = AdamState::new(&params);
                let state = ResumeState {
                    epochs_done: 0,
                    adam_step: 0,
                    best_epoch: 0,
                    best_val_acc: -1.0,
                    label_permutation: (0..self.model.n_edge_types as u8).collect(),
                    history: Vec::new(),
                };
                (params, adam, state)
            }
        };
        let mut best = match self.path(BEST_CHECKPOINT).filter(|p| state.epochs_done > 0 && p.exists()) {
            Some(p) => Checkpoint::load(&p)?.params()?,
            None => params.clone(),
        };

        let cfg = self.config.clone();
        let names: Vec<String> = params.tensors.keys().cloned().collect();
        for epoch in state.epochs_done..cfg.epochs {
            let started = Instant::now();
            let lr = cfg.lr_at(epoch);
            let mut order = train_idx.clone();
            order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
            let (mut loss_sum, mut nll_sum, mut kl_sum) = (0.0, 0.0, 0.0);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if let Some(hook) = self.on_batch.as_mut() {
                    hook(epoch, chunk);
                }
                let batch = Batch::<f32>::from_dataset(data, chunk);
                let tape = Tape::new();
                let bound = params.bind(&tape, true);
                let mut rng = stream(cfg.seed, Purpose::Gumbel, &[epoch as u64, b as u64]);
                let terms = elbo_loss(&bound, &batch, &mut rng)?;
                let loss = terms.loss.item() as f64;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b });
                }
                let w = chunk.len() as f64;
                loss_sum += loss * w;
                nll_sum += terms.nll.item() as f64 * w;
                kl_sum += terms.kl.item() as f64 * w;
                let g = tape.backward(terms.loss)?;
                let mut grads: BTreeMap<String, Tensor<f32>> = names
                    .iter()
                    .map(|n| (n.clone(), g.get_or_zeros(bound.var(n))))
                    .collect();
                clip_global_norm(&mut grads, cfg.grad_clip);
                adam_step(&mut params, &grads, &mut adam, lr)?;
            }
            let (val_acc, perm) = validate(&params, data, &val_idx)?;
            let n = train_idx.len() as f64;
            let record = EpochRecord {
                epoch: epoch + 1,
                loss: loss_sum / n,
                recon: nll_sum / n,
                kl: kl_sum / n,
                val_acc,
                seconds: started.elapsed().as_secs_f64(),
            };
            state.history.push(record.clone());
            state.epochs_done = epoch + 1;
            state.adam_step = adam.step;
            if val_acc > state.best_val_acc {
                state.best_val_acc = val_acc;
                state.best_epoch = epoch + 1;
                state.label_permutation = perm;
                best = params.clone();
                if let Some(p) = self.path(BEST_CHECKPOINT) {
                    self.checkpoint(&best, None, &state).save(&p)?;
                }
            }
            let last_epoch = epoch + 1 == cfg.epochs;
            if (epoch + 1) % cfg.checkpoint_every == 0 || last_epoch {
                if let Some(p) = self.path(HISTORY_FILE) {
                    crate::write_atomic(&p, TrainHistory { records: state.history.clone() }.to_csv().as_bytes())?;
                }
                if let Some(p) = self.path(LAST_CHECKPOINT) {
                    self.checkpoint(&params, Some(&adam), &state).save(&p)?;
                }
            }
            if let Some(hook) = self.on_epoch.as_mut() {
                hook(&record);
            }
        }
        Ok(TrainOutcome {
            best,
            last: params,
            history: TrainHistory { records: state.history },
            best_epoch: state.best_epoch,
            best_val_acc: state.best_val_acc,
            label_permutation: state.label_permutation,
        })
    }
}

/// Trains in memory with default hooks.
pub fn train(data: &TrajectoryDataset, model: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model.clone(), config.clone()).run(data)
}

/// Label permutation recorded with a checkpoint written by [`Trainer`].
pub fn checkpoint_label_permutation(ck: &Checkpoint) -> Option<Vec<u8>> {
    serde_json::from_value(ck.meta.get("state")?.get("label_permutation")?.clone()).ok()
}

/// Validation accuracy recorded with a checkpoint written by [`Trainer`].
pub fn checkpoint_val_acc(ck: &Checkpoint) -> Option<f64> {
    ck.meta.get("state")?.get("best_val_acc")?.as_f64()
}

/// Loads the best checkpoint from a training output directory.
pub fn load_best(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&dir.join(BEST_CHECKPOINT))
}
