//! Interaction recovery accuracy, forecast error, the static baseline and
//! the task harness that ties simulation, training and evaluation together.

mod metrics;
mod tasks;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use metrics::*;
pub use tasks::*;

use crate::dynamics::io::{read_dataset, write_dataset, write_matrix_csv};
use crate::dynamics::{generate_dataset, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{fingerprint_json, ModelConfig, ModelParams};
use crate::rng::{derive_seed, Purpose};
use crate::train::{checkpoint_label_permutation, EpochRecord, TrainConfig, Trainer, BEST_CHECKPOINT};

/// Test simulations per accuracy batch; the reported spread is the standard
/// deviation across these batches.
pub const ACCURACY_BATCH: usize = 100;

pub const DEFAULT_HORIZONS: [usize; 2] = [10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationSource {
    /// Chosen to maximize accuracy on the evaluated set.
    Fitted,
    /// Taken from the checkpoint's validation run.
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMse {
    pub horizon: usize,
    pub model: f64,
    pub baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: Option<u32>,
    pub task_name: String,
    pub test_sims: usize,
    pub seed: u64,
    /// Percent of unordered pairs labelled correctly, mean over batches.
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub accuracy_batches: Vec<f64>,
    /// Latent type `k` is read as ground-truth type `label_permutation[k]`.
    pub label_permutation: Vec<u8>,
    pub permutation_source: PermutationSource,
    pub mse: Vec<HorizonMse>,
    /// Per simulation, the relabelled `n × n` link-type matrix, row-major.
    pub predicted_adjacency: Vec<Vec<u8>>,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub notes: Vec<String>,
    /// Resolved run configuration that produced the report.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub config: Value,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let acc_ok = |a: f64| (0.0..=100.0).contains(&a);
        if !acc_ok(self.accuracy) || !self.accuracy_batches.iter().all(|&a| acc_ok(a)) {
            return Err(Error::Numeric(format!("accuracy {} outside [0, 100]", self.accuracy)));
        }
        if self.mse.iter().any(|m| !(m.model >= 0.0) || !(m.baseline >= 0.0)) {
            return Err(Error::Numeric("negative or undefined MSE".into()));
        }
        Ok(())
    }

    pub fn mse_at(&self, horizon: usize) -> Option<&HorizonMse> {
        self.mse.iter().find(|m| m.horizon == horizon)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            Error::format(
                0,
                format!("{} is not an evaluation report: {e}", path.display()),
            )
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub horizons: Vec<usize>,
    /// Seeds the Gumbel noise of the forecast samples.
    pub seed: u64,
    /// Use this latent-type relabelling instead of fitting one.
    pub permutation: Option<Vec<u8>>,
    pub keep_trajectories: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizons: DEFAULT_HORIZONS.to_vec(),
            seed: 0,
            permutation: None,
            keep_trajectories: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Per simulation, `[steps × n × D]` forecast frames (when kept).
    pub trajectories: Vec<Vec<f32>>,
    /// Frame the forecasts start from.
    pub anchor: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn adjacency(n: usize, pairs: &[u8], perm: &[u8]) -> Vec<u8> {
    let mut m = vec![0u8; n * n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let v = perm[pairs[k] as usize];
            m[i * n + j] = v;
            m[j * n + i] = v;
            k += 1;
        }
    }
    m
}

/// Scores a model on every simulation of `data`.
pub fn evaluate(params: &ModelParams<f32>, data: &TrajectoryDataset, opts: &EvalOptions) -> Result<Evaluation> {
    let c = &params.config;
    let all: Vec<usize> = (0..data.sims()).collect();
    if all.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let steps = opts.horizons.iter().copied().max().unwrap_or(0);
    let anchor = c.input_frames - 1;
    c.check_dataset(data, anchor + steps + 1)?;

    let post = infer_edges(params, data, &all, ACCURACY_BATCH)?;
    let pred = predicted_pairs(&post);
    let truth: Vec<Vec<u8>> = data.graphs.iter().map(|g| g.pair_labels()).collect();
    let (perm, source) = match &opts.permutation {
        Some(p) => {
            if p.len() != c.n_edge_types {
                return Err(Error::contract(format!(
                    "label permutation has {} entries for {} link types",
                    p.len(),
                    c.n_edge_types
                )));
            }
            (p.clone(), PermutationSource::Checkpoint)
        }
        None => (best_permutation(&pred, &truth, c.n_edge_types)?.0, PermutationSource::Fitted),
    };
    let batches: Vec<f64> = pred
        .chunks(ACCURACY_BATCH)
        .zip(truth.chunks(ACCURACY_BATCH))
        .map(|(p, t)| accuracy_with(&perm, p, t))
        .collect();
    let (accuracy, accuracy_std) = mean_std(&batches);

    let mut mse = Vec::new();
    let mut trajectories = Vec::new();
    if steps > 0 {
        let fc = forecast(params, data, &all, steps, opts.seed, ACCURACY_BATCH, opts.keep_trajectories)?;
        let base = baseline_static(data, &all, anchor, steps)?;
        for &h in &opts.horizons {
            mse.push(HorizonMse {
                horizon: h,
                model: fc.errors.mse(h)?,
                baseline: base.mse(h)?,
            });
        }
        trajectories = fc.trajectories;
    }

    let n = c.n_agents;
    let report = EvalReport {
        task_id: None,
        task_name: String::new(),
        test_sims: data.sims(),
        seed: opts.seed,
        accuracy,
        accuracy_std,
        accuracy_batches: batches,
        label_permutation: perm.clone(),
        permutation_source: source,
        mse,
        predicted_adjacency: pred.iter().map(|p| adjacency(n, p, &perm)).collect(),
        config_fingerprint: c.fingerprint(),
        dataset_fingerprint: fingerprint_json(&serde_json::to_value(&data.meta)?),
        notes: vec![
            "reconstruction loss omits constant Gaussian normalization terms".into(),
            "forecasts use hard edge samples".into(),
        ],
        config: Value::Null,
    };
    report.validate()?;
    Ok(Evaluation {
        report,
        trajectories,
        anchor,
    })
}

/// `adjacency/sim_XXXX_pred.csv` and `sim_XXXX_true.csv` under `dir`.
pub fn export_adjacency(report: &EvalReport, data: &TrajectoryDataset, dir: &Path) -> Result<()> {
    let dir = dir.join("adjacency");
    fs::create_dir_all(&dir)?;
    let n = data.n_agents();
    for (s, pred) in report.predicted_adjacency.iter().enumerate() {
        let mut f = BufWriter::new(fs::File::create(dir.join(format!("sim_{s:04}_pred.csv")))?);
        write_matrix_csv(n, pred, &mut f)?;
        f.flush()?;
        let mut f = BufWriter::new(fs::File::create(dir.join(format!("sim_{s:04}_true.csv")))?);
        write_matrix_csv(n, data.graphs[s].link_matrix(), &mut f)?;
        f.flush()?;
    }
    Ok(())
}

/// `trajectories/sim_XXXX.csv` under `dir`: observed and forecast values per
/// agent and frame after the anchor.
pub fn export_trajectories(ev: &Evaluation, data: &TrajectoryDataset, dir: &Path) -> Result<()> {
    if ev.trajectories.len() != data.sims() {
        return Err(Error::contract("evaluation was run without keeping trajectories"));
    }
    let dir = dir.join("trajectories");
    fs::create_dir_all(&dir)?;
    let (n, d) = (data.n_agents(), data.feature_dim());
    let names = data.meta.spec.system.channel_names(data.meta.spec.frequency_mode);
    let mut header = vec!["agent".to_string(), "step".into(), "frame".into()];
    header.extend(names.iter().map(|c| format!("pred_{c}")));
    header.extend(names.iter().map(|c| format!("true_{c}")));
    for (s, traj) in ev.trajectories.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("sim_{s:04}.csv")))
            .map_err(|e| Error::Io(e.into()))?;
        w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
        let steps = traj.len() / (n * d);
        for i in 0..n {
            for k in 0..steps {
                let frame = ev.anchor + k + 1;
                let mut row = vec![i.to_string(), (k + 1).to_string(), frame.to_string()];
                row.extend(traj[(k * n + i) * d..(k * n + i + 1) * d].iter().map(|v| v.to_string()));
                row.extend(data.frame(s, i, frame).iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

pub const TRAIN_DATASET: &str = "train.cds";
pub const TEST_DATASET: &str = "test.cds";
pub const REPORT_FILE: &str = "report.json";

/// How to run a catalog or custom task.
pub struct RunOptions<'a> {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub train: TrainConfig,
    pub horizons: Vec<usize>,
    /// Checkpoint evaluated by transfer tasks.
    pub source_checkpoint: Option<PathBuf>,
    pub keep_trajectories: bool,
    /// Replaces the task's default model configuration.
    pub model: Option<ModelConfig>,
    /// Embedded in checkpoints under `"run"`.
    pub run_meta: Value,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

impl RunOptions<'_> {
    pub fn new(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            out_dir: out_dir.into(),
            seed,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            horizons: DEFAULT_HORIZONS.to_vec(),
            source_checkpoint: None,
            keep_trajectories: false,
            model: None,
            run_meta: Value::Null,
            on_epoch: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskRun {
    pub evaluation: Evaluation,
    pub test: TrajectoryDataset,
    /// Checkpoint the evaluation used.
    pub checkpoint: PathBuf,
}

/// Seed of the test set drawn for master seed `seed`.
pub fn test_seed(seed: u64) -> u64 {
    derive_seed(seed, Purpose::TestSet, &[])
}

/// Loads `path` when it holds exactly the requested simulations, otherwise
/// generates and writes them.
pub fn dataset_cached(path: &Path, spec: &crate::dynamics::SystemSpec, sims: usize, seed: u64) -> Result<TrajectoryDataset> {
    if path.exists() {
        if let Ok(d) = read_dataset(path) {
            if d.meta.spec == *spec && d.meta.sims == sims && d.meta.seed == seed {
                return Ok(d);
            }
        }
    }
    let d = generate_dataset(spec, sims, seed)?;
    write_dataset(&d, path)?;
    Ok(d)
}

/// The task's model configuration, or `custom` after checking it fits the
/// task's data.
pub fn resolve_model(task: &TaskSpec, custom: Option<&ModelConfig>) -> Result<ModelConfig> {
    let base = task.model_config();
    let Some(c) = custom else { return Ok(base) };
    if (c.n_agents, c.feature_dim, c.input_frames) != (base.n_agents, base.feature_dim, base.input_frames) {
        return Err(Error::contract(format!(
            "model configured for {} agents × {} features over {} frames, task data has {} × {} over {}",
            c.n_agents, c.feature_dim, c.input_frames, base.n_agents, base.feature_dim, base.input_frames
        )));
    }
    c.validate()?;
    Ok(c.clone())
}

/// Generates (or reuses) the datasets under `opts.out_dir`, trains (or
/// resumes, or evaluates a source checkpoint for transfer tasks), evaluates
/// on the test set and writes `report.json`.
pub fn run_task(task: &TaskSpec, opts: &mut RunOptions<'_>) -> Result<TaskRun> {
    task.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    let model = resolve_model(task, opts.model.as_ref())?;
    let (params, checkpoint, permutation) = match task.transfer_from {
        Some(src) => {
            let path = opts.source_checkpoint.clone().ok_or_else(|| {
                Error::Missing(format!(
                    "task {} evaluates the checkpoint of task {src}; train task {src} first and pass its {BEST_CHECKPOINT}",
                    task.id.map_or("custom".to_string(), |i| i.to_string())
                ))
            })?;
            let ck = Checkpoint::load(&path).map_err(|e| match e {
                Error::Missing(m) => Error::Missing(format!("{m}; train task {src} first")),
                other => other,
            })?;
            let params = ck.params()?;
            if params.config != model {
                return Err(Error::contract(format!(
                    "{} holds a model for {} agents × {} features with {} link types, task needs {} × {} with {}",
                    path.display(),
                    params.config.n_agents,
                    params.config.feature_dim,
                    params.config.n_edge_types,
                    model.n_agents,
                    model.feature_dim,
                    model.n_edge_types
                )));
            }
            (params, path, checkpoint_label_permutation(&ck))
        }
        None => {
            let train = dataset_cached(&opts.out_dir.join(TRAIN_DATASET), &task.system, task.train_sims, opts.seed)?;
            let mut trainer = Trainer::new(model.clone(), opts.train.clone()).with_out_dir(&opts.out_dir);
            trainer.run_meta = if opts.run_meta.is_null() {
                json!({ "task": task, "seed": opts.seed })
            } else {
                opts.run_meta.clone()
            };
            trainer.on_epoch = opts.on_epoch.take();
            let outcome = trainer.run(&train)?;
            opts.on_epoch = trainer.on_epoch.take();
            (outcome.best, opts.out_dir.join(BEST_CHECKPOINT), None)
        }
    };
    let test = dataset_cached(&opts.out_dir.join(TEST_DATASET), &task.system, task.test_sims, test_seed(opts.seed))?;
    let mut evaluation = evaluate(
        &params,
        &test,
        &EvalOptions {
            horizons: opts.horizons.clone(),
            seed: opts.seed,
            permutation,
            keep_trajectories: opts.keep_trajectories,
        },
    )?;
    evaluation.report.task_id = task.id;
    evaluation.report.task_name = task.name.clone();
    evaluation.report.save(&opts.out_dir.join(REPORT_FILE))?;
    Ok(TaskRun {
        evaluation,
        test,
        checkpoint,
    })
}
