//! Run configuration files.
//!
//! A config is a JSON object. Every key is optional in the file, but after
//! command-line overrides are applied a task and a seed must be known:
//!
//! ```json
//! {
//!   "task": 1,
//!   "seed": 7,
//!   "out": "runs/task-1",
//!   "train_sims": 1000,
//!   "test_sims": 200,
//!   "train": { "epochs": 100, "learning_rate": 0.0005 },
//!   "model": { "hidden": 64 },
//!   "horizons": [10, 20],
//!   "source_checkpoint": "runs/task-1/best.nrim"
//! }
//! ```
//!
//! Instead of `"task"` a full `"custom"` task may be given (see
//! [`relnet::eval::TaskSpec`]). Any artifact manifest or report written by
//! the CLI embeds its resolved config under `"config"` and can be passed
//! back with `--config` to reproduce it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use relnet::eval::{resolve_model, task, TaskSpec, DEFAULT_HORIZONS};
use relnet::model::ModelConfig;
use relnet::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub lr_decay_every: Option<usize>,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub n_edge_types: Option<usize>,
    pub hidden: Option<usize>,
    pub tau: Option<f64>,
    pub sigma2: Option<f64>,
    pub pred_steps: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<u32>,
    pub custom: Option<TaskSpec>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub train_sims: Option<usize>,
    pub test_sims: Option<usize>,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub model: ModelOverrides,
    pub horizons: Option<Vec<usize>>,
    pub source_checkpoint: Option<PathBuf>,
}

/// Everything a command needs, with all defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub task: TaskSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub horizons: Vec<usize>,
    pub source_checkpoint: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a config file, or the `"config"` embedded in an artifact.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("{} is not valid JSON", path.display()))?;
        let value = match value.get("config") {
            Some(embedded) if embedded.is_object() => embedded.clone(),
            _ => value,
        };
        serde_json::from_value(value)
            .with_context(|| format!("{} is not a valid run config", path.display()))
    }

    pub fn resolve(&self) -> anyhow::Result<Resolved> {
        let mut spec = match (&self.task, &self.custom) {
            (Some(_), Some(_)) => bail!("give either \"task\" or \"custom\", not both"),
            (Some(id), None) => task(*id)?,
            (None, Some(c)) => c.clone(),
            (None, None) => bail!("no task given; use --task N or a config with \"task\" or \"custom\""),
        };
        let seed = self
            .seed
            .context("no seed given; use --seed or set \"seed\" in the config")?;
        if let Some(n) = self.train_sims {
            spec.train_sims = n;
        }
        if let Some(n) = self.test_sims {
            spec.test_sims = n;
        }
        let m = &self.model;
        let mut model = spec.model_config();
        model.n_edge_types = m.n_edge_types.unwrap_or(model.n_edge_types);
        model.hidden = m.hidden.unwrap_or(model.hidden);
        model.tau = m.tau.unwrap_or(model.tau);
        model.sigma2 = m.sigma2.unwrap_or(model.sigma2);
        model.pred_steps = m.pred_steps.unwrap_or(model.pred_steps);
        spec.n_edge_types = model.n_edge_types;
        spec.validate()?;
        let model = resolve_model(&spec, Some(&model))?;

        let t = &self.train;
        let d = TrainConfig::default();
        let train = TrainConfig {
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            lr_decay: t.lr_decay.unwrap_or(d.lr_decay),
            lr_decay_every: t.lr_decay_every.unwrap_or(d.lr_decay_every),
            seed,
            grad_clip: t.grad_clip.unwrap_or(d.grad_clip),
            checkpoint_every: t.checkpoint_every.unwrap_or(d.checkpoint_every),
        };
        train.validate()?;

        let horizons = self.horizons.clone().unwrap_or_else(|| DEFAULT_HORIZONS.to_vec());
        if horizons.is_empty() || horizons.contains(&0) {
            bail!("horizons must be positive");
        }
        let max = spec.max_horizon();
        if let Some(h) = horizons.iter().find(|&&h| h > max) {
            bail!("horizon {h} exceeds the {max} frames available after the encoder window");
        }
        let out = match &self.out {
            Some(p) => p.clone(),
            None => PathBuf::from(match spec.id {
                Some(id) => format!("runs/task-{id}"),
                None => "runs/custom".to_string(),
            }),
        };
        let source_checkpoint = match (&self.source_checkpoint, spec.transfer_from) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(src)) => out
                .parent()
                .map(|parent| parent.join(format!("task-{src}")).join(relnet::train::BEST_CHECKPOINT)),
            (None, None) => None,
        };
        Ok(Resolved {
            task: spec,
            seed,
            out,
            model,
            train,
            horizons,
            source_checkpoint,
        })
    }
}

impl Resolved {
    /// Fully populated config that resolves back to `self`.
    pub fn to_run_config(&self) -> RunConfig {
        RunConfig {
            task: None,
            custom: Some(self.task.clone()),
            seed: Some(self.seed),
            out: Some(self.out.clone()),
            train_sims: Some(self.task.train_sims),
            test_sims: Some(self.task.test_sims),
            train: TrainOverrides {
                epochs: Some(self.train.epochs),
                batch_size: Some(self.train.batch_size),
                learning_rate: Some(self.train.learning_rate),
                lr_decay: Some(self.train.lr_decay),
                lr_decay_every: Some(self.train.lr_decay_every),
                grad_clip: Some(self.train.grad_clip),
                checkpoint_every: Some(self.train.checkpoint_every),
            },
            model: ModelOverrides {
                n_edge_types: Some(self.model.n_edge_types),
                hidden: Some(self.model.hidden),
                tau: Some(self.model.tau),
                sigma2: Some(self.model.sigma2),
                pred_steps: Some(self.model.pred_steps),
            },
            horizons: Some(self.horizons.clone()),
            source_checkpoint: self.source_checkpoint.clone(),
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self.to_run_config()).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig {
            task: Some(3),
            seed: Some(11),
            train: TrainOverrides {
                epochs: Some(2),
                ..Default::default()
            },
            ..Default::default()
        };
        let r = cfg.resolve().unwrap();
        assert_eq!(r.task.n_edge_types, 3);
        assert_eq!(r.train.seed, 11);
        let again: RunConfig = serde_json::from_value(r.to_json()).unwrap();
        assert_eq!(again.resolve().unwrap(), r);
    }

    #[test]
    fn seed_and_task_are_required() {
        assert!(RunConfig { task: Some(1), ..Default::default() }.resolve().is_err());
        assert!(RunConfig { seed: Some(1), ..Default::default() }.resolve().is_err());
    }

    #[test]
    fn transfer_tasks_default_to_sibling_checkpoint() {
        let r = RunConfig {
            task: Some(12),
            seed: Some(0),
            out: Some("runs/task-12".into()),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(r.source_checkpoint, Some(PathBuf::from("runs/task-1/best.nrim")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"task": 1, "sed": 3}"#).is_err());
    }
}
