//! Command implementations behind the `relnet` binary.
//!
//! Each command takes a [`Resolved`] configuration, writes its artifacts
//! under the configured output directory and records a manifest holding the
//! configuration, tool version and timestamps next to them.

pub mod config;
pub mod table;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use relnet::dynamics::io::{read_dataset, write_dataset};
use relnet::dynamics::{generate_dataset, TrajectoryDataset};
use relnet::eval::{
    evaluate, export_adjacency, export_trajectories, test_seed, EvalOptions, EvalReport, REPORT_FILE,
    TEST_DATASET, TRAIN_DATASET,
};
use relnet::model::checkpoint::Checkpoint;
use relnet::train::{checkpoint_label_permutation, Trainer, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT};
use serde_json::json;

pub use config::{Resolved, RunConfig};
pub use table::{ReportRow, ReportTable};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("RELNET_GIT_DESCRIBE"), ")");

/// A failed command, split by whose fault it is.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or inputs; exit code 1.
    Usage(anyhow::Error),
    /// Something went wrong while running; exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<relnet::Error> for Failure {
    fn from(e: relnet::Error) -> Self {
        use relnet::Error as E;
        match e {
            E::Contract(_) | E::Missing(_) | E::Format { .. } | E::Dimension(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;

pub trait FailureExt<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> FailureExt<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn refuse_existing(path: &Path, force: bool) -> CmdResult<()> {
    if path.exists() && !force {
        return Err(Failure::Usage(anyhow!(
            "{} already exists; pass --force to overwrite it",
            path.display()
        )));
    }
    Ok(())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes `manifest-<command>.json` into the output directory.
fn write_manifest(r: &Resolved, command: &str, started: &str, artifacts: &[PathBuf]) -> CmdResult<PathBuf> {
    let path = r.out.join(format!("manifest-{command}.json"));
    let manifest = json!({
        "command": command,
        "version": VERSION,
        "config": r.to_json(),
        "started": started,
        "finished": now(),
        "artifacts": artifacts,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    relnet::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn create_out(r: &Resolved) -> CmdResult<()> {
    fs::create_dir_all(&r.out)
        .with_context(|| format!("cannot create output directory {}", r.out.display()))
        .runtime()
}

/// Generates the training set (unless the task is evaluation-only) and the
/// test set.
pub fn cmd_simulate(r: &Resolved, force: bool) -> CmdResult<Vec<PathBuf>> {
    let started = now();
    create_out(r)?;
    let mut jobs = Vec::new();
    if r.task.transfer_from.is_none() {
        jobs.push((r.out.join(TRAIN_DATASET), r.task.train_sims, r.seed));
    }
    jobs.push((r.out.join(TEST_DATASET), r.task.test_sims, test_seed(r.seed)));
    for (path, _, _) in &jobs {
        refuse_existing(path, force)?;
    }
    let mut written = Vec::new();
    for (path, sims, seed) in jobs {
        let d = generate_dataset(&r.task.system, sims, seed)?;
        write_dataset(&d, &path)?;
        eprintln!("wrote {} ({sims} simulations)", path.display());
        written.push(path);
    }
    write_manifest(r, "simulate", &started, &written)?;
    Ok(written)
}

/// Reads `explicit`, or `<out>/<name>` when present, or generates it.
fn dataset_for(r: &Resolved, explicit: Option<&Path>, name: &str, sims: usize, seed: u64) -> CmdResult<TrajectoryDataset> {
    let path = match explicit {
        Some(p) => {
            return read_dataset(p)
                .map_err(|e| Failure::Usage(anyhow!(e).context(format!("cannot load dataset {}", p.display()))))
        }
        None => r.out.join(name),
    };
    if path.exists() {
        let d = read_dataset(&path)?;
        if d.meta.spec != r.task.system || d.meta.sims != sims || d.meta.seed != seed {
            return Err(Failure::Usage(anyhow!(
                "{} was generated from a different configuration; rerun `relnet simulate --force` or choose another --out",
                path.display()
            )));
        }
        return Ok(d);
    }
    let d = generate_dataset(&r.task.system, sims, seed)?;
    write_dataset(&d, &path)?;
    Ok(d)
}

/// Trains on the task's training set, resuming from `last.nrim` unless
/// `force` asks for a fresh start.
pub fn cmd_train(r: &Resolved, force: bool, dataset: Option<&Path>) -> CmdResult<relnet::train::TrainOutcome> {
    let started = now();
    if let Some(src) = r.task.transfer_from {
        return Err(Failure::Usage(anyhow!(
            "task {} only evaluates the task-{src} model; train task {src} instead",
            r.task.id.unwrap_or_default()
        )));
    }
    create_out(r)?;
    if force {
        for name in [LAST_CHECKPOINT, BEST_CHECKPOINT, HISTORY_FILE] {
            let p = r.out.join(name);
            if p.exists() {
                fs::remove_file(&p).runtime()?;
            }
        }
    }
    let data = dataset_for(r, dataset, TRAIN_DATASET, r.task.train_sims, r.seed)?;
    r.model.check_dataset(&data, r.model.input_frames).map_err(|e| {
        Failure::Usage(anyhow!(e).context("dataset does not fit the model configuration"))
    })?;
    let mut trainer = Trainer::new(r.model.clone(), r.train.clone()).with_out_dir(&r.out);
    trainer.run_meta = json!({ "config": r.to_json(), "version": VERSION });
    trainer.on_epoch = Some(Box::new(|rec| {
        eprintln!(
            "epoch {:>4}  loss {:.5e}  recon {:.5e}  kl {:.4}  val_acc {:.2}  {:.1}s",
            rec.epoch, rec.loss, rec.recon, rec.kl, rec.val_acc, rec.seconds
        )
    }));
    let outcome = trainer.run(&data)?;
    write_manifest(
        r,
        "train",
        &started,
        &[r.out.join(LAST_CHECKPOINT), r.out.join(BEST_CHECKPOINT), r.out.join(HISTORY_FILE)],
    )?;
    Ok(outcome)
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub export_adjacency: bool,
    pub export_trajectories: bool,
}

/// Scores a checkpoint on the test set and writes `report.json` plus the
/// requested CSV exports.
pub fn cmd_eval(r: &Resolved, force: bool, args: &EvalArgs) -> CmdResult<EvalReport> {
    let started = now();
    create_out(r)?;
    let report_path = r.out.join(REPORT_FILE);
    refuse_existing(&report_path, force)?;
    let ck_path = match (&args.checkpoint, r.task.transfer_from) {
        (Some(p), _) => p.clone(),
        (None, Some(src)) => r.source_checkpoint.clone().ok_or_else(|| {
            Failure::Usage(anyhow!("no checkpoint for task {src}; train it first or pass --checkpoint"))
        })?,
        (None, None) => r.out.join(BEST_CHECKPOINT),
    };
    let ck = Checkpoint::load(&ck_path).map_err(|e| {
        let hint = match r.task.transfer_from {
            Some(src) => format!("train task {src} first (relnet train --task {src}) or pass --checkpoint"),
            None => "run `relnet train` with the same --out first or pass --checkpoint".to_string(),
        };
        Failure::Usage(anyhow!(e).context(format!("cannot load checkpoint {}; {hint}", ck_path.display())))
    })?;
    let params = ck.params()?;
    let data = dataset_for(r, args.dataset.as_deref(), TEST_DATASET, r.task.test_sims, test_seed(r.seed))?;
    params
        .config
        .check_dataset(&data, params.config.input_frames + r.horizons.iter().max().copied().unwrap_or(0))
        .map_err(|e| Failure::Usage(anyhow!(e).context("checkpoint and dataset are incompatible")))?;
    let permutation = if r.task.transfer_from.is_some() {
        Some(checkpoint_label_permutation(&ck).ok_or_else(|| {
            Failure::Usage(anyhow!("{} records no label permutation", ck_path.display()))
        })?)
    } else {
        None
    };
    let opts = EvalOptions {
        horizons: r.horizons.clone(),
        seed: r.seed,
        permutation,
        keep_trajectories: args.export_trajectories,
    };
    let mut ev = evaluate(&params, &data, &opts)?;
    ev.report.task_id = r.task.id;
    ev.report.task_name = r.task.name.clone();
    ev.report.config = r.to_json();
    ev.report.save(&report_path)?;
    let mut artifacts = vec![report_path];
    if args.export_adjacency {
        export_adjacency(&ev.report, &data, &r.out)?;
        artifacts.push(r.out.join("adjacency"));
    }
    if args.export_trajectories {
        export_trajectories(&ev, &data, &r.out)?;
        artifacts.push(r.out.join("trajectories"));
    }
    write_manifest(r, "eval", &started, &artifacts)?;
    Ok(ev.report)
}

/// Collects reports (run directories, `report.json` files or earlier
/// `report.csv` tables) into one table, optionally written as CSV.
pub fn cmd_report(inputs: &[PathBuf], csv_out: Option<&Path>) -> CmdResult<ReportTable> {
    if inputs.is_empty() {
        return Err(Failure::Usage(anyhow!("report needs at least one run directory or report file")));
    }
    let mut table = ReportTable::default();
    for input in inputs {
        let path = if input.is_dir() { input.join(REPORT_FILE) } else { input.clone() };
        if path.extension().is_some_and(|e| e == "csv") {
            let text = fs::read_to_string(&path)
                .with_context(|| format!("cannot read {}", path.display()))
                .usage()?;
            let t = ReportTable::from_csv(&text)
                .with_context(|| format!("cannot parse report table {}", path.display()))
                .usage()?;
            table.rows.extend(t.rows);
        } else {
            let report = EvalReport::load(&path)
                .map_err(|e| Failure::Usage(anyhow!(e).context(format!("cannot parse report {}", path.display()))))?;
            table.rows.push(ReportRow::from_report(&report));
        }
    }
    if let Some(out) = csv_out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).runtime()?;
        }
        relnet::write_atomic(out, table.to_csv().as_bytes())?;
    }
    Ok(table)
}
