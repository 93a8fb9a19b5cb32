//! Runs one catalog task at desk scale and prints per-epoch progress.
//!
//! `cargo run --release --example desk_task -- <task> <out-dir> [epochs] [seed]`

use std::path::PathBuf;

use relnet::eval::{run_task, task, RunOptions};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let id: u32 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| format!("runs/task-{id}")));
    let epochs: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(100);
    let seed: u64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let spec = task(id)?;
    let mut opts = RunOptions::new(&out, seed);
    opts.train.epochs = epochs;
    if spec.transfer_from.is_some() {
        opts.source_checkpoint = Some(out.with_file_name("task-1").join("best.nrim"));
    }
    opts.on_epoch = Some(Box::new(|r| {
        println!(
            "epoch {:3} loss {:.4e} recon {:.4e} kl {:.4} val_acc {:.2} ({:.1}s)",
            r.epoch, r.loss, r.recon, r.kl, r.val_acc, r.seconds
        )
    }));
    let run = run_task(&spec, &mut opts)?;
    let r = &run.evaluation.report;
    println!("task {id}: accuracy {:.3} ± {:.3}", r.accuracy, r.accuracy_std);
    for m in &r.mse {
        println!("  MSE@{}: model {:.4e} baseline {:.4e}", m.horizon, m.model, m.baseline);
    }
    Ok(())
}
