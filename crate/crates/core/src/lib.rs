//! Interaction-network inference for coupled dynamical systems.
//!
//! * [`tensor`]: dense tensors with a reverse-mode gradient tape.
//! * [`dynamics`]: spring-coupled particles and Kuramoto oscillators,
//!   ground-truth graphs, feature construction, dataset files.
//! * [`model`]: message-passing encoder, Gumbel-softmax edge sampling,
//!   residual decoder and the negated-ELBO objective.
//! * [`train`]: Adam, batching, checkpoints and history.
//! * [`eval`]: edge accuracy, forecast MSE, baselines and the task catalog.

pub mod dynamics;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

use std::path::Path;

pub use error::{Error, Result};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
