use rand::Rng;

use super::{encode, rollout_teacher, sample_edges, Batch, Bound};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// `Σ (pred − target)² / (2σ²)`; the constant normalizer is dropped.
pub fn nll_gaussian<'t, F: Real>(pred: Var<'t, F>, target: Var<'t, F>, sigma2: f64) -> Result<Var<'t, F>> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target)?.square().sum().scale(0.5 / sigma2))
}

/// `KL(q ‖ uniform) = Σ_edges Σ_k q (log q + log K)` from logits `[E, K]`.
pub fn kl_categorical_uniform<'t, F: Real>(logits: Var<'t, F>, k: usize) -> Result<Var<'t, F>> {
    let q = logits.softmax(1)?;
    let log_q = logits.log_softmax(1)?.offset((k as f64).ln());
    Ok(q.mul(log_q)?.sum())
}

pub struct ElboTerms<'t, F: Real = f32> {
    /// Negated ELBO per simulation, averaged over the batch.
    pub loss: Var<'t, F>,
    pub nll: Var<'t, F>,
    pub kl: Var<'t, F>,
    pub logits: Var<'t, F>,
}

/// Single-sample estimate of the negated ELBO: encode the input window,
/// draw a relaxed edge sample, reconstruct the window with teacher forcing.
/// Both terms are summed per simulation and averaged over the batch.
pub fn elbo_loss<'t, F: Real, R: Rng + ?Sized>(
    p: &Bound<'t, F>,
    batch: &Batch<F>,
    rng: &mut R,
) -> Result<ElboTerms<'t, F>> {
    let c = &p.config;
    let logits = encode(p, &batch.window(c.input_frames)?, batch.sims)?;
    let z = sample_edges(logits, c.tau, rng, false)?;
    let roll = rollout_teacher(p, batch, z, c.input_frames, c.pred_steps)?;
    let (pred, target) = roll.stacked()?;
    let per_sim = 1.0 / batch.sims as f64;
    let nll = nll_gaussian(pred, target, c.sigma2)?.scale(per_sim);
    let kl = kl_categorical_uniform(logits, c.n_edge_types)?.scale(per_sim);
    Ok(ElboTerms {
        loss: nll.add(kl)?,
        nll,
        kl,
        logits,
    })
}
