//! Exact ELBO bookkeeping on a model small enough to enumerate every edge
//! assignment.

use relnet::model::{encode, kl_categorical_uniform, nll_gaussian, rollout_teacher, Batch, ModelConfig, ModelParams};
use relnet::tensor::{Tape, Tensor};

use super::{randn, rng, Check};

pub struct Enumerated {
    /// `log Σ_z p(z) p(x|z)` up to the dropped Gaussian normalizer.
    pub log_evidence: f64,
    /// `E_q[log p(x|z)] − KL(q ‖ p(z))` with the library's KL term.
    pub elbo: f64,
    /// `KL(q ‖ p(z|x))` from the enumerated posterior.
    pub kl_posterior: f64,
    /// Library KL against an independent enumeration of `KL(q ‖ p(z))`.
    pub kl_prior_error: f64,
}

fn config() -> ModelConfig {
    let mut c = ModelConfig::new(3, 4, 2, 5);
    c.hidden = 16;
    c.pred_steps = 2;
    c.sigma2 = 0.5;
    c
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Enumerates all `K^E` edge assignments of one simulation.
pub fn enumerate(seed: u64) -> Enumerated {
    let c = config();
    let (e, k) = (c.n_edges(), c.n_edge_types);
    let params = ModelParams::<f64>::init(c.clone(), seed).unwrap();
    let data: Tensor<f64> = randn(&[c.n_agents * c.input_frames * c.feature_dim], 0.5, &mut rng(seed + 100));
    let batch = Batch::new(1, c.n_agents, c.input_frames, c.feature_dim, data.into_data()).unwrap();

    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let logits = encode(&p, &batch.window(c.input_frames).unwrap(), 1).unwrap();
    let kl_lib = kl_categorical_uniform(logits, k).unwrap().item();
    let lv = logits.value();
    let log_q: Vec<Vec<f64>> = lv
        .data()
        .chunks_exact(k)
        .map(|row| {
            let lse = logsumexp(row);
            row.iter().map(|l| l - lse).collect()
        })
        .collect();

    let log_prior = -(e as f64) * (k as f64).ln();
    let (mut joint, mut log_qz) = (Vec::new(), Vec::new());
    for code in 0..k.pow(e as u32) {
        let mut z = vec![0.0; e * k];
        let mut lq = 0.0;
        let mut rest = code;
        for edge in 0..e {
            let label = rest % k;
            rest /= k;
            z[edge * k + label] = 1.0;
            lq += log_q[edge][label];
        }
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let zv = tape.constant(Tensor::new(vec![e, k], z).unwrap());
        let roll = rollout_teacher(&p, &batch, zv, c.input_frames, c.pred_steps).unwrap();
        let (pred, target) = roll.stacked().unwrap();
        let log_lik = -nll_gaussian(pred, target, c.sigma2).unwrap().item();
        joint.push(log_prior + log_lik);
        log_qz.push(lq);
    }
    let log_evidence = logsumexp(&joint);
    let mut expected_ll = 0.0;
    let mut kl_prior = 0.0;
    let mut kl_posterior = 0.0;
    for (lj, lq) in joint.iter().zip(&log_qz) {
        let q = lq.exp();
        expected_ll += q * (lj - log_prior);
        kl_prior += q * (lq - log_prior);
        kl_posterior += q * (lq - (lj - log_evidence));
    }
    Enumerated {
        log_evidence,
        elbo: expected_ll - kl_lib,
        kl_posterior,
        kl_prior_error: (kl_lib - kl_prior).abs(),
    }
}

pub fn suite() -> Vec<Check> {
    let mut checks = Vec::new();
    for seed in [1, 2] {
        let r = enumerate(seed);
        let gap = (r.elbo + r.kl_posterior - r.log_evidence).abs();
        checks.push(Check::below(format!("ELBO + KL(q‖posterior) = log p(x) (seed {seed})"), gap, 1e-6));
        checks.push(Check::new(
            format!("ELBO ≤ log p(x) (seed {seed})"),
            r.elbo <= r.log_evidence + 1e-9,
            format!("ELBO {:.6} vs log p(x) {:.6}", r.elbo, r.log_evidence),
        ));
        checks.push(Check::below(format!("KL(q‖uniform) vs enumeration (seed {seed})"), r.kl_prior_error, 1e-9));
    }
    checks
}
