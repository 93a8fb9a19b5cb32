//! Statistical checks of the Gumbel-softmax sampler.

use relnet::model::{one_hot_argmax, sample_edges_tensor};
use relnet::rng::{stream, Purpose};
use relnet::tensor::Tensor;

use super::Check;

pub const SAMPLES: usize = 100_000;

fn repeated(logits: &[f64], rows: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows).flat_map(|_| logits.iter().copied()).collect();
    Tensor::new(vec![rows, logits.len()], data).unwrap()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Worst deviation of argmax frequencies from `softmax(logits)`, in units of
/// the binomial standard deviation.
pub fn argmax_frequency_z(logits: &[f64], seed: u64) -> f64 {
    let k = logits.len();
    let y = sample_edges_tensor(&repeated(logits, SAMPLES), 1.0, &mut stream(seed, Purpose::Gumbel, &[0]), false).unwrap();
    let hard = one_hot_argmax(&y);
    let mut counts = vec![0usize; k];
    for row in hard.data().chunks_exact(k) {
        counts[row.iter().position(|&v| v == 1.0).unwrap()] += 1;
    }
    let p = softmax(logits);
    let n = SAMPLES as f64;
    counts
        .iter()
        .zip(&p)
        .map(|(&c, &p)| (c as f64 / n - p).abs() / (p * (1.0 - p) / n).sqrt())
        .fold(0.0, f64::max)
}

/// Largest entry of each relaxed sample at temperature `tau`.
pub fn max_entries(logits: &[f64], tau: f64, seed: u64) -> Vec<f64> {
    let k = logits.len();
    let y = sample_edges_tensor(&repeated(logits, SAMPLES), tau, &mut stream(seed, Purpose::Gumbel, &[1]), false).unwrap();
    y.data().chunks_exact(k).map(|r| r.iter().cloned().fold(0.0, f64::max)).collect()
}

pub fn suite() -> Vec<Check> {
    let mut checks = Vec::new();
    for (i, logits) in [vec![0.0, 0.0], vec![1.5, -0.5, 0.2], vec![2.0, 0.0, -1.0, 0.5]].iter().enumerate() {
        let z = argmax_frequency_z(logits, 10 + i as u64);
        checks.push(Check::new(
            format!("argmax frequencies match softmax({logits:?})"),
            z <= 3.0,
            format!("max |z| = {z:.2} ≤ 3 over {SAMPLES} samples"),
        ));
    }
    let mut maxes = max_entries(&[0.5, -0.3, 0.1], 0.01, 20);
    maxes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = maxes[SAMPLES / 2];
    let sharp = maxes.iter().filter(|&&m| m > 0.999).count() as f64 / SAMPLES as f64;
    checks.push(Check::new(
        "τ=0.01 samples are near one-hot",
        median > 0.999,
        format!("median max entry {median:.6} > 0.999; {:.2}% of samples exceed 0.999", 100.0 * sharp),
    ));
    checks
}
