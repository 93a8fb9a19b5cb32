use crate::dynamics::{InteractionGraph, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::model::{encode, rollout_free, sample_edges, Batch, EdgePosterior, ModelParams};
use crate::rng::{stream, Purpose};
use crate::tensor::{Real, Tape, Tensor};

/// All permutations of `0..k`, lexicographic.
pub fn permutations(k: usize) -> Vec<Vec<u8>> {
    fn rec(prefix: &mut Vec<u8>, left: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let v = left.remove(i);
            prefix.push(v);
            rec(prefix, left, out);
            prefix.pop();
            left.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..k as u8).collect(), &mut out);
    out
}

fn label_count(predicted: &[Vec<u8>], truth: &[Vec<u8>], k: usize) -> usize {
    predicted
        .iter()
        .chain(truth)
        .flatten()
        .map(|&v| v as usize + 1)
        .max()
        .unwrap_or(0)
        .max(k)
}

/// Percentage of pairs whose relabelled prediction `perm[p]` equals the
/// truth.
pub fn accuracy_with(perm: &[u8], predicted: &[Vec<u8>], truth: &[Vec<u8>]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            total += 1;
            if perm.get(a as usize).copied() == Some(b) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return 100.0;
    }
    100.0 * hits as f64 / total as f64
}

/// The relabelling of predicted types that maximizes accuracy over all
/// graphs together, with that accuracy. Ties keep the first permutation in
/// lexicographic order.
pub fn best_permutation(predicted: &[Vec<u8>], truth: &[Vec<u8>], k: usize) -> Result<(Vec<u8>, f64)> {
    if predicted.len() != truth.len() || predicted.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::contract("predicted and true labels differ in size"));
    }
    let k = label_count(predicted, truth, k);
    if k > 8 {
        return Err(Error::contract(format!("{k} link types are too many to permute")));
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for perm in permutations(k) {
        let acc = accuracy_with(&perm, predicted, truth);
        if acc > best.1 {
            best = (perm, acc);
        }
    }
    Ok(best)
}

/// Permutation-matched accuracy (percent) of predicted unordered-pair labels
/// (`i < j`, row by row) against one ground-truth graph.
pub fn edge_accuracy(predicted: &[u8], truth: &InteractionGraph) -> Result<f64> {
    let labels = truth.pair_labels();
    if predicted.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predicted pair labels for a graph of {} agents ({} pairs)",
            predicted.len(),
            truth.n(),
            labels.len()
        )));
    }
    Ok(best_permutation(&[predicted.to_vec()], &[labels], truth.n_types())?.1)
}

/// Encoder posteriors for the simulations `indices`, in chunks of `chunk`.
pub fn infer_edges(params: &ModelParams<f32>, data: &TrajectoryDataset, indices: &[usize], chunk: usize) -> Result<EdgePosterior<f32>> {
    let c = &params.config;
    c.check_dataset(data, c.input_frames)?;
    let k = c.n_edge_types;
    let mut logits = Vec::with_capacity(indices.len() * c.n_edges() * k);
    for part in indices.chunks(chunk.max(1)) {
        let batch = Batch::<f32>::from_dataset(data, part);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let l = encode(&p, &batch.window(c.input_frames)?, part.len())?;
        l.with_value(|v| logits.extend_from_slice(v.data()));
    }
    let rows = indices.len() * c.n_edges();
    EdgePosterior::new(indices.len(), c.n_agents, Tensor::new(vec![rows, k], logits)?)
}

/// Predicted unordered-pair labels per simulation.
pub fn predicted_pairs<F: Real>(post: &EdgePosterior<F>) -> Vec<Vec<u8>> {
    (0..post.sims).map(|s| post.pair_labels(s)).collect()
}

/// Squared-error sums of a forecast, accumulated per step.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastErrors {
    /// `step_sums[t]` is the summed squared error of step `t + 1` over all
    /// simulations, agents and channels.
    pub step_sums: Vec<f64>,
    /// Values contributing to each step.
    pub per_step: usize,
}

impl ForecastErrors {
    pub fn new(steps: usize) -> Self {
        Self {
            step_sums: vec![0.0; steps],
            per_step: 0,
        }
    }

    /// Mean squared error over steps `1..=horizon`.
    pub fn mse(&self, horizon: usize) -> Result<f64> {
        if horizon == 0 || horizon > self.step_sums.len() {
            return Err(Error::contract(format!(
                "horizon {horizon} outside 1..={}",
                self.step_sums.len()
            )));
        }
        let s: f64 = self.step_sums[..horizon].iter().sum();
        Ok(s / (horizon * self.per_step.max(1)) as f64)
    }

    pub fn merge(&mut self, other: &ForecastErrors) {
        for (a, b) in self.step_sums.iter_mut().zip(&other.step_sums) {
            *a += b;
        }
        self.per_step += other.per_step;
    }

    /// Adds one step's worth of predictions and targets.
    pub fn add_step<F: Real>(&mut self, step: usize, pred: &[F], target: &[F]) {
        self.step_sums[step] += pred
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let d = p.as_f64() - t.as_f64();
                d * d
            })
            .sum::<f64>();
    }
}

/// Free-running forecasts of `steps` frames after frame `start` (inclusive
/// anchor), driven by hard edge samples.
pub struct Forecast {
    pub errors: ForecastErrors,
    /// Per simulation, `[steps × n × D]` predicted frames.
    pub trajectories: Vec<Vec<f32>>,
}

/// Hard-sampled edges from the encoder, then a free-running rollout. Chunk
/// `c` draws its Gumbel noise from stream `(seed, c)`.
pub fn forecast(
    params: &ModelParams<f32>,
    data: &TrajectoryDataset,
    indices: &[usize],
    steps: usize,
    seed: u64,
    chunk: usize,
    keep_trajectories: bool,
) -> Result<Forecast> {
    let c = &params.config;
    let start = c.input_frames - 1;
    c.check_dataset(data, start + steps + 1)?;
    let mut errors = ForecastErrors::new(steps);
    let mut trajectories = Vec::new();
    for (ci, part) in indices.chunks(chunk.max(1)).enumerate() {
        let batch = Batch::<f32>::from_dataset(data, part);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let logits = encode(&p, &batch.window(c.input_frames)?, part.len())?;
        let mut rng = stream(seed, Purpose::Eval, &[ci as u64]);
        let z = sample_edges(logits, c.tau, &mut rng, true)?;
        let roll = rollout_free(&p, &batch, z, start, steps)?;
        let mut part_err = ForecastErrors::new(steps);
        part_err.per_step = part.len() * c.n_agents * c.feature_dim;
        let mut sims = vec![Vec::new(); if keep_trajectories { part.len() } else { 0 }];
        for (t, (pred, target)) in roll.preds.iter().zip(&roll.targets).enumerate() {
            pred.with_value(|v| {
                part_err.add_step(t, v.data(), target.data());
                let per_sim = c.n_agents * c.feature_dim;
                for (s, out) in sims.iter_mut().enumerate() {
                    out.extend_from_slice(&v.data()[s * per_sim..(s + 1) * per_sim]);
                }
            });
        }
        errors.merge(&part_err);
        trajectories.extend(sims);
    }
    Ok(Forecast {
        errors,
        trajectories,
    })
}

/// Squared errors of predicting frame `start` for every one of the next
/// `steps` frames.
pub fn baseline_static(data: &TrajectoryDataset, indices: &[usize], start: usize, steps: usize) -> Result<ForecastErrors> {
    if start + steps >= data.frames() {
        return Err(Error::contract(format!(
            "baseline of {steps} steps after frame {start} needs {} frames, trajectory has {}",
            start + steps + 1,
            data.frames()
        )));
    }
    let mut e = ForecastErrors::new(steps);
    e.per_step = indices.len() * data.n_agents() * data.feature_dim();
    for &s in indices {
        for i in 0..data.n_agents() {
            let last = data.frame(s, i, start);
            for k in 1..=steps {
                e.add_step(k - 1, last, data.frame(s, i, start + k));
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_of_three() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
        assert_eq!(p[5], vec![2, 1, 0]);
    }

    #[test]
    fn accuracy_cases() {
        let g = InteractionGraph::new(3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0], vec![0.0, 1.0]).unwrap();
        assert_eq!(edge_accuracy(&g.pair_labels(), &g).unwrap(), 100.0);
        let flipped: Vec<u8> = g.pair_labels().iter().map(|v| 1 - v).collect();
        assert_eq!(edge_accuracy(&flipped, &g).unwrap(), 100.0);
        assert!(edge_accuracy(&[0, 1], &g).is_err());
    }

    #[test]
    fn static_baseline_of_frozen_system_is_zero() {
        use crate::dynamics::{DatasetMeta, SystemSpec, Boundary};
        let spec = SystemSpec::springs(2, vec![1.0, 0.0], vec![0.0, 1.0], 6, Boundary::Unbounded);
        let d = TrajectoryDataset {
            meta: DatasetMeta {
                feature_dim: 4,
                sims: 1,
                seed: 0,
                spec,
            },
            graphs: vec![InteractionGraph::uniform(2, 0, vec![0.0, 1.0]).unwrap()],
            features: [0.3f32, -0.2, 0.0, 0.0].repeat(12),
        };
        let e = baseline_static(&d, &[0], 2, 3).unwrap();
        assert_eq!(e.mse(3).unwrap(), 0.0);
        assert!(baseline_static(&d, &[0], 2, 4).is_err());
    }
}
