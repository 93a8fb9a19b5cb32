//! The relational variational model: message-passing encoder over the
//! complete directed graph, Gumbel-softmax edge samples, a residual
//! per-edge-type decoder and the negated ELBO.

pub mod checkpoint;
mod decoder;
mod encoder;
mod gumbel;
mod loss;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use decoder::{decode_step, rollout_free, rollout_teacher, Rollout};
pub use encoder::{encode, EdgePosterior};
pub use gumbel::{gumbel_noise, one_hot_argmax, sample_edges, sample_edges_tensor};
pub use loss::{elbo_loss, kl_categorical_uniform, nll_gaussian, ElboTerms};

use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub feature_dim: usize,
    /// Number of latent edge types `K`.
    pub n_edge_types: usize,
    pub hidden: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Decoder output variance.
    pub sigma2: f64,
    /// Teacher-forcing segment length during training.
    pub pred_steps: usize,
    /// Frames fed to the encoder; training reconstructs the same window.
    pub input_frames: usize,
}

impl ModelConfig {
    pub fn new(n_agents: usize, feature_dim: usize, n_edge_types: usize, input_frames: usize) -> Self {
        Self {
            n_agents,
            feature_dim,
            n_edge_types,
            hidden: 64,
            tau: 0.5,
            sigma2: 5e-5,
            pred_steps: 10,
            input_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("model config: {what}")));
        if self.n_agents < 2 {
            return bad("need at least two agents");
        }
        if self.feature_dim == 0 || self.hidden == 0 {
            return bad("feature_dim and hidden must be positive");
        }
        if self.n_edge_types < 2 {
            return bad("need at least two edge types");
        }
        if !(self.tau > 0.0) || !(self.sigma2 > 0.0) {
            return bad("tau and sigma2 must be positive");
        }
        if self.pred_steps == 0 {
            return bad("pred_steps must be at least 1");
        }
        if self.input_frames < 2 {
            return bad("input_frames must be at least 2");
        }
        Ok(())
    }

    /// Number of directed agent pairs.
    pub fn n_edges(&self) -> usize {
        self.n_agents * (self.n_agents - 1)
    }

    /// Short hex digest of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint_json(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Checks that a dataset has this model's agent count and feature width
    /// and at least `min_frames` frames.
    pub fn check_dataset(&self, d: &TrajectoryDataset, min_frames: usize) -> Result<()> {
        if d.n_agents() != self.n_agents || d.feature_dim() != self.feature_dim {
            return Err(Error::contract(format!(
                "dataset has {} agents with {} features per frame, but the model expects {} agents with {}",
                d.n_agents(),
                d.feature_dim(),
                self.n_agents,
                self.feature_dim
            )));
        }
        if d.frames() < min_frames {
            return Err(Error::contract(format!(
                "dataset has {} frames, need at least {min_frames}",
                d.frames()
            )));
        }
        Ok(())
    }
}

/// SHA-256 over the compact JSON serialization (object keys sorted), first
/// 16 hex digits.
pub fn fingerprint_json(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(serde_json::to_vec(v).expect("json serializes"));
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Directed edge list of the complete graph without self-loops: for each
/// sender `i`, receivers `j ≠ i` in increasing order.
pub fn edge_list(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Row indices mapping `copies` stacked graphs of `n` nodes onto their
/// directed edges.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub copies: usize,
    pub n: usize,
    pub send: Rc<[usize]>,
    pub recv: Rc<[usize]>,
}

impl EdgeIndex {
    pub fn new(n: usize, copies: usize) -> Self {
        let edges = edge_list(n);
        let mut send = Vec::with_capacity(copies * edges.len());
        let mut recv = Vec::with_capacity(copies * edges.len());
        for c in 0..copies {
            for &(i, j) in &edges {
                send.push(c * n + i);
                recv.push(c * n + j);
            }
        }
        Self {
            copies,
            n,
            send: send.into(),
            recv: recv.into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.copies * self.n
    }
}

/// A group of simulations laid out `sims × n × frames × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F: Real = f32> {
    pub sims: usize,
    pub n: usize,
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<F>,
}

impl<F: Real> Batch<F> {
    pub fn new(sims: usize, n: usize, frames: usize, dim: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != sims * n * frames * dim {
            return Err(Error::Dimension(format!(
                "batch of {} values for {sims}×{n}×{frames}×{dim}",
                data.len()
            )));
        }
        Ok(Self {
            sims,
            n,
            frames,
            dim,
            data,
        })
    }

    pub fn from_dataset(d: &TrajectoryDataset, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * d.sim(0).len());
        for &s in indices {
            data.extend(d.sim(s).iter().map(|&v| F::lit(v as f64)));
        }
        Self {
            sims: indices.len(),
            n: d.n_agents(),
            frames: d.frames(),
            dim: d.feature_dim(),
            data,
        }
    }

    pub fn frame(&self, sim: usize, agent: usize, t: usize) -> &[F] {
        let o = ((sim * self.n + agent) * self.frames + t) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// `[sims·n, frames·dim]` matrix of the first `frames` frames per agent.
    pub fn window(&self, frames: usize) -> Result<Tensor<F>> {
        if frames > self.frames {
            return Err(Error::contract(format!(
                "window of {frames} frames from a batch of {}",
                self.frames
            )));
        }
        let mut data = Vec::with_capacity(self.sims * self.n * frames * self.dim);
        for s in 0..self.sims {
            for i in 0..self.n {
                let o = (s * self.n + i) * self.frames * self.dim;
                data.extend_from_slice(&self.data[o..o + frames * self.dim]);
            }
        }
        Tensor::new(vec![self.sims * self.n, frames * self.dim], data)
    }

    /// `[sims·n, dim]` matrix of frame `t`.
    pub fn frame_rows(&self, t: usize) -> Tensor<F> {
        let mut data = Vec::with_capacity(self.sims * self.n * self.dim);
        for s in 0..self.sims {
            for i in 0..self.n {
                data.extend_from_slice(self.frame(s, i, t));
            }
        }
        Tensor::new(vec![self.sims * self.n, self.dim], data).expect("consistent batch")
    }

    /// Rows of several frames stacked frame-major: `[len(ts)·sims·n, dim]`.
    pub fn frames_rows(&self, ts: &[usize]) -> Tensor<F> {
        let mut data = Vec::with_capacity(ts.len() * self.sims * self.n * self.dim);
        for &t in ts {
            data.extend(self.frame_rows(t).into_data());
        }
        Tensor::new(vec![ts.len() * self.sims * self.n, self.dim], data).expect("consistent batch")
    }

    /// Applies an agent permutation: new agent `k` is old agent `perm[k]`.
    pub fn permute_agents(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        let block = self.frames * self.dim;
        for s in 0..self.sims {
            for &p in perm {
                let o = (s * self.n + p) * block;
                data.extend_from_slice(&self.data[o..o + block]);
            }
        }
        Self { data, ..*self }
    }
}

/// Weights and biases, keyed by name, plus the configuration that fixes
/// their shapes. Weights are `[in, out]`, biases `[1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<F>>,
}

fn mlp_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, dims: &[usize]) {
    for (l, w) in dims.windows(2).enumerate() {
        out.push((format!("{prefix}.w{}", l + 1), vec![w[0], w[1]]));
        out.push((format!("{prefix}.b{}", l + 1), vec![1, w[1]]));
    }
}

/// Every parameter name with its shape.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, d, t) = (c.hidden, c.feature_dim, c.input_frames);
    let mut v = Vec::new();
    mlp_shapes(&mut v, "enc.mlp1", &[t * d, h, h]);
    mlp_shapes(&mut v, "enc.mlp2", &[2 * h, h, h]);
    mlp_shapes(&mut v, "enc.mlp3", &[h + t * d, h, h]);
    mlp_shapes(&mut v, "enc.mlp4", &[2 * h, h, h]);
    mlp_shapes(&mut v, "enc.out", &[h, c.n_edge_types]);
    for k in 0..c.n_edge_types {
        mlp_shapes(&mut v, &format!("dec.edge{k}"), &[2 * d, h, h]);
    }
    mlp_shapes(&mut v, "dec.node", &[h + d, h, h, d]);
    v
}

impl<F: Real> ModelParams<F> {
    /// Xavier-normal weights, biases 0.1, drawn from the `Init` stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init, &[]);
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let is_bias = name.rsplit('.').next().is_some_and(|l| l.starts_with('b'));
            let t = if is_bias {
                Tensor::full(shape, F::lit(0.1))
            } else {
                let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..shape[0] * shape[1])
                    .map(|_| F::lit(normal.sample(&mut rng)))
                    .collect();
                Tensor::new(shape, data)?
            };
            tensors.insert(name, t);
        }
        Ok(Self { config, tensors })
    }

    /// Checks names and shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = param_shapes(&self.config);
        if expected.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "{} parameter tensors, expected {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::contract(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::contract(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self.tensors[name]
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every tensor on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Bound<'t, F> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound {
            config: self.config.clone(),
            tape,
            vars,
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t, F: Real = f32> {
    pub config: ModelConfig,
    pub tape: &'t Tape<F>,
    pub vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Real> Bound<'t, F> {
    pub fn var(&self, name: &str) -> Var<'t, F> {
        self.vars[name]
    }

    /// `x·W + b`.
    pub(crate) fn linear(&self, x: Var<'t, F>, prefix: &str, layer: usize) -> Result<Var<'t, F>> {
        x.linear(
            self.var(&format!("{prefix}.w{layer}")),
            self.var(&format!("{prefix}.b{layer}")),
        )
    }

    /// ELU after every layer but the last when `activate_last` is false.
    pub(crate) fn mlp(
        &self,
        x: Var<'t, F>,
        prefix: &str,
        layers: usize,
        activate_last: bool,
    ) -> Result<Var<'t, F>> {
        let mut h = x;
        for l in 1..=layers {
            h = self.linear(h, prefix, l)?;
            if l < layers || activate_last {
                h = h.elu();
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_list_order() {
        assert_eq!(edge_list(3), vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
        let idx = EdgeIndex::new(3, 2);
        assert_eq!(idx.send.len(), 12);
        assert_eq!(idx.send[6], 3);
        assert_eq!(idx.recv[11], 4);
    }

    #[test]
    fn init_is_deterministic_and_well_shaped() {
        let c = ModelConfig::new(5, 4, 2, 49);
        let a = ModelParams::<f32>::init(c.clone(), 3).unwrap();
        let b = ModelParams::<f32>::init(c.clone(), 3).unwrap();
        let other = ModelParams::<f32>::init(c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        a.validate().unwrap();
        assert!(a.get("dec.node.b3").data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = ModelConfig::new(5, 4, 2, 49);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.tau = 0.25;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn batch_windows() {
        let data: Vec<f32> = (0..2 * 3 * 4 * 2).map(|v| v as f32).collect();
        let b = Batch::new(2, 3, 4, 2, data).unwrap();
        let w = b.window(2).unwrap();
        assert_eq!(w.shape(), &[6, 4]);
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&w.data()[4..8], &[8.0, 9.0, 10.0, 11.0]);
        let f = b.frame_rows(3);
        assert_eq!(f.shape(), &[6, 2]);
        assert_eq!(&f.data()[..2], &[6.0, 7.0]);
        let p = b.permute_agents(&[2, 0, 1]);
        assert_eq!(p.frame(0, 1, 0), b.frame(0, 0, 0));
        assert_eq!(p.frame(1, 0, 3), b.frame(1, 2, 3));
    }
}
