//! Ground-truth systems: interaction graphs, the two simulators, feature
//! construction and dataset generation.

pub mod dopri5;
pub mod graph;
pub mod io;
pub mod kuramoto;
pub mod springs;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use graph::{sample_er_graph, InteractionGraph};
pub use kuramoto::{
    estimate_omega, init_kuramoto, kuramoto_rhs, simulate_kuramoto, KuramotoSeries,
    KuramotoSettings, KuramotoState,
};
pub use springs::{
    init_springs, simulate_springs, spring_forces, Boundary, SpringSettings, SpringSystemState,
};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// `n × frames × dim` array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub n: usize,
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl Series {
    pub fn zeros(n: usize, frames: usize, dim: usize) -> Self {
        Self {
            n,
            frames,
            dim,
            values: vec![0.0; n * frames * dim],
        }
    }

    fn offset(&self, agent: usize, frame: usize) -> usize {
        (agent * self.frames + frame) * self.dim
    }

    pub fn get(&self, agent: usize, frame: usize) -> &[f64] {
        let o = self.offset(agent, frame);
        &self.values[o..o + self.dim]
    }

    pub fn set(&mut self, agent: usize, frame: usize, v: &[f64]) {
        let o = self.offset(agent, frame);
        self.values[o..o + self.dim].copy_from_slice(v);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Springs,
    Kuramoto,
}

impl SystemKind {
    pub fn feature_dim(self) -> usize {
        match self {
            SystemKind::Springs => 4,
            SystemKind::Kuramoto => 3,
        }
    }

    pub fn channel_names(self, mode: FrequencyMode) -> &'static [&'static str] {
        match (self, mode) {
            (SystemKind::Springs, _) => &["x", "y", "vx", "vy"],
            (SystemKind::Kuramoto, FrequencyMode::Actual) => &["dtheta", "sin_theta", "omega"],
            (SystemKind::Kuramoto, FrequencyMode::Estimated) => {
                &["dtheta", "sin_theta", "omega_e"]
            }
        }
    }
}

/// Third Kuramoto channel: the true intrinsic frequency, or its estimate
/// from the phase-velocity series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    #[default]
    Actual,
    Estimated,
}

impl FromStr for FrequencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actual" => Ok(Self::Actual),
            "estimated" => Ok(Self::Estimated),
            other => Err(Error::contract(format!(
                "unknown frequency mode {other:?} (expected \"actual\" or \"estimated\")"
            ))),
        }
    }
}

impl fmt::Display for FrequencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Actual => "actual",
            Self::Estimated => "estimated",
        })
    }
}

/// Everything needed to generate one family of simulations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system: SystemKind,
    pub n_agents: usize,
    /// Probability of each link type for an unordered pair.
    pub type_probs: Vec<f64>,
    /// Coupling per link type (spring constant, or `A_ij`).
    pub type_values: Vec<f64>,
    pub frames: usize,
    /// Leapfrog step (springs) or dense-output grid spacing (Kuramoto).
    pub dt: f64,
    pub downsample: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub frequency_mode: FrequencyMode,
}

impl SystemSpec {
    pub fn springs(
        n_agents: usize,
        type_probs: Vec<f64>,
        type_values: Vec<f64>,
        frames: usize,
        boundary: Boundary,
    ) -> Self {
        Self {
            system: SystemKind::Springs,
            n_agents,
            type_probs,
            type_values,
            frames,
            dt: springs::DEFAULT_DT,
            downsample: springs::DEFAULT_DOWNSAMPLE,
            boundary,
            frequency_mode: FrequencyMode::Actual,
        }
    }

    pub fn kuramoto(n_agents: usize, frames: usize, frequency_mode: FrequencyMode) -> Self {
        Self {
            system: SystemKind::Kuramoto,
            n_agents,
            type_probs: vec![0.5, 0.5],
            type_values: vec![0.0, 1.0],
            frames,
            dt: kuramoto::DEFAULT_GRID_DT,
            downsample: kuramoto::DEFAULT_DOWNSAMPLE,
            boundary: Boundary::Unbounded,
            frequency_mode,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.system.feature_dim()
    }

    pub fn n_types(&self) -> usize {
        self.type_values.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::contract("need at least two agents"));
        }
        if self.frames < 2 {
            return Err(Error::contract("need at least two frames"));
        }
        if !(self.dt > 0.0) || self.downsample == 0 {
            return Err(Error::contract(format!(
                "invalid integrator settings dt={} downsample={}",
                self.dt, self.downsample
            )));
        }
        if self.type_probs.len() != self.type_values.len() || self.type_values.len() < 2 {
            return Err(Error::contract(
                "need at least two link types with one probability each",
            ));
        }
        graph::check_type_probs(&self.type_probs)?;
        self.boundary.validate()?;
        if self.system == SystemKind::Kuramoto && self.boundary != Boundary::Unbounded {
            return Err(Error::contract("oscillators have no spatial boundary"));
        }
        Ok(())
    }

    /// Simulates one system from its own random stream.
    pub fn simulate_one(&self, rng: &mut crate::rng::Rng) -> Result<(InteractionGraph, Series)> {
        let graph = sample_er_graph(self.n_agents, &self.type_probs, &self.type_values, rng)?;
        let series = match self.system {
            SystemKind::Springs => {
                let init = init_springs(self.n_agents, self.boundary, rng)?;
                let settings = SpringSettings {
                    dt: self.dt,
                    downsample: self.downsample,
                    frames: self.frames,
                };
                let raw = simulate_springs(&graph, &init, &settings)?;
                build_features(RawSeries::Springs(&raw), self.frequency_mode)?
            }
            SystemKind::Kuramoto => {
                let init = init_kuramoto(self.n_agents, rng)?;
                let settings = KuramotoSettings {
                    grid_dt: self.dt,
                    downsample: self.downsample,
                    ..KuramotoSettings::new(self.frames)
                };
                let raw = simulate_kuramoto(&graph, &init, &settings)?;
                build_features(
                    RawSeries::Kuramoto {
                        series: &raw,
                        omegas: &init.omegas,
                    },
                    self.frequency_mode,
                )?
            }
        };
        Ok((graph, series))
    }
}

/// Integrator output awaiting conversion to model features.
pub enum RawSeries<'a> {
    /// Already `(x, y, ẋ, ẏ)`.
    Springs(&'a Series),
    Kuramoto {
        series: &'a KuramotoSeries,
        omegas: &'a [f64],
    },
}

/// Springs: `(x, y, ẋ, ẏ)`. Kuramoto: `(dθ/dt, sin θ, f)` with `f` the true
/// `ω` or the estimate `ω_e`, held constant over time.
pub fn build_features(raw: RawSeries<'_>, mode: FrequencyMode) -> Result<Series> {
    match raw {
        RawSeries::Springs(s) => {
            if s.dim != 4 {
                return Err(Error::contract(format!(
                    "spring series has {} channels, expected 4",
                    s.dim
                )));
            }
            Ok(s.clone())
        }
        RawSeries::Kuramoto { series, omegas } => {
            let frames = series.theta.len();
            let n = omegas.len();
            if frames == 0 || series.theta.iter().any(|r| r.len() != n) {
                return Err(Error::contract("incomplete Kuramoto series"));
            }
            let mut out = Series::zeros(n, frames, 3);
            for i in 0..n {
                let freq = match mode {
                    FrequencyMode::Actual => omegas[i],
                    FrequencyMode::Estimated => estimate_omega(&series.dtheta_of(i))?,
                };
                for t in 0..frames {
                    out.set(i, t, &[series.dtheta[t][i], series.theta[t][i].sin(), freq]);
                }
            }
            Ok(out)
        }
    }
}

/// Provenance and layout of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(flatten)]
    pub spec: SystemSpec,
    pub feature_dim: usize,
    pub sims: usize,
    pub seed: u64,
}

/// `sims × n_agents × frames × feature_dim` features plus one graph per
/// simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    pub graphs: Vec<InteractionGraph>,
    pub features: Vec<f32>,
}

impl TrajectoryDataset {
    pub fn sims(&self) -> usize {
        self.meta.sims
    }

    pub fn n_agents(&self) -> usize {
        self.meta.spec.n_agents
    }

    pub fn frames(&self) -> usize {
        self.meta.spec.frames
    }

    pub fn feature_dim(&self) -> usize {
        self.meta.feature_dim
    }

    fn sim_len(&self) -> usize {
        self.n_agents() * self.frames() * self.feature_dim()
    }

    /// `n_agents × frames × feature_dim` block of one simulation.
    pub fn sim(&self, s: usize) -> &[f32] {
        let len = self.sim_len();
        &self.features[s * len..(s + 1) * len]
    }

    pub fn frame(&self, s: usize, agent: usize, t: usize) -> &[f32] {
        let d = self.feature_dim();
        let o = (agent * self.frames() + t) * d;
        &self.sim(s)[o..o + d]
    }

    pub fn check_consistent(&self) -> Result<()> {
        let m = &self.meta;
        if m.feature_dim != m.spec.feature_dim() {
            return Err(Error::contract(format!(
                "feature_dim {} does not match {:?}",
                m.feature_dim, m.spec.system
            )));
        }
        if self.graphs.len() != m.sims {
            return Err(Error::contract(format!(
                "{} graphs for {} simulations",
                self.graphs.len(),
                m.sims
            )));
        }
        if self.features.len() != m.sims * self.sim_len() {
            return Err(Error::contract(format!(
                "{} feature values, expected {}",
                self.features.len(),
                m.sims * self.sim_len()
            )));
        }
        if let Some(g) = self.graphs.iter().find(|g| g.n() != m.spec.n_agents) {
            return Err(Error::contract(format!(
                "graph over {} agents in a dataset of {}",
                g.n(),
                m.spec.n_agents
            )));
        }
        Ok(())
    }

    /// The simulations with indices in `range`, as a dataset of its own.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let len = self.sim_len();
        let mut meta = self.meta.clone();
        meta.sims = range.len();
        Self {
            meta,
            graphs: self.graphs[range.clone()].to_vec(),
            features: self.features[range.start * len..range.end * len].to_vec(),
        }
    }

    /// Simulations picked by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut meta = self.meta.clone();
        meta.sims = indices.len();
        let mut features = Vec::with_capacity(indices.len() * self.sim_len());
        for &i in indices {
            features.extend_from_slice(self.sim(i));
        }
        Self {
            meta,
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            features,
        }
    }
}

/// Generates `sims` independent simulations. Simulation `k` draws only from
/// the stream `(seed, k)`, so the result does not depend on scheduling.
pub fn generate_dataset(spec: &SystemSpec, sims: usize, seed: u64) -> Result<TrajectoryDataset> {
    spec.validate()?;
    let results: Vec<Result<(InteractionGraph, Series)>> = (0..sims)
        .into_par_iter()
        .map(|k| spec.simulate_one(&mut stream(seed, Purpose::Simulation, &[k as u64])))
        .collect();
    let mut graphs = Vec::with_capacity(sims);
    let mut features =
        Vec::with_capacity(sims * spec.n_agents * spec.frames * spec.feature_dim());
    for r in results {
        let (g, s) = r?;
        graphs.push(g);
        features.extend(s.values.iter().map(|&v| v as f32));
    }
    Ok(TrajectoryDataset {
        meta: DatasetMeta {
            spec: spec.clone(),
            feature_dim: spec.feature_dim(),
            sims,
            seed,
        },
        graphs,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_dims() {
        assert_eq!(SystemKind::Springs.feature_dim(), 4);
        assert_eq!(SystemKind::Kuramoto.feature_dim(), 3);
        let d = generate_dataset(
            &SystemSpec::kuramoto(3, 5, FrequencyMode::Actual),
            2,
            1,
        )
        .unwrap();
        assert_eq!(d.features.len(), 2 * 3 * 5 * 3);
        d.check_consistent().unwrap();
    }

    #[test]
    fn unknown_frequency_mode() {
        assert!(matches!(
            "fourier".parse::<FrequencyMode>(),
            Err(Error::Contract(_))
        ));
        assert_eq!("estimated".parse::<FrequencyMode>().unwrap(), FrequencyMode::Estimated);
    }

    fn uncoupled(mode: FrequencyMode) -> Series {
        let g = InteractionGraph::new(2, vec![0; 4], vec![0.0, 1.0]).unwrap();
        let init = KuramotoState {
            phases: vec![0.1, 2.0],
            omegas: vec![1.5, 7.25],
        };
        let raw = simulate_kuramoto(&g, &init, &KuramotoSettings::new(40)).unwrap();
        build_features(
            RawSeries::Kuramoto {
                series: &raw,
                omegas: &init.omegas,
            },
            mode,
        )
        .unwrap()
    }

    #[test]
    fn actual_frequency_channel_is_constant() {
        let s = uncoupled(FrequencyMode::Actual);
        for t in 0..40 {
            assert_eq!(s.get(0, t)[2], 1.5);
            assert_eq!(s.get(1, t)[2], 7.25);
        }
    }

    #[test]
    fn estimated_matches_actual_when_uncoupled() {
        let a = uncoupled(FrequencyMode::Actual);
        let e = uncoupled(FrequencyMode::Estimated);
        for (x, y) in a.values.iter().zip(&e.values) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = SystemSpec::springs(4, vec![0.5, 0.5], vec![0.0, 1.0], 6, Boundary::Unbounded);
        let a = generate_dataset(&spec, 5, 42).unwrap();
        let b = generate_dataset(&spec, 5, 42).unwrap();
        let c = generate_dataset(&spec, 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features, c.features);
        // simulation k is independent of how many others are generated
        let d = generate_dataset(&spec, 3, 42).unwrap();
        assert_eq!(d.sim(2), a.sim(2));
    }

    #[test]
    fn select_and_slice() {
        let spec = SystemSpec::springs(3, vec![0.5, 0.5], vec![0.0, 1.0], 4, Boundary::Unbounded);
        let d = generate_dataset(&spec, 6, 7).unwrap();
        let s = d.slice(2..4);
        assert_eq!(s.sims(), 2);
        assert_eq!(s.sim(1), d.sim(3));
        let p = d.select(&[5, 0]);
        assert_eq!(p.sim(0), d.sim(5));
        assert_eq!(p.graphs[1], d.graphs[0]);
        p.check_consistent().unwrap();
    }
}
