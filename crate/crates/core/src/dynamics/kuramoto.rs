//! Phase oscillators with pairwise sine coupling:
//!
//! `dθ_i/dt = ω_i + Σ_{j≠i} A_ij sin(θ_i − θ_j)`
//!
//! The coupling sign is `sin(θ_i − θ_j)`, opposite to the textbook
//! synchronizing form, so connected pairs repel towards anti-phase.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dopri5::{integrate_dense, Dopri5Options, Dopri5Stats};
use super::graph::InteractionGraph;
use crate::error::{Error, Result};

pub const DEFAULT_GRID_DT: f64 = 0.01;
pub const DEFAULT_DOWNSAMPLE: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct KuramotoState {
    pub phases: Vec<f64>,
    pub omegas: Vec<f64>,
}

/// `ω ~ U[1, 10)`, `θ ~ U[0, 2π)`.
pub fn init_kuramoto<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<KuramotoState> {
    if n == 0 {
        return Err(Error::contract("need at least one oscillator"));
    }
    let mut omegas = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    for _ in 0..n {
        omegas.push(rng.random_range(1.0..10.0));
        phases.push(rng.random_range(0.0..2.0 * PI));
    }
    Ok(KuramotoState { phases, omegas })
}

pub fn kuramoto_rhs(theta: &[f64], omega: &[f64], graph: &InteractionGraph, out: &mut [f64]) {
    let n = theta.len();
    for i in 0..n {
        let mut acc = omega[i];
        for j in 0..n {
            if j != i {
                let a = graph.coupling(i, j);
                if a != 0.0 {
                    acc += a * (theta[i] - theta[j]).sin();
                }
            }
        }
        out[i] = acc;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KuramotoSettings {
    /// Spacing of the uniform dense-output grid.
    pub grid_dt: f64,
    /// Keep every `downsample`-th grid point.
    pub downsample: usize,
    pub frames: usize,
    pub atol: f64,
    pub rtol: f64,
}

impl KuramotoSettings {
    pub fn new(frames: usize) -> Self {
        Self {
            grid_dt: DEFAULT_GRID_DT,
            downsample: DEFAULT_DOWNSAMPLE,
            frames,
            atol: 1e-8,
            rtol: 1e-8,
        }
    }

    /// Time of the last emitted frame.
    pub fn t_end(&self) -> f64 {
        self.frame_time(self.frames.saturating_sub(1))
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        (frame * self.downsample) as f64 * self.grid_dt
    }
}

/// Sampled phases and phase velocities, `frames × n` each.
#[derive(Clone, Debug, PartialEq)]
pub struct KuramotoSeries {
    pub times: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub dtheta: Vec<Vec<f64>>,
    pub stats: Dopri5Stats,
}

impl KuramotoSeries {
    /// Phase-velocity series of one oscillator.
    pub fn dtheta_of(&self, agent: usize) -> Vec<f64> {
        self.dtheta.iter().map(|row| row[agent]).collect()
    }
}

/// Integrates with adaptive DOPRI5, samples the dense output on the grid and
/// keeps every `downsample`-th point. `dθ/dt` is the right-hand side
/// evaluated at the kept phases.
pub fn simulate_kuramoto(
    graph: &InteractionGraph,
    init: &KuramotoState,
    settings: &KuramotoSettings,
) -> Result<KuramotoSeries> {
    let n = init.phases.len();
    if init.omegas.len() != n || graph.n() != n {
        return Err(Error::contract(format!(
            "{} phases, {} frequencies, graph of {}",
            n,
            init.omegas.len(),
            graph.n()
        )));
    }
    if settings.frames == 0 || settings.downsample == 0 || !(settings.grid_dt > 0.0) {
        return Err(Error::contract(format!("invalid settings {settings:?}")));
    }
    let times: Vec<f64> = (0..settings.frames).map(|f| settings.frame_time(f)).collect();
    let opts = Dopri5Options {
        atol: settings.atol,
        rtol: settings.rtol,
        ..Dopri5Options::default()
    };
    let omega = init.omegas.clone();
    let (theta, stats) = integrate_dense(
        |_, y, dy| kuramoto_rhs(y, &omega, graph, dy),
        0.0,
        &init.phases,
        &times,
        &opts,
    )?;
    let dtheta = theta
        .iter()
        .map(|th| {
            let mut d = vec![0.0; n];
            kuramoto_rhs(th, &omega, graph, &mut d);
            d
        })
        .collect();
    Ok(KuramotoSeries {
        times,
        theta,
        dtheta,
        stats,
    })
}

/// Intrinsic-frequency estimate: the zero-frequency Fourier coefficient of
/// the phase-velocity series, normalized by its length (the time mean).
pub fn estimate_omega(dtheta: &[f64]) -> Result<f64> {
    if dtheta.is_empty() {
        return Err(Error::contract("empty phase-velocity series"));
    }
    // X_0 = Σ_t x_t · e^{-i·0·t}; the imaginary part vanishes
    let dc: f64 = dtheta.iter().sum();
    Ok(dc / dtheta.len() as f64)
}
