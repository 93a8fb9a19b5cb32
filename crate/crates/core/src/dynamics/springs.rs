//! Point masses coupled by Hooke's-law springs in the plane.
//!
//! Unit mass throughout. Integration is kick-drift-kick leapfrog; walls
//! reflect specularly during the drift.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::InteractionGraph;
use super::Series;
use crate::error::{Error, Result};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_DOWNSAMPLE: usize = 100;
const INIT_POSITION_STD: f64 = 0.5;
const INIT_SPEED: f64 = 0.5;

/// Enclosure, centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Unbounded,
    Square {
        side: f64,
    },
    Circle {
        diameter: f64,
    },
}

impl Boundary {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Boundary::Square { side: s } | Boundary::Circle { diameter: s } if !(s > 0.0) => Err(
                Error::contract(format!("boundary size must be positive, got {s}")),
            ),
            _ => Ok(()),
        }
    }

    /// Strictly inside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Boundary::Unbounded => true,
            Boundary::Square { side } => {
                let h = side / 2.0;
                p[0].abs() < h && p[1].abs() < h
            }
            Boundary::Circle { diameter } => {
                let r = diameter / 2.0;
                p[0] * p[0] + p[1] * p[1] < r * r
            }
        }
    }

    /// Contained or on the wall.
    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        match *self {
            Boundary::Unbounded => true,
            Boundary::Square { side } => {
                let h = side / 2.0;
                p[0].abs() <= h && p[1].abs() <= h
            }
            Boundary::Circle { diameter } => {
                let r = diameter / 2.0;
                (p[0] * p[0] + p[1] * p[1]).sqrt() <= r * (1.0 + 1e-12)
            }
        }
    }

    /// Moves `p` along `v` for time `dt`, reflecting off walls.
    fn drift(&self, p: &mut [f64; 2], v: &mut [f64; 2], dt: f64) {
        match *self {
            Boundary::Unbounded => {
                p[0] += v[0] * dt;
                p[1] += v[1] * dt;
            }
            Boundary::Square { side } => {
                let h = side / 2.0;
                for c in 0..2 {
                    p[c] += v[c] * dt;
                    // mirror until back in range; more than one pass only for
                    // steps longer than the box
                    loop {
                        if p[c] > h {
                            p[c] = 2.0 * h - p[c];
                        } else if p[c] < -h {
                            p[c] = -2.0 * h - p[c];
                        } else {
                            break;
                        }
                        v[c] = -v[c];
                    }
                }
            }
            Boundary::Circle { diameter } => {
                let r = diameter / 2.0;
                let mut remaining = dt;
                for _ in 0..64 {
                    let next = [p[0] + v[0] * remaining, p[1] + v[1] * remaining];
                    if next[0] * next[0] + next[1] * next[1] <= r * r {
                        *p = next;
                        return;
                    }
                    // exit time: larger root of |p + v s|² = r²
                    let a = v[0] * v[0] + v[1] * v[1];
                    let b = 2.0 * (p[0] * v[0] + p[1] * v[1]);
                    let c = p[0] * p[0] + p[1] * p[1] - r * r;
                    let disc = (b * b - 4.0 * a * c).max(0.0);
                    let s = ((-b + disc.sqrt()) / (2.0 * a)).clamp(0.0, remaining);
                    let hit = [p[0] + v[0] * s, p[1] + v[1] * s];
                    let norm = (hit[0] * hit[0] + hit[1] * hit[1]).sqrt();
                    let nrm = [hit[0] / norm, hit[1] / norm];
                    let vn = v[0] * nrm[0] + v[1] * nrm[1];
                    v[0] -= 2.0 * vn * nrm[0];
                    v[1] -= 2.0 * vn * nrm[1];
                    *p = hit;
                    remaining -= s;
                }
                // pathological grazing sequence: pull back onto the wall
                let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
                if norm > r {
                    p[0] *= r / norm;
                    p[1] *= r / norm;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpringSystemState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub boundary: Boundary,
}

impl SpringSystemState {
    pub fn n(&self) -> usize {
        self.positions.len()
    }

    /// Kinetic plus spring potential energy (unit masses).
    pub fn energy(&self, graph: &InteractionGraph) -> f64 {
        let kinetic: f64 = self
            .velocities
            .iter()
            .map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1]))
            .sum();
        let mut potential = 0.0;
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                let k = graph.coupling(i, j);
                let d = [
                    self.positions[i][0] - self.positions[j][0],
                    self.positions[i][1] - self.positions[j][1],
                ];
                potential += 0.5 * k * (d[0] * d[0] + d[1] * d[1]);
            }
        }
        kinetic + potential
    }

    pub fn momentum(&self) -> [f64; 2] {
        self.velocities
            .iter()
            .fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]])
    }
}

/// Positions `N(0, 0.5)` per coordinate, velocities of magnitude 0.5 in a
/// uniformly random direction.
///
/// With a finite boundary, each particle's position is redrawn until it lies
/// strictly inside.
pub fn init_springs<R: Rng + ?Sized>(
    n: usize,
    boundary: Boundary,
    rng: &mut R,
) -> Result<SpringSystemState> {
    if n == 0 {
        return Err(Error::contract("need at least one particle"));
    }
    boundary.validate()?;
    let normal = Normal::new(0.0, INIT_POSITION_STD).expect("valid std");
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for _ in 0..n {
        let p = loop {
            let p = [normal.sample(rng), normal.sample(rng)];
            if boundary.contains(p) {
                break p;
            }
        };
        let angle = rng.random::<f64>() * 2.0 * PI;
        positions.push(p);
        velocities.push([INIT_SPEED * angle.cos(), INIT_SPEED * angle.sin()]);
    }
    Ok(SpringSystemState {
        positions,
        velocities,
        boundary,
    })
}

/// `F_i = Σ_j −K_ij (s_i − s_j)`; each pair contributes equal and opposite
/// forces.
pub fn spring_forces(positions: &[[f64; 2]], graph: &InteractionGraph) -> Vec<[f64; 2]> {
    let mut forces = vec![[0.0; 2]; positions.len()];
    accumulate_forces(positions, graph, &mut forces);
    forces
}

fn accumulate_forces(positions: &[[f64; 2]], graph: &InteractionGraph, forces: &mut [[f64; 2]]) {
    forces.iter_mut().for_each(|f| *f = [0.0; 2]);
    let n = positions.len();
    for i in 0..n {
        for j in i + 1..n {
            let k = graph.coupling(i, j);
            if k == 0.0 {
                continue;
            }
            let fx = -k * (positions[i][0] - positions[j][0]);
            let fy = -k * (positions[i][1] - positions[j][1]);
            forces[i][0] += fx;
            forces[i][1] += fy;
            forces[j][0] -= fx;
            forces[j][1] -= fy;
        }
    }
}

/// Leapfrog settings; frame `t` of the output is raw step `downsample · t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringSettings {
    pub dt: f64,
    pub downsample: usize,
    pub frames: usize,
}

impl SpringSettings {
    pub fn new(frames: usize) -> Self {
        Self {
            dt: DEFAULT_DT,
            downsample: DEFAULT_DOWNSAMPLE,
            frames,
        }
    }
}

/// Advances `state` by one kick-drift-kick step. `forces` must hold the
/// forces at the current positions on entry and holds the new ones on exit.
pub fn leapfrog_step(
    state: &mut SpringSystemState,
    graph: &InteractionGraph,
    forces: &mut [[f64; 2]],
    dt: f64,
) {
    let half = 0.5 * dt;
    for (v, f) in state.velocities.iter_mut().zip(forces.iter()) {
        v[0] += half * f[0];
        v[1] += half * f[1];
    }
    let boundary = state.boundary;
    for (p, v) in state.positions.iter_mut().zip(state.velocities.iter_mut()) {
        boundary.drift(p, v, dt);
    }
    accumulate_forces(&state.positions, graph, forces);
    for (v, f) in state.velocities.iter_mut().zip(forces.iter()) {
        v[0] += half * f[0];
        v[1] += half * f[1];
    }
}

/// Integrates and subsamples, returning `n × frames × 4` features
/// `(x, y, ẋ, ẏ)`.
pub fn simulate_springs(
    graph: &InteractionGraph,
    init: &SpringSystemState,
    settings: &SpringSettings,
) -> Result<Series> {
    let n = init.n();
    if graph.n() != n {
        return Err(Error::contract(format!(
            "graph has {} agents, state has {n}",
            graph.n()
        )));
    }
    if !(settings.dt > 0.0) || settings.downsample == 0 || settings.frames == 0 {
        return Err(Error::contract(format!("invalid settings {settings:?}")));
    }
    init.boundary.validate()?;
    if let Some(i) = init.positions.iter().position(|&p| !init.boundary.contains(p)) {
        return Err(Error::contract(format!(
            "particle {i} at {:?} starts outside {:?}",
            init.positions[i], init.boundary
        )));
    }

    let mut series = Series::zeros(n, settings.frames, 4);
    let mut state = init.clone();
    let mut forces = spring_forces(&state.positions, graph);
    let record = |series: &mut Series, state: &SpringSystemState, frame: usize| {
        for i in 0..n {
            let p = state.positions[i];
            let v = state.velocities[i];
            series.set(i, frame, &[p[0], p[1], v[0], v[1]]);
        }
    };
    record(&mut series, &state, 0);
    for frame in 1..settings.frames {
        for _ in 0..settings.downsample {
            leapfrog_step(&mut state, graph, &mut forces, settings.dt);
        }
        record(&mut series, &state, frame);
    }
    Ok(series)
}
