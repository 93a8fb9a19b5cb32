//! Conservation, frequency and reflection checks for the spring system.

use relnet::dynamics::springs::leapfrog_step;
use relnet::dynamics::{init_springs, sample_er_graph, spring_forces, Boundary, InteractionGraph, SpringSystemState};
use relnet::rng::{stream, Purpose};

use super::Check;

const DT: f64 = 1e-3;

/// Largest relative energy deviation and momentum drift over `steps`
/// unbounded leapfrog steps of a random 5-particle system.
pub fn conservation(steps: usize, seed: u64) -> (f64, f64) {
    let mut rng = stream(seed, Purpose::Simulation, &[0]);
    let g = sample_er_graph(5, &[0.5, 0.5], &[0.0, 1.0], &mut rng).unwrap();
    let mut s = init_springs(5, Boundary::Unbounded, &mut rng).unwrap();
    let e0 = s.energy(&g);
    let p0 = s.momentum();
    let mut forces = spring_forces(&s.positions, &g);
    let (mut de, mut dp) = (0.0f64, 0.0f64);
    for _ in 0..steps {
        leapfrog_step(&mut s, &g, &mut forces, DT);
        de = de.max((s.energy(&g) - e0).abs() / e0);
        let p = s.momentum();
        dp = dp.max((p[0] - p0[0]).abs()).max((p[1] - p0[1]).abs());
    }
    (de, dp)
}

/// Angular frequency of the separation of two unit masses joined by a unit
/// spring, from the first and last of `crossings` upward zero crossings.
pub fn two_body_frequency(dt: f64, crossings: usize) -> f64 {
    let g = InteractionGraph::new(2, vec![0, 1, 1, 0], vec![0.0, 1.0]).unwrap();
    let mut s = SpringSystemState {
        positions: vec![[0.0, 0.0], [0.0, 0.0]],
        velocities: vec![[0.5, 0.0], [-0.5, 0.0]],
        boundary: Boundary::Unbounded,
    };
    let mut forces = spring_forces(&s.positions, &g);
    let sep = |s: &SpringSystemState| s.positions[0][0] - s.positions[1][0];
    let mut times = Vec::new();
    // step past the crossing at t = 0
    leapfrog_step(&mut s, &g, &mut forces, dt);
    let mut t = dt;
    let mut prev = sep(&s);
    while times.len() < crossings {
        leapfrog_step(&mut s, &g, &mut forces, dt);
        let cur = sep(&s);
        if prev < 0.0 && cur >= 0.0 {
            times.push(t + dt * (-prev) / (cur - prev));
        }
        prev = cur;
        t += dt;
    }
    let periods = (crossings - 1) as f64;
    2.0 * std::f64::consts::PI * periods / (times[crossings - 1] - times[0])
}

/// Largest speed change of a free particle bouncing for `steps` steps.
pub fn reflection_speed_error(boundary: Boundary, steps: usize) -> f64 {
    let g = InteractionGraph::new(1, vec![0], vec![0.0, 1.0]).unwrap();
    let mut s = SpringSystemState {
        positions: vec![[0.1, -0.3]],
        velocities: vec![[3.7, 2.9]],
        boundary,
    };
    let speed = |s: &SpringSystemState| s.velocities[0][0].hypot(s.velocities[0][1]);
    let v0 = speed(&s);
    let mut forces = spring_forces(&s.positions, &g);
    let mut worst = 0.0f64;
    for _ in 0..steps {
        leapfrog_step(&mut s, &g, &mut forces, DT);
        worst = worst.max((speed(&s) - v0).abs());
    }
    worst
}

pub fn suite() -> Vec<Check> {
    let (de, dp) = conservation(100_000, 1);
    let w = two_body_frequency(DT, 6);
    let w_ref = two_body_frequency(1e-6, 3);
    vec![
        Check::below("energy |ΔE|/E over 1e5 steps", de, 1e-6),
        Check::below("momentum drift over 1e5 steps", dp, 1e-10),
        Check::below("two-body frequency vs √2", (w - 2f64.sqrt()).abs(), 1e-6),
        Check::below("two-body frequency vs dt=1e-6 reference", (w - w_ref).abs(), 1e-6),
        Check::below(
            "square reflection speed",
            reflection_speed_error(Boundary::Square { side: 2.0 }, 20_000),
            1e-12,
        ),
        Check::below(
            "circle reflection speed",
            reflection_speed_error(Boundary::Circle { diameter: 2.0 }, 20_000),
            1e-12,
        ),
    ]
}
