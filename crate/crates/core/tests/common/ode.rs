//! Adaptive Kuramoto integration against a fixed-step RK4 oracle.

use relnet::dynamics::{init_kuramoto, kuramoto_rhs, sample_er_graph, simulate_kuramoto, InteractionGraph, KuramotoSettings, KuramotoState};
use relnet::rng::{stream, Purpose};

use super::Check;

pub const SIM_TOL: f64 = 1e-8;

/// Classical RK4 with step `dt`, sampled at multiples of `every · dt`.
pub fn rk4_oracle(g: &InteractionGraph, init: &KuramotoState, dt: f64, steps: usize, every: usize) -> Vec<Vec<f64>> {
    let n = init.phases.len();
    let f = |y: &[f64]| {
        let mut d = vec![0.0; n];
        kuramoto_rhs(y, &init.omegas, g, &mut d);
        d
    };
    let axpy = |y: &[f64], k: &[f64], h: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let mut y = init.phases.clone();
    let mut out = vec![y.clone()];
    for s in 1..=steps {
        let k1 = f(&y);
        let k2 = f(&axpy(&y, &k1, dt / 2.0));
        let k3 = f(&axpy(&y, &k2, dt / 2.0));
        let k4 = f(&axpy(&y, &k3, dt));
        for i in 0..n {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if s % every == 0 {
            out.push(y.clone());
        }
    }
    out
}

/// Random 5-oscillator system with dense coupling.
pub fn system(seed: u64) -> (InteractionGraph, KuramotoState) {
    let mut rng = stream(seed, Purpose::Simulation, &[0]);
    let g = sample_er_graph(5, &[0.3, 0.7], &[0.0, 1.0], &mut rng).unwrap();
    let init = init_kuramoto(5, &mut rng).unwrap();
    (g, init)
}

/// Max |Δθ| between DOPRI5 frames over `[0, 10]` and the RK4 oracle, with
/// both absolute and relative tolerance set to `tol`.
pub fn dopri_vs_rk4(seed: u64, tol: f64) -> f64 {
    let (g, init) = system(seed);
    let mut settings = KuramotoSettings::new(101);
    settings.atol = tol;
    settings.rtol = tol;
    let series = simulate_kuramoto(&g, &init, &settings).unwrap();
    assert!((settings.t_end() - 10.0).abs() < 1e-12);
    let oracle = rk4_oracle(&g, &init, 1e-4, 100_000, 1_000);
    series
        .theta
        .iter()
        .zip(&oracle)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Largest deviation of `Σθ(t) − Σθ(0)` from `t·Σω`; the coupling terms
/// cancel pairwise so the phase sum drifts at exactly `Σω`.
pub fn mean_phase_drift(seed: u64) -> f64 {
    let (g, init) = system(seed);
    let series = simulate_kuramoto(&g, &init, &KuramotoSettings::new(101)).unwrap();
    let sum0: f64 = init.phases.iter().sum();
    let rate: f64 = init.omegas.iter().sum();
    series
        .times
        .iter()
        .zip(&series.theta)
        .map(|(t, th)| (th.iter().sum::<f64>() - sum0 - t * rate).abs())
        .fold(0.0, f64::max)
}

/// The acceptance criterion at the simulation tolerance of 1e-8.
pub fn suite() -> Vec<Check> {
    let mut checks = Vec::new();
    for seed in [1, 2, 3] {
        checks.push(Check::below(
            format!("DOPRI5 vs RK4 max |Δθ| (seed {seed})"),
            dopri_vs_rk4(seed, SIM_TOL),
            1e-6,
        ));
        checks.push(Check::below(
            format!("phase-sum drift vs t·Σω (seed {seed})"),
            mean_phase_drift(seed),
            1e-6,
        ));
    }
    checks
}

/// Global error shrinks in proportion to the tolerance and reaches the
/// 1e-6 band once the tolerance is tightened to 1e-10.
pub fn convergence_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    for seed in [1, 2, 3] {
        let coarse = dopri_vs_rk4(seed, SIM_TOL);
        let fine = dopri_vs_rk4(seed, 1e-10);
        checks.push(Check::below(format!("DOPRI5 at tol 1e-10 vs RK4 (seed {seed})"), fine, 1e-6));
        let ratio = coarse / fine;
        checks.push(Check::new(
            format!("error ratio between tol 1e-8 and 1e-10 (seed {seed})"),
            (10.0..=1000.0).contains(&ratio),
            format!("{ratio:.1} in [10, 1000]"),
        ));
        checks.push(Check::below(
            format!("phase-sum drift vs t·Σω (seed {seed})"),
            mean_phase_drift(seed),
            1e-6,
        ));
    }
    checks
}
