//! Check suites shared by the per-area integration tests and the
//! acceptance harness.
#![allow(dead_code)]

pub mod elbo_identity;
pub mod gradcheck;
pub mod gumbel;
pub mod ode;
pub mod physics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use relnet::tensor::{Real, Tensor};

/// Outcome of one quantitative check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }

    /// Passes when `value < bound`.
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value < bound, format!("{value:.3e} < {bound:.0e}"))
    }
}

pub fn assert_all(checks: &[Check]) {
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    assert!(failed.is_empty(), "failed checks:\n{}", failed.join("\n"));
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal entries scaled by `scale`.
pub fn randn<F: Real>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("length matches")
}
