//! Central finite differences against the tape's reverse-mode gradients.

use std::rc::Rc;
use std::time::Instant;

use relnet::model::{elbo_loss, Batch, ModelConfig, ModelParams};
use relnet::rng::{stream, Purpose};
use relnet::tensor::{Real, Tape, Tensor, Var};
use relnet::Result;

use super::{randn, rng, Check};

pub const TOLERANCE: f64 = 1e-3;
const H: f64 = 1e-6;

type OpFn = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Largest elementwise relative error between two gradients. Each entry is
/// compared relative to the larger of the two magnitudes, floored at 1e-6
/// of the largest reference entry so entries that are zero up to rounding
/// do not dominate.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs() / a.abs().max(r.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks `d/dx Σ w ⊙ f(x)` for fixed random weights `w`.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, f: &OpFn) -> Check {
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward succeeds");
        randn::<f64>(&out.shape(), 1.0, &mut rng(name.len() as u64))
    };
    let loss = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward succeeds");
        out.mul(tape.constant(weights.clone())).expect("same shape").sum().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).expect("forward succeeds");
    let l = out.mul(tape.constant(weights.clone())).expect("same shape").sum();
    let grads = tape.backward(l).expect("backward succeeds");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.get_or_zeros(*v).data());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric.push((loss(&plus) - loss(&minus)) / (2.0 * H));
        }
    }
    Check::below(format!("grad {name}"), max_relative_error(&analytic, &numeric), TOLERANCE)
}

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, 1.0, &mut rng(seed))
}

/// Every differentiable tape op over a spread of shapes.
pub fn op_suite() -> Vec<Check> {
    let idx: Rc<[usize]> = Rc::from(vec![2usize, 0, 2, 1, 3]);
    let scatter: Rc<[usize]> = Rc::from(vec![1usize, 0, 1, 2, 1]);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<OpFn>)> = vec![
        ("matmul 3x4·4x2", vec![t(&[3, 4], 1), t(&[4, 2], 2)], Box::new(|_, v| v[0].matmul(v[1]))),
        ("matmul 1x5·5x3", vec![t(&[1, 5], 3), t(&[5, 3], 4)], Box::new(|_, v| v[0].matmul(v[1]))),
        (
            "linear 4x3·3x5+1x5",
            vec![t(&[4, 3], 5), t(&[3, 5], 6), t(&[1, 5], 7)],
            Box::new(|_, v| v[0].linear(v[1], v[2])),
        ),
        ("add 3x4", vec![t(&[3, 4], 8), t(&[3, 4], 9)], Box::new(|_, v| v[0].add(v[1]))),
        ("add 3x1+1x4", vec![t(&[3, 1], 10), t(&[1, 4], 11)], Box::new(|_, v| v[0].add(v[1]))),
        ("add 2x3x4+1x3x1", vec![t(&[2, 3, 4], 12), t(&[1, 3, 1], 13)], Box::new(|_, v| v[0].add(v[1]))),
        ("sub 4x3-1x3", vec![t(&[4, 3], 14), t(&[1, 3], 15)], Box::new(|_, v| v[0].sub(v[1]))),
        ("mul 3x4", vec![t(&[3, 4], 16), t(&[3, 4], 17)], Box::new(|_, v| v[0].mul(v[1]))),
        ("mul 4x3*4x1", vec![t(&[4, 3], 18), t(&[4, 1], 19)], Box::new(|_, v| v[0].mul(v[1]))),
        ("scale", vec![t(&[5], 20)], Box::new(|_, v| Ok(v[0].scale(-2.5)))),
        ("offset", vec![t(&[2, 3], 21)], Box::new(|_, v| Ok(v[0].offset(0.7).square()))),
        ("elu", vec![t(&[4, 5], 22)], Box::new(|_, v| Ok(v[0].elu()))),
        ("square", vec![t(&[3, 3], 23)], Box::new(|_, v| Ok(v[0].square()))),
        ("sum", vec![t(&[2, 3, 2], 24)], Box::new(|_, v| Ok(v[0].square().sum()))),
        ("mean", vec![t(&[4, 2], 25)], Box::new(|_, v| Ok(v[0].square().mean()))),
        ("sum_along 0 of 3x4", vec![t(&[3, 4], 26)], Box::new(|_, v| v[0].sum_along(0))),
        ("sum_along 1 of 2x3x4", vec![t(&[2, 3, 4], 27)], Box::new(|_, v| v[0].sum_along(1))),
        (
            "concat axis 0",
            vec![t(&[2, 3], 28), t(&[1, 3], 29)],
            Box::new(|tape, v| tape.concat(&[v[0], v[1]], 0)),
        ),
        (
            "concat axis 1",
            vec![t(&[2, 3], 30), t(&[2, 2], 31)],
            Box::new(|tape, v| tape.concat(&[v[0].square(), v[1]], 1)),
        ),
        ("softmax axis 1", vec![t(&[3, 4], 32)], Box::new(|_, v| v[0].softmax(1))),
        ("softmax axis 0", vec![t(&[3, 2], 33)], Box::new(|_, v| v[0].softmax(0))),
        ("log_softmax axis 1", vec![t(&[4, 3], 34)], Box::new(|_, v| v[0].log_softmax(1))),
        ("reshape", vec![t(&[2, 6], 35)], Box::new(|_, v| Ok(v[0].reshape([3, 4])?.square()))),
        ("gather_rows", vec![t(&[4, 3], 36)], Box::new(move |_, v| v[0].gather_rows(&idx))),
        (
            "scatter_add_rows",
            vec![t(&[5, 2], 37)],
            Box::new(move |_, v| v[0].scatter_add_rows(&scatter, 3)),
        ),
        ("slice axis 1", vec![t(&[3, 5], 38)], Box::new(|_, v| v[0].slice(1, 1, 3))),
        ("slice axis 0 of 4x2x3", vec![t(&[4, 2, 3], 39)], Box::new(|_, v| v[0].slice(0, 2, 2))),
        (
            "two-layer ELU MLP",
            vec![t(&[6, 4], 40), t(&[4, 8], 41), t(&[1, 8], 42), t(&[8, 3], 43), t(&[1, 3], 44)],
            Box::new(|_, v| Ok(v[0].linear(v[1], v[2])?.elu().linear(v[3], v[4])?.elu())),
        ),
    ];
    cases.iter().map(|(name, inputs, f)| check_op(name, inputs.clone(), f.as_ref())).collect()
}

/// Straight-through samples have a constant forward value, so finite
/// differences see zero; the check is that the backward pass hands the
/// upstream gradient to the relaxed input unchanged.
pub fn straight_through_check() -> Check {
    let tape = Tape::<f64>::new();
    let x = tape.param(t(&[3, 2], 50));
    let hard = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let w = t(&[3, 2], 51);
    let y = x.straight_through(hard.clone()).unwrap();
    let same_value = y.value() == hard;
    let g = tape.backward(y.mul(tape.constant(w.clone())).unwrap().sum()).unwrap();
    let same_grad = g.get_or_zeros(x) == w;
    Check::new("straight-through gradient", same_value && same_grad, "forward hard, backward identity")
}

/// 3 agents, 5 frames, 2 edge types.
pub fn toy_config() -> ModelConfig {
    let mut c = ModelConfig::new(3, 4, 2, 5);
    c.hidden = 16;
    c.pred_steps = 2;
    c.sigma2 = 0.5;
    c
}

fn toy_batch<F: Real>() -> Batch<F> {
    let data: Tensor<F> = randn(&[2 * 3 * 5 * 4], 0.5, &mut rng(60));
    Batch::new(2, 3, 5, 4, data.into_data()).unwrap()
}

fn elbo_value<F: Real>(params: &ModelParams<F>, batch: &Batch<F>) -> f64 {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let mut rng = stream(7, Purpose::Gumbel, &[0]);
    elbo_loss(&p, batch, &mut rng).unwrap().loss.item().as_f64()
}

fn elbo_grad<F: Real>(params: &ModelParams<F>, batch: &Batch<F>) -> Vec<f64> {
    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let mut rng = stream(7, Purpose::Gumbel, &[0]);
    let terms = elbo_loss(&p, batch, &mut rng).unwrap();
    let g = tape.backward(terms.loss).unwrap();
    params
        .tensors
        .keys()
        .flat_map(|k| g.get_or_zeros(p.var(k)).to_f64_vec())
        .collect()
}

/// Finite differences of the negated ELBO in `f64` over every parameter,
/// with the Gumbel noise held fixed.
fn elbo_fd(params: &ModelParams<f64>, batch: &Batch<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.n_values());
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let mut work = params.clone();
    for name in &names {
        for i in 0..params.tensors[name].len() {
            let orig = params.tensors[name].data()[i];
            work.tensors.get_mut(name).unwrap().data_mut()[i] = orig + H;
            let up = elbo_value(&work, batch);
            work.tensors.get_mut(name).unwrap().data_mut()[i] = orig - H;
            let down = elbo_value(&work, batch);
            work.tensors.get_mut(name).unwrap().data_mut()[i] = orig;
            out.push((up - down) / (2.0 * H));
        }
    }
    out
}

/// The full objective on the toy model: `f64` tape against `f64` finite
/// differences elementwise, and the `f32` training path against the same
/// reference in relative L2 norm.
pub fn elbo_suite() -> Vec<Check> {
    let params = ModelParams::<f64>::init(toy_config(), 3).unwrap();
    let batch = toy_batch::<f64>();
    let fd = elbo_fd(&params, &batch);
    let g64 = elbo_grad(&params, &batch);
    let g32 = elbo_grad(&params.cast::<f32>(), &toy_batch::<f32>());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = g32.iter().zip(&fd).map(|(a, b)| a - b).collect();
    vec![
        Check::below("grad elbo_loss (f64 tape vs f64 FD)", max_relative_error(&g64, &fd), TOLERANCE),
        Check::below("grad elbo_loss (f32 tape vs f64 FD, L2)", norm(&diff) / norm(&fd), TOLERANCE),
    ]
}

/// All autodiff checks plus the wall time they took.
pub fn full_suite() -> (Vec<Check>, f64) {
    let start = Instant::now();
    let mut checks = op_suite();
    checks.push(straight_through_check());
    checks.extend(elbo_suite());
    (checks, start.elapsed().as_secs_f64())
}
