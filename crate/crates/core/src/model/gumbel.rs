use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

const U_MIN: f64 = 1e-10;

/// `g = −log(−log u)`, `u ~ U(0, 1)` clamped to `[1e-10, 1 − 1e-10]`.
pub fn gumbel_noise<F: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(U_MIN, 1.0 - U_MIN);
            F::lit(-(-u.ln()).ln())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// One-hot rows marking the largest entry along the last axis (first index
/// on ties).
pub fn one_hot_argmax<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    let k = *t.shape().last().expect("rank ≥ 1");
    let mut data = vec![F::zero(); t.len()];
    for (r, row) in t.data().chunks_exact(k).enumerate() {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        data[r * k + best] = F::one();
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// `z = softmax((logits + g)/τ)` per row. With `hard`, the forward value is
/// the one-hot argmax while gradients flow through the relaxed sample.
pub fn sample_edges<'t, F: Real, R: Rng + ?Sized>(
    logits: Var<'t, F>,
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Var<'t, F>> {
    let g = logits.tape().constant(gumbel_noise(&logits.shape(), rng));
    let y = logits.add(g)?.scale(1.0 / tau).softmax(1)?;
    if hard {
        let h = y.with_value(one_hot_argmax);
        y.straight_through(h)
    } else {
        Ok(y)
    }
}

/// [`sample_edges`] on plain tensors.
pub fn sample_edges_tensor<F: Real, R: Rng + ?Sized>(
    logits: &Tensor<F>,
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Tensor<F>> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone());
    Ok(sample_edges(l, tau, rng, hard)?.value())
}
