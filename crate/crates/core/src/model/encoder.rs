use super::{Bound, EdgeIndex};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Stacks sender and receiver rows: `[copies·E, 2·width]`.
pub(crate) fn node_to_edge<'t, F: Real>(h: Var<'t, F>, idx: &EdgeIndex) -> Result<Var<'t, F>> {
    h.tape()
        .concat(&[h.gather_rows(&idx.send)?, h.gather_rows(&idx.recv)?], 1)
}

/// Edge logits `[sims·n(n−1), K]` from the `[sims·n, input_frames·D]`
/// matrix of flattened node trajectories.
///
/// Two rounds of node-to-edge message passing: node embeddings, edge
/// embeddings from sender/receiver pairs, summed incoming edge embeddings
/// concatenated with the raw trajectory, then a second edge round and a
/// linear read-out.
pub fn encode<'t, F: Real>(p: &Bound<'t, F>, x: &Tensor<F>, sims: usize) -> Result<Var<'t, F>> {
    let c = &p.config;
    let width = c.input_frames * c.feature_dim;
    if x.shape() != [sims * c.n_agents, width] {
        return Err(Error::contract(format!(
            "encoder input {:?}, expected [{}, {width}] for {sims} sims of {} agents × {} frames × {} features",
            x.shape(),
            sims * c.n_agents,
            c.n_agents,
            c.input_frames,
            c.feature_dim
        )));
    }
    let idx = EdgeIndex::new(c.n_agents, sims);
    let x = p.tape.constant(x.clone());
    let h = p.mlp(x, "enc.mlp1", 2, true)?;
    let e = p.mlp(node_to_edge(h, &idx)?, "enc.mlp2", 2, true)?;
    let incoming = e.scatter_add_rows(&idx.recv, idx.rows())?;
    let v = p.tape.concat(&[incoming, x], 1)?;
    let v = p.mlp(v, "enc.mlp3", 2, true)?;
    let e = p.mlp(node_to_edge(v, &idx)?, "enc.mlp4", 2, true)?;
    p.linear(e, "enc.out", 1)
}

/// Edge-type distribution per directed pair, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePosterior<F: Real = f32> {
    pub sims: usize,
    pub n: usize,
    /// `[sims·n(n−1), K]`.
    pub logits: Tensor<F>,
}

impl<F: Real> EdgePosterior<F> {
    pub fn new(sims: usize, n: usize, logits: Tensor<F>) -> Result<Self> {
        let (rows, k) = logits.dims2()?;
        if rows != sims * n * (n - 1) || k < 2 {
            return Err(Error::contract(format!(
                "posterior logits {:?} for {sims} sims of {n} agents",
                logits.shape()
            )));
        }
        Ok(Self { sims, n, logits })
    }

    pub fn n_types(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn n_edges(&self) -> usize {
        self.n * (self.n - 1)
    }

    /// Row-wise softmax, `[sims·n(n−1), K]` in `f64`.
    pub fn probs(&self) -> Vec<f64> {
        softmax_rows(self.logits.data(), self.n_types())
    }

    /// Most probable type for each unordered pair `i < j` of simulation
    /// `sim`, from the average of the `(i, j)` and `(j, i)` distributions.
    pub fn pair_labels(&self, sim: usize) -> Vec<u8> {
        let (n, k, e) = (self.n, self.n_types(), self.n_edges());
        let probs = softmax_rows(&self.logits.data()[sim * e * k..(sim + 1) * e * k], k);
        let row = |i: usize, j: usize| {
            let local = i * (n - 1) + if j > i { j - 1 } else { j };
            &probs[local * k..(local + 1) * k]
        };
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (row(i, j), row(j, i));
                let mut best = 0;
                for t in 1..k {
                    if a[t] + b[t] > a[best] + b[best] {
                        best = t;
                    }
                }
                out.push(best as u8);
            }
        }
        out
    }
}

fn softmax_rows<F: Real>(logits: &[F], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}
