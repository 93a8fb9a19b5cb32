use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth undirected interaction network with typed links.
///
/// Type 0 is "no link" by convention of the generators; the model does not
/// rely on that.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    n: usize,
    /// Row-major `n × n` link-type matrix.
    link_type: Vec<u8>,
    /// Physical coupling per link type (spring constant or Kuramoto `A_ij`).
    type_values: Vec<f64>,
}

impl InteractionGraph {
    pub fn new(n: usize, link_type: Vec<u8>, type_values: Vec<f64>) -> Result<Self> {
        if link_type.len() != n * n {
            return Err(Error::contract(format!(
                "link matrix has {} entries, expected {}",
                link_type.len(),
                n * n
            )));
        }
        if type_values.is_empty() || type_values.len() > u8::MAX as usize {
            return Err(Error::contract("need between 1 and 255 link types"));
        }
        for i in 0..n {
            if link_type[i * n + i] != 0 {
                return Err(Error::contract(format!("self-loop on agent {i}")));
            }
            for j in 0..n {
                let t = link_type[i * n + j];
                if t != link_type[j * n + i] {
                    return Err(Error::contract(format!("asymmetric link ({i}, {j})")));
                }
                if t as usize >= type_values.len() {
                    return Err(Error::contract(format!(
                        "link type {t} at ({i}, {j}) but only {} types",
                        type_values.len()
                    )));
                }
            }
        }
        Ok(Self {
            n,
            link_type,
            type_values,
        })
    }

    /// Graph with every pair set to `link`.
    pub fn uniform(n: usize, link: u8, type_values: Vec<f64>) -> Result<Self> {
        let mut m = vec![link; n * n];
        for i in 0..n {
            m[i * n + i] = 0;
        }
        Self::new(n, m, type_values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_types(&self) -> usize {
        self.type_values.len()
    }

    pub fn type_values(&self) -> &[f64] {
        &self.type_values
    }

    pub fn link_matrix(&self) -> &[u8] {
        &self.link_type
    }

    pub fn link(&self, i: usize, j: usize) -> u8 {
        self.link_type[i * self.n + j]
    }

    /// Physical coupling between `i` and `j` (zero on the diagonal).
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.type_values[self.link(i, j) as usize]
        }
    }

    /// Link types of the unordered pairs `(i, j)`, `i < j`, row by row.
    pub fn pair_labels(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n * (self.n.saturating_sub(1)) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.link(i, j));
            }
        }
        out
    }

    /// Fraction of unordered pairs carrying a non-zero link type.
    pub fn density(&self) -> f64 {
        let labels = self.pair_labels();
        if labels.is_empty() {
            return 0.0;
        }
        labels.iter().filter(|&&t| t != 0).count() as f64 / labels.len() as f64
    }
}

/// Validates a probability vector over link types.
pub fn check_type_probs(type_probs: &[f64]) -> Result<()> {
    if type_probs.is_empty() {
        return Err(Error::contract("empty link-type probability vector"));
    }
    if type_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::contract(format!(
            "invalid link-type probabilities {type_probs:?}"
        )));
    }
    let total: f64 = type_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "link-type probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Erdős–Rényi style sampling: every unordered pair independently draws a
/// link type from `type_probs`.
pub fn sample_er_graph<R: Rng + ?Sized>(
    n: usize,
    type_probs: &[f64],
    type_values: &[f64],
    rng: &mut R,
) -> Result<InteractionGraph> {
    check_type_probs(type_probs)?;
    if type_probs.len() != type_values.len() {
        return Err(Error::contract(format!(
            "{} probabilities for {} link types",
            type_probs.len(),
            type_values.len()
        )));
    }
    let last_possible = type_probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    let mut m = vec![0u8; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = last_possible;
            for (k, &p) in type_probs.iter().enumerate() {
                acc += p;
                if p > 0.0 && u < acc {
                    chosen = k;
                    break;
                }
            }
            m[i * n + j] = chosen as u8;
            m[j * n + i] = chosen as u8;
        }
    }
    InteractionGraph::new(n, m, type_values.to_vec())
}
