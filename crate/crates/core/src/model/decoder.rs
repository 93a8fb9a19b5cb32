use std::collections::HashMap;
use std::rc::Rc;

use super::encoder::node_to_edge;
use super::{Batch, Bound, EdgeIndex};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// One transition for `idx.copies` stacked graphs.
///
/// `x` is `[copies·n, D]` and `z` is `[copies·n(n−1), K]`. Each directed
/// pair sends `Σ_k z_k · f_e^k([x_i, x_j])`, receivers sum their messages,
/// and `f_v([Σ msg, x_j])` is added to `x_j`.
pub fn decode_step<'t, F: Real>(
    p: &Bound<'t, F>,
    x: Var<'t, F>,
    z: Var<'t, F>,
    idx: &EdgeIndex,
) -> Result<Var<'t, F>> {
    let c = &p.config;
    let (xs, zs) = (x.shape(), z.shape());
    let edges = idx.send.len();
    if xs != [idx.rows(), c.feature_dim] || zs != [edges, c.n_edge_types] {
        return Err(Error::contract(format!(
            "decoder got state {xs:?} and edge sample {zs:?} for {} graphs of {} agents",
            idx.copies, idx.n
        )));
    }
    let pairs = node_to_edge(x, idx)?;
    let mut msg: Option<Var<'t, F>> = None;
    for k in 0..c.n_edge_types {
        let m = p
            .mlp(pairs, &format!("dec.edge{k}"), 2, true)?
            .mul(z.slice(1, k, 1)?)?;
        msg = Some(match msg {
            Some(acc) => acc.add(m)?,
            None => m,
        });
    }
    let incoming = msg
        .expect("at least two edge types")
        .scatter_add_rows(&idx.recv, idx.rows())?;
    let delta = p.mlp(p.tape.concat(&[incoming, x], 1)?, "dec.node", 3, false)?;
    x.add(delta)
}

/// Predictions paired with the ground-truth frames they target.
pub struct Rollout<'t, F: Real = f32> {
    pub preds: Vec<Var<'t, F>>,
    pub targets: Vec<Tensor<F>>,
}

impl<'t, F: Real> Rollout<'t, F> {
    /// All predictions and targets stacked along rows.
    pub fn stacked(&self) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let first = self
            .preds
            .first()
            .ok_or_else(|| Error::contract("empty rollout"))?;
        let tape = first.tape();
        let pred = tape.concat(&self.preds, 0)?;
        let targets: Vec<Var<'t, F>> =
            self.targets.iter().map(|t| tape.constant(t.clone())).collect();
        Ok((pred, tape.concat(&targets, 0)?))
    }
}

fn check_edges<F: Real>(p: &Bound<'_, F>, z: &Var<'_, F>, batch: &Batch<F>) -> Result<()> {
    let c = &p.config;
    if batch.n != c.n_agents || batch.dim != c.feature_dim {
        return Err(Error::contract(format!(
            "batch of {} agents × {} features for a model of {} × {}",
            batch.n, batch.dim, c.n_agents, c.feature_dim
        )));
    }
    if z.shape() != [batch.sims * c.n_edges(), c.n_edge_types] {
        return Err(Error::contract(format!(
            "edge sample {:?} for {} sims",
            z.shape(),
            batch.sims
        )));
    }
    Ok(())
}

/// Teacher-forced reconstruction of frames `1..frames`: the rollout is
/// re-anchored at the ground truth of frames `0, M, 2M, …` and runs freely
/// for up to `M` steps from each anchor. All segments advance together.
pub fn rollout_teacher<'t, F: Real>(
    p: &Bound<'t, F>,
    batch: &Batch<F>,
    z: Var<'t, F>,
    frames: usize,
    pred_steps: usize,
) -> Result<Rollout<'t, F>> {
    check_edges(p, &z, batch)?;
    if frames < 2 || frames > batch.frames || pred_steps == 0 {
        return Err(Error::contract(format!(
            "teacher forcing over {frames} of {} frames with segments of {pred_steps}",
            batch.frames
        )));
    }
    let (sims, n) = (batch.sims, batch.n);
    let e = p.config.n_edges();
    let starts: Vec<usize> = (0..frames - 1).step_by(pred_steps).collect();
    let segs = starts.len();
    let zrep: Rc<[usize]> = (0..segs).flat_map(|_| 0..sims * e).collect();
    let zrep = z.gather_rows(&zrep)?;
    let mut state = p.tape.constant(batch.frames_rows(&starts));
    let mut indices: HashMap<usize, EdgeIndex> = HashMap::new();
    let mut out = Rollout {
        preds: Vec::new(),
        targets: Vec::new(),
    };
    let mut live = segs;
    for k in 1..=pred_steps {
        let valid = starts.iter().filter(|&&s| s + k < frames).count();
        if valid == 0 {
            break;
        }
        if valid < live {
            state = state.slice(0, 0, valid * sims * n)?;
            live = valid;
        }
        let zk = if valid < segs {
            zrep.slice(0, 0, valid * sims * e)?
        } else {
            zrep
        };
        let idx = indices
            .entry(valid)
            .or_insert_with(|| EdgeIndex::new(n, valid * sims));
        state = decode_step(p, state, zk, idx)?;
        let ts: Vec<usize> = starts[..valid].iter().map(|s| s + k).collect();
        out.preds.push(state);
        out.targets.push(batch.frames_rows(&ts));
    }
    Ok(out)
}

/// Free-running forecast of `steps` frames from frame `start`, compared with
/// frames `start+1 ..= start+steps`.
pub fn rollout_free<'t, F: Real>(
    p: &Bound<'t, F>,
    batch: &Batch<F>,
    z: Var<'t, F>,
    start: usize,
    steps: usize,
) -> Result<Rollout<'t, F>> {
    check_edges(p, &z, batch)?;
    if start + steps >= batch.frames {
        return Err(Error::contract(format!(
            "forecast of {steps} steps after frame {start} needs {} frames, trajectory has {}",
            start + steps + 1,
            batch.frames
        )));
    }
    let idx = EdgeIndex::new(batch.n, batch.sims);
    let mut state = p.tape.constant(batch.frame_rows(start));
    let mut out = Rollout {
        preds: Vec::with_capacity(steps),
        targets: Vec::with_capacity(steps),
    };
    for k in 1..=steps {
        state = decode_step(p, state, z, &idx)?;
        out.preds.push(state);
        out.targets.push(batch.frame_rows(start + k));
    }
    Ok(out)
}
