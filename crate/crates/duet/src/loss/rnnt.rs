//! Transducer negative log-likelihood by forward recursion in log space.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::model::{
    hat_grid, label_col, DecoderPass, EncoderStates, LogitLattice, ModelConfig,
};

use super::LossError;

/// Transducer NLL straight from encoder states: the batched HAT grid feeding
/// the fused forward-backward node. Equal to `rnnt_nll` over
/// [`crate::model::build_lattice`] cell for cell, at a fraction of the graph
/// size; this is the route the training loop uses.
pub fn transducer_nll(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pass: DecoderPass,
    enc: &EncoderStates,
    target: &[u32],
    fastemit: f64,
) -> Result<NodeId, LossError> {
    if enc.len == 0 {
        return Err(LossError::EmptyLattice);
    }
    let (blank, label) = hat_grid(g, store, cfg, pass, enc, target)?;
    Ok(g.rnnt_forward_backward(blank, label, fastemit)?)
}

fn label_pick(
    g: &mut Graph,
    lattice: &LogitLattice,
    t: usize,
    u: usize,
    label: u32,
) -> Result<NodeId, LossError> {
    let col = label_col(label);
    Ok(g.slice(lattice.at(t, u).label_lp, vec![0, col], vec![1, col + 1])?)
}

/// `-log P(target | lattice)`: the log-sum over all monotonic blank/label
/// alignments, computed with the standard forward recursion
/// `a(t,u) = lse(a(t-1,u) + blank(t-1,u), a(t,u-1) + label(t,u-1))`.
/// Differentiable through the graph like any other node.
pub fn rnnt_nll(
    g: &mut Graph,
    lattice: &LogitLattice,
    target: &[u32],
) -> Result<NodeId, LossError> {
    if lattice.t_len == 0 {
        return Err(LossError::EmptyLattice);
    }
    if lattice.u_len != target.len() + 1 {
        return Err(LossError::LatticeTargetMismatch {
            u_len: lattice.u_len,
            target: target.len(),
        });
    }
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let mut alpha: Vec<NodeId> = Vec::with_capacity(t_len * u_len);
    for t in 0..t_len {
        for u in 0..u_len {
            let node = match (t, u) {
                (0, 0) => g.const_scalar(0.0),
                (0, _) => {
                    let prev = alpha[u - 1];
                    let lp = label_pick(g, lattice, 0, u - 1, target[u - 1])?;
                    g.add(prev, lp)?
                }
                (_, 0) => {
                    let prev = alpha[(t - 1) * u_len];
                    let blank = lattice.at(t - 1, 0).blank_lp;
                    g.add(prev, blank)?
                }
                _ => {
                    let from_blank = {
                        let prev = alpha[(t - 1) * u_len + u];
                        let blank = lattice.at(t - 1, u).blank_lp;
                        g.add(prev, blank)?
                    };
                    let from_label = {
                        let prev = alpha[t * u_len + u - 1];
                        let lp = label_pick(g, lattice, t, u - 1, target[u - 1])?;
                        g.add(prev, lp)?
                    };
                    g.lse_pair(from_blank, from_label)?
                }
            };
            alpha.push(node);
        }
    }
    let last = alpha[(t_len - 1) * u_len + u_len - 1];
    let final_blank = lattice.at(t_len - 1, u_len - 1).blank_lp;
    let logp = g.add(last, final_blank)?;
    Ok(g.neg(logp)?)
}

/// NLL plus the optional early-emission regularizer. The regularizer adds
/// `weight` times the expected label-emission negative log-probability under
/// the model's own alignment posterior; the posterior weights are treated as
/// constants, so the extra term only rescales the label-emission part of the
/// gradient.
pub fn rnnt_nll_with_fastemit(
    g: &mut Graph,
    lattice: &LogitLattice,
    target: &[u32],
    weight: f64,
) -> Result<NodeId, LossError> {
    let nll = rnnt_nll(g, lattice, target)?;
    if weight == 0.0 {
        return Ok(nll);
    }
    let occ = emission_occupancy(g, lattice, target)?;
    let mut aux: Option<NodeId> = None;
    for (t, u, w) in occ {
        if w < 1e-8 {
            continue;
        }
        let lp = label_pick(g, lattice, t, u, target[u])?;
        let term = g.scale(lp, -w)?;
        aux = Some(match aux {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match aux {
        Some(a) => {
            let scaled = g.scale(a, weight)?;
            Ok(g.add(nll, scaled)?)
        }
        None => Ok(nll),
    }
}

/// Posterior probability of the label emission at each lattice cell, from a
/// numeric forward-backward over the current values (no gradients).
fn emission_occupancy(
    g: &Graph,
    lattice: &LogitLattice,
    target: &[u32],
) -> Result<Vec<(usize, usize, f64)>, LossError> {
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let blank = |t: usize, u: usize| g.value(lattice.at(t, u).blank_lp).item();
    let label = |t: usize, u: usize| {
        g.value(lattice.at(t, u).label_lp).data()[label_col(target[u])]
    };
    let lse = |a: f64, b: f64| {
        let m = a.max(b);
        if m.is_finite() {
            m + ((a - m).exp() + (b - m).exp()).ln()
        } else {
            m
        }
    };
    let mut alpha = vec![f64::NEG_INFINITY; t_len * u_len];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = lse(acc, alpha[(t - 1) * u_len + u] + blank(t - 1, u));
            }
            if u > 0 {
                acc = lse(acc, alpha[t * u_len + u - 1] + label(t, u - 1));
            }
            alpha[t * u_len + u] = acc;
        }
    }
    let logz = alpha[t_len * u_len - 1] + blank(t_len - 1, u_len - 1);
    let mut beta = vec![f64::NEG_INFINITY; t_len * u_len];
    beta[t_len * u_len - 1] = blank(t_len - 1, u_len - 1);
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            if t == t_len - 1 && u == u_len - 1 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < t_len {
                acc = lse(acc, beta[(t + 1) * u_len + u] + blank(t, u));
            }
            if u + 1 < u_len {
                acc = lse(acc, beta[t * u_len + u + 1] + label(t, u));
            }
            beta[t * u_len + u] = acc;
        }
    }
    let mut occ = Vec::new();
    for t in 0..t_len {
        for u in 0..u_len - 1 {
            let w = (alpha[t * u_len + u] + label(t, u) + beta[t * u_len + u + 1] - logz).exp();
            occ.push((t, u, w));
        }
    }
    Ok(occ)
}
