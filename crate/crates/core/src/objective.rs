//! Contrastive objectives.
//!
//! The critic scores a pair of embeddings as the cosine similarity of their
//! projections divided by a temperature. For node `i` and view `r` the
//! positive pair is `(z_i^r, z_i)`. InfoMax negatives are `(z_i^r, z_j)` and
//! `(z_i^r, z_j^r)` for every `j ≠ i`; InfoMin adds `(z_i^r, z_j^k)` for every
//! other view `k` and every node `j`, including `j = i`. The pair loss is the
//! log-probability of the positive among all terms, so it is never positive,
//! and the overall objective `J` averages it over nodes and views. Training
//! minimizes `-J`.

use rand::Rng;

use crate::autodiff::{Tape, Var, COSINE_EPS};
use crate::error::{Error, Result};
use crate::init::glorot_uniform;
use crate::tensor::Tensor;

/// Two-layer projection `p(z) = W2 · ELU(W1 z + b1) + b2`, all layers `d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProjectionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot_uniform(vec![dim, dim], dim, dim, rng),
            b1: Tensor::zeros(vec![dim]),
            w2: glorot_uniform(vec![dim, dim], dim, dim, rng),
            b2: Tensor::zeros(vec![dim]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars::Mlp {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

/// The critic's projection head.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    /// `p(z) = z`; closed-form checks use this.
    Identity,
    Mlp(ProjectionParams),
}

#[derive(Clone, Copy, Debug)]
pub enum ProjectionVars {
    Identity,
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl Projection {
    pub fn register(&self, tape: &mut Tape) -> ProjectionVars {
        match self {
            Projection::Identity => ProjectionVars::Identity,
            Projection::Mlp(p) => p.register(tape),
        }
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Projection::Identity => Ok(z.clone()),
            Projection::Mlp(p) => {
                let h = z.matmul_nt(&p.w1)?.add_row(&p.b1)?;
                let h = h.map(|v| if v > 0.0 { v } else { v.exp_m1() });
                h.matmul_nt(&p.w2)?.add_row(&p.b2)
            }
        }
    }
}

pub fn project(tape: &mut Tape, z: Var, p: &ProjectionVars) -> Result<Var> {
    match *p {
        ProjectionVars::Identity => Ok(z),
        ProjectionVars::Mlp { w1, b1, w2, b2 } => {
            let h = tape.matmul_nt(z, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.elu(h);
            let out = tape.matmul_nt(h, w2)?;
            tape.add_row(out, b2)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub tau: f64,
    /// `false` drops the cross-view negatives (InfoMax only).
    pub infomin: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.7,
            infomin: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + COSINE_EPS)
}

/// Row-wise critic `θ(u_i, v_i) = cos(p(u_i), p(v_i)) / τ`.
pub fn critic(u: &Tensor, v: &Tensor, p: &Projection, tau: f64) -> Result<Vec<f64>> {
    if u.shape() != v.shape() {
        return Err(Error::Shape(format!("critic: {:?} vs {:?}", u.shape(), v.shape())));
    }
    ObjectiveConfig { tau, infomin: true }.validate()?;
    let (pu, pv) = (p.apply(u)?, p.apply(v)?);
    Ok((0..pu.rows()).map(|i| cosine(pu.row(i), pv.row(i)) / tau).collect())
}

/// One pair loss and the number of negative terms in its denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub negatives: usize,
}

fn pair_loss(i: usize, r: usize, projected_views: &[Tensor], projected_fused: &Tensor, tau: f64, infomin: bool) -> PairLoss {
    let anchor = projected_views[r].row(i);
    let n = projected_fused.rows();
    let theta = |other: &[f64]| cosine(anchor, other) / tau;
    let positive = theta(projected_fused.row(i));
    let mut terms = vec![positive];
    for j in (0..n).filter(|&j| j != i) {
        terms.push(theta(projected_fused.row(j)));
        terms.push(theta(projected_views[r].row(j)));
    }
    if infomin {
        for (_, view) in projected_views.iter().enumerate().filter(|&(k, _)| k != r) {
            for j in 0..n {
                terms.push(theta(view.row(j)));
            }
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    PairLoss {
        value: positive - max - denom.ln(),
        negatives: terms.len() - 1,
    }
}

fn check_pair_inputs(i: usize, r: usize, views: &[Tensor], fused: &Tensor) -> Result<()> {
    if r >= views.len() {
        return Err(Error::Index(format!("view {r} of {}", views.len())));
    }
    if i >= fused.rows() {
        return Err(Error::Index(format!("node {i} of {}", fused.rows())));
    }
    if let Some(bad) = views.iter().find(|z| z.shape() != fused.shape()) {
        return Err(Error::Shape(format!(
            "view embedding {:?} vs fused {:?}",
            bad.shape(),
            fused.shape()
        )));
    }
    Ok(())
}

/// InfoMax loss of the positive pair `(z_i^r, z_i)` given that view's
/// embeddings `view` and the fused embeddings `fused`.
pub fn infomax_pair_loss(i: usize, view: &Tensor, fused: &Tensor, p: &Projection, tau: f64) -> Result<f64> {
    check_pair_inputs(i, 0, std::slice::from_ref(view), fused)?;
    ObjectiveConfig { tau, infomin: false }.validate()?;
    let pv = [p.apply(view)?];
    let pf = p.apply(fused)?;
    Ok(pair_loss(i, 0, &pv, &pf, tau, false).value)
}

/// Pair loss with the cross-view negatives of every other view when
/// `cfg.infomin` is set; identical to [`infomax_pair_loss`] otherwise.
pub fn full_pair_loss(i: usize, r: usize, views: &[Tensor], fused: &Tensor, p: &Projection, cfg: &ObjectiveConfig) -> Result<PairLoss> {
    check_pair_inputs(i, r, views, fused)?;
    cfg.validate()?;
    let pv = views.iter().map(|z| p.apply(z)).collect::<Result<Vec<_>>>()?;
    let pf = p.apply(fused)?;
    Ok(pair_loss(i, r, &pv, &pf, cfg.tau, cfg.infomin))
}

/// Negative terms per positive pair: `2(N-1)`, plus `(|R|-1)·N` with InfoMin.
pub fn negatives_per_pair(num_nodes: usize, num_views: usize, infomin: bool) -> usize {
    let base = 2 * num_nodes.saturating_sub(1);
    if infomin {
        base + num_views.saturating_sub(1) * num_nodes
    } else {
        base
    }
}

/// Batched objective `J` on the tape (a one-element tensor). Every pair
/// loss is evaluated at once from `N×N` similarity matrices per view pair.
pub fn objective(tape: &mut Tape, views: &[Var], fused: Var, p: &ProjectionVars, cfg: &ObjectiveConfig) -> Result<Var> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Shape("objective needs at least one view".into()));
    }
    let shape = tape.value(fused).shape().to_vec();
    if let Some(&bad) = views.iter().find(|&&v| tape.value(v).shape() != shape.as_slice()) {
        return Err(Error::Shape(format!(
            "view embedding {:?} vs fused {shape:?}",
            tape.value(bad).shape()
        )));
    }
    let n = tape.value(fused).rows();
    let num_views = views.len();
    let inv_tau = 1.0 / cfg.tau;

    let projected: Vec<Var> = views
        .iter()
        .map(|&z| project(tape, z, p))
        .collect::<Result<_>>()?;
    let projected_fused = project(tape, fused, p)?;

    let units: Vec<Var> = projected
        .iter()
        .map(|&z| tape.row_normalize(z))
        .collect::<Result<_>>()?;
    let unit_fused = tape.row_normalize(projected_fused)?;

    let mut total: Option<Var> = None;
    for r in 0..num_views {
        let anchor = tape.scale(units[r], inv_tau);
        let to_fused = tape.matmul_nt(anchor, unit_fused)?;
        let within = tape.matmul_nt(anchor, units[r])?;
        let mut blocks = vec![to_fused, within];
        if cfg.infomin {
            for (k, &other) in units.iter().enumerate() {
                if k != r {
                    blocks.push(tape.matmul_nt(anchor, other)?);
                }
            }
        }
        let width = blocks.len() * n;
        let mut mask = vec![true; n * width];
        for i in 0..n {
            // (z_i^r, z_i^r) is not a negative
            mask[i * width + n + i] = false;
        }
        let all = tape.concat_cols(&blocks)?;
        let lse = tape.row_logsumexp(all, &mask)?;
        let positive = tape.diagonal(to_fused)?;
        let per_node = tape.sub(positive, lse)?;
        let view_total = tape.sum(per_node);
        total = Some(match total {
            None => view_total,
            Some(t) => tape.add(t, view_total)?,
        });
    }
    let total = total.expect("at least one view");
    Ok(tape.scale(total, 1.0 / (n * num_views) as f64))
}

/// Value of `J` for fixed embeddings.
pub fn objective_value(views: &[Tensor], fused: &Tensor, p: &Projection, cfg: &ObjectiveConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = views.iter().map(|z| tape.leaf(z.clone())).collect();
    let f = tape.leaf(fused.clone());
    let pv = p.register(&mut tape);
    let j = objective(&mut tape, &vars, f, &pv, cfg)?;
    Ok(tape.value(j).item())
}
