//! Fusion of per-view embeddings into one matrix.
//!
//! Attention fusion scores each view embedding `z_i^r` with
//! `qᵀ tanh(W z_i^r + b)`, turns the scores into per-node view weights
//! `β_i` with a softmax across views and returns `z_i = Σ_r β_i^r z_i^r`.
//! With `global_scores` the scores are first averaged over all nodes, giving
//! one weight per view shared by every node.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::glorot_uniform;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AggregatorVariant {
    #[default]
    Attention,
    Mean,
    Max,
}

impl fmt::Display for AggregatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregatorVariant::Attention => "attention",
            AggregatorVariant::Mean => "mean",
            AggregatorVariant::Max => "max",
        })
    }
}

impl FromStr for AggregatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!(
                "unknown operator {other:?} (expected attention, mean or max)"
            ))),
        }
    }
}

/// Shared across views: `weight` is `d×d` (applied as `W z`), `bias` and
/// `query` have length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub query: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AggregatorVars {
    pub weight: Var,
    pub bias: Var,
    pub query: Var,
}

impl AggregatorParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(vec![dim, dim], dim, dim, rng),
            bias: Tensor::zeros(vec![dim]),
            query: glorot_uniform(vec![dim], dim, 1, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> AggregatorVars {
        AggregatorVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            query: tape.leaf(self.query.clone()),
        }
    }
}

/// `N×|R|` view scores. Per node unless `global_scores`, in which case each
/// column is replaced by its mean.
pub fn view_scores(tape: &mut Tape, views: &[Var], params: &AggregatorVars, global_scores: bool) -> Result<Var> {
    check_same_shapes(tape, views)?;
    let d = tape.value(params.query).len();
    let query = tape.reshape(params.query, vec![1, d])?;
    let mut columns = Vec::with_capacity(views.len());
    for &z in views {
        let t = tape.matmul_nt(z, params.weight)?;
        let t = tape.add_row(t, params.bias)?;
        let t = tape.tanh(t);
        columns.push(tape.matmul_nt(t, query)?);
    }
    let scores = if columns.len() == 1 {
        columns[0]
    } else {
        tape.concat_cols(&columns)?
    };
    if global_scores {
        let n = tape.value(scores).rows();
        let mean = tape.mean_rows(scores)?;
        tape.broadcast_rows(mean, n)
    } else {
        Ok(scores)
    }
}

/// Softmax across views, row by row.
pub fn view_weights(tape: &mut Tape, scores: Var) -> Result<Var> {
    tape.row_softmax(scores)
}

/// `z_i = Σ_r β_i^r z_i^r`.
pub fn fuse(tape: &mut Tape, views: &[Var], beta: Var) -> Result<Var> {
    check_same_shapes(tape, views)?;
    let (n, r) = (tape.value(beta).rows(), tape.value(beta).cols());
    if r != views.len() || n != tape.value(views[0]).rows() {
        return Err(Error::Shape(format!(
            "fuse: weights are [{n}x{r}] for {} views of {} rows",
            views.len(),
            tape.value(views[0]).rows()
        )));
    }
    let mut acc: Option<Var> = None;
    for (k, &z) in views.iter().enumerate() {
        let w = tape.slice(beta, 0..n, k..k + 1)?;
        let term = tape.scale_rows(z, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one view"))
}

pub fn fuse_mean(tape: &mut Tape, views: &[Var]) -> Result<Var> {
    check_same_shapes(tape, views)?;
    if views.len() == 1 {
        return Ok(views[0]);
    }
    let mut acc = views[0];
    for &z in &views[1..] {
        acc = tape.add(acc, z)?;
    }
    Ok(tape.scale(acc, 1.0 / views.len() as f64))
}

pub fn fuse_max(tape: &mut Tape, views: &[Var]) -> Result<Var> {
    check_same_shapes(tape, views)?;
    if views.len() == 1 {
        return Ok(views[0]);
    }
    tape.element_max(views)
}

/// Runs the configured fusion. Returns the fused matrix and, for attention
/// fusion, the `N×|R|` view weights.
pub fn aggregate(
    tape: &mut Tape,
    views: &[Var],
    params: &AggregatorVars,
    variant: AggregatorVariant,
    global_scores: bool,
) -> Result<(Var, Option<Var>)> {
    match variant {
        AggregatorVariant::Attention => {
            let scores = view_scores(tape, views, params, global_scores)?;
            let beta = view_weights(tape, scores)?;
            Ok((fuse(tape, views, beta)?, Some(beta)))
        }
        AggregatorVariant::Mean => Ok((fuse_mean(tape, views)?, None)),
        AggregatorVariant::Max => Ok((fuse_max(tape, views)?, None)),
    }
}

fn check_same_shapes(tape: &Tape, views: &[Var]) -> Result<()> {
    let first = views
        .first()
        .ok_or_else(|| Error::Shape("no view embeddings to fuse".into()))?;
    let shape = tape.value(*first).shape();
    if let Some(bad) = views.iter().find(|&&v| tape.value(v).shape() != shape) {
        return Err(Error::Shape(format!(
            "view embeddings differ in shape: {shape:?} vs {:?}",
            tape.value(*bad).shape()
        )));
    }
    Ok(())
}
