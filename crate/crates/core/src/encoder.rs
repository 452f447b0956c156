//! Per-view node encoders.
//!
//! The attention encoder is one multi-head graph attention layer. For head
//! `k` with projected features `h = x·M_k`, the score of entry `(i, j)` is
//! `LeakyReLU(a_src·h_i + a_dst·h_j)`, normalized by a softmax over `i`'s
//! neighborhood, and node `i`'s output is `ReLU(Σ_j α_ij h_j)`. Heads are
//! concatenated. The mean and max variants swap the weighted sum for an
//! unweighted mean or a coordinatewise max and ignore the attention vectors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::ViewGraph;
use crate::init::glorot_uniform;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EncoderVariant {
    #[default]
    Attention,
    Mean,
    Max,
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::Attention => "attention",
            EncoderVariant::Mean => "mean",
            EncoderVariant::Max => "max",
        })
    }
}

impl FromStr for EncoderVariant {
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

/// Learnable parameters of one view's encoder.
///
/// `weight` is `F×d`; columns `k·d_head..(k+1)·d_head` hold the transposed
/// transformation matrix of head `k`. Row `k` of `attention` (`K×2·d_head`)
/// is that head's weight vector: the first half scores the center node,
/// the second half the neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEncoderParams {
    pub weight: Tensor,
    pub attention: Tensor,
}

impl ViewEncoderParams {
    pub fn init<R: Rng + ?Sized>(features: usize, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let head_dim = head_dim(dim, heads)?;
        let weight = glorot_uniform(vec![features, dim], features, dim, rng);
        let attention = glorot_uniform(vec![heads, 2 * head_dim], 2 * head_dim, 1, rng);
        Ok(Self { weight, attention })
    }

    pub fn heads(&self) -> usize {
        self.attention.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.attention.cols() / 2
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            weight: tape.leaf(self.weight.clone()),
            attention: tape.leaf(self.attention.clone()),
            heads: self.heads(),
        }
    }

    /// Inference-mode encoding (no dropout) of one view.
    pub fn encode(&self, view: &ViewGraph, x: &Tensor, variant: EncoderVariant) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = encode_view(&mut tape, view, xv, &vars, variant, 0.0, false, &mut rng)?;
        Ok(tape.value(z).clone())
    }

    /// Attention coefficients of one head, aligned with the view's entry order.
    pub fn attention_coefficients(&self, view: &ViewGraph, x: &Tensor, head: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let alpha = attention_coefficients(&mut tape, view, xv, &vars, head)?;
        Ok(tape.value(alpha).clone())
    }
}

pub(crate) fn head_dim(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dimension {dim} must be a positive multiple of the head count {heads}"
        )));
    }
    Ok(dim / heads)
}

/// Tape handles for a [`ViewEncoderParams`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub weight: Var,
    pub attention: Var,
    pub heads: usize,
}

fn check_nodes(tape: &Tape, view: &ViewGraph, x: Var) -> Result<()> {
    let n = tape.value(x).rows();
    if view.num_nodes() != n {
        return Err(Error::Shape(format!(
            "view {:?} has {} nodes, features have {n} rows",
            view.name(),
            view.num_nodes()
        )));
    }
    Ok(())
}

/// Attention coefficients `α` of one head from already projected features
/// `h` (`N×d_head`).
fn head_attention(tape: &mut Tape, view: &ViewGraph, h: Var, params: &EncoderVars, head: usize) -> Result<Var> {
    let hd = tape.value(h).cols();
    let src = tape.slice(params.attention, head..head + 1, 0..hd)?;
    let dst = tape.slice(params.attention, head..head + 1, hd..2 * hd)?;
    let s_src = tape.matmul_nt(h, src)?;
    let s_dst = tape.matmul_nt(h, dst)?;
    let e_src = tape.gather_rows(s_src, view.center_ids())?;
    let e_dst = tape.gather_rows(s_dst, view.neighbor_ids())?;
    let scores = tape.add(e_src, e_dst)?;
    let scores = tape.leaky_relu(scores);
    tape.segment_softmax(scores, view.offsets())
}

/// Normalized attention coefficients for `head`, one per stored entry of `view`.
pub fn attention_coefficients(tape: &mut Tape, view: &ViewGraph, x: Var, params: &EncoderVars, head: usize) -> Result<Var> {
    check_nodes(tape, view, x)?;
    if head >= params.heads {
        return Err(Error::Index(format!("head {head} of {}", params.heads)));
    }
    let d = tape.value(params.weight).cols();
    let hd = d / params.heads;
    let projected = tape.matmul(x, params.weight)?;
    let h = tape.slice(projected, 0..tape.value(x).rows(), head * hd..(head + 1) * hd)?;
    head_attention(tape, view, h, params, head)
}

/// Encodes one view into an `N×d` matrix. Dropout is applied to the input
/// attributes when `training`.
#[allow(clippy::too_many_arguments)]
pub fn encode_view<R: Rng + ?Sized>(
    tape: &mut Tape,
    view: &ViewGraph,
    x: Var,
    params: &EncoderVars,
    variant: EncoderVariant,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_nodes(tape, view, x)?;
    let n = tape.value(x).rows();
    let x = tape.dropout(x, dropout, training, rng)?;
    let projected = tape.matmul(x, params.weight)?;
    match variant {
        EncoderVariant::Attention => {
            let d = tape.value(projected).cols();
            let hd = d / params.heads;
            let mut outputs = Vec::with_capacity(params.heads);
            for head in 0..params.heads {
                let h = tape.slice(projected, 0..n, head * hd..(head + 1) * hd)?;
                let alpha = head_attention(tape, view, h, params, head)?;
                let rows = tape.gather_rows(h, view.neighbor_ids())?;
                let agg = tape.segment_weighted_sum(alpha, rows, view.offsets())?;
                outputs.push(tape.relu(agg));
            }
            if outputs.len() == 1 {
                Ok(outputs[0])
            } else {
                tape.concat_cols(&outputs)
            }
        }
        EncoderVariant::Mean => {
            let rows = tape.gather_rows(projected, view.neighbor_ids())?;
            let agg = tape.segment_mean(rows, view.offsets())?;
            Ok(tape.relu(agg))
        }
        EncoderVariant::Max => {
            let rows = tape.gather_rows(projected, view.neighbor_ids())?;
            let agg = tape.segment_max(rows, view.offsets())?;
            Ok(tape.relu(agg))
        }
    }
}
