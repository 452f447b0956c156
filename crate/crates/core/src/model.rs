//! The full embedding model: one encoder per view, a shared fusion module
//! and a shared critic projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{aggregate, AggregatorParams, AggregatorVariant, AggregatorVars};
use crate::autodiff::{Gradients, Tape, Var};
use crate::encoder::{encode_view, head_dim, EncoderVariant, EncoderVars, ViewEncoderParams};
use crate::error::{Error, Result};
use crate::graph::MultiViewGraph;
use crate::objective::{objective, ObjectiveConfig, ProjectionParams, ProjectionVars};
use crate::tensor::Tensor;

/// Architecture and objective settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub encoder: EncoderVariant,
    pub aggregator: AggregatorVariant,
    /// Average attention scores over nodes before the softmax (one weight per view).
    pub global_scores: bool,
    pub objective: ObjectiveConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            dropout: 0.6,
            encoder: EncoderVariant::Attention,
            aggregator: AggregatorVariant::Attention,
            global_scores: false,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        head_dim(self.dim, self.heads)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.objective.validate()
    }
}

/// All learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoders: Vec<ViewEncoderParams>,
    pub aggregator: AggregatorParams,
    pub projection: ProjectionParams,
}

/// Name, shape and weight-decay eligibility of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

/// Parameter layout for a graph with `features` attributes and `views`
/// views. Weight decay covers weight matrices only, never biases or
/// attention vectors.
pub fn param_specs(features: usize, views: usize, cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    let hd = head_dim(cfg.dim, cfg.heads)?;
    let d = cfg.dim;
    let spec = |name: String, shape: Vec<usize>, decay: bool| ParamSpec { name, shape, decay };
    let mut out = Vec::with_capacity(2 * views + 7);
    for r in 0..views {
        out.push(spec(format!("encoder.{r}.weight"), vec![features, d], true));
        out.push(spec(format!("encoder.{r}.attention"), vec![cfg.heads, 2 * hd], false));
    }
    out.push(spec("aggregator.weight".into(), vec![d, d], true));
    out.push(spec("aggregator.bias".into(), vec![d], false));
    out.push(spec("aggregator.query".into(), vec![d], false));
    out.push(spec("projection.w1".into(), vec![d, d], true));
    out.push(spec("projection.b1".into(), vec![d], false));
    out.push(spec("projection.w2".into(), vec![d, d], true));
    out.push(spec("projection.b2".into(), vec![d], false));
    Ok(out)
}

/// Scalar parameter count: `|R|·d·(F + 2) + 3d² + 4d`.
pub fn param_count(features: usize, views: usize, dim: usize) -> usize {
    views * dim * (features + 2) + 3 * dim * dim + 4 * dim
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases, drawn in a fixed order.
    pub fn init<R: Rng + ?Sized>(features: usize, views: usize, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if views == 0 || features == 0 {
            return Err(Error::Config("model needs at least one view and one feature".into()));
        }
        let encoders = (0..views)
            .map(|_| ViewEncoderParams::init(features, cfg.dim, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let aggregator = AggregatorParams::init(cfg.dim, rng);
        let projection = ProjectionParams::init(cfg.dim, rng);
        Ok(Self {
            encoders,
            aggregator,
            projection,
        })
    }

    /// Tensors in [`param_specs`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for e in &self.encoders {
            out.push(&e.weight);
            out.push(&e.attention);
        }
        let a = &self.aggregator;
        let p = &self.projection;
        out.extend([&a.weight, &a.bias, &a.query, &p.w1, &p.b1, &p.w2, &p.b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for e in &mut self.encoders {
            out.push(&mut e.weight);
            out.push(&mut e.attention);
        }
        let a = &mut self.aggregator;
        let p = &mut self.projection;
        out.extend([
            &mut a.weight,
            &mut a.bias,
            &mut a.query,
            &mut p.w1,
            &mut p.b1,
            &mut p.w2,
            &mut p.b2,
        ]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Builds parameters from named tensors, checking names and shapes
    /// against the expected layout.
    pub fn from_named(mut named: Vec<(String, Tensor)>, specs: &[ParamSpec]) -> Result<Self> {
        if named.len() != specs.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        for ((name, t), spec) in named.iter().zip(specs) {
            if *name != spec.name {
                return Err(Error::Shape(format!("expected tensor {:?}, found {name:?}", spec.name)));
            }
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let mut it = named.drain(..).map(|(_, t)| t);
        let mut next = || it.next().expect("count checked");
        let views = (specs.len() - 7) / 2;
        let encoders = (0..views)
            .map(|_| ViewEncoderParams {
                weight: next(),
                attention: next(),
            })
            .collect();
        let aggregator = AggregatorParams {
            weight: next(),
            bias: next(),
            query: next(),
        };
        let projection = ProjectionParams {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        Ok(Self {
            encoders,
            aggregator,
            projection,
        })
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let encoders = self.encoders.iter().map(|e| e.register(tape)).collect();
        let aggregator = self.aggregator.register(tape);
        let projection = self.projection.register(tape);
        ModelVars {
            encoders,
            aggregator,
            projection,
        }
    }

    /// Runs the model without dropout and returns all embeddings.
    pub fn embed(&self, graph: &MultiViewGraph, cfg: &ModelConfig) -> Result<EmbeddingSet> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, graph, &vars, cfg, false, &mut rng)?;
        Ok(out.embeddings(&tape))
    }

    /// Objective `J` (dropout off).
    pub fn objective_value(&self, graph: &MultiViewGraph, cfg: &ModelConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, graph, &vars, cfg, false, &mut rng)?;
        Ok(tape.value(out.objective).item())
    }
}

/// Tape handles for [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoders: Vec<EncoderVars>,
    pub aggregator: AggregatorVars,
    pub projection: ProjectionVars,
}

impl ModelVars {
    /// Handles in [`param_specs`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.push(e.weight);
            out.push(e.attention);
        }
        let a = &self.aggregator;
        out.extend([a.weight, a.bias, a.query]);
        match self.projection {
            ProjectionVars::Mlp { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2]),
            ProjectionVars::Identity => {}
        }
        out
    }

    /// Gradients in [`param_specs`] order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.all().into_iter().map(|v| grads.tensor(v)).collect()
    }
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub views: Vec<Var>,
    pub fused: Var,
    pub view_weights: Option<Var>,
    pub objective: Var,
}

impl Forward {
    pub fn embeddings(&self, tape: &Tape) -> EmbeddingSet {
        EmbeddingSet {
            views: self.views.iter().map(|&v| tape.value(v).clone()).collect(),
            fused: tape.value(self.fused).clone(),
            view_weights: self.view_weights.map(|b| tape.value(b).clone()),
        }
    }
}

/// Per-view matrices `Z^r`, the fused matrix `Z` and, for attention fusion,
/// the `N×|R|` view weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub views: Vec<Tensor>,
    pub fused: Tensor,
    pub view_weights: Option<Tensor>,
}

/// Encodes every view, fuses, and evaluates the objective `J`.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    graph: &MultiViewGraph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Forward> {
    if vars.encoders.len() != graph.num_views() {
        return Err(Error::Shape(format!(
            "model has {} view encoders, graph has {} views",
            vars.encoders.len(),
            graph.num_views()
        )));
    }
    let x = tape.leaf(graph.attributes().clone());
    let views = graph
        .views()
        .iter()
        .zip(&vars.encoders)
        .map(|(view, enc)| encode_view(tape, view, x, enc, cfg.encoder, cfg.dropout, training, rng))
        .collect::<Result<Vec<_>>>()?;
    let (fused, view_weights) = aggregate(tape, &views, &vars.aggregator, cfg.aggregator, cfg.global_scores)?;
    let objective = objective(tape, &views, fused, &vars.projection, &cfg.objective)?;
    Ok(Forward {
        views,
        fused,
        view_weights,
        objective,
    })
}
