//! Full-batch training with Adam.

use std::path::Path;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::MultiViewGraph;
use crate::kv::{parse_flag, KeyValues};
use crate::model::{forward, param_specs, EmbeddingSet, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Minimum decrease of the training loss that resets the patience counter.
pub const MIN_IMPROVEMENT: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 1e-5,
            epochs: 500,
            patience: 50,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

/// Every key understood by [`TrainConfig::from_key_values`].
pub const CONFIG_KEYS: &[&str] = &[
    "aggregator.global_scores",
    "aggregator.variant",
    "encoder.dropout",
    "encoder.heads",
    "encoder.variant",
    "model.dim",
    "objective.infomin",
    "objective.tau",
    "trainer.epochs",
    "trainer.lr",
    "trainer.patience",
    "trainer.seed",
    "trainer.weight_decay",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.model.validate()
    }

    /// Reads dotted keys, falling back to defaults. Returns the config and
    /// the keys that were defaulted.
    pub fn from_key_values(kv: &KeyValues) -> Result<(Self, Vec<String>)> {
        if let Some(unknown) = kv.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key {unknown:?}")));
        }
        let mut cfg = Self::default();
        let defaulted = CONFIG_KEYS
            .iter()
            .filter(|k| kv.get(k).is_none())
            .map(|k| k.to_string())
            .collect();
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("trainer.lr", cfg.lr);
        set!("trainer.weight_decay", cfg.weight_decay);
        set!("trainer.epochs", cfg.epochs);
        set!("trainer.patience", cfg.patience);
        set!("trainer.seed", cfg.seed);
        set!("model.dim", cfg.model.dim);
        set!("encoder.heads", cfg.model.heads);
        set!("encoder.dropout", cfg.model.dropout);
        set!("encoder.variant", cfg.model.encoder);
        set!("aggregator.variant", cfg.model.aggregator);
        set!("objective.tau", cfg.model.objective.tau);
        if let Some(v) = kv.get("objective.infomin") {
            cfg.model.objective.infomin = parse_flag("objective.infomin", v)?;
        }
        if let Some(v) = kv.get("aggregator.global_scores") {
            cfg.model.global_scores = parse_flag("aggregator.global_scores", v)?;
        }
        cfg.validate()?;
        Ok((cfg, defaulted))
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<(Self, Vec<String>)> {
        Self::from_key_values(&KeyValues::parse(text, origin)?)
    }

    /// Every setting as dotted keys.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let m = &self.model;
        kv.insert("aggregator.global_scores", m.global_scores);
        kv.insert("aggregator.variant", m.aggregator);
        kv.insert("encoder.dropout", m.dropout);
        kv.insert("encoder.heads", m.heads);
        kv.insert("encoder.variant", m.encoder);
        kv.insert("model.dim", m.dim);
        kv.insert("objective.infomin", m.objective.infomin);
        kv.insert("objective.tau", m.objective.tau);
        kv.insert("trainer.epochs", self.epochs);
        kv.insert("trainer.lr", self.lr);
        kv.insert("trainer.patience", self.patience);
        kv.insert("trainer.seed", self.seed);
        kv.insert("trainer.weight_decay", self.weight_decay);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_key_values().to_text()
    }

    /// SHA-256 (hex) of the canonical key=value text.
    pub fn hash(&self) -> String {
        hash_text(&self.to_text())
    }
}

pub(crate) fn hash_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = params.into_iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One Adam update. `decay[i]` selects which tensors receive the
/// `weight_decay · param` gradient term.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, {} decay flags, {} moment buffers",
            params.len(),
            grads.len(),
            decay.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(Error::Shape(format!(
                "adam_step: tensor {i} has {} values, gradient {}, moments {}",
                p.len(),
                g.len(),
                state.first_moment[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - AdamState::BETA1.powi(t);
    let c2 = 1.0 - AdamState::BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decay[i] { weight_decay } else { 0.0 };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            let grad = g.data()[k] + wd * *x;
            m[k] = AdamState::BETA1 * m[k] + (1.0 - AdamState::BETA1) * grad;
            v[k] = AdamState::BETA2 * v[k] + (1.0 - AdamState::BETA2) * grad * grad;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + AdamState::EPS);
        }
    }
    Ok(())
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest training loss.
    pub params: ModelParams,
    /// Inference-mode embeddings of `params`.
    pub embeddings: EmbeddingSet,
    /// Training loss `-J` (dropout on) per epoch.
    pub history: Vec<f64>,
    pub best_loss: f64,
    pub best_epoch: usize,
}

/// Fresh parameters for `graph` drawn from the config seed.
pub fn init_params(graph: &MultiViewGraph, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ModelParams::init(graph.num_features(), graph.num_views(), &cfg.model, &mut rng)
}

/// Trains from scratch. Initialization and dropout share one generator
/// seeded with `cfg.seed`, so the outcome is a pure function of the config
/// and the data.
pub fn train(graph: &MultiViewGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(v) = graph.validate().first() {
        return Err(Error::Data(format!("invalid graph: {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(graph.num_features(), graph.num_views(), &cfg.model, &mut rng)?;
    let decay: Vec<bool> = param_specs(graph.num_features(), graph.num_views(), &cfg.model)?
        .iter()
        .map(|s| s.decay)
        .collect();
    let mut adam = AdamState::new(params.tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let out = forward(&mut tape, graph, &vars, &cfg.model, true, &mut rng)?;
        let objective = out.objective;
        let loss = -tape.value(objective).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite { epoch, loss });
        }
        history.push(loss);
        if loss < best.0 - MIN_IMPROVEMENT {
            best = (loss, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        let loss_var = tape.scale(objective, -1.0);
        let grads = tape.backward(loss_var)?;
        let grads = vars.gradients(&grads);
        adam_step(&mut params.tensors_mut(), &grads, &decay, &mut adam, cfg.lr, cfg.weight_decay)?;
        debug!("epoch {epoch}: loss {loss:.6}");
        if stale >= cfg.patience {
            info!("early stop at epoch {epoch}; best loss {:.6} at epoch {}", best.0, best.1);
            break;
        }
    }

    let (best_loss, best_epoch, params) = best;
    let embeddings = params.embed(graph, &cfg.model)?;
    Ok(TrainOutcome {
        params,
        embeddings,
        history,
        best_loss,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut state = AdamState::new([&p]);
        let g = Tensor::zeros(vec![2]);
        adam_step(&mut [&mut p], &[g], &[true], &mut state, 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![0.5]);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::vector(vec![1.0])], &[false], &mut state, 0.001, 0.0).unwrap();
        assert!((p.data()[0] - (0.5 - 0.001)).abs() < 1e-10);
    }

    #[test]
    fn quadratic_descends_monotonically_after_second_step() {
        let mut x = Tensor::vector(vec![1.0]);
        let mut state = AdamState::new([&x]);
        let mut values = vec![];
        for _ in 0..10 {
            let g = Tensor::vector(vec![2.0 * x.data()[0]]);
            adam_step(&mut [&mut x], &[g], &[false], &mut state, 0.1, 0.0).unwrap();
            values.push(x.data()[0].powi(2));
        }
        for w in values[1..].windows(2) {
            assert!(w[1] < w[0], "{values:?}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut state = AdamState::new([&p]);
        let g = Tensor::vector(vec![1.0]);
        assert!(adam_step(&mut [&mut p], &[g], &[false], &mut state, 0.1, 0.0).is_err());
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let (cfg, defaulted) = TrainConfig::from_text("trainer.lr=0.01\n", Path::new("c")).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.model.dim, 64);
        assert!(defaulted.contains(&"model.dim".to_string()));
        assert!(!defaulted.contains(&"trainer.lr".to_string()));
        let (back, none) = TrainConfig::from_text(&cfg.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, cfg);
        assert!(none.is_empty());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn default_hyperparameters() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.weight_decay, 1e-5);
        assert_eq!(cfg.model.objective.tau, 0.7);
        assert_eq!(cfg.model.dropout, 0.6);
        assert_eq!(cfg.model.dim, 64);
    }

    #[test]
    fn bad_config_values_are_rejected() {
        assert!(TrainConfig::from_text("trainer.lr=0\n", Path::new("c")).is_err());
        assert!(TrainConfig::from_text("encoder.dropout=1\n", Path::new("c")).is_err());
        assert!(TrainConfig::from_text("objective.tau=-1\n", Path::new("c")).is_err());
        assert!(TrainConfig::from_text("bogus.key=1\n", Path::new("c")).is_err());
    }
}
