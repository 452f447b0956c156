//! Multi-view stochastic block model generator.
//!
//! In complementary mode each cluster id is written in base `b`, the
//! smallest base with `b^views ≥ c`. View `v` uses `p_out` only for cluster
//! pairs whose `v`-th digit differs and `p_in` otherwise, so no single view
//! separates every pair of clusters while their union does.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{MultiViewGraph, ViewGraph};
use crate::io::save_dataset;
use crate::kv::{parse_flag, KeyValues};
use crate::tensor::Tensor;

pub const SPEC_FILE: &str = "spec.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub c: usize,
    pub views: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub complementary: bool,
    pub attr_dim: usize,
    pub attr_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 100,
            c: 3,
            views: 2,
            p_in: 0.1,
            p_out: 0.01,
            complementary: true,
            attr_dim: 16,
            attr_noise: 1.0,
            seed: 0,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "attr_dim",
    "attr_noise",
    "c",
    "complementary",
    "n",
    "p_in",
    "p_out",
    "seed",
    "views",
];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::Config(format!("c must be at least 2, got {}", self.c)));
        }
        if self.n < self.c {
            return Err(Error::Config(format!("n = {} is smaller than c = {}", self.n, self.c)));
        }
        if self.views == 0 {
            return Err(Error::Config("views must be at least 1".into()));
        }
        if self.attr_dim == 0 {
            return Err(Error::Config("attr_dim must be at least 1".into()));
        }
        if !(self.attr_noise >= 0.0 && self.attr_noise.is_finite()) {
            return Err(Error::Config(format!("attr_noise must be ≥ 0, got {}", self.attr_noise)));
        }
        if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) {
            return Err(Error::Config(format!(
                "edge probabilities must lie in [0, 1], got p_in = {}, p_out = {}",
                self.p_in, self.p_out
            )));
        }
        if self.p_out >= self.p_in {
            return Err(Error::Config(format!(
                "constraint p_out < p_in violated: p_out = {}, p_in = {}",
                self.p_out, self.p_in
            )));
        }
        Ok(())
    }

    /// Reads a spec; missing keys keep their defaults, unknown keys are rejected.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        if let Some(unknown) = kv.keys().find(|k| !SPEC_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown spec key {unknown:?}")));
        }
        let mut s = Self::default();
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("n", s.n);
        set!("c", s.c);
        set!("views", s.views);
        set!("p_in", s.p_in);
        set!("p_out", s.p_out);
        set!("attr_dim", s.attr_dim);
        set!("attr_noise", s.attr_noise);
        set!("seed", s.seed);
        if let Some(v) = kv.get("complementary") {
            s.complementary = parse_flag("complementary", v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text, origin)?)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("n", self.n);
        kv.insert("c", self.c);
        kv.insert("views", self.views);
        kv.insert("p_in", self.p_in);
        kv.insert("p_out", self.p_out);
        kv.insert("complementary", self.complementary);
        kv.insert("attr_dim", self.attr_dim);
        kv.insert("attr_noise", self.attr_noise);
        kv.insert("seed", self.seed);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_key_values().to_text()
    }

    /// Planted cluster of every node: contiguous blocks whose sizes differ
    /// by at most one.
    pub fn clusters(&self) -> Vec<usize> {
        let (base, extra) = (self.n / self.c, self.n % self.c);
        (0..self.c)
            .flat_map(|k| std::iter::repeat_n(k, base + usize::from(k < extra)))
            .collect()
    }

    /// Whether view `v` draws edges between clusters `a` and `b` with `p_out`.
    pub fn separates(&self, view: usize, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        if !self.complementary {
            return true;
        }
        let base = digit_base(self.c, self.views);
        let scale = base.pow(view as u32);
        (a / scale) % base != (b / scale) % base
    }
}

fn digit_base(c: usize, views: usize) -> usize {
    let mut b: usize = 2;
    while b.checked_pow(views as u32).is_none_or(|p| p < c) {
        b += 1;
    }
    b
}

/// Samples a graph with labels set to the planted clusters.
pub fn generate(spec: &SynthSpec) -> Result<MultiViewGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = spec.clusters();
    let n = spec.n;

    let mut views = Vec::with_capacity(spec.views);
    for v in 0..spec.views {
        let sep: Vec<bool> = (0..spec.c * spec.c)
            .map(|k| spec.separates(v, k / spec.c, k % spec.c))
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let p = if sep[labels[i] * spec.c + labels[j]] {
                    spec.p_out
                } else {
                    spec.p_in
                };
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        views.push(ViewGraph::from_edges(format!("view{v}"), n, &edges)?);
    }

    let map: Vec<f64> = (0..spec.c * spec.attr_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let map = Tensor::new(vec![spec.c, spec.attr_dim], map)?;
    let noise = Normal::new(0.0, spec.attr_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut latent = Tensor::zeros(vec![n, spec.c]);
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..spec.c {
            let centroid = if k == y { 1.0 } else { 0.0 };
            latent.data_mut()[i * spec.c + k] = centroid + noise.sample(&mut rng);
        }
    }
    let attributes = latent.matmul(&map)?;
    MultiViewGraph::new(views, attributes, Some(labels))
}

/// Writes the dataset files; see [`crate::io::save_dataset`].
pub fn save(g: &MultiViewGraph, dir: &Path) -> Result<Vec<PathBuf>> {
    save_dataset(g, dir)
}

/// Persists the spec next to a saved dataset.
pub fn write_spec(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(SPEC_FILE);
    fs::write(&path, spec.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extreme_probabilities_give_cliques() {
        let spec = SynthSpec {
            n: 12,
            c: 3,
            p_in: 1.0,
            p_out: 0.0,
            complementary: false,
            ..SynthSpec::default()
        };
        let g = generate(&spec).unwrap();
        let labels = g.labels().unwrap();
        for view in g.views() {
            for i in 0..12 {
                let nbrs = view.neighbors(i).unwrap();
                let same: Vec<usize> = (0..12).filter(|&j| labels[j] == labels[i]).collect();
                assert_eq!(nbrs, same.as_slice());
            }
        }
    }

    #[test]
    fn clusters_are_balanced() {
        let spec = SynthSpec {
            n: 10,
            c: 3,
            ..SynthSpec::default()
        };
        assert_eq!(spec.clusters(), vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn complementary_digits_split_separations() {
        let spec = SynthSpec {
            c: 4,
            views: 2,
            ..SynthSpec::default()
        };
        assert!(spec.separates(0, 0, 1) && !spec.separates(1, 0, 1));
        assert!(!spec.separates(0, 0, 2) && spec.separates(1, 0, 2));
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert!(spec.separates(0, a, b) || spec.separates(1, a, b));
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SynthSpec {
            p_in: 0.01,
            p_out: 0.1,
            ..SynthSpec::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("p_out < p_in"));
        assert!(SynthSpec { c: 1, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { p_in: 1.5, ..SynthSpec::default() }.validate().is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SynthSpec {
            n: 37,
            p_in: 0.25,
            complementary: false,
            seed: 9,
            ..SynthSpec::default()
        };
        assert_eq!(SynthSpec::from_text(&spec.to_text(), Path::new("x")).unwrap(), spec);
    }
}
