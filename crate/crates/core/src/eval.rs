//! Downstream probes: logistic-regression node classification and k-means
//! clustering, repeated over independent splits.

use std::fmt;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;
pub const DEFAULT_RUNS: usize = 50;
pub const DEFAULT_RESTARTS: usize = 10;

/// L2 penalty of the classification probe.
pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_TOLERANCE: f64 = 1e-5;
pub const PROBE_MAX_ITERS: usize = 2000;

const LLOYD_MAX_ITERS: usize = 300;

/// Splits node ids into sorted `(train, test)` lists. With labels the split
/// is stratified: every class keeps `round(ratio · size)` members for
/// training, clamped so both sides get at least one.
pub fn split_nodes(n: usize, labels: Option<&[usize]>, train_ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("train ratio must lie in (0, 1), got {train_ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match labels {
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} nodes", labels.len())));
            }
            let classes = labels.iter().max().map_or(0, |&m| m + 1);
            let mut groups = vec![Vec::new(); classes];
            for (i, &y) in labels.iter().enumerate() {
                groups[y].push(i);
            }
            groups.retain(|g| !g.is_empty());
            if let Some(small) = groups.iter().find(|g| g.len() < 2) {
                return Err(Error::Data(format!(
                    "class {} has a single member; stratified splitting needs at least 2",
                    labels[small[0]]
                )));
            }
            groups
        }
        None => {
            if n < 2 {
                return Err(Error::Data(format!("cannot split {n} nodes")));
            }
            vec![(0..n).collect()]
        }
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        let k = ((train_ratio * g.len() as f64).round() as usize).clamp(1, g.len() - 1);
        train.extend_from_slice(&g[..k]);
        test.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Multinomial logistic regression fitted by full-batch gradient descent
/// with backtracking line search.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    /// `d×C`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

struct Probe<'a> {
    /// Row-major `n×d` design matrix.
    x: Vec<f64>,
    y: &'a [usize],
    classes: usize,
    dim: usize,
}

impl Probe<'_> {
    /// Parameters are packed as `W` (row-major `d×C`) followed by `b`.
    fn loss_grad(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (d, c) = (self.dim, self.classes);
        let rows = self.y.len();
        let n = rows as f64;
        let (w, b) = theta.split_at(d * c);
        let mut logits = vec![0.0; rows * c];
        gemm(rows, d, c, &self.x, false, w, false, &mut logits, false);
        let mut loss = 0.0;
        for (row, &yi) in logits.chunks_mut(c).zip(self.y) {
            for (v, bl) in row.iter_mut().zip(b) {
                *v += bl;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[yi];
            // The row becomes the residual `(softmax - onehot) / n`.
            for (l, v) in row.iter_mut().enumerate() {
                *v = ((*v - lse).exp() - if l == yi { 1.0 } else { 0.0 }) / n;
            }
        }
        let sq: f64 = w.iter().map(|v| v * v).sum();
        if let Some(g) = grad {
            let (gw, gb) = g.split_at_mut(d * c);
            gemm(d, rows, c, &self.x, true, &logits, false, gw, false);
            for (gk, wk) in gw.iter_mut().zip(w) {
                *gk += PROBE_L2 * wk;
            }
            gb.fill(0.0);
            for row in logits.chunks(c) {
                for (g, r) in gb.iter_mut().zip(row) {
                    *g += r;
                }
            }
        }
        loss / n + 0.5 * PROBE_L2 * sq
    }
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Shape(format!("{} rows with {} labels", x.len(), y.len())));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= classes) {
            return Err(Error::Index(format!("label {bad} with {classes} classes")));
        }
        if y.iter().all(|&v| v == y[0]) {
            return Err(Error::Data("training set holds a single class".into()));
        }
        let probe = Probe {
            x: x.concat(),
            y,
            classes,
            dim,
        };
        let size = dim * classes + classes;
        let mut theta = vec![0.0; size];
        let mut grad = vec![0.0; size];
        let mut trial = vec![0.0; size];
        let mut trial_grad = vec![0.0; size];
        let mut loss = probe.loss_grad(&theta, Some(&mut grad));
        let mut step = 1.0;
        let mut iterations = 0;
        let mut norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        while iterations < PROBE_MAX_ITERS && norm >= PROBE_TOLERANCE {
            step *= 2.0;
            loop {
                for ((t, p), g) in trial.iter_mut().zip(&theta).zip(&grad) {
                    *t = p - step * g;
                }
                let f = probe.loss_grad(&trial, Some(&mut trial_grad));
                if f <= loss - 1e-4 * step * norm * norm || step < 1e-12 {
                    loss = f;
                    break;
                }
                step *= 0.5;
            }
            std::mem::swap(&mut theta, &mut trial);
            std::mem::swap(&mut grad, &mut trial_grad);
            norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            iterations += 1;
        }
        let bias = theta.split_off(dim * classes);
        Ok(Self {
            weight: Tensor::new(vec![dim, classes], theta)?,
            bias,
            iterations,
            grad_norm: norm,
        })
    }

    /// Argmax class per row; ties go to the lowest class id.
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        let c = self.bias.len();
        let w = self.weight.data();
        x.iter()
            .map(|xi| {
                let mut best = (0, f64::NEG_INFINITY);
                for l in 0..c {
                    let v = self.bias[l] + xi.iter().enumerate().map(|(k, xk)| xk * w[k * c + l]).sum::<f64>();
                    if v > best.1 {
                        best = (l, v);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// Fits the probe on the training rows and predicts the test rows.
pub fn logistic_regression(train_x: &[Vec<f64>], train_y: &[usize], test_x: &[Vec<f64>], classes: usize) -> Result<Vec<usize>> {
    let model = LogisticModel::fit(train_x, train_y, classes)?;
    if let Some(r) = test_x.iter().find(|r| r.len() != model.weight.rows()) {
        return Err(Error::Shape(format!(
            "test rows have {} features, model expects {}",
            r.len(),
            model.weight.rows()
        )));
    }
    Ok(model.predict(test_x))
}

/// `(macro_f1, micro_f1)`. Macro averages per-class F1 over the classes that
/// occur in either labeling; a class that is never predicted scores 0.
pub fn f1_scores(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&v| v >= classes) {
        return Err(Error::Index(format!("label {bad} with {classes} classes")));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let present: Vec<usize> = (0..classes).filter(|&c| tp[c] + fp[c] + fn_[c] > 0).collect();
    let macro_f1 = present.iter().map(|&c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / present.len() as f64;
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok((macro_f1, micro_f1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    /// `k×d`
    pub centroids: Tensor,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centers = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(points: &Tensor, centers: &[Vec<f64>], assignment: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, a) in assignment.iter_mut().enumerate() {
        let row = points.row(i);
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(row, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        *a = best.0;
        inertia += best.1;
    }
    inertia
}

fn lloyd(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let (n, d) = (points.rows(), points.cols());
    let mut centers = plus_plus(points, k, rng);
    let mut assignment = vec![0; n];
    let mut inertia = assign(points, &centers, &mut assignment);
    let mut trace = vec![inertia];
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = sq_dist(points.row(i), &centers[assignment[i]]);
                        let dj = sq_dist(points.row(j), &centers[assignment[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("non-empty");
                centers[c] = points.row(far).to_vec();
                assignment[far] = c;
            }
        }
        let previous = assignment.clone();
        let next = assign(points, &centers, &mut assignment);
        trace.push(next);
        inertia = next;
        if assignment == previous {
            break;
        }
    }
    let centroids = Tensor::new(vec![k, d], centers.concat()).expect("k×d centroids");
    KMeansResult {
        assignment,
        centroids,
        inertia,
        trace,
    }
}

/// Lloyd's algorithm with k-means++ seeding; keeps the restart with the
/// lowest inertia (earliest on ties).
pub fn kmeans(points: &Tensor, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k = {k} with {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let r = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(a;b) / sqrt(H(a)·H(b))`.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let n = a.len() as f64;
    let ha = entropy(ca.iter().copied(), n);
    let hb = entropy(cb.iter().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    MacroF1,
    MicroF1,
    Nmi,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MacroF1, Metric::MicroF1, Metric::Nmi];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MacroF1 => "macro_f1",
            Metric::MicroF1 => "micro_f1",
            Metric::Nmi => "nmi",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub metric: Metric,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub runs: usize,
    pub train_ratio: f64,
    pub base_seed: u64,
    pub restarts: usize,
    /// Skip the classification probe and report NMI only.
    pub nmi_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            train_ratio: DEFAULT_TRAIN_RATIO,
            base_seed: 0,
            restarts: DEFAULT_RESTARTS,
            nmi_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub train_ratio: f64,
    pub base_seed: u64,
    pub series: Vec<MetricSeries>,
}

impl EvalReport {
    pub fn get(&self, metric: Metric) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.metric == metric)
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.get(metric).map(MetricSeries::mean)
    }

    pub fn runs(&self) -> usize {
        self.series.first().map_or(0, |s| s.values.len())
    }

    /// `metric=<name> run=<i> value=<v>` per run, then `run=mean` per metric.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for s in &self.series {
            for (i, v) in s.values.iter().enumerate() {
                let _ = writeln!(out, "metric={} run={i} value={v}", s.metric);
            }
        }
        for s in &self.series {
            let _ = writeln!(out, "metric={} run=mean value={}", s.metric, s.mean());
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} runs, train ratio {}, base seed {}\n{:<10} {:>8} {:>8} {:>8} {:>8}\n",
            self.runs(),
            self.train_ratio,
            self.base_seed,
            "metric",
            "mean",
            "std",
            "min",
            "max"
        );
        for s in &self.series {
            let mean = s.mean();
            let var = s.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.values.len() as f64;
            let min = s.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = s.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "{:<10} {mean:>8.4} {:>8.4} {min:>8.4} {max:>8.4}",
                s.metric,
                var.sqrt()
            );
        }
        out
    }
}

/// Metrics of a single run seeded with `seed`.
pub fn evaluate_run(z: &Tensor, labels: &[usize], classes: usize, cfg: &EvalConfig, seed: u64) -> Result<Vec<(Metric, f64)>> {
    let n = z.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embedding rows", labels.len())));
    }
    let clusters = kmeans(z, classes, seed, cfg.restarts)?;
    let nmi_value = nmi(&clusters.assignment, labels)?;
    if cfg.nmi_only {
        return Ok(vec![(Metric::Nmi, nmi_value)]);
    }
    let (train, test) = split_nodes(n, Some(labels), cfg.train_ratio, seed)?;
    let rows = |ids: &[usize]| ids.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>();
    let train_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let test_y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let pred = logistic_regression(&rows(&train), &train_y, &rows(&test), classes)?;
    let (macro_f1, micro_f1) = f1_scores(&pred, &test_y, classes)?;
    Ok(vec![
        (Metric::MacroF1, macro_f1),
        (Metric::MicroF1, micro_f1),
        (Metric::Nmi, nmi_value),
    ])
}

/// Runs `cfg.runs` independent evaluations (run `i` uses seed
/// `base_seed + i` for its split and clustering) in parallel.
pub fn evaluate(z: &Tensor, labels: &[usize], classes: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.runs == 0 {
        return Err(Error::Config("at least one evaluation run is required".into()));
    }
    if classes < 2 {
        return Err(Error::Data(format!("evaluation needs at least 2 classes, got {classes}")));
    }
    let per_run: Vec<Vec<(Metric, f64)>> = (0..cfg.runs)
        .into_par_iter()
        .map(|i| evaluate_run(z, labels, classes, cfg, cfg.base_seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    let series = per_run[0]
        .iter()
        .enumerate()
        .map(|(k, &(metric, _))| MetricSeries {
            metric,
            values: per_run.iter().map(|r| r[k].1).collect(),
        })
        .collect();
    Ok(EvalReport {
        train_ratio: cfg.train_ratio,
        base_seed: cfg.base_seed,
        series,
    })
}
