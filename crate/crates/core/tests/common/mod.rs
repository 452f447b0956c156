#![allow(dead_code)]

use mvne::autodiff::{Tape, Var};
use mvne::graph::{MultiViewGraph, ViewGraph};
use mvne::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct sensitivity.
pub fn contract(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = random_tensor(shape, &mut rng(seed));
    let w = tape.leaf(w);
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between reverse-mode gradients and central
/// differences with step `h` over every entry of every input.
pub fn gradient_error<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[k]);
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[e], numeric, floor));
        }
    }
    worst
}

/// Six nodes, two views, five attributes: a path and a star sharing node 0.
pub fn toy_graph(seed: u64) -> MultiViewGraph {
    let n = 6;
    let a = ViewGraph::from_edges("path", n, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
    let b = ViewGraph::from_edges("star", n, &[(0, 2), (0, 3), (0, 5), (1, 4)]).unwrap();
    let x = random_tensor(vec![n, 5], &mut rng(seed));
    MultiViewGraph::new(vec![a, b], x, Some(vec![0, 0, 1, 1, 2, 2])).unwrap()
}

/// Random graph with `views` views of density `p`.
pub fn random_graph(n: usize, views: usize, features: usize, p: f64, rng: &mut ChaCha8Rng) -> MultiViewGraph {
    let views = (0..views)
        .map(|r| {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            ViewGraph::from_edges(format!("v{r}"), n, &edges).unwrap()
        })
        .collect();
    let x = random_tensor(vec![n, features], rng);
    MultiViewGraph::new(views, x, None).unwrap()
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Dense adjacency with self-loops, as booleans.
pub fn dense_adjacency(view: &ViewGraph) -> Vec<Vec<bool>> {
    let n = view.num_nodes();
    let mut a = vec![vec![false; n]; n];
    for i in 0..n {
        for &j in view.neighbors(i).unwrap() {
            a[i][j] = true;
        }
    }
    a
}

/// Max relative error of the analytic gradient of `-J` against central
/// differences, over every scalar of every parameter tensor (dropout off).
pub fn model_gradient_error(
    graph: &MultiViewGraph,
    params: &mvne::ModelParams,
    cfg: &mvne::ModelConfig,
    h: f64,
    floor: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = mvne::model::forward(&mut tape, graph, &vars, cfg, false, &mut rng(0)).unwrap();
    let loss = tape.scale(out.objective, -1.0);
    let analytic = vars.gradients(&tape.backward(loss).unwrap());

    let mut shifted = params.clone();
    let mut loss_with = |k: usize, e: usize, value: f64| {
        let original = std::mem::replace(&mut shifted.tensors_mut()[k].data_mut()[e], value);
        let loss = -shifted.objective_value(graph, cfg).unwrap();
        shifted.tensors_mut()[k].data_mut()[e] = original;
        loss
    };
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let x = params.tensors()[k].data()[e];
            let plus = loss_with(k, e, x + h);
            let minus = loss_with(k, e, x - h);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[e], numeric, floor));
        }
    }
    worst
}

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-12)
}

/// Two-layer ELU projection written with plain loops (`W z` convention).
pub fn brute_project(z: &[f64], p: &mvne::objective::ProjectionParams) -> Vec<f64> {
    let d = z.len();
    let layer = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|o| b.data()[o] + (0..d).map(|k| w.get(o, k) * x[k]).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = layer(&p.w1, &p.b1, z)
        .into_iter()
        .map(|v| if v > 0.0 { v } else { v.exp() - 1.0 })
        .collect();
    layer(&p.w2, &p.b2, &h)
}

/// Objective `J` as an explicit double loop over views and nodes, each
/// pair loss summing its denominator term by term.
pub fn brute_objective(
    views: &[Tensor],
    fused: &Tensor,
    proj: Option<&mvne::objective::ProjectionParams>,
    tau: f64,
    infomin: bool,
) -> f64 {
    let n = fused.rows();
    let p = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| match proj {
                Some(pp) => brute_project(t.row(i), pp),
                None => t.row(i).to_vec(),
            })
            .collect()
    };
    let pv: Vec<Vec<Vec<f64>>> = views.iter().map(p).collect();
    let pf = p(fused);
    let theta = |a: &[f64], b: &[f64]| brute_cosine(a, b) / tau;
    let mut total = 0.0;
    for r in 0..views.len() {
        for i in 0..n {
            let pos = theta(&pv[r][i], &pf[i]);
            let mut denom = pos.exp();
            for j in 0..n {
                if j != i {
                    denom += theta(&pv[r][i], &pf[j]).exp();
                    denom += theta(&pv[r][i], &pv[r][j]).exp();
                }
            }
            if infomin {
                for k in 0..views.len() {
                    if k != r {
                        for j in 0..n {
                            denom += theta(&pv[r][i], &pv[k][j]).exp();
                        }
                    }
                }
            }
            total += pos - denom.ln();
        }
    }
    total / (n * views.len()) as f64
}

/// Batched objective on fresh leaves.
pub fn batched_objective(
    views: &[Tensor],
    fused: &Tensor,
    proj: Option<&mvne::objective::ProjectionParams>,
    tau: f64,
    infomin: bool,
) -> f64 {
    use mvne::objective::{objective, ObjectiveConfig, Projection};
    let mut tape = Tape::new();
    let vs: Vec<Var> = views.iter().map(|z| tape.leaf(z.clone())).collect();
    let f = tape.leaf(fused.clone());
    let p = match proj {
        Some(pp) => Projection::Mlp(pp.clone()),
        None => Projection::Identity,
    }
    .register(&mut tape);
    let j = objective(&mut tape, &vs, f, &p, &ObjectiveConfig { tau, infomin }).unwrap();
    tape.value(j).item()
}

pub const POINTS: [(f64, f64); 20] = [
    (-1.242, -0.659), (-0.799, 0.736), (0.309, 0.488), (-1.042, -0.228), (-0.001, 1.708),
    (-0.382, -0.587), (-1.367, 1.68), (-0.438, -0.986), (-0.667, -0.531), (-1.103, 0.01),
    (0.129, 0.143), (0.65, -0.772), (1.028, 0.364), (-0.614, -0.505), (-0.085, -0.439),
    (-0.332, -0.283), (0.67, -0.543), (-0.138, -0.617), (-0.173, -1.384), (0.88, -1.187),
];

/// Predicted class on the 9×9 grid over [-2, 2]² (x outer, y inner) from an
/// independent BFGS fit of the same penalized likelihood.
pub const GRID_CLASSES: &str = "000000000000000000100000000111000000111110000111111100111111110111111111111111111";

/// Fits the probe on the frozen points and compares the grid predictions
/// and the fitted boundary with the reference solver.
pub fn check_probe_against_solver() -> Result<(), String> {
    use mvne::eval::{logistic_regression, LogisticModel};
    let x: Vec<Vec<f64>> = POINTS.iter().map(|&(a, b)| vec![a, b]).collect();
    let y: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
    let grid: Vec<Vec<f64>> = (0..81)
        .map(|k| vec![-2.0 + 0.5 * (k / 9) as f64, -2.0 + 0.5 * (k % 9) as f64])
        .collect();
    let pred = logistic_regression(&x, &y, &grid, 2).map_err(|e| e.to_string())?;
    let got: String = pred.iter().map(|c| c.to_string()).collect();
    if got != GRID_CLASSES {
        return Err(format!("grid predictions {got}"));
    }
    let model = LogisticModel::fit(&x, &y, 2).map_err(|e| e.to_string())?;
    let w = model.weight.data();
    let fitted = [w[1] - w[0], w[3] - w[2], model.bias[1] - model.bias[0]];
    let reference = [3.97863891, -2.24940007, 0.37293709];
    if fitted.iter().zip(&reference).any(|(a, b)| (a - b).abs() >= 1e-3) {
        return Err(format!("boundary {fitted:?}, solver {reference:?}"));
    }
    Ok(())
}

pub fn brute_force_inertia(points: &[(f64, f64)], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    loop {
        let mut cost = 0.0;
        for c in 0..k {
            let members: Vec<_> = (0..n).filter(|&i| assign[i] == c).map(|i| points[i]).collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let cx = members.iter().map(|p| p.0).sum::<f64>() / m;
            let cy = members.iter().map(|p| p.1).sum::<f64>() / m;
            cost += members.iter().map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sum::<f64>();
        }
        best = best.min(cost);
        let mut i = 0;
        while i < n {
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

pub const TWELVE_POINTS: [(f64, f64); 12] = [
    (0.0, 0.0), (0.4, 0.3), (0.9, -0.2), (0.2, 0.8),
    (3.0, 0.1), (2.6, 0.7), (3.5, 1.0), (2.1, -0.4),
    (1.4, 2.9), (1.8, 3.3), (0.9, 3.6), (1.6, 2.2),
];

/// `(k-means inertia, exhaustive optimum)` on the fixed planar instance.
pub fn twelve_point_inertia(k: usize) -> (f64, f64) {
    let pts = TWELVE_POINTS;
    let t = Tensor::from_rows(&pts.iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>()).unwrap();
    let got = mvne::eval::kmeans(&t, k, 5, mvne::eval::DEFAULT_RESTARTS).unwrap().inertia;
    (got, brute_force_inertia(&pts, k))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

