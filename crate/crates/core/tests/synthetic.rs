use mvne::eval::{kmeans, nmi};
use mvne::graph::ViewGraph;
use mvne::io::load_dataset;
use mvne::synthetic::{generate, save, SynthSpec};
use mvne::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};

fn intra_edges(view: &ViewGraph, labels: &[usize]) -> usize {
    view.undirected_edges().filter(|&(i, j)| labels[i] == labels[j]).count()
}

#[test]
fn intra_cluster_edge_count_matches_binomial_expectation() {
    let (n, c, p) = (60usize, 3usize, 0.3);
    let draws = 20;
    let mut total = 0.0;
    for seed in 0..draws {
        let spec = SynthSpec { n, c, p_in: p, p_out: 0.05, views: 1, complementary: false, seed, ..SynthSpec::default() };
        let g = generate(&spec).unwrap();
        total += intra_edges(g.view(0), g.labels().unwrap()) as f64;
    }
    let pairs = (c * (n / c) * (n / c - 1) / 2) as f64;
    let mean = total / draws as f64;
    let sigma = (pairs * p * (1.0 - p) / draws as f64).sqrt();
    assert!((mean - pairs * p).abs() < 3.0 * sigma, "mean {mean}, expected {}", pairs * p);
}

#[test]
fn generation_is_deterministic_and_well_formed() {
    let spec = SynthSpec { n: 50, c: 4, views: 3, seed: 8, ..SynthSpec::default() };
    let a = generate(&spec).unwrap();
    assert_eq!(a, generate(&spec).unwrap());
    assert!(a.validate().is_empty());
    assert_ne!(a, generate(&SynthSpec { seed: 9, ..spec.clone() }).unwrap());
    assert_eq!(a.num_features(), spec.attr_dim);
    assert_eq!(a.num_classes(), 4);
}

/// Spectral clustering: top-`k` eigenvectors of `D^-1/2 A D^-1/2`, rows
/// normalized, then k-means.
fn spectral_partition(views: &[&ViewGraph], k: usize) -> Vec<usize> {
    let n = views[0].num_nodes();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for v in views {
        for (i, j) in v.undirected_edges() {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum().max(1.0)).collect();
    let l = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (deg[i] * deg[j]).sqrt());
    let eig = SymmetricEigen::new(l);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let mut rows = vec![0.0; n * k];
    for i in 0..n {
        let norm: f64 = order[..k].iter().map(|&c| eig.eigenvectors[(i, c)].powi(2)).sum::<f64>().sqrt();
        for (t, &c) in order[..k].iter().enumerate() {
            rows[i * k + t] = eig.eigenvectors[(i, c)] / norm.max(1e-12);
        }
    }
    kmeans(&Tensor::new(vec![n, k], rows).unwrap(), k, 0, 10).unwrap().assignment
}

#[test]
fn complementary_views_need_each_other() {
    let spec = SynthSpec { n: 200, c: 4, views: 2, p_in: 0.3, p_out: 0.02, complementary: true, seed: 3, ..SynthSpec::default() };
    let g = generate(&spec).unwrap();
    let labels = g.labels().unwrap();
    for r in 0..2 {
        let single = nmi(&spectral_partition(&[g.view(r)], 4), labels).unwrap();
        assert!(single < 0.6, "view {r} alone: {single}");
    }
    let union = nmi(&spectral_partition(&[g.view(0), g.view(1)], 4), labels).unwrap();
    assert!(union > 0.9, "union: {union}");
}

#[test]
fn saved_dataset_round_trips() {
    let spec = SynthSpec { n: 40, c: 3, views: 3, seed: 1, ..SynthSpec::default() };
    let g = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = save(&g, dir.path()).unwrap();
    assert_eq!(files.len(), 3 + 2);
    let back = load_dataset(dir.path()).unwrap();
    assert!(back.validate().is_empty());
    assert_eq!(back, g);
}
