//! Multi-view graphs: one node set, several undirected edge types.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One edge type over the shared node set, stored as CSR neighbor lists.
///
/// Built through [`ViewGraph::from_edges`], every node carries a self-loop,
/// edges are symmetric, and each list is sorted without duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGraph {
    name: String,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    centers: Vec<usize>,
}

impl ViewGraph {
    /// Symmetrizes `edges`, adds one self-loop per node, and drops duplicates.
    pub fn from_edges(name: impl Into<String>, num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists: Vec<Vec<usize>> = (0..num_nodes).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Index(format!(
                    "edge ({a}, {b}) has an endpoint outside 0..{num_nodes}"
                )));
            }
            lists[a].push(b);
            lists[b].push(a);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in lists {
            list.sort_unstable();
            list.dedup();
            neighbors.extend(list);
            offsets.push(neighbors.len());
        }
        Ok(Self::from_raw_parts(name, offsets, neighbors))
    }

    /// Wraps CSR arrays as given, without enforcing any invariant. Use
    /// [`MultiViewGraph::validate`] to inspect the result.
    pub fn from_raw_parts(name: impl Into<String>, offsets: Vec<usize>, neighbors: Vec<usize>) -> Self {
        let mut centers = Vec::with_capacity(neighbors.len());
        for (i, w) in offsets.windows(2).enumerate() {
            centers.extend(std::iter::repeat_n(i, w[1].saturating_sub(w[0])));
        }
        Self {
            name: name.into(),
            offsets,
            neighbors,
            centers,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    /// Number of stored (directed) neighbor entries, self-loops included.
    pub fn num_entries(&self) -> usize {
        self.neighbors.len()
    }

    /// Number of undirected edges excluding self-loops.
    pub fn num_edges(&self) -> usize {
        self.undirected_edges().count()
    }

    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        if i >= self.num_nodes() {
            return Err(Error::Index(format!(
                "node {i} outside 0..{}",
                self.num_nodes()
            )));
        }
        Ok(&self.neighbors[self.offsets[i]..self.offsets[i + 1]])
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Neighbor id of every stored entry.
    pub fn neighbor_ids(&self) -> &[usize] {
        &self.neighbors
    }

    /// Owning node of every stored entry.
    pub fn center_ids(&self) -> &[usize] {
        &self.centers
    }

    /// Each undirected non-loop edge once, as `(i, j)` with `i < j`.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.centers
            .iter()
            .zip(&self.neighbors)
            .filter(|(i, j)| i < j)
            .map(|(&i, &j)| (i, j))
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<(usize, usize)> = self
            .undirected_edges()
            .map(|(i, j)| (perm[i], perm[j]))
            .collect();
        Self::from_edges(self.name.clone(), self.num_nodes(), &edges)
    }
}

/// Which invariant a [`Violation`] breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    NoViews,
    NodeCount,
    AttributeShape,
    OffsetLayout,
    NeighborRange,
    Symmetry,
    SelfLoop,
    SortedUnique,
    LabelRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub view: Option<usize>,
    pub node: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(v) = self.view {
            write!(f, " view={v}")?;
        }
        if let Some(n) = self.node {
            write!(f, " node={n}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// `N` nodes, one or more views, an `N×F` attribute matrix and optional
/// class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewGraph {
    num_nodes: usize,
    views: Vec<ViewGraph>,
    attributes: Tensor,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl MultiViewGraph {
    /// Assembles a graph and rejects it if any invariant fails.
    pub fn new(views: Vec<ViewGraph>, attributes: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let g = Self::new_unchecked(views, attributes, labels);
        match g.validate().into_iter().next() {
            None => Ok(g),
            Some(v) => Err(match v.kind {
                ViolationKind::NeighborRange | ViolationKind::LabelRange => Error::Index(v.to_string()),
                ViolationKind::NodeCount | ViolationKind::AttributeShape => Error::Shape(v.to_string()),
                _ => Error::Data(v.to_string()),
            }),
        }
    }

    /// Assembles a graph without validation; `validate` reports problems.
    pub fn new_unchecked(views: Vec<ViewGraph>, attributes: Tensor, labels: Option<Vec<usize>>) -> Self {
        let num_nodes = attributes.rows();
        let num_classes = labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1);
        Self {
            num_nodes,
            views,
            attributes,
            labels,
            num_classes,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_features(&self) -> usize {
        self.attributes.cols()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn views(&self) -> &[ViewGraph] {
        &self.views
    }

    pub fn view(&self, r: usize) -> &ViewGraph {
        &self.views[r]
    }

    pub fn view_names(&self) -> Vec<&str> {
        self.views.iter().map(|v| v.name()).collect()
    }

    pub fn attributes(&self) -> &Tensor {
        &self.attributes
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of classes `C` (0 without labels).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The same nodes and attributes restricted to view `r`.
    pub fn single_view(&self, r: usize) -> Result<Self> {
        let view = self
            .views
            .get(r)
            .ok_or_else(|| Error::Index(format!("view {r} of {}", self.views.len())))?;
        Ok(Self::new_unchecked(
            vec![view.clone()],
            self.attributes.clone(),
            self.labels.clone(),
        ))
    }

    /// Relabels node `i` as `perm[i]` in every view, attribute row and label.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.num_nodes
            )));
        }
        let views = self
            .views
            .iter()
            .map(|v| v.permuted(perm))
            .collect::<Result<Vec<_>>>()?;
        let labels = self.labels.as_ref().map(|l| {
            let mut out = vec![0; l.len()];
            for (i, &p) in perm.iter().enumerate() {
                out[p] = l[i];
            }
            out
        });
        Ok(Self::new_unchecked(
            views,
            self.attributes.permute_rows(perm),
            labels,
        ))
    }

    /// Lists every broken invariant; empty when the graph is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.num_nodes;
        let mut push = |kind, view, node, detail: String| {
            out.push(Violation {
                kind,
                view,
                node,
                detail,
            })
        };
        if self.views.is_empty() {
            push(ViolationKind::NoViews, None, None, "graph has no views".into());
        }
        if self.attributes.shape().len() != 2 || self.attributes.cols() == 0 {
            push(
                ViolationKind::AttributeShape,
                None,
                None,
                format!("attributes must be N×F with F ≥ 1, got {:?}", self.attributes.shape()),
            );
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                push(
                    ViolationKind::NodeCount,
                    None,
                    None,
                    format!("{} labels for {n} nodes", labels.len()),
                );
            }
            for (i, &l) in labels.iter().enumerate() {
                if l >= self.num_classes {
                    push(
                        ViolationKind::LabelRange,
                        None,
                        Some(i),
                        format!("label {l} outside 0..{}", self.num_classes),
                    );
                }
            }
        }
        for (r, view) in self.views.iter().enumerate() {
            let offsets = &view.offsets;
            if offsets.len() != n + 1 {
                push(
                    ViolationKind::NodeCount,
                    Some(r),
                    None,
                    format!("view has {} nodes, attributes have {n}", view.num_nodes()),
                );
                continue;
            }
            if offsets[0] != 0
                || *offsets.last().unwrap() != view.neighbors.len()
                || offsets.windows(2).any(|w| w[1] < w[0])
            {
                push(
                    ViolationKind::OffsetLayout,
                    Some(r),
                    None,
                    "offsets are not a monotone partition of the neighbor array".into(),
                );
                continue;
            }
            for i in 0..n {
                let list = &view.neighbors[offsets[i]..offsets[i + 1]];
                for &j in list {
                    if j >= n {
                        push(
                            ViolationKind::NeighborRange,
                            Some(r),
                            Some(i),
                            format!("neighbor {j} outside 0..{n}"),
                        );
                    }
                }
                if list.windows(2).any(|w| w[1] <= w[0]) {
                    push(
                        ViolationKind::SortedUnique,
                        Some(r),
                        Some(i),
                        "neighbor list not strictly ascending".into(),
                    );
                }
                let loops = list.iter().filter(|&&j| j == i).count();
                if loops != 1 {
                    push(
                        ViolationKind::SelfLoop,
                        Some(r),
                        Some(i),
                        format!("{loops} self-loops, expected 1"),
                    );
                }
                for &j in list {
                    if j < n && j != i {
                        let back = &view.neighbors[offsets[j]..offsets[j + 1]];
                        if !back.contains(&i) {
                            push(
                                ViolationKind::Symmetry,
                                Some(r),
                                Some(i),
                                format!("edge {i}->{j} has no reverse"),
                            );
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> MultiViewGraph {
        let view = ViewGraph::from_edges("v", n, edges).unwrap();
        MultiViewGraph::new(vec![view], Tensor::filled(vec![n, 1], 1.0), None).unwrap()
    }

    #[test]
    fn single_edge_is_symmetrized_with_self_loops() {
        let g = graph(2, &[(0, 1)]);
        assert_eq!(g.view(0).neighbors(0).unwrap(), &[0, 1]);
        assert_eq!(g.view(0).neighbors(1).unwrap(), &[0, 1]);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let a = ViewGraph::from_edges("v", 2, &[(0, 1), (0, 1), (1, 0)]).unwrap();
        let b = ViewGraph::from_edges("v", 2, &[(0, 1)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn star_path_and_isolated() {
        let star = ViewGraph::from_edges("s", 4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(star.neighbors(0).unwrap(), &[0, 1, 2, 3]);
        let path = ViewGraph::from_edges("p", 3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(path.neighbors(1).unwrap(), &[0, 1, 2]);
        let lonely = ViewGraph::from_edges("i", 3, &[(0, 1)]).unwrap();
        assert_eq!(lonely.neighbors(2).unwrap(), &[2]);
        assert!(matches!(lonely.neighbors(3), Err(Error::Index(_))));
    }

    #[test]
    fn out_of_range_endpoint_is_rejected() {
        assert!(matches!(
            ViewGraph::from_edges("v", 2, &[(0, 2)]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn validate_flags_bad_neighbor_index() {
        let ok = ViewGraph::from_raw_parts("ok", vec![0, 1, 2], vec![0, 1]);
        let ok = MultiViewGraph::new_unchecked(vec![ok], Tensor::filled(vec![2, 1], 0.0), None);
        assert!(ok.validate().is_empty());

        // node 0 lists neighbor N = 2
        let view = ViewGraph::from_raw_parts("bad", vec![0, 2, 3], vec![0, 2, 1]);
        let g = MultiViewGraph::new_unchecked(vec![view], Tensor::filled(vec![2, 1], 0.0), None);
        let v = g.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::NeighborRange);
        assert_eq!(v[0].node, Some(0));
    }

    #[test]
    fn validate_flags_asymmetry() {
        let view = ViewGraph::from_raw_parts("asym", vec![0, 2, 3], vec![0, 1, 1]);
        let g = MultiViewGraph::new_unchecked(vec![view], Tensor::filled(vec![2, 1], 0.0), None);
        let v = g.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::Symmetry);
    }

    #[test]
    fn validate_flags_missing_views_and_attributes() {
        let g = MultiViewGraph::new_unchecked(vec![], Tensor::zeros(vec![3, 0]), None);
        let kinds: Vec<_> = g.validate().iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::NoViews));
        assert!(kinds.contains(&ViolationKind::AttributeShape));
    }

    #[test]
    fn permutation_relabels_everything() {
        let view = ViewGraph::from_edges("v", 3, &[(0, 1)]).unwrap();
        let attrs = Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let g = MultiViewGraph::new(vec![view], attrs, Some(vec![0, 1, 2])).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert!(p.validate().is_empty());
        assert_eq!(p.view(0).neighbors(2).unwrap(), &[0, 2]);
        assert_eq!(p.attributes().data(), &[2.0, 3.0, 1.0]);
        assert_eq!(p.labels().unwrap(), &[1, 2, 0]);
    }
}
