use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::csr::CsrMatrix;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Immutable node-classification instance: symmetric binary adjacency with no
/// stored self-loops, dense features, labels, and disjoint split masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Graph<S> {
    adjacency: CsrMatrix<S>,
    features: DenseMatrix<S>,
    labels: Vec<usize>,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
    num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipAction {
    Add,
    Remove,
}

/// One undirected edge flip; nodes are unordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeFlip {
    pub i: usize,
    pub j: usize,
    pub action: FlipAction,
}

impl EdgeFlip {
    pub fn add(i: usize, j: usize) -> Self {
        EdgeFlip { i, j, action: FlipAction::Add }
    }

    pub fn remove(i: usize, j: usize) -> Self {
        EdgeFlip { i, j, action: FlipAction::Remove }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new(
        adjacency: CsrMatrix<S>,
        features: DenseMatrix<S>,
        labels: Vec<usize>,
        train_mask: Vec<bool>,
        val_mask: Vec<bool>,
        test_mask: Vec<bool>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if adjacency.n_rows() != n || adjacency.n_cols() != n {
            return Err(Error::Dimension(format!(
                "adjacency is {}x{} but there are {n} nodes",
                adjacency.n_rows(),
                adjacency.n_cols()
            )));
        }
        check_unweighted_symmetric(&adjacency)?;
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0,{num_classes})"
            )));
        }
        for (name, m) in [("train", &train_mask), ("val", &val_mask), ("test", &test_mask)] {
            if m.len() != n {
                return Err(Error::Dimension(format!("{name} mask length {}", m.len())));
            }
        }
        for i in 0..n {
            let overlap = (train_mask[i] && val_mask[i])
                || (train_mask[i] && test_mask[i])
                || (val_mask[i] && test_mask[i]);
            if overlap {
                return Err(Error::Contract(format!("node {i} is in more than one split")));
            }
        }
        Ok(Graph {
            adjacency,
            features,
            labels,
            train_mask,
            val_mask,
            test_mask,
            num_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency(&self) -> &CsrMatrix<S> {
        &self.adjacency
    }

    pub fn features(&self) -> &DenseMatrix<S> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    /// Undirected edges as i < j pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, _)| (i, j))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i, j).is_some()
    }

    /// Same nodes/labels/masks over a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        let adjacency = CsrMatrix::from_undirected_edges(self.n(), edges)?;
        Graph::new(
            adjacency,
            self.features.clone(),
            self.labels.clone(),
            self.train_mask.clone(),
            self.val_mask.clone(),
            self.test_mask.clone(),
            self.num_classes,
        )
    }

    pub fn features_are_binary(&self) -> bool {
        self.features
            .as_slice()
            .iter()
            .all(|&v| v == S::zero() || v == S::one())
    }

    /// Structural equality: same edges, features, labels and masks.
    pub fn structurally_equal(&self, other: &Self) -> bool {
        self.adjacency == other.adjacency
            && self.features == other.features
            && self.labels == other.labels
            && self.train_mask == other.train_mask
            && self.val_mask == other.val_mask
            && self.test_mask == other.test_mask
    }
}

fn check_unweighted_symmetric<S: Scalar>(adj: &CsrMatrix<S>) -> Result<()> {
    for (i, j, v) in adj.iter() {
        if i == j {
            return Err(Error::Contract(format!("stored self-loop at node {i}")));
        }
        if v != S::one() {
            return Err(Error::Contract(format!(
                "adjacency entry ({i},{j}) = {v}; graphs are unweighted"
            )));
        }
        if adj.get(j, i) != Some(v) {
            return Err(Error::Contract(format!("entry ({i},{j}) has no mirror")));
        }
    }
    Ok(())
}

/// Symmetric normalization with self-loops: scales every entry of A+I by
/// 1/sqrt(deg_i * deg_j) where degrees are row sums of A+I.
///
/// Self-loops are added here, never stored in the graph, so attacks cannot
/// touch diagonal entries.
pub fn normalize_adjacency<S: Scalar>(adj: &CsrMatrix<S>) -> Result<CsrMatrix<S>> {
    if adj.n_rows() != adj.n_cols() {
        return Err(Error::Dimension(format!(
            "adjacency must be square, got {}x{}",
            adj.n_rows(),
            adj.n_cols()
        )));
    }
    check_unweighted_symmetric(adj)?;
    let n = adj.n_rows();
    // Degrees of A + I.
    let deg: Vec<S> = (0..n)
        .map(|i| adj.row(i).1.iter().copied().sum::<S>() + S::one())
        .collect();
    let dinv: Vec<S> = deg.iter().map(|&d| S::one() / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(adj.nnz() + n);
    for i in 0..n {
        triplets.push((i, i, dinv[i] * dinv[i]));
    }
    for (i, j, _) in adj.iter() {
        triplets.push((i, j, dinv[i] * dinv[j]));
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Applies flips in order, validating each against the evolving edge set.
pub fn apply_flips<S: Scalar>(g: &Graph<S>, flips: &[EdgeFlip]) -> Result<Graph<S>> {
    let n = g.n();
    let mut edges: HashSet<(usize, usize)> = g.edges().into_iter().collect();
    for f in flips {
        if f.i == f.j {
            return Err(Error::InconsistentFlip(format!("degenerate pair ({},{})", f.i, f.j)));
        }
        if f.i >= n || f.j >= n {
            return Err(Error::InconsistentFlip(format!(
                "pair ({},{}) outside graph of {n} nodes",
                f.i, f.j
            )));
        }
        let key = (f.i.min(f.j), f.i.max(f.j));
        match f.action {
            FlipAction::Add => {
                if !edges.insert(key) {
                    return Err(Error::InconsistentFlip(format!(
                        "edge ({},{}) already present",
                        key.0, key.1
                    )));
                }
            }
            FlipAction::Remove => {
                if !edges.remove(&key) {
                    return Err(Error::InconsistentFlip(format!(
                        "edge ({},{}) not present",
                        key.0, key.1
                    )));
                }
            }
        }
    }
    let mut sorted: Vec<(usize, usize)> = edges.into_iter().collect();
    sorted.sort_unstable();
    g.with_edges(&sorted)
}

/// Jaccard similarity of two binary vectors; both all-zero gives 0.
pub fn jaccard<S: Scalar>(xi: &[S], xj: &[S]) -> Result<S> {
    if xi.len() != xj.len() {
        return Err(Error::Dimension(format!(
            "jaccard on lengths {} and {}",
            xi.len(),
            xj.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in xi.iter().zip(xj) {
        let a = a != S::zero();
        let b = b != S::zero();
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(S::zero());
    }
    Ok(S::from(inter).unwrap() / S::from(union).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn normalize_isolated_node() {
        let adj = CsrMatrix::<f64>::empty(1, 1);
        let norm = normalize_adjacency(&adj).unwrap();
        assert_eq!(norm.get(0, 0), Some(1.0));
        assert_eq!(norm.nnz(), 1);
    }

    #[test]
    fn normalize_single_edge() {
        // Two nodes, one edge: degrees of A+I are (2,2), every entry 0.5.
        let adj = CsrMatrix::<f64>::from_undirected_edges(2, &[(0, 1)]).unwrap();
        let norm = normalize_adjacency(&adj).unwrap();
        assert_eq!(norm.nnz(), 4);
        for (_, _, v) in norm.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_triangle() {
        let adj = CsrMatrix::<f64>::from_undirected_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let norm = normalize_adjacency(&adj).unwrap();
        assert_eq!(norm.nnz(), 9);
        for (_, _, v) in norm.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_nonsquare() {
        let m = CsrMatrix::<f64>::empty(2, 3);
        assert!(matches!(normalize_adjacency(&m), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalize_is_exactly_symmetric() {
        let g = fixtures::two_cluster_8();
        let norm = normalize_adjacency(g.adjacency()).unwrap();
        for (i, j, v) in norm.iter() {
            assert_eq!(norm.get(j, i), Some(v));
        }
        // Sparsity pattern is the input pattern plus the diagonal.
        assert_eq!(norm.nnz(), g.adjacency().nnz() + g.n());
    }

    #[test]
    fn flips_roundtrip() {
        let g = fixtures::two_cluster_8();
        assert!(apply_flips(&g, &[]).unwrap().structurally_equal(&g));

        let flips = vec![EdgeFlip::add(0, 7), EdgeFlip::remove(0, 7)];
        assert!(apply_flips(&g, &flips).unwrap().structurally_equal(&g));
    }

    #[test]
    fn flip_adds_both_directions() {
        let adj = CsrMatrix::<f64>::empty(2, 2);
        let g = Graph::new(
            adj,
            DenseMatrix::zeros(2, 1),
            vec![0, 0],
            vec![true, false],
            vec![false, true],
            vec![false, false],
            1,
        )
        .unwrap();
        let g2 = apply_flips(&g, &[EdgeFlip::add(0, 1)]).unwrap();
        assert!(g2.has_edge(0, 1));
        assert!(g2.has_edge(1, 0));
    }

    #[test]
    fn invalid_flips_rejected() {
        let g = fixtures::two_cluster_8();
        let present = g.edges()[0];
        let r = apply_flips(&g, &[EdgeFlip::add(present.0, present.1)]);
        assert!(matches!(r, Err(Error::InconsistentFlip(_))));
        let r = apply_flips(&g, &[EdgeFlip::remove(0, 5)]);
        assert!(matches!(r, Err(Error::InconsistentFlip(_))));
    }

    #[test]
    fn jaccard_cases() {
        let a = [1.0, 1.0, 0.0];
        let b = [1.0, 0.0, 1.0];
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(jaccard::<f64>(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(jaccard(&a, &[1.0]), Err(Error::Dimension(_))));
    }
}
