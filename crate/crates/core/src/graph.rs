//! Graphs, domains, normalized Laplacians and Dirichlet energies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Default degree floor applied before taking `D^{-1/2}`.
pub const DEGREE_EPS: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;

/// Feature norms below this are treated as a degenerate (zero) signal.
pub const ZERO_FEATURE_NORM_SQ: f64 = 1e-30;

/// Dense weighted undirected graph with node features and an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub adjacency: Tensor,
    pub features: Tensor,
    pub label: Option<usize>,
}

impl Graph {
    pub fn new(adjacency: Tensor, features: Tensor, label: Option<usize>) -> Result<Self> {
        let g = Graph {
            adjacency,
            features,
            label,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unweighted graph from an edge list.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        label: Option<usize>,
    ) -> Result<Self> {
        let mut adjacency = Tensor::zeros(n, n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::IndexOutOfRange {
                    op: "from_edges",
                    index: i.max(j),
                    bound: n,
                });
            }
            if i != j {
                adjacency.set(i, j, 1.0);
                adjacency.set(j, i, 1.0);
            }
        }
        Self::new(adjacency, features, label)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Undirected edges `(i, j)` with `i < j` and positive weight.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency.get(i, j) > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Checks the adjacency and feature invariants.
    pub fn validate(&self) -> Result<()> {
        let a = &self.adjacency;
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "validate",
                lhs: a.shape(),
                rhs: (n, n),
            });
        }
        if self.features.rows() != n {
            return Err(Error::FeatureShapeMismatch {
                rows: self.features.rows(),
                nodes: n,
            });
        }
        for i in 0..n {
            let d = a.get(i, i);
            if d != 0.0 {
                return Err(Error::NonzeroDiagonal { index: i, value: d });
            }
            for j in 0..n {
                let w = a.get(i, j);
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::NegativeWeight {
                        row: i,
                        col: j,
                        value: w,
                    });
                }
                let back = a.get(j, i);
                if (w - back).abs() > SYMMETRY_TOL {
                    return Err(Error::AsymmetricAdjacency {
                        row: i,
                        col: j,
                        forward: w,
                        backward: back,
                    });
                }
            }
        }
        Ok(())
    }

    /// Applies a node permutation: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.num_nodes();
        let adjacency = Tensor::from_fn(n, n, |i, j| self.adjacency.get(perm[i], perm[j]));
        let features = Tensor::from_fn(n, self.feature_dim(), |i, j| {
            self.features.get(perm[i], j)
        });
        Graph {
            adjacency,
            features,
            label: self.label,
        }
    }
}

/// `I - D^{-1/2} A D^{-1/2}` with degrees floored at `eps`.
pub fn normalized_laplacian(g: &Graph, eps: f64) -> Tensor {
    normalized_laplacian_of(&g.adjacency, eps)
}

pub fn normalized_laplacian_of(adjacency: &Tensor, eps: f64) -> Tensor {
    let n = adjacency.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / adjacency.row(i).iter().sum::<f64>().max(eps).sqrt())
        .collect();
    Tensor::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * adjacency.get(i, j) * inv_sqrt[j]
    })
}

/// `Tr(X^T L X) / ||X||_F^2` for the normalized Laplacian `L`.
pub fn dirichlet_energy(g: &Graph, eps: f64) -> Result<f64> {
    energy_of(&g.adjacency, &g.features, eps)
}

pub fn energy_of(adjacency: &Tensor, features: &Tensor, eps: f64) -> Result<f64> {
    let norm = features.frobenius_norm_sq();
    if norm < ZERO_FEATURE_NORM_SQ {
        return Err(Error::ZeroFeatures { graph: None });
    }
    let lap = normalized_laplacian_of(adjacency, eps);
    let lx = lap.matmul(features)?;
    let quad: f64 = lx
        .data()
        .iter()
        .zip(features.data())
        .map(|(a, b)| a * b)
        .sum();
    Ok(quad / norm)
}

/// Differentiable normalized Dirichlet energy of `(adjacency, features)`.
///
/// Computed as `1 - <X, N X> / ||X||^2` with `N = D^{-1/2} A D^{-1/2}`, which
/// equals the trace form because `Tr(X^T X) = ||X||^2`.
pub fn energy_var<'t>(adjacency: Var<'t>, features: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let tape = adjacency.tape();
    let n = adjacency.shape().0;
    let ones = tape.constant(Tensor::full(n, 1, 1.0));
    let degree = adjacency.matmul(ones)?;
    let inv_sqrt = degree.clamp_min(eps).powf(-0.5);
    let scaling = inv_sqrt.matmul(inv_sqrt.t())?;
    let normalized = adjacency.mul(scaling)?;
    let smooth = features.mul(normalized.matmul(features)?)?.sum();
    let norm = features.frobenius_norm_sq();
    if norm.item() < ZERO_FEATURE_NORM_SQ {
        return Err(Error::ZeroFeatures { graph: None });
    }
    let ratio = smooth.div(norm)?;
    Ok(ratio.scale(-1.0).add_scalar(1.0))
}

/// Ordered graph collection sharing one feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub graphs: Vec<Graph>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Domain {
    pub fn new(graphs: Vec<Graph>, feature_dim: usize, num_classes: usize) -> Result<Self> {
        let d = Domain {
            graphs,
            feature_dim,
            num_classes,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.graphs.is_empty() && self.graphs.iter().all(|g| g.label.is_some())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let labeled = self.graphs.iter().filter(|g| g.label.is_some()).count();
        if labeled != 0 && labeled != self.graphs.len() {
            return Err(Error::InvalidDomain(format!(
                "{labeled} of {} graphs carry labels",
                self.graphs.len()
            )));
        }
        for (i, g) in self.graphs.iter().enumerate() {
            if g.feature_dim() != self.feature_dim {
                return Err(Error::InvalidDomain(format!(
                    "graph {i} has feature dim {} (domain {})",
                    g.feature_dim(),
                    self.feature_dim
                )));
            }
            if let Some(y) = g.label {
                if y >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: self.num_classes,
                    });
                }
            }
            g.validate()?;
        }
        Ok(())
    }

    /// Drops every label. The result can be handed to adaptation code.
    pub fn into_unlabeled(self) -> UnlabeledDomain {
        UnlabeledDomain {
            graphs: self
                .graphs
                .into_iter()
                .map(|g| UnlabeledGraph {
                    adjacency: g.adjacency,
                    features: g.features,
                })
                .collect(),
            feature_dim: self.feature_dim,
        }
    }
}

/// Graph without any label field.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledGraph {
    pub adjacency: Tensor,
    pub features: Tensor,
}

/// Target-side view of a domain. Carries no labels at the type level.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledDomain {
    pub graphs: Vec<UnlabeledGraph>,
    pub feature_dim: usize,
}

impl UnlabeledDomain {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Re-attaches `num_classes = 0` and no labels so the domain can be exported.
    pub fn to_domain(&self) -> Domain {
        Domain {
            graphs: self
                .graphs
                .iter()
                .map(|g| Graph {
                    adjacency: g.adjacency.clone(),
                    features: g.features.clone(),
                    label: None,
                })
                .collect(),
            feature_dim: self.feature_dim,
            num_classes: 0,
        }
    }
}

/// Anything with an adjacency and a feature matrix.
pub trait GraphData {
    fn adjacency(&self) -> &Tensor;
    fn features(&self) -> &Tensor;
}

impl GraphData for Graph {
    fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }
    fn features(&self) -> &Tensor {
        &self.features
    }
}

impl GraphData for UnlabeledGraph {
    fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }
    fn features(&self) -> &Tensor {
        &self.features
    }
}

/// Summary statistics that travel into reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainSummary {
    pub graphs: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub mean_nodes: f64,
}

impl DomainSummary {
    pub fn of(domain: &Domain) -> Self {
        let n = domain.graphs.len().max(1) as f64;
        DomainSummary {
            graphs: domain.graphs.len(),
            feature_dim: domain.feature_dim,
            num_classes: domain.num_classes,
            mean_nodes: domain.graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn edge2(x: Vec<Vec<f64>>) -> Graph {
        Graph::from_edges(2, &[(0, 1)], Tensor::from_rows(&x), None).unwrap()
    }

    fn triangle(x: Tensor) -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)], x, None).unwrap()
    }

    #[test]
    fn laplacian_of_single_edge() {
        let g = edge2(vec![vec![1.0], vec![1.0]]);
        let l = normalized_laplacian(&g, DEGREE_EPS);
        assert_eq!(l, Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]));
    }

    #[test]
    fn laplacian_without_edges_is_identity() {
        let g = Graph::new(Tensor::zeros(3, 3), Tensor::full(3, 1, 1.0), None).unwrap();
        assert_eq!(normalized_laplacian(&g, 1e-8), Tensor::identity(3));
    }

    #[test]
    fn laplacian_of_triangle() {
        let g = triangle(Tensor::full(3, 1, 1.0));
        let l = normalized_laplacian(&g, DEGREE_EPS);
        let expected = Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { -0.5 });
        assert!(l.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn energies_of_small_graphs() {
        let smooth = edge2(vec![vec![1.0], vec![1.0]]);
        assert!(dirichlet_energy(&smooth, DEGREE_EPS).unwrap().abs() < 1e-15);
        let rough = edge2(vec![vec![1.0], vec![-1.0]]);
        assert!((dirichlet_energy(&rough, DEGREE_EPS).unwrap() - 2.0).abs() < 1e-15);
        let tri = triangle(Tensor::full(3, 2, 0.7));
        assert!(dirichlet_energy(&tri, DEGREE_EPS).unwrap().abs() < 1e-15);
    }

    #[test]
    fn zero_features_are_rejected() {
        let g = triangle(Tensor::zeros(3, 2));
        assert!(matches!(
            dirichlet_energy(&g, DEGREE_EPS),
            Err(Error::ZeroFeatures { .. })
        ));
    }

    #[test]
    fn validate_reports_violations() {
        let x = Tensor::full(2, 1, 1.0);
        let asym = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert!(matches!(
            Graph::new(asym, x.clone(), None),
            Err(Error::AsymmetricAdjacency { .. })
        ));
        let diag = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(
            Graph::new(diag, x.clone(), None),
            Err(Error::NonzeroDiagonal { index: 0, .. })
        ));
        let neg = Tensor::from_rows(&[vec![0.0, -0.1], vec![-0.1, 0.0]]);
        assert!(matches!(
            Graph::new(neg, x.clone(), None),
            Err(Error::NegativeWeight { .. })
        ));
        assert!(matches!(
            Graph::new(Tensor::zeros(3, 3), x, None),
            Err(Error::FeatureShapeMismatch { rows: 2, nodes: 3 })
        ));
        assert!(triangle(Tensor::full(3, 1, 1.0)).validate().is_ok());
    }

    #[test]
    fn energy_var_matches_plain_energy() {
        let adj = Tensor::from_rows(&[
            vec![0.0, 0.3, 0.9, 0.0],
            vec![0.3, 0.0, 0.5, 0.2],
            vec![0.9, 0.5, 0.0, 0.7],
            vec![0.0, 0.2, 0.7, 0.0],
        ]);
        let x = Tensor::from_fn(4, 2, |i, j| ((i * 3 + j) as f64).sin());
        let plain = energy_of(&adj, &x, DEGREE_EPS).unwrap();
        let tape = Tape::new();
        let e = energy_var(tape.constant(adj), tape.constant(x), DEGREE_EPS).unwrap();
        assert!((e.item() - plain).abs() < 1e-12);
    }

    #[test]
    fn mixed_labels_rejected() {
        let a = triangle(Tensor::full(3, 1, 1.0));
        let mut b = a.clone();
        b.label = Some(0);
        assert!(Domain::new(vec![a, b], 1, 1).is_err());
    }
}
