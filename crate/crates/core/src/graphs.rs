//! k-nearest-neighbor graphs over node feature sets, plus the adjacency
//! derived quantities consumed by the GCN encoders and the modularity loss.
//!
//! Edges are selected by L2 distance with the node itself excluded, ties
//! broken toward the lower node index, and the directed relation is
//! symmetrized with `A := max(A, Aᵀ)`. The adjacency is a constant with
//! respect to gradients.

use thiserror::Error;

use crate::numgrad::{Csr, NumError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph needs at least 2 nodes, got {0}")]
    Degenerate(usize),
    #[error("neighbor count must be at least 1")]
    ZeroK,
    #[error("node {0} has a non-finite feature")]
    NonFinite(usize),
    #[error("graph has no edges")]
    Edgeless,
    #[error("adjacency must be square, symmetric and zero on the diagonal")]
    InvalidAdjacency,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Node features with a binary symmetric adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub node_features: Tensor,
    pub adjacency: Tensor,
    pub k: usize,
}

impl Graph {
    /// Wraps an explicit adjacency after validating it.
    pub fn from_parts(
        node_features: Tensor,
        adjacency: Tensor,
        k: usize,
    ) -> Result<Self, GraphError> {
        let (n, c) = adjacency.dims2()?;
        if n != c || node_features.rows() != n {
            return Err(GraphError::InvalidAdjacency);
        }
        for i in 0..n {
            if adjacency.get2(i, i) != 0.0 {
                return Err(GraphError::InvalidAdjacency);
            }
            for j in 0..n {
                let a = adjacency.get2(i, j);
                if a != adjacency.get2(j, i) || (a != 0.0 && a != 1.0) {
                    return Err(GraphError::InvalidAdjacency);
                }
            }
        }
        Ok(Self {
            node_features,
            adjacency,
            k,
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.adjacency.row(i).iter().sum())
            .collect()
    }

    /// Undirected edge list `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency.get2(i, j) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Directed k-NN relation: for each node, its `min(k, n−1)` nearest other
/// nodes in ascending distance (ties toward the lower index).
pub fn knn_relation(features: &Tensor, k: usize) -> Result<Vec<Vec<usize>>, GraphError> {
    let (n, _) = features.dims2()?;
    if n < 2 {
        return Err(GraphError::Degenerate(n));
    }
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    if let Some(bad) = (0..n).find(|&i| features.row(i).iter().any(|x| !x.is_finite())) {
        return Err(GraphError::NonFinite(bad));
    }
    let take = k.min(n - 1);
    let mut out = Vec::with_capacity(n);
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(features.row(i), features.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let row = &dist[i * n..(i + 1) * n];
        cand.select_nth_unstable_by(take - 1, |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        cand.truncate(take);
        cand.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        out.push(cand);
    }
    Ok(out)
}

/// Builds the symmetrized k-NN graph over the rows of `features`.
pub fn knn_graph(features: &Tensor, k: usize) -> Result<Graph, GraphError> {
    let relation = knn_relation(features, k)?;
    let n = relation.len();
    let mut adj = Tensor::zeros(&[n, n]);
    for (i, nbrs) in relation.iter().enumerate() {
        for &j in nbrs {
            adj.data_mut()[i * n + j] = 1.0;
            adj.data_mut()[j * n + i] = 1.0;
        }
    }
    let mut node_features = features.clone();
    node_features.requires_grad = false;
    node_features.grad = None;
    Ok(Graph {
        node_features,
        adjacency: adj,
        k,
    })
}

/// Degrees, edge count and modularity matrix `B = A − d·dᵀ/(2m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModularityInputs {
    pub degrees: Vec<f64>,
    pub edge_count: usize,
    pub matrix: Tensor,
}

pub fn modularity_inputs(g: &Graph) -> Result<ModularityInputs, GraphError> {
    let n = g.n();
    let degrees = g.degrees();
    let twice_m: f64 = degrees.iter().sum();
    if twice_m == 0.0 {
        return Err(GraphError::Edgeless);
    }
    let mut b = g.adjacency.clone();
    for i in 0..n {
        for j in 0..n {
            b.data_mut()[i * n + j] -= degrees[i] * degrees[j] / twice_m;
        }
    }
    Ok(ModularityInputs {
        degrees,
        edge_count: (twice_m / 2.0).round() as usize,
        matrix: b,
    })
}

/// Symmetric GCN propagation matrix `D̂^{-1/2} (A + I) D̂^{-1/2}`.
pub fn normalized_adjacency(g: &Graph) -> Tensor {
    let n = g.n();
    let mut a_hat = g.adjacency.clone();
    for i in 0..n {
        a_hat.data_mut()[i * n + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a_hat.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a_hat.data_mut()[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a_hat
}

/// Sparse form of [`normalized_adjacency`].
pub fn propagation_matrix(g: &Graph) -> Csr {
    Csr::from_dense(&normalized_adjacency(g)).expect("square by construction")
}
