//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use graphmatch::encoders::{GcnEncoder, BN_EPS};
use graphmatch::numgrad::{ParamStore, Tensor};
use rand::Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn to_matrix(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Minimum total cost over every injection of rows into columns.
pub fn brute_force_assignment(cost: &Matrix) -> f64 {
    fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cols], 0.0, &mut best);
    if cost.is_empty() {
        0.0
    } else {
        best
    }
}

/// Symmetrized k-NN adjacency by fully sorting each row on
/// `(squared distance, index)`.
pub fn sort_knn(points: &Matrix, k: usize) -> Matrix {
    let n = points.len();
    let mut adj = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                (d, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            adj[i][j] = 1.0;
            adj[j][i] = 1.0;
        }
    }
    adj
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn param_matrix(store: &ParamStore, id: graphmatch::numgrad::ParamId) -> Matrix {
    to_matrix(store.get(id))
}

fn param_vector(store: &ParamStore, id: graphmatch::numgrad::ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

/// Dense loop-based GCN over a batch of graphs without dropout. With
/// `batch_stats` batch norm uses the biased statistics of all stacked nodes,
/// otherwise the encoder's running statistics. Returns one readout row per
/// graph.
pub fn gcn_oracle(
    enc: &GcnEncoder,
    store: &ParamStore,
    adjacency: &[Matrix],
    features: &[Matrix],
    batch_stats: bool,
) -> Matrix {
    let propagation: Vec<Matrix> = adjacency
        .iter()
        .map(|a| {
            let n = a.len();
            let deg: Vec<f64> = (0..n).map(|i| 1.0 + a[i].iter().sum::<f64>()).collect();
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let e = a[i][j] + if i == j { 1.0 } else { 0.0 };
                            e / (deg[i] * deg[j]).sqrt()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut h: Vec<Matrix> = features.to_vec();
    for layer in &enc.layers {
        let w = param_matrix(store, layer.propagate_weight);
        let lw = param_matrix(store, layer.linear.weight);
        let lb = param_vector(store, layer.linear.bias);
        let gamma = param_vector(store, layer.norm.gamma);
        let beta = param_vector(store, layer.norm.beta);
        let mixed: Vec<Matrix> = h
            .iter()
            .zip(&propagation)
            .map(|(x, p)| {
                let mut m = matmul(&matmul(&matmul(p, x), &w), &lw);
                for row in &mut m {
                    for (v, b) in row.iter_mut().zip(&lb) {
                        *v += b;
                    }
                }
                m
            })
            .collect();
        let d = lb.len();
        let (mean, var) = if batch_stats {
            let rows: Vec<&Vec<f64>> = mixed.iter().flatten().collect();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..d)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
                .collect();
            let var: Vec<f64> = (0..d)
                .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n)
                .collect();
            (mean, var)
        } else {
            (
                layer.norm.running_mean.clone(),
                layer.norm.running_var.clone(),
            )
        };
        h = mixed
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|row| {
                        (0..d)
                            .map(|j| {
                                let y = gamma[j] * (row[j] - mean[j]) / (var[j] + BN_EPS).sqrt()
                                    + beta[j];
                                y.max(0.0)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
    }
    h.iter()
        .map(|nodes| {
            let n = nodes.len() as f64;
            (0..nodes[0].len())
                .map(|j| nodes.iter().map(|r| r[j]).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Random symmetric 0/1 adjacency with an empty diagonal and at least one
/// edge.
pub fn random_adjacency(rng: &mut impl Rng, n: usize, p: f64) -> Matrix {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
    }
    a[0][1] = 1.0;
    a[1][0] = 1.0;
    a
}
