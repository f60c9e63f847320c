//! Optimal bipartite matching between textual and visual cluster sets and
//! the losses built on it.
//!
//! The assignment `μ` is a discrete choice and carries no gradient; the
//! distances of the selected pairs do.

use thiserror::Error;

use crate::clustering::ClusterSet;
use crate::error::Result;
use crate::numgrad::{Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("cannot match {rows} rows injectively into {cols} columns")]
    TooManyRows { rows: usize, cols: usize },
    #[error("cost[{row}][{col}] is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("cluster feature dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cost matrix must be rank 2")]
    NotMatrix,
}

/// Optimal injection `row i → column mu[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub mu: Vec<usize>,
    pub total_cost: f64,
    pub cost_matrix: Tensor,
}

impl MatchResult {
    pub fn pair_costs(&self) -> Vec<f64> {
        self.mu
            .iter()
            .enumerate()
            .map(|(i, &j)| self.cost_matrix.get2(i, j))
            .collect()
    }
}

/// Shortest-augmenting-path Hungarian method with row/column potentials on
/// a square `n × n` matrix. Returns the column assigned to each row.
fn solve_square(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Minimum-cost injective assignment of every row of `cost` (`r ≤ c`).
///
/// Rectangular inputs are padded to `c × c` with dummy rows of constant
/// sentinel cost, which leaves the optimum over the real rows unchanged.
pub fn hungarian(cost: &Tensor) -> Result<MatchResult, MatchError> {
    let (r, c) = cost.dims2().map_err(|_| MatchError::NotMatrix)?;
    if r > c {
        return Err(MatchError::TooManyRows { rows: r, cols: c });
    }
    for i in 0..r {
        for j in 0..c {
            if !cost.get2(i, j).is_finite() {
                return Err(MatchError::NonFinite { row: i, col: j });
            }
        }
    }
    if r == 0 {
        return Ok(MatchResult {
            mu: Vec::new(),
            total_cost: 0.0,
            cost_matrix: cost.clone(),
        });
    }
    let max_abs = cost.data().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let sentinel = 1e6 * max_abs.max(1.0);
    let mut square = vec![sentinel; c * c];
    square[..r * c].copy_from_slice(cost.data());

    let assignment = solve_square(&square, c);
    let mu = assignment[..r].to_vec();
    debug_assert!(mu
        .iter()
        .enumerate()
        .all(|(i, &j)| square[i * c + j] < sentinel));
    let total_cost = mu.iter().enumerate().map(|(i, &j)| cost.get2(i, j)).sum();
    Ok(MatchResult {
        mu,
        total_cost,
        cost_matrix: cost.clone(),
    })
}

/// `[rows(textual) × rows(visual)]` Euclidean distances.
pub fn distance_matrix(visual: &Tensor, textual: &Tensor) -> Result<Tensor, MatchError> {
    let (nv, dv) = visual.dims2().map_err(|_| MatchError::NotMatrix)?;
    let (nt, dt) = textual.dims2().map_err(|_| MatchError::NotMatrix)?;
    if dv != dt {
        return Err(MatchError::DimMismatch(dv, dt));
    }
    let mut out = vec![0.0; nt * nv];
    for i in 0..nt {
        for j in 0..nv {
            out[i * nv + j] = textual
                .row(i)
                .iter()
                .zip(visual.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(Tensor::new(&[nt, nv], out).expect("shape matches"))
}

/// Mean matched distance between two feature sets, value only.
pub fn matched_mean_distance(
    visual: &Tensor,
    textual: &Tensor,
) -> Result<(f64, MatchResult), MatchError> {
    let result = hungarian(&distance_matrix(visual, textual)?)?;
    let mean = result.total_cost / result.mu.len().max(1) as f64;
    Ok((mean, result))
}

fn matched_loss(tape: &Tape, visual: Var, textual: Var) -> Result<(Var, MatchResult)> {
    let (_, result) = matched_mean_distance(&tape.value(visual), &tape.value(textual))?;
    let picked = tape.gather_rows(visual, &result.mu)?;
    let dists = tape.row_l2_norms(tape.sub(picked, textual)?)?;
    Ok((tape.mean(dists), result))
}

/// Mean L2 distance over textual clusters of their optimally matched
/// visual clusters.
pub fn pairwise_match_loss(
    tape: &Tape,
    cv: &ClusterSet,
    ct: &ClusterSet,
) -> Result<(Var, MatchResult)> {
    matched_loss(tape, cv.features, ct.features)
}

/// Same computation as [`pairwise_match_loss`] for clusters originating
/// from different inputs. `visual_role` must have at least as many rows.
pub fn min_cross_distance(
    tape: &Tape,
    visual_role: &ClusterSet,
    textual_role: &ClusterSet,
) -> Result<(Var, MatchResult)> {
    matched_loss(tape, visual_role.features, textual_role.features)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HingeConfig {
    pub margin: f64,
}

impl Default for HingeConfig {
    fn default() -> Self {
        Self { margin: 1.0 }
    }
}

/// `max(0, lp − neg_vt + ε) + max(0, lp − neg_tv + ε)`.
pub fn hinge_loss(tape: &Tape, lp: Var, neg_vt: Var, neg_tv: Var, cfg: HingeConfig) -> Result<Var> {
    let a = tape.relu(tape.add_scalar(tape.sub(lp, neg_vt)?, cfg.margin));
    let b = tape.relu(tape.add_scalar(tape.sub(lp, neg_tv)?, cfg.margin));
    Ok(tape.add(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Modality;

    fn set(tape: &Tape, rows: &[Vec<f64>], modality: Modality) -> ClusterSet {
        let t = Tensor::from_rows(rows).unwrap().with_grad();
        let v = tape.var(&t);
        ClusterSet {
            assignment: v,
            features: v,
            modality,
            clusters: rows.len(),
        }
    }

    #[test]
    fn one_by_one() {
        let r = hungarian(&Tensor::from_rows(&[vec![5.0]]).unwrap()).unwrap();
        assert_eq!(r.mu, vec![0]);
        assert_eq!(r.total_cost, 5.0);
    }

    #[test]
    fn rectangular_two_by_three() {
        let c = Tensor::from_rows(&[vec![1.0, 9.0, 9.0], vec![9.0, 9.0, 1.0]]).unwrap();
        let r = hungarian(&c).unwrap();
        assert_eq!(r.mu, vec![0, 2]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let tall = Tensor::zeros(&[3, 2]);
        assert_eq!(
            hungarian(&tall),
            Err(MatchError::TooManyRows { rows: 3, cols: 2 })
        );
        let bad = Tensor::from_rows(&[vec![1.0, f64::INFINITY]]).unwrap();
        assert_eq!(
            hungarian(&bad),
            Err(MatchError::NonFinite { row: 0, col: 1 })
        );
    }

    #[test]
    fn identical_sets_match_identically() {
        let tape = Tape::new();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]];
        let (cv, ct) = (
            set(&tape, &rows, Modality::Visual),
            set(&tape, &rows, Modality::Textual),
        );
        let (loss, m) = pairwise_match_loss(&tape, &cv, &ct).unwrap();
        assert_eq!(tape.item(loss), 0.0);
        assert_eq!(m.mu, vec![0, 1, 2]);
    }

    #[test]
    fn single_text_cluster_picks_nearest() {
        let tape = Tape::new();
        let cv = set(
            &tape,
            &[vec![3.0, 0.0], vec![0.0, 1.0], vec![0.0, -2.0]],
            Modality::Visual,
        );
        let ct = set(&tape, &[vec![0.0, 0.0]], Modality::Textual);
        let (loss, m) = pairwise_match_loss(&tape, &cv, &ct).unwrap();
        assert_eq!(tape.item(loss), 1.0);
        assert_eq!(m.mu, vec![1]);
    }

    #[test]
    fn constant_distance_sets() {
        let tape = Tape::new();
        // every visual row is at distance 5 from every textual row
        let cv = set(&tape, &[vec![3.0, 4.0], vec![3.0, 4.0]], Modality::Visual);
        let ct = set(&tape, &[vec![0.0, 0.0]], Modality::Textual);
        let (d, _) = min_cross_distance(&tape, &cv, &ct).unwrap();
        assert!((tape.item(d) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn matching_gradient_flows_through_selected_pairs() {
        let tape = Tape::new();
        let cv = set(&tape, &[vec![3.0, 0.0], vec![0.0, 1.0]], Modality::Visual);
        let ct = set(&tape, &[vec![0.0, 0.0]], Modality::Textual);
        let (loss, _) = pairwise_match_loss(&tape, &cv, &ct).unwrap();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.wrt(cv.features).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.wrt(ct.features).unwrap(), &[0.0, -1.0]);
    }

    #[test]
    fn hinge_cases() {
        let tape = Tape::new();
        let s = |x: f64| tape.constant(Tensor::scalar(x));
        let eval = |lp, n1, n2, eps| {
            tape.item(hinge_loss(&tape, s(lp), s(n1), s(n2), HingeConfig { margin: eps }).unwrap())
        };
        assert_eq!(eval(0.0, 10.0, 10.0, 1.0), 0.0);
        assert_eq!(eval(5.0, 0.0, 0.0, 1.0), 12.0);
        assert_eq!(eval(2.5, 2.5, 2.5, 0.0), 0.0);
    }
}
