//! Soft node clustering with a modularity objective and collapse
//! regularization, and aggregation of raw node features into projected
//! cluster features.

use rand::Rng;

use crate::encoders::{Linear, ProjectionHead};
use crate::error::{Error, Result};
use crate::graphs::ModularityInputs;
use crate::numgrad::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

/// Row-softmax assignment of nodes to `clusters` soft clusters.
#[derive(Clone, Debug)]
pub struct ClusterHead {
    pub linear: Linear,
    pub clusters: usize,
}

impl ClusterHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        clusters: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, in_dim, clusters, rng),
            clusters,
        }
    }

    /// `[n × h] → [n × N]`, rows summing to one.
    pub fn assign(&self, tape: &Tape, store: &ParamStore, node_repr: Var) -> Result<Var> {
        Ok(tape.softmax_rows(self.linear.forward(tape, store, node_repr)?)?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.linear.params()
    }
}

/// Assignment matrix plus the projected cluster features it produced.
#[derive(Clone, Copy, Debug)]
pub struct ClusterSet {
    pub assignment: Var,
    pub features: Var,
    pub modality: Modality,
    pub clusters: usize,
}

/// The two parts of the clustering loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct DmonTerms {
    /// `−Tr(CᵀBC) / 2m`
    pub modularity: Var,
    /// `(√k / n)·‖Σᵢ Cᵢ‖ − 1`
    pub collapse: Var,
    pub total: Var,
}

pub fn dmon_loss(tape: &Tape, assignment: Var, inputs: &ModularityInputs) -> Result<DmonTerms> {
    let shape = tape.shape(assignment);
    let (n, k) = (shape[0], shape[1]);
    if inputs.matrix.rows() != n {
        return Err(Error::Config(format!(
            "dmon: assignment has {n} rows but modularity matrix is {}×{}",
            inputs.matrix.rows(),
            inputs.matrix.cols()
        )));
    }
    if inputs.edge_count == 0 {
        return Err(crate::graphs::GraphError::Edgeless.into());
    }
    let b = tape.constant(inputs.matrix.clone());
    let bc = tape.matmul(b, assignment)?;
    let trace = tape.sum(tape.mul(assignment, bc)?);
    let modularity = tape.scale(trace, -1.0 / (2.0 * inputs.edge_count as f64));

    let column_mass = tape.sum_rows(assignment)?;
    let collapse = tape.add_scalar(
        tape.scale(tape.l2_norm(column_mass), (k as f64).sqrt() / n as f64),
        -1.0,
    );
    let total = tape.add(modularity, collapse)?;
    Ok(DmonTerms {
        modularity,
        collapse,
        total,
    })
}

/// `proj(SeLU((C / N)ᵀ · raw_nodes))`, one row per cluster.
pub fn aggregate_clusters(
    tape: &Tape,
    store: &ParamStore,
    assignment: Var,
    raw_nodes: Var,
    proj: &ProjectionHead,
    clusters: usize,
) -> Result<Var> {
    let (cs, rs) = (tape.shape(assignment), tape.shape(raw_nodes));
    if cs[0] != rs[0] || cs[1] != clusters {
        return Err(Error::Config(format!(
            "aggregate: assignment {cs:?} incompatible with nodes {rs:?} and {clusters} clusters"
        )));
    }
    if proj.0.in_dim != rs[1] {
        return Err(Error::Config(format!(
            "aggregate: projection expects {} inputs, nodes have {}",
            proj.0.in_dim, rs[1]
        )));
    }
    let scaled = tape.scale(tape.transpose(assignment)?, 1.0 / clusters as f64);
    let pooled = tape.matmul(scaled, raw_nodes)?;
    proj.forward(tape, store, tape.selu(pooled))
}

/// Hard view of an assignment: `(argmax cluster, its probability)` per node.
pub fn hard_assignment(assignment: &Tensor) -> Vec<(usize, f64)> {
    (0..assignment.rows())
        .map(|i| {
            let row = assignment.row(i);
            let best = crate::encoders::argmax(row);
            (best, row[best])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graphs::{knn_graph, modularity_inputs, Graph};
    use crate::numgrad::SELU_LAMBDA;

    fn hard(n: usize, k: usize, labels: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(&[n, k]);
        for (i, &c) in labels.iter().enumerate() {
            t.data_mut()[i * k + c] = 1.0;
        }
        t
    }

    fn two_triangles() -> Graph {
        let mut adj = Tensor::zeros(&[6, 6]);
        for block in [[0, 1, 2], [3, 4, 5]] {
            for &i in &block {
                for &j in &block {
                    if i != j {
                        adj.data_mut()[i * 6 + j] = 1.0;
                    }
                }
            }
        }
        Graph::from_parts(Tensor::zeros(&[6, 1]), adj, 2).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Graph {
        let x = Tensor::new(
            &[n, 3],
            (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        knn_graph(&x, 3).unwrap()
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
        let mut t = Tensor::new(
            &[n, k],
            (0..n * k).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        for i in 0..n {
            let s: f64 = t.row(i).iter().sum();
            t.data_mut()[i * k..(i + 1) * k]
                .iter_mut()
                .for_each(|x| *x /= s);
        }
        t
    }

    #[test]
    fn zero_head_assigns_uniformly() {
        let mut store = ParamStore::new();
        let head = ClusterHead::new(&mut store, "c", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        store.get_mut(head.linear.weight).data_mut().fill(0.0);
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[5, 3], 0.7));
        let c = tape.value(head.assign(&tape, &store, x).unwrap());
        assert!(c.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_cluster_collapse_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 9);
        let m = modularity_inputs(&g).unwrap();
        let k = 4;
        let tape = Tape::new();
        let c = tape.constant(hard(9, k, &[2; 9]));
        let terms = dmon_loss(&tape, c, &m).unwrap();
        assert!(tape.item(terms.modularity).abs() < 1e-9);
        assert!((tape.item(terms.total) - ((k as f64).sqrt() - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn balanced_assignment_has_no_collapse_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(&mut rng, 12);
        let m = modularity_inputs(&g).unwrap();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let tape = Tape::new();
        let terms = dmon_loss(&tape, tape.constant(hard(12, 3, &labels)), &m).unwrap();
        assert!(tape.item(terms.collapse).abs() < 1e-9);
    }

    #[test]
    fn two_triangles_by_component() {
        let m = modularity_inputs(&two_triangles()).unwrap();
        assert_eq!(m.edge_count, 6);
        let tape = Tape::new();
        let terms = dmon_loss(&tape, tape.constant(hard(6, 2, &[0, 0, 0, 1, 1, 1])), &m).unwrap();
        assert!((tape.item(terms.modularity) + 0.5).abs() < 1e-12);
        assert!((tape.item(terms.total) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregate_single_node() {
        let mut store = ParamStore::new();
        let proj = ProjectionHead::new(&mut store, "p", 3, 3, &mut ChaCha8Rng::seed_from_u64(0));
        *store.get_mut(proj.0.weight) = Tensor::identity(3).with_grad();
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 1], 1.0));
        let x = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap());
        let out = tape.value(aggregate_clusters(&tape, &store, c, x, &proj, 1).unwrap());
        let expected = [
            0.5 * SELU_LAMBDA,
            tape.item(tape.selu(tape.constant(Tensor::scalar(-1.0)))),
            2.0 * SELU_LAMBDA,
        ];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_assignment_gives_identical_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let proj = ProjectionHead::new(&mut store, "p", 4, 5, &mut rng);
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[6, 3], 1.0 / 3.0));
        let x = tape.constant(
            Tensor::new(&[6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        let out = tape.value(aggregate_clusters(&tape, &store, c, x, &proj, 3).unwrap());
        for r in 1..3 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn aggregate_rejects_projection_mismatch() {
        let mut store = ParamStore::new();
        let proj = ProjectionHead::new(&mut store, "p", 2, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3, 2], 0.5));
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            aggregate_clusters(&tape, &store, c, x, &proj, 2),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn loss_terms_are_bounded(seed in 0u64..300, n in 4usize..20, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = modularity_inputs(&random_graph(&mut rng, n)).unwrap();
            let tape = Tape::new();
            let c = tape.constant(random_stochastic(&mut rng, n, k));
            let terms = dmon_loss(&tape, c, &m).unwrap();
            let (q, r) = (tape.item(terms.modularity), tape.item(terms.collapse));
            prop_assert!((-1.0..=1.0).contains(&q));
            prop_assert!(r >= -1e-12 && r <= (k as f64).sqrt() - 1.0 + 1e-12);
        }

        #[test]
        fn aggregation_is_permutation_equivariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let proj = ProjectionHead::new(&mut store, "p", 3, 4, &mut rng);
            let (n, k) = (7, 3);
            let c = random_stochastic(&mut rng, n, k);
            let x = Tensor::new(&[n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let perm: Vec<usize> = (0..n).rev().collect();
            let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&p| t.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
            let tape = Tape::new();
            let a = aggregate_clusters(&tape, &store, tape.constant(c.clone()), tape.constant(x.clone()), &proj, k).unwrap();
            let b = aggregate_clusters(&tape, &store, tape.constant(permute(&c)), tape.constant(permute(&x)), &proj, k).unwrap();
            for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }
    }
}
