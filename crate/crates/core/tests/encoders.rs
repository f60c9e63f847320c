mod common;

use graphmatch::encoders::{GcnEncoder, Mode};
use graphmatch::graphs::{knn_graph, Graph};
use graphmatch::numgrad::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gcn_oracle, max_abs_diff, random_adjacency, random_matrix, to_matrix};

fn encoder(
    rng: &mut ChaCha8Rng,
    din: usize,
    dout: usize,
    dropout: f64,
) -> (ParamStore, GcnEncoder) {
    let mut store = ParamStore::new();
    let enc = GcnEncoder::new(&mut store, "g", din, dout, dropout, rng);
    (store, enc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batched_pass_matches_loop_oracle(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (din, dout) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (store, enc) = encoder(&mut rng, din, dout, 0.0);
        let n = rng.gen_range(2..=9);
        let feats = random_matrix(&mut rng, n, din);
        let g = knn_graph(&Tensor::from_rows(&feats).unwrap(), rng.gen_range(1..=3)).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&feats).unwrap());
        let out = enc.forward_batch(&tape, &store, &[&g], &[x], Mode::Train, &mut rng).unwrap();
        let want = gcn_oracle(&enc, &store, &[to_matrix(&g.adjacency)], &[feats], true);
        prop_assert!(max_abs_diff(tape.value(out.graph_repr).data(), &want[0]) <= 1e-9);
    }

    #[test]
    fn node_outputs_permute_with_the_nodes(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, enc) = encoder(&mut rng, 3, 4, 0.0);
        let n = rng.gen_range(2..=8);
        let feats = random_matrix(&mut rng, n, 3);
        let adj = random_adjacency(&mut rng, n, 0.5);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(rng.gen_range(0..n));
        let pf: Vec<Vec<f64>> = perm.iter().map(|&i| feats[i].clone()).collect();
        let pa: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| adj[i][j]).collect()).collect();
        let nodes = |f: &Vec<Vec<f64>>, a: &Vec<Vec<f64>>| {
            let g = Graph::from_parts(Tensor::from_rows(f).unwrap(), Tensor::from_rows(a).unwrap(), 1).unwrap();
            let tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(f).unwrap());
            let (_, h) = enc.forward(&tape, &store, &g, x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            to_matrix(&tape.value(h))
        };
        let base = nodes(&feats, &adj);
        let moved = nodes(&pf, &pa);
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!(max_abs_diff(&moved[i], &base[p]) <= 1e-12);
        }
    }
}

#[test]
fn dropout_only_acts_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (store, enc) = encoder(&mut rng, 3, 6, 0.5);
    let feats = random_matrix(&mut rng, 6, 3);
    let g = knn_graph(&Tensor::from_rows(&feats).unwrap(), 2).unwrap();
    let pass = |mode, seed| {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&feats).unwrap());
        let out = enc
            .forward_batch(
                &tape,
                &store,
                &[&g],
                &[x],
                mode,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
        (
            tape.value(out.graph_repr).data().to_vec(),
            tape.value(out.node_repr).data().to_vec(),
        )
    };
    assert_eq!(pass(Mode::Eval, 1), pass(Mode::Eval, 2));
    let (a, nodes_a) = pass(Mode::Train, 1);
    let (b, nodes_b) = pass(Mode::Train, 2);
    assert_ne!(a, b);
    assert_eq!(nodes_a, nodes_b);
    assert_eq!(pass(Mode::Train, 1).0, a);
}
