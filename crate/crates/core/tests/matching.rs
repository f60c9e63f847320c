mod common;

use graphmatch::clustering::{ClusterSet, Modality};
use graphmatch::matching::{
    distance_matrix, hungarian, matched_mean_distance, pairwise_match_loss,
};
use graphmatch::numgrad::{GradCheck, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_assignment, random_matrix, to_matrix};

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=6).prop_flat_map(|c| {
        (1usize..=c).prop_flat_map(move |r| {
            prop::collection::vec(prop::collection::vec(-5.0..5.0f64, c), r)
        })
    })
}

fn set(tape: &Tape, features: &Tensor, modality: Modality) -> ClusterSet {
    let v = tape.var(features);
    ClusterSet {
        assignment: v,
        features: v,
        modality,
        clusters: features.rows(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_is_optimal_on_real_costs(cost in cost_matrix()) {
        let got = hungarian(&Tensor::from_rows(&cost).unwrap()).unwrap();
        let want = brute_force_assignment(&cost);
        prop_assert!((got.total_cost - want).abs() <= 1e-9 * (1.0 + want.abs()));
        let mut cols = got.mu.clone();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(cols.len(), cost.len());
    }

    #[test]
    fn row_shifts_keep_the_assignment_optimal(cost in cost_matrix(), shift in -3.0..3.0f64) {
        let base = hungarian(&Tensor::from_rows(&cost).unwrap()).unwrap();
        let shifted: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
        let moved = hungarian(&Tensor::from_rows(&shifted).unwrap()).unwrap();
        let expect = base.total_cost + shift * cost.len() as f64;
        prop_assert!((moved.total_cost - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
    }

    #[test]
    fn matched_distance_ignores_visual_row_order(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = rng.gen_range(1..=5);
        let nt = rng.gen_range(1..=nv);
        let d = rng.gen_range(1..=4);
        let v = random_matrix(&mut rng, nv, d);
        let t = random_matrix(&mut rng, nt, d);
        let mut perm: Vec<usize> = (0..nv).collect();
        perm.rotate_left(rng.gen_range(0..nv));
        let pv: Vec<Vec<f64>> = perm.iter().map(|&i| v[i].clone()).collect();
        let (a, ma) = matched_mean_distance(&Tensor::from_rows(&v).unwrap(), &Tensor::from_rows(&t).unwrap()).unwrap();
        let (b, mb) = matched_mean_distance(&Tensor::from_rows(&pv).unwrap(), &Tensor::from_rows(&t).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= 0.0);
        // identical pairings after undoing the permutation, up to ties
        let dist = to_matrix(&distance_matrix(&Tensor::from_rows(&v).unwrap(), &Tensor::from_rows(&t).unwrap()).unwrap());
        let via_b: f64 = mb.mu.iter().enumerate().map(|(i, &j)| dist[i][perm[j]]).sum();
        prop_assert!((via_b - ma.total_cost).abs() <= 1e-12);
    }
}

#[test]
fn match_loss_gradient_inside_a_basin() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for _ in 0..40 {
        let (nv, nt, d) = (
            rng.gen_range(2..=5),
            rng.gen_range(1..=2),
            rng.gen_range(2..=4),
        );
        let v = Tensor::from_rows(&random_matrix(&mut rng, nv, d)).unwrap();
        let t = Tensor::from_rows(&random_matrix(&mut rng, nt, d)).unwrap();
        let base = matched_mean_distance(&v, &t).unwrap().1.mu;
        let costs = to_matrix(&distance_matrix(&v, &t).unwrap());
        // skip instances whose runner-up assignment is within reach of the step
        let best: f64 = base.iter().enumerate().map(|(i, &j)| costs[i][j]).sum();
        let second = (0..nt)
            .flat_map(|i| {
                let own = base[i];
                (0..nv).filter(move |&j| j != own).map(move |j| (i, j))
            })
            .map(|(i, j)| best - costs[i][base[i]] + costs[i][j])
            .fold(f64::INFINITY, f64::min);
        if second - best < 1e-3 {
            continue;
        }
        let err = GradCheck::default()
            .run(&[v.clone(), t.clone()], |tape, vars| {
                let a = set(tape, &tape.value(vars[0]), Modality::Visual);
                let b = set(tape, &tape.value(vars[1]), Modality::Textual);
                let (_, m) = pairwise_match_loss(tape, &a, &b).unwrap();
                assert_eq!(m.mu, base);
                let picked = tape.gather_rows(vars[0], &m.mu)?;
                let dists = tape.row_l2_norms(tape.sub(picked, vars[1])?)?;
                Ok(tape.mean(dists))
            })
            .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn tape_loss_equals_value_only_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let v = Tensor::from_rows(&random_matrix(&mut rng, 4, 3)).unwrap();
        let t = Tensor::from_rows(&random_matrix(&mut rng, 2, 3)).unwrap();
        let tape = Tape::new();
        let (loss, m) = pairwise_match_loss(
            &tape,
            &set(&tape, &v, Modality::Visual),
            &set(&tape, &t, Modality::Textual),
        )
        .unwrap();
        let (mean, other) = matched_mean_distance(&v, &t).unwrap();
        assert_eq!(m.mu, other.mu);
        assert!((tape.item(loss) - mean).abs() <= 1e-12);
    }
}
