//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits nonzero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use graphmatch::cli::{cmd_train, gradcheck_report, ConfigArgs, DataArgs, TrainArgs};
use graphmatch::clustering::dmon_loss;
use graphmatch::config::RunConfig;
use graphmatch::data::evaluate;
use graphmatch::encoders::{GcnEncoder, Mode};
use graphmatch::graphs::{knn_graph, modularity_inputs, Graph};
use graphmatch::matching::hungarian;
use graphmatch::numgrad::{ParamStore, Tape, Tensor};
use graphmatch::pipeline;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::tiny();
    let widths = [
        cfg.d_g,
        cfg.d_t,
        cfg.proj_dim,
        cfg.adapter_dim,
        cfg.synth.feature_dim,
    ];
    ensure(widths.iter().all(|&w| w <= 8), || {
        format!("widths {widths:?} exceed 8")
    })?;
    let sources = cfg.synth.domains - 1;
    ensure(
        sources * cfg.batch_per_domain == 2 && cfg.n_v == 3 && cfg.n_t == 2,
        || "tiny config shape".into(),
    )?;
    let (report, passed) = gradcheck_report(&cfg, false).map_err(|e| e.to_string())?;
    let worst = report
        .lines()
        .filter(|l| l.ends_with("\tok") || l.ends_with("\tFAIL"))
        .filter_map(|l| l.split('\t').nth(1)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    ensure(passed, || {
        format!("worst relative error {worst:.3e}\n{report}")
    })?;
    within(start.elapsed(), 60)?;
    Ok(format!(
        "10 terms, worst rel. error {worst:.2e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn hungarian_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..500 {
        let c = rng.gen_range(1..=6);
        let r = rng.gen_range(1..=c);
        let cost: Matrix = (0..r)
            .map(|_| (0..c).map(|_| rng.gen_range(0..20) as f64).collect())
            .collect();
        let got = hungarian(&Tensor::from_rows(&cost).unwrap()).map_err(|e| e.to_string())?;
        let mut cols = got.mu.clone();
        cols.sort();
        cols.dedup();
        ensure(cols.len() == r, || {
            format!("case {case}: assignment {:?} not injective", got.mu)
        })?;
        let want = brute_force_assignment(&cost);
        ensure(got.total_cost == want, || {
            format!("case {case}: {} vs oracle {want}", got.total_cost)
        })?;
    }
    within(start.elapsed(), 10)?;
    Ok(format!(
        "500 cases exact, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn dmon_value(adj: &Matrix, assignment: &Matrix) -> (f64, f64, f64) {
    let n = adj.len();
    let g = Graph::from_parts(Tensor::zeros(&[n, 1]), Tensor::from_rows(adj).unwrap(), 1).unwrap();
    let inputs = modularity_inputs(&g).unwrap();
    let tape = Tape::new();
    let c = tape.constant(Tensor::from_rows(assignment).unwrap());
    let t = dmon_loss(&tape, c, &inputs).unwrap();
    (
        tape.item(t.modularity),
        tape.item(t.collapse),
        tape.item(t.total),
    )
}

fn hard(n: usize, k: usize, cluster_of: impl Fn(usize) -> usize) -> Matrix {
    (0..n)
        .map(|i| {
            (0..k)
                .map(|c| if cluster_of(i) == c { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

fn dmon_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 2..=5 {
        let adj = random_adjacency(&mut rng, 8, 0.4);
        let (_, _, total) = dmon_value(&adj, &hard(8, k, |_| 0));
        let want = (k as f64).sqrt() - 1.0;
        ensure((total - want).abs() <= 1e-9, || {
            format!("single cluster k={k}: {total} vs {want}")
        })?;
    }
    for k in [2, 3, 4] {
        let n = 12;
        let adj = random_adjacency(&mut rng, n, 0.3);
        let (_, collapse, _) = dmon_value(&adj, &hard(n, k, |i| i % k));
        ensure(collapse.abs() <= 1e-9, || {
            format!("balanced k={k}: collapse {collapse}")
        })?;
    }
    let mut tri = vec![vec![0.0; 6]; 6];
    for (i, j) in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)] {
        tri[i][j] = 1.0;
        tri[j][i] = 1.0;
    }
    let (_, _, total) = dmon_value(&tri, &hard(6, 2, |i| i / 3));
    ensure((total + 0.5).abs() <= 1e-9, || {
        format!("two triangles: {total}")
    })?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for case in 0..200 {
        let n = rng.gen_range(2..=15);
        let k = rng.gen_range(1..=5);
        let adj = {
            let p = rng.gen_range(0.1..0.9);
            random_adjacency(&mut rng, n, p)
        };
        let c: Matrix = (0..n)
            .map(|_| {
                let row: Vec<f64> = (0..k).map(|_| rng.gen::<f64>().powi(3)).collect();
                let s: f64 = row.iter().sum::<f64>().max(1e-300);
                row.iter().map(|x| x / s).collect()
            })
            .collect();
        let (m, _, _) = dmon_value(&adj, &c);
        ensure((-1.0..=1.0).contains(&m), || {
            format!("case {case}: modularity {m}")
        })?;
        lo = lo.min(m);
        hi = hi.max(m);
    }
    Ok(format!(
        "identities hold, modularity range [{lo:.3}, {hi:.3}] on 200 instances"
    ))
}

fn gcn_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (din, dout) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let mut store = ParamStore::new();
        let mut enc = GcnEncoder::new(&mut store, "g", din, dout, 0.0, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        for layer in &mut enc.layers {
            layer.norm.running_mean = (0..dout).map(|_| rng.gen_range(-0.5..0.5)).collect();
            layer.norm.running_var = (0..dout).map(|_| rng.gen_range(0.5..2.0)).collect();
        }
        let batch = rng.gen_range(1..=3);
        let mut adjs = Vec::new();
        let mut feats = Vec::new();
        for _ in 0..batch {
            let n = rng.gen_range(2..=10);
            adjs.push({
                let p = rng.gen_range(0.1..0.8);
                random_adjacency(&mut rng, n, p)
            });
            feats.push(random_matrix(&mut rng, n, din));
        }
        let graphs: Vec<Graph> = adjs
            .iter()
            .zip(&feats)
            .map(|(a, f)| {
                Graph::from_parts(
                    Tensor::from_rows(f).unwrap(),
                    Tensor::from_rows(a).unwrap(),
                    1,
                )
                .unwrap()
            })
            .collect();
        let refs: Vec<&Graph> = graphs.iter().collect();
        for (mode, batch_stats) in [(Mode::Eval, false), (Mode::Train, true)] {
            let tape = Tape::new();
            let vars: Vec<_> = feats
                .iter()
                .map(|f| tape.constant(Tensor::from_rows(f).unwrap()))
                .collect();
            let out = enc
                .forward_batch(&tape, &store, &refs, &vars, mode, &mut rng)
                .map_err(|e| e.to_string())?;
            let got = tape.value(out.graph_repr);
            let want: Vec<f64> = gcn_oracle(&enc, &store, &adjs, &feats, batch_stats).concat();
            let err = max_abs_diff(got.data(), &want);
            worst = worst.max(err);
            ensure(err <= 1e-9, || {
                format!("case {case} {mode:?}: deviation {err:e}")
            })?;
        }

        let n = feats[0].len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(rng.gen_range(0..n));
        let pf: Matrix = perm.iter().map(|&i| feats[0][i].clone()).collect();
        let pa: Matrix = perm
            .iter()
            .map(|&i| perm.iter().map(|&j| adjs[0][i][j]).collect())
            .collect();
        let encode = |f: &Matrix, a: &Matrix| {
            let g = Graph::from_parts(
                Tensor::from_rows(f).unwrap(),
                Tensor::from_rows(a).unwrap(),
                1,
            )
            .unwrap();
            let tape = Tape::new();
            let x = tape.constant(Tensor::from_rows(f).unwrap());
            let (r, _) = enc
                .forward(
                    &tape,
                    &store,
                    &g,
                    x,
                    Mode::Eval,
                    &mut ChaCha8Rng::seed_from_u64(0),
                )
                .unwrap();
            tape.value(r).data().to_vec()
        };
        let err = max_abs_diff(&encode(&feats[0], &adjs[0]), &encode(&pf, &pa));
        worst = worst.max(err);
        ensure(err <= 1e-9, || {
            format!("case {case}: readout changed by {err:e} under permutation")
        })?;
    }
    Ok(format!("50 graphs, worst deviation {worst:.1e}"))
}

fn knn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut ties = 0;
    for case in 0..200 {
        let n = rng.gen_range(2..=30);
        let d = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=8);
        // even cases live on a coarse integer grid to force distance ties
        let points: Matrix = if case % 2 == 0 {
            ties += 1;
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(0..3) as f64).collect())
                .collect()
        } else {
            random_matrix(&mut rng, n, d)
        };
        let g = knn_graph(&Tensor::from_rows(&points).unwrap(), k).map_err(|e| e.to_string())?;
        let want = sort_knn(&points, k);
        ensure(to_matrix(&g.adjacency) == want, || {
            format!("case {case}: adjacency differs (n={n}, k={k})")
        })?;
    }
    Ok(format!("200 instances match, {ties} with forced ties"))
}

const DG_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DG_STEPS: usize = 500;
const DG_LR: f64 = 0.01;
/// Gap between the full model and the classifier-only baseline in accuracy
/// points, measured once on these seeds (full 37.3, global 36.6, L_c 32.6).
/// The raw and domain-centered centroid oracles average 27.3 and 63.8, so
/// the gap sits well inside the separable range.
const DG_MARGIN: f64 = 4.8;
const DG_TOLERANCE: f64 = 2.0;

fn dg_variant(seed: u64, global: bool, local: bool) -> Result<f64, String> {
    let mut cfg = RunConfig {
        seed,
        steps: DG_STEPS,
        lr: DG_LR,
        use_global: global,
        use_local: local,
        use_gv_classifier: global || local,
        ..RunConfig::default()
    };
    cfg.synth.seed = seed;
    let prepared = pipeline::prepare(&cfg, pipeline::synthetic(&cfg).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let (model, _) = pipeline::train(&cfg, &prepared, |_, _| Ok(())).map_err(|e| e.to_string())?;
    Ok(100.0
        * evaluate(&model, &prepared.split, &prepared.dataset)
            .map_err(|e| e.to_string())?
            .accuracy())
}

fn dg_direction() -> Outcome {
    let start = Instant::now();
    let (mut full, mut global, mut lc) = (0.0, 0.0, 0.0);
    for &seed in &DG_SEEDS {
        full += dg_variant(seed, true, true)?;
        global += dg_variant(seed, true, false)?;
        lc += dg_variant(seed, false, false)?;
    }
    let k = DG_SEEDS.len() as f64;
    let (full, global, lc) = (full / k, global / k, lc / k);
    let summary = format!(
        "full {full:.1}, global {global:.1}, L_c {lc:.1}; gap {:.1} vs pinned {DG_MARGIN:.1}±{DG_TOLERANCE:.0}; {:.0}s",
        full - lc,
        start.elapsed().as_secs_f64()
    );
    ensure(full >= global && global >= lc, || {
        format!("ordering violated: {summary}")
    })?;
    ensure((full - lc - DG_MARGIN).abs() <= DG_TOLERANCE, || {
        format!("margin off: {summary}")
    })?;
    within(start.elapsed(), 600)?;
    Ok(summary)
}

fn train_args(out: &std::path::Path) -> TrainArgs {
    TrainArgs {
        config: ConfigArgs {
            config: None,
            overrides: Vec::new(),
            seed: Some(7),
        },
        data: DataArgs {
            data: None,
            synthetic: true,
            target_domain: None,
        },
        few_shot_k: None,
        steps: Some(200),
        out: out.to_path_buf(),
    }
}

fn determinism(logs: &mut Vec<String>) -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut bytes = Vec::new();
    for d in &dirs {
        cmd_train(&train_args(d.path()), &mut std::io::sink()).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(d.path().join("train_log.jsonl")).map_err(|e| e.to_string())?);
    }
    let lines = bytes[0].iter().filter(|&&b| b == b'\n').count();
    ensure(lines == 200, || {
        format!("expected 200 log lines, got {lines}")
    })?;
    ensure(bytes[0] == bytes[1], || {
        "loss logs differ between runs".into()
    })?;
    logs.extend(
        String::from_utf8(bytes.swap_remove(0))
            .unwrap()
            .lines()
            .map(str::to_string),
    );
    Ok(format!("{lines} steps, {} identical bytes", bytes[0].len()))
}

fn breakdown_consistency(logs: &[String]) -> Outcome {
    ensure(!logs.is_empty(), || "no logged steps".into())?;
    let w = RunConfig::default().weights;
    let mut worst: f64 = 0.0;
    for line in logs {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let f = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
        let local = w.lambda_d * f("l_d")
            + w.lambda_h * f("l_h")
            + w.lambda_aux * f("l_aux_local")
            + w.lambda_p * f("l_p");
        let total = f("l_c") + f("l_global") + f("l_local") + f("l_gv_cls") + f("l_aux_global");
        let err = (local - f("l_local")).abs().max((total - f("total")).abs());
        ensure(err <= 1e-12, || {
            format!("step {}: deviation {err:e}", v["step"])
        })?;
        worst = worst.max(err);
    }
    Ok(format!("{} steps, worst deviation {worst:.1e}", logs.len()))
}

fn main() {
    let mut logs = Vec::new();
    let mut failures = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            failures += 1;
            println!("FAIL  {name}: {detail}");
        }
    };
    report("gradient suite", gradient_suite());
    report("hungarian oracle", hungarian_oracle());
    report("dmon identities", dmon_identities());
    report("gcn oracle", gcn_oracle_check());
    report("knn oracle", knn_oracle());
    report("synthetic dg direction", dg_direction());
    report("train determinism", determinism(&mut logs));
    report("breakdown self-consistency", breakdown_consistency(&logs));
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
