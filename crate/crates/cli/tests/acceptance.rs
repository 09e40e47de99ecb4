//! Acceptance criteria, run in order. Each prints one PASS/FAIL line.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cgcn::centrality::{
    assemble_centrality_set, edge_betweenness_raw, joint_closeness, shortest_paths, triplet_comembership_raw,
    CentralityMode,
};
use cgcn::config::RunConfig;
use cgcn::dataio::{length_indices, synth_generate, LengthMode, SynthSpec};
use cgcn::experiment::{eval_models, train, Dataset, TrainOptions};
use cgcn::gradcheck::{run_gradcheck, GradcheckOptions};
use cgcn::graph::{SkeletonGraph, WeightedAdjacency};
use cgcn::net::Rng;
use cgcn::spectral::{
    chebyshev_conv, chebyshev_t, laplacian, linear_conv, spectral_conv_exact, ChebyshevFilter, SpectralDecomposition,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng};
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration) -> Result<(), String> {
    let took = started.elapsed();
    check(took < budget, || format!("took {took:.1?}, budget {budget:?}"))
}

fn centrality_oracles() -> Outcome {
    let started = Instant::now();
    let tol = 1e-9;
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = support::rng(seed);
        let n = rng.gen_range(2..=9);
        let m = support::random_connected(n, rng.gen_range(0.0..0.6), seed % 3 != 0, &mut rng);
        let adj = WeightedAdjacency::new(m.clone()).map_err(|e| e.to_string())?;
        let table = shortest_paths(&adj).map_err(|e| e.to_string())?;
        let closeness = joint_closeness(&table).map_err(|e| e.to_string())?;
        let d = support::max_abs_diff(&closeness, &support::closeness(&m));
        let b = edge_betweenness_raw(&adj, &table).map_err(|e| e.to_string())?;
        let db = b.max_abs_diff(&support::edge_betweenness(&m));
        worst = worst.max(d).max(db);
        check(d < tol && db < tol, || format!("seed {seed}: closeness {d:e}, betweenness {db:e}"))?;
    }
    for seed in 0..50 {
        let mut rng = support::rng(10_000 + seed);
        let edges = support::random_tree(25, &mut rng);
        let lengths: Vec<f64> = edges.iter().map(|_| rng.gen_range(0.05..0.6)).collect();
        let graph = SkeletonGraph::new(edges.clone(), 25, 3).map_err(|e| e.to_string())?;
        let adj = WeightedAdjacency::from_edge_weights(&graph, &lengths).map_err(|e| e.to_string())?;
        let b = edge_betweenness_raw(&adj, &shortest_paths(&adj).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let d = b.max_abs_diff(&support::tree_betweenness(&edges, 25));
        worst = worst.max(d);
        check(d < tol, || format!("tree seed {seed}: {d:e}"))?;
    }
    for seed in 0..50 {
        let mut rng = support::rng(20_000 + seed);
        let n = rng.gen_range(1..=25);
        let m = support::random_connected(n, rng.gen_range(0.0..0.4), true, &mut rng);
        let adj = WeightedAdjacency::new(m.clone()).map_err(|e| e.to_string())?;
        let d = triplet_comembership_raw(&adj).max_abs_diff(&support::triplets(&m));
        worst = worst.max(d);
        check(d < tol, || format!("triplet seed {seed}: {d:e}"))?;
    }
    within(started, Duration::from_secs(60))?;
    Ok(format!("max deviation {worst:.1e}, {:.1?}", started.elapsed()))
}

fn spectral_chain() -> Outcome {
    let started = Instant::now();
    let (mut linear_worst, mut interp_worst): (f64, f64) = (0.0, 0.0);
    let mut interpolated = 0;
    for seed in 0..200 {
        let mut rng = support::rng(30_000 + seed);
        let n = rng.gen_range(2..=10);
        let m = support::random_connected(n, rng.gen_range(0.1..0.6), false, &mut rng);
        let adj = WeightedAdjacency::new(m.clone()).map_err(|e| e.to_string())?;
        let l = laplacian(&adj).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let theta = rng.gen_range(-2.0..2.0);
        let lin = linear_conv(&adj, theta, &x).map_err(|e| e.to_string())?;
        let cheb = chebyshev_conv(&ChebyshevFilter::new(vec![theta, -theta]), &l, &x).map_err(|e| e.to_string())?;
        let d = support::max_abs_diff(&lin, &cheb);
        linear_worst = linear_worst.max(d);
        check(d < 1e-10, || format!("seed {seed}: linear vs first order {d:e}"))?;

        let decomp = SpectralDecomposition::new(&l).map_err(|e| e.to_string())?;
        let gap = decomp.lambda.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if gap >= 0.05 {
            interpolated += 1;
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scaled = |lam: f64| 2.0 * lam / decomp.lambda_max - 1.0;
            let v = DMatrix::from_fn(n, n, |k, mm| chebyshev_t(mm, scaled(decomp.lambda[k])));
            let coeffs = v.lu().solve(&DVector::from_column_slice(&values)).ok_or("singular interpolation")?;
            let filter = ChebyshevFilter::with_lambda_max(coeffs.iter().copied().collect(), decomp.lambda_max);
            let exact = spectral_conv_exact(&decomp, &values, &x).map_err(|e| e.to_string())?;
            let approx = chebyshev_conv(&filter, &l, &x).map_err(|e| e.to_string())?;
            let d = support::max_abs_diff(&exact, &approx);
            interp_worst = interp_worst.max(d);
            check(d < 1e-8, || format!("seed {seed}: interpolated vs exact {d:e}"))?;
        }

        let source = rng.gen_range(0..n);
        let hops = support::hops(&m, source);
        let mut delta = vec![0.0; n];
        delta[source] = 1.0;
        for order in 0..=3 {
            let coeffs: Vec<f64> = (0..=order).map(|_| rng.gen_range(0.5..1.5)).collect();
            let z = chebyshev_conv(&ChebyshevFilter::new(coeffs), &l, &delta).map_err(|e| e.to_string())?;
            for (i, &h) in hops.iter().enumerate() {
                check(h <= order || z[i] == 0.0, || format!("seed {seed}: order {order} reached node {i} at {h} hops"))?;
            }
        }
    }
    check(interpolated >= 50, || format!("only {interpolated} graphs with separated spectra"))?;
    within(started, Duration::from_secs(10))?;
    Ok(format!(
        "linear {linear_worst:.1e}, interpolated {interp_worst:.1e} on {interpolated} graphs, {:.1?}",
        started.elapsed()
    ))
}

fn gradient_checks() -> Outcome {
    let started = Instant::now();
    let report = run_gradcheck(&GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let per_layer = report.per_layer();
    let failed: Vec<String> = per_layer.iter().filter(|l| !l.2).map(|l| format!("{} {:.1e}", l.0, l.1)).collect();
    check(failed.is_empty(), || format!("failing layers: {}", failed.join(", ")))?;
    check(per_layer.iter().any(|l| l.0 == "model"), || "full model not checked".into())?;
    let worst = per_layer.iter().map(|l| l.1).fold(0.0, f64::max);
    check(worst < 1e-4, || format!("worst relative error {worst:e}"))?;
    within(started, Duration::from_secs(120))?;
    Ok(format!("{} layers, worst {worst:.1e}, {:.1?}", per_layer.len(), started.elapsed()))
}

fn desk_overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    synth_generate(&SynthSpec::default(), dir.path()).map_err(|e| e.to_string())?;
    let data = Dataset::load(&dir.path().join("manifest.csv")).map_err(|e| e.to_string())?;
    check(data.len() == 80, || format!("{} samples", data.len()))?;
    let config = RunConfig {
        epochs: 200,
        stop_at_train_top1: Some(0.95),
        ..RunConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let (outcome, eval) = pool.install(|| -> Result<_, String> {
        let mut outcome = train(&config, &data, &TrainOptions::default()).map_err(|e| e.to_string())?;
        let eval = eval_models(&mut outcome.models, &config, &data).map_err(|e| e.to_string())?;
        Ok((outcome, eval))
    })?;
    let took = started.elapsed();
    let epochs = &outcome.report.epochs;
    check(epochs.iter().all(|r| r.loss.is_finite()), || "non-finite loss".into())?;
    check(epochs.len() <= 200, || format!("{} epochs", epochs.len()))?;
    check(outcome.models.len() == 4, || format!("{} streams", outcome.models.len()))?;
    check(eval.top1 >= 0.95, || format!("fused training top-1 {} after {} epochs", eval.top1, epochs.len()))?;
    check(took < Duration::from_secs(600), || format!("took {took:.1?}"))?;
    Ok(format!("top-1 {:.3} after {} epochs, {took:.1?}", eval.top1, epochs.len()))
}

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cgcn"))
        .args(args)
        .env("CGCN_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("cgcn {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn cli_json(args: &[&str]) -> Result<Value, String> {
    let mut all = args.to_vec();
    all.push("--json");
    serde_json::from_slice(&cli(&all)?).map_err(|e| e.to_string())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    cli(&["synth", "generate", "--out", p(&data)])?;
    let manifest = data.join("manifest.csv");
    cli(&["train", p(&manifest), "--epochs", "10", "--out", p(&run)])?;
    let ckpt = run.join("checkpoints");
    let table = cli_json(&["ablate", p(&manifest), "--checkpoints", p(&ckpt), "--out", p(&dir.path().join("table"))])?;
    let rows = table["rows"].as_array().ok_or("no rows")?;
    let methods: Vec<&str> = rows.iter().filter_map(|r| r["method"].as_str()).collect();
    let want = ["CGCN", "CGCN without J", "CGCN without B", "CGCN without W", "Adjacency only"];
    check(methods == want, || format!("rows {methods:?}"))?;
    for row in rows {
        let streams = row["streams"].as_str().ok_or("no streams")?.replace('+', ",");
        let eval = cli_json(&["eval", p(&manifest), "--checkpoints", p(&ckpt), "--streams", &streams])?;
        for key in ["top1", "top5"] {
            check(eval[key] == row[key], || {
                format!("{}: ablation {} {} vs eval {}", row["method"], key, row[key], eval[key])
            })?;
        }
    }
    let markdown = std::fs::read_to_string(dir.path().join("table/ablation.md")).map_err(|e| e.to_string())?;
    check(markdown.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Method")).count() == 5, || {
        "markdown table does not have five rows".into()
    })?;
    let retrained = cli_json(&["ablate", p(&manifest), "--train", "--epochs", "10"])?;
    check(retrained["rows"] == table["rows"], || "training from scratch gave a different table".into())?;
    let top1: Vec<String> = rows.iter().map(|r| format!("{}", r["top1"])).collect();
    Ok(format!("5 rows match eval exactly (top-1 {})", top1.join("/")))
}

fn files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).map_err(|e| e.to_string())?.display().to_string();
                out.push((rel, std::fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut snapshots = Vec::new();
    for run in ["first", "second"] {
        let root = dir.path().join(run);
        let data = root.join("data");
        cli(&["synth", "generate", "--out", p(&data), "--seed", "17"])?;
        cli(&[
            "train",
            p(&data.join("manifest.csv")),
            "--epochs",
            "2",
            "--checkpoint-every",
            "1",
            "--seed",
            "17",
            "--out",
            p(&root.join("run")),
        ])?;
        snapshots.push(files(&root)?);
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    check(a.len() == b.len(), || format!("{} vs {} files", a.len(), b.len()))?;
    for (x, y) in a.iter().zip(b) {
        check(x == y, || format!("{} differs", x.0))?;
    }
    let checkpoints = a.iter().filter(|f| f.0.contains("checkpoints")).count();
    check(checkpoints == 12, || format!("{checkpoints} checkpoint files"))?;
    Ok(format!("{} files byte-identical ({checkpoints} checkpoints, reports, 80 sequences)", a.len()))
}

fn invariances() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (graph, poses) = support::random_case(seed);
        let mut rng = support::rng(40_000 + seed);
        let s = 10f64.powf(rng.gen_range(-2.0..2.0));
        let scaled = support::transform(&poses, |q| q.iter().map(|v| v * s).collect());
        let moved = support::transform(&poses, support::rigid_motion(&mut rng));
        for mode in [CentralityMode::SequenceMean, CentralityMode::PerFrame] {
            let base = assemble_centrality_set(&graph, &poses, mode).map_err(|e| e.to_string())?;
            for other in [&scaled, &moved] {
                let sets = assemble_centrality_set(&graph, other, mode).map_err(|e| e.to_string())?;
                for (x, y) in base.iter().zip(&sets) {
                    for name in ["J", "B", "W"] {
                        let d = x.matrix(name).ok_or("matrix")?.max_abs_diff(y.matrix(name).ok_or("matrix")?);
                        worst = worst.max(d);
                        check(d < 1e-9, || format!("seed {seed} {name}: {d:e}"))?;
                    }
                }
            }
        }
    }
    Ok(format!("20 sequences, max deviation {worst:.1e}"))
}

fn frame_normalization() -> Outcome {
    let idx = length_indices(120, 300, LengthMode::Repeat, &mut Rng::seed_from_u64(0));
    let want: Vec<usize> = (0..120).chain(0..120).chain(0..60).collect();
    check(idx == want, || "120 to 300 repetition pattern differs".into())?;
    let crop = |seed| length_indices(200, 150, LengthMode::RandomCrop, &mut Rng::seed_from_u64(seed));
    let a = crop(21);
    check(a == crop(21), || "crop not reproducible".into())?;
    check(a.len() == 150 && a.windows(2).all(|w| w[0] < w[1]) && a[149] < 200, || "crop is not a sorted subset".into())?;
    Ok("repetition index-exact, crop reproducible".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 centrality oracle equivalence", centrality_oracles),
        ("2 spectral equivalence chain", spectral_chain),
        ("3 gradient checks", gradient_checks),
        ("4 desk-scale overfit", desk_overfit),
        ("5 ablation harness", ablation_harness),
        ("6 determinism", determinism),
        ("7 scale and rigid-motion invariance", invariances),
        ("8 frame normalization", frame_normalization),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                println!("FAIL criterion {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
