//! Acceptance checks. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use reachped::ann::{AnnForest, AnnParams};
use reachped::cluster::{euclidean, hdbscan, prim_mst, ClusterParams};
use reachped::config::{RunConfig, Source};
use reachped::data::{TrajectoryChunk, FEATURES};
use reachped::encoder::{masked_batch, sample_column, Batch, Encoder, EncoderConfig, Mode};
use reachped::eval::{EvalReport, MethodKind};
use reachped::nn::max_relative_error;
use reachped::pipeline::{run_synthetic, REPORT_CSV, REPORT_JSON, TRAIN_LOG};
use reachped::reach::{identify_from_data, reach, ModelSet, Zonotope};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        d_c: 6,
        ..EncoderConfig::default()
    };
    let model = Encoder::<f64>::new(cfg, 1).unwrap();
    let mut r = rng(1);
    let chunks: Vec<TrajectoryChunk> = [6usize, 4, 5]
        .iter()
        .enumerate()
        .map(|(i, &real)| {
            let mut values = vec![0f32; 6 * FEATURES];
            for v in values.iter_mut().take(real * FEATURES) {
                *v = r.random_range(-1.5..1.5);
            }
            let mut padding = vec![0u8; 6];
            padding[..real].fill(1);
            TrajectoryChunk {
                values,
                padding,
                track_id: format!("g{i}"),
                start_frame: 0,
                dt: 0.1,
                split: None,
            }
        })
        .collect();
    let refs: Vec<&TrajectoryChunk> = chunks.iter().collect();
    let (masked, targets, weights) = masked_batch(&refs, 0.3, 2.0, &mut r).unwrap();
    let batch = Batch::<f64> {
        values: masked.values.iter().map(|&v| f64::from(v)).collect(),
        valid: masked.valid,
        batch: masked.batch,
        time: masked.time,
    };
    let targets: Vec<f64> = targets.iter().map(|&v| f64::from(v)).collect();
    let err = max_relative_error(model.params(), 1e-4, |g, vars| {
        let mut drop = rng(2);
        let out = model.forward(g, vars, &batch, Mode::Train { rng: &mut drop }).unwrap();
        g.masked_mse(out.pred, &targets, &weights).unwrap()
    });
    let took = start.elapsed();
    outcome(
        err < 1e-4 && took < Duration::from_secs(60),
        format!("max relative error {err:.2e} in {took:.1?}"),
    )
}

fn masking_statistics() -> Outcome {
    let (r, l_m, len) = (0.15, 3.0, 50);
    let mut g = rng(3);
    let (mut masked, mut cells, mut spans) = (0usize, 0usize, 0usize);
    for _ in 0..100_000 {
        let col = sample_column(len, r, l_m, &mut g);
        cells += col.len();
        masked += col.iter().filter(|&&v| v == 0).count();
        spans += col
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v == 0 && (i == 0 || col[i - 1] != 0))
            .count();
    }
    let frac = masked as f64 / cells as f64;
    let span = masked as f64 / spans as f64;
    outcome(
        (frac - r).abs() <= 0.02 && (span - l_m).abs() <= 0.05 * l_m,
        format!("masked fraction {frac:.4}, mean span {span:.3}"),
    )
}

/// Brute-force MST over the complete mutual-reachability graph (Kruskal).
fn kruskal_weights(points: &[Vec<f32>], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = points.iter().map(|q| euclidean(&points[i], q)).collect();
            d.sort_by(f64::total_cmp);
            d[min_samples - 1]
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            edges.push((euclidean(&points[a], &points[b]).max(core[a]).max(core[b]), a, b));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut out = Vec::new();
    for (w, a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            out.push(w);
        }
    }
    out
}

fn blob_points(scale: f32) -> (Vec<Vec<f32>>, Vec<usize>) {
    let centers = [[0.0f32, 0.0], [10.0, 0.0], [5.0, 8.66]];
    let mut g = rng(4);
    let (mut pts, mut truth) = (Vec::new(), Vec::new());
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..100 {
            let (dx, dy): (f32, f32) = (StandardNormal.sample(&mut g), StandardNormal.sample(&mut g));
            pts.push(vec![(c[0] + dx) * scale, (c[1] + dy) * scale]);
            truth.push(k);
        }
    }
    (pts, truth)
}

fn hdbscan_correctness() -> Outcome {
    let params = ClusterParams::default();
    let mut g = rng(5);
    let mut mst_ok = true;
    for n in [2usize, 17, 80, 200] {
        let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| g.random_range(-5.0..5.0)).collect()).collect();
        let ms = params.min_samples.min(n);
        let core = reachped::cluster::core_distances(&pts, ms);
        let mut ours: Vec<f64> = prim_mst(&pts, &core).iter().map(|e| e.weight).collect();
        ours.sort_by(f64::total_cmp);
        mst_ok &= ours == kruskal_weights(&pts, ms);
    }

    let (pts, truth) = blob_points(1.0);
    let labels = hdbscan(&pts, &params).unwrap().labels;
    let mut purity = 1.0f64;
    let mut majors = Vec::new();
    for k in 0..3 {
        let mine: Vec<i32> = labels.iter().zip(&truth).filter(|(_, &t)| t == k).map(|(&l, _)| l).collect();
        let major = (0..3).max_by_key(|&l| mine.iter().filter(|&&x| x == l).count()).unwrap();
        purity = purity.min(mine.iter().filter(|&&x| x == major).count() as f64 / mine.len() as f64);
        majors.push(major);
    }
    majors.sort();
    majors.dedup();
    let (scaled, _) = blob_points(10.0);
    let invariant = hdbscan(&scaled, &params).unwrap().labels == labels;
    outcome(
        mst_ok && purity >= 0.95 && majors.len() == 3 && invariant,
        format!("MST exact {mst_ok}, worst blob purity {purity:.3}, distinct blob labels {}, x10 invariant {invariant}", majors.len()),
    )
}

fn ann_quality() -> Outcome {
    let mut g = rng(6);
    let mut vec128 = || -> Vec<f32> { (0..128).map(|_| g.random_range(-1.0..1.0)).collect() };
    let data: Vec<Vec<f32>> = (0..10_000).map(|_| vec128()).collect();
    let queries: Vec<Vec<f32>> = (0..100).map(|_| vec128()).collect();
    let ids = (0..data.len()).map(|i| i.to_string()).collect();
    let forest = AnnForest::build(ids, data.clone(), vec![0; data.len()], vec![f64::INFINITY], AnnParams::default()).unwrap();
    let (mut hits, mut exact) = (0, true);
    for q in &queries {
        let truth = (0..data.len())
            .min_by(|&a, &b| euclidean(q, &data[a]).total_cmp(&euclidean(q, &data[b])))
            .unwrap();
        let got = forest.query(q, 1).unwrap();
        hits += usize::from(got[0].index == truth);
        for n in forest.query(q, 10).unwrap() {
            let d: f64 = q.iter().zip(&data[n.index]).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum::<f64>().sqrt();
            exact &= (n.distance - d).abs() <= 1e-12 * d.max(1.0);
        }
    }
    let recall = hits as f64 / queries.len() as f64;
    outcome(recall >= 0.95 && exact, format!("recall@1 {recall:.2}, distances exact {exact}"))
}

/// Membership via the facet normals of a 2-D zonotope, one per generator.
fn in_zonotope_2d(z: &Zonotope, p: [f64; 2], tol: f64) -> bool {
    let (c, g) = (z.center(), z.generators());
    (0..g.ncols()).all(|i| {
        let (nx, ny) = (-g[(1, i)], g[(0, i)]);
        if nx == 0.0 && ny == 0.0 {
            return true;
        }
        let reach: f64 = (0..g.ncols()).map(|j| (nx * g[(0, j)] + ny * g[(1, j)]).abs()).sum();
        let v = nx * (p[0] - c[0]) + ny * (p[1] - c[1]);
        v.abs() <= reach + tol * nx.hypot(ny)
    })
}

fn random_zonotope_2d(g: &mut ChaCha8Rng, m: usize) -> Zonotope {
    let gens = DMatrix::from_fn(2, m, |_, _| g.random_range(-1.0..1.0));
    Zonotope::new(DVector::from_vec(vec![g.random_range(-2.0..2.0), g.random_range(-2.0..2.0)]), gens).unwrap()
}

fn point_of(z: &Zonotope, beta: &[f64]) -> [f64; 2] {
    let p = z.center() + z.generators() * DVector::from_column_slice(beta);
    [p[0], p[1]]
}

fn zonotope_algebra() -> Outcome {
    let mut g = rng(7);
    let mut worst_area = 0f64;
    for m in [1usize, 2, 4, 7, 10] {
        let z = random_zonotope_2d(&mut g, m.max(2));
        let r = z.generators().column_iter().fold((0.0, 0.0), |acc, c| (acc.0 + c[0].abs(), acc.1 + c[1].abs()));
        let (c0, c1) = (z.center()[0], z.center()[1]);
        let n = 1_000_000;
        let inside = (0..n)
            .filter(|_| in_zonotope_2d(&z, [c0 + g.random_range(-r.0..r.0), c1 + g.random_range(-r.1..r.1)], 0.0))
            .count();
        let mc = inside as f64 / n as f64 * 4.0 * r.0 * r.1;
        let area = z.area_2d((0, 1)).unwrap();
        worst_area = worst_area.max((area - mc).abs() / mc);
    }

    let mut violations = 0;
    for _ in 0..10 {
        let z = random_zonotope_2d(&mut g, 20);
        let red = z.reduce_order(2);
        for k in 0..1000 {
            let beta: Vec<f64> = (0..20)
                .map(|_| if k % 2 == 0 { if g.random_bool(0.5) { 1.0 } else { -1.0 } } else { g.random_range(-1.0..1.0) })
                .collect();
            violations += usize::from(!in_zonotope_2d(&red, point_of(&z, &beta), 1e-9));
        }
    }

    let mut disagreements = 0;
    let mut checked = 0;
    for _ in 0..200 {
        let z = random_zonotope_2d(&mut g, 6);
        for _ in 0..20 {
            let beta: Vec<f64> = (0..6).map(|_| if g.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let vertex = point_of(&z, &beta);
            let c = [z.center()[0], z.center()[1]];
            let dir = [vertex[0] - c[0], vertex[1] - c[1]];
            let len = dir[0].hypot(dir[1]);
            // on the boundary, just inside, beyond tolerance outside, and random points
            let probes = [
                vertex,
                [vertex[0] - 1e-7 * dir[0] / len, vertex[1] - 1e-7 * dir[1] / len],
                [vertex[0] + 1e-6 * dir[0] / len, vertex[1] + 1e-6 * dir[1] / len],
                [c[0] + g.random_range(-4.0..4.0), c[1] + g.random_range(-4.0..4.0)],
            ];
            for p in probes {
                let oracle = in_zonotope_2d(&z, p, 1e-9);
                let ours = z.contains_point(&p, None).unwrap();
                checked += 1;
                disagreements += usize::from(ours != oracle);
            }
        }
    }
    outcome(
        worst_area <= 0.02 && violations == 0 && disagreements == 0,
        format!("worst area error {:.3}%, reduction violations {violations}/10000, inclusion disagreements {disagreements}/{checked}", worst_area * 100.0),
    )
}

fn identification() -> Outcome {
    let theta: f64 = 0.1;
    let mut a = DMatrix::<f64>::identity(4, 4);
    a[(0, 0)] = theta.cos();
    a[(0, 1)] = -theta.sin();
    a[(1, 0)] = theta.sin();
    a[(1, 1)] = theta.cos();
    let mut g = rng(8);
    let t = 200;
    let xm = DMatrix::from_fn(4, t, |_, _| g.random_range(-1.0..1.0));
    let xp = &a * &xm;
    let model = identify_from_data(&xm, &xp, &[0.0; 4], 20_000).unwrap().unwrap();
    let err = (model.center() - &a).norm();

    let w = 0.005;
    let mut noisy_plus = &a * &xm;
    noisy_plus.iter_mut().for_each(|v| *v += g.random_range(-w..w));
    let model = identify_from_data(&xm, &noisy_plus, &[w; 4], 20_000).unwrap().unwrap();
    let noise = Zonotope::axis_box(DVector::zeros(4), &[w; 4]).unwrap();
    let (mut included, mut total) = (0, 0);
    for _ in 0..100 {
        let x0 = DVector::from_fn(4, |_, _| g.random_range(-1.0..1.0));
        let r0 = Zonotope::axis_box(x0.clone(), &[0.05; 4]).unwrap();
        let sets = reach(&model, &r0, &noise, 20, 5).unwrap().sets;
        let mut x = &x0 + DVector::from_fn(4, |_, _| g.random_range(-0.05..0.05));
        for set in &sets {
            x = &a * &x + DVector::from_fn(4, |_, _| g.random_range(-w..w));
            total += 1;
            included += usize::from(set.contains_point(x.as_slice(), None).unwrap());
        }
    }
    outcome(
        err < 1e-6 && included == total && total == 2000,
        format!("noiseless Frobenius error {err:.2e}, noisy rollout inclusion {included}/{total}"),
    )
}

/// Desk-scale run: full-size encoder, fewer epochs and smaller batches.
fn desk_config(out: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.set("out", out.to_str().unwrap(), Source::Flag).unwrap();
    c.set("epochs", "8", Source::Flag).unwrap();
    c.set("batch_size", "32", Source::Flag).unwrap();
    c
}

fn training_progress(dir: &std::path::Path) -> Outcome {
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ingest_summary.json")).unwrap()).unwrap();
    let chunks = summary["chunks"].as_u64().unwrap();
    let log = std::fs::read_to_string(dir.join(TRAIN_LOG)).unwrap();
    let rows: Vec<Vec<f64>> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let (first, fifth) = (rows[0][1], rows[4][1]);
    let val: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let n = val.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = val.iter().sum::<f64>() / n;
    let slope = val.iter().enumerate().map(|(i, y)| (i as f64 - mean_x) * (y - mean_y)).sum::<f64>()
        / val.iter().enumerate().map(|(i, _)| (i as f64 - mean_x).powi(2)).sum::<f64>();
    outcome(
        chunks >= 500 && fifth <= 0.5 * first && slope < 0.0 && val[val.len() - 1] < val[0],
        format!("{chunks} chunks, train mse {first:.4} -> {fifth:.4} after 5 epochs, val slope {slope:.4}/epoch"),
    )
}

fn end_to_end(report: &EvalReport, took: Duration) -> Outcome {
    let base = report.method(MethodKind::BaselineAll).unwrap();
    let enc = report.method(MethodKind::ClusterEncoded).unwrap();
    let pass = match (base.average_area, enc.average_area, enc.accuracy) {
        (Some(b), Some(e), Some(acc)) => e <= b && acc >= 0.9 && took < Duration::from_secs(600),
        _ => false,
    };
    outcome(
        pass,
        format!(
            "encoded area {:?} (ok {}/{}) vs baseline {:?}, encoded accuracy {:?}, pipeline {took:.1?}",
            enc.average_area, enc.ok, enc.trials, base.average_area, enc.accuracy
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_check()),
        (2, "masking statistics", masking_statistics()),
    ];

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let report_a = run_synthetic(&desk_config(a.path())).unwrap();
    let took = start.elapsed();
    results.push((3, "training progress", training_progress(a.path())));
    results.push((4, "hdbscan correctness", hdbscan_correctness()));
    results.push((5, "ann quality", ann_quality()));
    results.push((6, "zonotope algebra", zonotope_algebra()));
    results.push((7, "model identification", identification()));
    results.push((8, "end-to-end ordering", end_to_end(&report_a, took)));

    let report_b = run_synthetic(&desk_config(b.path())).unwrap();
    let same_files = [REPORT_JSON, REPORT_CSV]
        .iter()
        .all(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap());
    results.push((
        9,
        "determinism",
        outcome(same_files && report_a == report_b, format!("report files byte-identical {same_files}")),
    ));

    results.sort_by_key(|r| r.0);
    for (n, name, o) in &results {
        println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
