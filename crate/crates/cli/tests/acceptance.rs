//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Numeric arguments select criteria.

use anyhow::{ensure, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sdf_dro::geom::{self, Vec3};
use sdf_dro::loss::{
    batch_objective, combined_lambda_grads, combined_loss, np_batch, np_loss, sdro_value, wdro_inner_maximize, Batch,
    DroConfig, DroMode, ObjectiveContext,
};
use sdf_dro::mesh::{marching_cubes, Bounds, ScalarGrid};
use sdf_dro::metrics::{chamfer, fscore};
use sdf_dro::net::{Activation, InitScheme, MlpParams, NetConfig};
use sdf_dro::rng::rng_from;
use sdf_dro::spatial::{brute_force_knn, KdTree};
use sdf_dro::trainer::{train, TrainConfig};
use sdf_dro_cli::config::SynthSettings;
use sdf_dro_cli::{pipeline, synthesize, PipelineRow, RunConfig};
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const DESK_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn point(r: &mut ChaCha8Rng, half: f64) -> Vec3 {
    [r.random_range(-half..half), r.random_range(-half..half), r.random_range(-half..half)]
}

fn small_net(activation: Activation) -> NetConfig {
    NetConfig {
        depth: 4,
        width: 32,
        skip_layers: vec![2],
        activation,
        init: InitScheme::Geometric,
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Smallest |pre-activation| over the network at `q`.
fn kink_margin(params: &MlpParams, q: Vec3) -> f64 {
    let mut tape = params.new_tape();
    params.forward_tape(q, &mut tape);
    tape.min_abs_preactivation()
}

fn c1_param_gradients() -> Result<Verdict> {
    let mut r = rng_from(11);
    let h = 1e-6;
    let (mut worst, mut done, mut resampled) = (0.0f64, 0, 0);
    while done < 20 {
        let mut params = MlpParams::init(&small_net(Activation::Relu), r.random())?;
        // move off the symmetric initialization
        for v in params.values.iter_mut() {
            *v += r.random_range(-0.05..0.05);
        }
        let q = point(&mut r, 0.6);
        let p = point(&mut r, 0.5);
        let Some(l0) = np_loss(&params, q, p) else {
            resampled += 1;
            continue;
        };
        if kink_margin(&params, q) < 1e-3 || l0 < 1e-6 {
            resampled += 1;
            continue;
        }
        let tb = np_batch(&params, &Batch::new(&[q], &[p])?);
        ensure!(tb.count == 1, "query skipped by np_batch");
        let probe = rand::seq::index::sample(&mut r, params.values.len(), 10).into_vec();
        let mut exact = Vec::new();
        let mut fd = Vec::new();
        for &i in &probe {
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let (Some(lp), Some(lm)) = (np_loss(&plus, q, p), np_loss(&minus, q, p)) else {
                anyhow::bail!("loss undefined under a parameter nudge");
            };
            exact.push(tb.grads[i]);
            fd.push((lp - lm) / (2.0 * h));
        }
        worst = worst.max(rel_err(&exact, &fd));
        done += 1;
    }
    verdict(worst < 1e-4, format!("max rel err {worst:.2e} over 20 triples ({resampled} resampled)"))
}

fn c2_input_gradients() -> Result<Verdict> {
    let mut r = rng_from(12);
    let h = 1e-6;
    let relu = MlpParams::init(&small_net(Activation::Relu), 3)?;
    let soft = MlpParams::init(&small_net(Activation::Softplus { beta: 100.0 }), 4)?;
    let (mut worst, mut done, mut resampled) = (0.0f64, 0, 0);
    while done < 100 {
        let params = if done % 2 == 0 { &relu } else { &soft };
        let q = point(&mut r, 0.6);
        if kink_margin(params, q) < 1e-3 {
            resampled += 1;
            continue;
        }
        let g = params.forward_with_input_grad(q).input_grad;
        let mut fd = [0.0; 3];
        for a in 0..3 {
            let (mut qp, mut qm) = (q, q);
            qp[a] += h;
            qm[a] -= h;
            fd[a] = (params.forward(qp) - params.forward(qm)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&g, &fd));
        done += 1;
    }
    verdict(worst < 1e-5, format!("max rel err {worst:.2e} over 100 points ({resampled} resampled)"))
}

fn c3_sdro_dual() -> Result<Verdict> {
    let mut r = rng_from(13);
    let lrs = [1e-3, 1.0, 1e3];
    let mut bad = Vec::new();
    let (mut lim_hi, mut lim_lo) = (0.0f64, 0.0f64);
    for trial in 0..1000 {
        let n = r.random_range(1..=32);
        let scale = 10f64.powf(r.random_range(-2.0..1.0));
        let l: Vec<f64> = (0..n).map(|_| r.random_range(0.0..scale)).collect();
        let mean = l.iter().sum::<f64>() / n as f64;
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-12 * max.max(1.0);
        let vals: Vec<f64> = lrs.iter().map(|&lr| sdro_value(&l, lr)).collect();
        for (v, lr) in vals.iter().zip(lrs) {
            if !(mean - tol <= *v && *v <= max + tol) {
                bad.push(format!("trial {trial}: value {v} outside [{mean}, {max}] at {lr}"));
            }
        }
        if vals.windows(2).any(|w| w[1] > w[0] + tol) {
            bad.push(format!("trial {trial}: not monotone {vals:?}"));
        }
        lim_hi = lim_hi.max((sdro_value(&l, 1e-6) - max).abs());
        lim_lo = lim_lo.max((sdro_value(&l, 1e6) - mean).abs());
    }
    let pass = bad.is_empty() && lim_hi < 1e-3 && lim_lo < 1e-3;
    let mut detail = format!("limit errors max {lim_hi:.1e}, mean {lim_lo:.1e}; {} violations", bad.len());
    if let Some(b) = bad.first() {
        detail.push_str(&format!(" (first: {b})"));
    }
    verdict(pass, detail)
}

fn c4_sdro_scalar() -> Result<Verdict> {
    let v = sdro_value(&[1.0, 3.0], 2.0);
    let direct = 2.0 * ((0.5f64.exp() + 1.5f64.exp()) / 2.0).ln();
    verdict(
        (v - 2.6265).abs() < 1e-3,
        format!("value {v:.7} (direct evaluation {direct:.7}), expected 2.6265"),
    )
}

fn noisy_sphere(noise: f64, seed: u64) -> Result<sdf_dro::pointcloud::PointCloud> {
    Ok(synthesize(&SynthSettings {
        shape: "sphere".parse()?,
        n: 1024,
        noise,
        seed,
        ..SynthSettings::default()
    })?)
}

fn c5_wdro_lambda() -> Result<Verdict> {
    let cloud = noisy_sphere(0.005, 0)?;
    let tree = KdTree::build(&cloud.points)?;
    let mut r = rng_from(15);
    let (mut up, mut down, mut mismatched) = (0, 0, 0);
    for i in 0..100 {
        let params = MlpParams::init(&small_net(Activation::Relu), r.random())?;
        let queries: Vec<Vec3> = (0..64)
            .map(|_| {
                let p = cloud.points[r.random_range(0..cloud.points.len())];
                geom::add(p, point(&mut r, 0.03))
            })
            .collect();
        let nearest: Vec<Vec3> = queries.iter().map(|q| tree.nearest(*q).1).collect();
        let mut dro = DroConfig {
            mode: DroMode::Wdro,
            ..DroConfig::default()
        };
        dro.wdro.epsilon = 10f64.powf(r.random_range(-7.0..-4.0));
        let lambda = r.random_range(1.0..100.0);
        let ctx = ObjectiveContext {
            dro: &dro,
            sdro: None,
            tree: Some(&tree),
            root_seed: 15,
            iteration: i,
        };
        let obj = batch_objective(&params, &Batch::new(&queries, &nearest)?, &ctx, lambda)?;
        let step = (obj.wdro_lambda - lambda).signum();
        let excess = obj.report.mean_transport_cost - dro.wdro.epsilon;
        if step != excess.signum() || obj.wdro_lambda == lambda {
            mismatched += 1;
        } else if step > 0.0 {
            up += 1;
        } else {
            down += 1;
        }
    }

    let mut cfg = TrainConfig {
        n_iterations: 500,
        batch_size: 128,
        learning_rate: 1e-3,
        k: 10,
        queries_per_point: 5,
        seed: 5,
        eval_every: 100,
        eval_samples: 500,
        log_every: 1,
        ..TrainConfig::default()
    };
    cfg.dro.mode = DroMode::Wdro;
    // small start so the clamp at zero is exercised
    cfg.dro.wdro.lambda_init = 0.02;
    cfg.net = NetConfig {
        skip_layers: vec![],
        ..small_net(Activation::Relu)
    };
    let out = train(&noisy_sphere(0.025, 1)?, &cfg)?;
    let lambdas: Vec<f64> = out.log.records.iter().map(|rec| rec.wdro_lambda).collect();
    let min = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    let at_zero = lambdas.iter().filter(|l| **l == 0.0).count();
    let pass = mismatched == 0 && lambdas.len() >= 500 && min >= 0.0 && out.final_state.wdro_lambda >= 0.0;
    verdict(
        pass,
        format!(
            "{up} up / {down} down / {mismatched} mismatched; training: {} rows, min lambda {min}, {at_zero} rows at 0",
            lambdas.len()
        ),
    )
}

fn c6_wdro_inner() -> Result<Verdict> {
    let m = [0.3, -0.2, 0.5];
    let loss = |x: Vec3| -geom::dist_sq(x, m);
    let grad = |x: Vec3| geom::scale(geom::sub(x, m), -2.0);
    let q = [0.0; 3];
    let exact = wdro_inner_maximize(q, q, 0.0, 0.1, 50, loss, Some(&grad));
    let miss = geom::dist(exact.q_prime, m);

    let q = [0.1, 0.0, -0.1];
    let lambda = 0.5;
    let (mut a, mut b) = (q, q);
    let mut gap = 0.0f64;
    for _ in 0..50 {
        a = wdro_inner_maximize(q, a, lambda, 0.1, 1, loss, Some(&grad)).q_prime;
        b = wdro_inner_maximize(q, b, lambda, 0.1, 1, loss, None).q_prime;
        gap = gap.max(geom::dist(a, b));
    }
    // argmax of -|x-m|^2 - λ/2 |x-q|^2
    let opt = geom::scale(geom::add(geom::scale(m, 2.0), geom::scale(q, lambda)), 1.0 / (2.0 + lambda));
    verdict(
        miss < 1e-3 && gap < 1e-4,
        format!(
            "exact path misses optimum by {miss:.1e}; max FD/exact gap {gap:.1e}; penalized end point off by {:.1e}",
            geom::dist(a, opt)
        ),
    )
}

fn c7_oracles() -> Result<Verdict> {
    let mut r = rng_from(17);
    let tol = 1e-12;
    let mut worst = 0.0f64;
    let mut index_mismatch = 0;
    for (inst, &n) in [2usize, 7, 50, 200, 500].iter().enumerate() {
        let pts: Vec<Vec3> = (0..n).map(|_| point(&mut r, 1.0)).collect();
        let other: Vec<Vec3> = (0..(n / 2).max(1) + inst).map(|_| point(&mut r, 1.0)).collect();
        let tree = KdTree::build(&pts)?;
        for _ in 0..200 {
            let q = point(&mut r, 1.2);
            let brute = brute_force_knn(&pts, q, n);
            let (i, p, d) = tree.nearest(q);
            worst = worst.max((d - brute[0].dist()).abs()).max(geom::dist_sq(p, pts[i]));
            if i != brute[0].index {
                index_mismatch += 1;
            }
            let k = r.random_range(1..=n.min(20));
            let got = tree.knn(q, k);
            ensure!(got.len() == k, "knn returned {} of {k}", got.len());
            for (g, b) in got.iter().zip(&brute) {
                worst = worst.max((g.dist_sq - b.dist_sq).abs());
                if g.index != b.index {
                    index_mismatch += 1;
                }
            }
        }
        for k in [1, (n - 1).min(10), n - 1] {
            for includes_self in [false, true] {
                let sig = tree.local_sigmas(k, includes_self)?;
                for (i, p) in pts.iter().enumerate() {
                    let mut d: Vec<f64> = pts
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| includes_self || *j != i)
                        .map(|(_, x)| geom::dist(*p, *x))
                        .collect();
                    d.sort_by(f64::total_cmp);
                    worst = worst.max((sig[i] - d[k - 1]).abs());
                    worst = worst.max((tree.local_sigma_with(i, k, includes_self)? - d[k - 1]).abs());
                }
            }
        }
        let min_to = |x: Vec3, set: &[Vec3]| set.iter().map(|y| geom::dist_sq(x, *y)).fold(f64::INFINITY, f64::min);
        let ab: Vec<f64> = pts.iter().map(|x| min_to(*x, &other)).collect();
        let ba: Vec<f64> = other.iter().map(|x| min_to(*x, &pts)).collect();
        let mean = |v: &[f64], f: fn(f64) -> f64| v.iter().map(|x| f(*x)).sum::<f64>() / v.len() as f64;
        let cd1 = 0.5 * (mean(&ab, f64::sqrt) + mean(&ba, f64::sqrt));
        let cd2 = 0.5 * (mean(&ab, |x| x) + mean(&ba, |x| x));
        let (g1, g2) = chamfer(&pts, &other)?;
        worst = worst.max((g1 - cd1).abs()).max((g2 - cd2).abs());
        for tau in [0.05, 0.2, 0.5] {
            let within = |v: &[f64]| v.iter().filter(|d| d.sqrt() < tau).count() as f64 / v.len() as f64;
            let (prec, rec) = (within(&ab), within(&ba));
            let f = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            worst = worst.max((fscore(&pts, &other, tau)? - f).abs());
        }
    }
    verdict(
        worst <= tol && index_mismatch == 0,
        format!("max deviation from brute force {worst:.1e}, {index_mismatch} index mismatches"),
    )
}

fn c8_marching_cubes() -> Result<Verdict> {
    let radius = 0.4;
    let bounds = Bounds {
        min: [-0.5; 3],
        max: [0.5; 3],
    };
    let grid = ScalarGrid::from_fn(128, bounds, |p| geom::norm(p) - radius)?;
    let cell = grid.cell_size().iter().cloned().fold(0.0, f64::max);
    let mesh = marching_cubes(&grid, 0.0);
    let dev = mesh.vertices.iter().map(|v| (geom::norm(*v) - radius).abs()).fold(0.0, f64::max);
    let target = 4.0 * std::f64::consts::PI * radius * radius;
    let area_err = (mesh.area() - target).abs() / target;
    let tight = mesh.is_watertight();
    verdict(
        dev < 2.0 * cell && area_err < 0.05 && tight,
        format!(
            "max deviation {:.3} cells, area error {:.3}%, watertight {tight}, {} triangles",
            dev / cell,
            area_err * 100.0,
            mesh.triangles.len()
        ),
    )
}

fn desk_config() -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_file(Path::new(DESK_CONFIG))?;
    Ok(cfg)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c9_reconstruction() -> Result<Verdict> {
    let cfg = desk_config()?;
    let dir = tempfile::tempdir()?;
    let rows: Vec<PipelineRow> = pipeline(&cfg, dir.path())?;
    let mut weak = Vec::new();
    let mut by: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut min_ratio = f64::INFINITY;
    for row in &rows {
        let ratio = row.init_cd1 / row.report.cd1;
        println!(
            "    {:<14} noise {:<5} seed {} {:<4} cd1 {:.5} init {:.4} ratio {:.1}",
            row.shape.to_string(),
            row.noise,
            row.seed,
            row.mode,
            row.report.cd1,
            row.init_cd1,
            ratio
        );
        min_ratio = min_ratio.min(ratio);
        if !(ratio >= 5.0) {
            weak.push(format!("{} {} {} {}", row.shape, row.noise, row.seed, row.mode));
        }
        by.entry((row.noise.to_string(), row.mode.to_string())).or_default().push(row.report.cd1);
    }
    let med = |noise: f64, mode: DroMode| by.get(&(noise.to_string(), mode.to_string())).cloned().map(median);
    let mut parts = vec![format!("{} runs, min init/best ratio {min_ratio:.1}", rows.len())];
    let mut pass = weak.is_empty() && rows.len() == 36;
    for (noise, bound) in [(0.005, 1.05), (0.025, 1.0)] {
        let (Some(np), Some(sd)) = (med(noise, DroMode::Np), med(noise, DroMode::Sdro)) else {
            anyhow::bail!("sweep lacks noise {noise}");
        };
        pass &= sd <= bound * np;
        parts.push(format!("noise {noise}: median sdro/np {:.3} (<= {bound})", sd / np));
    }
    if !weak.is_empty() {
        parts.push(format!("below 5x: {}", weak.join("; ")));
    }
    verdict(pass, parts.join(", "))
}

fn tree_files(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p)?;
                // configs record their own paths
                let text = String::from_utf8_lossy(&bytes).replace(&*root.to_string_lossy(), "<root>");
                out.insert(p.strip_prefix(root)?.to_path_buf(), text.into_bytes());
            }
        }
    }
    Ok(out)
}

fn c10_determinism() -> Result<Verdict> {
    let mut cfg = desk_config()?;
    for kv in [
        "train.iters=300",
        "train.eval_every=100",
        "train.log_every=10",
        "sweep.shapes=sphere",
        "sweep.noises=0.005",
        "sweep.modes=np,sdro,wdro",
        "sweep.seeds=0",
    ] {
        cfg.apply_assignment(kv)?;
    }
    let dir = tempfile::tempdir()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pool.install(|| -> Result<()> {
        pipeline(&cfg, &a)?;
        pipeline(&cfg, &b)?;
        Ok(())
    })?;
    let (fa, fb) = (tree_files(&a)?, tree_files(&b)?);
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let kinds = ["ckpt", "csv", "obj"]
        .iter()
        .map(|ext| fa.keys().filter(|k| k.extension().is_some_and(|e| e == *ext)).count())
        .collect::<Vec<_>>();
    let same_set = fa.keys().eq(fb.keys());
    verdict(
        same_set && differing.is_empty() && kinds.iter().all(|c| *c > 0),
        format!(
            "{} files compared ({} checkpoints, {} csv, {} meshes), {} differ{}",
            fa.len(),
            kinds[0],
            kinds[1],
            kinds[2],
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    )
}

fn c11_combined_stationarity() -> Result<Verdict> {
    let mut r = rng_from(21);
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (lp, ld) = (r.random_range(0.0..5.0), r.random_range(0.0..5.0));
        let (l1, l2) = (r.random_range(0.5..10.0), r.random_range(0.5..10.0));
        let g = combined_lambda_grads(lp, ld, l1, l2)?;
        // five-point stencil
        let d = |f: &dyn Fn(f64) -> Result<f64>, x: f64| -> Result<f64> {
            Ok((f(x - 2.0 * h)? - 8.0 * f(x - h)? + 8.0 * f(x + h)? - f(x + 2.0 * h)?) / (12.0 * h))
        };
        let n1 = d(&|x| Ok(combined_loss(lp, ld, x, l2)?), l1)?;
        let n2 = d(&|x| Ok(combined_loss(lp, ld, l1, x)?), l2)?;
        let closed1 = -lp / (2.0 * l1 * l1) + 1.0 / (1.0 + l1);
        let closed2 = -ld / (2.0 * l2 * l2) + 1.0 / (1.0 + l2);
        worst = worst
            .max((n1 - g[0]).abs())
            .max((n2 - g[1]).abs())
            .max((closed1 - g[0]).abs())
            .max((closed2 - g[1]).abs());
    }
    verdict(worst < 1e-8, format!("max abs deviation {worst:.1e} over 20 pairs"))
}

type Criterion = (u32, &'static str, f64, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 11] = [
    (1, "parameter gradients of the pull loss", 10.0, c1_param_gradients),
    (2, "input gradients", 5.0, c2_input_gradients),
    (3, "SDRO dual bounds, monotonicity, limits", 5.0, c3_sdro_dual),
    (4, "SDRO scalar example", 1.0, c4_sdro_scalar),
    (5, "WDRO lambda dynamics", 120.0, c5_wdro_lambda),
    (6, "WDRO inner maximization", 1.0, c6_wdro_inner),
    (7, "kd-tree and metrics against brute force", 10.0, c7_oracles),
    (8, "marching cubes sphere", 30.0, c8_marching_cubes),
    (9, "desk-scale reconstruction sweep", 1800.0, c9_reconstruction),
    (10, "single-threaded determinism", 600.0, c10_determinism),
    (11, "combined objective lambda gradients", 1.0, c11_combined_stationarity),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, budget, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let in_time = secs < budget;
        let ok = pass && in_time;
        if !ok {
            failed += 1;
        }
        let timing = if in_time {
            format!("{secs:.1}s")
        } else {
            format!("{secs:.1}s, over the {budget}s budget")
        };
        println!("{} {n}: {name}: {detail} [{timing}]", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
