use crate::config::{EvalSettings, ExtractSettings, RunConfig, Snapshot, SynthSettings};
use crate::{EmptyExtraction, UsageError};
use anyhow::{Context, Result};
use sdf_dro::loss::DroMode;
use sdf_dro::mesh::{self, evaluate_grid, marching_cubes, TriangleMesh};
use sdf_dro::metrics::{evaluate_reconstruction, GroundTruth, MetricsReport, METRICS_COLUMNS};
use sdf_dro::net::{self, AdamSnapshot, Checkpoint, MlpParams};
use sdf_dro::pointcloud::{
    self, add_gaussian_noise, normalize_unit_cube, sample_synthetic, NormalizationTransform, PointCloud,
    SyntheticShape,
};
use sdf_dro::rng::{self, Stream};
use sdf_dro::trainer::{self, TrainOutcome, TrainState};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    EmptyMesh,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const MESH_FILE: &str = "mesh.obj";
pub const POINTS_FILE: &str = "points.xyz";
pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// The noisy cloud of `settings`, in shape units.
pub fn synthesize(settings: &SynthSettings) -> Result<PointCloud> {
    let clean = sample_synthetic(&settings.shape, settings.n, rng::stream_seed(settings.seed, Stream::Synth))?;
    Ok(add_gaussian_noise(&clean, settings.noise, rng::stream_seed(settings.seed, Stream::Noise))?)
}

/// Writes the noisy cloud to `out` and, when `gt_out` is given, a dense clean
/// sampling with normals.
pub fn synth(settings: &SynthSettings, out: &Path, gt_out: Option<&Path>) -> Result<PointCloud> {
    let cloud = synthesize(settings)?;
    pointcloud::save_points(&cloud, out)?;
    if let Some(gt) = gt_out {
        let seed = rng::derive(rng::stream_seed(settings.seed, Stream::Synth), &[1]);
        let (p, n) = settings.shape.sample_surface(settings.gt_samples.max(1), seed);
        pointcloud::save_xyz_normals(&p, &n, gt)?;
    }
    log::info!("wrote {} points of {} to {}", cloud.len(), settings.shape, out.display());
    Ok(cloud)
}

pub struct FitResult {
    pub outcome: TrainOutcome,
    pub transform: NormalizationTransform,
    pub initial: MlpParams,
}

fn read_resume(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    let ck = net::load_checkpoint(path)?;
    let snap = ck
        .optimizer
        .ok_or_else(|| UsageError(format!("{} has no optimizer state to resume from", path.display())))?;
    if ck.params.config() != &cfg.train.net {
        return Err(UsageError(format!("{} was trained with a different network configuration", path.display())).into());
    }
    Ok(TrainState {
        params: ck.params,
        adam: snap.adam,
        wdro_lambda: snap.wdro_lambda,
    })
}

/// Trains on the cloud at `input` and writes the resolved config, both
/// checkpoints and the log into `out_dir`.
pub fn fit(cfg: &RunConfig, input: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<FitResult> {
    cfg.validate()?;
    let raw = pointcloud::load_points(input).with_context(|| format!("cannot read input {}", input.display()))?;
    let cloud = normalize_unit_cube(&raw)?;
    fit_cloud(cfg, &cloud, input, out_dir, resume)
}

fn fit_cloud(cfg: &RunConfig, cloud: &PointCloud, input: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<FitResult> {
    create_dir(out_dir)?;
    let mut resolved = cfg.clone();
    resolved.input = Some(input.to_path_buf());
    resolved.out_dir = Some(out_dir.to_path_buf());
    fs::write(out_dir.join(CONFIG_FILE), resolved.to_text())
        .with_context(|| format!("cannot write {}", out_dir.join(CONFIG_FILE).display()))?;

    let initial = TrainState::initial(&cfg.train)?;
    let init_params = initial.params.clone();
    let state = match resume {
        Some(p) => read_resume(p, cfg)?,
        None => initial,
    };
    let outcome = trainer::train_from(cloud, &cfg.train, state)?;

    let best = Checkpoint {
        params: outcome.best.clone(),
        transform: cloud.transform,
        optimizer: None,
    };
    net::save_checkpoint(&best, out_dir.join(BEST_CHECKPOINT))?;
    let fin = Checkpoint {
        params: outcome.final_state.params.clone(),
        transform: cloud.transform,
        optimizer: Some(AdamSnapshot {
            adam: outcome.final_state.adam.clone(),
            wdro_lambda: outcome.final_state.wdro_lambda,
        }),
    };
    net::save_checkpoint(&fin, out_dir.join(FINAL_CHECKPOINT))?;
    outcome.log.save_csv(out_dir.join(LOG_FILE))?;
    log::info!(
        "best selection metric {:.4e} at iteration {}; outputs in {}",
        outcome.best_metric,
        outcome.best_iteration,
        out_dir.display()
    );
    Ok(FitResult {
        outcome,
        transform: cloud.transform,
        initial: init_params,
    })
}

/// Zero level set of `params` in world coordinates.
pub fn extract_mesh(params: &MlpParams, transform: &NormalizationTransform, settings: &ExtractSettings) -> Result<TriangleMesh> {
    let grid = evaluate_grid(params, settings.resolution, settings.bounds)?;
    let m = marching_cubes(&grid, settings.iso);
    let vertices = m.vertices.iter().map(|v| transform.to_world(*v)).collect();
    Ok(TriangleMesh::new(vertices, m.triangles)?)
}

/// Meshes a checkpoint. An empty result still writes an (empty) file.
pub fn extract(checkpoint: &Path, settings: &ExtractSettings, out: &Path) -> Result<Status> {
    let ck = net::load_checkpoint(checkpoint)?;
    let m = extract_mesh(&ck.params, &ck.transform, settings)?;
    mesh::save_mesh(&m, out)?;
    if m.is_empty() {
        log::warn!("no surface found in {}; wrote an empty mesh", checkpoint.display());
        return Ok(Status::EmptyMesh);
    }
    log::info!("{} vertices, {} triangles -> {}", m.vertices.len(), m.triangles.len(), out.display());
    Ok(Status::Done)
}

/// A mesh file, a dense `x y z nx ny nz` sampling, or an analytic shape name
/// such as `sphere:0.4`.
pub fn load_ground_truth(source: &str) -> Result<GroundTruth> {
    let path = Path::new(source);
    if path.is_file() {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        return match ext.as_deref() {
            Some("obj" | "ply") => Ok(GroundTruth::Mesh(mesh::load_mesh(path)?)),
            Some("xyz" | "txt" | "pts") => {
                let (cloud, normals) = pointcloud::load_xyz_normals(path)?;
                let normals = normals.ok_or_else(|| {
                    UsageError(format!("{source}: ground-truth samples need normals (x y z nx ny nz)"))
                })?;
                Ok(GroundTruth::Samples {
                    points: cloud.points,
                    normals,
                })
            }
            _ => Err(UsageError(format!("{source}: unknown ground-truth format")).into()),
        };
    }
    match source.parse::<SyntheticShape>() {
        Ok(s) => Ok(GroundTruth::Analytic(s)),
        Err(_) => Err(UsageError(format!("ground truth {source:?} is neither a readable file nor a shape name")).into()),
    }
}

/// Writes `metrics.csv` and `metrics.txt` into `out_dir`.
pub fn eval(pred: &Path, gt: &GroundTruth, settings: &EvalSettings, out_dir: &Path) -> Result<MetricsReport> {
    let mesh = mesh::load_mesh(pred).with_context(|| format!("cannot read {}", pred.display()))?;
    let report = evaluate_reconstruction(&mesh, gt, settings.samples, settings.tau, settings.seed)?;
    create_dir(out_dir)?;
    report.save_csv(out_dir.join(METRICS_FILE))?;
    fs::write(out_dir.join("metrics.txt"), report.to_text())?;
    Ok(report)
}

/// One evaluated run of a pipeline sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRow {
    pub shape: SyntheticShape,
    pub noise: f64,
    pub seed: u64,
    pub mode: DroMode,
    pub best_iteration: usize,
    /// CD1 of the mesh of the untrained network; infinite if it is empty.
    pub init_cd1: f64,
    pub report: MetricsReport,
}

pub const PIPELINE_COLUMNS: [&str; 6] = ["shape", "noise", "seed", "mode", "best_iteration", "init_cd1"];

pub fn pipeline_csv(rows: &[PipelineRow]) -> String {
    let mut out = PIPELINE_COLUMNS.join(",");
    for c in METRICS_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.shape,
            r.noise,
            r.seed,
            r.mode,
            r.best_iteration,
            r.init_cd1,
            r.report.csv_row()
        );
    }
    out
}

fn run_dir_name(shape: &SyntheticShape, noise: f64, seed: u64) -> String {
    format!("{}-noise{}-seed{}", shape.to_string().replace(':', "_"), noise, seed)
}

/// synth → fit → extract → eval over every combination of the sweep axes.
/// Each run lives in `out_dir/<shape>-noise<σ>-seed<s>/<mode>/`; all metric
/// rows are collected in `out_dir/metrics.csv`.
pub fn pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PipelineRow>> {
    cfg.validate()?;
    create_dir(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let shapes = if cfg.sweep.shapes.is_empty() { vec![cfg.synth.shape] } else { cfg.sweep.shapes.clone() };
    let noises = if cfg.sweep.noises.is_empty() { vec![cfg.synth.noise] } else { cfg.sweep.noises.clone() };
    let seeds = if cfg.sweep.seeds.is_empty() { vec![cfg.train.seed] } else { cfg.sweep.seeds.clone() };
    let modes = if cfg.sweep.modes.is_empty() { vec![cfg.train.dro.mode] } else { cfg.sweep.modes.clone() };

    let mut rows = Vec::new();
    for shape in &shapes {
        for &noise in &noises {
            for &seed in &seeds {
                let dir = out_dir.join(run_dir_name(shape, noise, seed));
                create_dir(&dir)?;
                let synth_settings = SynthSettings {
                    shape: *shape,
                    noise,
                    seed,
                    ..cfg.synth.clone()
                };
                let points = dir.join(POINTS_FILE);
                let raw = synth(&synth_settings, &points, None)?;
                let cloud = normalize_unit_cube(&raw)?;
                let gt = GroundTruth::Analytic(*shape);
                for &mode in &modes {
                    let mut run = cfg.clone();
                    run.synth = synth_settings.clone();
                    run.sweep = Default::default();
                    run.train.seed = seed;
                    run.train.dro.mode = mode;
                    let run_dir = dir.join(mode.to_string());
                    log::info!("pipeline run {}", run_dir.display());
                    let fit = fit_cloud(&run, &cloud, &points, &run_dir, None)?;
                    let params = match cfg.extract.snapshot {
                        Snapshot::Best => &fit.outcome.best,
                        Snapshot::Final => &fit.outcome.final_state.params,
                    };
                    let m = extract_mesh(params, &fit.transform, &cfg.extract)?;
                    let mesh_path = run_dir.join(MESH_FILE);
                    mesh::save_mesh(&m, &mesh_path)?;
                    if m.is_empty() {
                        return Err(EmptyExtraction(mesh_path).into());
                    }
                    let report = evaluate_reconstruction(&m, &gt, cfg.eval.samples, cfg.eval.tau, cfg.eval.seed)?;
                    report.save_csv(run_dir.join(METRICS_FILE))?;
                    let init_mesh = extract_mesh(&fit.initial, &fit.transform, &cfg.extract)?;
                    let init_cd1 = if init_mesh.is_empty() {
                        f64::INFINITY
                    } else {
                        evaluate_reconstruction(&init_mesh, &gt, cfg.eval.samples, cfg.eval.tau, cfg.eval.seed)?.cd1
                    };
                    rows.push(PipelineRow {
                        shape: *shape,
                        noise,
                        seed,
                        mode,
                        best_iteration: fit.outcome.best_iteration,
                        init_cd1,
                        report,
                    });
                    fs::write(out_dir.join(METRICS_FILE), pipeline_csv(&rows))?;
                }
            }
        }
    }
    Ok(rows)
}

/// Paths a run directory contains once `fit` has finished.
pub fn fit_outputs(out_dir: &Path) -> [PathBuf; 4] {
    [CONFIG_FILE, BEST_CHECKPOINT, FINAL_CHECKPOINT, LOG_FILE].map(|f| out_dir.join(f))
}
