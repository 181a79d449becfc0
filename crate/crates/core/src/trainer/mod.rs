//! Query pool, optimizer and training loop.

mod adam;
mod pool;

pub use adam::{adam_step, AdamState};
pub use pool::{build_query_pool, local_scales, QueryPool};

use crate::geom::{self, Vec3};
use crate::loss::{self, Batch, DroConfig, DroMode, LossReport, ObjectiveContext, SdroParams};
use crate::metrics;
use crate::net::{self, MlpParams, NetConfig};
use crate::pointcloud::PointCloud;
use crate::rng::{self, Stream};
use crate::spatial::KdTree;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Neighbour count for σ_p.
    pub k: usize,
    pub queries_per_point: usize,
    /// Count the point itself among its K neighbours when computing σ_p.
    pub knn_includes_self: bool,
    pub seed: u64,
    pub dro: DroConfig,
    pub net: NetConfig,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// A log row every this many iterations (evaluation iterations are always
    /// logged).
    pub log_every: usize,
    /// Adds a wall-clock column to the log, which then differs between runs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_iterations: 40_000,
            batch_size: 5000,
            learning_rate: 1e-4,
            k: 51,
            queries_per_point: 25,
            knn_includes_self: false,
            seed: 0,
            dro: DroConfig::default(),
            net: NetConfig::default(),
            eval_every: 1000,
            eval_samples: 10_000,
            log_every: 100,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size < 1 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.k < 1 {
            return bad("train.k must be >= 1".into());
        }
        if self.queries_per_point < 1 {
            return bad("train.queries_per_point must be >= 1".into());
        }
        if self.eval_every < 1 {
            return bad("train.eval_every must be >= 1".into());
        }
        if self.eval_samples < 1 {
            return bad("train.eval_samples must be >= 1".into());
        }
        if self.log_every < 1 {
            return bad("train.log_every must be >= 1".into());
        }
        self.dro.validate()?;
        self.net.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub report: LossReport,
    pub wdro_lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Present on evaluation iterations.
    pub select_metric: Option<f64>,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_COLUMNS: [&str; 10] = [
    "iteration",
    "primary_loss",
    "dro_loss",
    "combined",
    "skipped_queries",
    "mean_transport_cost",
    "wdro_lambda",
    "lambda1",
    "lambda2",
    "select_metric",
];

impl TrainLog {
    /// CSV with a header row. `select_metric` is empty on rows without an
    /// evaluation; `wall_seconds` is appended only when recorded.
    pub fn to_csv(&self) -> String {
        let wall = self.records.iter().any(|r| r.wall_seconds.is_some());
        let mut out = LOG_COLUMNS.join(",");
        if wall {
            out.push_str(",wall_seconds");
        }
        out.push('\n');
        for r in &self.records {
            let p = &r.report;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},",
                r.iteration,
                p.primary_loss,
                p.dro_loss,
                p.combined,
                p.skipped_queries,
                p.mean_transport_cost,
                r.wdro_lambda,
                r.lambda1,
                r.lambda2
            );
            if let Some(m) = r.select_metric {
                let _ = write!(out, "{m}");
            }
            if wall {
                out.push(',');
                if let Some(w) = r.wall_seconds {
                    let _ = write!(out, "{w:.3}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::pointcloud::write_text(path.as_ref(), &self.to_csv())
    }
}

/// Fixed evaluation queries for model selection: fresh draws from the pool
/// law, shared by every evaluation of a run.
#[derive(Debug, Clone)]
pub struct SelectionSet {
    pub queries: Vec<Vec3>,
    pub points: Vec<Vec3>,
}

impl SelectionSet {
    pub fn new(points: &[Vec3], sigmas: &[f64], n_eval: usize, seed: u64) -> Result<Self> {
        if points.is_empty() || points.len() != sigmas.len() {
            return Err(Error::ShapeMismatch("selection set needs one σ per point".into()));
        }
        let mut r = rng::rng_from(seed);
        let queries = (0..n_eval)
            .map(|_| {
                let i = r.random_range(0..points.len());
                let d: Vec3 = [r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal)];
                geom::add(points[i], geom::scale(d, sigmas[i]))
            })
            .collect();
        Ok(Self {
            queries,
            points: points.to_vec(),
        })
    }
}

/// Chamfer-L1 between the pulled selection queries and the input points;
/// `+∞` when more than half of the pulls are undefined.
pub fn select_metric(params: &MlpParams, set: &SelectionSet) -> f64 {
    let pulled: Vec<Option<Vec3>> = set.queries.par_iter().map(|&q| net::pull(params, q)).collect();
    let good: Vec<Vec3> = pulled.into_iter().flatten().filter(|p| geom::is_finite(*p)).collect();
    if 2 * good.len() < set.queries.len() || good.is_empty() {
        return f64::INFINITY;
    }
    match metrics::chamfer(&good, &set.points) {
        Ok((cd1, _)) => cd1,
        Err(_) => f64::INFINITY,
    }
}

/// Optimizer state carried across a resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: MlpParams,
    pub adam: AdamState,
    pub wdro_lambda: f64,
}

impl TrainState {
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        let params = MlpParams::init(&config.net, rng::stream_seed(config.seed, Stream::Init))?;
        let adam = AdamState::new(&params);
        Ok(Self {
            params,
            adam,
            wdro_lambda: config.dro.wdro.lambda_init,
        })
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.adam.step as usize
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: MlpParams,
    pub best_metric: f64,
    pub best_iteration: usize,
    pub final_state: TrainState,
    pub final_metric: f64,
    pub initial_metric: f64,
    pub log: TrainLog,
    pub rho_avg: f64,
}

/// Trains from a fresh initialization.
pub fn train(cloud: &PointCloud, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(cloud, config, TrainState::initial(config)?)
}

/// Runs iterations `state.iteration() .. config.n_iterations`.
///
/// All randomness of iteration `t` derives from `(config.seed, t)`, so a run
/// resumed from a saved state continues exactly as the uninterrupted run.
pub fn train_from(cloud: &PointCloud, config: &TrainConfig, mut state: TrainState) -> Result<TrainOutcome> {
    config.validate()?;
    if state.params.config() != &config.net {
        return Err(Error::ShapeMismatch("initial state does not match the network configuration".into()));
    }
    let tree = KdTree::build(&cloud.points)?;
    let pool = build_query_pool(
        cloud,
        &tree,
        config.k,
        config.queries_per_point,
        config.knn_includes_self,
        rng::stream_seed(config.seed, Stream::Pool),
    )?;
    let rho_avg = pool.rho_avg();
    let sdro = match config.dro.mode {
        DroMode::Sdro => Some(SdroParams::from_config(&config.dro.sdro, rho_avg)?),
        _ => None,
    };
    let selection = SelectionSet::new(
        &cloud.points,
        &pool.point_sigma,
        config.eval_samples,
        rng::stream_seed(config.seed, Stream::Select),
    )?;
    let ctx = ObjectiveContext {
        dro: &config.dro,
        sdro,
        tree: Some(&tree),
        root_seed: config.seed,
        iteration: 0,
    };
    log::info!(
        "training {} iterations, mode {}, {} pool queries, ρ_avg {:.4e}",
        config.n_iterations,
        config.dro.mode,
        pool.len(),
        rho_avg
    );

    let start = state.iteration();
    let initial_metric = select_metric(&state.params, &selection);
    let mut best = state.params.clone();
    let mut best_metric = initial_metric;
    let mut best_iteration = start;
    let mut final_metric = initial_metric;
    let mut log = TrainLog::default();
    let batch_seed = rng::stream_seed(config.seed, Stream::Batch);
    let clock = Instant::now();
    let mut queries = vec![[0.0; 3]; config.batch_size];
    let mut nearest = vec![[0.0; 3]; config.batch_size];

    for it in start..config.n_iterations {
        let mut r = rng::rng_from(rng::derive(batch_seed, &[it as u64]));
        for b in 0..config.batch_size {
            let j = r.random_range(0..pool.len());
            queries[b] = pool.queries[j];
            nearest[b] = pool.nearest[j];
        }
        let batch = Batch::new(&queries, &nearest)?;
        let ctx = ObjectiveContext {
            iteration: it as u64,
            ..ctx
        };
        let obj = loss::batch_objective(&state.params, &batch, &ctx, state.wdro_lambda)?;
        if !obj.report.is_finite() || !obj.grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: batch_dump(&obj.report, &batch),
            });
        }
        adam_step(&mut state.params, &obj.grads, &mut state.adam, config.learning_rate)?;
        state.wdro_lambda = obj.wdro_lambda;
        if !state.params.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("parameters became non-finite; {}", batch_dump(&obj.report, &batch)),
            });
        }

        let done = it + 1;
        let evaluate = done % config.eval_every == 0 || done == config.n_iterations;
        let mut metric = None;
        if evaluate {
            let m = select_metric(&state.params, &selection);
            final_metric = m;
            if m < best_metric {
                best_metric = m;
                best = state.params.clone();
                best_iteration = done;
            }
            log::info!(
                "iter {done}: loss {:.4e} metric {m:.4e} (best {best_metric:.4e} @ {best_iteration})",
                obj.report.combined
            );
            metric = Some(m);
        }
        if evaluate || done % config.log_every == 0 {
            log.records.push(LogRecord {
                iteration: done,
                report: obj.report,
                wdro_lambda: state.wdro_lambda,
                lambda1: state.params.loss_weights[0],
                lambda2: state.params.loss_weights[1],
                select_metric: metric,
                wall_seconds: config.record_wall_time.then(|| clock.elapsed().as_secs_f64()),
            });
        }
    }
    if best_metric.is_infinite() && start < config.n_iterations {
        log::warn!("no evaluation produced a finite selection metric");
    }
    Ok(TrainOutcome {
        best,
        best_metric,
        best_iteration,
        final_state: state,
        final_metric,
        initial_metric,
        log,
        rho_avg,
    })
}

fn batch_dump(report: &LossReport, batch: &Batch) -> String {
    let mut s = format!("{report:?}; first queries:");
    for (q, p) in batch.queries.iter().zip(batch.nearest).take(8) {
        let _ = write!(s, " q={q:?} p={p:?};");
    }
    s
}
