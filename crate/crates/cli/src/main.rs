use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use sdf_dro::loss::DroMode;
use sdf_dro::pointcloud::SyntheticShape;
use sdf_dro_cli::config::{EvalSettings, ExtractSettings, SynthSettings};
use sdf_dro_cli::{commands, exit_code, RunConfig, Status, UsageError, EXIT_EMPTY, EXIT_OK, EXIT_USAGE};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "sdfdro", version, about = "Neural SDF reconstruction from sparse noisy point clouds")]
struct Cli {
    /// Worker threads (also SDFDRO_THREADS). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample an analytic shape and add Gaussian noise.
    Synth(SynthArgs),
    /// Fit a network to a point cloud.
    Fit(FitArgs),
    /// Mesh the zero level set of a checkpoint.
    Extract(ExtractArgs),
    /// Compare a mesh against a ground truth.
    Eval(EvalArgs),
    /// synth, fit, extract and eval over a sweep.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// sphere, torus, box, or with parameters (sphere:0.4, torus:0.3:0.12)
    #[arg(long, default_value = "sphere")]
    shape: SyntheticShape,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output cloud (.xyz or .ply).
    #[arg(long)]
    out: PathBuf,
    /// Dense clean sampling with normals, for `eval --gt`.
    #[arg(long)]
    gt_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    gt_samples: usize,
}

/// Config sources shared by `fit` and `pipeline`.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    mode: Option<DroMode>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// SDRO dual scalar λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// SDRO ρ (a multiple of the mean local scale unless rho_relative is off).
    #[arg(long)]
    rho: Option<f64>,
    /// SDRO samples per query.
    #[arg(long)]
    ns: Option<usize>,
    /// WDRO initial λ.
    #[arg(long)]
    lambda_init: Option<f64>,
    /// WDRO radius ε.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Validate and print the resolved config without computing.
    #[arg(long)]
    dry_run: bool,
}

impl ConfigArgs {
    /// Defaults, then the file, then `--set`, then explicit flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        for kv in &self.sets {
            cfg.apply_assignment(kv)?;
        }
        let t = &mut cfg.train;
        if let Some(m) = self.mode {
            t.dro.mode = m;
        }
        if let Some(v) = self.iters {
            t.n_iterations = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lambda {
            t.dro.sdro.lambda = v;
        }
        if let Some(v) = self.rho {
            t.dro.sdro.rho = v;
        }
        if let Some(v) = self.ns {
            t.dro.sdro.n_samples = v;
        }
        if let Some(v) = self.lambda_init {
            t.dro.wdro.lambda_init = v;
        }
        if let Some(v) = self.epsilon {
            t.dro.wdro.epsilon = v;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Input cloud (.xyz or .ply); falls back to io.input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Falls back to io.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a final checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output mesh (.obj or .ply).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 0.0)]
    iso: f64,
    /// Half-width of the cubic grid in normalized units.
    #[arg(long, default_value_t = 0.55)]
    bound: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted mesh.
    #[arg(long)]
    pred: PathBuf,
    /// Mesh file, `x y z nx ny nz` samples, or a shape name.
    #[arg(long)]
    gt: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Falls back to io.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated shapes.
    #[arg(long, value_delimiter = ',')]
    shapes: Vec<SyntheticShape>,
    /// Comma-separated noise levels.
    #[arg(long, value_delimiter = ',')]
    noises: Vec<f64>,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<DroMode>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn required(p: Option<PathBuf>, from_cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.or_else(|| from_cfg.clone())
        .ok_or_else(|| UsageError(format!("{what} is required (flag or config key)")).into())
}

fn dry_run(cfg: &RunConfig) -> Result<Status> {
    cfg.validate()?;
    print!("{}", cfg.to_text());
    Ok(Status::Done)
}

fn run(cli: Cli) -> Result<Status> {
    sdf_dro_cli::configure_threads(cli.threads)?;
    match cli.command {
        Command::Synth(a) => {
            let settings = SynthSettings {
                shape: a.shape,
                n: a.n,
                noise: a.noise,
                seed: a.seed,
                gt_samples: a.gt_samples,
            };
            let mut cfg = RunConfig::default();
            cfg.synth = settings.clone();
            cfg.validate()?;
            commands::synth(&settings, &a.out, a.gt_out.as_deref())?;
            Ok(Status::Done)
        }
        Command::Fit(a) => {
            let cfg = a.config.resolve()?;
            let input = required(a.input, &cfg.input, "--input")?;
            let out_dir = required(a.out_dir, &cfg.out_dir, "--out-dir")?;
            if a.config.dry_run {
                if !input.is_file() {
                    return Err(UsageError(format!("input {} does not exist", input.display())).into());
                }
                return dry_run(&cfg);
            }
            commands::fit(&cfg, &input, &out_dir, a.resume.as_deref())?;
            Ok(Status::Done)
        }
        Command::Extract(a) => {
            let mut cfg = RunConfig::default();
            cfg.extract = ExtractSettings {
                resolution: a.resolution,
                bounds: sdf_dro::mesh::Bounds {
                    min: [-a.bound; 3],
                    max: [a.bound; 3],
                },
                iso: a.iso,
                ..ExtractSettings::default()
            };
            cfg.validate()?;
            commands::extract(&a.checkpoint, &cfg.extract, &a.out)
        }
        Command::Eval(a) => {
            let mut cfg = RunConfig::default();
            cfg.eval = EvalSettings {
                samples: a.samples,
                tau: a.tau,
                seed: a.seed,
            };
            cfg.validate()?;
            let gt = commands::load_ground_truth(&a.gt)?;
            let r = commands::eval(&a.pred, &gt, &cfg.eval, &a.out_dir)?;
            print!("{}", r.to_text());
            Ok(Status::Done)
        }
        Command::Pipeline(a) => {
            let mut cfg = a.config.resolve()?;
            if !a.shapes.is_empty() {
                cfg.sweep.shapes = a.shapes;
            }
            if !a.noises.is_empty() {
                cfg.sweep.noises = a.noises;
            }
            if !a.modes.is_empty() {
                cfg.sweep.modes = a.modes;
            }
            if !a.seeds.is_empty() {
                cfg.sweep.seeds = a.seeds;
            }
            let out_dir = required(a.out_dir, &cfg.out_dir, "--out-dir")?;
            if a.config.dry_run {
                return dry_run(&cfg);
            }
            let rows = commands::pipeline(&cfg, &out_dir)?;
            print!("{}", commands::pipeline_csv(&rows));
            Ok(Status::Done)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    match run(cli) {
        Ok(Status::Done) => ExitCode::from(EXIT_OK as u8),
        Ok(Status::EmptyMesh) => ExitCode::from(EXIT_EMPTY as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
