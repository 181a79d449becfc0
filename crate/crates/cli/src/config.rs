//! Run configuration: every knob of a synth → fit → extract → eval run, kept
//! as flat `key = value` text with dotted section names.

use crate::UsageError;
use sdf_dro::loss::DroMode;
use sdf_dro::mesh::Bounds;
use sdf_dro::metrics::DEFAULT_TAU;
use sdf_dro::pointcloud::SyntheticShape;
use sdf_dro::trainer::TrainConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Which snapshot of a fit `extract` meshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Snapshot {
    Best,
    Final,
}

impl FromStr for Snapshot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "best" => Ok(Snapshot::Best),
            "final" => Ok(Snapshot::Final),
            _ => Err(format!("expected best or final, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Snapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Snapshot::Best => "best",
            Snapshot::Final => "final",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub shape: SyntheticShape,
    pub n: usize,
    /// Standard deviation of the added Gaussian noise, in shape units.
    pub noise: f64,
    pub seed: u64,
    /// Size of the dense clean sampling written next to the cloud; 0 skips it.
    pub gt_samples: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            shape: SyntheticShape::Sphere { radius: 0.4 },
            n: 1024,
            noise: 0.0,
            seed: 0,
            gt_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSettings {
    pub resolution: usize,
    pub bounds: Bounds,
    pub iso: f64,
    pub snapshot: Snapshot,
}

impl Default for ExtractSettings {
    fn default() -> Self {
        Self {
            resolution: 128,
            bounds: Bounds::default(),
            iso: 0.0,
            snapshot: Snapshot::Best,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub samples: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 100_000,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

/// Axes of a pipeline sweep. Empty lists fall back to the single values in
/// `synth` and `train`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepSettings {
    pub shapes: Vec<SyntheticShape>,
    pub noises: Vec<f64>,
    pub modes: Vec<DroMode>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub synth: SynthSettings,
    pub extract: ExtractSettings,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
}

/// Every key accepted by [`RunConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "io.input",
    "io.out_dir",
    "train.iters",
    "train.batch_size",
    "train.learning_rate",
    "train.k",
    "train.queries_per_point",
    "train.knn_includes_self",
    "train.seed",
    "train.eval_every",
    "train.eval_samples",
    "train.log_every",
    "train.record_wall_time",
    "net.depth",
    "net.width",
    "net.skip_layers",
    "net.activation",
    "net.init",
    "dro.mode",
    "dro.nap.rho",
    "dro.wdro.epsilon",
    "dro.wdro.lambda_init",
    "dro.wdro.sigma0",
    "dro.wdro.alpha_inner",
    "dro.wdro.n_inner",
    "dro.wdro.eta_lambda",
    "dro.sdro.lambda",
    "dro.sdro.rho",
    "dro.sdro.rho_relative",
    "dro.sdro.n_samples",
    "dro.sdro.rho_is_stddev",
    "dro.sdro.renearest_perturbed",
    "synth.shape",
    "synth.n",
    "synth.noise",
    "synth.seed",
    "synth.gt_samples",
    "extract.resolution",
    "extract.bounds_min",
    "extract.bounds_max",
    "extract.iso",
    "extract.checkpoint",
    "eval.samples",
    "eval.tau",
    "eval.seed",
    "sweep.shapes",
    "sweep.noises",
    "sweep.modes",
    "sweep.seeds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| UsageError(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        v => Err(UsageError(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, UsageError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_vec3(key: &str, value: &str) -> Result<[f64; 3], UsageError> {
    let v: Vec<f64> = parse_list(key, value)?;
    match v.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(UsageError(format!("{key}: expected one or three numbers, got {value:?}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment; blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), UsageError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| UsageError(format!("line {}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<(), UsageError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let t = &mut self.train;
        match key {
            "io.input" => self.input = (!value.is_empty()).then(|| PathBuf::from(value)),
            "io.out_dir" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train.iters" => t.n_iterations = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.k" => t.k = parse(key, value)?,
            "train.queries_per_point" => t.queries_per_point = parse(key, value)?,
            "train.knn_includes_self" => t.knn_includes_self = parse_bool(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "train.eval_samples" => t.eval_samples = parse(key, value)?,
            "train.log_every" => t.log_every = parse(key, value)?,
            "train.record_wall_time" => t.record_wall_time = parse_bool(key, value)?,
            "net.depth" => t.net.depth = parse(key, value)?,
            "net.width" => t.net.width = parse(key, value)?,
            "net.skip_layers" => t.net.skip_layers = parse_list(key, value)?,
            "net.activation" => t.net.activation = parse(key, value)?,
            "net.init" => t.net.init = parse(key, value)?,
            "dro.mode" => t.dro.mode = parse(key, value)?,
            "dro.nap.rho" => t.dro.nap_rho = parse(key, value)?,
            "dro.wdro.epsilon" => t.dro.wdro.epsilon = parse(key, value)?,
            "dro.wdro.lambda_init" => t.dro.wdro.lambda_init = parse(key, value)?,
            "dro.wdro.sigma0" => t.dro.wdro.sigma0 = parse(key, value)?,
            "dro.wdro.alpha_inner" => t.dro.wdro.alpha_inner = parse(key, value)?,
            "dro.wdro.n_inner" => t.dro.wdro.n_inner = parse(key, value)?,
            "dro.wdro.eta_lambda" => t.dro.wdro.eta_lambda = parse(key, value)?,
            "dro.sdro.lambda" => t.dro.sdro.lambda = parse(key, value)?,
            "dro.sdro.rho" => t.dro.sdro.rho = parse(key, value)?,
            "dro.sdro.rho_relative" => t.dro.sdro.rho_relative = parse_bool(key, value)?,
            "dro.sdro.n_samples" => t.dro.sdro.n_samples = parse(key, value)?,
            "dro.sdro.rho_is_stddev" => t.dro.sdro.rho_is_stddev = parse_bool(key, value)?,
            "dro.sdro.renearest_perturbed" => t.dro.sdro.renearest_perturbed = parse_bool(key, value)?,
            "synth.shape" => self.synth.shape = parse(key, value)?,
            "synth.n" => self.synth.n = parse(key, value)?,
            "synth.noise" => self.synth.noise = parse(key, value)?,
            "synth.seed" => self.synth.seed = parse(key, value)?,
            "synth.gt_samples" => self.synth.gt_samples = parse(key, value)?,
            "extract.resolution" => self.extract.resolution = parse(key, value)?,
            "extract.bounds_min" => self.extract.bounds.min = parse_vec3(key, value)?,
            "extract.bounds_max" => self.extract.bounds.max = parse_vec3(key, value)?,
            "extract.iso" => self.extract.iso = parse(key, value)?,
            "extract.checkpoint" => self.extract.snapshot = parse(key, value)?,
            "eval.samples" => self.eval.samples = parse(key, value)?,
            "eval.tau" => self.eval.tau = parse(key, value)?,
            "eval.seed" => self.eval.seed = parse(key, value)?,
            "sweep.shapes" => self.sweep.shapes = parse_list(key, value)?,
            "sweep.noises" => self.sweep.noises = parse_list(key, value)?,
            "sweep.modes" => self.sweep.modes = parse_list(key, value)?,
            "sweep.seeds" => self.sweep.seeds = parse_list(key, value)?,
            _ => return Err(UsageError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let b = &self.extract.bounds;
        let vals = vec![
            path(&self.input),
            path(&self.out_dir),
            t.n_iterations.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.k.to_string(),
            t.queries_per_point.to_string(),
            t.knn_includes_self.to_string(),
            t.seed.to_string(),
            t.eval_every.to_string(),
            t.eval_samples.to_string(),
            t.log_every.to_string(),
            t.record_wall_time.to_string(),
            t.net.depth.to_string(),
            t.net.width.to_string(),
            join(&t.net.skip_layers),
            t.net.activation.to_string(),
            t.net.init.to_string(),
            t.dro.mode.to_string(),
            t.dro.nap_rho.to_string(),
            t.dro.wdro.epsilon.to_string(),
            t.dro.wdro.lambda_init.to_string(),
            t.dro.wdro.sigma0.to_string(),
            t.dro.wdro.alpha_inner.to_string(),
            t.dro.wdro.n_inner.to_string(),
            t.dro.wdro.eta_lambda.to_string(),
            t.dro.sdro.lambda.to_string(),
            t.dro.sdro.rho.to_string(),
            t.dro.sdro.rho_relative.to_string(),
            t.dro.sdro.n_samples.to_string(),
            t.dro.sdro.rho_is_stddev.to_string(),
            t.dro.sdro.renearest_perturbed.to_string(),
            self.synth.shape.to_string(),
            self.synth.n.to_string(),
            self.synth.noise.to_string(),
            self.synth.seed.to_string(),
            self.synth.gt_samples.to_string(),
            self.extract.resolution.to_string(),
            join(&b.min),
            join(&b.max),
            self.extract.iso.to_string(),
            self.extract.snapshot.to_string(),
            self.eval.samples.to_string(),
            self.eval.tau.to_string(),
            self.eval.seed.to_string(),
            join(&self.sweep.shapes),
            join(&self.sweep.noises),
            join(&self.sweep.modes),
            join(&self.sweep.seeds),
        ];
        CONFIG_KEYS.iter().copied().zip(vals).collect()
    }

    /// The resolved configuration, one `key = value` line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {s}");
                section = s;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Range checks with the offending key in every message.
    pub fn validate(&self) -> Result<(), UsageError> {
        self.train.validate().map_err(|e| UsageError(e.to_string()))?;
        let bad = |m: String| Err(UsageError(m));
        if self.synth.n < 1 {
            return bad("synth.n must be >= 1".into());
        }
        if !(self.synth.noise >= 0.0 && self.synth.noise.is_finite()) {
            return bad(format!("synth.noise must be finite and >= 0, got {}", self.synth.noise));
        }
        self.synth.shape.validate().map_err(|e| UsageError(format!("synth.shape: {e}")))?;
        if self.extract.resolution < 2 {
            return bad(format!("extract.resolution must be >= 2, got {}", self.extract.resolution));
        }
        self.extract
            .bounds
            .validate()
            .map_err(|e| UsageError(format!("extract.bounds_min/bounds_max: {e}")))?;
        if !self.extract.iso.is_finite() {
            return bad("extract.iso must be finite".into());
        }
        if self.eval.samples < 1 {
            return bad("eval.samples must be >= 1".into());
        }
        if !(self.eval.tau > 0.0 && self.eval.tau.is_finite()) {
            return bad(format!("eval.tau must be positive, got {}", self.eval.tau));
        }
        if let Some(n) = self.sweep.noises.iter().find(|n| !(**n >= 0.0 && n.is_finite())) {
            return bad(format!("sweep.noises entries must be finite and >= 0, got {n}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.train.learning_rate = 0.1 + 0.2;
        c.train.net.skip_layers = vec![2, 3];
        c.train.dro.mode = DroMode::Wdro;
        c.synth.shape = "torus:0.3:0.1".parse().unwrap();
        c.sweep.noises = vec![0.0, 0.005, 0.025];
        c.sweep.modes = vec![DroMode::Np, DroMode::Sdro];
        c.input = Some("a b/points.xyz".into());
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn every_key_is_written_once() {
        let e = RunConfig::default().entries();
        assert_eq!(e.len(), CONFIG_KEYS.len());
        let mut c = RunConfig::default();
        for (k, v) in e {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn file_values_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\ndro.sdro.lambda = 20 # trailing\ndro.mode=np\nextract.bounds_min = -1\n")
            .unwrap();
        assert_eq!(c.train.dro.sdro.lambda, 20.0);
        assert_eq!(c.train.dro.mode, DroMode::Np);
        assert_eq!(c.extract.bounds.min, [-1.0; 3]);
        let e = c.apply_text("a = 1\n").unwrap_err();
        assert!(e.0.contains("line 1") && e.0.contains("\"a\""));
        assert!(c.apply_text("train.iters = many\n").unwrap_err().0.contains("train.iters"));
        assert!(c.apply_text("train.iters\n").is_err());
        assert!(c.apply_assignment("train.k=3").is_ok());
        assert_eq!(c.train.k, 3);
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.train.batch_size = 0;
        assert!(c.validate().unwrap_err().0.contains("batch_size"));
        c = RunConfig::default();
        c.extract.resolution = 1;
        assert!(c.validate().unwrap_err().0.contains("extract.resolution"));
        c = RunConfig::default();
        c.eval.tau = 0.0;
        assert!(c.validate().unwrap_err().0.contains("eval.tau"));
        c = RunConfig::default();
        c.train.dro.sdro.n_samples = 0;
        assert!(c.validate().is_err());
    }
}
