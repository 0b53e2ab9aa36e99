//! The `sde-elbo` command line.
//!
//! Every command writes its fully resolved configuration as `config.toml`
//! next to its outputs. `SDE_ELBO_SEED` overrides the configured seed; an
//! explicit `--seed` flag overrides both.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checks::{self, Budget, Suite};
use crate::data::{gaussian, gaussian_mixture, swiss_roll, Dataset};
use crate::elbo::{ode_log_likelihood, ElboConfig, ElboTerms, PluginModel};
use crate::error::Error;
use crate::field::{DivMode, VectorField};
use crate::points::Points;
use crate::rng::seeded;
use crate::sampler::LambdaSampler;
use crate::score_net::{Activation, NetConfig, ScoreNet};
use crate::stats::MeanStderr;
use crate::svg;
use crate::train::{train, TrainConfig};
use crate::vp_sde::{GaussianOracle, VpSde};

pub const SEED_ENV: &str = "SDE_ELBO_SEED";

#[derive(Debug, Parser)]
#[command(name = "sde-elbo", version, about = "Likelihood bounds, score matching and sampling for diffusion models")]
pub struct Cli {
    /// Caps the worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a score network from a TOML config.
    Train(TrainArgs),
    /// Estimate the CT-ELBO (or the ODE likelihood) of a model.
    Elbo(ElboArgs),
    /// Draw samples from a lambda-family reverse SDE.
    Sample(SampleArgs),
    /// Run a property suite and report pass/fail.
    Check(CheckArgs),
    /// Export a toy dataset as CSV.
    Data(DataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model to evaluate: a checkpoint, the Gaussian oracle, or both (the oracle
/// then supplies the true marginal score needed for `lambda > 0`).
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the Gaussian oracle `N(mean, I)` as data model and score.
    #[arg(long)]
    pub oracle: bool,
    /// Oracle dimension when no checkpoint fixes it.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Oracle data mean, comma separated; defaults to zero.
    #[arg(long, value_delimiter = ',')]
    pub mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivFlag {
    Exact,
    Hutch,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ElboArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Use the probability-flow ODE likelihood; required for lambda = 1.
    #[arg(long)]
    pub ode: bool,
    /// Paths per data point.
    #[arg(long, default_value_t = 4096, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, value_enum, default_value_t = DivFlag::Exact)]
    pub div: DivFlag,
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
    /// A single evaluation point, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "data")]
    pub x: Option<Vec<f64>>,
    /// Dataset CSV to average over (as written by `data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Points drawn from the oracle when neither `--x` nor `--data` is given.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CheckArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    /// Smaller Monte-Carlo budgets with correspondingly looser tolerances.
    #[arg(long)]
    pub quick: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    SwissRoll,
    /// Two unit-weight Gaussians at `(+-2, 0)` with variance 0.25.
    TwoGaussians,
    Gaussian,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DataKind::SwissRoll)]
    pub kind: DataKind,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV path.
    #[arg(long, default_value = "out/data.csv")]
    pub out: PathBuf,
}

/// Dataset section of a training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    SwissRoll {
        n: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
    },
    GaussianMixture {
        n: usize,
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        cov_scale: f64,
    },
    Gaussian {
        n: usize,
        mean: Vec<f64>,
        cov: Vec<f64>,
    },
    /// A CSV written by `sde-elbo data`.
    Csv { path: PathBuf },
}

fn default_noise() -> f64 {
    0.05
}

impl DataConfig {
    pub fn build(&self, seed: u64) -> crate::error::Result<Dataset> {
        match self {
            DataConfig::SwissRoll { n, noise_std } => swiss_roll(*n, *noise_std, seed),
            DataConfig::GaussianMixture {
                n,
                centers,
                weights,
                cov_scale,
            } => gaussian_mixture(centers, weights, *cov_scale, *n, seed),
            DataConfig::Gaussian { n, mean, cov } => gaussian(mean.clone(), cov.clone(), *n, seed),
            DataConfig::Csv { path } => Dataset::from_csv(&std::fs::read_to_string(path)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    NetConfig::new(1).hidden
}

fn default_time_features() -> usize {
    NetConfig::new(1).time_features
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            time_features: default_time_features(),
            activation: Activation::default(),
        }
    }
}

/// Training run configuration. `seed` drives data generation, network
/// initialization and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub sde: VpSde,
    #[serde(default)]
    pub net: NetSection,
    pub train: TrainConfig,
}

impl TrainRunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn env_seed() -> Result<Option<u64>, String> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, String> {
    Ok(flag.or(env_seed()?).unwrap_or(0))
}

fn write(path: &Path, contents: &str) -> Result<(), String> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    std::fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_config<T: Serialize>(dir: &Path, cfg: &T) -> Result<(), String> {
    let text = toml::to_string(cfg).map_err(|e| e.to_string())?;
    write(&dir.join("config.toml"), &text)
}

fn err(e: Error) -> String {
    e.to_string()
}

/// Loaded model: optional network, optional oracle, and the SDE they share.
struct Model {
    net: Option<ScoreNet>,
    oracle: Option<GaussianOracle>,
    sde: VpSde,
}

impl Model {
    fn load(args: &ModelArgs) -> Result<Self, String> {
        let net = match &args.checkpoint {
            Some(p) => Some(
                ScoreNet::load(p)
                    .map_err(|e| format!("cannot load checkpoint {}: {e}", p.display()))?
                    .0,
            ),
            None => None,
        };
        if net.is_none() && !args.oracle {
            return Err("give --checkpoint, --oracle, or both".into());
        }
        let sde = net.as_ref().map(|n| *n.sde()).unwrap_or_default();
        let dim = net.as_ref().map(|n| n.dim()).unwrap_or(args.dim);
        let oracle = if args.oracle {
            let mean = args.mean.clone().unwrap_or_else(|| vec![0.0; dim]);
            if mean.len() != dim {
                return Err(format!("--mean has {} entries, model dimension is {dim}", mean.len()));
            }
            Some(GaussianOracle::isotropic(mean, sde))
        } else {
            None
        };
        Ok(Self { net, oracle, sde })
    }

    fn score(&self) -> &dyn VectorField {
        match (&self.net, &self.oracle) {
            (Some(n), _) => n,
            (None, Some(o)) => o,
            (None, None) => unreachable!("checked in load"),
        }
    }

    fn dim(&self) -> usize {
        self.score().dim()
    }
}

#[derive(Debug, Serialize)]
struct ElboReport {
    estimator: String,
    lambda: f64,
    n_points: usize,
    n_paths: u64,
    n_steps: u64,
    mean: f64,
    stderr: f64,
    bits_per_dim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    terms: Option<ElboTerms>,
}

fn cmd_elbo(args: &ElboArgs) -> Result<(), String> {
    if !(0.0..=1.0).contains(&args.lambda) {
        return Err(format!("--lambda must lie in [0, 1], got {}", args.lambda));
    }
    if args.lambda >= 1.0 && !args.ode {
        return Err("lambda = 1 is the probability-flow ODE: the CT-ELBO's weight 1/(1 - lambda) diverges as lambda -> 1, \
                    so pass --ode to compute the exact ODE likelihood instead"
            .into());
    }
    if args.ode && args.lambda != 1.0 {
        return Err("--ode computes the lambda = 1 likelihood; drop --lambda or set it to 1".into());
    }
    let seed = resolve_seed(args.seed)?;
    let mut resolved = args.clone();
    resolved.seed = Some(seed);
    let model = Model::load(&args.model)?;
    let d = model.dim();
    let mut rng = seeded(seed);
    let points = match (&args.x, &args.data) {
        (Some(x), _) => Points::new(d, x.clone()).map_err(err)?,
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Dataset::from_csv(&text).map_err(err)?.points
        }
        (None, None) => match &model.oracle {
            Some(o) => o.sample_data(args.n, &mut rng),
            None => return Err("without --oracle, give --x or --data".into()),
        },
    };
    if points.dim() != d {
        return Err(format!("data dimension {} does not match model dimension {d}", points.dim()));
    }
    let div = match args.div {
        DivFlag::Exact => DivMode::Exact,
        DivFlag::Hutch => DivMode::Hutchinson { probes: args.probes },
    };
    let cfg = ElboConfig::new(args.paths as usize, args.steps as usize).with_div(div);
    let score = model.score();
    let report = if args.ode {
        let mut vals = Vec::with_capacity(points.len());
        let mut last = None;
        for x in points.rows() {
            let e = ode_log_likelihood(score, &model.sde, x, &cfg, &mut rng).map_err(err)?;
            vals.push(e.mean);
            last = Some(e);
        }
        let s = summarize(&vals, last.as_ref().map(|e| (e.mean, e.stderr)));
        ElboReport {
            estimator: "ode".into(),
            lambda: 1.0,
            n_points: points.len(),
            n_paths: args.paths,
            n_steps: args.steps,
            mean: s.mean,
            stderr: s.stderr,
            bits_per_dim: -s.mean / (d as f64 * std::f64::consts::LN_2),
            terms: None,
        }
    } else {
        let pm = PluginModel::with_lambda(score, model.oracle.as_ref(), model.sde, args.lambda).map_err(err)?;
        if points.len() == 1 {
            let e = pm.ct_elbo(points.row(0), &cfg, &mut rng).map_err(err)?;
            ElboReport {
                estimator: "ct_elbo".into(),
                lambda: args.lambda,
                n_points: 1,
                n_paths: args.paths,
                n_steps: args.steps,
                mean: e.mean,
                stderr: e.stderr,
                bits_per_dim: e.bits_per_dim(d),
                terms: Some(e.terms),
            }
        } else {
            let (_, s) = pm.ct_elbo_over_data(&points, &cfg, &mut rng).map_err(err)?;
            ElboReport {
                estimator: "ct_elbo".into(),
                lambda: args.lambda,
                n_points: points.len(),
                n_paths: args.paths,
                n_steps: args.steps,
                mean: s.mean,
                stderr: s.stderr,
                bits_per_dim: -s.mean / (d as f64 * std::f64::consts::LN_2),
                terms: None,
            }
        }
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    println!("{json}");
    write(&args.out.join("elbo.json"), &format!("{json}\n"))?;
    write_config(&args.out, &resolved)
}

/// Mean over points; a single point keeps its own Monte-Carlo stderr.
fn summarize(vals: &[f64], single: Option<(f64, f64)>) -> MeanStderr {
    match (vals.len(), single) {
        (1, Some((m, s))) => MeanStderr { mean: m, stderr: s, n: 1 },
        _ => MeanStderr::from_values(vals),
    }
}

fn cmd_sample(args: &SampleArgs) -> Result<(), String> {
    if !(0.0..=1.0).contains(&args.lambda) {
        return Err(format!("--lambda must lie in [0, 1], got {}", args.lambda));
    }
    let seed = resolve_seed(args.seed)?;
    let mut resolved = args.clone();
    resolved.seed = Some(seed);
    let model = Model::load(&args.model)?;
    let sampler = LambdaSampler::new(model.score(), model.sde, args.lambda, args.steps as usize).map_err(err)?;
    let pts = sampler.sample(args.n as usize, &mut seeded(seed)).map_err(err)?;
    write(&args.out.join("samples.csv"), &pts.to_csv())?;
    if pts.dim() == 2 {
        let title = format!("lambda = {}, {} samples", args.lambda, pts.len());
        write(&args.out.join("samples.svg"), &svg::scatter(&pts, &title).map_err(err)?)?;
    }
    let (m, c) = pts.mean_and_covariance();
    println!("samples: {}  mean: {m:?}  covariance: {c:?}", pts.len());
    write_config(&args.out, &resolved)
}

fn cmd_check(args: &CheckArgs) -> Result<bool, String> {
    let seed = resolve_seed(args.seed)?;
    let mut resolved = args.clone();
    resolved.seed = Some(seed);
    let budget = if args.quick { Budget::Quick } else { Budget::Full };
    let report = checks::run(args.suite, budget, &mut seeded(seed)).map_err(err)?;
    print!("{}", report.to_text());
    write(&args.out.join("report.csv"), &report.to_csv())?;
    write(&args.out.join("report.txt"), &report.to_text())?;
    for (name, contents) in &report.artifacts {
        write(&args.out.join(name), contents)?;
    }
    write_config(&args.out, &resolved)?;
    if !report.passed() {
        for a in report.failures() {
            eprintln!("failed: {} = {:e} (tolerance: {})", a.name, a.measured, a.tolerance);
        }
    }
    Ok(report.passed())
}

fn cmd_data(args: &DataArgs) -> Result<(), String> {
    let seed = resolve_seed(args.seed)?;
    let ds = match args.kind {
        DataKind::SwissRoll => swiss_roll(args.n, args.noise_std, seed),
        DataKind::TwoGaussians => gaussian_mixture(&[vec![2.0, 0.0], vec![-2.0, 0.0]], &[0.5, 0.5], 0.25, args.n, seed),
        DataKind::Gaussian => gaussian(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], args.n, seed),
    }
    .map_err(err)?;
    write(&args.out, &ds.to_csv())?;
    let mut resolved = args.clone();
    resolved.seed = Some(seed);
    let dir = args.out.parent().unwrap_or(Path::new("."));
    write_config(dir, &resolved)
}

fn cmd_train(args: &TrainArgs) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read config {}: {e}", args.config.display()))?;
    let mut cfg = TrainRunConfig::from_toml(&text).map_err(|e| format!("{}: {e}", args.config.display()))?;
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.train.seed = cfg.seed;
    let data = cfg.data.build(cfg.seed).map_err(err)?;
    if data.is_empty() {
        return Err("the configured dataset is empty".into());
    }
    let net_cfg = NetConfig {
        dim: data.dim(),
        hidden: cfg.net.hidden.clone(),
        time_features: cfg.net.time_features,
        activation: cfg.net.activation,
    };
    let mut net = ScoreNet::init(&net_cfg, cfg.train.parameterize.into(), cfg.sde, cfg.seed).map_err(err)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| format!("{}: {e}", cfg.output_dir.display()))?;
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    let report = train(&mut net, &data, &cfg.train, Some(&cfg.output_dir)).map_err(err)?;
    if let Some(last) = report.metrics.last() {
        println!(
            "trained {} iterations: loss {:.6} +- {:.2e}",
            last.iter, last.loss_mean, last.loss_stderr
        );
    }
    if let (Some(a), Some(b)) = (report.first_elbo(), report.last_elbo()) {
        println!(
            "held-out CT-ELBO: {:.4} +- {:.4} -> {:.4} +- {:.4}",
            a.mean, a.stderr, b.mean, b.stderr
        );
    }
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return 2;
        }
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Elbo(a) => cmd_elbo(a).map(|_| true),
        Command::Sample(a) => cmd_sample(a).map(|_| true),
        Command::Check(a) => cmd_check(a),
        Command::Data(a) => cmd_data(a).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_rejects_unknown_keys() {
        let good = r#"
            seed = 3
            output_dir = "out"
            [data]
            name = "swiss_roll"
            n = 100
            [train]
            loss_kind = "dsm_weighted_uniform"
            iters = 5
        "#;
        let cfg = TrainRunConfig::from_toml(good).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.iters, 5);
        assert_eq!(TrainRunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainRunConfig::from_toml(&good.replace("iters = 5", "iters = 5\nbogus = 1")).is_err());
        assert!(TrainRunConfig::from_toml(&good.replace("n = 100", "n = 100\nextra = 2")).is_err());
        assert!(TrainRunConfig::from_toml(&good.replace("iters = 5", "iters = 5\nseed = 9")).is_err());
    }
}
