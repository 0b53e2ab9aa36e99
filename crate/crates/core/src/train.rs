//! Minibatch training of the score network with Adam.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::elbo::{ElboConfig, PluginModel};
use crate::error::{check_dim, Error, Result};
use crate::field::{DivMode, VectorField};
use crate::losses::S_MIN;
use crate::points::Points;
use crate::rng::{fork, normal_vec, rademacher_vec, seeded, stream, uniform, Rng};
use crate::score_net::{OutputKind, ParamGrad, ScoreNet};
use crate::stats::MeanStderr;
use crate::time_sampler::{DebiasedTimeDist, DEFAULT_S_EPS};
use crate::vp_sde::VpSde;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/2 ||sqrt(v_s) s_theta + eps||^2` with `s ~ U[S_MIN, T]`.
    DsmWeightedUniform,
    /// Weighted DSM with times from the debiased distribution, scaled by its
    /// normalizer.
    DsmDebiased,
    /// Sliced score matching `1/2 g^2 ||s_theta||^2 + g^2 v^T J v`, uniform times.
    Ssm,
}

/// What the network's output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterize {
    Score,
    #[default]
    DriftA,
}

impl From<Parameterize> for OutputKind {
    fn from(p: Parameterize) -> Self {
        match p {
            Parameterize::Score => OutputKind::Score,
            Parameterize::DriftA => OutputKind::Drift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Set by the run configuration rather than read from the train section.
    #[serde(skip)]
    pub seed: u64,
    /// Iterations between metric rows and held-out evaluations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub parameterize: Parameterize,
    /// Held-out points used for the CT-ELBO; 0 disables evaluation.
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    #[serde(default = "default_eval_paths")]
    pub eval_paths: usize,
    #[serde(default = "default_eval_steps")]
    pub eval_steps: usize,
    #[serde(default = "default_eval_probes")]
    pub eval_probes: usize,
    #[serde(default = "default_s_eps")]
    pub s_eps: f64,
    /// Record elapsed seconds in the metrics; off gives byte-identical reruns.
    #[serde(default = "default_true")]
    pub wall_clock: bool,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    128
}
fn default_iters() -> usize {
    20_000
}
fn default_eval_every() -> usize {
    1000
}
fn default_eval_points() -> usize {
    128
}
fn default_eval_paths() -> usize {
    4
}
fn default_eval_steps() -> usize {
    100
}
fn default_eval_probes() -> usize {
    1
}
fn default_s_eps() -> f64 {
    DEFAULT_S_EPS
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(loss_kind: LossKind) -> Self {
        Self {
            loss_kind,
            lr: default_lr(),
            batch: default_batch(),
            iters: default_iters(),
            seed: 0,
            eval_every: default_eval_every(),
            parameterize: Parameterize::default(),
            eval_points: default_eval_points(),
            eval_paths: default_eval_paths(),
            eval_steps: default_eval_steps(),
            eval_probes: default_eval_probes(),
            s_eps: default_s_eps(),
            wall_clock: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidParameter("eval_every must be >= 1".into()));
        }
        if self.eval_points > 0 && (self.eval_paths == 0 || self.eval_steps == 0 || self.eval_probes == 0) {
            return Err(Error::InvalidParameter("eval_paths, eval_steps and eval_probes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_dim(state.m.len(), params.len())?;
    check_dim(params.len(), grads.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub wall_clock_s: f64,
    pub loss_mean: f64,
    pub loss_stderr: f64,
    pub eval_elbo_mean: Option<f64>,
    pub eval_elbo_stderr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config_hash: String,
    pub metrics: Vec<MetricsRow>,
    /// Batch-mean loss of every iteration.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("iter,wall_clock_s,loss_mean,loss_stderr,eval_elbo_mean,eval_elbo_stderr\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter,
                r.wall_clock_s,
                r.loss_mean,
                r.loss_stderr,
                opt(r.eval_elbo_mean),
                opt(r.eval_elbo_stderr)
            ));
        }
        out
    }

    pub fn first_elbo(&self) -> Option<MeanStderr> {
        self.metrics.iter().find_map(row_elbo)
    }

    pub fn last_elbo(&self) -> Option<MeanStderr> {
        self.metrics.iter().rev().find_map(row_elbo)
    }
}

fn row_elbo(r: &MetricsRow) -> Option<MeanStderr> {
    Some(MeanStderr {
        mean: r.eval_elbo_mean?,
        stderr: r.eval_elbo_stderr?,
        n: 0,
    })
}

/// Upward move between consecutive block means of the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendViolation {
    pub block: usize,
    pub from: MeanStderr,
    pub to: MeanStderr,
}

/// Block means of `losses` over windows of `block` iterations; a move up is
/// tolerated when it is within 5% of the previous block or within one
/// combined standard error.
pub fn moving_average_violations(losses: &[f64], block: usize) -> Vec<TrendViolation> {
    let blocks: Vec<MeanStderr> = losses.chunks(block.max(1)).filter(|c| c.len() == block).map(MeanStderr::from_values).collect();
    blocks
        .windows(2)
        .enumerate()
        .filter_map(|(j, w)| {
            let rise = w[1].mean - w[0].mean;
            let allowed = (0.05 * w[0].mean.abs()).max(w[0].combined_stderr(&w[1]));
            (rise > allowed).then(|| TrendViolation {
                block: j + 1,
                from: w[0],
                to: w[1],
            })
        })
        .collect()
}

const CHUNKS: usize = 16;

struct BatchOut {
    grad: ParamGrad,
    rows: Vec<f64>,
}

/// Loss rows and summed parameter gradient for one minibatch. Rows are
/// split into a fixed number of chunks so the reduction order does not
/// depend on the thread count.
fn batch_gradient(
    net: &ScoreNet,
    kind: LossKind,
    dist: &DebiasedTimeDist,
    y0: &[&[f64]],
    seed: u64,
) -> BatchOut {
    let sde = *net.sde();
    let n = y0.len();
    let np = net.num_params();
    let chunk = n.div_ceil(CHUNKS).max(1);
    let parts: Vec<BatchOut> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut grad = ParamGrad::zeros(np);
            let mut rows = Vec::with_capacity(chunk);
            let mut ygrad = vec![0.0; net.dim()];
            for i in c * chunk..((c + 1) * chunk).min(n) {
                let mut r = stream(seed, i as u64);
                rows.push(row_gradient(net, &sde, kind, dist, y0[i], &mut r, &mut grad, &mut ygrad));
            }
            BatchOut { grad, rows }
        })
        .collect();
    let mut out = BatchOut {
        grad: ParamGrad::zeros(np),
        rows: Vec::with_capacity(n),
    };
    for p in parts {
        out.grad.add_assign(&p.grad);
        out.rows.extend(p.rows);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn row_gradient(
    net: &ScoreNet,
    sde: &VpSde,
    kind: LossKind,
    dist: &DebiasedTimeDist,
    y0: &[f64],
    r: &mut Rng,
    grad: &mut ParamGrad,
    ygrad: &mut [f64],
) -> f64 {
    let d = y0.len();
    let (s, weight) = match kind {
        LossKind::DsmDebiased => (dist.inv_cdf(uniform(r)).expect("u in [0, 1)").max(S_MIN), dist.normalizer()),
        _ => (S_MIN + (sde.horizon - S_MIN) * uniform(r), 1.0),
    };
    let eps = normal_vec(r, d);
    let m = sde.mean_coef_unchecked(s);
    let sd = sde.variance_unchecked(s).sqrt();
    let y: Vec<f64> = y0.iter().zip(&eps).map(|(a, e)| m * a + sd * e).collect();
    match kind {
        LossKind::DsmWeightedUniform | LossKind::DsmDebiased => {
            let sc = net.eval(&y, s);
            let resid: Vec<f64> = sc.iter().zip(&eps).map(|(a, e)| sd * a + e).collect();
            let cot: Vec<f64> = resid.iter().map(|v| weight * sd * v).collect();
            net.accumulate_vjp(&y, s, &cot, grad, ygrad);
            0.5 * weight * resid.iter().map(|v| v * v).sum::<f64>()
        }
        LossKind::Ssm => {
            let b = sde.beta_unchecked(s);
            let v = rademacher_vec(r, d);
            let sc = net.eval(&y, s);
            let c: Vec<f64> = sc.iter().map(|x| b * x).collect();
            let (out, jv) = net.tangent_vjp(&y, s, &v, &c, b, grad);
            let vjv: f64 = v.iter().zip(&jv).map(|(a, b)| a * b).sum();
            0.5 * b * out.iter().map(|x| x * x).sum::<f64>() + b * vjv
        }
    }
}

fn evaluate(net: &ScoreNet, holdout: &Points, cfg: &TrainConfig) -> Result<MeanStderr> {
    let model = PluginModel::new(net, *net.sde());
    let ecfg = ElboConfig::new(cfg.eval_paths, cfg.eval_steps).with_div(DivMode::Hutchinson {
        probes: cfg.eval_probes,
    });
    // common random numbers across evaluations
    let mut rng = seeded(cfg.seed ^ 0x5eed_e1b0);
    let (_, summary) = model.ct_elbo_over_data(holdout, &ecfg, &mut rng)?;
    Ok(summary)
}

/// Trains `net` in place on the non-held-out part of `data`. With `out_dir`
/// set, writes `metrics.csv` and `checkpoint.json` there (the checkpoint is
/// refreshed at every evaluation).
pub fn train(
    net: &mut ScoreNet,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dim(net.dim(), data.dim())?;
    let hash = config_hash(&(cfg, cfg.seed, net.widths(), net.sde(), net.output_kind(), &data.name, data.seed, data.len()));
    let (train_pts, holdout) = data.split_holdout();
    if train_pts.is_empty() {
        return Err(Error::InvalidParameter("dataset has no training rows".into()));
    }
    let holdout = holdout.slice_rows(0, cfg.eval_points.min(holdout.len()));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let dist = DebiasedTimeDist::new(*net.sde(), cfg.s_eps)?;
    let start = Instant::now();
    let clock = |cfg: &TrainConfig| if cfg.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };
    let eval = |net: &ScoreNet| -> Result<Option<MeanStderr>> {
        if holdout.is_empty() || cfg.eval_points == 0 {
            Ok(None)
        } else {
            evaluate(net, &holdout, cfg).map(Some)
        }
    };
    let save = |net: &ScoreNet| -> Result<()> {
        if let Some(dir) = out_dir {
            net.save(&dir.join("checkpoint.json"), Some(hash.clone()))?;
        }
        Ok(())
    };

    let mut rng = seeded(cfg.seed);
    let mut adam = AdamState::new(net.num_params());
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut window: Vec<f64> = Vec::new();

    let draw = |rng: &mut Rng| -> (Vec<&[f64]>, u64) {
        let rows = (0..cfg.batch)
            .map(|_| train_pts.row((uniform(rng) * train_pts.len() as f64) as usize % train_pts.len()))
            .collect();
        (rows, fork(rng))
    };

    // iteration 0: loss of a probe batch at the initial parameters
    {
        let (rows, seed) = draw(&mut seeded(cfg.seed ^ 0x0bad_cafe));
        let probe = batch_gradient(net, cfg.loss_kind, &dist, &rows, seed);
        let l = MeanStderr::from_values(&probe.rows);
        let e = eval(net)?;
        metrics.push(MetricsRow {
            iter: 0,
            wall_clock_s: clock(cfg),
            loss_mean: l.mean,
            loss_stderr: l.stderr,
            eval_elbo_mean: e.map(|e| e.mean),
            eval_elbo_stderr: e.map(|e| e.stderr),
        });
    }

    for it in 1..=cfg.iters {
        let (rows, seed) = draw(&mut rng);
        let mut out = batch_gradient(net, cfg.loss_kind, &dist, &rows, seed);
        let loss = out.rows.iter().sum::<f64>() / out.rows.len() as f64;
        if !loss.is_finite() || !out.grad.is_finite() {
            return Err(Error::Diverged {
                iter: it,
                config_hash: hash,
            });
        }
        out.grad.scale(1.0 / cfg.batch as f64);
        adam_step(&mut adam, net.params_mut(), &out.grad.values, cfg.lr)?;
        losses.push(loss);
        window.push(loss);
        if it % cfg.eval_every == 0 || it == cfg.iters {
            let l = MeanStderr::from_values(&window);
            window.clear();
            let e = eval(net)?;
            metrics.push(MetricsRow {
                iter: it,
                wall_clock_s: clock(cfg),
                loss_mean: l.mean,
                loss_stderr: l.stderr,
                eval_elbo_mean: e.map(|e| e.mean),
                eval_elbo_stderr: e.map(|e| e.stderr),
            });
            save(net)?;
        }
    }
    save(net)?;
    let report = TrainReport {
        config_hash: hash,
        metrics,
        losses,
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
    }
    Ok(report)
}
