//! Continuous-time ELBO of plug-in reverse SDEs for the VP inference SDE.
//!
//! For `lambda in [0, 1)` the generative model is
//! `dX = ((1 - lambda/2) g^2 s(X, T-t) - f) dt + sqrt(1 - lambda) g dB`,
//! the inference SDE is `dY = (f - lambda/2 g^2 grad log q) ds + sqrt(1 - lambda) g dB`
//! and a path contributes
//!
//! `log p0(Y_T) - int 1/2 ||a||^2 ds - int div mu ds - M`,
//!
//! where `M` is an optional zero-mean martingale control variate
//! `int a . dB` with a second-order correction. `lambda = 0` needs only the
//! score model; `lambda > 0` also needs the true marginal score, so it is
//! only available with a [`GaussianOracle`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{hutchinson, DivMode, VectorField};
use crate::points::Points;
use crate::rng::{fill_normal, fork, rademacher_vec, stream, Rng};
use crate::stats::MeanStderr;
use crate::vp_sde::{std_normal_logpdf, GaussianOracle, VpSde};

pub const DEFAULT_GUARD: f64 = 1e6;

/// How inference paths are advanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exact Gaussian transitions when the inference SDE is linear, otherwise
    /// Euler-Maruyama.
    #[default]
    Auto,
    EulerMaruyama,
    /// Exact transitions; an error when they are unavailable.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElboConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    #[serde(default)]
    pub div: DivMode,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_true")]
    pub control_variate: bool,
    #[serde(default = "default_guard")]
    pub guard: f64,
}

fn default_true() -> bool {
    true
}

fn default_guard() -> f64 {
    DEFAULT_GUARD
}

impl ElboConfig {
    pub fn new(n_paths: usize, n_steps: usize) -> Self {
        Self {
            n_paths,
            n_steps,
            div: DivMode::Exact,
            scheme: Scheme::Auto,
            control_variate: true,
            guard: DEFAULT_GUARD,
        }
    }

    pub fn with_div(mut self, div: DivMode) -> Self {
        self.div = div;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_control_variate(mut self, on: bool) -> Self {
        self.control_variate = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(Error::InvalidParameter(
                "n_paths and n_steps must both be >= 1".into(),
            ));
        }
        if let DivMode::Hutchinson { probes: 0 } = self.div {
            return Err(Error::InvalidParameter("Hutchinson needs probes >= 1".into()));
        }
        Ok(())
    }
}

/// Per-path contributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PathTerms {
    pub prior: f64,
    pub quad: f64,
    pub div: f64,
    pub martingale: f64,
    pub transition: f64,
}

impl PathTerms {
    pub fn total(&self) -> f64 {
        self.prior - self.quad - self.div - self.martingale + self.transition
    }
}

/// Path averages of each contribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub prior_term: f64,
    pub quad_term: f64,
    pub div_term: f64,
    pub martingale_term: f64,
    pub transition_term: f64,
}

impl ElboTerms {
    /// `prior - quad - div - martingale + transition`.
    pub fn recombine(&self) -> f64 {
        self.prior_term - self.quad_term - self.div_term - self.martingale_term + self.transition_term
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub rejected: usize,
    pub terms: ElboTerms,
}

impl ElboEstimate {
    pub fn from_paths(paths: &[PathTerms], n_steps: usize, rejected: usize) -> Self {
        let totals: Vec<f64> = paths.iter().map(PathTerms::total).collect();
        let m = MeanStderr::from_values(&totals);
        let n = paths.len() as f64;
        let avg = |f: fn(&PathTerms) -> f64| paths.iter().map(f).sum::<f64>() / n;
        Self {
            mean: m.mean,
            stderr: m.stderr,
            n_paths: paths.len(),
            n_steps,
            rejected,
            terms: ElboTerms {
                prior_term: avg(|p| p.prior),
                quad_term: avg(|p| p.quad),
                div_term: avg(|p| p.div),
                martingale_term: avg(|p| p.martingale),
                transition_term: avg(|p| p.transition),
            },
        }
    }

    pub fn summary(&self) -> MeanStderr {
        MeanStderr {
            mean: self.mean,
            stderr: self.stderr,
            n: self.n_paths,
        }
    }

    /// `-mean / (d ln 2)`.
    pub fn bits_per_dim(&self, dim: usize) -> f64 {
        -self.mean / (dim as f64 * std::f64::consts::LN_2)
    }
}

/// Outcome of one simulated path.
pub(crate) enum PathOutcome {
    Done(PathTerms),
    NonFinite,
}

/// Runs `n` independent paths in parallel, path `i` on stream `(seed, i)`,
/// and collects them in index order.
pub(crate) fn run_paths<F>(n: usize, seed: u64, f: F) -> Result<(Vec<PathTerms>, usize)>
where
    F: Fn(usize, &mut Rng) -> Result<PathOutcome> + Sync + Send,
{
    let outcomes: Vec<Result<PathOutcome>> = (0..n)
        .into_par_iter()
        .map(|i| f(i, &mut stream(seed, i as u64)))
        .collect();
    let mut paths = Vec::with_capacity(n);
    let mut rejected = 0;
    for o in outcomes {
        match o? {
            PathOutcome::Done(t) => paths.push(t),
            PathOutcome::NonFinite => rejected += 1,
        }
    }
    if rejected * 100 > n {
        return Err(Error::TooManyRejections { rejected, total: n });
    }
    Ok((paths, rejected))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(jac: &[f64], v: &[f64]) -> f64 {
    let d = v.len();
    (0..d).map(|i| v[i] * dot(&jac[i * d..(i + 1) * d], v)).sum()
}

/// Plug-in reverse SDE of a score model, indexed by `lambda`.
pub struct PluginModel<'a, S: ?Sized> {
    score: &'a S,
    oracle: Option<&'a GaussianOracle>,
    sde: VpSde,
    lambda: f64,
}

impl<'a, S: VectorField + ?Sized> PluginModel<'a, S> {
    /// `lambda = 0`, no oracle needed.
    pub fn new(score: &'a S, sde: VpSde) -> Self {
        Self {
            score,
            oracle: None,
            sde,
            lambda: 0.0,
        }
    }

    /// General `lambda < 1`; `lambda > 0` requires the oracle.
    pub fn with_lambda(
        score: &'a S,
        oracle: Option<&'a GaussianOracle>,
        sde: VpSde,
        lambda: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::Domain {
                what: "lambda",
                value: lambda,
                lo: 0.0,
                hi: 1.0 - f64::EPSILON,
            });
        }
        if lambda > 0.0 && oracle.is_none() {
            return Err(Error::Capability(
                "lambda > 0 needs the true marginal score, which only the Gaussian oracle provides".into(),
            ));
        }
        if let Some(o) = oracle {
            check_dim(score.dim(), o.dim())?;
        }
        Ok(Self {
            score,
            oracle,
            sde,
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.score.dim()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sde(&self) -> &VpSde {
        &self.sde
    }

    pub fn score(&self) -> &S {
        self.score
    }

    pub fn oracle(&self) -> Option<&GaussianOracle> {
        self.oracle
    }

    /// True when the inference SDE can be advanced with exact transitions.
    pub fn exact_available(&self) -> bool {
        self.lambda == 0.0 || self.oracle.is_some_and(GaussianOracle::has_identity_cov)
    }

    fn use_exact(&self, scheme: Scheme) -> Result<bool> {
        match scheme {
            Scheme::EulerMaruyama => Ok(false),
            Scheme::Auto => Ok(self.exact_available()),
            Scheme::Exact if self.exact_available() => Ok(true),
            Scheme::Exact => Err(Error::Capability(
                "exact transitions need lambda = 0 or an oracle with identity covariance".into(),
            )),
        }
    }

    /// Generative drift `mu(x, t) = (1 - lambda/2) g^2 s(x, T-t) - f(x, T-t)`.
    pub fn generative_drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s = self.sde.horizon - t;
        let b = self.sde.beta_unchecked(s);
        let sc = self.score.eval(x, s);
        let c = (1.0 - 0.5 * self.lambda) * b;
        sc.iter().zip(x).map(|(v, xi)| c * v + 0.5 * b * xi).collect()
    }

    /// Generative diffusion `sqrt(1 - lambda) g(T - t)`.
    pub fn generative_sigma(&self, t: f64) -> f64 {
        (1.0 - self.lambda).sqrt() * self.sde.g_unchecked(self.sde.horizon - t)
    }

    /// Inference drift correction `a(y, s)`.
    pub fn inference_a(&self, y: &[f64], s: f64) -> Vec<f64> {
        let sc = self.score.eval(y, s);
        let q = match self.oracle {
            Some(o) if self.lambda > 0.0 => o.eval(y, s),
            _ => vec![0.0; y.len()],
        };
        self.a_from(&sc, &q, s)
    }

    fn a_from(&self, sc: &[f64], q: &[f64], s: f64) -> Vec<f64> {
        let lam = self.lambda;
        let c = self.sde.g_unchecked(s) / (1.0 - lam).sqrt();
        sc.iter()
            .zip(q)
            .map(|(v, qi)| c * ((1.0 - 0.5 * lam) * v - 0.5 * lam * qi))
            .collect()
    }

    /// Simulates one inference path from `x`.
    pub(crate) fn simulate(
        &self,
        x: &[f64],
        cfg: &ElboConfig,
        exact: bool,
        path: usize,
        rng: &mut Rng,
    ) -> Result<PathOutcome> {
        let d = self.dim();
        let sde = &self.sde;
        let lam = self.lambda;
        let n = cfg.n_steps;
        let horizon = sde.horizon;
        let h = horizon / n as f64;
        let sq1l = (1.0 - lam).sqrt();
        let oracle = if lam > 0.0 { self.oracle } else { None };

        let mut y = x.to_vec();
        let mut xi = vec![0.0; d];
        let mut db = vec![0.0; d];
        let mut q = vec![0.0; d];
        let (mut quad, mut div, mut mart) = (0.0, 0.0, 0.0);
        let need_jac = matches!(cfg.div, DivMode::Exact);

        for k in 0..n {
            let s = k as f64 * h;
            let s1 = if k + 1 == n { horizon } else { (k + 1) as f64 * h };
            let beta = sde.beta_unchecked(s);
            let g = beta.sqrt();

            let (sv, jac, div_s) = if need_jac {
                let (sv, jac) = self.score.eval_and_jacobian(&y, s);
                let tr = (0..d).map(|i| jac[i * d + i]).sum();
                (sv, Some(jac), tr)
            } else {
                let probes = match cfg.div {
                    DivMode::Hutchinson { probes } => probes,
                    DivMode::Exact => unreachable!(),
                };
                let sv = self.score.eval(&y, s);
                let (tr, _) = hutchinson(self.score, &y, s, probes, rng);
                (sv, None, tr)
            };
            if let Some(o) = oracle {
                o.eval_into(&y, s, &mut q);
            }
            let a = self.a_from(&sv, &q, s);
            // state frozen at the left point, schedule integrated exactly
            let w = sde.int_beta_unchecked(s1) - sde.int_beta_unchecked(s);
            quad += 0.5 * dot(&a, &a) / beta * w;
            div += ((1.0 - 0.5 * lam) * div_s + 0.5 * d as f64) * w;
            if (quad + div).abs() > cfg.guard {
                return Err(Error::Novikov {
                    path,
                    step: k,
                    value: quad + div,
                });
            }

            fill_normal(rng, &mut xi);
            let (sd, var_b) = if exact {
                let rate = 1.0 - lam;
                let one_minus_r2 = -(-rate * (sde.int_beta_unchecked(s1) - sde.int_beta_unchecked(s))).exp_m1();
                let sd = one_minus_r2.sqrt();
                let sig = sq1l * g;
                (sd, one_minus_r2 / (sig * sig))
            } else {
                (sq1l * g * h.sqrt(), h)
            };
            let db_scale = if exact { sd / (sq1l * g) } else { h.sqrt() };
            for (b, e) in db.iter_mut().zip(&xi) {
                *b = db_scale * e;
            }

            if cfg.control_variate {
                let mut m = dot(&a, &db);
                let js_term = match &jac {
                    Some(j) => quad_form(j, &db),
                    None => dot(&db, &self.score.vjp(&y, s, &db)),
                };
                let mut corr = (1.0 - 0.5 * lam) * (js_term - var_b * div_s);
                if let Some(o) = oracle {
                    let hq = dot(&db, &o.vjp(&y, s, &db));
                    let tr_hq = -o.precision_trace(s);
                    corr -= 0.5 * lam * (hq - var_b * tr_hq);
                }
                m += 0.5 * beta * corr;
                mart += m;
            }

            if exact {
                let r = sde.transition_decay(s, s1, 1.0 - lam);
                match oracle {
                    None => {
                        for (yi, e) in y.iter_mut().zip(&xi) {
                            *yi = r * *yi + sd * e;
                        }
                    }
                    Some(o) => {
                        let (m0, m1) = (sde.mean_coef_unchecked(s), sde.mean_coef_unchecked(s1));
                        for ((yi, e), mu) in y.iter_mut().zip(&xi).zip(o.mean0()) {
                            *yi = r * (*yi - m0 * mu) + sd * e + m1 * mu;
                        }
                    }
                }
            } else {
                for i in 0..d {
                    let drift = -0.5 * beta * y[i] - 0.5 * lam * beta * q[i];
                    y[i] += drift * h + sd * xi[i];
                }
            }
            if y.iter().any(|v| !v.is_finite()) || !quad.is_finite() || !div.is_finite() {
                return Ok(PathOutcome::NonFinite);
            }
        }
        let terms = PathTerms {
            prior: std_normal_logpdf(&y),
            quad,
            div,
            martingale: mart,
            transition: 0.0,
        };
        if !terms.total().is_finite() {
            return Ok(PathOutcome::NonFinite);
        }
        Ok(PathOutcome::Done(terms))
    }

    /// CT-ELBO at one point.
    pub fn ct_elbo(&self, x: &[f64], cfg: &ElboConfig, rng: &mut Rng) -> Result<ElboEstimate> {
        cfg.validate()?;
        check_dim(self.dim(), x.len())?;
        let exact = self.use_exact(cfg.scheme)?;
        let seed = fork(rng);
        let (paths, rejected) = run_paths(cfg.n_paths, seed, |i, r| self.simulate(x, cfg, exact, i, r))?;
        Ok(ElboEstimate::from_paths(&paths, cfg.n_steps, rejected))
    }

    /// Per-point CT-ELBOs for a batch of data, `cfg.n_paths` paths each.
    /// Returns the per-point means and their summary.
    pub fn ct_elbo_over_data(
        &self,
        xs: &Points,
        cfg: &ElboConfig,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, MeanStderr)> {
        cfg.validate()?;
        check_dim(self.dim(), xs.dim())?;
        let exact = self.use_exact(cfg.scheme)?;
        let seed = fork(rng);
        let per = cfg.n_paths;
        let total = xs.len() * per;
        let (paths, rejected) = run_paths(total, seed, |i, r| self.simulate(xs.row(i / per), cfg, exact, i, r))?;
        if rejected > 0 {
            return Err(Error::NonFinite {
                context: format!("{rejected} data-averaged ELBO paths"),
            });
        }
        let per_point: Vec<f64> = paths
            .chunks(per)
            .map(|c| c.iter().map(PathTerms::total).sum::<f64>() / per as f64)
            .collect();
        let summary = MeanStderr::from_values(&per_point);
        Ok((per_point, summary))
    }
}

/// CT-ELBO of the `lambda = 0` plug-in reverse SDE at `x`.
pub fn ct_elbo_plugin<S: VectorField + ?Sized>(
    score: &S,
    sde: &VpSde,
    x: &[f64],
    cfg: &ElboConfig,
    rng: &mut Rng,
) -> Result<ElboEstimate> {
    PluginModel::new(score, *sde).ct_elbo(x, cfg, rng)
}

/// CT-ELBO of the `lambda` plug-in reverse SDE at `x`.
pub fn ct_elbo_lambda<S: VectorField + ?Sized>(
    score: &S,
    oracle: Option<&GaussianOracle>,
    sde: &VpSde,
    lambda: f64,
    x: &[f64],
    cfg: &ElboConfig,
    rng: &mut Rng,
) -> Result<ElboEstimate> {
    PluginModel::with_lambda(score, oracle, *sde, lambda)?.ct_elbo(x, cfg, rng)
}

/// The three pieces of the `lambda` integrand at one `(y, s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaIntegrand {
    /// `(1 - l/2) [1/2 g^2 |s|^2 + g^2 div s + (2/(2 - l)) 1/2 beta d]`
    pub plugin: f64,
    /// `(l/2) [1/2 g^2 |s|^2 - g^2 s . grad log q]`
    pub cross: f64,
    /// `l^2 / (4 (1 - l)) 1/2 g^2 |s - grad log q|^2`
    pub correction: f64,
    /// `1/2 |a|^2 + div mu`, evaluated directly.
    pub direct: f64,
}

impl LambdaIntegrand {
    pub fn decomposed(&self) -> f64 {
        self.plugin + self.cross + self.correction
    }
}

pub fn lambda_integrand_terms<S: VectorField + ?Sized>(
    score: &S,
    oracle: &GaussianOracle,
    lambda: f64,
    y: &[f64],
    s: f64,
) -> Result<LambdaIntegrand> {
    let model = PluginModel::with_lambda(score, Some(oracle), *oracle.sde(), lambda)?;
    let sde = oracle.sde();
    let d = y.len() as f64;
    let b = sde.beta_unchecked(s);
    let sv = score.eval(y, s);
    let q = oracle.eval(y, s);
    let div_s = score.divergence(y, s);
    let ss = dot(&sv, &sv);
    let plugin = (1.0 - 0.5 * lambda) * (0.5 * b * ss + b * div_s + 2.0 / (2.0 - lambda) * 0.5 * b * d);
    let cross = 0.5 * lambda * (0.5 * b * ss - b * dot(&sv, &q));
    let diff: Vec<f64> = sv.iter().zip(&q).map(|(u, v)| u - v).collect();
    let correction = lambda * lambda / (4.0 * (1.0 - lambda)) * 0.5 * b * dot(&diff, &diff);
    let a = model.a_from(&sv, &q, s);
    let direct = 0.5 * dot(&a, &a) + (1.0 - 0.5 * lambda) * b * div_s + 0.5 * b * d;
    Ok(LambdaIntegrand {
        plugin,
        cross,
        correction,
        direct,
    })
}

/// Log-likelihood of the probability-flow ODE model (`lambda = 1`) by the
/// instantaneous change of variables, integrated with Heun's method.
///
/// With exact divergence the result is deterministic and `n_paths` is
/// ignored; with Hutchinson each path uses fixed probes and the spread
/// across paths gives the standard error.
pub fn ode_log_likelihood<S: VectorField + ?Sized>(
    score: &S,
    sde: &VpSde,
    x: &[f64],
    cfg: &ElboConfig,
    rng: &mut Rng,
) -> Result<ElboEstimate> {
    cfg.validate()?;
    check_dim(score.dim(), x.len())?;
    let d = x.len();
    let n = cfg.n_steps;
    let h = sde.horizon / n as f64;
    let velocity = |y: &[f64], s: f64, probe: Option<&[f64]>| -> (Vec<f64>, f64) {
        let b = sde.beta_unchecked(s);
        let sv = score.eval(y, s);
        let v = y.iter().zip(&sv).map(|(yi, si)| -0.5 * b * yi - 0.5 * b * si).collect();
        let tr = match probe {
            None => score.divergence(y, s),
            Some(p) => dot(p, &score.vjp(y, s, p)),
        };
        (v, 0.5 * b * tr + 0.5 * b * d as f64)
    };
    let paths = match cfg.div {
        DivMode::Exact => 1,
        DivMode::Hutchinson { .. } => cfg.n_paths,
    };
    let seed = fork(rng);
    let (results, rejected) = run_paths(paths, seed, |_, r| {
        let probes: Vec<Vec<f64>> = match cfg.div {
            DivMode::Exact => Vec::new(),
            DivMode::Hutchinson { probes } => (0..probes).map(|_| rademacher_vec(r, d)).collect(),
        };
        let eval = |y: &[f64], s: f64| -> (Vec<f64>, f64) {
            if probes.is_empty() {
                velocity(y, s, None)
            } else {
                let (v, _) = velocity(y, s, Some(&probes[0]));
                let b = sde.beta_unchecked(s);
                let tr: f64 = probes.iter().map(|p| dot(p, &score.vjp(y, s, p))).sum::<f64>() / probes.len() as f64;
                (v, 0.5 * b * tr + 0.5 * b * d as f64)
            }
        };
        let mut y = x.to_vec();
        let mut div = 0.0;
        for k in 0..n {
            let s = k as f64 * h;
            let s1 = if k + 1 == n { sde.horizon } else { (k + 1) as f64 * h };
            let (v1, d1) = eval(&y, s);
            let pred: Vec<f64> = y.iter().zip(&v1).map(|(a, b)| a + (s1 - s) * b).collect();
            let (v2, d2) = eval(&pred, s1);
            for i in 0..d {
                y[i] += 0.5 * (s1 - s) * (v1[i] + v2[i]);
            }
            div += 0.5 * (s1 - s) * (d1 + d2);
            if !div.is_finite() || y.iter().any(|v| !v.is_finite()) {
                return Ok(PathOutcome::NonFinite);
            }
        }
        Ok(PathOutcome::Done(PathTerms {
            prior: std_normal_logpdf(&y),
            div,
            ..Default::default()
        }))
    })?;
    Ok(ElboEstimate::from_paths(&results, n, rejected))
}

/// One line of estimator output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboRecord {
    pub estimator: String,
    pub lambda: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub mean: f64,
    pub stderr: f64,
    pub terms: ElboTerms,
}

impl ElboRecord {
    pub fn new(estimator: &str, lambda: f64, est: &ElboEstimate) -> Self {
        Self {
            estimator: estimator.into(),
            lambda,
            n_paths: est.n_paths,
            n_steps: est.n_steps,
            mean: est.mean,
            stderr: est.stderr,
            terms: est.terms,
        }
    }
}
