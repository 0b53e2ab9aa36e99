//! General generative SDEs `dX = mu(X, t) dt + sigma(t) dB` with a
//! standard-normal prior: Feynman-Kac density, CT-ELBO for an arbitrary
//! inference drift `a(y, s)`, and the variational gap for linear models
//! whose marginals are known.

use std::sync::Arc;

use crate::elbo::{run_paths, ElboConfig, ElboEstimate, PathOutcome, PathTerms};
use crate::error::{check_dim, Error, Result};
use crate::field::{divergence_with, AffineField, VectorField};
use crate::rng::{fill_normal, fork, stream, Rng};
use crate::stats::MeanStderr;
use crate::vp_sde::std_normal_logpdf;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Generative SDE in generative time `t in [0, T]`, prior `N(0, I)`.
#[derive(Clone)]
pub struct GenerativeSde {
    mu: Arc<dyn VectorField>,
    sigma: ScalarFn,
    horizon: f64,
}

impl std::fmt::Debug for GenerativeSde {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GenerativeSde")
            .field("dim", &self.mu.dim())
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl GenerativeSde {
    pub fn new(
        mu: Arc<dyn VectorField>,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            mu,
            sigma: Arc::new(sigma),
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn mu(&self) -> &dyn VectorField {
        self.mu.as_ref()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (self.sigma)(t)
    }
}

/// `dX = -k X dt + sigma dB` from `N(0, I)`; every marginal is `N(0, var(t) I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSde {
    pub dim: usize,
    pub k: f64,
    pub sigma: f64,
    pub horizon: f64,
}

impl LinearSde {
    pub fn new(dim: usize, k: f64, sigma: f64, horizon: f64) -> Self {
        Self { dim, k, sigma, horizon }
    }

    pub fn variance(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        if self.k == 0.0 {
            1.0 + s2 * t
        } else {
            let e = (-2.0 * self.k * t).exp();
            e + s2 * (1.0 - e) / (2.0 * self.k)
        }
    }

    pub fn logpdf(&self, x: &[f64], t: f64) -> f64 {
        let v = self.variance(t);
        let sq: f64 = x.iter().map(|a| a * a).sum();
        -0.5 * (x.len() as f64 * (std::f64::consts::TAU * v).ln() + sq / v)
    }

    pub fn density(&self, x: &[f64], t: f64) -> f64 {
        self.logpdf(x, t).exp()
    }

    pub fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let v = self.variance(t);
        x.iter().map(|a| -a / v).collect()
    }

    pub fn to_generative(&self) -> GenerativeSde {
        let sigma = self.sigma;
        GenerativeSde::new(
            Arc::new(AffineField::scaled_identity(self.dim, -self.k)),
            move |_| sigma,
            self.horizon,
        )
        .expect("positive horizon")
    }

    /// The gap-free inference drift `a*(y, s) = sigma grad log p(y, T - s)`.
    pub fn optimal_drift(&self) -> AffineField {
        let me = *self;
        AffineField::new(self.dim, move |s| -me.sigma / me.variance(me.horizon - s))
    }
}

/// Feynman-Kac estimate of `p(x, T)`: simulates `dY = -mu(Y, T-s) ds + sigma(T-s) dB`
/// from `x` and averages `p0(Y_T) exp(-int div mu)`.
pub fn fk_density(
    sde: &GenerativeSde,
    x: &[f64],
    n_paths: usize,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<MeanStderr> {
    check_dim(sde.dim(), x.len())?;
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::InvalidParameter("n_paths and n_steps must both be >= 1".into()));
    }
    let d = sde.dim();
    let h = sde.horizon / n_steps as f64;
    let seed = fork(rng);
    let (paths, _) = run_paths(n_paths, seed, |_, r| {
        let mut y = x.to_vec();
        let mut xi = vec![0.0; d];
        let mut mu = vec![0.0; d];
        let mut log_w = 0.0;
        for k in 0..n_steps {
            let s = k as f64 * h;
            let t = sde.horizon - s;
            sde.mu.eval_into(&y, t, &mut mu);
            log_w -= sde.mu.divergence(&y, t) * h;
            let sd = sde.sigma(t) * h.sqrt();
            fill_normal(r, &mut xi);
            for i in 0..d {
                y[i] += -mu[i] * h + sd * xi[i];
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Ok(PathOutcome::NonFinite);
            }
        }
        let value = (std_normal_logpdf(&y) + log_w).exp();
        if !value.is_finite() {
            return Ok(PathOutcome::NonFinite);
        }
        Ok(PathOutcome::Done(PathTerms {
            prior: value,
            ..Default::default()
        }))
    })?;
    let values: Vec<f64> = paths.iter().map(|p| p.prior).collect();
    Ok(MeanStderr::from_values(&values))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// CT-ELBO of `sde` with inference drift `a(y, s)`:
/// simulates `dY = (-mu(Y, T-s) + sigma(T-s) a(Y, s)) ds + sigma(T-s) dB`
/// with Euler-Maruyama and left-endpoint integrands.
pub fn ct_elbo<A: VectorField + ?Sized>(
    sde: &GenerativeSde,
    a: &A,
    x: &[f64],
    cfg: &ElboConfig,
    rng: &mut Rng,
) -> Result<ElboEstimate> {
    cfg.validate()?;
    check_dim(sde.dim(), x.len())?;
    check_dim(sde.dim(), a.dim())?;
    let d = sde.dim();
    let n = cfg.n_steps;
    let h = sde.horizon / n as f64;
    let seed = fork(rng);
    let (paths, rejected) = run_paths(cfg.n_paths, seed, |path, r| {
        let mut div_rng = stream(seed ^ 0x9e37_79b9_7f4a_7c15, path as u64);
        let mut y = x.to_vec();
        let mut xi = vec![0.0; d];
        let mut mu = vec![0.0; d];
        let (mut quad, mut div, mut mart) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let s = k as f64 * h;
            let t = sde.horizon - s;
            let sig = sde.sigma(t);
            sde.mu.eval_into(&y, t, &mut mu);
            let (av, ja) = if cfg.control_variate {
                let (v, j) = a.eval_and_jacobian(&y, s);
                (v, Some(j))
            } else {
                (a.eval(&y, s), None)
            };
            quad += 0.5 * dot(&av, &av) * h;
            div += divergence_with(sde.mu.as_ref(), &y, t, cfg.div, &mut div_rng) * h;
            if (quad + div).abs() > cfg.guard {
                return Err(Error::Novikov {
                    path,
                    step: k,
                    value: quad + div,
                });
            }
            fill_normal(r, &mut xi);
            let sq = h.sqrt();
            if let Some(j) = &ja {
                let db: Vec<f64> = xi.iter().map(|e| sq * e).collect();
                let tr: f64 = (0..d).map(|i| j[i * d + i]).sum();
                let qf: f64 = (0..d).map(|i| db[i] * dot(&j[i * d..(i + 1) * d], &db)).sum();
                mart += dot(&av, &db) + 0.5 * sig * (qf - h * tr);
            }
            for i in 0..d {
                y[i] += (-mu[i] + sig * av[i]) * h + sig * sq * xi[i];
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Ok(PathOutcome::NonFinite);
            }
        }
        Ok(PathOutcome::Done(PathTerms {
            prior: std_normal_logpdf(&y),
            quad,
            div,
            martingale: mart,
            transition: 0.0,
        }))
    })?;
    Ok(ElboEstimate::from_paths(&paths, n, rejected))
}

/// Direct estimate of `log p(x, T) - E` as
/// `1/2 int E ||a(Y_s, s) - sigma grad log p(Y_s, T-s)||^2 ds` along the
/// inference paths driven by `a`. Needs the closed-form marginals of a
/// [`LinearSde`].
pub fn variational_gap_oracle<A: VectorField + ?Sized>(
    a: &A,
    model: &LinearSde,
    x: &[f64],
    n_paths: usize,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<MeanStderr> {
    check_dim(model.dim, x.len())?;
    check_dim(model.dim, a.dim())?;
    if n_paths == 0 || n_steps == 0 {
        return Err(Error::InvalidParameter("n_paths and n_steps must both be >= 1".into()));
    }
    let d = model.dim;
    let h = model.horizon / n_steps as f64;
    let seed = fork(rng);
    let (paths, _) = run_paths(n_paths, seed, |_, r| {
        let mut y = x.to_vec();
        let mut xi = vec![0.0; d];
        let mut gap = 0.0;
        for k in 0..n_steps {
            let s = k as f64 * h;
            let t = model.horizon - s;
            let av = a.eval(&y, s);
            let opt = model.score(&y, t);
            let diff: f64 = av.iter().zip(&opt).map(|(u, v)| (u - model.sigma * v).powi(2)).sum();
            gap += 0.5 * diff * h;
            fill_normal(r, &mut xi);
            for i in 0..d {
                let drift = model.k * y[i] + model.sigma * av[i];
                y[i] += drift * h + model.sigma * h.sqrt() * xi[i];
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Ok(PathOutcome::NonFinite);
            }
        }
        Ok(PathOutcome::Done(PathTerms {
            prior: gap,
            ..Default::default()
        }))
    })?;
    let values: Vec<f64> = paths.iter().map(|p| p.prior).collect();
    Ok(MeanStderr::from_values(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ZeroField;
    use crate::rng::seeded;

    #[test]
    fn linear_variance_closed_forms() {
        let m = LinearSde::new(1, 1.0, 0.5, 1.0);
        let e = (-2.0f64).exp();
        assert!((m.variance(1.0) - (e + 0.125 * (1.0 - e))).abs() < 1e-15);
        assert_eq!(LinearSde::new(1, 0.0, 0.5, 1.0).variance(2.0), 1.5);
        assert_eq!(m.variance(0.0), 1.0);
    }

    #[test]
    fn fk_matches_linear_marginal() {
        let m = LinearSde::new(1, 1.0, 0.5, 1.0);
        let g = m.to_generative();
        let mut rng = seeded(1);
        for x in [0.0, 1.0] {
            let est = fk_density(&g, &[x], 20_000, 500, &mut rng).unwrap();
            let truth = m.density(&[x], 1.0);
            assert!((est.mean - truth).abs() < 4.0 * est.stderr + 2e-3 * truth, "{est:?} vs {truth}");
        }
    }

    #[test]
    fn fk_deterministic_without_noise() {
        let m = LinearSde::new(1, 1.0, 0.0, 1.0);
        let g = m.to_generative();
        let est = fk_density(&g, &[0.3], 3, 10_000, &mut seeded(2)).unwrap();
        assert_eq!(est.stderr, 0.0);
        let truth = m.density(&[0.3], 1.0);
        assert!((est.mean - truth).abs() < 1e-3 * truth);
    }

    #[test]
    fn fk_zero_drift_is_gaussian_convolution() {
        let m = LinearSde::new(2, 0.0, 0.8, 1.0);
        let g = m.to_generative();
        let x = [0.5, -0.3];
        let est = fk_density(&g, &x, 20_000, 100, &mut seeded(3)).unwrap();
        assert!(est.covers(m.density(&x, 1.0), 4.0), "{est:?}");
    }

    #[test]
    fn deterministic_flow_elbo() {
        // sigma = 0, a = 0, mu = -x, x = 0: log p0(0) + T
        let g = LinearSde::new(1, 1.0, 0.0, 1.0).to_generative();
        let est = ct_elbo(&g, &ZeroField { dim: 1 }, &[0.0], &ElboConfig::new(2, 100), &mut seeded(4)).unwrap();
        assert!((est.mean - (-0.5 * std::f64::consts::TAU.ln() + 1.0)).abs() < 1e-12);
        assert!((est.mean - 0.081_061).abs() < 1e-6);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn elbo_is_below_log_density_for_a_bad_drift() {
        let m = LinearSde::new(1, 1.0, 0.5, 1.0);
        let g = m.to_generative();
        let a = AffineField::scaled_identity(1, 2.0);
        let est = ct_elbo(&g, &a, &[1.0], &ElboConfig::new(20_000, 500), &mut seeded(5)).unwrap();
        assert!(est.mean <= m.logpdf(&[1.0], 1.0) + 3.0 * est.stderr);
    }

    #[test]
    fn optimal_drift_has_no_gap() {
        let m = LinearSde::new(1, 1.0, 0.5, 1.0);
        let a = m.optimal_drift();
        let gap = variational_gap_oracle(&a, &m, &[0.7], 1000, 200, &mut seeded(6)).unwrap();
        assert!(gap.mean.abs() < 1e-12);
        let est = ct_elbo(&m.to_generative(), &a, &[0.7], &ElboConfig::new(2000, 1000), &mut seeded(7)).unwrap();
        assert!((est.mean - m.logpdf(&[0.7], 1.0)).abs() < 4.0 * est.stderr + 5e-3, "{est:?}");
    }

    #[test]
    fn constant_offset_gap_is_half_c2_t() {
        let m = LinearSde::new(1, 1.0, 0.5, 1.0);
        let c = 0.3;
        let a = m.optimal_drift().with_offset(vec![c]);
        let gap = variational_gap_oracle(&a, &m, &[0.2], 100, 200, &mut seeded(8)).unwrap();
        assert!((gap.mean - 0.5 * c * c).abs() < 1e-12);
    }
}
