//! Sampling from the lambda-family of plug-in reverse SDEs and forward
//! simulation of the matching inference SDEs.
//!
//! For `lambda < 1` paths use Euler-Maruyama; `lambda = 1` is the
//! probability-flow ODE and uses Heun's method on the same grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_domain, Error, Result};
use crate::field::VectorField;
use crate::points::Points;
use crate::rng::{fill_normal, fork, stream, Rng};
use crate::vp_sde::{GaussianOracle, VpSde};

/// Default number of steps over a unit horizon.
pub const DEFAULT_STEPS: usize = 1000;

/// Lambda grid used for reports.
pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];

const BLOWUP: f64 = 1e6;

/// One Euler-Maruyama step `x + drift dt + diffusion sqrt(dt) xi`.
pub fn em_step(
    drift: impl Fn(&[f64], f64) -> Vec<f64>,
    diffusion: impl Fn(f64) -> f64,
    x: &[f64],
    t: f64,
    dt: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {dt}")));
    }
    let mu = drift(x, t);
    check_dim(x.len(), mu.len())?;
    let sd = diffusion(t) * dt.sqrt();
    let mut xi = vec![0.0; x.len()];
    if sd != 0.0 {
        fill_normal(rng, &mut xi);
    }
    let next: Vec<f64> = x
        .iter()
        .zip(&mu)
        .zip(&xi)
        .map(|((xi0, m), e)| xi0 + m * dt + sd * e)
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("Euler-Maruyama step at t = {t} from x = {x:?}"),
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerScheme {
    EulerMaruyama,
    HeunOde,
}

/// Generative trajectory; `states` is `(n_steps + 1) x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub states: Points,
    pub seed: u64,
}

/// Plug-in reverse SDE `dX = ((1 - lambda/2) g^2 s - f) dt + sqrt(1 - lambda) g dB`,
/// coefficients evaluated at `T - t`.
pub struct LambdaSampler<'a, S: ?Sized> {
    score: &'a S,
    sde: VpSde,
    lambda: f64,
    n_steps: usize,
}

impl<'a, S: VectorField + ?Sized> LambdaSampler<'a, S> {
    pub fn new(score: &'a S, sde: VpSde, lambda: f64, n_steps: usize) -> Result<Self> {
        check_domain("lambda", lambda, 0.0, 1.0)?;
        sde.validate()?;
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
        }
        Ok(Self {
            score,
            sde,
            lambda,
            n_steps,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn scheme(&self) -> SamplerScheme {
        if self.lambda == 1.0 {
            SamplerScheme::HeunOde
        } else {
            SamplerScheme::EulerMaruyama
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s = self.sde.horizon - t;
        let b = self.sde.beta_unchecked(s);
        let c = (1.0 - 0.5 * self.lambda) * b;
        let sc = self.score.eval(x, s);
        sc.iter().zip(x).map(|(v, xi)| c * v + 0.5 * b * xi).collect()
    }

    pub fn diffusion(&self, t: f64) -> f64 {
        (1.0 - self.lambda).sqrt() * self.sde.g_unchecked(self.sde.horizon - t)
    }

    fn grid(&self) -> Vec<f64> {
        let h = self.sde.horizon / self.n_steps as f64;
        (0..=self.n_steps)
            .map(|k| if k == self.n_steps { self.sde.horizon } else { k as f64 * h })
            .collect()
    }

    /// Runs one chain from `x0`, calling `visit` on every state.
    fn run(&self, x0: Vec<f64>, rng: &mut Rng, mut visit: impl FnMut(&[f64])) -> Result<Vec<f64>> {
        let times = self.grid();
        let mut x = x0;
        visit(&x);
        for w in times.windows(2) {
            let (t, t1) = (w[0], w[1]);
            let dt = t1 - t;
            x = match self.scheme() {
                SamplerScheme::EulerMaruyama => em_step(|y, tt| self.drift(y, tt), |tt| self.diffusion(tt), &x, t, dt, rng)?,
                SamplerScheme::HeunOde => heun_step(|y, tt| self.drift(y, tt), &x, t, t1)?,
            };
            if x.iter().any(|v| v.abs() > BLOWUP) {
                return Err(Error::NonFinite {
                    context: format!("sampler blow-up at t = {t1}"),
                });
            }
            visit(&x);
        }
        Ok(x)
    }

    /// `n` samples of `X_T`, chain `i` on stream `(seed, i)`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Points> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        let d = self.score.dim();
        let seed = fork(rng);
        let rows: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = stream(seed, i as u64);
                let mut x0 = vec![0.0; d];
                fill_normal(&mut r, &mut x0);
                self.run(x0, &mut r, |_| {})
            })
            .collect();
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            data.extend(r?);
        }
        Points::new(d, data)
    }

    /// Full trajectory of one chain seeded with `seed`.
    pub fn trajectory(&self, seed: u64) -> Result<SamplePath> {
        let d = self.score.dim();
        let mut r = stream(seed, 0);
        let mut x0 = vec![0.0; d];
        fill_normal(&mut r, &mut x0);
        let mut states = Vec::with_capacity((self.n_steps + 1) * d);
        self.run(x0, &mut r, |x| states.extend_from_slice(x))?;
        Ok(SamplePath {
            times: self.grid(),
            states: Points::new(d, states)?,
            seed,
        })
    }
}

fn heun_step(drift: impl Fn(&[f64], f64) -> Vec<f64>, x: &[f64], t: f64, t1: f64) -> Result<Vec<f64>> {
    let h = t1 - t;
    let k1 = drift(x, t);
    let pred: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + h * b).collect();
    let k2 = drift(&pred, t1);
    let next: Vec<f64> = (0..x.len()).map(|i| x[i] + 0.5 * h * (k1[i] + k2[i])).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("Heun step at t = {t} from x = {x:?}"),
        });
    }
    Ok(next)
}

/// Forward simulation of `dY = (f - (lambda/2) g^2 grad log q) ds + sqrt(1 - lambda) g dB`
/// from each row of `y0` up to inference time `until`.
pub fn simulate_inference(
    sde: &VpSde,
    lambda: f64,
    oracle: Option<&GaussianOracle>,
    y0: &Points,
    n_steps: usize,
    until: f64,
    rng: &mut Rng,
) -> Result<Points> {
    check_domain("lambda", lambda, 0.0, 1.0)?;
    check_domain("until", until, 0.0, sde.horizon)?;
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
    }
    if lambda > 0.0 && oracle.is_none() {
        return Err(Error::Capability(
            "lambda > 0 needs the true marginal score, which only the Gaussian oracle provides".into(),
        ));
    }
    if let Some(o) = oracle {
        check_dim(o.dim(), y0.dim())?;
    }
    let d = y0.dim();
    let h = until / n_steps as f64;
    let drift = |y: &[f64], s: f64| -> Vec<f64> {
        let b = sde.beta_unchecked(s);
        let q = match oracle {
            Some(o) if lambda > 0.0 => o.eval(y, s),
            _ => vec![0.0; d],
        };
        y.iter().zip(&q).map(|(yi, qi)| -0.5 * b * yi - 0.5 * lambda * b * qi).collect()
    };
    let diffusion = |s: f64| (1.0 - lambda).sqrt() * sde.g_unchecked(s);
    let seed = fork(rng);
    let rows: Vec<Result<Vec<f64>>> = (0..y0.len())
        .into_par_iter()
        .map(|i| {
            let mut r = stream(seed, i as u64);
            let mut y = y0.row(i).to_vec();
            for k in 0..n_steps {
                let s = k as f64 * h;
                let s1 = if k + 1 == n_steps { until } else { (k + 1) as f64 * h };
                y = if lambda == 1.0 {
                    heun_step(drift, &y, s, s1)?
                } else {
                    em_step(drift, diffusion, &y, s, s1 - s, &mut r)?
                };
            }
            Ok(y)
        })
        .collect();
    let mut data = Vec::with_capacity(y0.len() * d);
    for r in rows {
        data.extend(r?);
    }
    Points::new(d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::stats::relative_frobenius;

    fn moments_agree(p: &Points, mean: &[f64], cov: &[f64], frob: f64) {
        let (m, c) = p.mean_and_covariance();
        let n = p.len() as f64;
        let d = p.dim();
        for i in 0..d {
            let se = (c[i * d + i] / n).sqrt();
            assert!((m[i] - mean[i]).abs() < 3.0 * se, "mean {i}: {} vs {}", m[i], mean[i]);
        }
        let rf = relative_frobenius(&c, cov);
        assert!(rf < frob, "covariance off by {rf}");
    }

    #[test]
    fn em_step_trivial_cases() {
        let mut r = seeded(0);
        let x = [0.3, -1.2];
        let same = em_step(|_, _| vec![0.0; 2], |_| 0.0, &x, 0.0, 0.1, &mut r).unwrap();
        assert_eq!(same, x);
        let decay = em_step(|y, _| y.iter().map(|v| -v).collect(), |_| 0.0, &x, 0.0, 0.1, &mut r).unwrap();
        assert!((decay[0] - 0.27).abs() < 1e-15 && (decay[1] + 1.08).abs() < 1e-15);
        assert!(em_step(|_, _| vec![0.0; 2], |_| 0.0, &x, 0.0, 0.0, &mut r).is_err());
        assert!(matches!(
            em_step(|_, _| vec![f64::INFINITY; 2], |_| 0.0, &x, 0.0, 0.1, &mut r),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn ou_moments_match_closed_form() {
        // dX = -X dt + sqrt(2) dB from X0 = 2: mean 2 e^{-1}, var 1 - e^{-2}
        let n = 100_000;
        let steps = 1000;
        let dt = 1.0 / steps as f64;
        let seed = 5;
        let finals: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = stream(seed, i as u64);
                let mut x = vec![2.0];
                for k in 0..steps {
                    x = em_step(|y, _| vec![-y[0]], |_| 2f64.sqrt(), &x, k as f64 * dt, dt, &mut r).unwrap();
                }
                x[0]
            })
            .collect();
        let p = Points::new(1, finals).unwrap();
        let (m, c) = p.mean_and_covariance();
        let mean = 2.0 * (-1f64).exp();
        let var = 1.0 - (-2f64).exp();
        assert!((m[0] - mean).abs() < 3.0 * (c[0] / n as f64).sqrt());
        // sample variance stderr ~ var sqrt(2/n)
        assert!((c[0] - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn lambda_family_recovers_standard_normal() {
        let sde = VpSde::default();
        let o = GaussianOracle::standard_normal(2, sde);
        for lambda in [0.0, 0.5, 1.0] {
            let s = LambdaSampler::new(&o, sde, lambda, 200).unwrap();
            let p = s.sample(20_000, &mut seeded(3)).unwrap();
            moments_agree(&p, &[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 0.05);
        }
    }

    #[test]
    fn shifted_data_mean_is_recovered() {
        let sde = VpSde::default();
        let o = GaussianOracle::isotropic(vec![3.0, 0.0], sde);
        let s = LambdaSampler::new(&o, sde, 0.0, 500).unwrap();
        let p = s.sample(20_000, &mut seeded(4)).unwrap();
        moments_agree(&p, &[3.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 0.05);
    }

    #[test]
    fn ode_sampler_is_deterministic() {
        let sde = VpSde::default();
        let o = GaussianOracle::standard_normal(2, sde);
        let s = LambdaSampler::new(&o, sde, 1.0, 100).unwrap();
        assert_eq!(s.scheme(), SamplerScheme::HeunOde);
        let a = s.sample(50, &mut seeded(9)).unwrap();
        let b = s.sample(50, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        let path = s.trajectory(1).unwrap();
        assert_eq!(path.states.len(), 101);
        assert!(path.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(path.times[100], 1.0);
    }

    #[test]
    fn inference_lambda_zero_matches_marginal() {
        let sde = VpSde::default();
        let o = GaussianOracle::new(vec![0.5, -0.25], vec![1.5, 0.5, 0.5, 0.7], sde).unwrap();
        let mut r = seeded(11);
        let y0 = o.sample_data(20_000, &mut r);
        let yt = simulate_inference(&sde, 0.0, None, &y0, 500, 1.0, &mut r).unwrap();
        let (m, c) = o.marginal(1.0).unwrap();
        moments_agree(&yt, &m, &c, 0.05);
    }

    #[test]
    fn inference_marginals_agree_across_lambda() {
        let sde = VpSde::default();
        let o = GaussianOracle::new(vec![0.5, -0.25], vec![1.5, 0.5, 0.5, 0.7], sde).unwrap();
        let mut r = seeded(13);
        let y0 = o.sample_data(20_000, &mut r);
        for s in [0.25, 0.5, 0.75] {
            let (m, c) = o.marginal(s).unwrap();
            for lambda in [0.0, 0.5, 1.0] {
                let ys = simulate_inference(&sde, lambda, Some(&o), &y0, 400, s, &mut r).unwrap();
                moments_agree(&ys, &m, &c, 0.05);
            }
        }
        let det1 = simulate_inference(&sde, 1.0, Some(&o), &y0.slice_rows(0, 5), 50, 0.5, &mut seeded(1)).unwrap();
        let det2 = simulate_inference(&sde, 1.0, Some(&o), &y0.slice_rows(0, 5), 50, 0.5, &mut seeded(2)).unwrap();
        assert_eq!(det1, det2);
        assert!(matches!(
            simulate_inference(&sde, 0.5, None, &y0, 10, 0.5, &mut r),
            Err(Error::Capability(_))
        ));
    }
}
