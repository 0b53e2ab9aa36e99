//! Discrete-time ELBO: the Euler-Maruyama discretization of a generative
//! SDE read as an `L`-layer hierarchical VAE.
//!
//! With `dt = T / L` and `t_i = i dt`, the decoder is
//! `p(x_{i+1} | x_i) = N(x_i + dt mu(x_i, t_i), dt sigma(t_i)^2)` and the
//! encoder runs the discretized inference SDE backwards from `x_L = x`:
//! `q(x_i | x_{i+1}) = N(x_{i+1} + dt (-mu + sigma a)(x_{i+1}, t_{i+1}), dt sigma(t_{i+1})^2)`.

use serde::{Deserialize, Serialize};

use crate::elbo::{run_paths, ElboConfig, ElboEstimate, PathOutcome, PathTerms, PluginModel};
use crate::error::{check_dim, Error, Result};
use crate::field::VectorField;
use crate::generative::GenerativeSde;
use crate::rng::{fill_normal, fork, Rng};
use crate::vp_sde::{iso_normal_logpdf, std_normal_logpdf};

/// Generative drift, diffusion and inference drift of a model.
pub trait ReverseModel: Sync {
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    /// Drift in generative time.
    fn mu(&self, x: &[f64], t: f64) -> Vec<f64>;
    fn sigma(&self, t: f64) -> f64;
    /// Inference drift correction in inference time.
    fn a(&self, y: &[f64], s: f64) -> Vec<f64>;
}

impl<S: VectorField + ?Sized> ReverseModel for PluginModel<'_, S> {
    fn dim(&self) -> usize {
        PluginModel::dim(self)
    }
    fn horizon(&self) -> f64 {
        self.sde().horizon
    }
    fn mu(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.generative_drift(x, t)
    }
    fn sigma(&self, t: f64) -> f64 {
        self.generative_sigma(t)
    }
    fn a(&self, y: &[f64], s: f64) -> Vec<f64> {
        self.inference_a(y, s)
    }
}

/// A [`GenerativeSde`] paired with an explicit inference drift.
pub struct WithDrift<'a, A: ?Sized> {
    pub sde: &'a GenerativeSde,
    pub a: &'a A,
}

impl<A: VectorField + ?Sized> ReverseModel for WithDrift<'_, A> {
    fn dim(&self) -> usize {
        self.sde.dim()
    }
    fn horizon(&self) -> f64 {
        self.sde.horizon()
    }
    fn mu(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.sde.mu().eval(x, t)
    }
    fn sigma(&self, t: f64) -> f64 {
        self.sde.sigma(t)
    }
    fn a(&self, y: &[f64], s: f64) -> Vec<f64> {
        self.a.eval(y, s)
    }
}

/// Variance of the encoder transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariance {
    /// `dt sigma(t_{i+1})^2`, the discretized inference SDE.
    #[default]
    Literal,
    /// `dt sigma(t_i)^2`, the decoder's own variance; a diagnostic variant.
    DecoderMatched,
}

/// DT-ELBO at `x` with `layers` stochastic layers, averaged over `n_paths`
/// encoder samples.
pub fn dt_elbo<M: ReverseModel + ?Sized>(
    model: &M,
    x: &[f64],
    layers: usize,
    n_paths: usize,
    encoder: EncoderVariance,
    rng: &mut Rng,
) -> Result<ElboEstimate> {
    check_dim(model.dim(), x.len())?;
    if layers == 0 || n_paths == 0 {
        return Err(Error::InvalidParameter("layers and n_paths must both be >= 1".into()));
    }
    let d = model.dim();
    let horizon = model.horizon();
    let dt = horizon / layers as f64;
    let seed = fork(rng);
    let (paths, rejected) = run_paths(n_paths, seed, |_, r| {
        let mut upper = x.to_vec();
        let mut xi = vec![0.0; d];
        let mut log_ratio = 0.0;
        for i in (0..layers).rev() {
            let t1 = if i + 1 == layers { horizon } else { (i + 1) as f64 * dt };
            let t0 = i as f64 * dt;
            let sig1 = model.sigma(t1);
            let sig0 = model.sigma(t0);
            let mu1 = model.mu(&upper, t1);
            let a1 = model.a(&upper, horizon - t1);
            let enc_mean: Vec<f64> = (0..d)
                .map(|k| upper[k] + dt * (-mu1[k] + sig1 * a1[k]))
                .collect();
            let enc_var = match encoder {
                EncoderVariance::Literal => dt * sig1 * sig1,
                EncoderVariance::DecoderMatched => dt * sig0 * sig0,
            };
            if enc_var <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "zero-variance encoder transition at t = {t1}"
                )));
            }
            fill_normal(r, &mut xi);
            let lower: Vec<f64> = enc_mean.iter().zip(&xi).map(|(m, e)| m + enc_var.sqrt() * e).collect();
            let log_q = iso_normal_logpdf(&lower, &enc_mean, enc_var);
            let mu0 = model.mu(&lower, t0);
            let dec_mean: Vec<f64> = lower.iter().zip(&mu0).map(|(l, m)| l + dt * m).collect();
            let log_p = iso_normal_logpdf(&upper, &dec_mean, dt * sig0 * sig0);
            log_ratio += log_p - log_q;
            upper = lower;
            if !log_ratio.is_finite() || upper.iter().any(|v| !v.is_finite()) {
                return Ok(PathOutcome::NonFinite);
            }
        }
        Ok(PathOutcome::Done(PathTerms {
            prior: std_normal_logpdf(&upper),
            transition: log_ratio,
            ..Default::default()
        }))
    })?;
    Ok(ElboEstimate::from_paths(&paths, layers, rejected))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub layers: usize,
    pub dt_mean: f64,
    pub dt_stderr: f64,
    pub ct_mean: f64,
    pub ct_stderr: f64,
    pub abs_diff: f64,
}

/// `|E^L - E|` over a ladder of layer counts, the CT-ELBO computed once with
/// `ct_cfg` and each DT-ELBO with `ct_cfg.n_paths` paths.
pub fn consistency_ladder<S: VectorField + ?Sized>(
    model: &PluginModel<'_, S>,
    x: &[f64],
    ladder: &[usize],
    ct_cfg: &ElboConfig,
    encoder: EncoderVariance,
    rng: &mut Rng,
) -> Result<Vec<LadderRow>> {
    let ct = model.ct_elbo(x, ct_cfg, rng)?;
    ladder
        .iter()
        .map(|&layers| {
            let dt = dt_elbo(model, x, layers, ct_cfg.n_paths, encoder, rng)?;
            Ok(LadderRow {
                layers,
                dt_mean: dt.mean,
                dt_stderr: dt.stderr,
                ct_mean: ct.mean,
                ct_stderr: ct.stderr,
                abs_diff: (dt.mean - ct.mean).abs(),
            })
        })
        .collect()
}

pub fn ladder_csv(rows: &[LadderRow]) -> String {
    let mut out = String::from("layers,dt_mean,dt_stderr,ct_mean,ct_stderr,abs_diff\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.layers, r.dt_mean, r.dt_stderr, r.ct_mean, r.ct_stderr, r.abs_diff
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ZeroField;
    use crate::rng::seeded;
    use crate::vp_sde::{GaussianOracle, VpSde};
    use std::sync::Arc;

    #[test]
    fn matched_kernels_cancel() {
        let g = GenerativeSde::new(Arc::new(ZeroField { dim: 2 }), |_| 0.7, 1.0).unwrap();
        let z = ZeroField { dim: 2 };
        let m = WithDrift { sde: &g, a: &z };
        let est = dt_elbo(&m, &[0.3, -0.4], 1, 500, EncoderVariance::Literal, &mut seeded(1)).unwrap();
        assert_eq!(est.terms.transition_term, 0.0);
        assert!((est.mean - est.terms.prior_term).abs() < 1e-15);
    }

    #[test]
    fn ladder_approaches_ct_elbo() {
        let sde = VpSde::default();
        let o = GaussianOracle::standard_normal(2, sde);
        let model = PluginModel::new(&o, sde);
        let rows = consistency_ladder(
            &model,
            &[1.0, 1.0],
            &[16, 64, 256],
            &ElboConfig::new(1024, 500),
            EncoderVariance::Literal,
            &mut seeded(2),
        )
        .unwrap();
        assert!(rows.windows(2).all(|w| w[1].abs_diff < w[0].abs_diff), "{rows:?}");
        assert_eq!(ladder_csv(&rows).lines().count(), 4);
    }
}
