//! Training-time distributions.
//!
//! [`DebiasedTimeDist`] has unnormalized density `g(s)^2 / v_s` for
//! `s >= s_eps` and the constant `g(s_eps)^2 / v_{s_eps}` below, so that
//! multiplying the `v_s / g^2`-weighted DSM loss by the normalizer `Z`
//! recovers the time-integrated DSM term without the `1/v_s` blow-up.

use serde::{Deserialize, Serialize};

use crate::error::{check_domain, Error, Result};
use crate::field::VectorField;
use crate::losses::{dsm_rows, dsm_weighted_rows, LossBatch, LossValue, S_MIN};
use crate::points::Points;
use crate::rng::{uniform, Rng};
use crate::stats::MeanStderr;
use crate::vp_sde::{GaussianOracle, VpSde};

pub const DEFAULT_S_EPS: f64 = 1e-3;

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(exp(a) - 1)` for `a > 0`.
fn log_expm1(a: f64) -> f64 {
    a + (-(-a).exp_m1()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebiasedTimeDist {
    sde: VpSde,
    s_eps: f64,
    plateau: f64,
    z: f64,
}

impl DebiasedTimeDist {
    pub fn new(sde: VpSde, s_eps: f64) -> Result<Self> {
        sde.validate()?;
        if !(s_eps > 0.0 && s_eps < sde.horizon) {
            return Err(Error::InvalidParameter(format!(
                "s_eps must lie in (0, T), got {s_eps}"
            )));
        }
        let plateau = sde.beta_unchecked(s_eps) / sde.variance_unchecked(s_eps);
        let phi = |s: f64| log_expm1(sde.int_beta_unchecked(s));
        let z = plateau * s_eps + phi(sde.horizon) - phi(s_eps);
        Ok(Self {
            sde,
            s_eps,
            plateau,
            z,
        })
    }

    pub fn sde(&self) -> &VpSde {
        &self.sde
    }

    pub fn s_eps(&self) -> f64 {
        self.s_eps
    }

    /// Normalizer `Z`.
    pub fn normalizer(&self) -> f64 {
        self.z
    }

    /// Density value on `[0, s_eps)`.
    pub fn plateau(&self) -> f64 {
        self.plateau
    }

    /// Share of the mass below `s_eps`.
    pub fn plateau_mass(&self) -> f64 {
        self.plateau * self.s_eps / self.z
    }

    /// `phi(s) = log(exp(A(s)) - 1)`, the antiderivative of `g^2 / v_s`.
    pub fn phi(&self, s: f64) -> Result<f64> {
        check_domain("s", s, 0.0, self.sde.horizon)?;
        if s == 0.0 {
            return Err(Error::Domain {
                what: "s",
                value: s,
                lo: f64::MIN_POSITIVE,
                hi: self.sde.horizon,
            });
        }
        Ok(log_expm1(self.sde.int_beta_unchecked(s)))
    }

    fn phi_unchecked(&self, s: f64) -> f64 {
        log_expm1(self.sde.int_beta_unchecked(s))
    }

    /// Unnormalized density.
    pub fn unnorm_pdf(&self, s: f64) -> Result<f64> {
        check_domain("s", s, 0.0, self.sde.horizon)?;
        Ok(self.unnorm_pdf_unchecked(s))
    }

    fn unnorm_pdf_unchecked(&self, s: f64) -> f64 {
        if s < self.s_eps {
            self.plateau
        } else {
            self.sde.beta_unchecked(s) / self.sde.variance_unchecked(s)
        }
    }

    pub fn pdf(&self, s: f64) -> Result<f64> {
        Ok(self.unnorm_pdf(s)? / self.z)
    }

    pub fn unnorm_cdf(&self, s: f64) -> Result<f64> {
        check_domain("s", s, 0.0, self.sde.horizon)?;
        Ok(if s < self.s_eps {
            self.plateau * s
        } else {
            self.plateau * self.s_eps + (self.phi_unchecked(s) - self.phi_unchecked(self.s_eps))
        })
    }

    pub fn cdf(&self, s: f64) -> Result<f64> {
        Ok(self.unnorm_cdf(s)? / self.z)
    }

    pub fn inv_cdf(&self, u: f64) -> Result<f64> {
        check_domain("u", u, 0.0, 1.0)?;
        let target = self.z * u;
        let knee = self.plateau * self.s_eps;
        if target < knee {
            return Ok(target / self.plateau);
        }
        let a = softplus(target + self.phi_unchecked(self.s_eps) - knee);
        Ok(self.sde.int_beta_inverse(a).min(self.sde.horizon))
    }

    /// `log Z - log unnorm_pdf(s)`, so `exp(log_weight) = 1 / pdf(s)`.
    pub fn log_weight(&self, s: f64) -> Result<f64> {
        Ok(self.z.ln() - self.unnorm_pdf(s)?.ln())
    }
}

/// Where training times come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeSampler {
    Uniform { s_min: f64, horizon: f64 },
    Debiased(DebiasedTimeDist),
}

impl TimeSampler {
    pub fn uniform(sde: &VpSde, s_min: f64) -> Self {
        TimeSampler::Uniform {
            s_min,
            horizon: sde.horizon,
        }
    }

    /// Draws `n` times by inverse-CDF transform and their log importance
    /// weights.
    pub fn sample_times(&self, n: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        match self {
            TimeSampler::Uniform { s_min, horizon } => {
                let s = (0..n).map(|_| s_min + (horizon - s_min) * uniform(rng)).collect();
                (s, vec![(horizon - s_min).ln(); n])
            }
            TimeSampler::Debiased(dist) => {
                let s: Vec<f64> = (0..n)
                    .map(|_| dist.inv_cdf(uniform(rng)).expect("u in [0, 1)"))
                    .collect();
                let w = s.iter().map(|&t| dist.log_weight(t).expect("t in [0, T]")).collect();
                (s, w)
            }
        }
    }
}

/// `Z * dsm_weighted` on times drawn from `dist`: an estimate of the
/// time-integrated DSM loss, exact above `s_eps`.
pub fn debiased_dsm_rows<F: VectorField + ?Sized>(
    score: &F,
    y0: Points,
    dist: &DebiasedTimeDist,
    rng: &mut Rng,
) -> Result<(LossBatch, Vec<f64>)> {
    let (s, _) = TimeSampler::Debiased(*dist).sample_times(y0.len(), rng);
    if let Some(&bad) = s.iter().find(|&&t| t <= 0.0) {
        return Err(Error::DegenerateKernel(bad));
    }
    let batch = LossBatch::sample(dist.sde(), y0, s, rng)?;
    let rows = dsm_weighted_rows(score, dist.sde(), &batch)
        .into_iter()
        .map(|v| dist.normalizer() * v)
        .collect();
    Ok((batch, rows))
}

pub fn debiased_dsm_objective<F: VectorField + ?Sized>(
    score: &F,
    y0: Points,
    dist: &DebiasedTimeDist,
    rng: &mut Rng,
) -> Result<LossValue> {
    let (_, rows) = debiased_dsm_rows(score, y0, dist, rng)?;
    Ok(MeanStderr::from_values(&rows))
}

/// Two independent estimates of `int_{s_eps}^T DSM(s) ds` from `n` rows
/// each: `(debiased, uniform)`. The debiased rows are `Z * dsm_weighted`
/// with rows below `s_eps` zeroed; the uniform rows are `(T - s_eps) * DSM`.
pub fn dsm_integral_estimates<F: VectorField + ?Sized>(
    score: &F,
    data: &GaussianOracle,
    dist: &DebiasedTimeDist,
    n: usize,
    rng: &mut Rng,
) -> Result<(LossValue, LossValue)> {
    let sde = *dist.sde();
    let (s, _) = TimeSampler::Debiased(*dist).sample_times(n, rng);
    let s: Vec<f64> = s.into_iter().map(|t| t.max(S_MIN)).collect();
    let batch = LossBatch::sample(&sde, data.sample_data(n, rng), s, rng)?;
    let deb: Vec<f64> = dsm_weighted_rows(score, &sde, &batch)
        .into_iter()
        .zip(&batch.s)
        .map(|(v, &t)| if t >= dist.s_eps() { dist.normalizer() * v } else { 0.0 })
        .collect();
    let width = sde.horizon - dist.s_eps();
    let ub = LossBatch::sample_uniform(&sde, data.sample_data(n, rng), dist.s_eps(), rng)?;
    let uni: Vec<f64> = dsm_rows(score, &sde, &ub).into_iter().map(|v| width * v).collect();
    Ok((MeanStderr::from_values(&deb), MeanStderr::from_values(&uni)))
}

/// `(s, pdf, cdf)` table for plotting.
pub fn density_table(dist: &DebiasedTimeDist, points: usize) -> String {
    let mut out = String::from("s,pdf,cdf\n");
    let t = dist.sde().horizon;
    for i in 0..points {
        let s = t * i as f64 / (points - 1).max(1) as f64;
        out.push_str(&format!(
            "{},{},{}\n",
            s,
            dist.pdf(s).expect("grid inside [0, T]"),
            dist.cdf(s).expect("grid inside [0, T]")
        ));
    }
    out
}

/// Serializable choice of training-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSamplerKind {
    Uniform,
    Debiased,
}
