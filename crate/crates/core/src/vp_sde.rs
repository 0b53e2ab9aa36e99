//! Variance-preserving inference SDE `dY = -1/2 beta(s) Y ds + sqrt(beta(s)) dB`
//! and the closed-form Gaussian oracle built on it.
//!
//! The conditional kernel is `q(y_s | y_0) = N(m_s y_0, v_s I)` with
//! `m_s = exp(-A(s)/2)` and `v_s = 1 - exp(-A(s))`, where `A` is the integral
//! of `beta`. Gaussian data stays Gaussian at every time, which makes the
//! oracle the ground truth for every estimator in the crate.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_domain, Error, Result};
use crate::field::VectorField;
use crate::rng::{fill_normal, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VpSde {
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_horizon() -> f64 {
    1.0
}

impl Default for VpSde {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

impl VpSde {
    pub fn new(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self> {
        let sde = Self {
            beta_min,
            beta_max,
            horizon,
        };
        sde.validate()?;
        Ok(sde)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_min < beta_max, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    fn check_time(&self, s: f64) -> Result<()> {
        check_domain("s", s, 0.0, self.horizon)
    }

    /// Slope of the affine schedule.
    fn slope(&self) -> f64 {
        (self.beta_max - self.beta_min) / self.horizon
    }

    pub fn beta(&self, s: f64) -> Result<f64> {
        self.check_time(s)?;
        Ok(self.beta_unchecked(s))
    }

    /// `beta(s)` without the domain check, for inner loops that own their grid.
    #[inline]
    pub fn beta_unchecked(&self, s: f64) -> f64 {
        self.beta_min + self.slope() * s
    }

    /// `A(s) = int_0^s beta`.
    pub fn int_beta(&self, s: f64) -> Result<f64> {
        self.check_time(s)?;
        Ok(self.int_beta_unchecked(s))
    }

    #[inline]
    pub fn int_beta_unchecked(&self, s: f64) -> f64 {
        self.beta_min * s + 0.5 * self.slope() * s * s
    }

    /// Inverse of `A` on `[0, inf)`, via the cancellation-free root.
    pub fn int_beta_inverse(&self, a: f64) -> f64 {
        let k = self.slope();
        2.0 * a / (self.beta_min + (self.beta_min * self.beta_min + 2.0 * k * a).sqrt())
    }

    /// `f(y, s) = -1/2 beta(s) y`.
    pub fn drift_f(&self, y: &[f64], s: f64) -> Result<Vec<f64>> {
        let b = self.beta(s)?;
        Ok(y.iter().map(|v| -0.5 * b * v).collect())
    }

    /// `g(s) = sqrt(beta(s))`.
    pub fn diffusion_g(&self, s: f64) -> Result<f64> {
        Ok(self.beta(s)?.sqrt())
    }

    #[inline]
    pub fn g_unchecked(&self, s: f64) -> f64 {
        self.beta_unchecked(s).sqrt()
    }

    #[inline]
    pub fn mean_coef_unchecked(&self, s: f64) -> f64 {
        (-0.5 * self.int_beta_unchecked(s)).exp()
    }

    /// `v_s = 1 - exp(-A(s))`, accurate for small `s`.
    #[inline]
    pub fn variance_unchecked(&self, s: f64) -> f64 {
        -(-self.int_beta_unchecked(s)).exp_m1()
    }

    pub fn kernel(&self, s: f64) -> Result<PerturbationKernel> {
        self.check_time(s)?;
        Ok(PerturbationKernel {
            mean_coef: self.mean_coef_unchecked(s),
            std: self.variance_unchecked(s).sqrt(),
            time: s,
        })
    }

    /// Reparameterized sample `y_s = m_s y0 + sqrt(v_s) noise` and the
    /// conditional score `-noise / sqrt(v_s)`.
    pub fn perturb(&self, y0: &[f64], s: f64, noise: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(y0.len(), noise.len())?;
        let k = self.kernel(s)?;
        if k.std <= 0.0 {
            return Err(Error::DegenerateKernel(s));
        }
        let ys = y0
            .iter()
            .zip(noise)
            .map(|(y, e)| k.mean_coef * y + k.std * e)
            .collect();
        let score = noise.iter().map(|e| -e / k.std).collect();
        Ok((ys, score))
    }

    /// Decay factor of the exact transition `s -> t` of the VP SDE whose rate
    /// is scaled by `rate_scale`: `Y_t = r Y_s + sqrt(1 - r^2) xi`.
    #[inline]
    pub fn transition_decay(&self, s: f64, t: f64, rate_scale: f64) -> f64 {
        (-0.5 * rate_scale * (self.int_beta_unchecked(t) - self.int_beta_unchecked(s))).exp()
    }
}

/// Mean coefficient and standard deviation of `q(y_s | y_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationKernel {
    pub mean_coef: f64,
    pub std: f64,
    pub time: f64,
}

impl PerturbationKernel {
    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

/// Gaussian data `N(mean0, cov0)` pushed through the VP SDE.
///
/// Internally `cov0 = Q diag(lambda) Q^T`, so the time-`s` covariance is
/// `Q diag(m_s^2 lambda + v_s) Q^T` and scores cost `O(d^2)` per call.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mean0: Vec<f64>,
    cov0: Vec<f64>,
    eigvecs: Vec<f64>,
    eigvals: Vec<f64>,
    chol0: Vec<f64>,
    sde: VpSde,
}

impl GaussianOracle {
    /// `cov0` is row-major `d x d`.
    pub fn new(mean0: Vec<f64>, cov0: Vec<f64>, sde: VpSde) -> Result<Self> {
        let d = mean0.len();
        if d == 0 {
            return Err(Error::InvalidParameter("oracle needs dim >= 1".into()));
        }
        check_dim(d * d, cov0.len())?;
        sde.validate()?;
        let m = DMatrix::from_row_slice(d, d, &cov0);
        if (&m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = m.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
        let eig = SymmetricEigen::new(m);
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let l = chol.l();
        let mut chol0 = vec![0.0; d * d];
        let mut eigvecs = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                chol0[i * d + j] = l[(i, j)];
                eigvecs[i * d + j] = eig.eigenvectors[(i, j)];
            }
        }
        Ok(Self {
            mean0,
            cov0,
            eigvecs,
            eigvals: eig.eigenvalues.iter().copied().collect(),
            chol0,
            sde,
        })
    }

    pub fn standard_normal(dim: usize, sde: VpSde) -> Self {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        Self::new(vec![0.0; dim], cov, sde).expect("identity covariance is positive definite")
    }

    /// `N(mean0, I)`.
    pub fn isotropic(mean0: Vec<f64>, sde: VpSde) -> Self {
        let d = mean0.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        Self::new(mean0, cov, sde).expect("identity covariance is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    pub fn sde(&self) -> &VpSde {
        &self.sde
    }

    pub fn mean0(&self) -> &[f64] {
        &self.mean0
    }

    pub fn cov0(&self) -> &[f64] {
        &self.cov0
    }

    /// True when `cov0 = I`, the case where every lambda-inference SDE is an
    /// exactly solvable rescaled VP SDE.
    pub fn has_identity_cov(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| {
            (0..d).all(|j| {
                let target = if i == j { 1.0 } else { 0.0 };
                (self.cov0[i * d + j] - target).abs() < 1e-14
            })
        })
    }

    /// Eigenvalues of the time-`s` covariance.
    fn kappa(&self, s: f64) -> impl Iterator<Item = f64> + '_ {
        let m = self.sde.mean_coef_unchecked(s);
        let v = self.sde.variance_unchecked(s);
        self.eigvals.iter().map(move |l| m * m * l + v)
    }

    /// Marginal `(mean_s, cov_s)` with `cov_s` row-major.
    pub fn marginal(&self, s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.sde.check_time(s)?;
        let d = self.dim();
        let m = self.sde.mean_coef_unchecked(s);
        let v = self.sde.variance_unchecked(s);
        let mean = self.mean0.iter().map(|x| m * x).collect();
        let mut cov: Vec<f64> = self.cov0.iter().map(|c| m * m * c).collect();
        for i in 0..d {
            cov[i * d + i] += v;
        }
        Ok((mean, cov))
    }

    /// Applies the time-`s` precision matrix to `r`.
    fn apply_precision(&self, s: f64, r: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let q = &self.eigvecs;
        // out = Q diag(1/kappa) Q^T r
        let proj: Vec<f64> = self
            .kappa(s)
            .enumerate()
            .map(|(k, kap)| (0..d).map(|i| q[i * d + k] * r[i]).sum::<f64>() / kap)
            .collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..d).map(|k| q[i * d + k] * proj[k]).sum();
        }
    }

    fn score_unchecked(&self, y: &[f64], s: f64, out: &mut [f64]) {
        let m = self.sde.mean_coef_unchecked(s);
        let r: Vec<f64> = y.iter().zip(&self.mean0).map(|(yi, mi)| yi - m * mi).collect();
        self.apply_precision(s, &r, out);
        out.iter_mut().for_each(|o| *o = -*o);
    }

    /// `grad log q(y, s) = -cov_s^{-1} (y - mean_s)`.
    pub fn score(&self, y: &[f64], s: f64) -> Result<Vec<f64>> {
        self.sde.check_time(s)?;
        check_dim(self.dim(), y.len())?;
        let mut out = vec![0.0; self.dim()];
        self.score_unchecked(y, s, &mut out);
        Ok(out)
    }

    /// `log q(y, s)`.
    pub fn logpdf(&self, y: &[f64], s: f64) -> Result<f64> {
        self.sde.check_time(s)?;
        check_dim(self.dim(), y.len())?;
        let d = self.dim();
        let m = self.sde.mean_coef_unchecked(s);
        let r: Vec<f64> = y.iter().zip(&self.mean0).map(|(yi, mi)| yi - m * mi).collect();
        let mut pr = vec![0.0; d];
        self.apply_precision(s, &r, &mut pr);
        let quad: f64 = r.iter().zip(&pr).map(|(a, b)| a * b).sum();
        let logdet: f64 = self.kappa(s).map(f64::ln).sum();
        Ok(-0.5 * (d as f64 * LN_2PI + logdet + quad))
    }

    /// Trace of the time-`s` precision, i.e. `-tr H_{log q}`.
    pub fn precision_trace(&self, s: f64) -> f64 {
        self.kappa(s).map(|k| 1.0 / k).sum()
    }

    /// `I(q(., s))` under the unweighted norm: `E ||grad log q||^2 = tr cov_s^{-1}`.
    pub fn fisher_information(&self, s: f64) -> f64 {
        self.precision_trace(s)
    }

    /// Draws `n` points from the time-zero distribution.
    pub fn sample_data(&self, n: usize, rng: &mut Rng) -> crate::points::Points {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            fill_normal(rng, &mut z);
            for i in 0..d {
                let li: f64 = (0..=i).map(|j| self.chol0[i * d + j] * z[j]).sum();
                data.push(self.mean0[i] + li);
            }
        }
        crate::points::Points::new(d, data).expect("rows have width d")
    }
}

/// The oracle as a score field in inference time.
impl VectorField for GaussianOracle {
    fn dim(&self) -> usize {
        self.mean0.len()
    }
    fn eval_into(&self, y: &[f64], s: f64, out: &mut [f64]) {
        self.score_unchecked(y, s, out);
    }
    fn vjp_into(&self, _y: &[f64], s: f64, v: &[f64], out: &mut [f64]) {
        // Hessian of log q is -precision (symmetric).
        self.apply_precision(s, v, out);
        out.iter_mut().for_each(|o| *o = -*o);
    }
    fn divergence(&self, _y: &[f64], s: f64) -> f64 {
        -self.precision_trace(s)
    }
}

/// Standard-normal log density of dimension `y.len()`.
pub fn std_normal_logpdf(y: &[f64]) -> f64 {
    let sq: f64 = y.iter().map(|v| v * v).sum();
    -0.5 * (y.len() as f64 * LN_2PI + sq)
}

/// Isotropic Gaussian log density `N(x; mean, var I)`.
pub fn iso_normal_logpdf(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * (x.len() as f64 * (LN_2PI + var.ln()) + sq / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn sde() -> VpSde {
        VpSde::default()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        assert_eq!(sde().beta(0.0).unwrap(), 0.1);
        assert_eq!(sde().beta(1.0).unwrap(), 20.0);
        assert!((sde().beta(0.5).unwrap() - 10.05).abs() < 1e-12);
    }

    #[test]
    fn int_beta_values() {
        assert_eq!(sde().int_beta(0.0).unwrap(), 0.0);
        assert!((sde().int_beta(1.0).unwrap() - 10.05).abs() < 1e-12);
        assert!((sde().int_beta(0.5).unwrap() - 2.5375).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_times_are_domain_errors() {
        assert!(matches!(sde().beta(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(sde().int_beta(1.5), Err(Error::Domain { .. })));
        assert!(sde().kernel(f64::NAN).is_err());
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(VpSde::new(0.0, 20.0, 1.0).is_err());
        assert!(VpSde::new(5.0, 1.0, 1.0).is_err());
        assert!(VpSde::new(0.1, 20.0, 0.0).is_err());
    }

    #[test]
    fn drift_and_diffusion_examples() {
        assert_eq!(sde().drift_f(&[0.0, 0.0], 0.3).unwrap(), vec![0.0, 0.0]);
        let f = sde().drift_f(&[1.0, 1.0], 0.0).unwrap();
        assert!(f.iter().all(|v| (v + 0.05).abs() < 1e-15));
        assert!((sde().drift_f(&[2.0], 1.0).unwrap()[0] + 20.0).abs() < 1e-12);
        assert!((sde().diffusion_g(0.0).unwrap() - 0.316_227_766_016_838).abs() < 1e-12);
        assert!((sde().diffusion_g(1.0).unwrap() - 4.472_135_954_999_58).abs() < 1e-12);
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            let g = sde().diffusion_g(s).unwrap();
            assert!((g * g - sde().beta(s).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_preservation_on_grid() {
        for i in 0..=1000 {
            let k = sde().kernel(i as f64 / 1000.0).unwrap();
            assert!((k.mean_coef * k.mean_coef + k.variance() - 1.0).abs() < 1e-12);
            assert!(k.mean_coef > 0.0 && k.mean_coef <= 1.0);
            assert!(k.variance() >= 0.0 && k.variance() < 1.0);
        }
    }

    #[test]
    fn perturb_examples() {
        let (ys, sc) = sde().perturb(&[1.0, -2.0], 0.4, &[0.0, 0.0]).unwrap();
        let m = sde().kernel(0.4).unwrap().mean_coef;
        assert_eq!(ys, vec![m, -2.0 * m]);
        assert_eq!(sc, vec![0.0, 0.0]);

        let (ys, _) = sde().perturb(&[0.0], 1.0, &[1.0]).unwrap();
        let expect = (1.0 - (-10.05f64).exp()).sqrt();
        assert!((ys[0] - expect).abs() < 1e-15);
        assert!((expect - 0.999_957_f64.sqrt()).abs() < 1e-6);

        assert!(matches!(
            sde().perturb(&[1.0], 0.0, &[0.3]),
            Err(Error::DegenerateKernel(_))
        ));
    }

    #[test]
    fn conditional_score_matches_gaussian_gradient() {
        // grad of log N(y; m y0, v I) at y is -(y - m y0)/v
        let y0 = [0.7, -1.3, 2.0];
        let noise = [0.2, 1.1, -0.4];
        for s in [1e-3, 0.2, 0.9] {
            let (ys, sc) = sde().perturb(&y0, s, &noise).unwrap();
            let k = sde().kernel(s).unwrap();
            for i in 0..3 {
                let analytic = -(ys[i] - k.mean_coef * y0[i]) / k.variance();
                assert!((analytic - sc[i]).abs() < 1e-9 * analytic.abs().max(1.0));
            }
        }
    }

    #[test]
    fn oracle_marginal_examples() {
        let o = GaussianOracle::standard_normal(2, sde());
        for s in [0.0, 0.3, 1.0] {
            let (m, c) = o.marginal(s).unwrap();
            assert!(m.iter().all(|v| v.abs() < 1e-15));
            assert!((c[0] - 1.0).abs() < 1e-12 && (c[3] - 1.0).abs() < 1e-12);
            assert!(c[1].abs() < 1e-15);
        }
        let o = GaussianOracle::new(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], sde()).unwrap();
        let (m, c) = o.marginal(1.0).unwrap();
        let m1 = (-5.025f64).exp();
        assert!((m[0] - m1).abs() < 1e-15);
        assert!((m[0] - 0.00655).abs() < 5e-5);
        assert!((c[0] - (m1 * m1 + 1.0 - (-10.05f64).exp())).abs() < 1e-15);

        let o = GaussianOracle::new(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 0.5], sde()).unwrap();
        let (m, c) = o.marginal(0.0).unwrap();
        assert_eq!(m, vec![0.5, -1.0]);
        assert_eq!(c, vec![2.0, 0.3, 0.3, 0.5]);
    }

    #[test]
    fn oracle_rejects_non_pd() {
        assert!(matches!(
            GaussianOracle::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0], sde()),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(GaussianOracle::new(vec![0.0], vec![-1.0], sde()).is_err());
    }

    #[test]
    fn oracle_score_examples() {
        let o = GaussianOracle::standard_normal(3, sde());
        let y = [0.3, -2.0, 1.5];
        for s in [0.0, 0.5, 1.0] {
            let sc = o.score(&y, s).unwrap();
            for i in 0..3 {
                assert!((sc[i] + y[i]).abs() < 1e-12);
            }
        }
        let o = GaussianOracle::new(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 0.5], sde()).unwrap();
        let (m, _) = o.marginal(0.4).unwrap();
        assert!(o.score(&m, 0.4).unwrap().iter().all(|v| v.abs() < 1e-12));

        let o = GaussianOracle::new(vec![1.0], vec![4.0], sde()).unwrap();
        let sc = o.score(&[3.0], 0.0).unwrap();
        assert!((sc[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_score_matches_dense_solve() {
        let o = GaussianOracle::new(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 0.5], sde()).unwrap();
        let y = [0.1, 0.8];
        let s = 0.05;
        let (m, c) = o.marginal(s).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &c);
        let r = DVector::from_vec(vec![y[0] - m[0], y[1] - m[1]]);
        let expect = -(cov.try_inverse().unwrap() * r);
        let got = o.score(&y, s).unwrap();
        for i in 0..2 {
            assert!((got[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_logpdf_at_origin() {
        let o = GaussianOracle::standard_normal(1, sde());
        for s in [0.0, 0.25, 1.0] {
            assert!((o.logpdf(&[0.0], s).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        }
    }

    #[test]
    fn logpdf_integrates_to_one() {
        let o = GaussianOracle::new(vec![1.5], vec![0.7], sde()).unwrap();
        for s in [0.0, 0.1, 0.6] {
            let (lo, hi, n) = (-12.0, 12.0, 24_000);
            let h = (hi - lo) / n as f64;
            // Simpson's rule
            let mut acc = 0.0;
            for i in 0..=n {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * o.logpdf(&[x], s).unwrap().exp();
            }
            assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fokker_planck_residual_vanishes() {
        // dq/ds = -d/dy (f q) + 1/2 g^2 d2q/dy2 in one dimension
        let o = GaussianOracle::new(vec![0.8], vec![0.5], sde()).unwrap();
        let q = |y: f64, s: f64| o.logpdf(&[y], s).unwrap().exp();
        let (hy, hs) = (1e-3, 1e-5);
        for s in [0.1, 0.4, 0.8] {
            let b = sde().beta(s).unwrap();
            for y in [-1.0, 0.0, 0.4, 1.3] {
                let dq_ds = (q(y, s + hs) - q(y, s - hs)) / (2.0 * hs);
                let fq = |y: f64| -0.5 * b * y * q(y, s);
                let d_fq = (fq(y + hy) - fq(y - hy)) / (2.0 * hy);
                let d2q = (q(y + hy, s) - 2.0 * q(y, s) + q(y - hy, s)) / (hy * hy);
                let rhs = -d_fq + 0.5 * b * d2q;
                assert!((dq_ds - rhs).abs() < 1e-4, "s={s} y={y}: {dq_ds} vs {rhs}");
            }
        }
    }

    #[test]
    fn oracle_vjp_is_negative_precision() {
        let o = GaussianOracle::new(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 0.5], sde()).unwrap();
        let s = 0.02;
        let jac = o.jacobian(&[0.0, 0.0], s);
        let (_, c) = o.marginal(s).unwrap();
        let p = DMatrix::from_row_slice(2, 2, &c).try_inverse().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((jac[i * 2 + j] + p[(i, j)]).abs() < 1e-10);
            }
        }
        assert!((o.divergence(&[0.0, 0.0], s) + p.trace()).abs() < 1e-10);
    }
}
