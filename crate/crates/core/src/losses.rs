//! Score-matching losses under the weighting `Lambda(s) = g(s)^2 I`.
//!
//! Every loss has a `*_rows` form returning one value per batch row, so
//! differences between losses can be summarized on shared samples, and a
//! summary form returning [`MeanStderr`].

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::field::{divergence_with, hutchinson, DivMode, VectorField};
use crate::points::Points;
use crate::rng::{fill_normal, fork, stream, uniform, Rng};
use crate::stats::{paired_difference, MeanStderr};
use crate::vp_sde::{GaussianOracle, VpSde};

/// Smallest training time; the conditional score blows up as `s -> 0`.
pub const S_MIN: f64 = 1e-5;

pub type LossValue = MeanStderr;

/// Data, times, noise and perturbed points for one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub y0: Points,
    pub s: Vec<f64>,
    pub noise: Points,
    pub ys: Points,
}

impl LossBatch {
    /// Builds `ys = m_s y0 + sqrt(v_s) noise` row by row.
    pub fn new(sde: &VpSde, y0: Points, s: Vec<f64>, noise: Points) -> Result<Self> {
        check_dim(y0.len(), s.len())?;
        check_dim(y0.len(), noise.len())?;
        check_dim(y0.dim(), noise.dim())?;
        let mut ys = Vec::with_capacity(y0.as_slice().len());
        for i in 0..y0.len() {
            ys.extend(sde.perturb(y0.row(i), s[i], noise.row(i))?.0);
        }
        let ys = Points::new(y0.dim(), ys)?;
        Ok(Self { y0, s, noise, ys })
    }

    /// Fresh noise for the given data and times.
    pub fn sample(sde: &VpSde, y0: Points, s: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        let mut noise = vec![0.0; y0.as_slice().len()];
        fill_normal(rng, &mut noise);
        let noise = Points::new(y0.dim(), noise)?;
        Self::new(sde, y0, s, noise)
    }

    /// Times uniform on `[s_min, T]`.
    pub fn sample_uniform(sde: &VpSde, y0: Points, s_min: f64, rng: &mut Rng) -> Result<Self> {
        let s = (0..y0.len())
            .map(|_| s_min + (sde.horizon - s_min) * uniform(rng))
            .collect();
        Self::sample(sde, y0, s, rng)
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.y0.dim()
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn par_rows<F>(n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// `1/2 g^2 ||score - grad log q||^2`.
pub fn esm_rows<F: VectorField + ?Sized>(score: &F, batch: &LossBatch, oracle: &GaussianOracle) -> Vec<f64> {
    let sde = *oracle.sde();
    par_rows(batch.len(), |i| {
        let (y, s) = (batch.ys.row(i), batch.s[i]);
        let sc = score.eval(y, s);
        let q = oracle.eval(y, s);
        let diff: Vec<f64> = sc.iter().zip(&q).map(|(a, b)| a - b).collect();
        0.5 * sde.beta_unchecked(s) * sq_norm(&diff)
    })
}

/// `1/2 g^2 ||score||^2 + g^2 div score`.
pub fn ism_rows<F: VectorField + ?Sized>(
    score: &F,
    sde: &VpSde,
    batch: &LossBatch,
    div: DivMode,
    rng: &mut Rng,
) -> Vec<f64> {
    let seed = fork(rng);
    par_rows(batch.len(), |i| {
        let (y, s) = (batch.ys.row(i), batch.s[i]);
        let b = sde.beta_unchecked(s);
        let mut r = stream(seed, i as u64);
        0.5 * b * sq_norm(&score.eval(y, s)) + b * divergence_with(score, y, s, div, &mut r)
    })
}

/// `1/2 g^2 ||score||^2 + g^2 v^T J v` with Rademacher `v`.
pub fn ssm_rows<F: VectorField + ?Sized>(
    score: &F,
    sde: &VpSde,
    batch: &LossBatch,
    probes: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let seed = fork(rng);
    par_rows(batch.len(), |i| {
        let (y, s) = (batch.ys.row(i), batch.s[i]);
        let b = sde.beta_unchecked(s);
        let mut r = stream(seed, i as u64);
        let (tr, _) = hutchinson(score, y, s, probes, &mut r);
        0.5 * b * sq_norm(&score.eval(y, s)) + b * tr
    })
}

/// `1/2 g^2 ||score + noise / sqrt(v_s)||^2`.
pub fn dsm_rows<F: VectorField + ?Sized>(score: &F, sde: &VpSde, batch: &LossBatch) -> Vec<f64> {
    par_rows(batch.len(), |i| {
        let (y, s) = (batch.ys.row(i), batch.s[i]);
        let sd = sde.variance_unchecked(s).sqrt();
        let sc = score.eval(y, s);
        let r: Vec<f64> = sc.iter().zip(batch.noise.row(i)).map(|(a, e)| a + e / sd).collect();
        0.5 * sde.beta_unchecked(s) * sq_norm(&r)
    })
}

/// `1/2 ||sqrt(v_s) score + noise||^2`, i.e. DSM times `v_s / g^2`.
pub fn dsm_weighted_rows<F: VectorField + ?Sized>(score: &F, sde: &VpSde, batch: &LossBatch) -> Vec<f64> {
    par_rows(batch.len(), |i| {
        let (y, s) = (batch.ys.row(i), batch.s[i]);
        let sd = sde.variance_unchecked(s).sqrt();
        let sc = score.eval(y, s);
        let r: Vec<f64> = sc.iter().zip(batch.noise.row(i)).map(|(a, e)| sd * a + e).collect();
        0.5 * sq_norm(&r)
    })
}

/// `1/2 g^2 ||grad log q(y_s, s)||^2`, whose mean is `1/2 I(q)`.
pub fn fisher_rows(oracle: &GaussianOracle, batch: &LossBatch) -> Vec<f64> {
    let sde = *oracle.sde();
    par_rows(batch.len(), |i| {
        let (y, s) = (batch.ys.row(i), batch.s[i]);
        0.5 * sde.beta_unchecked(s) * sq_norm(&oracle.eval(y, s))
    })
}

/// `1/2 g^2 ||noise||^2 / v_s`, whose mean is `1/2 E[I(q(. | y0))]`.
pub fn cond_fisher_rows(sde: &VpSde, batch: &LossBatch) -> Vec<f64> {
    (0..batch.len())
        .map(|i| {
            let s = batch.s[i];
            0.5 * sde.beta_unchecked(s) * sq_norm(batch.noise.row(i)) / sde.variance_unchecked(s)
        })
        .collect()
}

fn check_times(batch: &LossBatch) -> Result<()> {
    match batch.s.iter().find(|&&s| s <= 0.0) {
        Some(&s) => Err(Error::DegenerateKernel(s)),
        None => Ok(()),
    }
}

pub fn esm<F: VectorField + ?Sized>(score: &F, batch: &LossBatch, oracle: &GaussianOracle) -> LossValue {
    MeanStderr::from_values(&esm_rows(score, batch, oracle))
}

pub fn ism<F: VectorField + ?Sized>(
    score: &F,
    sde: &VpSde,
    batch: &LossBatch,
    div: DivMode,
    rng: &mut Rng,
) -> LossValue {
    MeanStderr::from_values(&ism_rows(score, sde, batch, div, rng))
}

pub fn ssm<F: VectorField + ?Sized>(
    score: &F,
    sde: &VpSde,
    batch: &LossBatch,
    probes: usize,
    rng: &mut Rng,
) -> LossValue {
    MeanStderr::from_values(&ssm_rows(score, sde, batch, probes, rng))
}

pub fn dsm<F: VectorField + ?Sized>(score: &F, sde: &VpSde, batch: &LossBatch) -> Result<LossValue> {
    check_times(batch)?;
    Ok(MeanStderr::from_values(&dsm_rows(score, sde, batch)))
}

pub fn dsm_weighted<F: VectorField + ?Sized>(score: &F, sde: &VpSde, batch: &LossBatch) -> Result<LossValue> {
    check_times(batch)?;
    Ok(MeanStderr::from_values(&dsm_weighted_rows(score, sde, batch)))
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub loss_name: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    /// Mean of the row-wise difference `lhs - rhs`.
    pub difference: f64,
    pub stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub n: usize,
    pub rows: Vec<LossRow>,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("loss_name,value,stderr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.loss_name, r.value, r.stderr));
        }
        out
    }
}

/// Evaluates the four losses and both Fisher terms on one shared sample of
/// `n` rows (data from the oracle, times uniform on `[S_MIN, T]`) and checks
/// `ESM - I/2 = ISM = SSM = DSM - E[I_cond]/2`.
///
/// Each equality is tested on the row-wise difference of the two sides, which
/// is where the shared sample pays off: the differences have far smaller
/// variance than either side.
pub fn identity_report<F: VectorField + ?Sized>(
    score: &F,
    oracle: &GaussianOracle,
    n: usize,
    k_sigma: f64,
    rng: &mut Rng,
) -> Result<IdentityReport> {
    check_dim(oracle.dim(), score.dim())?;
    let sde = *oracle.sde();
    let y0 = oracle.sample_data(n, rng);
    let batch = LossBatch::sample_uniform(&sde, y0, S_MIN, rng)?;
    let esm_r = esm_rows(score, &batch, oracle);
    let ism_r = ism_rows(score, &sde, &batch, DivMode::Exact, rng);
    let ssm_r = ssm_rows(score, &sde, &batch, 1, rng);
    let dsm_r = dsm_rows(score, &sde, &batch);
    let fi_r = fisher_rows(oracle, &batch);
    let ci_r = cond_fisher_rows(&sde, &batch);

    let summary = |name: &str, v: &[f64]| {
        let m = MeanStderr::from_values(v);
        LossRow {
            loss_name: name.into(),
            value: m.mean,
            stderr: m.stderr,
        }
    };
    let rows = vec![
        summary("esm", &esm_r),
        summary("ism", &ism_r),
        summary("ssm", &ssm_r),
        summary("dsm", &dsm_r),
        summary("half_fisher", &fi_r),
        summary("half_cond_fisher", &ci_r),
    ];
    let minus = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let check = |name: &str, lhs: Vec<f64>, rhs: &[f64]| {
        let d = paired_difference(&lhs, rhs);
        IdentityCheck {
            name: name.into(),
            difference: d.mean,
            stderr: d.stderr,
            pass: d.mean.abs() <= k_sigma * d.stderr,
        }
    };
    let checks = vec![
        check("esm_minus_half_fisher_eq_ism", minus(&esm_r, &fi_r), &ism_r),
        check("ism_eq_ssm", ism_r.clone(), &ssm_r),
        check("dsm_minus_half_cond_fisher_eq_ism", minus(&dsm_r, &ci_r), &ism_r),
    ];
    Ok(IdentityReport { n, rows, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AffineField, ZeroField};
    use crate::rng::seeded;

    fn batch_at(sde: &VpSde, n: usize, s: f64, rng: &mut Rng) -> LossBatch {
        let o = GaussianOracle::standard_normal(2, *sde);
        let y0 = o.sample_data(n, rng);
        LossBatch::sample(sde, y0, vec![s; n], rng).unwrap()
    }

    #[test]
    fn zero_net_losses() {
        let sde = VpSde::default();
        let mut rng = seeded(1);
        let b = batch_at(&sde, 20_000, 0.3, &mut rng);
        let z = ZeroField { dim: 2 };
        assert_eq!(ism(&z, &sde, &b, DivMode::Exact, &mut rng).mean, 0.0);
        assert_eq!(ssm(&z, &sde, &b, 1, &mut rng).mean, 0.0);

        // ESM of zero net on standard-normal data: 1/2 g^2 E||y||^2 = 1/2 g^2 d
        let o = GaussianOracle::standard_normal(2, sde);
        let g2 = sde.beta(0.3).unwrap();
        assert!(esm(&z, &b, &o).covers(0.5 * g2 * 2.0, 4.0));
        // DSM of zero net: 1/2 g^2 d / v
        let v = sde.variance_unchecked(0.3);
        assert!(dsm(&z, &sde, &b).unwrap().covers(0.5 * g2 * 2.0 / v, 4.0));
        // weighted DSM of zero net: 1/2 d, independent of s
        for s in [0.01, 0.3, 0.9] {
            let b = batch_at(&sde, 20_000, s, &mut rng);
            assert!(dsm_weighted(&z, &sde, &b).unwrap().covers(1.0, 4.0));
        }
    }

    #[test]
    fn oracle_score_has_zero_esm() {
        let sde = VpSde::default();
        let o = GaussianOracle::new(vec![0.5, -0.2], vec![1.2, 0.1, 0.1, 0.6], sde).unwrap();
        let mut rng = seeded(2);
        let y0 = o.sample_data(500, &mut rng);
        let b = LossBatch::sample_uniform(&sde, y0, S_MIN, &mut rng).unwrap();
        assert!(esm(&o, &b, &o).mean.abs() < 1e-20);
    }

    #[test]
    fn linear_minus_identity_ism() {
        // 1-D s(y) = -y on standard normal data: g^2 (1/2 E y^2 - 1) = -1/2 g^2
        let sde = VpSde::default();
        let mut rng = seeded(3);
        let o = GaussianOracle::standard_normal(1, sde);
        let y0 = o.sample_data(50_000, &mut rng);
        let b = LossBatch::sample(&sde, y0, vec![0.5; 50_000], &mut rng).unwrap();
        let f = AffineField::scaled_identity(1, -1.0);
        let m = ism(&f, &sde, &b, DivMode::Exact, &mut rng);
        assert!(m.covers(-0.5 * sde.beta(0.5).unwrap(), 4.0));
    }

    #[test]
    fn identity_map_ssm_equals_ism_pointwise() {
        let sde = VpSde::default();
        let mut rng = seeded(4);
        let b = batch_at(&sde, 200, 0.4, &mut rng);
        let f = AffineField::scaled_identity(2, 1.0);
        let a = ism_rows(&f, &sde, &b, DivMode::Exact, &mut rng);
        let c = ssm_rows(&f, &sde, &b, 1, &mut rng);
        assert_eq!(a, c);
    }

    #[test]
    fn weighted_dsm_scales_to_dsm() {
        let sde = VpSde::default();
        let mut rng = seeded(5);
        let o = GaussianOracle::standard_normal(2, sde);
        let y0 = o.sample_data(300, &mut rng);
        let b = LossBatch::sample_uniform(&sde, y0, S_MIN, &mut rng).unwrap();
        let f = AffineField::scaled_identity(2, -0.7).with_offset(vec![0.2, 0.1]);
        let w = dsm_weighted_rows(&f, &sde, &b);
        let d = dsm_rows(&f, &sde, &b);
        for i in 0..b.len() {
            let s = b.s[i];
            let lhs = sde.beta_unchecked(s) / sde.variance_unchecked(s) * w[i];
            assert!((lhs - d[i]).abs() <= 1e-9 * d[i].abs().max(1.0));
        }
    }

    struct TeacherForced<'a> {
        batch: &'a LossBatch,
        sde: VpSde,
    }

    impl VectorField for TeacherForced<'_> {
        fn dim(&self) -> usize {
            self.batch.dim()
        }
        fn eval_into(&self, y: &[f64], s: f64, out: &mut [f64]) {
            let i = (0..self.batch.len())
                .find(|&i| self.batch.ys.row(i) == y && self.batch.s[i] == s)
                .expect("row from the batch");
            let sd = self.sde.variance_unchecked(s).sqrt();
            for (o, e) in out.iter_mut().zip(self.batch.noise.row(i)) {
                *o = -e / sd;
            }
        }
        fn vjp_into(&self, _y: &[f64], _s: f64, _v: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn teacher_forced_dsm_is_zero() {
        let sde = VpSde::default();
        let mut rng = seeded(6);
        let o = GaussianOracle::standard_normal(2, sde);
        let y0 = o.sample_data(50, &mut rng);
        let b = LossBatch::sample_uniform(&sde, y0, S_MIN, &mut rng).unwrap();
        let stub = TeacherForced { batch: &b, sde };
        assert!(dsm(&stub, &sde, &b).unwrap().mean.abs() < 1e-20);
        assert!(dsm_weighted(&stub, &sde, &b).unwrap().mean.abs() < 1e-20);
    }

    #[test]
    fn zero_time_rows_rejected() {
        let sde = VpSde::default();
        let y0 = Points::new(1, vec![0.5]).unwrap();
        let noise = Points::new(1, vec![0.1]).unwrap();
        assert!(matches!(
            LossBatch::new(&sde, y0, vec![0.0], noise),
            Err(Error::DegenerateKernel(_))
        ));
    }

    #[test]
    fn identity_report_on_oracle_and_affine_fields() {
        let sde = VpSde::default();
        let o = GaussianOracle::new(vec![0.3, -0.4], vec![1.3, 0.2, 0.2, 0.8], sde).unwrap();
        let mut rng = seeded(7);
        let rep = identity_report(&o, &o, 20_000, 3.0, &mut rng).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert!(rep.passed(), "{rep:?}");
        // oracle score: ESM is zero and ISM = -I/2
        assert!(rep.rows[0].value.abs() < 1e-20);
        assert!((rep.rows[1].value + rep.rows[4].value).abs() <= 3.0 * rep.checks[0].stderr + 1e-12);

        let f = AffineField::new(2, |s| -1.0 + 0.5 * s).with_offset(vec![0.3, 0.0]);
        let rep = identity_report(&f, &o, 20_000, 3.0, &mut rng).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.to_csv().starts_with("loss_name,value,stderr\n"));
    }

    #[test]
    fn standard_normal_fisher_is_g2_d() {
        let sde = VpSde::default();
        let mut rng = seeded(8);
        let b = batch_at(&sde, 40_000, 0.6, &mut rng);
        let o = GaussianOracle::standard_normal(2, sde);
        let half_i = MeanStderr::from_values(&fisher_rows(&o, &b));
        assert!(half_i.covers(0.5 * sde.beta(0.6).unwrap() * 2.0, 4.0));
    }
}
