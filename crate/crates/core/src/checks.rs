//! Named property suites with pass/fail reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dt_elbo::{consistency_ladder, ladder_csv, EncoderVariance};
use crate::elbo::ElboConfig;
use crate::elbo::PluginModel;
use crate::error::Result;
use crate::field::ZeroField;
use crate::generative::{ct_elbo, fk_density, variational_gap_oracle, LinearSde};
use crate::losses::identity_report;
use crate::rng::Rng;
use crate::sampler::LambdaSampler;
use crate::score_net::{NetConfig, OutputKind, ScoreNet};
use crate::stats::{ks_distance, relative_frobenius, MeanStderr};
use crate::time_sampler::{density_table, dsm_integral_estimates, DebiasedTimeDist, TimeSampler, DEFAULT_S_EPS};
use crate::vp_sde::{GaussianOracle, VpSde};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Identity,
    Consistency,
    Debias,
    Gap,
    LambdaEquiv,
    Fk,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Identity => "identity",
            Suite::Consistency => "consistency",
            Suite::Debias => "debias",
            Suite::Gap => "gap",
            Suite::LambdaEquiv => "lambda-equiv",
            Suite::Fk => "fk",
        }
    }
}

/// One measured quantity against its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub measured: f64,
    pub stderr: Option<f64>,
    pub tolerance: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub assertions: Vec<Assertion>,
    /// `(file name, contents)` pairs, e.g. CSV tables.
    #[serde(skip)]
    pub artifacts: Vec<(String, String)>,
}

impl SuiteReport {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            assertions: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, measured: f64, stderr: Option<f64>, tolerance: impl Into<String>, passed: bool) {
        self.assertions.push(Assertion {
            name: name.into(),
            measured,
            stderr,
            tolerance: tolerance.into(),
            passed,
        });
    }

    /// `|m.mean - target| <= k * m.stderr`.
    fn push_covers(&mut self, name: impl Into<String>, m: MeanStderr, target: f64, k: f64) {
        let passed = m.covers(target, k);
        self.push(name, m.mean - target, Some(m.stderr), format!("|diff| <= {k} stderr"), passed);
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for a in &self.assertions {
            let se = a.stderr.map(|s| format!(" +- {s:.3e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "[{}] {}: {:.6e}{se} (tolerance: {})",
                if a.passed { "PASS" } else { "FAIL" },
                a.name,
                a.measured,
                a.tolerance
            );
        }
        let _ = writeln!(
            out,
            "suite {}: {}",
            self.suite.name(),
            if self.passed() { "passed" } else { "FAILED" }
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,measured,stderr,tolerance,passed\n");
        for a in &self.assertions {
            let _ = writeln!(
                out,
                "{},{},{},\"{}\",{}",
                a.name,
                a.measured,
                a.stderr.map(|s| s.to_string()).unwrap_or_default(),
                a.tolerance.replace('"', "\"\""),
                a.passed
            );
        }
        out
    }
}

/// Monte-Carlo budget of a suite run. `full` uses the acceptance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Full,
    Quick,
}

impl Budget {
    fn pick(self, full: usize, quick: usize) -> usize {
        match self {
            Budget::Full => full,
            Budget::Quick => quick,
        }
    }
}

/// Correlated 2-D Gaussian used across suites.
pub fn reference_oracle(sde: VpSde) -> GaussianOracle {
    GaussianOracle::new(vec![0.5, -0.25], vec![1.5, 0.5, 0.5, 0.7], sde).expect("positive definite")
}

pub fn run(suite: Suite, budget: Budget, rng: &mut Rng) -> Result<SuiteReport> {
    match suite {
        Suite::Identity => identity(budget, rng),
        Suite::Consistency => consistency(budget, rng),
        Suite::Debias => debias(budget, rng),
        Suite::Gap => gap(budget, rng),
        Suite::LambdaEquiv => lambda_equiv(budget, rng),
        Suite::Fk => fk(budget, rng),
    }
}

fn identity(budget: Budget, rng: &mut Rng) -> Result<SuiteReport> {
    let sde = VpSde::default();
    let oracle = reference_oracle(sde);
    let n = budget.pick(100_000, 10_000);
    let net = ScoreNet::init(&NetConfig::new(2), OutputKind::Score, sde, 17)?;
    let mut rep = SuiteReport::new(Suite::Identity);
    for (who, report) in [
        ("random_net", identity_report(&net, &oracle, n, 3.0, rng)?),
        ("oracle", identity_report(&oracle, &oracle, n, 3.0, rng)?),
    ] {
        for c in &report.checks {
            rep.push(format!("{who}/{}", c.name), c.difference, Some(c.stderr), "|diff| <= 3 stderr", c.pass);
        }
        rep.artifacts.push((format!("identity_{who}.csv"), report.to_csv()));
    }
    Ok(rep)
}

fn consistency(budget: Budget, rng: &mut Rng) -> Result<SuiteReport> {
    let sde = VpSde::default();
    let oracle = GaussianOracle::standard_normal(2, sde);
    let model = PluginModel::new(&oracle, sde);
    let cfg = ElboConfig::new(budget.pick(4096, 1024), 1000);
    let rows = consistency_ladder(&model, &[1.0, 1.0], &[16, 64, 256, 1024], &cfg, EncoderVariance::Literal, rng)?;
    let mut rep = SuiteReport::new(Suite::Consistency);
    for w in rows.windows(2) {
        rep.push(
            format!("abs_diff_L{}_below_L{}", w[1].layers, w[0].layers),
            w[1].abs_diff - w[0].abs_diff,
            None,
            "< 0",
            w[1].abs_diff < w[0].abs_diff,
        );
    }
    rep.artifacts.push(("ladder.csv".into(), ladder_csv(&rows)));
    Ok(rep)
}

fn debias(budget: Budget, rng: &mut Rng) -> Result<SuiteReport> {
    let sde = VpSde::default();
    let dist = DebiasedTimeDist::new(sde, DEFAULT_S_EPS)?;
    let mut rep = SuiteReport::new(Suite::Debias);

    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let s = 1e-6 + (sde.horizon - 1e-6) * i as f64 / 999.0;
        worst = worst.max((dist.inv_cdf(dist.cdf(s)?)? - s).abs());
    }
    rep.push("inverse_cdf_roundtrip_max_error", worst, None, "<= 1e-9", worst <= 1e-9);

    let n = budget.pick(100_000, 20_000);
    let (s, _) = TimeSampler::Debiased(dist).sample_times(n, rng);
    let ks = ks_distance(&s, |x| dist.cdf(x.clamp(0.0, sde.horizon)).expect("clamped"));
    let ks_tol = if budget == Budget::Full { 0.01 } else { 0.02 };
    rep.push("ks_distance", ks, None, format!("<= {ks_tol}"), ks <= ks_tol);

    let net = ScoreNet::init(&NetConfig::new(2), OutputKind::Score, sde, 5)?;
    let oracle = GaussianOracle::standard_normal(2, sde);
    let (deb, uni) = dsm_integral_estimates(&net, &oracle, &dist, n, rng)?;
    let diff = deb.mean - uni.mean;
    let se = deb.combined_stderr(&uni);
    rep.push(
        "debiased_minus_uniform_dsm_integral",
        diff,
        Some(se),
        "|diff| <= 3 combined stderr",
        diff.abs() <= 3.0 * se,
    );
    rep.push(
        "plateau_mass",
        dist.plateau_mass(),
        None,
        "informational",
        true,
    );
    rep.artifacts.push(("time_density.csv".into(), density_table(&dist, 201)));
    Ok(rep)
}

fn gap(budget: Budget, rng: &mut Rng) -> Result<SuiteReport> {
    let model = LinearSde::new(1, 1.0, 0.5, 1.0);
    let gen = model.to_generative();
    let n = budget.pick(100_000, 20_000);
    let steps = 2000;
    let x = [0.7];
    let log_p = model.logpdf(&x, model.horizon);
    let mut rep = SuiteReport::new(Suite::Gap);
    let zero = ZeroField { dim: 1 };
    let offset = model.optimal_drift().with_offset(vec![0.5]);
    let cases: [(&str, &dyn crate::field::VectorField); 2] = [("zero_drift", &zero), ("optimal_plus_offset", &offset)];
    for (name, a) in cases {
        let direct = variational_gap_oracle(a, &model, &x, n, steps, rng)?;
        let elbo = ct_elbo(&gen, a, &x, &ElboConfig::new(n, steps), rng)?;
        let diff = direct.mean - (log_p - elbo.mean);
        let se = direct.stderr.hypot(elbo.stderr);
        rep.push(
            format!("{name}/direct_minus_logp_minus_elbo"),
            diff,
            Some(se),
            "|diff| <= 3 combined stderr",
            diff.abs() <= 3.0 * se,
        );
    }
    Ok(rep)
}

fn lambda_equiv(budget: Budget, rng: &mut Rng) -> Result<SuiteReport> {
    let sde = VpSde::default();
    let oracle = reference_oracle(sde);
    let n = budget.pick(100_000, 10_000);
    let steps = budget.pick(1000, 200);
    let lambdas = [0.0, 0.5, 1.0];
    let mut moments = Vec::new();
    for &l in &lambdas {
        let p = LambdaSampler::new(&oracle, sde, l, steps)?.sample(n, rng)?;
        moments.push(p.mean_and_covariance());
    }
    let frob_tol = if budget == Budget::Full { 0.02 } else { 0.05 };
    let mut rep = SuiteReport::new(Suite::LambdaEquiv);
    for i in 0..lambdas.len() {
        for j in i + 1..lambdas.len() {
            let (mi, ci) = &moments[i];
            let (mj, cj) = &moments[j];
            for k in 0..2 {
                let se = ((ci[k * 2 + k] + cj[k * 2 + k]) / n as f64).sqrt();
                let diff = mi[k] - mj[k];
                rep.push(
                    format!("mean{k}_lambda{}_vs_{}", lambdas[i], lambdas[j]),
                    diff,
                    Some(se),
                    "|diff| <= 3 combined stderr",
                    diff.abs() <= 3.0 * se,
                );
            }
            let rf = relative_frobenius(ci, cj);
            rep.push(
                format!("cov_lambda{}_vs_{}", lambdas[i], lambdas[j]),
                rf,
                None,
                format!("relative Frobenius <= {frob_tol}"),
                rf <= frob_tol,
            );
        }
    }
    Ok(rep)
}

fn fk(budget: Budget, rng: &mut Rng) -> Result<SuiteReport> {
    let model = LinearSde::new(1, 1.0, 0.5, 1.0);
    let gen = model.to_generative();
    let n = budget.pick(100_000, 20_000);
    let mut rep = SuiteReport::new(Suite::Fk);
    for x in [0.0, 1.0, 2.0] {
        let est = fk_density(&gen, &[x], n, 1000, rng)?;
        let truth = model.density(&[x], model.horizon);
        rep.push_covers(format!("density_at_{x}"), est, truth, 3.0);
        if x == 0.0 {
            let rel = (est.mean - truth).abs() / truth;
            rep.push("relative_error_at_0", rel, None, "<= 0.02", rel <= 0.02);
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn quick_suites_pass() {
        let mut rng = seeded(1);
        for suite in [Suite::Identity, Suite::Debias, Suite::Gap, Suite::Fk] {
            let rep = run(suite, Budget::Quick, &mut rng).unwrap();
            assert!(rep.passed(), "{}", rep.to_text());
        }
    }

    #[test]
    fn identity_report_has_six_loss_rows() {
        let rep = identity(Budget::Quick, &mut seeded(2)).unwrap();
        let csv = &rep.artifacts[0].1;
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(rep.assertions.len(), 6);
    }
}
