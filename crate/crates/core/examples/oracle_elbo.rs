//! CT-ELBO of an exact Gaussian score against the closed-form log-density.

use sde_elbo::elbo::{ElboConfig, PluginModel};
use sde_elbo::rng::seeded;
use sde_elbo::vp_sde::{GaussianOracle, VpSde};

fn main() -> sde_elbo::error::Result<()> {
    let sde = VpSde::default();
    let oracle = GaussianOracle::standard_normal(2, sde);
    let model = PluginModel::new(&oracle, sde);
    let x = [1.0, 1.0];
    let est = model.ct_elbo(&x, &ElboConfig::new(1024, 500), &mut seeded(0))?;
    let truth = -(1.0 + std::f64::consts::TAU.ln());
    println!("CT-ELBO   {:.5} +- {:.5}", est.mean, est.stderr);
    println!("log p(x)  {truth:.5}");
    println!("terms     {:?}", est.terms);
    Ok(())
}
