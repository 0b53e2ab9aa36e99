//! CT-ELBO of the lambda-family generative model built from an imperfect
//! score; larger lambda loosens the bound.

use sde_elbo::elbo::{ode_log_likelihood, ElboConfig, PluginModel};
use sde_elbo::rng::seeded;
use sde_elbo::score_net::{NetConfig, OutputKind, ScoreNet};
use sde_elbo::vp_sde::{GaussianOracle, VpSde};

fn main() -> sde_elbo::error::Result<()> {
    let sde = VpSde::default();
    let oracle = GaussianOracle::standard_normal(2, sde);
    let net = ScoreNet::init(&NetConfig::new(2), OutputKind::Drift, sde, 5)?;
    let x = [0.3, -0.4];
    let cfg = ElboConfig::new(512, 200);
    for lambda in [0.0, 0.25, 0.5, 0.75] {
        let model = PluginModel::with_lambda(&net, Some(&oracle), sde, lambda)?;
        let est = model.ct_elbo(&x, &cfg, &mut seeded(5))?;
        println!("lambda {lambda:<4}: {:.4} +- {:.4}", est.mean, est.stderr);
    }
    let ode = ode_log_likelihood(&net, &sde, &x, &cfg, &mut seeded(5))?;
    println!("ODE log-likelihood: {:.4}", ode.mean);
    Ok(())
}
