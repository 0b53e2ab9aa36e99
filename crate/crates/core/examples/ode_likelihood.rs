//! Exact probability-flow ODE likelihood of a Gaussian, with exact and
//! Hutchinson divergence.

use sde_elbo::elbo::{ode_log_likelihood, ElboConfig};
use sde_elbo::field::DivMode;
use sde_elbo::rng::seeded;
use sde_elbo::vp_sde::{GaussianOracle, VpSde};

fn main() -> sde_elbo::error::Result<()> {
    let sde = VpSde::default();
    let oracle = GaussianOracle::new(vec![0.5, -0.25], vec![1.5, 0.5, 0.5, 0.7], sde)?;
    let x = [1.0, 0.0];
    let exact = ode_log_likelihood(&oracle, &sde, &x, &ElboConfig::new(1, 1000), &mut seeded(10))?;
    let cfg = ElboConfig::new(256, 1000).with_div(DivMode::Hutchinson { probes: 1 });
    let hutch = ode_log_likelihood(&oracle, &sde, &x, &cfg, &mut seeded(12))?;
    println!("exact divergence: {:.6}", exact.mean);
    println!("hutchinson:       {:.6} +- {:.6}", hutch.mean, hutch.stderr);
    Ok(())
}
