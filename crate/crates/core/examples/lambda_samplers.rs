//! Every member of the lambda family of reverse processes has the same
//! marginals; compare sample moments at a few lambdas.

use sde_elbo::rng::seeded;
use sde_elbo::sampler::LambdaSampler;
use sde_elbo::vp_sde::{GaussianOracle, VpSde};

fn main() -> sde_elbo::error::Result<()> {
    let sde = VpSde::default();
    let oracle = GaussianOracle::new(vec![0.5, -0.25], vec![1.5, 0.5, 0.5, 0.7], sde)?;
    println!("target mean {:?} cov {:?}", oracle.mean0(), oracle.cov0());
    for lambda in [0.0, 0.5, 0.9, 1.0] {
        let sampler = LambdaSampler::new(&oracle, sde, lambda, 500)?;
        let pts = sampler.sample(20_000, &mut seeded(4))?;
        let (m, c) = pts.mean_and_covariance();
        println!("lambda {lambda:<4} {:?}: mean {m:.3?} cov {c:.3?}", sampler.scheme());
    }
    Ok(())
}
