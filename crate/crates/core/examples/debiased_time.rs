//! Importance-sampled diffusion times: density table and the two estimates of
//! the time-integrated denoising loss.

use sde_elbo::rng::seeded;
use sde_elbo::score_net::{NetConfig, OutputKind, ScoreNet};
use sde_elbo::time_sampler::{density_table, dsm_integral_estimates, DebiasedTimeDist, DEFAULT_S_EPS};
use sde_elbo::vp_sde::{GaussianOracle, VpSde};

fn main() -> sde_elbo::error::Result<()> {
    let sde = VpSde::default();
    let dist = DebiasedTimeDist::new(sde, DEFAULT_S_EPS)?;
    print!("{}", density_table(&dist, 11));
    println!("normalizer {:.5}, plateau mass {:.4}", dist.normalizer(), dist.plateau_mass());
    let net = ScoreNet::init(&NetConfig::new(2), OutputKind::Score, sde, 6)?;
    let oracle = GaussianOracle::standard_normal(2, sde);
    let (deb, uni) = dsm_integral_estimates(&net, &oracle, &dist, 50_000, &mut seeded(6))?;
    println!("debiased {:.4} +- {:.4}", deb.mean, deb.stderr);
    println!("uniform  {:.4} +- {:.4}", uni.mean, uni.stderr);
    Ok(())
}
