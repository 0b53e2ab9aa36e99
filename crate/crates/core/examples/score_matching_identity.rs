//! Explicit, implicit, sliced and denoising score-matching losses of a random
//! network differ by the expected constants.

use sde_elbo::losses::identity_report;
use sde_elbo::rng::seeded;
use sde_elbo::score_net::{NetConfig, OutputKind, ScoreNet};
use sde_elbo::vp_sde::{GaussianOracle, VpSde};

fn main() -> sde_elbo::error::Result<()> {
    let sde = VpSde::default();
    let oracle = GaussianOracle::new(vec![0.5, -0.25], vec![1.5, 0.5, 0.5, 0.7], sde)?;
    let net = ScoreNet::init(&NetConfig::new(2), OutputKind::Score, sde, 7)?;
    let report = identity_report(&net, &oracle, 20_000, 3.0, &mut seeded(2))?;
    print!("{}", report.to_csv());
    println!("all identities hold: {}", report.passed());
    Ok(())
}
