//! Discrete-time ELBO with L layers converging to the continuous-time bound.

use sde_elbo::dt_elbo::{consistency_ladder, ladder_csv, EncoderVariance};
use sde_elbo::elbo::{ElboConfig, PluginModel};
use sde_elbo::rng::seeded;
use sde_elbo::vp_sde::{GaussianOracle, VpSde};

fn main() -> sde_elbo::error::Result<()> {
    let sde = VpSde::default();
    let oracle = GaussianOracle::standard_normal(2, sde);
    let model = PluginModel::new(&oracle, sde);
    let cfg = ElboConfig::new(512, 500);
    for enc in [EncoderVariance::Literal, EncoderVariance::DecoderMatched] {
        let rows = consistency_ladder(&model, &[1.0, 1.0], &[4, 16, 64, 256], &cfg, enc, &mut seeded(3))?;
        println!("# encoder {enc:?}");
        print!("{}", ladder_csv(&rows));
    }
    Ok(())
}
