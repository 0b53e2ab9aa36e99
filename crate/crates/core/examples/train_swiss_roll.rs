//! Train a score network on the Swiss roll and draw samples from it.
//!
//! `cargo run --release --example train_swiss_roll -- [iters]`

use std::path::Path;

use sde_elbo::data::swiss_roll;
use sde_elbo::rng::seeded;
use sde_elbo::sampler::LambdaSampler;
use sde_elbo::score_net::{NetConfig, ScoreNet};
use sde_elbo::svg::scatter;
use sde_elbo::train::{train, LossKind, TrainConfig};
use sde_elbo::vp_sde::VpSde;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iters = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5000);
    let sde = VpSde::default();
    let data = swiss_roll(20_000, 0.05, 0)?;
    let mut cfg = TrainConfig::new(LossKind::DsmWeightedUniform);
    cfg.iters = iters;
    cfg.lr = 1e-3;
    cfg.eval_every = (iters / 5).max(1);
    let mut net = ScoreNet::init(&NetConfig::new(2), cfg.parameterize.into(), sde, cfg.seed)?;
    let out = Path::new("out/swiss_roll_run");
    let report = train(&mut net, &data, &cfg, Some(out))?;
    for row in report.metrics.iter().filter(|r| r.eval_elbo_mean.is_some()) {
        println!("iter {:>6}: loss {:.4}, held-out ELBO {:.4}", row.iter, row.loss_mean, row.eval_elbo_mean.unwrap());
    }
    let samples = LambdaSampler::new(&net, sde, 0.0, 500)?.sample(2000, &mut seeded(1))?;
    std::fs::write(out.join("samples.svg"), scatter(&samples, "swiss roll samples")?)?;
    println!("wrote {}", out.display());
    Ok(())
}
