//! For a linear generative SDE, the gap between log-likelihood and CT-ELBO
//! equals the expected KL accumulated by a suboptimal inference drift.

use sde_elbo::elbo::ElboConfig;
use sde_elbo::field::ZeroField;
use sde_elbo::generative::{ct_elbo, variational_gap_oracle, LinearSde};
use sde_elbo::rng::seeded;

fn main() -> sde_elbo::error::Result<()> {
    let model = LinearSde::new(1, 1.0, 0.5, 1.0);
    let gen = model.to_generative();
    let x = [0.7];
    let mut rng = seeded(9);
    println!("log p(x) = {:.5}", model.logpdf(&x, 1.0));
    for c in [0.0, 0.25, 0.5, 1.0] {
        let a = model.optimal_drift().with_offset(vec![c]);
        let gap = variational_gap_oracle(&a, &model, &x, 20_000, 1000, &mut rng)?;
        let elbo = ct_elbo(&gen, &a, &x, &ElboConfig::new(20_000, 1000), &mut rng)?;
        println!("offset {c:<4}: gap {:.5} +- {:.5}, ELBO {:.5}", gap.mean, gap.stderr, elbo.mean);
    }
    let zero = ZeroField { dim: 1 };
    let gap = variational_gap_oracle(&zero, &model, &x, 20_000, 1000, &mut rng)?;
    println!("a = 0     : gap {:.5} +- {:.5}", gap.mean, gap.stderr);
    Ok(())
}
