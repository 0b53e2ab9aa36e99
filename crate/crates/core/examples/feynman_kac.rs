//! Monte-Carlo marginal density of a linear SDE via the Feynman-Kac formula.

use sde_elbo::generative::{fk_density, LinearSde};
use sde_elbo::rng::seeded;

fn main() -> sde_elbo::error::Result<()> {
    let model = LinearSde::new(1, 1.0, 0.5, 1.0);
    let gen = model.to_generative();
    let mut rng = seeded(1);
    println!("x,estimate,stderr,exact");
    for x in [-2.0, -1.0, 0.0, 0.5, 1.0, 2.0] {
        let est = fk_density(&gen, &[x], 20_000, 500, &mut rng)?;
        println!("{x},{:.5},{:.5},{:.5}", est.mean, est.stderr, model.density(&[x], 1.0));
    }
    Ok(())
}
