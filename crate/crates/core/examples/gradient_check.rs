//! Reverse-mode parameter gradients against central finite differences, and
//! Hutchinson divergence against the exact trace.

use sde_elbo::field::{hutchinson, VectorField};
use sde_elbo::rng::{normal_vec, seeded};
use sde_elbo::score_net::{NetConfig, OutputKind, ScoreNet};
use sde_elbo::vp_sde::VpSde;

fn main() -> sde_elbo::error::Result<()> {
    let net = ScoreNet::init(&NetConfig::new(2), OutputKind::Drift, VpSde::default(), 8)?;
    let mut rng = seeded(8);
    let (y, s) = (normal_vec(&mut rng, 2), 0.4);
    let cot = normal_vec(&mut rng, 2);
    let (grad, _) = net.vjp(&y, s, &cot)?;
    let f = |n: &ScoreNet| n.eval(&y, s).iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>();
    let h = 1e-5;
    for (name, shape, off) in net.param_groups() {
        let len: usize = shape.iter().product();
        let mut worst: f64 = 0.0;
        for k in off..off + len {
            let mut up = net.clone();
            up.params_mut()[k] += h;
            let mut dn = net.clone();
            dn.params_mut()[k] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            worst = worst.max((fd - grad.values[k]).abs());
        }
        println!("{name:>8} {shape:?}: max |fd - grad| = {worst:.2e}");
    }
    let (est, se) = hutchinson(&net, &y, s, 10_000, &mut rng);
    println!("divergence: exact {:.5}, hutchinson {est:.5} +- {se:.5}", net.divergence(&y, s));
    Ok(())
}
