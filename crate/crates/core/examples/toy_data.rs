//! Generate the toy datasets and write them as CSV and SVG under `out/`.

use sde_elbo::data::{gaussian, gaussian_mixture, swiss_roll};
use sde_elbo::svg::scatter;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sets = [
        swiss_roll(2000, 0.05, 0)?,
        gaussian_mixture(&[vec![2.0, 0.0], vec![-2.0, 0.0]], &[0.5, 0.5], 0.25, 2000, 0)?,
        gaussian(vec![0.5, -0.25], vec![1.5, 0.5, 0.5, 0.7], 2000, 0)?,
    ];
    std::fs::create_dir_all("out")?;
    for ds in &sets {
        std::fs::write(format!("out/{}.csv", ds.name), ds.to_csv())?;
        std::fs::write(format!("out/{}.svg", ds.name), scatter(&ds.points, &ds.name)?)?;
        let (m, c) = ds.points.mean_and_covariance();
        println!("{:<17} n={} mean {m:.3?} cov {c:.3?}", ds.name, ds.len());
    }
    Ok(())
}
