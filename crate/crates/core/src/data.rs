//! Deterministic toy datasets.

use std::f64::consts::PI;

use rand::distr::{weighted::WeightedIndex, Distribution};

use crate::error::{check_dim, Error, Result};
use crate::points::Points;
use crate::rng::{fill_normal, seeded, uniform};
use crate::vp_sde::{GaussianOracle, VpSde};

/// Fraction of each dataset held out for evaluation (the trailing rows).
pub const HOLDOUT_FRACTION: f64 = 0.1;

/// A generated point set. Stored points relate to the generator's raw output
/// by `raw = points * scale + shift` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub points: Points,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Dataset {
    fn raw(name: &str, seed: u64, points: Points) -> Self {
        let d = points.dim();
        Self {
            name: name.into(),
            seed,
            points,
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Rescales every coordinate to zero mean and unit (population) standard
    /// deviation.
    fn standardize(mut self) -> Self {
        let (d, n) = (self.points.dim(), self.points.len());
        if n == 0 {
            return self;
        }
        let mut mean = vec![0.0; d];
        for r in self.points.rows() {
            for j in 0..d {
                mean[j] += r[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in self.points.rows() {
            for j in 0..d {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(f64::MIN_POSITIVE)).collect();
        let data: Vec<f64> = self
            .points
            .as_slice()
            .chunks_exact(d)
            .flat_map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect::<Vec<_>>())
            .collect();
        self.points = Points::new(d, data).expect("same shape");
        self.shift = mean;
        self.scale = std;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    /// `(train, holdout)` with the last `floor(n / 10)` rows held out.
    pub fn split_holdout(&self) -> (Points, Points) {
        let n = self.len();
        let n_hold = (n as f64 * HOLDOUT_FRACTION).floor() as usize;
        (self.points.slice_rows(0, n - n_hold), self.points.slice_rows(n - n_hold, n))
    }

    /// CSV whose first line is a `#` comment with name, seed, n, shift and
    /// scale.
    pub fn to_csv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        format!(
            "# name={} seed={} n={} shift={} scale={}\n{}",
            self.name,
            self.seed,
            self.len(),
            join(&self.shift),
            join(&self.scale),
            self.points.to_csv()
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or_default();
        let meta = first
            .strip_prefix('#')
            .ok_or_else(|| Error::Parse("dataset CSV must start with a '#' metadata line".into()))?;
        let mut name = None;
        let mut seed = None;
        let mut n = None;
        let mut shift = None;
        let mut scale = None;
        let floats = |v: &str| -> Result<Vec<f64>> {
            v.split(';')
                .map(|x| x.parse().map_err(|_| Error::Parse(format!("bad number {x:?} in metadata"))))
                .collect()
        };
        for kv in meta.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad metadata field {kv:?}")))?;
            match k {
                "name" => name = Some(v.to_string()),
                "seed" => seed = Some(v.parse().map_err(|_| Error::Parse(format!("bad seed {v:?}")))?),
                "n" => n = Some(v.parse::<usize>().map_err(|_| Error::Parse(format!("bad n {v:?}")))?),
                "shift" => shift = Some(floats(v)?),
                "scale" => scale = Some(floats(v)?),
                _ => return Err(Error::Parse(format!("unknown metadata key {k:?}"))),
            }
        }
        let missing = |k: &str| Error::Parse(format!("metadata is missing {k}"));
        let points = Points::from_csv(text)?;
        let ds = Self {
            name: name.ok_or_else(|| missing("name"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            shift: shift.ok_or_else(|| missing("shift"))?,
            scale: scale.ok_or_else(|| missing("scale"))?,
            points,
        };
        if Some(ds.len()) != n {
            return Err(Error::Parse(format!("metadata says n={n:?}, found {} rows", ds.len())));
        }
        check_dim(ds.dim(), ds.shift.len())?;
        check_dim(ds.dim(), ds.scale.len())?;
        Ok(ds)
    }
}

/// Noiseless Swiss-roll curve point at parameter `u` in `[0, 1]`.
pub fn swiss_roll_curve(u: f64) -> [f64; 2] {
    let t = 1.5 * PI * (1.0 + 2.0 * u);
    [t * t.cos() / (4.5 * PI), t * t.sin() / (4.5 * PI)]
}

/// Standardized 2-D Swiss roll with isotropic Gaussian noise.
pub fn swiss_roll(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if noise_std.is_nan() || noise_std < 0.0 {
        return Err(Error::InvalidParameter(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut xi = [0.0; 2];
    for _ in 0..n {
        let p = swiss_roll_curve(uniform(&mut rng));
        fill_normal(&mut rng, &mut xi);
        data.push(p[0] + noise_std * xi[0]);
        data.push(p[1] + noise_std * xi[1]);
    }
    Ok(Dataset::raw("swiss_roll", seed, Points::new(2, data)?).standardize())
}

/// Mixture of isotropic Gaussians `N(center_k, cov_scale I)`; points are not
/// rescaled. Also returns each point's component.
pub fn gaussian_mixture_labeled(
    centers: &[Vec<f64>],
    weights: &[f64],
    cov_scale: f64,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    if centers.is_empty() || centers.len() != weights.len() {
        return Err(Error::InvalidParameter("need one weight per center and at least one center".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("weights must be non-negative and sum to 1, got {weights:?}")));
    }
    if !(cov_scale.is_finite() && cov_scale >= 0.0) {
        return Err(Error::InvalidParameter(format!("cov_scale must be >= 0, got {cov_scale}")));
    }
    let d = centers[0].len();
    for c in centers {
        check_dim(d, c.len())?;
    }
    let pick = WeightedIndex::new(weights).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = seeded(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut xi = vec![0.0; d];
    let sd = cov_scale.sqrt();
    for _ in 0..n {
        let k = pick.sample(&mut rng);
        fill_normal(&mut rng, &mut xi);
        data.extend(centers[k].iter().zip(&xi).map(|(c, e)| c + sd * e));
        labels.push(k);
    }
    Ok((Dataset::raw("gaussian_mixture", seed, Points::new(d, data)?), labels))
}

pub fn gaussian_mixture(centers: &[Vec<f64>], weights: &[f64], cov_scale: f64, n: usize, seed: u64) -> Result<Dataset> {
    Ok(gaussian_mixture_labeled(centers, weights, cov_scale, n, seed)?.0)
}

/// Samples from `N(mean, cov)` (row-major covariance); points are not rescaled.
pub fn gaussian(mean: Vec<f64>, cov: Vec<f64>, n: usize, seed: u64) -> Result<Dataset> {
    let oracle = GaussianOracle::new(mean, cov, VpSde::default())?;
    let points = oracle.sample_data(n, &mut seeded(seed));
    Ok(Dataset::raw("gaussian", seed, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swiss_roll_is_standardized_and_reproducible() {
        let a = swiss_roll(5000, 0.05, 3).unwrap();
        let b = swiss_roll(5000, 0.05, 3).unwrap();
        assert_eq!(a, b);
        let (m, c) = a.points.mean_and_covariance();
        let n = a.len() as f64;
        for j in 0..2 {
            assert!(m[j].abs() < 1e-9);
            // sample covariance uses n - 1
            assert!((c[j * 2 + j] * (n - 1.0) / n - 1.0).abs() < 1e-9);
        }
        assert!(swiss_roll(0, 0.1, 1).unwrap().is_empty());
    }

    #[test]
    fn noiseless_radius_grows_with_angle() {
        let radii: Vec<f64> = (0..=200)
            .map(|i| {
                let p = swiss_roll_curve(i as f64 / 200.0);
                p[0].hypot(p[1])
            })
            .collect();
        assert!(radii.windows(2).all(|w| w[1] > w[0]));
        assert!((radii[200] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_center_mixture_is_gaussian() {
        let ds = gaussian_mixture(&[vec![1.0, -2.0]], &[1.0], 0.5, 20_000, 4).unwrap();
        let (m, c) = ds.points.mean_and_covariance();
        let se = (0.5 / 20_000f64).sqrt();
        assert!((m[0] - 1.0).abs() < 3.0 * se && (m[1] + 2.0).abs() < 3.0 * se);
        // sample variance stderr ~ var sqrt(2/n)
        let vse = 0.5 * (2.0 / 20_000f64).sqrt();
        assert!((c[0] - 0.5).abs() < 3.0 * vse && (c[3] - 0.5).abs() < 3.0 * vse);
    }

    #[test]
    fn mixture_symmetry_and_proportions() {
        let n = 20_000;
        let (ds, labels) =
            gaussian_mixture_labeled(&[vec![2.0, 0.0], vec![-2.0, 0.0]], &[0.5, 0.5], 0.25, n, 8).unwrap();
        let (m, c) = ds.points.mean_and_covariance();
        assert!(m[0].abs() < 3.0 * (c[0] / n as f64).sqrt());
        let (_, labels3) =
            gaussian_mixture_labeled(&[vec![0.0], vec![1.0], vec![2.0]], &[0.2, 0.3, 0.5], 0.1, n, 9).unwrap();
        for (k, w) in [0.2, 0.3, 0.5].iter().enumerate() {
            let p = labels3.iter().filter(|&&l| l == k).count() as f64 / n as f64;
            assert!((p - w).abs() < 3.0 * (w * (1.0 - w) / n as f64).sqrt(), "component {k}: {p}");
        }
        assert_eq!(labels.len(), n);
        assert!(gaussian_mixture(&[vec![0.0]], &[0.9], 1.0, 10, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_holdout() {
        let ds = swiss_roll(101, 0.1, 7).unwrap();
        let back = Dataset::from_csv(&ds.to_csv()).unwrap();
        assert_eq!(back, ds);
        let (train, hold) = ds.split_holdout();
        assert_eq!((train.len(), hold.len()), (91, 10));
        assert_eq!(hold.row(9), ds.points.row(100));
    }
}
