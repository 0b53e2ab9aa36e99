use proptest::prelude::*;

use sde_elbo::data::swiss_roll;
use sde_elbo::points::Points;
use sde_elbo::time_sampler::DebiasedTimeDist;
use sde_elbo::train::{adam_step, AdamState};
use sde_elbo::vp_sde::VpSde;

fn schedule() -> impl Strategy<Value = VpSde> {
    (0.01f64..1.0, 1.0f64..30.0, 0.5f64..2.0).prop_map(|(lo, span, t)| VpSde::new(lo, lo + span, t).unwrap())
}

proptest! {
    #[test]
    fn kernel_preserves_unit_variance(sde in schedule(), u in 0.0f64..1.0) {
        let s = u * sde.horizon;
        let m = sde.mean_coef_unchecked(s);
        let v = sde.variance_unchecked(s);
        prop_assert!((m * m + v - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn int_beta_is_increasing_and_invertible(sde in schedule(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (s0, s1) = (lo * sde.horizon, hi * sde.horizon);
        prop_assert!(sde.int_beta_unchecked(s0) <= sde.int_beta_unchecked(s1));
        let back = sde.int_beta_inverse(sde.int_beta_unchecked(s1));
        prop_assert!((back - s1).abs() < 1e-9 * sde.horizon.max(1.0));
    }

    #[test]
    fn debiased_cdf_round_trip(sde in schedule(), u in 0.0f64..1.0) {
        let dist = DebiasedTimeDist::new(sde, 1e-3 * sde.horizon).unwrap();
        let s = u * sde.horizon;
        let back = dist.inv_cdf(dist.cdf(s).unwrap()).unwrap();
        prop_assert!((back - s).abs() < 1e-9);
    }

    #[test]
    fn points_csv_round_trip(dim in 1usize..5, values in prop::collection::vec(-1e6f64..1e6, 0..40)) {
        let n = values.len() / dim;
        let pts = Points::new(dim, values[..n * dim].to_vec()).unwrap();
        prop_assert_eq!(Points::from_csv(&pts.to_csv()).unwrap(), pts);
    }

    #[test]
    fn adam_ignores_zero_gradients(params in prop::collection::vec(-10.0f64..10.0, 1..20), steps in 1usize..10) {
        let mut p = params.clone();
        let mut st = AdamState::new(p.len());
        let g = vec![0.0; p.len()];
        for _ in 0..steps {
            adam_step(&mut st, &mut p, &g, 1e-2).unwrap();
        }
        prop_assert_eq!(p, params);
    }

    #[test]
    fn adam_first_step_moves_by_lr(g in prop::collection::vec(1e-3f64..10.0, 1..10), lr in 1e-5f64..1e-1) {
        let mut p = vec![0.0; g.len()];
        let mut st = AdamState::new(p.len());
        adam_step(&mut st, &mut p, &g, lr).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            let expect = -lr * gi / (gi + 1e-8);
            prop_assert!((pi - expect).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn swiss_roll_depends_only_on_seed(seed in any::<u64>(), n in 0usize..200) {
        let a = swiss_roll(n, 0.05, seed).unwrap();
        let b = swiss_roll(n, 0.05, seed).unwrap();
        prop_assert_eq!(&a, &b);
        if n > 1 {
            prop_assert_ne!(a, swiss_roll(n, 0.05, seed.wrapping_add(1)).unwrap());
        }
    }
}
