use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use convexctrl::geometry::{
    canonical_dual, pairing, state_distance, w1_empirical, CostateVec, Ensemble, Layout, Mode,
    TangentVec,
};
use convexctrl::models::{
    LeaderFollowerModel, LeaderFollowerParams, Model, ReplicatorModel, ReplicatorParams,
};
use convexctrl::scenarios::{random_ensemble, random_state};

fn models() -> Vec<Box<dyn Model>> {
    vec![
        Box::new(LeaderFollowerModel::new(LeaderFollowerParams::default()).unwrap()),
        Box::new(ReplicatorModel::new(ReplicatorParams::default()).unwrap()),
    ]
}

fn label_sum(layout: &Layout, v: &DVector<f64>) -> f64 {
    v.as_slice()[layout.d..].iter().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_dual_is_mean_zero(raw in prop::collection::vec(-10.0f64..10.0, 1..9)) {
        let p = canonical_dual(&raw).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        prop_assert!(mean.abs() < 1e-12);
        let q = canonical_dual(&raw.iter().map(|v| v + 3.5).collect::<Vec<_>>()).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pairing_ignores_label_shifts(
        px in prop::collection::vec(-5.0f64..5.0, 2),
        plam in prop::collection::vec(-5.0f64..5.0, 3),
        dx in prop::collection::vec(-5.0f64..5.0, 2),
        dlam in prop::collection::vec(-5.0f64..5.0, 3),
        shift in -10.0f64..10.0,
    ) {
        let layout = Layout::simplex(2, 3);
        let mean = dlam.iter().sum::<f64>() / 3.0;
        let v = TangentVec { dx, dlam: dlam.iter().map(|l| l - mean).collect() };
        let p = CostateVec { px: px.clone(), plam: plam.clone() };
        let q = CostateVec { px, plam: plam.iter().map(|l| l + shift).collect() };
        let a = pairing(&layout, &p, &v).unwrap();
        let b = pairing(&layout, &q, &v).unwrap();
        prop_assert!((a - b).abs() <= 1e-11 * (1.0 + a.abs()));
    }

    #[test]
    fn w1_is_symmetric_and_permutation_invariant(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::density(1, 4, 1e-3, 10.0);
        let a = random_ensemble(&layout, n, &mut rng, 2.0);
        let b = random_ensemble(&layout, n, &mut rng, 2.0);
        let ab = w1_empirical(&a, &b).unwrap();
        prop_assert_eq!(ab, w1_empirical(&b, &a).unwrap());
        let mut rotated = b.clone();
        rotated.particles.rotate_left(n / 2);
        prop_assert!((ab - w1_empirical(&a, &rotated).unwrap()).abs() < 1e-12);
        let bound = a.particles.iter().zip(&b.particles)
            .map(|(p, q)| state_distance(&layout, p, q)).sum::<f64>() / n as f64;
        prop_assert!(ab <= bound + 1e-12);
    }

    #[test]
    fn velocities_are_tangent(seed in any::<u64>(), u0 in -1.0f64..1.0, u1 in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for model in models() {
            let layout = model.layout();
            let mu = random_ensemble(&layout, 6, &mut rng, 2.0);
            let u = DVector::from_vec(vec![u0, u1][..model.control_dim()].to_vec());
            for c in &mu.particles {
                let v = model.velocity(0.3, &mu, c, &u);
                prop_assert!(label_sum(&layout, &v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn velocity_depends_on_the_measure_only(seed in any::<u64>(), shift in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for model in models() {
            let layout = model.layout();
            let mu = random_ensemble(&layout, 6, &mut rng, 2.0);
            let mut permuted = mu.clone();
            permuted.particles.rotate_left(shift);
            let u = DVector::from_element(model.control_dim(), 0.3);
            let c = random_state(&layout, &mut rng, 2.0);
            let a = model.velocity(0.0, &mu, &c, &u);
            let b = model.velocity(0.0, &permuted, &c, &u);
            prop_assert!((a - b).amax() < 1e-12);
            prop_assert!((model.terminal(&mu) - model.terminal(&permuted)).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_is_lipschitz_on_bounded_sets(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for model in models() {
            let layout = model.layout();
            let mu = random_ensemble(&layout, 6, &mut rng, 2.0);
            let u = DVector::from_element(model.control_dim(), 0.5);
            let c1 = random_state(&layout, &mut rng, 2.0);
            let c2 = random_state(&layout, &mut rng, 2.0);
            let dv = (model.velocity(0.0, &mu, &c1, &u) - model.velocity(0.0, &mu, &c2, &u)).norm();
            let dc = (c1.to_flat() - c2.to_flat()).norm();
            // Jacobian norms stay far below this on the sampled region.
            let bound = match layout.mode { Mode::Simplex => 50.0, Mode::Density { .. } => 500.0 };
            prop_assert!(dv <= bound * dc + 1e-12, "{dv} > {bound} * {dc}");
            let j = model.state_jacobian(0.0, &mu, &c1, &u);
            let g = model.mu_gradient(0.0, &mu, &c1, &u, &c2);
            prop_assert!(j.iter().chain(g.iter()).all(|v| v.is_finite() && v.abs() < bound));
        }
    }
}

#[test]
fn ensembles_reject_bad_dimensions() {
    let layout = Layout::simplex(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut c = random_state(&layout, &mut rng, 1.0);
    c.lam.push(0.0);
    assert!(Ensemble::new(layout, vec![c]).is_err());
    assert!(Ensemble::new(layout, vec![]).is_err());
}
