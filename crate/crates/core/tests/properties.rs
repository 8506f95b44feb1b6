use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

use preobs_core::ltv::{sample_measurements, simulate};
use preobs_core::manifold::imu::{imu_preintegrate, ImuBias, PreintMethod};
use preobs_core::manifold::kinematics::simulate_rigid_body;
use preobs_core::observer::run_observer;
use preobs_core::pebo::{build_regressor, estimate_theta, reconstruct_state, run_extension};
use preobs_core::preint::{forgetting_weights, preintegrate_segment};
use preobs_core::so3::{exp, log};
use preobs_core::verify::{random_ltv_case, random_rigid_body};
use preobs_core::TimeGrid;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn segments_compose(seed in 0u64..10_000, n in 1usize..5, split in 1usize..199) {
        let grid = TimeGrid::uniform(0.0, 1e-2, 200, 200).unwrap();
        let case = random_ltv_case(seed, n, &grid).unwrap();
        let whole = preintegrate_segment(&case.model, &case.u, 0, 0, 200).unwrap();
        let first = preintegrate_segment(&case.model, &case.u, 0, 0, split).unwrap();
        let second = preintegrate_segment(&case.model, &case.u, 1, split, 200).unwrap();
        let f = &second.f * &first.f;
        let v = &second.f * &first.v + &second.v;
        prop_assert!((&f - &whole.f).norm() <= 1e-9 * (1.0 + whole.f.norm()));
        prop_assert!((&v - &whole.v).norm() <= 1e-9 * (1.0 + whole.v.norm()));
    }

    #[test]
    fn segment_maps_true_state(seed in 0u64..10_000, n in 1usize..5) {
        let grid = TimeGrid::uniform(0.0, 1e-2, 200, 50).unwrap();
        let case = random_ltv_case(seed, n, &grid).unwrap();
        let truth = simulate(&case.model, &case.x0, &case.u).unwrap();
        for (k, (a, b)) in grid.intervals().enumerate() {
            let seg = preintegrate_segment(&case.model, &case.u, k, a, b).unwrap();
            let x = seg.apply(&truth.values[a]);
            prop_assert!((&x - &truth.values[b]).norm() <= 1e-9 * (1.0 + truth.values[b].norm()));
        }
    }

    #[test]
    fn pebo_recovers_state_for_any_reference(seed in 0u64..10_000, n in 1usize..4, shift in -5.0f64..5.0) {
        let grid = TimeGrid::uniform(0.0, 1e-2, 300, 30).unwrap();
        let case = random_ltv_case(seed, n, &grid).unwrap();
        let truth = simulate(&case.model, &case.x0, &case.u).unwrap();
        let p = case.model.p;
        let meas = sample_measurements(&case.model, &truth, &case.u, &DMatrix::zeros(case.u.dim(), case.u.dim()), &DMatrix::zeros(p, p), 0).unwrap();
        let xi0 = DVector::from_element(n, shift);
        let ext = run_extension(&case.model, &meas.u, &xi0).unwrap();
        let reg = build_regressor(&meas, &ext, &case.model).unwrap();
        let theta = estimate_theta(&reg, &vec![1.0; reg.len()]).unwrap();
        for (est, x) in reconstruct_state(&ext, &theta).iter().zip(truth.at_keyframes()) {
            prop_assert!((est - &x).norm() <= 1e-6 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn observer_covariance_stays_symmetric_psd(seed in 0u64..10_000, n in 1usize..4, p0 in 0.1f64..100.0) {
        let grid = TimeGrid::uniform(0.0, 1e-2, 200, 20).unwrap();
        let case = random_ltv_case(seed, n, &grid).unwrap();
        let truth = simulate(&case.model, &case.x0, &case.u).unwrap();
        let p = case.model.p;
        let m = case.u.dim();
        let meas = sample_measurements(&case.model, &truth, &case.u, &DMatrix::zeros(m, m), &DMatrix::zeros(p, p), 0).unwrap();
        let eye = DMatrix::<f64>::identity(n, n);
        let run = run_observer(&case.model, &case.u, &meas, &DVector::zeros(n), &(&eye * p0), &(&eye * 1e-4), &(DMatrix::identity(p, p) * 1e-2), None).unwrap();
        for state in &run.states {
            let cov = &state.p;
            prop_assert!((cov - cov.transpose()).norm() <= 1e-10 * (1.0 + cov.norm()));
            let min = cov.clone().symmetric_eigenvalues().min();
            prop_assert!(min >= -1e-10 * (1.0 + cov.norm()));
        }
    }

    #[test]
    fn exp_log_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, scale in 0.0f64..3.0) {
        let w = Vector3::new(x, y, z);
        let w = if w.norm() > 0.0 { w * (scale / w.norm()) } else { w };
        let r = exp(&w);
        prop_assert!((log(&r).unwrap() - w).norm() <= 1e-9);
        prop_assert!((r.matrix().transpose() * r.matrix() - nalgebra::Matrix3::identity()).norm() <= 1e-12);
        prop_assert!((r * exp(&-w)).angle_to(&preobs_core::Rotation::identity()) <= 1e-12);
    }

    #[test]
    fn imu_increments_compose(seed in 0u64..10_000, split in 1usize..99) {
        let grid = TimeGrid::uniform(0.0, 1e-2, 100, 100).unwrap();
        let truth = simulate_rigid_body(&random_rigid_body(seed), &grid).unwrap();
        let bias = ImuBias::default();
        let m = PreintMethod::ExactSubstep;
        let whole = imu_preintegrate(&truth.imu, &bias, 0, 0, 100, m).unwrap();
        let a = imu_preintegrate(&truth.imu, &bias, 0, 0, split, m).unwrap();
        let b = imu_preintegrate(&truth.imu, &bias, 1, split, 100, m).unwrap();
        let ra = a.delta_r.matrix();
        prop_assert!((a.delta_r * b.delta_r).angle_to(&whole.delta_r) <= 1e-9);
        prop_assert!((a.delta_v + ra * b.delta_v - whole.delta_v).norm() <= 1e-9);
        let p = a.delta_p + a.delta_v * b.dt() + ra * b.delta_p;
        prop_assert!((p - whole.delta_p).norm() <= 1e-9);
    }

    #[test]
    fn forgetting_weights_increase_to_newest(n in 1usize..50, lambda in 0.05f64..1.0) {
        let w = forgetting_weights(n, lambda);
        prop_assert_eq!(w.len(), n);
        prop_assert!(w.iter().all(|&g| g > 0.0 && g <= 1.0));
        prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }
}
