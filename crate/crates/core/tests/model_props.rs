mod common;

use bllim::{
    forward_from_inverse, joint_gmm_params, model_dimension, predict, BlockStructure, ForwardParams, InverseParams,
    Predictor,
};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn theta_from_seed(seed: u64) -> InverseParams {
    let mut r = rng(seed);
    let k = r.gen_range(1..=3);
    let l = r.gen_range(1..=2);
    let d = r.gen_range(1..=10);
    random_theta(k, l, d, &mut r)
}

fn forward_log_joint(fwd: &ForwardParams, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let terms: Vec<f64> = fwd
        .components
        .iter()
        .map(|c| {
            c.weight.ln()
                + dense_log_density(x, &c.c_star, &c.gamma_star)
                + dense_log_density(y, &(&c.a_star * x + &c.b_star), &c.sigma_star)
        })
        .collect();
    log_sum_exp(&terms)
}

/// Free parameters counted one by one.
fn enumerate_parameters(k: usize, l: usize, d: usize, structure: &BlockStructure) -> usize {
    let mut count = k - 1;
    for cluster in structure.clusters() {
        let same = same_group(cluster);
        count += l + d * l + d;
        count += (0..l).flat_map(|i| (0..=i).map(move |j| (i, j))).count();
        for i in 0..d {
            for j in 0..=i {
                if same(i, j) {
                    count += 1;
                }
            }
        }
    }
    count
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn inverse_and_forward_joint_densities_agree(seed in any::<u64>()) {
        let theta = theta_from_seed(seed);
        let fwd = forward_from_inverse(&theta).unwrap();
        let mut r = rng(seed ^ 0xabc);
        for _ in 0..50 {
            let y = gaussian_vector(theta.l(), &mut r) * 2.0;
            let x = gaussian_vector(theta.d(), &mut r) * 2.0;
            let inv = inverse_log_joint(&theta, &y, &x);
            let fw = forward_log_joint(&fwd, &y, &x);
            prop_assert!((inv - fw).abs() < 1e-8, "inverse {inv} forward {fw}");
        }
    }

    #[test]
    fn gating_weights_are_a_distribution(seed in any::<u64>()) {
        let theta = theta_from_seed(seed);
        let fwd = forward_from_inverse(&theta).unwrap();
        let mut r = rng(seed ^ 1);
        for _ in 0..20 {
            let x = gaussian_vector(theta.d(), &mut r) * 5.0;
            let (_, w) = predict(&fwd, &x).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_prediction_is_affine(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = r.gen_range(1..=2);
        let d = r.gen_range(1..=10);
        let fwd = forward_from_inverse(&random_theta(1, l, d, &mut r)).unwrap();
        let x1 = gaussian_vector(d, &mut r);
        let x2 = gaussian_vector(d, &mut r);
        let mid = (&x1 + &x2) * 0.5;
        let p = |x: &DVector<f64>| predict(&fwd, x).unwrap().0;
        let gap = p(&x1) + p(&x2) - p(&mid) * 2.0;
        prop_assert!(gap.amax() < 1e-10);
        let c = &fwd.components[0];
        prop_assert!((p(&x1) - (&c.a_star * &x1 + &c.b_star)).amax() < 1e-10);
    }

    #[test]
    fn joint_covariances_are_positive_definite(seed in any::<u64>()) {
        let theta = theta_from_seed(seed);
        for (m, v) in joint_gmm_params(&theta).unwrap() {
            prop_assert_eq!(m.len(), theta.l() + theta.d());
            prop_assert_eq!(&v, &v.transpose());
            prop_assert!(v.clone().cholesky().is_some());
        }
    }

    #[test]
    fn batch_prediction_matches_single_rows(seed in any::<u64>()) {
        let theta = theta_from_seed(seed);
        let fwd = forward_from_inverse(&theta).unwrap();
        let mut r = rng(seed ^ 2);
        let x = gaussian_matrix(7, theta.d(), &mut r);
        let batch = Predictor::new(&fwd).unwrap().predict_rows(&x).unwrap();
        for i in 0..7 {
            let (y, w) = predict(&fwd, &x.row(i).transpose()).unwrap();
            prop_assert!((batch.y.row(i).transpose() - y).amax() < 1e-12);
            prop_assert!((batch.weights.row(i).transpose() - w).amax() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(config(50))]

    #[test]
    fn dimension_matches_enumeration(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = r.gen_range(1..=6);
        let l = r.gen_range(1..=4);
        let d = r.gen_range(1..=30);
        let parts = (0..k).map(|_| {
            let max = r.gen_range(1..=d);
            random_partition(d, max, &mut r)
        }).collect();
        let structure = BlockStructure::new(parts).unwrap();
        prop_assert_eq!(
            model_dimension(k, l, d, &structure).unwrap(),
            enumerate_parameters(k, l, d, &structure)
        );
    }
}

#[test]
fn joint_mean_stacks_response_then_covariates() {
    let theta = theta_from_seed(3);
    let fwd = forward_from_inverse(&theta).unwrap();
    for ((m, v), c) in joint_gmm_params(&theta).unwrap().iter().zip(&fwd.components) {
        let (l, d) = (theta.l(), theta.d());
        let my = &c.a_star * &c.c_star + &c.b_star;
        assert!((m.rows(0, l) - my).amax() < 1e-10);
        assert!((m.rows(l, d) - &c.c_star).amax() < 1e-10);
        let vxx: DMatrix<f64> = v.view((l, l), (d, d)).into();
        assert!((vxx - &c.gamma_star).amax() < 1e-10);
    }
}
