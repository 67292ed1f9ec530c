mod common;

use bllim::sim::{adjusted_rand_index, generate_plan_a, sample_plan_a_params, PlanASpec};
use bllim::{
    fit, fit_from, initialize, m_step, residual_covariance_full, BlockStructure, Dataset, EmConfig, InverseComponent,
    InverseParams, Partition, Responsibilities,
};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn plan_a(seed: u64, k: usize, d: usize, n: usize) -> (InverseParams, Dataset) {
    let theta = sample_plan_a_params(&PlanASpec {
        k,
        d,
        seed,
        ..PlanASpec::default()
    })
    .unwrap();
    let data = generate_plan_a(&theta, n, seed).unwrap().data;
    (theta, data)
}

fn assert_monotone(trace: &[f64]) {
    for w in trace.windows(2) {
        assert!(
            w[1] >= w[0] - 1e-8 * w[0].abs(),
            "log-likelihood decreased from {} to {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn likelihood_never_decreases() {
    for seed in 0..6 {
        let (theta, data) = plan_a(seed, 3, 12, 400);
        for structure in [theta.structure.clone(), BlockStructure::diagonal(3, 12)] {
            let f = fit(&data, 3, &structure, &EmConfig::default()).unwrap();
            assert_monotone(&f.loglik_trace);
        }
    }
}

#[test]
fn fits_are_bit_reproducible() {
    let (theta, data) = plan_a(11, 3, 10, 300);
    let config = EmConfig {
        seed: 4,
        ..EmConfig::default()
    };
    let a = fit(&data, 3, &theta.structure, &config).unwrap();
    let b = fit(&data, 3, &theta.structure, &config).unwrap();
    assert_eq!(a.loglik_trace, b.loglik_trace);
    assert_eq!(a.theta, b.theta);
}

#[test]
fn row_order_does_not_matter() {
    let (theta, data) = plan_a(5, 2, 8, 300);
    let mut perm: Vec<usize> = (0..data.n()).collect();
    perm.shuffle(&mut rng(99));
    let shuffled = data.select_rows(&perm);
    let config = EmConfig::default();
    let a = fit(&data, 2, &theta.structure, &config).unwrap();
    let b = fit(&shuffled, 2, &theta.structure, &config).unwrap();
    for (ca, cb) in a.theta.components.iter().zip(&b.theta.components) {
        assert!((ca.weight - cb.weight).abs() < 1e-10);
        assert!((&ca.c - &cb.c).amax() < 1e-10);
        assert!((&ca.gamma - &cb.gamma).amax() < 1e-10);
        assert!((&ca.a - &cb.a).amax() < 1e-10);
        assert!((&ca.b - &cb.b).amax() < 1e-10);
        assert!((&ca.sigma - &cb.sigma).amax() < 1e-10);
    }
    let ra = a.responsibilities.select_rows(&perm);
    assert!((ra.matrix() - b.responsibilities.matrix()).amax() < 1e-10);
}

#[test]
fn single_cluster_full_block_is_least_squares() {
    let mut r = rng(8);
    let theta = random_theta(1, 2, 5, &mut r);
    let (data, _) = sample(&theta, 500, &mut r);
    let f = fit(&data, 1, &BlockStructure::full(1, 5), &EmConfig::default()).unwrap();
    assert!(f.iterations >= 2);

    let n = data.n() as f64;
    let design = DMatrix::from_fn(data.n(), 3, |i, j| if j < 2 { data.y()[(i, j)] } else { 1.0 });
    let gram = design.transpose() * &design;
    let coef = gram.lu().solve(&(design.transpose() * data.x())).unwrap();
    let resid = data.x() - &design * &coef;
    let sigma = resid.transpose() * &resid / n;
    let mean_y = data.y().row_mean().transpose();
    let centred = DMatrix::from_fn(data.n(), 2, |i, j| data.y()[(i, j)] - mean_y[j]);
    let gamma = centred.transpose() * &centred / n;

    let c = &f.theta.components[0];
    assert!((&c.a - coef.rows(0, 2).transpose()).amax() < 1e-6);
    assert!((&c.b - coef.row(2).transpose()).amax() < 1e-6);
    assert!((&c.sigma - sigma).amax() < 1e-6);
    assert!((&c.c - mean_y).amax() < 1e-6);
    assert!((&c.gamma - gamma).amax() < 1e-6);
}

#[test]
fn planted_clusters_are_recovered() {
    let mut r = rng(21);
    let mut theta = random_theta(2, 1, 4, &mut r);
    theta.components[0].c = DVector::from_element(1, -6.0);
    theta.components[1].c = DVector::from_element(1, 6.0);
    let (data, labels) = sample(&theta, 600, &mut r);
    let f = fit(&data, 2, &theta.structure, &EmConfig::default()).unwrap();
    let ari = adjusted_rand_index(&f.responsibilities.hard_labels(), &labels);
    assert!(ari >= 0.95, "ARI {ari}");
}

#[test]
fn residual_covariance_of_independent_noise_is_near_diagonal() {
    let mut r = rng(3);
    let n = 10_000;
    let theta = InverseParams::new(
        vec![InverseComponent {
            weight: 1.0,
            c: DVector::zeros(1),
            gamma: DMatrix::identity(1, 1),
            a: gaussian_matrix(4, 1, &mut r),
            b: gaussian_vector(4, &mut r),
            sigma: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 2.0, 1.5])),
        }],
        BlockStructure::diagonal(1, 4),
    )
    .unwrap();
    let (data, _) = sample(&theta, n, &mut r);
    let ones = Responsibilities::new(DMatrix::from_element(n, 1, 1.0)).unwrap();
    let fitted = m_step(&data, &ones, &BlockStructure::full(1, 4)).unwrap();
    let s = residual_covariance_full(&data, &fitted, &ones, 0);
    assert_eq!(s, s.transpose());
    let tol = 5.0 / (n as f64).sqrt();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!(s[(i, j)].abs() < tol, "entry ({i},{j}) = {}", s[(i, j)]);
            }
        }
    }
}

#[test]
fn initialization_respects_seed_and_shape() {
    let (_, data) = plan_a(2, 3, 6, 200);
    let config = EmConfig::default();
    let a = initialize(&data, 3, &config).unwrap();
    assert_eq!(a, initialize(&data, 3, &config).unwrap());
    assert_eq!((a.n(), a.k()), (200, 3));
    for row in a.matrix().row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(config(40))]

    #[test]
    fn fitted_residual_covariance_stays_in_its_blocks(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.gen_range(2..=8);
        let truth = random_theta(2, 1, d, &mut r);
        let (data, _) = sample(&truth, 200, &mut r);
        let parts: Vec<Partition> = (0..2).map(|_| random_partition(d, 3, &mut r)).collect();
        let structure = BlockStructure::new(parts).unwrap();
        let config = EmConfig { max_iterations: 15, ..EmConfig::default() };
        if let Ok(f) = fit(&data, 2, &structure, &config) {
            for (k, comp) in f.theta.components.iter().enumerate() {
                let same = same_group(structure.cluster(k));
                for i in 0..d {
                    for j in 0..d {
                        if !same(i, j) {
                            prop_assert_eq!(comp.sigma[(i, j)], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn m_step_normalizes_weights(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = r.gen_range(1..=4);
        let l = r.gen_range(1..=3);
        let d = r.gen_range(1..=6);
        let n = 60;
        let data = Dataset::new(gaussian_matrix(n, d, &mut r), gaussian_matrix(n, l, &mut r)).unwrap();
        let mut raw = DMatrix::from_fn(n, k, |_, _| r.gen_range(0.05..1.0));
        for mut row in raw.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let resp = Responsibilities::new(raw).unwrap();
        let theta = m_step(&data, &resp, &BlockStructure::diagonal(k, d)).unwrap();
        let total: f64 = theta.components.iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(theta.components.iter().all(|c| c.c.len() == l && c.weight > 0.0));
    }

    #[test]
    fn warm_start_traces_are_monotone(seed in 0u64..1000) {
        let (theta, data) = plan_a(seed, 2, 6, 150);
        let start = initialize(&data, 2, &EmConfig::default()).unwrap();
        let f = fit_from(&data, &start, &theta.structure, &EmConfig::default());
        if let Ok(f) = f {
            for w in f.loglik_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
            }
        }
    }
}
