#![allow(dead_code)]

use bllim::{BlockStructure, Dataset, InverseComponent, InverseParams, Partition};
use nalgebra::{DMatrix, DVector};
use proptest::test_runner::{Config, RngSeed};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reproducible proptest configuration.
pub fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `W Wᵀ / p + 0.5 I`, comfortably positive definite.
pub fn random_spd(p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let w = gaussian_matrix(p, p, rng);
    let mut m = &w * w.transpose() / p as f64 + DMatrix::identity(p, p) * 0.5;
    m = (&m + m.transpose()) * 0.5;
    m
}

/// Random partition of `0..dim` with groups of size at most `max_group`.
pub fn random_partition(dim: usize, max_group: usize, rng: &mut impl Rng) -> Partition {
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.shuffle(rng);
    let mut groups = Vec::new();
    let mut rest = &idx[..];
    while !rest.is_empty() {
        let size = rng.gen_range(1..=max_group.min(rest.len()));
        groups.push(rest[..size].to_vec());
        rest = &rest[size..];
    }
    Partition::new(dim, groups).unwrap()
}

/// Block-diagonal SPD matrix supported on `partition`.
pub fn block_spd(partition: &Partition, rng: &mut impl Rng) -> DMatrix<f64> {
    let d = partition.dim();
    let mut m = DMatrix::zeros(d, d);
    for group in partition.groups() {
        let block = random_spd(group.len(), rng);
        for (a, &i) in group.iter().enumerate() {
            for (b, &j) in group.iter().enumerate() {
                m[(i, j)] = block[(a, b)];
            }
        }
    }
    m
}

pub fn random_theta(k: usize, l: usize, d: usize, rng: &mut impl Rng) -> InverseParams {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let partitions: Vec<Partition> = (0..k).map(|_| random_partition(d, d.max(1), rng)).collect();
    let components = raw
        .iter()
        .zip(&partitions)
        .map(|(w, p)| InverseComponent {
            weight: w / total,
            c: gaussian_vector(l, rng) * 2.0,
            gamma: random_spd(l, rng),
            a: gaussian_matrix(d, l, rng),
            b: gaussian_vector(d, rng),
            sigma: block_spd(p, rng),
        })
        .collect();
    InverseParams::new(components, BlockStructure::new(partitions).unwrap()).unwrap()
}

/// Dense log-density computed from nalgebra's Cholesky directly.
pub fn dense_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).unwrap();
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `ln Σ_k π_k φ_L(y; c_k, Γ_k) φ_D(x; A_k y + b_k, Σ_k)`.
pub fn inverse_log_joint(theta: &InverseParams, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let terms: Vec<f64> = theta
        .components
        .iter()
        .map(|c| {
            c.weight.ln()
                + dense_log_density(y, &c.c, &c.gamma)
                + dense_log_density(x, &(&c.a * y + &c.b), &c.sigma)
        })
        .collect();
    log_sum_exp(&terms)
}

/// Samples `n` rows from the inverse model; returns the data and the cluster labels.
pub fn sample(theta: &InverseParams, n: usize, rng: &mut impl Rng) -> (Dataset, Vec<usize>) {
    let (l, d) = (theta.l(), theta.d());
    let mut x = DMatrix::zeros(n, d);
    let mut y = DMatrix::zeros(n, l);
    let mut labels = Vec::with_capacity(n);
    let chols: Vec<_> = theta
        .components
        .iter()
        .map(|c| (c.gamma.clone().cholesky().unwrap().l(), c.sigma.clone().cholesky().unwrap().l()))
        .collect();
    for i in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = theta.k() - 1;
        for (j, c) in theta.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = j;
                break;
            }
        }
        let comp = &theta.components[k];
        let yi = &comp.c + &chols[k].0 * gaussian_vector(l, rng);
        let xi = &comp.a * &yi + &comp.b + &chols[k].1 * gaussian_vector(d, rng);
        y.set_row(i, &yi.transpose());
        x.set_row(i, &xi.transpose());
        labels.push(k);
    }
    (Dataset::new(x, y).unwrap(), labels)
}

/// True when `i` and `j` share a group.
pub fn same_group(p: &Partition) -> impl Fn(usize, usize) -> bool + '_ {
    let labels = p.labels();
    move |i, j| labels[i] == labels[j]
}
