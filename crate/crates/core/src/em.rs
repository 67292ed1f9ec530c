//! EM estimation of the inverse-regression mixture for a fixed number of
//! clusters and a fixed block structure.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BllimError, Result};
use crate::kmeans::kmeans;
use crate::linalg::{factor_with_ridge, log_sum_exp, symmetrize};
use crate::model::{model_dimension, Dataset, InverseComponent, InverseParams};
use crate::structure::BlockStructure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the last log-likelihood gain is at most this fraction of the
    /// total log-likelihood range seen so far.
    pub tolerance: f64,
    /// k-means restarts for the initial clustering.
    pub restarts: usize,
    /// Ridge added to non-SPD covariance blocks, relative to their mean diagonal.
    pub ridge: f64,
    /// Minimum responsibility mass per cluster; `None` means `L + 1`.
    pub min_mass: Option<f64>,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 200,
            tolerance: 1e-3,
            restarts: 5,
            ridge: 1e-8,
            min_mass: None,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.tolerance > 0.0
            && self.restarts > 0
            && self.ridge > 0.0
            && self.min_mass.is_none_or(|m| m > 0.0);
        if ok {
            Ok(())
        } else {
            Err(BllimError::Validation("EM settings must all be positive".into()))
        }
    }
}

/// n × K posterior cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(DMatrix<f64>);

impl Responsibilities {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        for (i, row) in r.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-10 {
                return Err(BllimError::Validation(format!(
                    "responsibility row {} is not a probability vector",
                    i + 1
                )));
            }
        }
        Ok(Responsibilities(r))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.0.column_iter().map(|c| c.sum()).collect()
    }

    /// Most probable cluster of every observation (first index on ties).
    pub fn hard_labels(&self) -> Vec<usize> {
        self.0
            .row_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Responsibilities {
        Responsibilities(self.0.select_rows(rows.iter()))
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: InverseParams,
    /// Posterior under `theta`.
    pub responsibilities: Responsibilities,
    /// Joint log-likelihood after every E-step.
    pub loglik_trace: Vec<f64>,
    pub delta: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("a fit runs at least one E-step")
    }
}

/// Column-standardized `[y, x]` rows.
fn standardized_rows(data: &Dataset) -> Vec<Vec<f64>> {
    let n = data.n();
    let cols: Vec<Vec<f64>> = data
        .y()
        .column_iter()
        .chain(data.x().column_iter())
        .map(|col| {
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            col.iter()
                .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
                .collect()
        })
        .collect();
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

/// Soft initial responsibilities from k-means on the standardized joint data:
/// 0.9 on the assigned cluster, 0.1 spread over the others.
pub fn initialize(data: &Dataset, k: usize, config: &EmConfig) -> Result<Responsibilities> {
    if k == 0 {
        return Err(BllimError::Validation("number of clusters must be positive".into()));
    }
    let required = k * (data.l() + 1);
    if data.n() < required {
        return Err(BllimError::Infeasible {
            n: data.n(),
            required,
        });
    }
    if k == 1 {
        return Ok(Responsibilities(DMatrix::from_element(data.n(), 1, 1.0)));
    }
    let labels = kmeans(&standardized_rows(data), k, config.restarts, config.seed);
    let other = 0.1 / (k - 1) as f64;
    Ok(Responsibilities(DMatrix::from_fn(data.n(), k, |i, j| {
        if labels[i] == j {
            0.9
        } else {
            other
        }
    })))
}

/// Posterior responsibilities under `theta` and the joint log-likelihood
/// `Σ_i ln Σ_k π_k φ_L(y_i; c_k, Γ_k) φ_D(x_i; A_k y_i + b_k, Σ_k)`.
pub fn e_step(data: &Dataset, theta: &InverseParams) -> Result<(Responsibilities, f64)> {
    let (gate, cond) = theta.log_density_terms(data)?;
    let joint = gate + cond;
    let mut r = DMatrix::zeros(joint.nrows(), joint.ncols());
    let mut loglik = 0.0;
    for i in 0..joint.nrows() {
        let row: Vec<f64> = joint.row(i).iter().copied().collect();
        let norm = log_sum_exp(&row);
        loglik += norm;
        for (j, v) in row.iter().enumerate() {
            r[(i, j)] = (v - norm).exp();
        }
    }
    Ok((Responsibilities(r), loglik))
}

/// M-step with default settings.
pub fn m_step(data: &Dataset, r: &Responsibilities, structure: &BlockStructure) -> Result<InverseParams> {
    m_step_with(data, r, structure, &EmConfig::default())
}

/// Closed-form maximizer of the expected joint log-likelihood given `r`,
/// with every `Σ_k` restricted to the blocks of `structure`.
pub fn m_step_with(
    data: &Dataset,
    r: &Responsibilities,
    structure: &BlockStructure,
    config: &EmConfig,
) -> Result<InverseParams> {
    let (n, l, d) = (data.n(), data.l(), data.d());
    if r.n() != n || structure.k() != r.k() || structure.dim() != d {
        return Err(BllimError::Dimension(format!(
            "responsibilities {}x{}, structure for {} clusters of dimension {}, data n={} D={}",
            r.n(),
            r.k(),
            structure.k(),
            structure.dim(),
            n,
            d
        )));
    }
    let min_mass = config.min_mass.unwrap_or((l + 1) as f64);
    let components = (0..r.k())
        .map(|k| {
            let w = r.matrix().column(k);
            let mass: f64 = w.sum();
            let partition = structure.cluster(k);
            // each block needs more weighted points than its size plus the L+1 regression terms
            let required = min_mass.max((partition.largest_group() + l + 1) as f64);
            if !(mass >= required) {
                return Err(BllimError::DegenerateCluster {
                    iteration: 0,
                    cluster: k,
                    mass,
                    required,
                });
            }
            let c: DVector<f64> = data.y().transpose() * w / mass;
            let xbar: DVector<f64> = data.x().transpose() * w / mass;
            let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
            let mut yw = data.y().clone();
            for (j, mut col) in yw.column_iter_mut().enumerate() {
                for (v, s) in col.iter_mut().zip(&sqrt_w) {
                    *v = (*v - c[j]) * s;
                }
            }
            let mut xw = data.x().clone();
            for (j, mut col) in xw.column_iter_mut().enumerate() {
                for (v, s) in col.iter_mut().zip(&sqrt_w) {
                    *v = (*v - xbar[j]) * s;
                }
            }
            let mut gamma = yw.tr_mul(&yw) / mass;
            symmetrize(&mut gamma);
            let (gamma_factor, gamma) =
                factor_with_ridge(&gamma, config.ridge, &format!("cluster {}: response covariance", k + 1))?;
            let sxy = xw.tr_mul(&yw) / mass;
            let a = gamma_factor.solve(&sxy.transpose()).transpose();
            let b = &xbar - &a * &c;
            let ew = xw - yw * a.transpose();
            let mut sigma = DMatrix::zeros(d, d);
            for (g, idx) in partition.groups().iter().enumerate() {
                let block = if idx.len() == 1 {
                    DMatrix::from_element(1, 1, ew.column(idx[0]).norm_squared() / mass)
                } else {
                    let sub = ew.select_columns(idx.iter());
                    let mut s = sub.transpose() * &sub / mass;
                    symmetrize(&mut s);
                    s
                };
                let (_, block) = factor_with_ridge(
                    &block,
                    config.ridge,
                    &format!("cluster {}: residual covariance block {}", k + 1, g + 1),
                )?;
                for (r_, &i) in idx.iter().enumerate() {
                    for (c_, &j) in idx.iter().enumerate() {
                        sigma[(i, j)] = block[(r_, c_)];
                    }
                }
            }
            Ok(InverseComponent {
                weight: mass / n as f64,
                c,
                gamma,
                a,
                b,
                sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut theta = InverseParams {
        components,
        structure: structure.clone(),
    };
    // masses are column sums of a row-stochastic matrix; renormalize away rounding
    let total: f64 = theta.components.iter().map(|c| c.weight).sum();
    for comp in theta.components.iter_mut() {
        comp.weight /= total;
    }
    Ok(theta)
}

fn at_iteration(err: BllimError, iteration: usize) -> BllimError {
    match err {
        BllimError::DegenerateCluster {
            cluster,
            mass,
            required,
            ..
        } => BllimError::DegenerateCluster {
            iteration,
            cluster,
            mass,
            required,
        },
        other => other,
    }
}

/// Runs EM from k-means initial responsibilities.
pub fn fit(data: &Dataset, k: usize, structure: &BlockStructure, config: &EmConfig) -> Result<FitResult> {
    let r0 = initialize(data, k, config)?;
    fit_from(data, &r0, structure, config)
}

/// Runs EM starting with an M-step on the given responsibilities.
///
/// Stops at iteration `l` when `ll_l - ll_{l-1} <= tolerance * (max ll - min ll)`,
/// or after `max_iterations` E-steps.
pub fn fit_from(
    data: &Dataset,
    initial: &Responsibilities,
    structure: &BlockStructure,
    config: &EmConfig,
) -> Result<FitResult> {
    config.validate()?;
    let delta = model_dimension(initial.k(), data.l(), data.d(), structure)?;
    let mut theta = m_step_with(data, initial, structure, config).map_err(|e| at_iteration(e, 0))?;
    let mut trace: Vec<f64> = Vec::new();
    loop {
        let (r, ll) = e_step(data, &theta)?;
        if !ll.is_finite() {
            return Err(BllimError::NoModel(format!(
                "log-likelihood became non-finite at iteration {}",
                trace.len() + 1
            )));
        }
        trace.push(ll);
        let it = trace.len();
        let converged = it >= 2 && {
            let (lo, hi) = trace
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            ll - trace[it - 2] <= config.tolerance * (hi - lo)
        };
        if converged || it >= config.max_iterations {
            return Ok(FitResult {
                theta,
                responsibilities: r,
                loglik_trace: trace,
                delta,
                converged,
                iterations: it,
            });
        }
        theta = m_step_with(data, &r, structure, config).map_err(|e| at_iteration(e, it))?;
    }
}

/// Weighted sample covariance of the covariates in cluster `k` minus `A_k Γ_k A_kᵀ`,
/// symmetrized. May be indefinite.
pub fn residual_covariance_full(
    data: &Dataset,
    theta: &InverseParams,
    r: &Responsibilities,
    k: usize,
) -> DMatrix<f64> {
    let w = r.matrix().column(k);
    let mass: f64 = w.sum();
    let mean: DVector<f64> = data.x().transpose() * w / mass;
    let mut xw = data.x().clone();
    for (j, mut col) in xw.column_iter_mut().enumerate() {
        for (v, wi) in col.iter_mut().zip(w.iter()) {
            *v = (*v - mean[j]) * wi.sqrt();
        }
    }
    let comp = &theta.components[k];
    let mut s = xw.transpose() * &xw / mass - &comp.a * &comp.gamma * comp.a.transpose();
    symmetrize(&mut s);
    s
}
