//! Parameter types, the inverse-to-forward map and the prediction operator.
//!
//! Joint vectors are ordered `(y, x)`: the `L` response coordinates first,
//! then the `D` covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BllimError, Result};
use crate::linalg::{log_sum_exp, BlockFactor, SpdFactor, LN_2PI};
use crate::structure::BlockStructure;

/// Paired covariates `x` (n × D) and responses `y` (n × L).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(BllimError::Dimension(format!(
                "covariates have {} rows but responses have {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(BllimError::Validation("dataset contains non-finite values".into()));
        }
        Ok(Dataset { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn l(&self) -> usize {
        self.y.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows.iter()),
            y: self.y.select_rows(rows.iter()),
        }
    }
}

/// Parameters of one cluster in the estimation (inverse) direction:
/// `y ~ N(c, Γ)` and `x | y ~ N(A y + b, Σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseComponent {
    pub weight: f64,
    /// length L
    pub c: DVector<f64>,
    /// L × L
    pub gamma: DMatrix<f64>,
    /// D × L
    pub a: DMatrix<f64>,
    /// length D
    pub b: DVector<f64>,
    /// D × D, zero outside the cluster's blocks
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseParams {
    pub components: Vec<InverseComponent>,
    pub structure: BlockStructure,
}

impl InverseParams {
    /// Checks shapes, the weight simplex, positive definiteness and block faithfulness.
    pub fn new(components: Vec<InverseComponent>, structure: BlockStructure) -> Result<Self> {
        let theta = InverseParams {
            components,
            structure,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn l(&self) -> usize {
        self.components.first().map_or(0, |c| c.c.len())
    }

    pub fn d(&self) -> usize {
        self.components.first().map_or(0, |c| c.b.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (k, l, d) = (self.k(), self.l(), self.d());
        if k == 0 {
            return Err(BllimError::Validation("model has no clusters".into()));
        }
        if self.structure.k() != k || self.structure.dim() != d {
            return Err(BllimError::Dimension(format!(
                "block structure is for {} clusters of dimension {}, parameters have {} of dimension {}",
                self.structure.k(),
                self.structure.dim(),
                k,
                d
            )));
        }
        let mut total = 0.0;
        for (i, comp) in self.components.iter().enumerate() {
            let ctx = |what: &str| format!("cluster {}: {}", i + 1, what);
            if comp.c.len() != l
                || comp.gamma.shape() != (l, l)
                || comp.a.shape() != (d, l)
                || comp.b.len() != d
                || comp.sigma.shape() != (d, d)
            {
                return Err(BllimError::Dimension(ctx("parameter shapes disagree")));
            }
            if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                return Err(BllimError::Validation(ctx("mixture weight must be positive")));
            }
            let finite = comp
                .c
                .iter()
                .chain(comp.gamma.iter())
                .chain(comp.a.iter())
                .chain(comp.b.iter())
                .chain(comp.sigma.iter())
                .all(|v| v.is_finite());
            if !finite {
                return Err(BllimError::Validation(ctx("non-finite parameter")));
            }
            if comp.gamma != comp.gamma.transpose() || comp.sigma != comp.sigma.transpose() {
                return Err(BllimError::Validation(ctx("covariance is not symmetric")));
            }
            let labels = self.structure.cluster(i).labels();
            for r in 0..d {
                for c in 0..d {
                    if labels[r] != labels[c] && comp.sigma[(r, c)] != 0.0 {
                        return Err(BllimError::Validation(ctx(
                            "residual covariance is non-zero outside its blocks",
                        )));
                    }
                }
            }
            SpdFactor::new(&comp.gamma, &ctx("response covariance"))?;
            BlockFactor::new(&comp.sigma, self.structure.cluster(i), &ctx("residual covariance"))?;
            total += comp.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(BllimError::Validation(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Per-cluster factorizations used by density evaluation.
    pub(crate) fn factors(&self) -> Result<Vec<(SpdFactor, BlockFactor)>> {
        self.components
            .iter()
            .enumerate()
            .map(|(k, comp)| {
                Ok((
                    SpdFactor::new(&comp.gamma, &format!("cluster {}: response covariance", k + 1))?,
                    BlockFactor::new(
                        &comp.sigma,
                        self.structure.cluster(k),
                        &format!("cluster {}: residual covariance", k + 1),
                    )?,
                ))
            })
            .collect()
    }

    /// `ln π_k + ln φ_L(y_i; c_k, Γ_k)` (first) and `ln φ_D(x_i; A_k y_i + b_k, Σ_k)` (second),
    /// both n × K.
    pub(crate) fn log_density_terms(&self, data: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if data.d() != self.d() || data.l() != self.l() {
            return Err(BllimError::Dimension(format!(
                "data is (L={}, D={}), model is (L={}, D={})",
                data.l(),
                data.d(),
                self.l(),
                self.d()
            )));
        }
        let n = data.n();
        let k = self.k();
        let mut gate = DMatrix::zeros(n, k);
        let mut cond = DMatrix::zeros(n, k);
        for (j, (comp, (gf, sf))) in self.components.iter().zip(self.factors()?).enumerate() {
            let mut yc = data.y().clone();
            for (mut col, c) in yc.column_iter_mut().zip(comp.c.iter()) {
                col.add_scalar_mut(-c);
            }
            let qy = gf.quad_form_columns(&yc.transpose());
            let base_y = comp.weight.ln() - 0.5 * (self.l() as f64 * LN_2PI + gf.log_det());
            for (i, q) in qy.into_iter().enumerate() {
                gate[(i, j)] = base_y - 0.5 * q;
            }
            let mut resid = data.x() - data.y() * comp.a.transpose();
            for (mut col, b) in resid.column_iter_mut().zip(comp.b.iter()) {
                col.add_scalar_mut(-b);
            }
            for (i, v) in sf.log_density_rows(&resid).into_iter().enumerate() {
                cond[(i, j)] = v;
            }
        }
        Ok((gate, cond))
    }
}

/// Parameters of one cluster in the prediction (forward) direction:
/// `x ~ N(c*, Γ*)` and `y | x ~ N(A* x + b*, Σ*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardComponent {
    pub weight: f64,
    /// length D
    pub c_star: DVector<f64>,
    /// D × D
    pub gamma_star: DMatrix<f64>,
    /// L × D
    pub a_star: DMatrix<f64>,
    /// length L
    pub b_star: DVector<f64>,
    /// L × L
    pub sigma_star: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardParams {
    pub components: Vec<ForwardComponent>,
}

impl ForwardParams {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn d(&self) -> usize {
        self.components.first().map_or(0, |c| c.c_star.len())
    }

    pub fn l(&self) -> usize {
        self.components.first().map_or(0, |c| c.b_star.len())
    }
}

/// Maps inverse-regression parameters to forward-regression parameters, cluster by cluster:
///
/// ```text
/// c*  = A c + b
/// Γ*  = Σ + A Γ Aᵀ
/// Σ*  = (Γ⁻¹ + Aᵀ Σ⁻¹ A)⁻¹
/// A*  = Σ* Aᵀ Σ⁻¹
/// b*  = Σ* (Γ⁻¹ c − Aᵀ Σ⁻¹ b)
/// ```
pub fn forward_from_inverse(theta: &InverseParams) -> Result<ForwardParams> {
    let components = theta
        .components
        .iter()
        .zip(theta.factors()?)
        .enumerate()
        .map(|(k, (comp, (gf, sf)))| {
            let gamma_inv = gf.inverse();
            // Σ⁻¹ A, D × L
            let sinv_a = sf.solve(&comp.a);
            let mut precision = &gamma_inv + comp.a.transpose() * &sinv_a;
            crate::linalg::symmetrize(&mut precision);
            let pf = SpdFactor::new(&precision, &format!("cluster {}: forward precision", k + 1))?;
            let mut sigma_star = pf.inverse();
            crate::linalg::symmetrize(&mut sigma_star);
            let a_star = &sigma_star * sinv_a.transpose();
            let b_star = &sigma_star * (&gamma_inv * &comp.c - sinv_a.transpose() * &comp.b);
            let c_star = &comp.a * &comp.c + &comp.b;
            let mut gamma_star = &comp.sigma + &comp.a * &comp.gamma * comp.a.transpose();
            crate::linalg::symmetrize(&mut gamma_star);
            Ok(ForwardComponent {
                weight: comp.weight,
                c_star,
                gamma_star,
                a_star,
                b_star,
                sigma_star,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardParams { components })
}

/// Joint `(y, x)` mean and covariance of every cluster, built from the forward parameters:
///
/// ```text
/// m* = [A* c* + b* ; c*]
/// V* = [[Σ* + A* Γ* A*ᵀ, A* Γ*], [Γ* A*ᵀ, Γ*]]
/// ```
pub fn joint_gmm_params(theta: &InverseParams) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let fwd = forward_from_inverse(theta)?;
    let (l, d) = (theta.l(), theta.d());
    Ok(fwd
        .components
        .iter()
        .map(|f| {
            let mut mean = DVector::zeros(l + d);
            mean.rows_mut(0, l)
                .copy_from(&(&f.a_star * &f.c_star + &f.b_star));
            mean.rows_mut(l, d).copy_from(&f.c_star);
            let ag = &f.a_star * &f.gamma_star;
            let mut cov = DMatrix::zeros(l + d, l + d);
            cov.view_mut((0, 0), (l, l))
                .copy_from(&(&f.sigma_star + &ag * f.a_star.transpose()));
            cov.view_mut((0, l), (l, d)).copy_from(&ag);
            cov.view_mut((l, 0), (d, l)).copy_from(&ag.transpose());
            cov.view_mut((l, l), (d, d)).copy_from(&f.gamma_star);
            crate::linalg::symmetrize(&mut cov);
            (mean, cov)
        })
        .collect())
}

/// Free-parameter count of a model with `k` clusters and block structure `structure`.
pub fn model_dimension(k: usize, l: usize, d: usize, structure: &BlockStructure) -> Result<usize> {
    if structure.k() != k {
        return Err(BllimError::Validation(format!(
            "block structure has {} clusters, expected {}",
            structure.k(),
            k
        )));
    }
    if k == 0 {
        return Err(BllimError::Validation("at least one cluster is required".into()));
    }
    if structure.clusters().iter().any(|p| p.dim() != d) {
        return Err(BllimError::Validation(format!(
            "block structure does not partition {d} covariates"
        )));
    }
    let per_cluster = l + l * (l + 1) / 2 + d * (l + 1) + 1;
    let blocks: usize = structure.clusters().iter().map(|p| p.covariance_params()).sum();
    Ok(k * per_cluster + blocks - 1)
}

/// Result of predicting a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// n × L conditional means.
    pub y: DMatrix<f64>,
    /// n × K gating weights; every row sums to one.
    pub weights: DMatrix<f64>,
}

/// Forward parameters with the gating covariances factored once.
#[derive(Debug, Clone)]
pub struct Predictor {
    params: ForwardParams,
    gates: Vec<SpdFactor>,
}

impl Predictor {
    pub fn new(params: &ForwardParams) -> Result<Self> {
        if params.k() == 0 {
            return Err(BllimError::Validation("model has no clusters".into()));
        }
        let gates = params
            .components
            .iter()
            .enumerate()
            .map(|(k, f)| {
                SpdFactor::new(&f.gamma_star, &format!("cluster {}: covariate covariance", k + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictor {
            params: params.clone(),
            gates,
        })
    }

    pub fn params(&self) -> &ForwardParams {
        &self.params
    }

    /// Predicts every row of `x` (n × D).
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<Prediction> {
        let d = self.params.d();
        if x.ncols() != d {
            return Err(BllimError::Dimension(format!(
                "model expects {} covariates, input has {}",
                d,
                x.ncols()
            )));
        }
        let n = x.nrows();
        let k = self.params.k();
        let mut log_w = DMatrix::zeros(n, k);
        for (j, (f, gate)) in self.params.components.iter().zip(&self.gates).enumerate() {
            let mut centered = x.clone();
            for (mut col, c) in centered.column_iter_mut().zip(f.c_star.iter()) {
                col.add_scalar_mut(-c);
            }
            let base = f.weight.ln() - 0.5 * (d as f64 * LN_2PI + gate.log_det());
            for (i, q) in gate.quad_form_columns(&centered.transpose()).into_iter().enumerate() {
                log_w[(i, j)] = base - 0.5 * q;
            }
        }
        let mut weights = DMatrix::zeros(n, k);
        for i in 0..n {
            let row: Vec<f64> = log_w.row(i).iter().copied().collect();
            let norm = log_sum_exp(&row);
            for j in 0..k {
                weights[(i, j)] = (row[j] - norm).exp();
            }
        }
        let mut y = DMatrix::zeros(n, self.params.l());
        for (j, f) in self.params.components.iter().enumerate() {
            let mut expert = x * f.a_star.transpose();
            for (mut col, b) in expert.column_iter_mut().zip(f.b_star.iter()) {
                col.add_scalar_mut(*b);
            }
            for i in 0..n {
                let w = weights[(i, j)];
                for l in 0..y.ncols() {
                    y[(i, l)] += w * expert[(i, l)];
                }
            }
        }
        Ok(Prediction { y, weights })
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = self.predict_rows(&DMatrix::from_row_slice(1, x.len(), x.as_slice()))?;
        Ok((p.y.row(0).transpose(), p.weights.row(0).transpose()))
    }
}

/// Posterior-mean prediction `Σ_k w_k(x) (A*_k x + b*_k)` and the gating weights `w(x)`.
pub fn predict(theta_star: &ForwardParams, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    Predictor::new(theta_star)?.predict(x)
}
