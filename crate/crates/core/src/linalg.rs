//! Cholesky-based Gaussian densities and the block-diagonal covariance factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{BllimError, Result};
use crate::structure::Partition;

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Numerically stable `ln Σ exp(v_i)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cholesky factor of a symmetric positive definite matrix with its log-determinant.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>, context: &str) -> Result<Self> {
        if !m.is_square() {
            return Err(BllimError::Dimension(format!("{context}: matrix is not square")));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(BllimError::not_pd(format!("{context}: non-finite entry")));
        }
        let chol = Cholesky::new(m.clone()).ok_or_else(|| BllimError::not_pd(context))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(BllimError::not_pd(format!("{context}: singular")));
        }
        Ok(SpdFactor { chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `vᵀ M⁻¹ v` for every column `v` of `cols`.
    pub fn quad_form_columns(&self, cols: &DMatrix<f64>) -> Vec<f64> {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(cols)
            .expect("cholesky factor has a positive diagonal");
        z.column_iter().map(|c| c.norm_squared()).collect()
    }

    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("cholesky factor has a positive diagonal");
        z.norm_squared()
    }

    /// Log-density of `N(mean, M)` at `x`.
    pub fn log_density(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let p = self.dim() as f64;
        -0.5 * (p * LN_2PI + self.log_det + self.quad_form(&(x - mean)))
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// `ln φ_p(x; mean, cov)`.
pub fn log_gaussian_density(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(BllimError::Dimension(format!(
            "point of length {}, mean of length {}, covariance {}x{}",
            x.len(),
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    Ok(SpdFactor::new(cov, "gaussian covariance")?.log_density(x, mean))
}

/// Factorization of a covariance that is block-diagonal under a partition.
/// Each block is factored on its own, so cost scales with the block sizes.
#[derive(Debug, Clone)]
pub struct BlockFactor {
    dim: usize,
    blocks: Vec<(Vec<usize>, SpdFactor)>,
    /// Transposed inverse Cholesky factor of each multi-variable block.
    whiteners: Vec<Option<DMatrix<f64>>>,
    log_det: f64,
}

impl BlockFactor {
    pub fn new(cov: &DMatrix<f64>, partition: &Partition, context: &str) -> Result<Self> {
        let blocks = partition
            .groups()
            .iter()
            .enumerate()
            .map(|(g, idx)| {
                let sub = submatrix(cov, idx);
                SpdFactor::new(&sub, &format!("{context}, block {}", g + 1)).map(|f| (idx.clone(), f))
            })
            .collect::<Result<Vec<_>>>()?;
        let log_det = blocks.iter().map(|(_, f)| f.log_det()).sum();
        let whiteners = blocks
            .iter()
            .map(|(idx, f)| {
                (idx.len() > 1).then(|| {
                    f.chol
                        .l_dirty()
                        .solve_lower_triangular(&DMatrix::identity(idx.len(), idx.len()))
                        .expect("cholesky factor has a positive diagonal")
                        .lower_triangle()
                        .transpose()
                })
            })
            .collect();
        Ok(BlockFactor {
            dim: partition.dim(),
            blocks,
            whiteners,
            log_det,
        })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `eᵢᵀ Σ⁻¹ eᵢ` for every row `eᵢ` of `residuals` (n × D).
    pub fn quad_form_rows(&self, residuals: &DMatrix<f64>) -> Vec<f64> {
        let n = residuals.nrows();
        let mut out = vec![0.0; n];
        for ((idx, factor), whitener) in self.blocks.iter().zip(&self.whiteners) {
            match whitener {
                None => {
                    let var = factor.chol.l_dirty()[(0, 0)].powi(2);
                    for (o, e) in out.iter_mut().zip(residuals.column(idx[0]).iter()) {
                        *o += e * e / var;
                    }
                }
                Some(w) => {
                    let z = residuals.select_columns(idx.iter()) * w;
                    for col in z.column_iter() {
                        for (o, v) in out.iter_mut().zip(col.iter()) {
                            *o += v * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Row-wise log-density of zero-mean `N(0, Σ)` evaluated at the residual rows.
    pub fn log_density_rows(&self, residuals: &DMatrix<f64>) -> Vec<f64> {
        let base = -0.5 * (self.dim as f64 * LN_2PI + self.log_det);
        self.quad_form_rows(residuals)
            .into_iter()
            .map(|q| base - 0.5 * q)
            .collect()
    }

    /// `Σ⁻¹ B` for a D × m right-hand side.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for (idx, factor) in &self.blocks {
            let sub = rhs.select_rows(idx.iter());
            let sol = factor.solve(&sub);
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from(&sol.row(r));
            }
        }
        out
    }
}

pub fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Adds increasing ridge to the diagonal until the matrix factors.
/// `relative` scales the mean diagonal; tries up to `relative * 1e6`.
pub fn factor_with_ridge(
    m: &DMatrix<f64>,
    relative: f64,
    context: &str,
) -> Result<(SpdFactor, DMatrix<f64>)> {
    if let Ok(f) = SpdFactor::new(m, context) {
        return Ok((f, m.clone()));
    }
    let n = m.nrows().max(1);
    let scale = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = relative * scale;
    for _ in 0..7 {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += eps;
        }
        if let Ok(f) = SpdFactor::new(&jittered, context) {
            return Ok((f, jittered));
        }
        eps *= 10.0;
    }
    Err(BllimError::not_pd(context))
}
