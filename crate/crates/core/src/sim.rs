//! Synthetic data: locally-affine mixtures with Toeplitz residual blocks
//! ("plan A") and nonlinear manifolds with hidden responses, plus the
//! evaluation helpers used on them.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{BllimError, Result};
use crate::model::{Dataset, InverseComponent, InverseParams};
use crate::structure::{BlockStructure, Partition};

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rows: usize, cols: usize, sd: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// Lower Cholesky factor of a covariance, for sampling.
fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(nalgebra::Cholesky::new(cov.clone())
        .ok_or_else(|| BllimError::not_pd("sampling covariance"))?
        .l())
}

fn rescale_to_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sd: Vec<f64> = m.diagonal().iter().map(|v| v.sqrt()).collect();
    let mut c = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            m[(i, j)] / (sd[i] * sd[j])
        }
    });
    crate::linalg::symmetrize(&mut c);
    c
}

/// Random correlation matrix: random rotation of eigenvalues drawn from U(1, 10),
/// rescaled to unit diagonal.
pub fn random_correlation(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let q = gaussian_matrix(dim, dim, 1.0, rng).qr().q();
    let eig = Uniform::new(1.0, 10.0);
    let lambda = DMatrix::from_diagonal(&DVector::from_fn(dim, |_, _| eig.sample(rng)));
    rescale_to_correlation(&(&q * lambda * q.transpose()))
}

/// `rho^|i-j|`
pub fn toeplitz(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// Contiguous block sizes drawn from `min..=max` until `dim` is covered; the
/// last block takes whatever remains.
pub fn random_block_sizes(dim: usize, min: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = dim;
    while left > 0 {
        let s = rng.gen_range(min..=max).min(left);
        sizes.push(s);
        left -= s;
    }
    sizes
}

fn contiguous_partition(sizes: &[usize]) -> Partition {
    let mut start = 0;
    let groups = sizes
        .iter()
        .map(|&s| {
            let g: Vec<usize> = (start..start + s).collect();
            start += s;
            g
        })
        .collect::<Vec<_>>();
    Partition::new(start, groups).expect("contiguous blocks cover the range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanASpec {
    pub k: usize,
    pub l: usize,
    pub d: usize,
    pub seed: u64,
    /// Toeplitz autocorrelation inside residual blocks.
    pub rho: f64,
    /// Standard deviation of the regression coefficients.
    pub a_sd: f64,
    pub min_block: usize,
    pub max_block: usize,
}

impl Default for PlanASpec {
    fn default() -> Self {
        PlanASpec {
            k: 5,
            l: 2,
            d: 100,
            seed: 0,
            rho: 0.9,
            a_sd: 0.5f64.sqrt(),
            min_block: 2,
            max_block: 10,
        }
    }
}

/// Draws mixture parameters: weights from normalized U(0,1), `c` and `b`
/// standard Gaussian, `A` Gaussian with sd `a_sd`, `Γ` a random correlation
/// matrix and `Σ` block-diagonal with Toeplitz blocks.
pub fn sample_plan_a_params(spec: &PlanASpec) -> Result<InverseParams> {
    if spec.k == 0 || spec.l == 0 || spec.d == 0 {
        return Err(BllimError::Validation("K, L and D must be positive".into()));
    }
    if !(spec.rho > 0.0 && spec.rho < 1.0) || spec.min_block == 0 || spec.min_block > spec.max_block {
        return Err(BllimError::Validation("invalid plan-A block settings".into()));
    }
    let mut rng = rng_for(spec.seed, 0);
    let raw: Vec<f64> = (0..spec.k).map(|_| rng.gen::<f64>().max(f64::MIN_POSITIVE)).collect();
    let total: f64 = raw.iter().sum();
    let mut partitions = Vec::with_capacity(spec.k);
    let components = raw
        .iter()
        .map(|w| {
            let c = DVector::from_fn(spec.l, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b = DVector::from_fn(spec.d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = gaussian_matrix(spec.d, spec.l, spec.a_sd, &mut rng);
            let gamma = random_correlation(spec.l, &mut rng);
            let sizes = random_block_sizes(spec.d, spec.min_block, spec.max_block, &mut rng);
            let mut sigma = DMatrix::zeros(spec.d, spec.d);
            let mut start = 0;
            for &s in &sizes {
                sigma.view_mut((start, start), (s, s)).copy_from(&toeplitz(s, spec.rho));
                start += s;
            }
            partitions.push(contiguous_partition(&sizes));
            InverseComponent {
                weight: w / total,
                c,
                gamma,
                a,
                b,
                sigma,
            }
        })
        .collect();
    InverseParams::new(components, BlockStructure::new(partitions)?)
}

/// A dataset with the cluster each row was drawn from.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub data: Dataset,
    pub labels: Vec<usize>,
}

/// Draws `z ~ Categorical(π)`, `y | z ~ N(c, Γ)`, `x | y, z ~ N(A y + b, Σ)`.
pub fn generate_plan_a(theta: &InverseParams, n: usize, seed: u64) -> Result<LabeledSample> {
    let mut rng = rng_for(seed, 1);
    let factors = theta
        .components
        .iter()
        .map(|c| Ok((sampling_factor(&c.gamma)?, sampling_factor(&c.sigma)?)))
        .collect::<Result<Vec<_>>>()?;
    let (l, d) = (theta.l(), theta.d());
    let mut x = DMatrix::zeros(n, d);
    let mut y = DMatrix::zeros(n, l);
    let mut labels = Vec::with_capacity(n);
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
        labels.push(k);
        let comp = &theta.components[k];
        let (lg, ls) = &factors[k];
        let zy = DVector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let yi = &comp.c + lg * zy;
        let zx = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = &comp.a * &yi + &comp.b + ls * zx;
        y.row_mut(i).copy_from(&yi.transpose());
        x.row_mut(i).copy_from(&xi.transpose());
    }
    Ok(LabeledSample {
        data: Dataset::new(x, y)?,
        labels,
    })
}

/// Per-cluster `Tr(A Γ Aᵀ + Σ) / Tr(Σ)` and their weighted mean.
pub fn snr(theta: &InverseParams) -> (Vec<f64>, f64) {
    let per: Vec<f64> = theta
        .components
        .iter()
        .map(|c| {
            let signal = (&c.a * &c.gamma * c.a.transpose()).trace();
            let noise = c.sigma.trace();
            (signal + noise) / noise
        })
        .collect();
    let overall = theta.components.iter().zip(&per).map(|(c, s)| c.weight * s).sum();
    (per, overall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifoldFn {
    F,
    G,
    H,
}

impl std::str::FromStr for ManifoldFn {
    type Err = BllimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f" => Ok(ManifoldFn::F),
            "g" => Ok(ManifoldFn::G),
            "h" => Ok(ManifoldFn::H),
            other => Err(BllimError::Validation(format!("unknown manifold function '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseStructure {
    Factor,
    Toeplitz,
    Identity,
    Blocks,
}

impl std::str::FromStr for NoiseStructure {
    type Err = BllimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factor" => Ok(NoiseStructure::Factor),
            "toeplitz" => Ok(NoiseStructure::Toeplitz),
            "identity" => Ok(NoiseStructure::Identity),
            "blocks" => Ok(NoiseStructure::Blocks),
            other => Err(BllimError::Validation(format!("unknown covariance structure '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub function: ManifoldFn,
    pub d: usize,
    pub n: usize,
    pub covariance: NoiseStructure,
    /// Number of factors in the factor structures.
    pub factor_rank: usize,
    /// Block size of the blocks structure.
    pub block_size: usize,
    pub seed: u64,
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        ManifoldSpec {
            function: ManifoldFn::F,
            d: 50,
            n: 200,
            covariance: NoiseStructure::Identity,
            factor_rank: 5,
            block_size: 5,
            seed: 0,
        }
    }
}

/// Per-covariate coefficients of the manifold functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldCoefficients {
    pub alpha: Vec<f64>,
    pub eta: Vec<f64>,
    pub phi: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Everything needed to draw more observations from the same manifold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldParams {
    pub function: ManifoldFn,
    pub coefficients: ManifoldCoefficients,
    pub noise_cov: DMatrix<f64>,
    pub noise: NoiseStructure,
}

/// Value of covariate `d` for response `t` and hidden `(w1, w2)`:
///
/// ```text
/// f_d = α cos(η t/10 + φ) + γ w1³
/// g_d = α cos(η t/10 + β w1 + φ)
/// h_d = α cos(η t/10 + β w1 + φ) + γ w2³
/// ```
pub fn manifold_value(function: ManifoldFn, co: &ManifoldCoefficients, d: usize, t: f64, w1: f64, w2: f64) -> f64 {
    let (a, e, p, b, g) = (co.alpha[d], co.eta[d], co.phi[d], co.beta[d], co.gamma[d]);
    match function {
        ManifoldFn::F => a * (e * t / 10.0 + p).cos() + g * w1.powi(3),
        ManifoldFn::G => a * (e * t / 10.0 + b * w1 + p).cos(),
        ManifoldFn::H => a * (e * t / 10.0 + b * w1 + p).cos() + g * w2.powi(3),
    }
}

/// `Φ + C Cᵀ` with `Φ` diagonal U(0.1, 1) and `C` Gaussian rescaled so that
/// `Tr(C Cᵀ) / Tr(Φ + C Cᵀ)` equals `ratio`.
#[derive(Debug, Clone)]
pub struct FactorCovariance {
    pub phi: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

pub fn factor_covariance(dim: usize, rank: usize, ratio: f64, rng: &mut impl Rng) -> FactorCovariance {
    let unif = Uniform::new(0.1, 1.0);
    let phi = DVector::from_fn(dim, |_, _| unif.sample(rng));
    let raw = gaussian_matrix(dim, rank, 1.0, rng);
    let raw_trace = raw.norm_squared();
    let target = ratio / (1.0 - ratio) * phi.sum();
    let loadings = raw * (target / raw_trace).sqrt();
    let mut covariance = DMatrix::from_diagonal(&phi) + &loadings * loadings.transpose();
    crate::linalg::symmetrize(&mut covariance);
    FactorCovariance {
        phi,
        loadings,
        covariance,
    }
}

/// Share of the factor part in the total trace of the factor covariances.
pub const FACTOR_TRACE_RATIO: f64 = 0.9;

fn noise_covariance(spec: &ManifoldSpec, rng: &mut impl Rng) -> DMatrix<f64> {
    let d = spec.d;
    match spec.covariance {
        NoiseStructure::Identity => DMatrix::identity(d, d),
        NoiseStructure::Toeplitz => toeplitz(d, 0.9),
        NoiseStructure::Factor => rescale_to_correlation(
            &factor_covariance(d, spec.factor_rank, FACTOR_TRACE_RATIO, rng).covariance,
        ),
        NoiseStructure::Blocks => {
            let mut m = DMatrix::zeros(d, d);
            let mut start = 0;
            while start < d {
                let s = spec.block_size.max(1).min(d - start);
                let block = factor_covariance(s, spec.factor_rank, FACTOR_TRACE_RATIO, rng).covariance;
                m.view_mut((start, start), (s, s)).copy_from(&rescale_to_correlation(&block));
                start += s;
            }
            m
        }
    }
}

pub fn sample_manifold_params(spec: &ManifoldSpec, rng: &mut impl Rng) -> ManifoldParams {
    use std::f64::consts::PI;
    let d = spec.d;
    let mut draw = |hi: f64| -> Vec<f64> { (0..d).map(|_| rng.gen_range(0.0..hi)).collect() };
    let coefficients = ManifoldCoefficients {
        alpha: draw(2.0),
        eta: draw(4.0 * PI),
        phi: draw(2.0 * PI),
        beta: draw(PI),
        gamma: draw(2.0),
    };
    ManifoldParams {
        function: spec.function,
        coefficients,
        noise_cov: noise_covariance(spec, rng),
        noise: spec.covariance,
    }
}

/// Observations from a manifold: `y` holds the observed response `t` only.
#[derive(Debug, Clone)]
pub struct ManifoldSample {
    pub data: Dataset,
    /// n × 2 hidden responses `(w1, w2)`.
    pub hidden: DMatrix<f64>,
}

/// `t ~ U[1, 10]`, `w ~ U[-1, 1]²`, `x = fn(t, w) + ε` with `ε ~ N(0, noise_cov)`.
pub fn sample_manifold(params: &ManifoldParams, n: usize, rng: &mut impl Rng) -> Result<ManifoldSample> {
    let d = params.noise_cov.nrows();
    let chol = sampling_factor(&params.noise_cov)?;
    let mut x = DMatrix::zeros(n, d);
    let mut y = DMatrix::zeros(n, 1);
    let mut hidden = DMatrix::zeros(n, 2);
    for i in 0..n {
        let t = rng.gen_range(1.0..10.0);
        let w1 = rng.gen_range(-1.0..1.0);
        let w2 = rng.gen_range(-1.0..1.0);
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = &chol * z;
        for j in 0..d {
            x[(i, j)] = manifold_value(params.function, &params.coefficients, j, t, w1, w2) + eps[j];
        }
        y[(i, 0)] = t;
        hidden[(i, 0)] = w1;
        hidden[(i, 1)] = w2;
    }
    Ok(ManifoldSample {
        data: Dataset::new(x, y)?,
        hidden,
    })
}

/// One manifold draw per `spec.seed`: parameters, then `spec.n` observations.
pub fn generate_manifold(spec: &ManifoldSpec) -> Result<(ManifoldSample, ManifoldParams)> {
    if spec.d == 0 || spec.n == 0 {
        return Err(BllimError::Validation("D and N must be positive".into()));
    }
    let mut rng = rng_for(spec.seed, 0);
    let params = sample_manifold_params(spec, &mut rng);
    let sample = sample_manifold(&params, spec.n, &mut rng)?;
    Ok((sample, params))
}

/// Per-response root mean squared error.
pub fn rmse(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>) -> Result<Vec<f64>> {
    if y_true.shape() != y_pred.shape() {
        return Err(BllimError::Dimension(format!(
            "truth is {}x{}, prediction is {}x{}",
            y_true.nrows(),
            y_true.ncols(),
            y_pred.nrows(),
            y_pred.ncols()
        )));
    }
    if y_true.nrows() == 0 {
        return Err(BllimError::Validation("cannot score an empty prediction".into()));
    }
    let n = y_true.nrows() as f64;
    Ok((0..y_true.ncols())
        .map(|l| {
            (y_true.column(l).iter().zip(y_pred.column(l).iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
                .sqrt()
        })
        .collect())
}

/// Adjusted Rand index between two labelings of the same items.
/// Identical labelings score 1 even when the index is undefined.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let mut table = std::collections::HashMap::<(usize, usize), u64>::new();
    let mut rows = std::collections::HashMap::<usize, u64>::new();
    let mut cols = std::collections::HashMap::<usize, u64>::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        let same = Partition::from_labels(a) == Partition::from_labels(b);
        return if same { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Best one-to-one matching of estimated clusters to true clusters by
/// overlap: `result[t]` is the estimated cluster paired with true cluster `t`.
/// Exhaustive up to 8 clusters, greedy beyond.
pub fn match_clusters(estimated: &[usize], truth: &[usize], k: usize) -> Vec<usize> {
    let mut overlap = vec![vec![0usize; k]; k];
    for (&e, &t) in estimated.iter().zip(truth) {
        if e < k && t < k {
            overlap[t][e] += 1;
        }
    }
    if k <= 8 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = perm.clone();
        let mut best_score = 0;
        permute(&mut perm, 0, &mut |p| {
            let score: usize = p.iter().enumerate().map(|(t, &e)| overlap[t][e]).sum();
            if score > best_score {
                best_score = score;
                best = p.to_vec();
            }
        });
        best
    } else {
        let mut result = vec![usize::MAX; k];
        let mut used = vec![false; k];
        let mut pairs: Vec<(usize, usize, usize)> =
            (0..k).flat_map(|t| (0..k).map(move |e| (t, e, 0))).collect();
        for p in pairs.iter_mut() {
            p.2 = overlap[p.0][p.1];
        }
        pairs.sort_by(|a, b| b.2.cmp(&a.2));
        for (t, e, _) in pairs {
            if result[t] == usize::MAX && !used[e] {
                result[t] = e;
                used[e] = true;
            }
        }
        result
    }
}

fn permute(p: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// Gaussian sampling helper for callers that need `N(0, sd²)` noise.
pub fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite positive standard deviation")
}
