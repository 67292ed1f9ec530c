//! Repeated cross-validation and the simulation benchmarks.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::EmConfig;
use crate::error::{BllimError, Result};
use crate::model::{Dataset, Predictor};
use crate::selection::{bllim_pipeline, PipelineConfig, SelectionMethod};
use crate::sim::{
    generate_plan_a, rmse, rng_for, sample_manifold, sample_manifold_params, sample_plan_a_params, ManifoldFn,
    ManifoldSpec, NoiseStructure, PlanASpec,
};

/// Fitted summary attached to a prediction, when the method has one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub k: Option<usize>,
    pub mean_group_size: Option<f64>,
}

/// A prediction method that can be trained and evaluated on held-out rows.
pub trait Regressor: Sync {
    fn name(&self) -> &str;

    /// Trains on `train` and predicts the rows of `test_x` (n × D → n × L).
    fn fit_predict(&self, train: &Dataset, test_x: &DMatrix<f64>) -> Result<(DMatrix<f64>, FitSummary)>;
}

/// Predicts the training mean of every response.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantRegressor;

impl Regressor for ConstantRegressor {
    fn name(&self) -> &str {
        "constant"
    }

    fn fit_predict(&self, train: &Dataset, test_x: &DMatrix<f64>) -> Result<(DMatrix<f64>, FitSummary)> {
        let means: Vec<f64> = train.y().column_iter().map(|c| c.mean()).collect();
        let pred = DMatrix::from_fn(test_x.nrows(), means.len(), |_, j| means[j]);
        Ok((pred, FitSummary::default()))
    }
}

/// The full selection pipeline, in BLLiM or diagonal-only (GLLiM) mode.
#[derive(Debug, Clone)]
pub struct PipelineRegressor {
    pub name: String,
    pub config: PipelineConfig,
}

impl PipelineRegressor {
    pub fn bllim(k_range: Vec<usize>, em: EmConfig) -> Self {
        PipelineRegressor {
            name: "bllim".into(),
            config: PipelineConfig::bllim(k_range, em),
        }
    }

    pub fn gllim(k_range: Vec<usize>, em: EmConfig) -> Self {
        PipelineRegressor {
            name: "gllim".into(),
            config: PipelineConfig::gllim(k_range, em),
        }
    }
}

impl Regressor for PipelineRegressor {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit_predict(&self, train: &Dataset, test_x: &DMatrix<f64>) -> Result<(DMatrix<f64>, FitSummary)> {
        let mut config = self.config.clone();
        // never ask for more clusters than the training rows can carry
        let cap = train.n() / (train.l() + 1);
        config.k_range.retain(|&k| k <= cap);
        if config.k_range.is_empty() {
            return Err(BllimError::Infeasible {
                n: train.n(),
                required: self.config.k_range.iter().min().copied().unwrap_or(1) * (train.l() + 1),
            });
        }
        let out = bllim_pipeline(train, &config)?;
        let pred = Predictor::new(&out.forward)?.predict_rows(test_x)?;
        Ok((
            pred.y,
            FitSummary {
                k: Some(out.k),
                mean_group_size: Some(out.structure.mean_group_size()),
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            repetitions: 50,
            seed: 0,
        }
    }
}

/// Fold label of every row for one repetition: a seeded shuffle dealt
/// round-robin, so fold sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64, repetition: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, repetition as u64));
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEvaluation {
    pub repetition: usize,
    pub fold: usize,
    pub rmse: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvStats {
    pub method: String,
    pub folds: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Mean RMSE per response over successful evaluations.
    pub mean: Vec<f64>,
    /// Sample standard deviation per response (0 with a single evaluation).
    pub sd: Vec<f64>,
    pub evaluations: usize,
    pub failures: usize,
    pub records: Vec<CvEvaluation>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Repeated k-fold cross-validation of `method`. Failed folds are recorded
/// and excluded from the statistics.
pub fn cross_validate(data: &Dataset, config: &CvConfig, method: &dyn Regressor) -> Result<CvStats> {
    let n = data.n();
    if config.folds < 2 || config.folds > n {
        return Err(BllimError::Validation(format!(
            "folds must be between 2 and n = {n}, got {}",
            config.folds
        )));
    }
    if config.repetitions == 0 {
        return Err(BllimError::Validation("repetitions must be positive".into()));
    }
    let cells: Vec<(usize, usize)> = (0..config.repetitions)
        .flat_map(|r| (0..config.folds).map(move |f| (r, f)))
        .collect();
    let assignments: Vec<Vec<usize>> = (0..config.repetitions)
        .map(|r| fold_assignment(n, config.folds, config.seed, r))
        .collect();
    let records: Vec<CvEvaluation> = cells
        .par_iter()
        .map(|&(rep, fold)| {
            let labels = &assignments[rep];
            let test: Vec<usize> = (0..n).filter(|&i| labels[i] == fold).collect();
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != fold).collect();
            let held_out = data.select_rows(&test);
            let result = method
                .fit_predict(&data.select_rows(&train), held_out.x())
                .and_then(|(pred, _)| rmse(held_out.y(), &pred));
            match result {
                Ok(v) => CvEvaluation {
                    repetition: rep,
                    fold,
                    rmse: Some(v),
                    error: None,
                },
                Err(e) => CvEvaluation {
                    repetition: rep,
                    fold,
                    rmse: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&Vec<f64>> = records.iter().filter_map(|r| r.rmse.as_ref()).collect();
    let (mean, sd) = (0..data.l())
        .map(|l| mean_sd(&ok.iter().map(|v| v[l]).collect::<Vec<_>>()))
        .unzip();
    Ok(CvStats {
        method: method.name().to_string(),
        folds: config.folds,
        repetitions: config.repetitions,
        seed: config.seed,
        mean,
        sd,
        evaluations: ok.len(),
        failures: records.len() - ok.len(),
        records,
    })
}

/// One row of benchmark output: a replicate × method × response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub cell: String,
    pub replicate: usize,
    pub method: String,
    /// 1-based response index.
    pub response: usize,
    pub rmse: Option<f64>,
    pub selected_k: Option<usize>,
    pub mean_group_size: Option<f64>,
    pub error: Option<String>,
}

/// Mean (sd) RMSE of one method on one response in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub method: String,
    pub response: usize,
    pub mean: f64,
    pub sd: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub records: Vec<ReplicateRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Locally-affine benchmark: plan-A parameters redrawn per replicate,
/// independent training and test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Config {
    pub plan: PlanASpec,
    pub n: usize,
    pub test_n: usize,
    pub replicates: usize,
    pub k_range: Vec<usize>,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            plan: PlanASpec::default(),
            n: 4162,
            test_n: 10_000,
            replicates: 20,
            k_range: (1..=5).collect(),
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

/// Nonlinear-manifold benchmark over (function, covariance) cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Config {
    pub cells: Vec<(ManifoldFn, NoiseStructure)>,
    pub d: usize,
    pub n: usize,
    pub test_n: usize,
    pub replicates: usize,
    pub k_range: Vec<usize>,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for Table2Config {
    fn default() -> Self {
        let functions = [ManifoldFn::F, ManifoldFn::G, ManifoldFn::H];
        let covs = [
            NoiseStructure::Factor,
            NoiseStructure::Toeplitz,
            NoiseStructure::Identity,
            NoiseStructure::Blocks,
        ];
        Table2Config {
            cells: functions
                .iter()
                .flat_map(|&f| covs.iter().map(move |&c| (f, c)))
                .collect(),
            d: 50,
            n: 200,
            test_n: 200,
            replicates: 20,
            k_range: (1..=5).collect(),
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

fn benchmark_methods(k_range: &[usize], em: &EmConfig) -> Vec<PipelineRegressor> {
    let bllim = PipelineRegressor::bllim(k_range.to_vec(), em.clone());
    let mut gllim = PipelineRegressor::gllim(k_range.to_vec(), em.clone());
    gllim.config.selection = SelectionMethod::Bic;
    vec![bllim, gllim]
}

fn evaluate(
    cell: &str,
    replicate: usize,
    l: usize,
    methods: &[PipelineRegressor],
    split: Result<(Dataset, Dataset)>,
) -> Vec<ReplicateRecord> {
    let mut out = Vec::new();
    for m in methods {
        let result = split.as_ref().map_err(|e| BllimError::Validation(e.to_string())).and_then(|(train, test)| {
            let (pred, summary) = m.fit_predict(train, test.x())?;
            Ok((rmse(test.y(), &pred)?, summary))
        });
        for response in 0..l {
            out.push(match &result {
                Ok((err, summary)) => ReplicateRecord {
                    cell: cell.to_string(),
                    replicate,
                    method: m.name.clone(),
                    response: response + 1,
                    rmse: Some(err[response]),
                    selected_k: summary.k,
                    mean_group_size: summary.mean_group_size,
                    error: None,
                },
                Err(e) => ReplicateRecord {
                    cell: cell.to_string(),
                    replicate,
                    method: m.name.clone(),
                    response: response + 1,
                    rmse: None,
                    selected_k: None,
                    mean_group_size: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    out
}

/// Groups records by (cell, method, response) in first-seen order.
pub fn summarize(records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in records {
        let key = (r.cell.clone(), r.method.clone(), r.response);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(cell, method, response)| {
            let group: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.cell == cell && r.method == method && r.response == response)
                .collect();
            let values: Vec<f64> = group.iter().filter_map(|r| r.rmse).collect();
            let (mean, sd) = mean_sd(&values);
            SummaryRow {
                failures: group.len() - values.len(),
                replicates: values.len(),
                cell,
                method,
                response,
                mean,
                sd,
            }
        })
        .collect()
}

fn replicate_seed(seed: u64, replicate: usize) -> u64 {
    rng_for(seed, 1_000 + replicate as u64).gen()
}

fn table1_split(config: &Table1Config, replicate: usize) -> Result<(Dataset, Dataset)> {
    let seed = replicate_seed(config.seed, replicate);
    let theta = sample_plan_a_params(&PlanASpec {
        seed,
        ..config.plan.clone()
    })?;
    let train = generate_plan_a(&theta, config.n, seed.wrapping_add(1))?;
    let test = generate_plan_a(&theta, config.test_n, seed.wrapping_add(2))?;
    Ok((train.data, test.data))
}

/// Replicate records of BLLiM and GLLiM on plan-A data.
pub fn table1_replicate(config: &Table1Config, replicate: usize) -> Vec<ReplicateRecord> {
    let methods = benchmark_methods(&config.k_range, &config.em);
    let cell = format!("n={}", config.n);
    evaluate(&cell, replicate, config.plan.l, &methods, table1_split(config, replicate))
}

pub fn run_table1(config: &Table1Config) -> Result<BenchOutput> {
    if config.replicates == 0 || config.n == 0 || config.test_n == 0 {
        return Err(BllimError::Validation("replicates, n and test size must be positive".into()));
    }
    let records: Vec<ReplicateRecord> = (0..config.replicates)
        .into_par_iter()
        .flat_map_iter(|r| table1_replicate(config, r))
        .collect();
    Ok(BenchOutput {
        summary: summarize(&records),
        records,
    })
}

fn cell_name(function: ManifoldFn, cov: NoiseStructure) -> String {
    let f = match function {
        ManifoldFn::F => "f",
        ManifoldFn::G => "g",
        ManifoldFn::H => "h",
    };
    let c = match cov {
        NoiseStructure::Factor => "factor",
        NoiseStructure::Toeplitz => "toeplitz",
        NoiseStructure::Identity => "identity",
        NoiseStructure::Blocks => "blocks",
    };
    format!("{c}/{f}")
}

/// Training and test samples sharing one manifold draw.
pub fn table2_split(
    config: &Table2Config,
    function: ManifoldFn,
    cov: NoiseStructure,
    replicate: usize,
) -> Result<(Dataset, Dataset)> {
    let spec = ManifoldSpec {
        function,
        covariance: cov,
        d: config.d,
        n: config.n,
        seed: replicate_seed(config.seed, replicate),
        ..Default::default()
    };
    let mut rng = rng_for(spec.seed, 0);
    let params = sample_manifold_params(&spec, &mut rng);
    let train = sample_manifold(&params, config.n, &mut rng)?;
    let test = sample_manifold(&params, config.test_n, &mut rng)?;
    Ok((train.data, test.data))
}

pub fn table2_replicate(
    config: &Table2Config,
    function: ManifoldFn,
    cov: NoiseStructure,
    replicate: usize,
) -> Vec<ReplicateRecord> {
    let methods = benchmark_methods(&config.k_range, &config.em);
    evaluate(
        &cell_name(function, cov),
        replicate,
        1,
        &methods,
        table2_split(config, function, cov, replicate),
    )
}

pub fn run_table2(config: &Table2Config) -> Result<BenchOutput> {
    if config.replicates == 0 || config.n == 0 || config.test_n == 0 || config.cells.is_empty() {
        return Err(BllimError::Validation(
            "cells, replicates, n and test size must be positive".into(),
        ));
    }
    let tasks: Vec<(ManifoldFn, NoiseStructure, usize)> = config
        .cells
        .iter()
        .flat_map(|&(f, c)| (0..config.replicates).map(move |r| (f, c, r)))
        .collect();
    let records: Vec<ReplicateRecord> = tasks
        .par_iter()
        .flat_map_iter(|&(f, c, r)| table2_replicate(config, f, c, r))
        .collect();
    Ok(BenchOutput {
        summary: summarize(&records),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn folds_partition_rows() {
        for n in [10, 23, 101] {
            let labels = fold_assignment(n, 10, 4, 2);
            let mut sizes = [0; 10];
            for &l in &labels {
                sizes[l] += 1;
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1);
            assert_eq!(sizes.iter().sum::<usize>(), n);
        }
        assert_eq!(fold_assignment(50, 5, 1, 0), fold_assignment(50, 5, 1, 0));
        assert_ne!(fold_assignment(50, 5, 1, 0), fold_assignment(50, 5, 1, 1));
    }

    #[test]
    fn constant_predictor_cv_matches_population_sd() {
        let mut rng = rng_for(8, 0);
        let n = 2000;
        let y = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(x, y).unwrap();
        let cfg = CvConfig {
            folds: 10,
            repetitions: 3,
            seed: 1,
        };
        let stats = cross_validate(&data, &cfg, &ConstantRegressor).unwrap();
        assert_eq!(stats.evaluations, 30);
        assert_eq!(stats.failures, 0);
        assert!((stats.mean[0] - 1.0).abs() < 0.05, "{:?}", stats.mean);
        assert_eq!(stats, cross_validate(&data, &cfg, &ConstantRegressor).unwrap());
    }

    #[test]
    fn summary_statistics() {
        let rec = |rep, v: Option<f64>| ReplicateRecord {
            cell: "c".into(),
            replicate: rep,
            method: "m".into(),
            response: 1,
            rmse: v,
            selected_k: None,
            mean_group_size: None,
            error: None,
        };
        let s = summarize(&[rec(0, Some(1.0)), rec(1, Some(3.0)), rec(2, None)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, 2.0);
        assert!((s[0].sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!((s[0].replicates, s[0].failures), (2, 1));
    }

    #[test]
    fn cv_rejects_bad_folds() {
        let data = Dataset::new(DMatrix::zeros(5, 1), DMatrix::zeros(5, 1)).unwrap();
        let cfg = CvConfig {
            folds: 6,
            repetitions: 1,
            seed: 0,
        };
        assert!(cross_validate(&data, &cfg, &ConstantRegressor).is_err());
    }
}
