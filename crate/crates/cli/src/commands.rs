use std::fs;
use std::path::Path;

use bllim::bench::{
    cross_validate, run_table1, run_table2, BenchOutput, ConstantRegressor, CvConfig, PipelineRegressor, Regressor,
    Table1Config, Table2Config,
};
use bllim::blocks::ThresholdScale;
use bllim::io::{
    default_header, format_network, network, read_csv, read_dataset, read_model, write_atomic, write_csv,
    write_model, ModelDocument,
};
use bllim::selection::{bllim_pipeline, PipelineConfig, SelectionMethod};
use bllim::sim::{
    generate_manifold, generate_plan_a, sample_plan_a_params, snr, ManifoldCoefficients, ManifoldFn, ManifoldSpec,
    NoiseStructure, PlanASpec,
};
use bllim::{forward_from_inverse, BllimError, EmConfig, Predictor};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::{
    BenchArgs, CovTag, CvArgs, ExportArgs, FitArgs, FnTag, ManifoldArgs, Method, PlanAArgs, PredictArgs, RunArgs,
    Scale, Selection, TableTag,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(BllimError),
}

impl From<BllimError> for CliError {
    fn from(e: BllimError) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub exit_code: u8,
}

impl CliError {
    pub fn record(&self) -> ErrorRecord {
        let (error, exit_code) = match self {
            CliError::Usage(_) => ("usage", 1),
            CliError::Lib(e) => match e {
                BllimError::Parse { .. } => ("parse", 2),
                BllimError::Io(_) | BllimError::File { .. } => ("io", 2),
                BllimError::Json(_) => ("json", 2),
                BllimError::Validation(_) => ("validation", 2),
                BllimError::Dimension(_) => ("dimension", 2),
                BllimError::NotPositiveDefinite { .. } => ("not_positive_definite", 3),
                BllimError::Infeasible { .. } => ("infeasible", 3),
                BllimError::DegenerateCluster { .. } => ("degenerate_cluster", 3),
                BllimError::NoModel(_) => ("no_model", 3),
            },
        };
        let message = match self {
            CliError::Usage(m) => m.clone(),
            CliError::Lib(e) => e.to_string(),
        };
        ErrorRecord {
            error,
            message,
            exit_code,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn k_range(k_min: usize, k_max: usize) -> CliResult<Vec<usize>> {
    if k_min == 0 || k_min > k_max {
        return Err(CliError::Usage(format!(
            "--k-min ({k_min}) must be positive and not above --k-max ({k_max})"
        )));
    }
    Ok((k_min..=k_max).collect())
}

fn em_config(run: &RunArgs) -> EmConfig {
    EmConfig {
        max_iterations: run.max_iterations,
        tolerance: run.tolerance,
        restarts: run.restarts,
        ridge: run.ridge,
        min_mass: run.min_mass,
        seed: run.seed,
    }
}

fn pipeline_config(run: &RunArgs) -> CliResult<PipelineConfig> {
    let em = em_config(run);
    em.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if run.max_candidates == Some(0) {
        return Err(CliError::Usage("--max-candidates must be positive".into()));
    }
    let ks = k_range(run.k_min, run.k_max)?;
    let mut config = if run.diagonal {
        PipelineConfig::gllim(ks, em)
    } else {
        PipelineConfig::bllim(ks, em)
    };
    config.max_candidates = run.max_candidates;
    config.selection = match run.selection {
        Selection::Slope => SelectionMethod::Slope,
        Selection::Bic => SelectionMethod::Bic,
    };
    config.threshold_scale = match run.threshold_scale {
        Scale::Covariance => ThresholdScale::Covariance,
        Scale::Correlation => ThresholdScale::Correlation,
    };
    Ok(config)
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn fit(args: &FitArgs) -> CliResult {
    let config = pipeline_config(&args.run)?;
    let (data, _, _) = read_dataset(&args.x, &args.y)?;
    let out = bllim_pipeline(&data, &config)?;
    ensure_dir(&args.output_dir)?;
    let doc = ModelDocument::from_params(&out.fit.theta, Some(out.report.clone()));
    write_model(&args.output_dir.join("model.json"), &doc)?;
    write_json(&args.output_dir.join("report.json"), &out.report)?;
    println!(
        "selected K = {}, mean group size {:.3}, dimension {}",
        out.k,
        out.structure.mean_group_size(),
        out.fit.delta
    );
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CliResult {
    let theta = read_model(&args.model)?.to_params()?;
    let x = read_csv(&args.x)?;
    let predictor = Predictor::new(&forward_from_inverse(&theta)?)?;
    let pred = predictor.predict_rows(&x.values)?;
    let (values, header) = if args.weights {
        let mut m = DMatrix::zeros(pred.y.nrows(), pred.y.ncols() + pred.weights.ncols());
        m.columns_mut(0, pred.y.ncols()).copy_from(&pred.y);
        m.columns_mut(pred.y.ncols(), pred.weights.ncols()).copy_from(&pred.weights);
        let mut h = default_header("y", pred.y.ncols());
        h.extend(default_header("w", pred.weights.ncols()));
        (m, h)
    } else {
        let h = default_header("y", pred.y.ncols());
        (pred.y, h)
    };
    write_csv(&args.out, &header, &values)?;
    Ok(())
}

#[derive(Serialize)]
struct PlanATruth {
    kind: &'static str,
    spec: PlanASpec,
    n: usize,
    snr: f64,
    snr_per_cluster: Vec<f64>,
    /// 1-based cluster of every row
    labels: Vec<usize>,
    model: ModelDocument,
}

fn write_dataset(dir: &Path, x: &DMatrix<f64>, y: &DMatrix<f64>) -> CliResult {
    write_csv(&dir.join("X.csv"), &default_header("x", x.ncols()), x)?;
    write_csv(&dir.join("Y.csv"), &default_header("y", y.ncols()), y)?;
    Ok(())
}

pub fn simulate_plan_a(args: &PlanAArgs) -> CliResult {
    let spec = PlanASpec {
        k: args.k,
        l: args.l,
        d: args.d,
        seed: args.seed,
        rho: args.rho,
        ..Default::default()
    };
    if args.n < args.k * (args.l + 1) {
        return Err(CliError::Usage(format!(
            "--n must be at least K(L+1) = {}",
            args.k * (args.l + 1)
        )));
    }
    let theta = sample_plan_a_params(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let sample = generate_plan_a(&theta, args.n, args.seed)?;
    let (per, overall) = snr(&theta);
    ensure_dir(&args.output_dir)?;
    write_dataset(&args.output_dir, sample.data.x(), sample.data.y())?;
    write_json(
        &args.output_dir.join("truth.json"),
        &PlanATruth {
            kind: "plan-a",
            spec,
            n: args.n,
            snr: overall,
            snr_per_cluster: per,
            labels: sample.labels.iter().map(|l| l + 1).collect(),
            model: ModelDocument::from_params(&theta, None),
        },
    )
}

fn manifold_fn(tag: FnTag) -> ManifoldFn {
    match tag {
        FnTag::F => ManifoldFn::F,
        FnTag::G => ManifoldFn::G,
        FnTag::H => ManifoldFn::H,
    }
}

fn noise_structure(tag: CovTag) -> NoiseStructure {
    match tag {
        CovTag::Factor => NoiseStructure::Factor,
        CovTag::Toeplitz => NoiseStructure::Toeplitz,
        CovTag::Identity => NoiseStructure::Identity,
        CovTag::Blocks => NoiseStructure::Blocks,
    }
}

#[derive(Serialize)]
struct ManifoldTruth {
    kind: &'static str,
    spec: ManifoldSpec,
    coefficients: ManifoldCoefficients,
    /// D × D noise covariance, row-major
    noise_covariance: Vec<f64>,
    /// hidden responses (w1, w2) of every row
    hidden: Vec<[f64; 2]>,
}

pub fn simulate_manifold(args: &ManifoldArgs) -> CliResult {
    if args.n == 0 || args.d == 0 || args.factor_rank == 0 || args.block_size == 0 {
        return Err(CliError::Usage("--n, --d, --factor-rank and --block-size must be positive".into()));
    }
    let spec = ManifoldSpec {
        function: manifold_fn(args.function),
        d: args.d,
        n: args.n,
        covariance: noise_structure(args.cov),
        factor_rank: args.factor_rank,
        block_size: args.block_size,
        seed: args.seed,
    };
    let (sample, params) = generate_manifold(&spec)?;
    ensure_dir(&args.output_dir)?;
    write_dataset(&args.output_dir, sample.data.x(), sample.data.y())?;
    write_json(
        &args.output_dir.join("truth.json"),
        &ManifoldTruth {
            kind: "manifold",
            spec,
            coefficients: params.coefficients,
            noise_covariance: params.noise_cov.transpose().as_slice().to_vec(),
            hidden: sample.hidden.row_iter().map(|r| [r[0], r[1]]).collect(),
        },
    )
}

pub fn cv(args: &CvArgs) -> CliResult {
    if args.folds < 2 || args.repetitions == 0 {
        return Err(CliError::Usage("--folds must be at least 2 and --repetitions positive".into()));
    }
    let config = pipeline_config(&args.run)?;
    let (data, _, _) = read_dataset(&args.x, &args.y)?;
    let method: Box<dyn Regressor> = match args.method {
        Method::Constant => Box::new(ConstantRegressor),
        Method::Bllim => Box::new(PipelineRegressor {
            name: if config.search_structures { "bllim" } else { "gllim" }.into(),
            config,
        }),
    };
    let stats = cross_validate(
        &data,
        &CvConfig {
            folds: args.folds,
            repetitions: args.repetitions,
            seed: args.run.seed,
        },
        method.as_ref(),
    )?;
    ensure_dir(&args.output_dir)?;
    write_json(&args.output_dir.join("cv.json"), &stats)?;
    for (l, (m, s)) in stats.mean.iter().zip(&stats.sd).enumerate() {
        println!("response {}: RMSE {m:.4} ({s:.4})", l + 1);
    }
    println!("{} evaluations, {} failures", stats.evaluations, stats.failures);
    Ok(())
}

fn records_csv<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r).map_err(|e| CliError::Lib(BllimError::Validation(e.to_string())))?;
    }
    wtr.into_inner()
        .map_err(|e| CliError::Lib(BllimError::Validation(e.to_string())))
}

fn write_bench(dir: &Path, out: &BenchOutput) -> CliResult {
    ensure_dir(dir)?;
    write_atomic(&dir.join("records.csv"), &records_csv(&out.records)?)?;
    write_atomic(&dir.join("summary.csv"), &records_csv(&out.summary)?)?;
    for s in &out.summary {
        println!(
            "{:<16} {:<6} response {}  {:.3} ({:.3})  [{} ok, {} failed]",
            s.cell, s.method, s.response, s.mean, s.sd, s.replicates, s.failures
        );
    }
    Ok(())
}

pub fn bench(args: &BenchArgs) -> CliResult {
    let k = k_range(args.k_min, args.k_max)?;
    if args.replicates == 0 {
        return Err(CliError::Usage("--replicates must be positive".into()));
    }
    let em = EmConfig {
        seed: args.seed,
        ..Default::default()
    };
    let out = match args.table {
        TableTag::Table1 => {
            let mut config = Table1Config {
                replicates: args.replicates,
                k_range: k,
                em,
                seed: args.seed,
                ..Default::default()
            };
            config.n = args.n.unwrap_or(config.n);
            config.test_n = args.test_n.unwrap_or(config.test_n);
            config.plan.d = args.d.unwrap_or(config.plan.d);
            run_table1(&config).map_err(|e| CliError::Usage(e.to_string()))?
        }
        TableTag::Table2 => {
            let mut config = Table2Config {
                replicates: args.replicates,
                k_range: k,
                em,
                seed: args.seed,
                ..Default::default()
            };
            config.n = args.n.unwrap_or(config.n);
            config.test_n = args.test_n.unwrap_or(config.test_n);
            config.d = args.d.unwrap_or(config.d);
            if !args.functions.is_empty() || !args.cov.is_empty() {
                let fns: Vec<ManifoldFn> = if args.functions.is_empty() {
                    vec![ManifoldFn::F, ManifoldFn::G, ManifoldFn::H]
                } else {
                    args.functions.iter().map(|&f| manifold_fn(f)).collect()
                };
                let covs: Vec<NoiseStructure> = if args.cov.is_empty() {
                    [CovTag::Factor, CovTag::Toeplitz, CovTag::Identity, CovTag::Blocks]
                        .iter()
                        .map(|&c| noise_structure(c))
                        .collect()
                } else {
                    args.cov.iter().map(|&c| noise_structure(c)).collect()
                };
                config.cells = fns.iter().flat_map(|&f| covs.iter().map(move |&c| (f, c))).collect();
            }
            run_table2(&config).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    write_bench(&args.output_dir, &out)
}

pub fn export_network(args: &ExportArgs) -> CliResult {
    let theta = read_model(&args.model)?.to_params()?;
    if args.cluster == 0 || args.cluster > theta.k() {
        return Err(CliError::Lib(BllimError::Validation(format!(
            "--cluster must be between 1 and {}",
            theta.k()
        ))));
    }
    let net = network(&theta, args.cluster - 1)?;
    write_atomic(&args.out, format_network(&net).as_bytes())?;
    Ok(())
}
