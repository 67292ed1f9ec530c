//! Penalized-likelihood model selection and the end-to-end fitting procedure.
//!
//! For every number of clusters K: a diagonal-covariance fit, candidate block
//! structures from its thresholded residual covariances, one EM fit per
//! candidate, and a choice of structure. A second selection across K picks
//! the final model. Both levels minimize `γ + κ Δ` where `γ` is the mean
//! negative conditional log-likelihood of `x` given `y` and `Δ` the number of
//! free parameters; `κ` is calibrated separately at each level.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{threshold_path, to_correlation, RankedStructure, ThresholdScale};
use crate::em::{fit, fit_from, residual_covariance_full, EmConfig, FitResult};
use crate::error::{BllimError, Result};
use crate::linalg::log_sum_exp;
use crate::model::{forward_from_inverse, model_dimension, Dataset, ForwardParams, InverseParams};
use crate::structure::BlockStructure;

/// Minimum number of distinct dimensions for slope calibration; below it BIC is used.
pub const MIN_SLOPE_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    /// Dimension-jump calibrated slope heuristic, BIC when too few dimensions.
    #[default]
    Slope,
    Bic,
}

/// `Σ_i ln f(x_i | y_i)` where the gate uses the response marginals:
/// `f(x|y) = Σ_k [π_k φ_L(y; c_k, Γ_k) / Σ_j π_j φ_L(y; c_j, Γ_j)] φ_D(x; A_k y + b_k, Σ_k)`.
pub fn conditional_loglik(data: &Dataset, theta: &InverseParams) -> Result<f64> {
    let (gate, cond) = theta.log_density_terms(data)?;
    let mut total = 0.0;
    let mut joint = vec![0.0; theta.k()];
    let mut marginal = vec![0.0; theta.k()];
    for i in 0..data.n() {
        for k in 0..theta.k() {
            marginal[k] = gate[(i, k)];
            joint[k] = gate[(i, k)] + cond[(i, k)];
        }
        total += log_sum_exp(&joint) - log_sum_exp(&marginal);
    }
    Ok(total)
}

/// `-2 loglik + Δ ln n`; lower is better.
pub fn bic(loglik: f64, delta: usize, n: usize) -> f64 {
    -2.0 * loglik + delta as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeOutcome {
    /// Index into the input list.
    pub index: usize,
    /// Calibrated slope; `None` when no calibration took place.
    pub kappa: Option<f64>,
    pub used_bic: bool,
}

/// Argmin of `γ + penalty·Δ` with ties going to the smaller dimension.
fn argmin_penalized(points: &[(usize, f64, usize)], penalty: f64) -> usize {
    let crit = |&(_, g, d): &(usize, f64, usize)| g + penalty * d as f64;
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let (c, cb) = (crit(p), crit(&points[best]));
        if c < cb || (c == cb && p.2 < points[best].2) {
            best = i;
        }
    }
    best
}

/// Keeps the best `γ` per distinct dimension, dropping non-finite values, as
/// `(original index, γ, Δ)` sorted by Δ.
fn best_per_dimension(points: &[(f64, usize)]) -> Vec<(usize, f64, usize)> {
    let mut kept: Vec<(usize, f64, usize)> = Vec::new();
    for (i, &(g, d)) in points.iter().enumerate() {
        if !g.is_finite() {
            continue;
        }
        match kept.iter_mut().find(|p| p.2 == d) {
            Some(p) if g < p.1 => *p = (i, g, d),
            Some(_) => {}
            None => kept.push((i, g, d)),
        }
    }
    kept.sort_by_key(|p| p.2);
    kept
}

/// Dimension-jump estimate of κ: follows the selected dimension of
/// `argmin γ + κΔ` as κ grows from 0 and returns the breakpoint with the
/// largest drop in dimension (the first one on ties). `None` with fewer than
/// [`MIN_SLOPE_POINTS`] distinct finite dimensions.
pub fn dimension_jump(points: &[(f64, usize)]) -> Option<f64> {
    let kept = best_per_dimension(points);
    if kept.len() < MIN_SLOPE_POINTS {
        return None;
    }
    let mut current = argmin_penalized(&kept, 0.0);
    let mut kappa = 0.0_f64;
    let mut best_jump: Option<(usize, f64)> = None;
    while current > 0 {
        let (_, gc, dc) = kept[current];
        let mut next = 0;
        let mut next_kappa = f64::INFINITY;
        for (j, &(_, g, d)) in kept[..current].iter().enumerate() {
            let k = (g - gc) / (dc - d) as f64;
            // near-equal crossing points go to the smaller dimension (lower j)
            let tol = 1e-9 * k.abs().max(next_kappa.abs()).max(1e-300);
            if next_kappa.is_infinite() || k < next_kappa - tol {
                next_kappa = k;
                next = j;
            }
        }
        kappa = kappa.max(next_kappa);
        let jump = dc - kept[next].2;
        if best_jump.is_none_or(|(size, _)| jump > size) {
            best_jump = Some((jump, kappa));
        }
        current = next;
    }
    Some(best_jump.map_or(0.0, |(_, k)| k))
}

fn bic_choice(kept: &[(usize, f64, usize)], n: usize) -> SlopeOutcome {
    let best = kept
        .iter()
        .min_by(|a, b| {
            bic(-(n as f64) * a.1, a.2, n)
                .total_cmp(&bic(-(n as f64) * b.1, b.2, n))
                .then(a.2.cmp(&b.2))
        })
        .expect("non-empty candidate list");
    SlopeOutcome {
        index: best.0,
        kappa: None,
        used_bic: true,
    }
}

/// Slope-heuristic choice among `(γ, Δ)` pairs, `γ` being the mean negative
/// log-likelihood over `n` observations: κ̂ from [`dimension_jump`] on the
/// same points, then `argmin γ + 2κ̂Δ`. Equal-dimension candidates keep only
/// their best `γ`. With fewer than [`MIN_SLOPE_POINTS`] distinct dimensions
/// the choice is made by BIC instead.
pub fn slope_select(points: &[(f64, usize)], n: usize) -> Result<SlopeOutcome> {
    slope_select_calibrated(points, points, n)
}

/// Like [`slope_select`], but κ̂ is estimated on a separate `calibration`
/// collection (for instance every model fitted along the way) and only the
/// choice is made among `points`. Falls back to BIC among `points` when the
/// calibration collection is too small.
pub fn slope_select_calibrated(
    points: &[(f64, usize)],
    calibration: &[(f64, usize)],
    n: usize,
) -> Result<SlopeOutcome> {
    let kept = best_per_dimension(points);
    if kept.is_empty() {
        return Err(BllimError::NoModel("no candidate has a finite likelihood".into()));
    }
    if kept.len() == 1 {
        return Ok(SlopeOutcome {
            index: kept[0].0,
            kappa: None,
            used_bic: false,
        });
    }
    match dimension_jump(calibration) {
        None => Ok(bic_choice(&kept, n)),
        Some(kappa_hat) => {
            let chosen = argmin_penalized(&kept, 2.0 * kappa_hat);
            Ok(SlopeOutcome {
                index: kept[chosen].0,
                kappa: Some(kappa_hat),
                used_bic: false,
            })
        }
    }
}

fn select(
    points: &[(f64, usize)],
    calibration: &[(f64, usize)],
    n: usize,
    method: SelectionMethod,
) -> Result<SlopeOutcome> {
    match method {
        SelectionMethod::Slope => slope_select_calibrated(points, calibration, n),
        SelectionMethod::Bic => {
            let best = points
                .iter()
                .enumerate()
                .filter(|(_, p)| p.0.is_finite())
                .min_by(|(_, a), (_, b)| {
                    bic(-(n as f64) * a.0, a.1, n)
                        .total_cmp(&bic(-(n as f64) * b.0, b.1, n))
                        .then(a.1.cmp(&b.1))
                })
                .ok_or_else(|| BllimError::NoModel("no candidate has a finite likelihood".into()))?;
            Ok(SlopeOutcome {
                index: best.0,
                kappa: None,
                used_bic: true,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k_range: Vec<usize>,
    /// Candidate structures per K; `None` means D.
    pub max_candidates: Option<usize>,
    pub selection: SelectionMethod,
    pub em: EmConfig,
    pub threshold_scale: ThresholdScale,
    /// `false` keeps the diagonal structure only (plain GLLiM).
    pub search_structures: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_range: (1..=5).collect(),
            max_candidates: None,
            selection: SelectionMethod::Slope,
            em: EmConfig::default(),
            threshold_scale: ThresholdScale::Covariance,
            search_structures: true,
        }
    }
}

impl PipelineConfig {
    /// Diagonal residual covariances with K chosen by BIC.
    pub fn gllim(k_range: Vec<usize>, em: EmConfig) -> Self {
        PipelineConfig {
            k_range,
            selection: SelectionMethod::Bic,
            em,
            search_structures: false,
            ..Default::default()
        }
    }

    pub fn bllim(k_range: Vec<usize>, em: EmConfig) -> Self {
        PipelineConfig {
            k_range,
            em,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStatus {
    Fitted,
    Degenerate,
    Failed,
}

/// One row of the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub k: usize,
    /// Threshold-grid rank; `None` for the diagonal initialization fit.
    pub rank: Option<usize>,
    pub delta: usize,
    pub gamma: Option<f64>,
    pub status: CandidateStatus,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureChoice {
    pub k: usize,
    pub rank: Option<usize>,
    pub delta: usize,
    pub gamma: f64,
    pub kappa: Option<f64>,
    pub used_bic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidates: Vec<CandidateReport>,
    pub per_k: Vec<StructureChoice>,
    pub selected_k: usize,
    pub kappa_k: Option<f64>,
    pub k_used_bic: bool,
}

/// The structure chosen for one K.
#[derive(Debug, Clone)]
pub struct KSelection {
    pub fit: FitResult,
    pub choice: StructureChoice,
    pub reports: Vec<CandidateReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fit: FitResult,
    pub forward: ForwardParams,
    pub k: usize,
    pub structure: BlockStructure,
    pub report: SelectionReport,
}

/// Diagonal-covariance fit that seeds the structure search for one K.
pub fn initial_fit(data: &Dataset, k: usize, em: &EmConfig) -> Result<FitResult> {
    fit(data, k, &BlockStructure::diagonal(k, data.d()), em)
}

/// Per-cluster full residual covariances of a fit, optionally rescaled to correlations.
pub fn residual_matrices(data: &Dataset, fit: &FitResult, scale: ThresholdScale) -> Vec<DMatrix<f64>> {
    (0..fit.theta.k())
        .map(|k| {
            let s = residual_covariance_full(data, &fit.theta, &fit.responsibilities, k);
            match scale {
                ThresholdScale::Covariance => s,
                ThresholdScale::Correlation => to_correlation(&s),
            }
        })
        .collect()
}

pub fn structure_candidates(
    data: &Dataset,
    init: &FitResult,
    config: &PipelineConfig,
) -> Result<Vec<RankedStructure>> {
    let residuals = residual_matrices(data, init, config.threshold_scale);
    let m = config.max_candidates.unwrap_or(data.d()).max(1);
    Ok(threshold_path(&residuals, m)?.candidates)
}

fn report_for(k: usize, rank: Option<usize>, delta: usize, outcome: &Result<(FitResult, f64)>) -> CandidateReport {
    match outcome {
        Ok((fit, gamma)) => CandidateReport {
            k,
            rank,
            delta,
            gamma: Some(*gamma),
            status: CandidateStatus::Fitted,
            iterations: fit.iterations,
            message: None,
        },
        Err(e) => CandidateReport {
            k,
            rank,
            delta,
            gamma: None,
            status: if matches!(e, BllimError::DegenerateCluster { .. }) {
                CandidateStatus::Degenerate
            } else {
                CandidateStatus::Failed
            },
            iterations: match e {
                BllimError::DegenerateCluster { iteration, .. } => *iteration,
                _ => 0,
            },
            message: Some(e.to_string()),
        },
    }
}

fn gamma_of(data: &Dataset, fit: &FitResult) -> Result<f64> {
    Ok(-conditional_loglik(data, &fit.theta)? / data.n() as f64)
}

/// Fits every candidate from the initialization's responsibilities and picks one.
pub fn select_structure(
    data: &Dataset,
    init: &FitResult,
    candidates: &[RankedStructure],
    config: &PipelineConfig,
) -> Result<KSelection> {
    let k = init.theta.k();
    let outcomes: Vec<(Option<usize>, usize, Result<(FitResult, f64)>)> = candidates
        .par_iter()
        .map(|c| {
            let delta = model_dimension(k, data.l(), data.d(), &c.structure)?;
            let outcome = fit_from(data, &init.responsibilities, &c.structure, &config.em)
                .and_then(|f| gamma_of(data, &f).map(|g| (f, g)));
            Ok((Some(c.rank), delta, outcome))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<CandidateReport> = outcomes
        .iter()
        .map(|(rank, delta, o)| report_for(k, *rank, *delta, o))
        .collect();
    let fitted: Vec<(Option<usize>, FitResult, f64)> = outcomes
        .into_iter()
        .filter_map(|(rank, _, o)| o.ok().map(|(f, g)| (rank, f, g)))
        .collect();
    if fitted.is_empty() {
        return Err(BllimError::NoModel(format!("every candidate structure failed for K = {k}")));
    }
    let points: Vec<(f64, usize)> = fitted.iter().map(|(_, f, g)| (*g, f.delta)).collect();
    let outcome = select(&points, &points, data.n(), config.selection)?;
    let (rank, fit, gamma) = fitted.into_iter().nth(outcome.index).expect("index from points");
    Ok(KSelection {
        choice: StructureChoice {
            k,
            rank,
            delta: fit.delta,
            gamma,
            kappa: outcome.kappa,
            used_bic: outcome.used_bic,
        },
        fit,
        reports,
    })
}

fn fit_one_k(data: &Dataset, k: usize, config: &PipelineConfig) -> (Vec<CandidateReport>, Option<KSelection>) {
    let diag_delta = model_dimension(k, data.l(), data.d(), &BlockStructure::diagonal(k, data.d())).unwrap_or(0);
    let init = initial_fit(data, k, &config.em).and_then(|f| gamma_of(data, &f).map(|g| (f, g)));
    let init_report = report_for(k, None, diag_delta, &init);
    let (init, gamma) = match init {
        Ok(v) => v,
        Err(_) => return (vec![init_report], None),
    };
    if !config.search_structures {
        let choice = StructureChoice {
            k,
            rank: None,
            delta: init.delta,
            gamma,
            kappa: None,
            used_bic: false,
        };
        return (
            vec![init_report],
            Some(KSelection {
                fit: init,
                choice,
                reports: vec![],
            }),
        );
    }
    let selected = structure_candidates(data, &init, config)
        .and_then(|candidates| select_structure(data, &init, &candidates, config));
    match selected {
        Ok(mut sel) => {
            let mut reports = vec![init_report];
            reports.append(&mut sel.reports);
            (reports, Some(sel))
        }
        Err(e) => {
            let mut reports = vec![init_report];
            reports.push(CandidateReport {
                k,
                rank: Some(0),
                delta: 0,
                gamma: None,
                status: CandidateStatus::Failed,
                iterations: 0,
                message: Some(e.to_string()),
            });
            (reports, None)
        }
    }
}

/// Runs the whole procedure over `config.k_range` and returns the selected model.
pub fn bllim_pipeline(data: &Dataset, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.em.validate()?;
    if config.k_range.is_empty() || config.k_range.contains(&0) {
        return Err(BllimError::Validation("K range must be non-empty and positive".into()));
    }
    if data.n() == 0 {
        return Err(BllimError::Validation("dataset is empty".into()));
    }
    let mut ks = config.k_range.clone();
    ks.sort_unstable();
    ks.dedup();
    let per_k: Vec<(Vec<CandidateReport>, Option<KSelection>)> =
        ks.par_iter().map(|&k| fit_one_k(data, k, config)).collect();

    let mut candidates = Vec::new();
    let mut selections = Vec::new();
    for (mut reports, sel) in per_k {
        candidates.append(&mut reports);
        selections.extend(sel);
    }
    candidates.sort_by(|a, b| a.k.cmp(&b.k).then(a.rank.cmp(&b.rank)));
    if selections.is_empty() {
        let detail: Vec<String> = candidates
            .iter()
            .filter_map(|c| c.message.as_ref().map(|m| format!("K={}: {}", c.k, m)))
            .collect();
        return Err(BllimError::NoModel(detail.join("; ")));
    }
    let points: Vec<(f64, usize)> = selections.iter().map(|s| (s.choice.gamma, s.choice.delta)).collect();
    // κ_K is calibrated on every model fitted for any K; the choice is among the per-K winners
    let pooled: Vec<(f64, usize)> = candidates
        .iter()
        .filter_map(|c| c.gamma.map(|g| (g, c.delta)))
        .collect();
    let outcome = select(&points, &pooled, data.n(), config.selection)?;
    let per_k_choices = selections.iter().map(|s| s.choice.clone()).collect();
    let chosen = selections.swap_remove(outcome.index);
    let forward = forward_from_inverse(&chosen.fit.theta)?;
    Ok(PipelineOutput {
        k: chosen.choice.k,
        structure: chosen.fit.theta.structure.clone(),
        forward,
        report: SelectionReport {
            candidates,
            per_k: per_k_choices,
            selected_k: chosen.choice.k,
            kappa_k: outcome.kappa,
            k_used_bic: outcome.used_bic,
        },
        fit: chosen.fit,
    })
}
