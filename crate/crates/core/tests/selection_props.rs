mod common;

use bllim::selection::{
    bllim_pipeline, conditional_loglik, initial_fit, slope_select, PipelineConfig, SelectionMethod,
};
use bllim::sim::{generate_plan_a, sample_plan_a_params, PlanASpec};
use bllim::{e_step, fit_from, BlockStructure, EmConfig, InverseParams};
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn argmin(points: &[(f64, usize)], kappa: f64) -> usize {
    let mut best = 0;
    for (i, &(g, d)) in points.iter().enumerate() {
        let (c, cb) = (g + kappa * d as f64, points[best].0 + kappa * points[best].1 as f64);
        if c < cb || (c == cb && d < points[best].1) {
            best = i;
        }
    }
    best
}

/// Sweeps every pairwise crossing of the penalized criteria, records the
/// selected dimension between consecutive crossings, and returns the
/// crossing with the largest drop (smallest on ties) plus the final choice.
fn sweep_oracle(points: &[(f64, usize)]) -> (usize, f64) {
    let mut breaks: Vec<f64> = Vec::new();
    for (i, a) in points.iter().enumerate() {
        for b in &points[..i] {
            let k = (a.0 - b.0) / (b.1 as f64 - a.1 as f64);
            if k > 0.0 && k.is_finite() {
                breaks.push(k);
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let dim = |k: f64| points[argmin(points, k)].1 as i64;
    let mut best = (0i64, 0.0);
    for (t, &b) in breaks.iter().enumerate() {
        let below = if t == 0 { b / 2.0 } else { (breaks[t - 1] + b) / 2.0 };
        let above = breaks.get(t + 1).map_or(2.0 * b + 1.0, |&n| (b + n) / 2.0);
        let jump = dim(below) - dim(above);
        if jump > best.0 {
            best = (jump, b);
        }
    }
    (argmin(points, 2.0 * best.1), best.1)
}

fn random_points(seed: u64) -> Vec<(f64, usize)> {
    let mut r = rng(seed);
    let m = r.gen_range(4..=12);
    let mut dims: Vec<usize> = (1..400).collect();
    dims.shuffle(&mut r);
    dims.truncate(m);
    dims.iter()
        .map(|&d| {
            // a decreasing trend with noise, like fitted likelihood paths
            let g = 5.0 / (1.0 + d as f64 / 20.0) - 0.002 * d as f64 + r.gen_range(-0.3..0.3);
            (g, d)
        })
        .collect()
}

fn small_plan_a(seed: u64, n: usize) -> bllim::Dataset {
    let theta = sample_plan_a_params(&PlanASpec {
        k: 2,
        d: 6,
        seed,
        ..PlanASpec::default()
    })
    .unwrap();
    generate_plan_a(&theta, n, seed).unwrap().data
}

#[test]
fn slope_choice_matches_breakpoint_sweep() {
    for seed in 0..100 {
        let points = random_points(seed);
        let out = slope_select(&points, 100).unwrap();
        let (index, kappa) = sweep_oracle(&points);
        assert!(!out.used_bic);
        assert_eq!(out.index, index, "seed {seed}");
        let got = out.kappa.unwrap();
        assert!((got - kappa).abs() <= 1e-9 * kappa.abs().max(1.0), "seed {seed}: {got} vs {kappa}");
    }
}

proptest! {
    #![proptest_config(config(100))]

    #[test]
    fn duplicates_do_not_change_the_choice(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let points = random_points(seed);
        let base = slope_select(&points, 100).unwrap();
        let mut doubled = points.clone();
        doubled.push(points[pick.index(points.len())]);
        let again = slope_select(&doubled, 100).unwrap();
        prop_assert_eq!(base, again);
    }

    #[test]
    fn dominated_candidates_do_not_change_the_choice(seed in any::<u64>(), extra in 1usize..100, worse in 0.0f64..3.0) {
        let points = random_points(seed);
        let base = slope_select(&points, 100).unwrap();
        let &(g, d) = points.iter().max_by_key(|p| p.1).unwrap();
        let mut more = points.clone();
        more.push((g + worse + 1e-6, d + extra));
        let again = slope_select(&more, 100).unwrap();
        prop_assert_eq!(base.index, again.index);
    }
}

proptest! {
    #![proptest_config(config(30))]

    #[test]
    fn conditional_is_joint_minus_response_marginal(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = r.gen_range(1..=3);
        let theta = random_theta(k, r.gen_range(1..=2), r.gen_range(1..=6), &mut r);
        let (data, _) = sample(&theta, 40, &mut r);
        let (_, joint) = e_step(&data, &theta).unwrap();
        let marginal: f64 = (0..data.n())
            .map(|i| {
                let y = data.y().row(i).transpose();
                let terms: Vec<f64> = theta.components.iter()
                    .map(|c| c.weight.ln() + dense_log_density(&y, &c.c, &c.gamma))
                    .collect();
                log_sum_exp(&terms)
            })
            .sum();
        let cond = conditional_loglik(&data, &theta).unwrap();
        prop_assert!((cond - (joint - marginal)).abs() <= 1e-9 * joint.abs().max(1.0));
    }

    #[test]
    fn conditional_ignores_cluster_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let theta = random_theta(3, 1, 4, &mut r);
        let (data, _) = sample(&theta, 30, &mut r);
        let reversed = InverseParams::new(
            theta.components.iter().rev().cloned().collect(),
            BlockStructure::new(theta.structure.clusters().iter().rev().cloned().collect()).unwrap(),
        ).unwrap();
        let a = conditional_loglik(&data, &theta).unwrap();
        let b = conditional_loglik(&data, &reversed).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

#[test]
fn single_cluster_conditional_is_regression_density() {
    let mut r = rng(4);
    let theta = random_theta(1, 2, 5, &mut r);
    let (data, _) = sample(&theta, 50, &mut r);
    let c = &theta.components[0];
    let expected: f64 = (0..data.n())
        .map(|i| {
            let y = data.y().row(i).transpose();
            let x = data.x().row(i).transpose();
            dense_log_density(&x, &(&c.a * y + &c.b), &c.sigma)
        })
        .sum();
    let got = conditional_loglik(&data, &theta).unwrap();
    assert!((got - expected).abs() < 1e-9 * expected.abs());
}

#[test]
fn single_k_single_candidate_is_returned() {
    let data = small_plan_a(1, 120);
    let config = PipelineConfig {
        max_candidates: Some(1),
        ..PipelineConfig::bllim(vec![1], EmConfig::default())
    };
    let out = bllim_pipeline(&data, &config).unwrap();
    assert_eq!(out.k, 1);
    assert_eq!(out.report.selected_k, 1);
    assert_eq!(out.report.per_k.len(), 1);
}

#[test]
fn reported_gamma_is_reproducible() {
    let data = small_plan_a(9, 300);
    let em = EmConfig::default();
    for selection in [SelectionMethod::Slope, SelectionMethod::Bic] {
        let config = PipelineConfig {
            selection,
            ..PipelineConfig::bllim(vec![1, 2], em.clone())
        };
        let out = bllim_pipeline(&data, &config).unwrap();
        let choice = out.report.per_k.iter().find(|c| c.k == out.k).unwrap();
        let init = initial_fit(&data, out.k, &em).unwrap();
        let refit = match choice.rank {
            None => init,
            Some(_) => fit_from(&data, &init.responsibilities, &out.structure, &em).unwrap(),
        };
        let gamma = -conditional_loglik(&data, &refit.theta).unwrap() / data.n() as f64;
        assert!((gamma - choice.gamma).abs() < 1e-10, "{gamma} vs {}", choice.gamma);
        assert_eq!(refit.theta, out.fit.theta);
    }
}

#[test]
fn report_lists_every_candidate_once() {
    let data = small_plan_a(2, 300);
    let config = PipelineConfig::bllim(vec![1, 2], EmConfig::default());
    let out = bllim_pipeline(&data, &config).unwrap();
    for k in [1, 2] {
        let ranks: Vec<Option<usize>> = out.report.candidates.iter().filter(|c| c.k == k).map(|c| c.rank).collect();
        assert_eq!(ranks[0], None);
        let mut seen = ranks.clone();
        seen.dedup();
        assert_eq!(seen, ranks);
        assert!(ranks.len() <= 1 + data.d());
    }
    assert!(out.report.candidates.iter().any(|c| c.gamma.is_some()));
}
