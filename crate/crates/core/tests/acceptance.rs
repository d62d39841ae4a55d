//! Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails.
//!
//! `RISKCAL_ACCEPTANCE_REPS` overrides the replicate count (default 500).
//! `RISKCAL_ACCEPTANCE_OUT` names a directory for the simulation tables.

mod common;

use std::process::ExitCode;

use common::fd::fd_discrepancies;
use common::props::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use riskcal::linalg::Covariates;
use riskcal::propensity::fit_propensity_arrays;
use riskcal::simulation::{
    emit_report, generate_population, population_truth, run_gamma_d_sweep, run_meta, run_scenario_on, stream_rng,
    write_sweep, Metric, MetricsTable, PopulationConfig, ScenarioConfig, ScenarioOutcome,
};
use riskcal::survival::fit_weighted_cox_arrays;
use riskcal::{
    breslow_baseline, kw_weights, par_baseline, Bandwidth, Estimator, HazardInterval, NewtonOptions, RegistrySummary,
};

struct Line {
    id: u8,
    pass: bool,
    detail: String,
}

fn line(id: u8, pass: bool, detail: impl Into<String>) -> Line {
    let l = Line { id, pass, detail: detail.into() };
    println!("criterion {:>2}: {}  {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    l
}

fn fmt3(v: [f64; 3]) -> String {
    format!("({:.2}, {:.2}, {:.2})", v[0], v[1], v[2])
}

fn rb(m: &[Metric; 3]) -> [f64; 3] {
    [m[0].rb_pct, m[1].rb_pct, m[2].rb_pct]
}

fn risk_row<'a>(t: &'a MetricsTable, scen: &str, method: &str) -> &'a [Metric; 3] {
    &t.table2_row(scen, method).unwrap_or_else(|| panic!("no row {scen} {method}")).risk
}

fn beta_row<'a>(t: &'a MetricsTable, scen: &str, est: &str) -> &'a [Metric; 3] {
    &t.table1_row(scen, est).unwrap_or_else(|| panic!("no row {scen} {est}")).beta
}

fn fd_oracle() -> Line {
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in [3, 17, 29] {
        for (_, _, dc, ds) in fd_discrepancies(seed, 70, 50) {
            worst = worst.max(dc).max(ds);
            count += 1;
        }
    }
    line(8, worst < 1e-3, format!("closed-form vs finite-difference deviates: worst relative error {worst:.2e} over {count} targets (< 1e-3)"))
}

fn run_prop<S: Strategy>(name: &str, strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, check).map_err(|e| format!("{name}: {e}"))
}

fn calibration_suite() -> Line {
    let results = [
        run_prop("mass conservation", kw_case(), |c| check_mass_conservation(&c)),
        run_prop("post_rg event cells", post_case(), |c| check_post_rg(&c)),
        run_prop("post_pop total", post_case(), |c| check_post_pop(&c)),
        run_prop("baselines and risks", surv_case(), |c| check_baselines_and_risk(&c)),
    ];
    let failed: Vec<&String> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    let detail = if failed.is_empty() {
        "mass conservation, post_rg cells, post_pop total, monotone baselines, bounded nondecreasing risks: 1000 cases each".to_string()
    } else {
        failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; ")
    };
    line(9, failed.is_empty(), detail)
}

fn analytic_oracles() -> Line {
    let mut errs = Vec::new();
    let tight = NewtonOptions::new(1e-12, 100);

    let xc = Covariates::new(100, 0, vec![]).with_intercept();
    let xs = Covariates::new(10, 0, vec![]).with_intercept();
    let g0 = fit_propensity_arrays(&xc, &[1.0; 100], &xs, &[10.0; 10], 0.5, &tight).unwrap().gamma[0];
    if (g0 - 2f64.ln()).abs() > 1e-8 {
        errs.push(format!("intercept-only gamma {g0}"));
    }

    let z = Covariates::new(4, 1, vec![1.0, 0.0, 1.0, 0.0]);
    let fit = fit_weighted_cox_arrays(&z, &[1.0, 2.0, 3.0, 4.0], &[true, true, false, false], &[1.0; 4], &tight).unwrap();
    if (fit.beta[0] - 2f64.sqrt().ln()).abs() > 1e-8 {
        errs.push(format!("4-unit Cox beta {}", fit.beta[0]));
    }

    // Null model: Breslow steps are Nelson-Aalen increments d_j / n_j.
    let z0 = Covariates::new(5, 0, vec![]);
    let x = [1.0, 2.0, 2.0, 3.0, 5.0];
    let d = [true, true, false, true, false];
    let null = fit_weighted_cox_arrays(&z0, &x, &d, &[1.0; 5], &tight).unwrap();
    let na = [1.0 / 5.0, 1.0 / 5.0 + 1.0 / 4.0, 1.0 / 5.0 + 1.0 / 4.0 + 1.0 / 2.0];
    let b = breslow_baseline(&null);
    for (t, v) in [1.0, 2.5, 4.0].iter().zip(na) {
        let got = b.eval(*t).unwrap();
        if (got - v).abs() > 1e-12 {
            errs.push(format!("Breslow at {t}: {got} vs Nelson-Aalen {v}"));
        }
    }

    let registry = RegistrySummary::new(
        1000,
        [("a".to_string(), 10)].into_iter().collect(),
        None,
        vec![HazardInterval { t0: 0.0, t1: 2.0, rate: 0.02 }, HazardInterval { t0: 2.0, t1: 10.0, rate: 0.05 }],
    )
    .unwrap();
    let par = par_baseline(&null, &registry).unwrap();
    for t in [0.0, 1.5, 2.0, 4.5] {
        let (got, want) = (par.eval(t).unwrap(), registry.cumulative_hazard(t).unwrap());
        if (got - want).abs() > 1e-12 {
            errs.push(format!("PAR at {t}: {got} vs registry {want}"));
        }
    }

    let w = kw_weights(&[0.0, 1.0], &[0.0, 1.0], &[10.0, 20.0], Bandwidth::Positive(1.0));
    if (w[0] - 13.775).abs() > 5e-4 || (w[1] - 16.225).abs() > 5e-4 {
        errs.push(format!("KW example {w:?}"));
    }

    let pass = errs.is_empty();
    let detail = if pass {
        "intercept-only log 2, 4-unit Cox log sqrt 2, null Breslow = Nelson-Aalen, null PAR = registry, KW (13.775, 16.225)".to_string()
    } else {
        errs.join("; ")
    };
    line(10, pass, detail)
}

fn simulation_criteria(reps: usize, out_dir: Option<&std::path::Path>) -> Vec<Line> {
    let pop_cfg = PopulationConfig::default();
    let pop = generate_population(&pop_cfg, &mut stream_rng(pop_cfg.seed, 0)).expect("population");
    let mut lines = Vec::new();
    let rate = 100.0 * pop.event_rate();
    lines.push(line(1, (rate - 8.12).abs() <= 0.3, format!("population event rate {rate:.3}% (8.12 +/- 0.3)")));

    let scenarios: Vec<ScenarioConfig> = (1..=4)
        .map(|id| {
            let mut s = ScenarioConfig::reference(id).unwrap();
            s.reps = reps;
            s
        })
        .collect();
    let truth = population_truth(&pop, &scenarios[0].lambda_grid, scenarios[0].risk_time).expect("truth");
    let outcomes: Vec<ScenarioOutcome> = scenarios
        .iter()
        .map(|s| {
            let start = std::time::Instant::now();
            let o = run_scenario_on(&pop, &truth, &pop_cfg, s).expect("scenario run");
            eprintln!("scenario {} done in {:.1} s, {} failures", s.name, start.elapsed().as_secs_f64(), o.failures);
            o
        })
        .collect();
    let mut t = MetricsTable::default();
    for o in &outcomes {
        t.extend(o.table.clone());
    }
    if let Some(dir) = out_dir {
        emit_report(dir, &outcomes, &run_meta(&pop_cfg, &outcomes)).expect("write tables");
    }
    let names: Vec<&str> = scenarios.iter().map(|s| s.name.as_str()).collect();

    let (naive1, post1) = (rb(beta_row(&t, names[0], "Naive")), rb(beta_row(&t, names[0], "Post-KW.S")));
    let ok = naive1.iter().chain(&post1).all(|v| v.abs() < 1.5);
    lines.push(line(2, ok, format!("scenario 1 beta RB%: naive {} post-KW.S {} (each |.| < 1.5)", fmt3(naive1), fmt3(post1))));

    let naive3 = beta_row(&t, names[2], "Naive")[1].rb_pct;
    let kws3 = beta_row(&t, names[2], "KW.S")[1].rb_pct;
    let post3 = beta_row(&t, names[2], "Post-KW.S")[1].rb_pct;
    let ok = (naive3 + 19.3).abs() <= 2.0 && kws3.abs() < 1.5 && post3.abs() < 1.5;
    lines.push(line(
        3,
        ok,
        format!("scenario 3 beta2 RB%: naive {naive3:.2} (-19.3 +/- 2), KW.S {kws3:.2}, post-KW.S {post3:.2} (|.| < 1.5)"),
    ));

    let nb = rb(risk_row(&t, names[1], "Naive (B)"));
    let pp = rb(risk_row(&t, names[1], "Post-KW.S (P)"));
    let target = [36.9, 29.5, 22.7];
    let ok = nb.iter().zip(target).all(|(v, g)| (v - g).abs() <= 3.0) && pp.iter().all(|v| v.abs() < 1.5);
    lines.push(line(
        4,
        ok,
        format!("scenario 2 risk RB%: naive(B) {} target {} +/- 3; post-KW.S(P) {} (|.| < 1.5)", fmt3(nb), fmt3(target), fmt3(pp)),
    ));

    let np: Vec<f64> = names.iter().map(|s| risk_row(&t, s, "Naive (P)")[2].rb_pct).collect();
    let ok = np.iter().all(|v| (v + 35.0).abs() <= 3.0);
    lines.push(line(5, ok, format!("naive(P) r_high RB% by scenario {np:.2?} (-35 +/- 3)")));

    let cohort_methods =
        ["Naive (B)", "Naive (P)", "KW.S (B)", "KW.S (P)", "Post-KW.S (B)", "Post-KW.S (P)"];
    let mut bad = Vec::new();
    for s in &names {
        let v = |m: &str, k: usize| risk_row(&t, s, m)[k].variance;
        for (k, r) in [(1, "r_med"), (2, "r_high")] {
            let (pp, kp, kb, pb) = (v("Post-KW.S (P)", k), v("KW.S (P)", k), v("KW.S (B)", k), v("Post-KW.S (B)", k));
            if !(pp < kp && kp < kb && pp < pb) {
                bad.push(format!("s{s} {r} V: postP {pp:.3e} kwsP {kp:.3e} kwsB {kb:.3e} postB {pb:.3e}"));
            }
        }
        for (k, r) in ["r_low", "r_med", "r_high"].iter().enumerate() {
            let mse = |m: &str| risk_row(&t, s, m)[k].mse;
            let best = cohort_methods.iter().min_by(|a, b| mse(a).total_cmp(&mse(b))).unwrap();
            if *best != "Post-KW.S (P)" {
                bad.push(format!("s{s} {r} min MSE {best} {:.3e} < postP {:.3e}", mse(best), mse("Post-KW.S (P)")));
            }
        }
    }
    let detail = if bad.is_empty() {
        "V postP < kwsP < kwsB and postP < postB (r_med, r_high); postP minimal MSE, all scenarios".to_string()
    } else {
        bad.join("; ")
    };
    lines.push(line(6, bad.is_empty(), detail));

    let ratios: Vec<[f64; 3]> = names
        .iter()
        .map(|s| {
            let m = risk_row(&t, s, "Post-KW.S (P)");
            [m[0].tl_ratio, m[1].tl_ratio, m[2].tl_ratio]
        })
        .collect();
    let ok = ratios.iter().flatten().all(|r| (0.85..=1.15).contains(r));
    let shown: Vec<String> = ratios.iter().map(|r| fmt3(*r)).collect();
    lines.push(line(7, ok, format!("post-KW.S(P) TL/empirical variance by scenario {} (in [0.85, 1.15])", shown.join(" "))));

    let gammas: Vec<f64> = (0..=5).map(|k| k as f64 / 10.0).collect();
    let mut base = scenarios[0].clone();
    base.estimators = vec![Estimator::Naive];
    let sweep = run_gamma_d_sweep(&pop, &pop_cfg, &base, &gammas).expect("sweep");
    if let Some(dir) = out_dir {
        write_sweep(&sweep, &dir.join("gamma_d_sweep.csv")).expect("write sweep");
    }
    let bres: Vec<f64> = sweep.iter().map(|r| r.rb_pct_breslow).collect();
    let par: Vec<f64> = sweep.iter().map(|r| r.rb_pct_par).collect();
    let rates: Vec<f64> = sweep.iter().map(|r| 100.0 * r.cohort_event_rate).collect();
    let rising = bres.windows(2).all(|w| w[1] > w[0]) && bres[bres.len() - 1] - bres[0] > 20.0;
    let flat = par.iter().all(|v| (v + 35.0).abs() <= 3.0);
    lines.push(line(
        11,
        rising && flat,
        format!("gamma_d 0..0.5: cohort event rate {rates:.1?}%, naive Breslow RB% {bres:.1?} (rising sharply), naive PAR RB% {par:.1?} (-35 +/- 3)"),
    ));
    lines
}

fn main() -> ExitCode {
    let reps = std::env::var("RISKCAL_ACCEPTANCE_REPS")
        .ok()
        .map(|s| s.parse::<usize>().expect("RISKCAL_ACCEPTANCE_REPS must be a positive integer"))
        .unwrap_or(500);
    let out = std::env::var_os("RISKCAL_ACCEPTANCE_OUT").map(std::path::PathBuf::from);
    println!("acceptance run with {reps} replicates per scenario");

    let mut lines = vec![fd_oracle(), calibration_suite(), analytic_oracles()];
    lines.extend(simulation_criteria(reps, out.as_deref()));
    lines.sort_by_key(|l| l.id);

    println!("\nsummary");
    for l in &lines {
        println!("criterion {:>2}: {}", l.id, if l.pass { "PASS" } else { "FAIL" });
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
