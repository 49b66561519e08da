//! Acceptance suite: runs the default `all` experiment and reports one
//! pass/fail line per criterion, followed by the checks behind it.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use heishom::cellsolver::{
    ergodic_constant_ladder, CellProblem, Grid3, GridFunction, Scheme, SolverConfig,
};
use heishom::cli::{parse_config, resolve, run, Check, ExperimentConfig};
use heishom::model::ModelParams;
use heishom::operator::TestFunction;

struct Criterion {
    title: &'static str,
    /// Check names, or name prefixes ending in `[`.
    checks: &'static [&'static str],
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        title: "operator oracle: empirical order >= 0.9 on chi, U1, shifted log barrier",
        checks: &["operator_order["],
    },
    Criterion {
        title: "Lyapunov suite: chi closed form, U1 inequality, log-barrier supersolution",
        checks: &[
            "chi_closed_form",
            "u1_inequality_violations",
            "log_barrier_violations",
        ],
    },
    Criterion {
        title: "ergodic constant: |delta u(0) - MC| <= max(0.02, 4 se), gap decreasing",
        checks: &["ergodic_constant_gap", "ergodic_gap_decreasing"],
    },
    Criterion {
        title: "delta-uniform Lipschitz bound",
        checks: &["lipschitz_bound["],
    },
    Criterion {
        title: "log-growth constant varies < 20% across the ladder",
        checks: &["log_growth_variation"],
    },
    Criterion {
        title: "sup-norm and linear-growth barriers",
        checks: &["sup_norm[", "linear_growth_barrier["],
    },
    Criterion {
        title: "effective datum vs long-time fast average",
        checks: &["stabilization_datum"],
    },
    Criterion {
        title: "effective PDE exact on linear and constant data",
        checks: &["effective_linear_exact", "effective_constant_datum"],
    },
    Criterion {
        title: "eps-ladder convergence and y-independence",
        checks: &[
            "twoscale_gap_decreasing",
            "twoscale_final_gap",
            "y_independence_pairs",
            "y_independence_spread_shrinks",
        ],
    },
];

fn matches(check: &Check, pattern: &str) -> bool {
    if pattern.ends_with('[') {
        check.name.starts_with(pattern)
    } else {
        check.name == pattern
    }
}

fn report(index: usize, title: &str, pass: bool, details: &[String]) -> bool {
    println!(
        "criterion {index:>2} {}: {title}",
        if pass { "PASS" } else { "FAIL" }
    );
    for d in details {
        println!("    {d}");
    }
    pass
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn run_in_pool(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<(), String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| run(cfg, out))
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Reduced `all` run, executed with one and with four workers.
fn determinism(tmp: &Path) -> (bool, Vec<String>) {
    let cfg = parse_config(
        r#"{
          "trajectory": {"total_steps": 400000, "burn_in_steps": 10000},
          "cell": {"h": 0.5},
          "lyapunov": {"n_points": 20000, "order_h": [0.5, 0.25]},
          "stabilization": {"replicas": 400, "t_end": 2.0},
          "pde": {"dx": 0.1},
          "twoscale": {"n_samples": 400, "corrector_h": 0.5}
        }"#,
    )
    .and_then(resolve)
    .expect("reduced config");
    let (a, b) = (tmp.join("det_1"), tmp.join("det_4"));
    if let Err(e) = run_in_pool(&cfg, &a, 1).and_then(|_| run_in_pool(&cfg, &b, 4)) {
        return (false, vec![format!("run failed: {e}")]);
    }
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let mut details = Vec::new();
    let mut pass = !fa.is_empty() && fa.len() == fb.len();
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        let same = na == nb && ba == bb;
        pass &= same;
        details.push(format!(
            "{} {na} ({} bytes)",
            if same { "identical" } else { "DIFFERS" },
            ba.len()
        ));
    }
    (pass, details)
}

/// Change of `u_delta` on `|y|_inf <= 4` when the box grows from R = 8 to
/// R = 12 (h = 0.25), per ladder entry.
fn domain_sensitivity() -> Vec<Check> {
    let p = ModelParams::default();
    let solve = |radius: f64| {
        let grid = Grid3::new(radius, 0.25).expect("grid");
        let f = GridFunction::from_fn(grid, |y| TestFunction::CosSum.value(y));
        let problem = CellProblem::new(&f, &p, Scheme::Centered, SolverConfig::default());
        ergodic_constant_ladder(&problem, &p.delta_ladder)
            .expect("ladder")
            .solutions
    };
    let (small, large) = (solve(8.0), solve(12.0));
    small
        .iter()
        .zip(&large)
        .map(|(a, b)| {
            let d = a.u.max_diff_on_box(&b.u, 4.0).expect("same h");
            Check {
                name: format!("domain_sensitivity[delta={}]", a.delta),
                pass: d <= 1e-2,
                measured: d,
                bound: 1e-2,
            }
        })
        .collect()
}

fn main() -> ExitCode {
    let started = Instant::now();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let cfg = resolve(ExperimentConfig::default()).expect("default config resolves");
    let outcome = match run(&cfg, &tmp.path().join("all")) {
        Ok(o) => o,
        Err(e) => {
            println!("acceptance run failed: {e}");
            return ExitCode::FAILURE;
        }
    };

    let mut all = true;
    for (k, c) in CRITERIA.iter().enumerate() {
        let selected: Vec<&Check> = outcome
            .checks
            .iter()
            .filter(|ch| c.checks.iter().any(|p| matches(ch, p)))
            .collect();
        let pass = !selected.is_empty() && selected.iter().all(|ch| ch.pass);
        let details: Vec<String> = selected
            .iter()
            .map(|ch| {
                format!(
                    "{} {} measured={} bound={}",
                    if ch.pass { "ok  " } else { "FAIL" },
                    ch.name,
                    ch.measured,
                    ch.bound
                )
            })
            .collect();
        all &= report(k + 1, c.title, pass, &details);
    }
    let (pass, details) = determinism(tmp.path());
    all &= report(
        10,
        "determinism: byte-identical CSVs with 1 and 4 workers",
        pass,
        &details,
    );

    let extra = domain_sensitivity();
    let other: Vec<&Check> = outcome
        .checks
        .iter()
        .filter(|ch| {
            !CRITERIA
                .iter()
                .any(|c| c.checks.iter().any(|p| matches(ch, p)))
        })
        .chain(&extra)
        .collect();
    if !other.is_empty() {
        println!("supplementary checks:");
        for ch in other {
            println!(
                "    {} {} measured={} bound={}",
                if ch.pass { "ok  " } else { "FAIL" },
                ch.name,
                ch.measured,
                ch.bound
            );
        }
    }
    println!(
        "acceptance finished in {:.1} s",
        started.elapsed().as_secs_f64()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
