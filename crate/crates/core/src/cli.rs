//! Experiment orchestration behind the `heishom` binary: the JSON config
//! schema, the named experiments, their report files and the checks they
//! record.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, UnitBall, UnitSphere};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cellsolver::{
    barrier_checks, corrector, discretize_generator, ergodic_constant_ladder, write_ladder_csv,
    CellConfig, CellProblem, Grid3, GridFunction,
};
use crate::effective::{
    effective_value_at, estimate_fast_moments, solve_effective_pde, stabilization_average,
    EffectiveField, EffectiveSolution, EffectiveValue, FastMoments, PdeConfig, SlowGrid,
};
use crate::error::Error;
use crate::model::{validate_params, ControlModel, ModelId, ModelParams};
use crate::operator::{
    apply_generator, generator_u1, log_barrier_supersolution, log_barrier_terms,
    lyapunov_u1_certificate, neg_generator_chi, FastState, TestFunction,
};
use crate::rng::{stream, Domain};
use crate::sde::{
    estimate_invariant_integral, moment_diagnostics, InvariantEstimate, TrajectoryConfig,
};
use crate::twoscale::{
    default_dt, epsilon_ladder_experiment, write_ladder_csv as write_twoscale_csv,
    y_independence_check, CoupledState, LadderRow, Policy,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Sup norm and Lipschitz constant used for the cell-problem source
/// `cos y1 + cos y2 + cos y3` in the barrier and Lipschitz checks.
const CELL_SOURCE_SUP: f64 = 3.0;
const CELL_SOURCE_LIPSCHITZ: f64 = 1.0;
const BARRIER_TOL: f64 = 1e-6;
const MIN_ORDER: f64 = 0.9;
const MAX_GROWTH_VARIATION: f64 = 0.2;
const ERGODIC_ABS_TOL: f64 = 0.02;
const SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Ergodic,
    Cell,
    Lyapunov,
    Effective,
    Twoscale,
    #[default]
    All,
}

impl ExperimentKind {
    fn stages(self) -> Vec<ExperimentKind> {
        use ExperimentKind::*;
        match self {
            All => vec![Ergodic, Cell, Lyapunov, Effective, Twoscale],
            k => vec![k],
        }
    }

    fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ergodic => "ergodic",
            ExperimentKind::Cell => "cell",
            ExperimentKind::Lyapunov => "lyapunov",
            ExperimentKind::Effective => "effective",
            ExperimentKind::Twoscale => "twoscale",
            ExperimentKind::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovConfig {
    /// Random points per inequality.
    pub n_points: usize,
    /// Sampling ball radius.
    pub radius: f64,
    /// Rate in `-L U1 >= gamma U1 - beta`; half the admissible maximum when
    /// absent.
    pub gamma: Option<f64>,
    /// Grid steps of the operator-consistency study, coarse first.
    pub order_h: [f64; 2],
    /// Truncation radius of the operator-consistency grids.
    #[serde(rename = "order_R")]
    pub order_radius: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            n_points: 1_000_000,
            radius: 20.0,
            gamma: None,
            order_h: [0.25, 0.125],
            order_radius: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizationConfig {
    pub y0: [f64; 3],
    pub t_end: f64,
    pub dt: f64,
    pub replicas: usize,
}

impl Default for StabilizationConfig {
    fn default() -> Self {
        StabilizationConfig {
            y0: [1.0, 1.0, 1.0],
            t_end: 20.0,
            dt: 1e-3,
            replicas: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoScaleConfig {
    pub n_samples: usize,
    /// Fast starting point of the ladder.
    pub y0: [f64; 3],
    /// Starting points compared at the ends of the ladder; must be nodes of
    /// the corrector grid.
    pub y_starts: Vec<[f64; 3]>,
    #[serde(rename = "corrector_R")]
    pub corrector_radius: f64,
    pub corrector_h: f64,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        TwoScaleConfig {
            n_samples: 20_000,
            y0: [1.0, 1.0, 1.0],
            y_starts: vec![[1.0, 1.0, 1.0], [-2.0, 0.0, 3.0], [0.0, 0.0, 0.0]],
            corrector_radius: 8.0,
            corrector_h: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub params: ModelParams,
    pub model_id: String,
    pub experiment: ExperimentKind,
    /// Slow point where values are reported; the origin when absent.
    pub slow_point: Option<Vec<f64>>,
    pub trajectory: TrajectoryConfig,
    pub cell: CellConfig,
    pub pde: PdeConfig,
    pub lyapunov: LyapunovConfig,
    pub stabilization: StabilizationConfig,
    pub twoscale: TwoScaleConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            params: ModelParams::default(),
            model_id: ModelId::CosRunningCost.as_str().into(),
            experiment: ExperimentKind::All,
            slow_point: None,
            trajectory: TrajectoryConfig::default(),
            cell: CellConfig::default(),
            pde: PdeConfig::default(),
            lyapunov: LyapunovConfig::default(),
            stabilization: StabilizationConfig::default(),
            twoscale: TwoScaleConfig::default(),
            output_dir: None,
        }
    }
}

/// Single-line error, printed as `scope: message`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub scope: &'static str,
    pub message: String,
}

impl CliError {
    fn new(scope: &'static str, message: impl Into<String>) -> Self {
        CliError {
            scope,
            message: message.into().replace('\n', " "),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.scope, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownModel(_) => CliError::new("model", e.to_string()),
            Error::InvalidArgument(m) => CliError::new("config", m),
            e => CliError::new("numerics", e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
}

impl Check {
    fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            pass: measured <= bound,
            measured,
            bound,
        }
    }

    fn at_least(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            pass: measured >= bound,
            measured,
            bound,
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::new("config", e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_config(&text)
}

/// Fills the optional fields and rejects inconsistent configs.
pub fn resolve(mut cfg: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
    let report = validate_params(&cfg.params);
    if !report.is_ok() {
        return Err(CliError::new("params", report.messages().join("; ")));
    }
    ModelId::parse(&cfg.model_id)?;
    cfg.trajectory.validate()?;
    let n = cfg.params.n_slow;
    let x = cfg.slow_point.get_or_insert_with(|| vec![0.0; n]);
    if x.len() != n || x.iter().any(|v| !v.is_finite()) {
        return Err(CliError::new(
            "config",
            format!("slow_point must have {n} finite components"),
        ));
    }
    if cfg.lyapunov.gamma.is_none() {
        let p = &cfg.params;
        cfg.lyapunov.gamma = Some(0.5 * (2.0 * p.k3).min(4.0 * p.k1).min(4.0 * p.k2));
    }
    if cfg.lyapunov.n_points == 0 || !(cfg.lyapunov.radius > 0.0) {
        return Err(CliError::new(
            "config",
            "lyapunov: n_points >= 1 and radius > 0 required",
        ));
    }
    if !(cfg.lyapunov.order_h[1] < cfg.lyapunov.order_h[0]) {
        return Err(CliError::new(
            "config",
            "lyapunov: order_h must be decreasing",
        ));
    }
    if cfg.twoscale.y_starts.len() < 2 {
        return Err(CliError::new(
            "config",
            "twoscale: at least two y_starts required",
        ));
    }
    cfg.output_dir
        .get_or_insert_with(|| PathBuf::from("heishom-out"));
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub metadata_path: PathBuf,
}

impl RunOutcome {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Runs the selected experiments of a resolved config into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut lab = Lab {
        cfg,
        model: ControlModel::new(ModelId::parse(&cfg.model_id)?),
        x: cfg
            .slow_point
            .clone()
            .unwrap_or_else(|| vec![0.0; cfg.params.n_slow]),
        out: out.to_path_buf(),
        files: Vec::new(),
        checks: Vec::new(),
        results: serde_json::Map::new(),
        moments: None,
        effective: None,
    };
    for stage in cfg.experiment.stages() {
        match stage {
            ExperimentKind::Ergodic => lab.ergodic()?,
            ExperimentKind::Cell => lab.cell()?,
            ExperimentKind::Lyapunov => lab.lyapunov()?,
            ExperimentKind::Effective => lab.effective()?,
            ExperimentKind::Twoscale => lab.twoscale()?,
            ExperimentKind::All => unreachable!("expanded by stages()"),
        }
    }
    let all_pass = lab.checks.iter().all(|c| c.pass);
    let metadata = json!({
        "schema_version": SCHEMA_VERSION,
        "heishom_version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment.name(),
        "model_id": cfg.model_id,
        "config": cfg,
        "seeds": {
            "master_seed": cfg.params.master_seed,
            "trajectory_seed": cfg.trajectory.seed,
        },
        "wall_time_seconds": start.elapsed().as_secs_f64(),
        "files": lab.files,
        "results": Value::Object(lab.results),
        "checks": lab.checks,
        "all_pass": all_pass,
    });
    let metadata_path = out.join("metadata.json");
    write_json(&metadata_path, &metadata)?;
    Ok(RunOutcome {
        checks: lab.checks,
        files: lab.files,
        metadata_path,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn csv_is_finite(text: &str) -> bool {
    text.lines()
        .skip(1)
        .flat_map(|l| l.split(','))
        .all(|f| !(f == "NaN" || f.ends_with("inf")))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct MomentCache {
    key: String,
    model_id: String,
    params: ModelParams,
    trajectory: TrajectoryConfig,
    moments: FastMoments,
}

struct Lab<'a> {
    cfg: &'a ExperimentConfig,
    model: ControlModel,
    x: Vec<f64>,
    out: PathBuf,
    files: Vec<String>,
    checks: Vec<Check>,
    results: serde_json::Map<String, Value>,
    moments: Option<FastMoments>,
    effective: Option<(EffectiveValue, EffectiveSolution)>,
}

impl Lab<'_> {
    fn params(&self) -> &ModelParams {
        &self.cfg.params
    }

    fn write_csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        let path = self.out.join(name);
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| io_error(&path, e))?;
        let text = String::from_utf8(buf).map_err(|e| io_error(&path, e))?;
        if !csv_is_finite(&text) {
            return Err(CliError::new(
                "numerics",
                format!("non-finite value in {name}"),
            ));
        }
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        self.files.push(name.into());
        Ok(())
    }

    fn write_sidecar(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        write_json(&self.out.join(name), value)?;
        self.files.push(name.into());
        Ok(())
    }

    fn cache_key(&self) -> (String, PathBuf) {
        let material =
            serde_json::to_string(&(&self.cfg.model_id, &self.cfg.params, &self.cfg.trajectory))
                .expect("config serializes");
        let key = hex::encode(Sha256::digest(material.as_bytes()));
        let path = self.out.join(format!("mu_moments_{}.json", &key[..16]));
        (key, path)
    }

    fn store_moments(&mut self, moments: FastMoments) -> Result<(), CliError> {
        let (key, path) = self.cache_key();
        let cache = MomentCache {
            key,
            model_id: self.cfg.model_id.clone(),
            params: self.cfg.params.clone(),
            trajectory: self.cfg.trajectory.clone(),
            moments,
        };
        write_json(&path, &cache)?;
        self.moments = Some(moments);
        Ok(())
    }

    /// `E_mu[cos y3]` from memory, the on-disk cache, or a fresh estimate.
    fn moments(&mut self) -> Result<FastMoments, CliError> {
        if let Some(m) = self.moments {
            return Ok(m);
        }
        let (key, path) = self.cache_key();
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(cache) = serde_json::from_str::<MomentCache>(&text) {
                if cache.key == key
                    && cache.params == self.cfg.params
                    && cache.trajectory == self.cfg.trajectory
                {
                    self.moments = Some(cache.moments);
                    return Ok(cache.moments);
                }
            }
        }
        let moments = estimate_fast_moments(&self.cfg.trajectory, self.params())?;
        self.store_moments(moments)?;
        Ok(moments)
    }

    fn ergodic(&mut self) -> Result<(), CliError> {
        let report = moment_diagnostics(&self.cfg.trajectory, self.params())?;
        self.write_csv("moments.csv", |w| {
            use std::io::Write;
            writeln!(w, "statistic,estimate,std_error,effective_samples")?;
            for r in &report.rows {
                let e = r.estimate;
                writeln!(
                    w,
                    "{},{},{},{}",
                    r.statistic, e.mean, e.std_error, e.effective_samples
                )?;
            }
            Ok(())
        })?;
        for r in &report.rows {
            self.checks.push(Check::at_most(
                format!("moment_window_stable[{}]", r.statistic),
                (r.estimate.mean - r.half_window.mean).abs(),
                SIGMAS * r.estimate.combined_error(&r.half_window),
            ));
        }
        // (y1, y2, y3) -> (-y1, -y2, y3) maps the dynamics to themselves.
        for name in ["E[y1]", "E[y2]"] {
            if let Some(r) = report.get(name) {
                self.checks.push(Check::at_most(
                    format!("moment_symmetry[{name}]"),
                    r.estimate.mean.abs(),
                    SIGMAS * r.estimate.std_error,
                ));
            }
        }
        let cos = report
            .get("E[cos y3]")
            .expect("moment table lists E[cos y3]")
            .estimate;
        self.store_moments(FastMoments { cos_y3: cos })?;
        self.results.insert(
            "ergodic".into(),
            json!({ "clip_rate": report.clip_rate, "far_fraction": report.far_fraction, "converged": report.converged }),
        );
        Ok(())
    }

    fn cell(&mut self) -> Result<(), CliError> {
        let p = self.params().clone();
        let cell = self.cfg.cell;
        let grid = cell.grid()?;
        let source = TestFunction::CosSum;
        let f = GridFunction::from_fn(grid, |y| source.value(y));
        let problem = CellProblem::new(&f, &p, cell.scheme, cell.solver);
        let run = ergodic_constant_ladder(&problem, &p.delta_ladder)?;
        let reference = estimate_invariant_integral(|y| source.value(y), &self.cfg.trajectory, &p)?;
        self.write_csv("cell_ladder.csv", |w| write_ladder_csv(&run.entries, w))?;

        let gaps: Vec<f64> = run
            .entries
            .iter()
            .map(|e| (e.lambda - reference.mean).abs())
            .collect();
        let last = *gaps.last().expect("nonempty ladder");
        self.checks.push(Check::at_most(
            "ergodic_constant_gap",
            last,
            ERGODIC_ABS_TOL.max(SIGMAS * reference.std_error),
        ));
        let worst_increase = gaps
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        if gaps.len() > 1 {
            self.checks.push(Check {
                name: "ergodic_gap_decreasing".into(),
                pass: worst_increase < 0.0,
                measured: worst_increase,
                bound: 0.0,
            });
        }
        let lip_bound = CELL_SOURCE_LIPSCHITZ / (p.k1 - 4.0).min(p.k2 - 4.0).min(p.k3) + 0.1;
        let growth: Vec<f64> = run.entries.iter().map(|e| e.growth_constant).collect();
        for e in &run.entries {
            self.checks.push(Check::at_most(
                format!("lipschitz_bound[delta={}]", e.delta),
                e.lipschitz,
                lip_bound,
            ));
        }
        let (lo, hi) = growth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| {
                (a.min(c), b.max(c))
            });
        let mean = growth.iter().sum::<f64>() / growth.len() as f64;
        let variation = if growth.iter().all(|c| c.is_finite()) && mean > 0.0 {
            (hi - lo) / mean
        } else {
            f64::INFINITY
        };
        self.checks.push(Check {
            name: "log_growth_variation".into(),
            pass: variation < MAX_GROWTH_VARIATION,
            measured: variation,
            bound: MAX_GROWTH_VARIATION,
        });
        for sol in &run.solutions {
            for b in barrier_checks(
                &sol.u,
                &f,
                sol.delta,
                (CELL_SOURCE_SUP, CELL_SOURCE_LIPSCHITZ),
                &p,
                BARRIER_TOL,
            )? {
                self.checks.push(Check {
                    name: format!("{}[delta={}]", b.name, sol.delta),
                    pass: b.pass,
                    measured: b.measured,
                    bound: b.bound,
                });
            }
        }
        let sol = run.solutions.last().expect("nonempty ladder");
        let origin = sol.u.at_origin();
        let w = sol.u.map(|v| v - origin);
        let defect = problem.corrector_defect(sol);
        let path = self.out.join("cell_corrector.bin");
        let mut bytes = Vec::new();
        w.write_binary(&mut bytes).map_err(|e| io_error(&path, e))?;
        fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
        self.files.push("cell_corrector.bin".into());
        self.results.insert(
            "cell".into(),
            json!({
                "source": "cos y1 + cos y2 + cos y3",
                "reference": reference,
                "gaps": gaps,
                "corrector_defect": defect,
                "corrector_delta": sol.delta,
                "corrector_sup": w.max_abs(),
            }),
        );
        Ok(())
    }

    fn lyapunov(&mut self) -> Result<(), CliError> {
        let p = self.params().clone();
        let lc = self.cfg.lyapunov.clone();

        // Operator consistency under h-halving.
        let tests = [
            ("chi", TestFunction::Chi),
            ("u1", TestFunction::U1),
            (
                "shifted_log_barrier",
                TestFunction::LogBarrier {
                    c1: 1.0,
                    shift: 1.0,
                },
            ),
        ];
        let mut rows = Vec::new();
        for (name, tf) in tests {
            let mut errors = [0.0; 2];
            for (k, &h) in lc.order_h.iter().enumerate() {
                errors[k] = consistency_error(&tf, lc.order_radius, h, &self.cfg.cell, &p)?;
            }
            let ratio = lc.order_h[0] / lc.order_h[1];
            // An error at rounding level on the fine grid counts as exact.
            let order = if errors[1] <= 1e-10 * errors[0].max(1.0) {
                f64::INFINITY
            } else {
                (errors[0] / errors[1]).ln() / ratio.ln()
            };
            rows.push((name, errors, order));
            self.checks.push(Check::at_least(
                format!("operator_order[{name}]"),
                order,
                MIN_ORDER,
            ));
        }
        let order_h = lc.order_h;
        self.write_csv("operator_order.csv", |w| {
            use std::io::Write;
            writeln!(w, "function,h,max_error,error_over_h")?;
            for (name, errors, _) in &rows {
                for (e, h) in errors.iter().zip(order_h) {
                    writeln!(w, "{name},{h},{e},{}", e / h)?;
                }
            }
            Ok(())
        })?;

        // Pointwise inequalities on random points.
        let gamma = lc.gamma.expect("resolved");
        let beta = lyapunov_u1_certificate(gamma, &p)?;
        let mut rng = stream(p.master_seed, Domain::Sampling, 0);
        let (mut chi_err, mut u1_viol, mut u1_margin): (f64, u64, f64) = (0.0, 0, f64::INFINITY);
        for _ in 0..lc.n_points {
            let v: [f64; 3] = UnitBall.sample(&mut rng);
            let y = FastState::new(v[0] * lc.radius, v[1] * lc.radius, v[2] * lc.radius);
            let generic = -apply_generator(&TestFunction::Chi.eval(&y), &y, &p);
            chi_err = chi_err.max((generic - neg_generator_chi(&y, &p)).abs());
            let margin = -generator_u1(&y, &p) - (gamma * TestFunction::U1.value(&y) - beta);
            u1_margin = u1_margin.min(margin);
            u1_viol += (margin < 0.0) as u64;
        }
        self.checks
            .push(Check::at_most("chi_closed_form", chi_err, 1e-10));
        self.checks.push(Check::at_most(
            "u1_inequality_violations",
            u1_viol as f64,
            0.0,
        ));

        let barrier = log_barrier_supersolution(CELL_SOURCE_SUP, &p);
        let (r_in, r_out) = (barrier.radius, lc.radius.max(barrier.radius));
        let mut rng = stream(p.master_seed, Domain::Sampling, 1);
        let (mut log_viol, mut log_margin): (u64, f64) = (0, f64::INFINITY);
        for _ in 0..lc.n_points {
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let s: f64 = rand::Rng::random(&mut rng);
            let r = (r_in.powi(3) + s * (r_out.powi(3) - r_in.powi(3))).cbrt();
            let y = FastState::new(dir[0] * r, dir[1] * r, dir[2] * r);
            let (trace, drift) = log_barrier_terms(&y, barrier.c1, &p)?;
            // delta g - L g >= F for all delta >= 0 needs g >= 0 as well.
            let margin = (-(trace + drift) - CELL_SOURCE_SUP).min(barrier.c1 * y.gauge4().ln());
            log_margin = log_margin.min(margin);
            log_viol += (margin < 0.0) as u64;
        }
        self.checks.push(Check::at_most(
            "log_barrier_violations",
            log_viol as f64,
            0.0,
        ));

        let n = lc.n_points;
        self.write_csv("lyapunov.csv", |w| {
            use std::io::Write;
            writeln!(w, "inequality,n_points,violations,worst_margin")?;
            writeln!(
                w,
                "chi_closed_form,{n},{},{}",
                (chi_err > 1e-10) as u64,
                -chi_err
            )?;
            writeln!(w, "u1,{n},{u1_viol},{u1_margin}")?;
            writeln!(w, "log_barrier,{n},{log_viol},{log_margin}")?;
            Ok(())
        })?;
        self.results.insert(
            "lyapunov".into(),
            json!({
                "gamma": gamma,
                "beta": beta,
                "log_barrier": { "c1": barrier.c1, "radius": barrier.radius, "f_sup": CELL_SOURCE_SUP },
                "operator_order": rows.iter().map(|(n, e, o)| json!({"function": n, "errors": e, "order": o})).collect::<Vec<_>>(),
            }),
        );
        Ok(())
    }

    fn effective_solution(&mut self) -> Result<(EffectiveValue, EffectiveSolution), CliError> {
        if let Some(done) = &self.effective {
            return Ok(done.clone());
        }
        let field = EffectiveField::new(self.model.clone(), self.moments()?);
        let pde = PdeConfig {
            store_policy: self.cfg.pde.store_policy || !self.model.is_singleton(),
            ..self.cfg.pde
        };
        let done = effective_value_at(&field, &self.x, self.params(), &pde)?;
        self.effective = Some(done.clone());
        Ok(done)
    }

    fn effective(&mut self) -> Result<(), CliError> {
        let p = self.params().clone();
        let pde = self.cfg.pde;
        let moments = self.moments()?;
        let (value, sol) = self.effective_solution()?;
        self.write_csv("effective.csv", |w| sol.write_csv(pde.report_half_width, w))?;
        let sidecar = json!({
            "model_id": self.cfg.model_id,
            "grid": sol.grid,
            "dt": sol.dt,
            "n_timesteps": sol.n_timesteps,
            "moments": moments,
            "slow_point": self.x,
            "value": value,
        });
        self.write_sidecar("effective.json", &sidecar)?;

        // Closed-form cases of the scheme, independent of the chosen model.
        let lin = EffectiveField::new(
            ControlModel::new(ModelId::UncontrolledLinear),
            FastMoments {
                cos_y3: InvariantEstimate::exact(0.0),
            },
        );
        let linear = solve_closed_form(&lin, &pde, &p)?;
        let mut err: f64 = 0.0;
        for (t, v) in linear.times.iter().zip(&linear.snapshots) {
            let decay = (-p.a * (p.horizon - t)).exp();
            for (idx, value) in v.iter().enumerate() {
                let x = linear.grid.point(idx);
                if x[..linear.grid.n_dim]
                    .iter()
                    .all(|c| c.abs() <= linear.grid.half_width / 2.0)
                {
                    err = err.max((value - decay * x[0]).abs());
                }
            }
        }
        self.checks
            .push(Check::at_most("effective_linear_exact", err, 1e-6));
        let constant = lin.clone();
        let constant = EffectiveField::new(constant.model().scaled(0.0), *constant.moments())
            .with_datum_offset(1.7);
        let sol_c = solve_closed_form(&constant, &pde, &p)?;
        let mut err_c: f64 = 0.0;
        for (t, v) in sol_c.times.iter().zip(&sol_c.snapshots) {
            let exact = 1.7 * (-p.a * (p.horizon - t)).exp();
            err_c = v.iter().fold(err_c, |m, x| m.max((x - exact).abs()));
        }
        self.checks
            .push(Check::at_most("effective_constant_datum", err_c, 1e-12));

        // Long-time fast average of g against the effective datum.
        let sc = &self.cfg.stabilization;
        let field = EffectiveField::new(self.model.clone(), moments);
        let datum = InvariantEstimate {
            mean: field.datum(&self.x),
            std_error: field.datum_std_error(),
            effective_samples: moments.cos_y3.effective_samples,
        };
        let stab = stabilization_average(
            &self.model,
            &self.x,
            FastState::from_array(sc.y0),
            sc.t_end,
            sc.dt,
            sc.replicas,
            p.master_seed,
            &p,
        )?;
        self.checks.push(Check::at_most(
            "stabilization_datum",
            (stab.mean - datum.mean).abs(),
            SIGMAS * stab.combined_error(&datum),
        ));
        self.results.insert(
            "effective".into(),
            json!({
                "value": value,
                "datum": datum,
                "stabilization": stab,
                "linear_error": err,
                "constant_datum_error": err_c,
            }),
        );
        Ok(())
    }

    fn twoscale(&mut self) -> Result<(), CliError> {
        let p = self.params().clone();
        let tc = self.cfg.twoscale.clone();
        let (value, sol) = self.effective_solution()?;
        let policy = match (&sol.policy, self.model.is_singleton()) {
            (_, true) => Policy::Fixed(0),
            (Some(table), false) => Policy::Feedback(table),
            (None, false) => unreachable!("policy stored for controlled models"),
        };
        let start = CoupledState::new(0.0, &self.x, FastState::from_array(tc.y0));
        let seed = p.master_seed;
        let rows = epsilon_ladder_experiment(
            &self.model,
            &start,
            &p,
            value.value,
            policy,
            tc.n_samples,
            seed,
            default_dt,
        )?;
        self.write_csv("twoscale.csv", |w| write_twoscale_csv(&rows, w))?;
        let combined = |r: &LadderRow| r.std_error.hypot(value.std_error);
        let last = rows.last().expect("nonempty ladder");
        let depends_on_y = self.model.terminal_fast_weight() != 0.0
            || self.model.running_cost_fast_weight(&self.x) != 0.0;
        let mut y_report = Value::Null;
        if !self.model.is_singleton() {
            // Policy evaluation only bounds V from below.
            self.checks.push(Check::at_most(
                "policy_lower_bound",
                -last.gap,
                value.grid_error_bound + SIGMAS * combined(last),
            ));
        } else if depends_on_y {
            let worst_increase = rows
                .windows(2)
                .map(|w| w[1].gap - w[0].gap)
                .fold(f64::NEG_INFINITY, f64::max);
            if rows.len() > 1 {
                self.checks.push(Check {
                    name: "twoscale_gap_decreasing".into(),
                    pass: worst_increase < 0.0,
                    measured: worst_increase,
                    bound: 0.0,
                });
            }
            self.checks.push(Check::at_most(
                "twoscale_final_gap",
                last.gap,
                value.grid_error_bound.max(SIGMAS * combined(last)),
            ));
            let delta_min = *p.delta_ladder.last().expect("validated ladder");
            let grid = Grid3::new(tc.corrector_radius, tc.corrector_h)?;
            let f = GridFunction::from_fn(grid, |y| y.y3.cos());
            let problem = CellProblem::new(&f, &p, self.cfg.cell.scheme, self.cfg.cell.solver);
            let (w, defect) = corrector(&problem, &p.delta_ladder, delta_min.min(0.1))?;
            let starts: Vec<FastState> = tc
                .y_starts
                .iter()
                .map(|y| FastState::from_array(*y))
                .collect();
            let check = y_independence_check(
                &self.model,
                &self.x,
                &starts,
                &w,
                &p,
                policy,
                tc.n_samples,
                seed,
                default_dt,
            )?;
            let ratio = check
                .pairs
                .iter()
                .map(|q| q.difference.abs() / (SIGMAS * q.combined_std_error + q.band))
                .fold(0.0, f64::max);
            self.checks
                .push(Check::at_most("y_independence_pairs", ratio, 1.0));
            self.checks.push(Check {
                name: "y_independence_spread_shrinks".into(),
                pass: check.spread_smallest < check.spread_largest || check.spread_smallest == 0.0,
                measured: check.spread_smallest,
                bound: check.spread_largest,
            });
            y_report = json!({ "check": check, "corrector_defect": defect, "corrector_delta": delta_min.min(0.1) });
        } else {
            // A payoff blind to y has V^eps = V for every eps.
            for r in &rows {
                self.checks.push(Check::at_most(
                    format!("twoscale_gap[eps={}]", r.eps),
                    r.gap,
                    value.grid_error_bound + SIGMAS * combined(r),
                ));
            }
        }
        let sidecar = json!({
            "model_id": self.cfg.model_id,
            "start": start,
            "effective_value": value,
            "policy": if self.model.is_singleton() { "fixed" } else { "feedback" },
            "seed": seed,
            "y_independence": y_report,
        });
        self.write_sidecar("twoscale.json", &sidecar)?;
        Ok(())
    }
}

/// Max error of the discrete generator on `tf` over `|y|_inf <= R/2`.
fn consistency_error(
    tf: &TestFunction,
    radius: f64,
    h: f64,
    cell: &CellConfig,
    p: &ModelParams,
) -> Result<f64, CliError> {
    let grid = Grid3::with_cap(radius, h, cell.max_nodes)?;
    let u = GridFunction::from_fn(grid, |y| tf.value(y));
    let lu = discretize_generator(grid, p, cell.scheme).apply(&u);
    let mut err: f64 = 0.0;
    lu.for_each_inner(radius / 2.0, |_, _, _, y, v| {
        err = err.max((v - apply_generator(&tf.eval(y), y, p)).abs());
    });
    Ok(err)
}

fn solve_closed_form(
    field: &EffectiveField,
    pde: &PdeConfig,
    p: &ModelParams,
) -> Result<EffectiveSolution, CliError> {
    let grid = SlowGrid::for_report(field.model(), pde.report_half_width, pde.dx, p)?;
    let cfg = PdeConfig {
        store_policy: false,
        ..*pde
    };
    let steps = cfg.timesteps_for(field.model(), &grid, p.horizon);
    Ok(solve_effective_pde(field, &grid, steps, p, &cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_rate_is_rejected_with_one_line() {
        let cfg = parse_config(r#"{"params": {"k1": 4.0}}"#).unwrap();
        let e = resolve(cfg).unwrap_err();
        assert_eq!(e.to_string(), "params: k1 > 4 required");
    }

    #[test]
    fn schema_errors() {
        assert_eq!(
            parse_config(r#"{"paramz": {}}"#).unwrap_err().scope,
            "config"
        );
        assert_eq!(
            parse_config(r#"{"experiment": "plot"}"#).unwrap_err().scope,
            "config"
        );
        let cfg = parse_config(r#"{"model_id": "nope"}"#).unwrap();
        assert_eq!(resolve(cfg).unwrap_err().scope, "model");
        let cfg = parse_config(r#"{"slow_point": [0.0, 1.0]}"#).unwrap();
        assert_eq!(resolve(cfg).unwrap_err().scope, "config");
    }

    #[test]
    fn defaults_resolve() {
        let cfg = resolve(parse_config("{}").unwrap()).unwrap();
        assert_eq!(cfg.slow_point, Some(vec![0.0]));
        assert_eq!(cfg.lyapunov.gamma, Some(1.0));
        assert_eq!(cfg.experiment, ExperimentKind::All);
        assert_eq!(
            ExperimentKind::All.stages(),
            vec![
                ExperimentKind::Ergodic,
                ExperimentKind::Cell,
                ExperimentKind::Lyapunov,
                ExperimentKind::Effective,
                ExperimentKind::Twoscale
            ]
        );
        // The resolved config round-trips through its own schema.
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn finiteness_scan() {
        assert!(csv_is_finite("a,b\n1,2\n"));
        assert!(!csv_is_finite("a,b\n1,NaN\n"));
        assert!(!csv_is_finite("a,b\n-inf,2\n"));
        assert!(csv_is_finite("inf_header,b\n1,2\n"));
    }
}
