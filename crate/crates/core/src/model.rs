//! Run parameters and the closed registry of control models.
//!
//! Every registered model has the structure exploited by the effective
//! solver: the fast variable enters the running cost and the terminal datum
//! only through `cos(y3)`, with a weight that does not depend on the control.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::FastState;

/// Upper bound on the slow dimension.
pub const MAX_SLOW: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// Discount rate.
    pub a: f64,
    /// Time horizon.
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_slow: usize,
    pub epsilon_ladder: Vec<f64>,
    pub delta_ladder: Vec<f64>,
    pub master_seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            k1: 5.0,
            k2: 5.0,
            k3: 1.0,
            a: 1.0,
            horizon: 1.0,
            n_slow: 1,
            epsilon_ladder: vec![1.0, 0.3, 0.1, 0.03],
            delta_ladder: vec![0.4, 0.2, 0.1, 0.05],
            master_seed: 0x5eed_1234_abcd_0001,
        }
    }
}

impl ModelParams {
    pub fn with_rates(k1: f64, k2: f64, k3: f64) -> Self {
        ModelParams {
            k1,
            k2,
            k3,
            ..Default::default()
        }
    }

    /// `l = min{k1 - 4, k2 - 4, k3}`, the coercivity margin of the drift.
    pub fn coercivity_margin(&self) -> f64 {
        (self.k1 - 4.0).min(self.k2 - 4.0).min(self.k3)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            field,
            message: message.into(),
        });
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.message.clone()).collect()
    }
}

fn check_ladder(report: &mut ValidationReport, field: &'static str, name: &str, ladder: &[f64]) {
    if ladder.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        report.push(field, format!("every {name} must lie in (0, 1]"));
    }
    if ladder.windows(2).any(|w| !(w[1] < w[0])) {
        report.push(field, format!("{name} ladder must be strictly decreasing"));
    }
}

/// Lists every violated parameter invariant. An empty report means the
/// parameters are admissible.
pub fn validate_params(p: &ModelParams) -> ValidationReport {
    let mut report = ValidationReport::default();
    // Written as negated comparisons so that NaN is reported too.
    if !(p.k1 > 4.0) {
        report.push("k1", "k1 > 4 required");
    }
    if !(p.k2 > 4.0) {
        report.push("k2", "k2 > 4 required");
    }
    if !(p.k3 > 0.0) {
        report.push("k3", "k3 > 0 required");
    }
    if !(p.a > 0.0) {
        report.push("a", "a > 0 required");
    }
    if !(p.horizon > 0.0 && p.horizon.is_finite()) {
        report.push("T", "T > 0 required");
    }
    if !(1..=MAX_SLOW).contains(&p.n_slow) {
        report.push("n_slow", "n_slow must be 1 or 2");
    }
    check_ladder(&mut report, "epsilon_ladder", "epsilon", &p.epsilon_ladder);
    check_ladder(&mut report, "delta_ladder", "delta", &p.delta_ladder);
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    UncontrolledLinear,
    CosRunningCost,
    BangBang,
}

impl ModelId {
    pub const ALL: [ModelId; 3] = [
        ModelId::UncontrolledLinear,
        ModelId::CosRunningCost,
        ModelId::BangBang,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::UncontrolledLinear => "uncontrolled-linear",
            ModelId::CosRunningCost => "cos-running-cost",
            ModelId::BangBang => "bang-bang",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.as_str() == id)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }
}

/// Declared constants of assumptions A3-A6 for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeclaredBounds {
    /// `|f(x,y,u)| <= c_f (1 + |x|)`.
    pub c_f: f64,
    /// `|g(x,y)| <= c_g (1 + |x|)`.
    pub c_g: f64,
    /// `|phi_tilde| <= c_phi`.
    pub c_phi: f64,
    /// Frobenius bound on `sigma_tilde` for `n_slow <= 2`.
    pub c_sigma: f64,
    /// Lipschitz constant in `y` of `F(y) = -H(x,y,p,X,0)`; it also bounds
    /// `|dF/dy3|` and `|d2F/dy3^2|`.
    pub lip_constant_l: f64,
}

/// A registered control problem.
///
/// The slow diffusion is `sigma_tilde = c * I`, driven by noise dimensions
/// disjoint from the fast process, so the cross term of the Hamiltonian
/// vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlModel {
    id: ModelId,
    controls: Vec<f64>,
    sigma_scale: f64,
    /// Constant slow drift magnitude (along `e1`) for singleton models.
    drift_speed: f64,
    /// Weight of `cos(y3)` in the terminal datum.
    terminal_fast_weight: f64,
    /// Global multiplier on both `f` and `g`.
    payoff_scale: f64,
    running_weight: f64,
    bounds: DeclaredBounds,
}

/// The single bounded statistic of the fast variable the registry uses.
#[inline]
pub fn fast_statistic(y: &FastState) -> f64 {
    y.y3.cos()
}

/// Bounded smooth weight of the running cost in the `cos-running-cost` model.
fn bump(x: &[f64]) -> f64 {
    1.0 / (1.0 + x.iter().map(|v| v * v).sum::<f64>())
}

pub fn builtin_model(id: &str) -> Result<ControlModel> {
    Ok(ControlModel::new(ModelId::parse(id)?))
}

impl ControlModel {
    pub const SIGMA_SCALE: f64 = 0.5;
    pub const COS_MODEL_DRIFT: f64 = 0.25;

    pub fn new(id: ModelId) -> Self {
        let c = Self::SIGMA_SCALE;
        let c_sigma = c * (MAX_SLOW as f64).sqrt();
        match id {
            ModelId::UncontrolledLinear => ControlModel {
                id,
                controls: vec![0.0],
                sigma_scale: c,
                drift_speed: 0.0,
                terminal_fast_weight: 0.0,
                payoff_scale: 1.0,
                running_weight: 1.0,
                bounds: DeclaredBounds {
                    c_f: 0.0,
                    c_g: 1.0,
                    c_phi: 0.0,
                    c_sigma,
                    lip_constant_l: 0.0,
                },
            },
            ModelId::CosRunningCost => ControlModel {
                id,
                controls: vec![0.0],
                sigma_scale: c,
                drift_speed: Self::COS_MODEL_DRIFT,
                terminal_fast_weight: 1.0,
                payoff_scale: 1.0,
                running_weight: 1.0,
                bounds: DeclaredBounds {
                    c_f: 1.0,
                    c_g: 2.0,
                    c_phi: Self::COS_MODEL_DRIFT,
                    c_sigma,
                    lip_constant_l: 1.0,
                },
            },
            ModelId::BangBang => ControlModel {
                id,
                controls: vec![-1.0, 1.0],
                sigma_scale: c,
                drift_speed: 1.0,
                terminal_fast_weight: 0.0,
                payoff_scale: 1.0,
                running_weight: 1.0,
                bounds: DeclaredBounds {
                    c_f: 1.0,
                    c_g: 1.0,
                    c_phi: 1.0,
                    c_sigma,
                    lip_constant_l: 1.0,
                },
            },
        }
    }

    /// Same model with `f` and `g` multiplied by `kappa`.
    pub fn scaled(&self, kappa: f64) -> Self {
        let mut m = self.clone();
        m.payoff_scale *= kappa;
        m.bounds.c_f *= kappa.abs();
        m.bounds.c_g *= kappa.abs();
        m.bounds.lip_constant_l *= kappa.abs();
        m
    }

    /// Same model with the running cost switched off.
    pub fn without_running_cost(&self) -> Self {
        let mut m = self.clone();
        m.running_weight = 0.0;
        m.bounds.c_f = 0.0;
        m
    }

    pub fn id(&self) -> ModelId {
        self.id
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn control_label(&self, index: usize) -> String {
        match self.id {
            ModelId::BangBang => format!("u={:+}", self.controls[index]),
            _ => "u=0".to_string(),
        }
    }

    pub fn is_singleton(&self) -> bool {
        self.controls.len() == 1
    }

    pub fn bounds(&self) -> DeclaredBounds {
        self.bounds
    }

    pub fn sigma_scale(&self) -> f64 {
        self.sigma_scale
    }

    /// Weight `w(x)` such that `f(x,y,u) = w(x) cos(y3)` for every control.
    pub fn running_cost_fast_weight(&self, x: &[f64]) -> f64 {
        self.payoff_scale
            * self.running_weight
            * match self.id {
                ModelId::UncontrolledLinear => 0.0,
                ModelId::CosRunningCost => bump(x),
                ModelId::BangBang => 1.0,
            }
    }

    pub fn running_cost(&self, x: &[f64], y: &FastState, _u: f64) -> f64 {
        self.running_cost_fast_weight(x) * fast_statistic(y)
    }

    /// Part of `g(x, .)` that does not depend on `y`.
    pub fn terminal_slow(&self, x: &[f64]) -> f64 {
        self.payoff_scale
            * match self.id {
                ModelId::UncontrolledLinear => x[0],
                ModelId::CosRunningCost => x[0].sin(),
                ModelId::BangBang => x[0].cos(),
            }
    }

    pub fn terminal_fast_weight(&self) -> f64 {
        self.payoff_scale * self.terminal_fast_weight
    }

    pub fn terminal(&self, x: &[f64], y: &FastState) -> f64 {
        self.terminal_slow(x) + self.terminal_fast_weight() * fast_statistic(y)
    }

    /// Slow drift `phi_tilde(x, y, u)`; only the first `out.len()` components
    /// are written.
    pub fn slow_drift(&self, _x: &[f64], _y: &FastState, u: f64, out: &mut [f64]) {
        out.fill(0.0);
        out[0] = match self.id {
            ModelId::UncontrolledLinear => 0.0,
            ModelId::CosRunningCost => self.drift_speed,
            ModelId::BangBang => u,
        };
    }

    /// Slow diffusion matrix `c * I` of dimension `n`, row-major.
    pub fn sigma_tilde(&self, n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = self.sigma_scale;
        }
        m
    }

    /// Largest `|phi_tilde|` over the control set.
    pub fn max_drift_speed(&self) -> f64 {
        match self.id {
            ModelId::UncontrolledLinear => 0.0,
            ModelId::CosRunningCost => self.drift_speed,
            ModelId::BangBang => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radical_inverse(mut i: u64, base: u64) -> f64 {
        let (mut x, mut scale) = (0.0, 1.0 / base as f64);
        while i > 0 {
            x += (i % base) as f64 * scale;
            i /= base;
            scale /= base as f64;
        }
        x
    }

    /// Halton points in `[-10, 10]^6` as `(x1, x2, y1, y2, y3, control index)`.
    fn halton(n: u64) -> impl Iterator<Item = ([f64; 2], FastState, f64)> {
        const BASES: [u64; 6] = [2, 3, 5, 7, 11, 13];
        (1..=n).map(|i| {
            let c: Vec<f64> = BASES
                .iter()
                .map(|&b| 20.0 * radical_inverse(i, b) - 10.0)
                .collect();
            ([c[0], c[1]], FastState::new(c[2], c[3], c[4]), c[5])
        })
    }

    #[test]
    fn validation_examples() {
        assert!(validate_params(&ModelParams::default()).is_ok());
        let r = validate_params(&ModelParams::with_rates(4.0, 5.0, 1.0));
        assert_eq!(r.messages(), vec!["k1 > 4 required".to_string()]);
        let r = validate_params(&ModelParams::with_rates(5.0, 5.0, 0.0));
        assert_eq!(r.messages(), vec!["k3 > 0 required".to_string()]);
        let bad = ModelParams {
            a: 0.0,
            n_slow: 3,
            delta_ladder: vec![0.1, 0.2],
            epsilon_ladder: vec![1.5],
            ..Default::default()
        };
        assert_eq!(validate_params(&bad).violations.len(), 4);
        assert!(!validate_params(&ModelParams::with_rates(f64::NAN, 5.0, 1.0)).is_ok());
    }

    #[test]
    fn registry_lookup() {
        let m = builtin_model("uncontrolled-linear").unwrap();
        assert!(m.is_singleton());
        assert_eq!(
            m.running_cost(&[3.0], &FastState::new(0.0, 0.0, 0.0), 0.0),
            0.0
        );
        assert_eq!(builtin_model("bang-bang").unwrap().controls(), &[-1.0, 1.0]);
        assert_eq!(
            builtin_model("nope"),
            Err(Error::UnknownModel("nope".into()))
        );
        for id in ModelId::ALL {
            assert_eq!(ModelId::parse(id.as_str()).unwrap(), id);
        }
    }

    #[test]
    fn sampled_growth_bounds_hold() {
        for id in ModelId::ALL {
            let m = ControlModel::new(id);
            let b = m.bounds();
            for (x, y, uc) in halton(10_000) {
                let u = m.controls()[((uc + 10.0) / 20.0 * m.controls().len() as f64) as usize
                    % m.controls().len()];
                let nx = (x[0] * x[0] + x[1] * x[1]).sqrt();
                assert!(
                    m.running_cost(&x, &y, u).abs() <= b.c_f * (1.0 + nx) + 1e-12,
                    "{id:?} f"
                );
                assert!(
                    m.terminal(&x, &y).abs() <= b.c_g * (1.0 + nx) + 1e-12,
                    "{id:?} g"
                );
                let mut phi = [0.0; 2];
                m.slow_drift(&x, &y, u, &mut phi);
                assert!(
                    (phi[0] * phi[0] + phi[1] * phi[1]).sqrt() <= b.c_phi + 1e-12,
                    "{id:?} phi"
                );
                let s: f64 = m.sigma_tilde(MAX_SLOW).iter().map(|v| v * v).sum();
                assert!(s.sqrt() <= b.c_sigma + 1e-12, "{id:?} sigma");
            }
        }
    }

    #[test]
    fn fast_dependence_has_bounded_derivatives() {
        let hstep = 1e-4;
        for id in ModelId::ALL {
            let m = ControlModel::new(id);
            let l = m.bounds().lip_constant_l;
            for (x, y, _) in halton(1_000) {
                let f =
                    |y3: f64| m.running_cost(&x, &FastState::new(y.y1, y.y2, y3), m.controls()[0]);
                let d1 = (f(y.y3 + hstep) - f(y.y3 - hstep)) / (2.0 * hstep);
                let d2 = (f(y.y3 + hstep) - 2.0 * f(y.y3) + f(y.y3 - hstep)) / (hstep * hstep);
                assert!(d1.abs() <= l + 1e-6, "{id:?}: {d1}");
                assert!(d2.abs() <= l + 1e-4, "{id:?}: {d2}");
                // No dependence on y1, y2.
                let g = |y1: f64| m.running_cost(&x, &FastState::new(y1, y.y2, y.y3), 0.0);
                assert_eq!(g(y.y1), g(y.y1 + 1.0));
            }
        }
    }

    #[test]
    fn scaling_and_switching_off_running_cost() {
        let m = ControlModel::new(ModelId::CosRunningCost);
        let y = FastState::new(0.0, 0.0, 0.0);
        let s = m.scaled(2.0);
        assert_eq!(
            s.running_cost(&[0.0], &y, 0.0),
            2.0 * m.running_cost(&[0.0], &y, 0.0)
        );
        assert_eq!(s.terminal(&[1.0], &y), 2.0 * m.terminal(&[1.0], &y));
        assert_eq!(m.without_running_cost().running_cost(&[0.0], &y, 0.0), 0.0);
        assert_eq!(m.running_cost(&[0.0], &y, 0.0), 1.0);
    }
}
