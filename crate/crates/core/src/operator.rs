//! Closed-form calculus for the fast generator
//!
//! `L u = tr(sigma sigma^T D^2 u) + b . Du` with the Heisenberg diffusion
//! `sigma(y) = [[1, 0], [0, 1], [2 y2, -2 y1]]` and the Ornstein-Uhlenbeck
//! drift `b(y) = -(k1 y1, k2 y2, k3 y3)`.
//!
//! Test functions carry exact gradients and Hessians (see [`TestFunction`])
//! so that the discrete operator can be checked against zero-truncation
//! references.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FastState {
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
}

impl FastState {
    pub const ORIGIN: FastState = FastState {
        y1: 0.0,
        y2: 0.0,
        y3: 0.0,
    };

    pub const fn new(y1: f64, y2: f64, y3: f64) -> Self {
        FastState { y1, y2, y3 }
    }

    pub fn from_array(y: [f64; 3]) -> Self {
        FastState {
            y1: y[0],
            y2: y[1],
            y3: y[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.y1, self.y2, self.y3]
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.y1 * self.y1 + self.y2 * self.y2 + self.y3 * self.y3
    }

    pub fn is_finite(&self) -> bool {
        self.y1.is_finite() && self.y2.is_finite() && self.y3.is_finite()
    }

    /// `(y1^2 + y2^2)^2 + y3^2`, the fourth power of the homogeneous gauge.
    pub fn gauge4(&self) -> f64 {
        let s = self.y1 * self.y1 + self.y2 * self.y2;
        s * s + self.y3 * self.y3
    }
}

/// Value, gradient and Hessian of a function at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SecondOrderData {
    pub value: f64,
    pub gradient: [f64; 3],
    pub hessian: [[f64; 3]; 3],
}

impl SecondOrderData {
    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        out.value *= c;
        for i in 0..3 {
            out.gradient[i] *= c;
            for j in 0..3 {
                out.hessian[i][j] *= c;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = *self;
        out.value += other.value;
        for i in 0..3 {
            out.gradient[i] += other.gradient[i];
            for j in 0..3 {
                out.hessian[i][j] += other.hessian[i][j];
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let h = &self.hessian;
        (h[0][1] - h[1][0])
            .abs()
            .max((h[0][2] - h[2][0]).abs())
            .max((h[1][2] - h[2][1]).abs())
    }
}

/// Diffusion matrix; rows are `(1, 0)`, `(0, 1)` and `(2 y2, -2 y1)`.
pub fn sigma(y: &FastState) -> [[f64; 2]; 3] {
    [[1.0, 0.0], [0.0, 1.0], [2.0 * y.y2, -2.0 * y.y1]]
}

/// Columns of `sigma`: the horizontal vector fields `X1 = d1 + 2 y2 d3` and
/// `X2 = d2 - 2 y1 d3`.
pub fn vector_fields(y: &FastState) -> [[f64; 3]; 2] {
    [[1.0, 0.0, 2.0 * y.y2], [0.0, 1.0, -2.0 * y.y1]]
}

pub fn drift(y: &FastState, p: &ModelParams) -> [f64; 3] {
    [-p.k1 * y.y1, -p.k2 * y.y2, -p.k3 * y.y3]
}

/// Second-order part `tr(sigma sigma^T D^2 u)` written out entrywise.
pub fn trace_term(d: &SecondOrderData, y: &FastState) -> f64 {
    let h = &d.hessian;
    let s = y.y1 * y.y1 + y.y2 * y.y2;
    h[0][0] + h[1][1] + 4.0 * s * h[2][2] + 4.0 * y.y2 * h[0][2] - 4.0 * y.y1 * h[1][2]
}

/// The same second-order part computed as `X1^2 u + X2^2 u = v1^T H v1 + v2^T H v2`.
pub fn vector_field_form(d: &SecondOrderData, y: &FastState) -> f64 {
    vector_fields(y)
        .iter()
        .map(|v| {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += v[i] * d.hessian[i][j] * v[j];
                }
            }
            acc
        })
        .sum()
}

pub fn drift_term(d: &SecondOrderData, y: &FastState, p: &ModelParams) -> f64 {
    let b = drift(y, p);
    b[0] * d.gradient[0] + b[1] * d.gradient[1] + b[2] * d.gradient[2]
}

pub fn apply_generator(d: &SecondOrderData, y: &FastState, p: &ModelParams) -> f64 {
    trace_term(d, y) + drift_term(d, y, p)
}

/// Closed form of `-L chi` for `chi = |y|^2`.
pub fn neg_generator_chi(y: &FastState, p: &ModelParams) -> f64 {
    2.0 * (-2.0 + (p.k1 - 4.0) * y.y1 * y.y1 + (p.k2 - 4.0) * y.y2 * y.y2 + p.k3 * y.y3 * y.y3)
}

/// Closed form of `L U1` for `U1 = y1^4 + y2^4 + y3^2`.
pub fn generator_u1(y: &FastState, p: &ModelParams) -> f64 {
    let (a, b, c) = (y.y1 * y.y1, y.y2 * y.y2, y.y3 * y.y3);
    20.0 * (a + b) - 4.0 * p.k1 * a * a - 4.0 * p.k2 * b * b - 2.0 * p.k3 * c
}

/// Constant `beta` such that `-L U1 >= gamma U1 - beta` on all of R^3.
///
/// Completing the square in `y1^2` and `y2^2` gives
/// `beta = 100 / (4 k1 - gamma) + 100 / (4 k2 - gamma)`.
pub fn lyapunov_u1_certificate(gamma: f64, p: &ModelParams) -> Result<f64> {
    let upper = (2.0 * p.k3).min(4.0 * p.k1).min(4.0 * p.k2);
    if !(gamma > 0.0 && gamma < upper) {
        return Err(Error::InvalidGamma { gamma, upper });
    }
    Ok(100.0 / (4.0 * p.k1 - gamma) + 100.0 / (4.0 * p.k2 - gamma))
}

/// Second-order and first-order parts of `L g` for `g = c1 log((y1^2+y2^2)^2 + y3^2)`.
pub fn log_barrier_terms(y: &FastState, c1: f64, p: &ModelParams) -> Result<(f64, f64)> {
    let rho = y.gauge4();
    if rho <= 0.0 {
        return Err(Error::SingularPoint);
    }
    let s = y.y1 * y.y1 + y.y2 * y.y2;
    let trace = 8.0 * c1 * s / rho;
    let drift = -c1
        * (4.0 * s * (p.k1 * y.y1 * y.y1 + p.k2 * y.y2 * y.y2) + 2.0 * p.k3 * y.y3 * y.y3)
        / rho;
    Ok((trace, drift))
}

/// Same split for the regularised barrier `c1 log((y1^2+y2^2)^2 + y3^2 + 1)`.
///
/// Uses `X1^2 rho + X2^2 rho = 24 s` and `|X1 rho|^2 + |X2 rho|^2 = 16 s rho`
/// with `s = y1^2 + y2^2`.
pub fn shifted_log_barrier_terms(y: &FastState, c1: f64, p: &ModelParams) -> (f64, f64) {
    let rho = y.gauge4();
    let q = rho + 1.0;
    let s = y.y1 * y.y1 + y.y2 * y.y2;
    let trace = c1 * (24.0 * s / q - 16.0 * s * rho / (q * q));
    let drift =
        -c1 * (4.0 * s * (p.k1 * y.y1 * y.y1 + p.k2 * y.y2 * y.y2) + 2.0 * p.k3 * y.y3 * y.y3) / q;
    (trace, drift)
}

/// Constant and radius making `c1 log rho` a supersolution of
/// `delta g - L g >= F` outside `B_radius` for every `delta >= 0` and every
/// `|F| <= f_sup`.
///
/// Outside a ball the drift part of `-L g / c1` is at least
/// `m = min(4 min(k1, k2), 2 k3)` while the diffusion part is at most
/// `8 / (2 |y| - 1)`. Taking `c1 = 2 f_sup / m` and the radius where the
/// latter drops below `m / 2` leaves a margin of `f_sup`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogBarrier {
    pub c1: f64,
    pub radius: f64,
}

pub fn log_barrier_supersolution(f_sup: f64, p: &ModelParams) -> LogBarrier {
    let m = (4.0 * p.k1.min(p.k2)).min(2.0 * p.k3);
    let c1 = (2.0 * f_sup / m).max(f64::MIN_POSITIVE);
    // rho >= 1 on |y| >= 1.2, so delta * g stays non-negative.
    let radius = ((16.0 / m + 1.0) / 2.0).max(1.2);
    LogBarrier { c1, radius }
}

/// Constants of the linear-growth supersolution `C_l (|y| + 1 + 2 M0 / delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearGrowthBarrier {
    /// `l = min{k1 - 4, k2 - 4, k3}`.
    pub l: f64,
    /// `C_l = max{1, 2 C_F / l}`.
    pub c_l: f64,
    /// `r0 = 1 + 2 C_l / C_F`.
    pub r0: f64,
}

impl LinearGrowthBarrier {
    /// The smooth profile `U0` equal to `|y| + 1` outside `B_r0` and to
    /// `c0 + c2 r^2 + c4 r^4` inside, matched to second order at `r0`.
    pub fn profile(&self) -> TestFunction {
        TestFunction::SmoothedNorm { r0: self.r0 }
    }

    pub fn supersolution(&self, m0: f64, delta: f64) -> impl Fn(&FastState) -> f64 + '_ {
        let profile = self.profile();
        move |y| self.c_l * (profile.value(y) + 2.0 * m0 / delta)
    }
}

pub fn linear_growth_supersolution(
    delta: f64,
    f_bounds: (f64, f64),
    p: &ModelParams,
) -> Result<LinearGrowthBarrier> {
    let (c_f, _lip) = f_bounds;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta = {delta} outside (0, 1]"
        )));
    }
    if !(c_f > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "C_F = {c_f} must be positive"
        )));
    }
    let l = p.coercivity_margin();
    let c_l = (2.0 * c_f / l).max(1.0);
    let r0 = 1.0 + 2.0 * c_l / c_f;
    Ok(LinearGrowthBarrier { l, c_l, r0 })
}

/// Pointwise residual of the slow-variable barrier `w0 = c1 (1 + |x|)`:
/// `-c2 c1 + a c1 (1 + |x|) - c_f (1 + |x|)`.
pub fn existence_barrier_residual(x_norm: f64, c1: f64, c2: f64, c_f: f64, a: f64) -> f64 {
    -c2 * c1 + a * c1 * (1.0 + x_norm) - c_f * (1.0 + x_norm)
}

/// Test functions with exact derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    Constant(f64),
    /// `c + g . y`.
    Affine {
        c: f64,
        g: [f64; 3],
    },
    /// `c + g . y + y^T A y / 2` with `A` symmetric.
    Quadratic {
        c: f64,
        g: [f64; 3],
        a: [[f64; 3]; 3],
    },
    /// `chi = y1^2 + y2^2 + y3^2`.
    Chi,
    /// `U1 = y1^4 + y2^4 + y3^2`.
    U1,
    /// `c1 log((y1^2+y2^2)^2 + y3^2 + shift)`.
    LogBarrier {
        c1: f64,
        shift: f64,
    },
    /// `|y|`, not differentiable at the origin.
    Norm,
    /// `|y| + 1` outside `B_r0`, quartic polynomial in `|y|` inside.
    SmoothedNorm {
        r0: f64,
    },
    /// `cos y1 + cos y2 + cos y3`.
    CosSum,
}

impl TestFunction {
    pub fn value(&self, y: &FastState) -> f64 {
        self.eval(y).value
    }

    pub fn eval(&self, y: &FastState) -> SecondOrderData {
        let v = y.to_array();
        let mut d = SecondOrderData::default();
        match *self {
            TestFunction::Constant(c) => d.value = c,
            TestFunction::Affine { c, g } => {
                d.value = c + g[0] * v[0] + g[1] * v[1] + g[2] * v[2];
                d.gradient = g;
            }
            TestFunction::Quadratic { c, g, a } => {
                let mut quad = 0.0;
                for i in 0..3 {
                    let mut av = 0.0;
                    for j in 0..3 {
                        av += a[i][j] * v[j];
                    }
                    quad += v[i] * av;
                    d.gradient[i] = g[i] + av;
                }
                d.value = c + g[0] * v[0] + g[1] * v[1] + g[2] * v[2] + 0.5 * quad;
                d.hessian = a;
            }
            TestFunction::Chi => {
                d.value = y.norm_sq();
                d.gradient = [2.0 * v[0], 2.0 * v[1], 2.0 * v[2]];
                d.hessian = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
            }
            TestFunction::U1 => {
                let (a, b) = (v[0] * v[0], v[1] * v[1]);
                d.value = a * a + b * b + v[2] * v[2];
                d.gradient = [4.0 * a * v[0], 4.0 * b * v[1], 2.0 * v[2]];
                d.hessian = [[12.0 * a, 0.0, 0.0], [0.0, 12.0 * b, 0.0], [0.0, 0.0, 2.0]];
            }
            TestFunction::LogBarrier { c1, shift } => {
                // rho = s^2 + y3^2 with s = y1^2 + y2^2.
                let s = v[0] * v[0] + v[1] * v[1];
                let q = s * s + v[2] * v[2] + shift;
                let grad_rho = [4.0 * s * v[0], 4.0 * s * v[1], 2.0 * v[2]];
                let mut hess_rho = [[0.0; 3]; 3];
                hess_rho[0][0] = 4.0 * s + 8.0 * v[0] * v[0];
                hess_rho[1][1] = 4.0 * s + 8.0 * v[1] * v[1];
                hess_rho[0][1] = 8.0 * v[0] * v[1];
                hess_rho[1][0] = hess_rho[0][1];
                hess_rho[2][2] = 2.0;
                d.value = c1 * q.ln();
                for i in 0..3 {
                    d.gradient[i] = c1 * grad_rho[i] / q;
                    for j in 0..3 {
                        d.hessian[i][j] =
                            c1 * (hess_rho[i][j] / q - grad_rho[i] * grad_rho[j] / (q * q));
                    }
                }
            }
            TestFunction::Norm => {
                let r = y.norm();
                d.value = r;
                for i in 0..3 {
                    d.gradient[i] = v[i] / r;
                    for j in 0..3 {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        d.hessian[i][j] = (delta - v[i] * v[j] / (r * r)) / r;
                    }
                }
            }
            TestFunction::SmoothedNorm { r0 } => {
                let r = y.norm();
                if r >= r0 {
                    d = TestFunction::Norm.eval(y);
                    d.value += 1.0;
                } else {
                    // c0 + c2 r^2 + c4 r^4 with value r0 + 1, slope 1 and
                    // curvature 0 at r0.
                    let c4 = -1.0 / (8.0 * r0 * r0 * r0);
                    let c2 = 3.0 / (4.0 * r0);
                    let c0 = 1.0 + 3.0 * r0 / 8.0;
                    let r2 = r * r;
                    d.value = c0 + c2 * r2 + c4 * r2 * r2;
                    let radial = 2.0 * c2 + 4.0 * c4 * r2;
                    for i in 0..3 {
                        d.gradient[i] = radial * v[i];
                        for j in 0..3 {
                            let delta = if i == j { 1.0 } else { 0.0 };
                            d.hessian[i][j] = radial * delta + 8.0 * c4 * v[i] * v[j];
                        }
                    }
                }
            }
            TestFunction::CosSum => {
                d.value = v[0].cos() + v[1].cos() + v[2].cos();
                for i in 0..3 {
                    d.gradient[i] = -v[i].sin();
                    d.hessian[i][i] = -v[i].cos();
                }
            }
        }
        d
    }
}
