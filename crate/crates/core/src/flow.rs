//! Adaptive integration: Dormand-Prince 5(4) for nonstiff chart systems and
//! Hairer's L-stable SDIRK 4(3) for the stiff full model. Dense output drives
//! event localization; events are polished with real steps and Newton in t.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64, y: Vec<f64> },
    #[error("non-finite right-hand side at t = {t}")]
    NonFinite { t: f64, y: Vec<f64> },
    #[error("step limit {limit} reached at t = {t}")]
    MaxSteps { limit: usize, t: f64, y: Vec<f64> },
    #[error("no section crossing before t = {t}")]
    Timeout { t: f64, y: Vec<f64> },
    #[error("invalid integrator configuration: {0}")]
    Config(String),
}

impl FlowError {
    /// Last state reached, where the error carries one.
    pub fn last_state(&self) -> Option<&[f64]> {
        match self {
            FlowError::StepUnderflow { y, .. }
            | FlowError::NonFinite { y, .. }
            | FlowError::MaxSteps { y, .. }
            | FlowError::Timeout { y, .. } => Some(y),
            FlowError::Config(_) => None,
        }
    }
}

/// An autonomous or time-dependent ODE `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Fills `jac` and returns `true` if an analytic Jacobian is available.
    fn jacobian(&self, _t: f64, _y: &[f64], _jac: &mut DMatrix<f64>) -> bool {
        false
    }
}

/// Closure adapter.
pub struct FnSystem<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    AdaptiveExplicit,
    ImplicitStiff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub method: Method,
    pub event_tol_time: f64,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
    /// Keep nodes and dense segments in the returned trajectory.
    pub store: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            max_step: f64::INFINITY,
            method: Method::AdaptiveExplicit,
            event_tol_time: 1e-12,
            max_steps: 1_000_000,
            initial_step: None,
            store: false,
        }
    }
}

impl IntegratorConfig {
    pub fn stiff() -> Self {
        Self { method: Method::ImplicitStiff, ..Self::default() }
    }

    pub fn with_tol(mut self, rel: f64, abs: f64) -> Self {
        self.rel_tol = rel;
        self.abs_tol = abs;
        self
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = h;
        self
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        for (name, v) in [("rel_tol", self.rel_tol), ("abs_tol", self.abs_tol)] {
            if !(1e-16..=1e-2).contains(&v) {
                return Err(FlowError::Config(format!("{name} = {v} outside [1e-16, 1e-2]")));
            }
        }
        if !(self.max_step > 0.0) {
            return Err(FlowError::Config(format!("max_step = {}", self.max_step)));
        }
        if !(self.event_tol_time > 0.0) {
            return Err(FlowError::Config(format!("event_tol_time = {}", self.event_tol_time)));
        }
        Ok(())
    }
}

/// A scalar section function with a direction filter (`0` = both).
pub struct Event<'a> {
    pub g: Box<dyn Fn(f64, &[f64]) -> f64 + 'a>,
    pub direction: i32,
    pub terminal: bool,
}

impl<'a> Event<'a> {
    pub fn new(g: impl Fn(f64, &[f64]) -> f64 + 'a, direction: i32, terminal: bool) -> Self {
        Self { g: Box::new(g), direction, terminal }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingRecord {
    pub event: usize,
    pub t: f64,
    pub state: Vec<f64>,
    pub residual: f64,
    pub direction: i32,
}

/// Interpolant over one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseSegment {
    Dopri { t0: f64, h: f64, r: [Vec<f64>; 5] },
    Hermite { t0: f64, h: f64, y0: Vec<f64>, y1: Vec<f64>, f0: Vec<f64>, f1: Vec<f64> },
}

impl DenseSegment {
    pub fn span(&self) -> (f64, f64) {
        match self {
            DenseSegment::Dopri { t0, h, .. } | DenseSegment::Hermite { t0, h, .. } => (*t0, *h),
        }
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        match self {
            DenseSegment::Dopri { t0, h, r } => {
                let th = (t - t0) / h;
                let th1 = 1.0 - th;
                for i in 0..out.len() {
                    out[i] = r[0][i] + th * (r[1][i] + th1 * (r[2][i] + th * (r[3][i] + th1 * r[4][i])));
                }
            }
            DenseSegment::Hermite { t0, h, y0, y1, f0, f1 } => {
                let s = (t - t0) / h;
                let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
                let h10 = s * (1.0 - s) * (1.0 - s);
                let h01 = s * s * (3.0 - 2.0 * s);
                let h11 = s * s * (s - 1.0);
                for i in 0..out.len() {
                    out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub dense: Vec<DenseSegment>,
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

impl Trajectory {
    /// Dense-output state at `t` (must lie inside the integrated span).
    pub fn at(&self, t: f64) -> Option<Vec<f64>> {
        let seg = self.dense.iter().find(|s| {
            let (a, h) = s.span();
            let b = a + h;
            (a.min(b)..=a.max(b)).contains(&t)
        })?;
        let mut out = vec![0.0; self.y.first().map_or(0, |v| v.len())];
        seg.eval(t, &mut out);
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub t: f64,
    pub y: Vec<f64>,
    pub crossings: Vec<CrossingRecord>,
    /// Index of the terminal event that stopped the run.
    pub stopped_by: Option<usize>,
    pub trajectory: Trajectory,
}

// Dormand-Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// SDIRK 4(3), gamma = 1/4, stiffly accurate.
pub const SDIRK_GAMMA: f64 = 0.25;
pub const SDIRK_C: [f64; 5] = [0.25, 0.75, 11.0 / 20.0, 0.5, 1.0];
pub const SDIRK_A: [[f64; 5]; 5] = [
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.25, 0.0, 0.0, 0.0],
    [17.0 / 50.0, -1.0 / 25.0, 0.25, 0.0, 0.0],
    [371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.25, 0.0],
    [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
];
pub const SDIRK_BHAT: [f64; 5] = [59.0 / 48.0, -17.0 / 96.0, 225.0 / 32.0, -85.0 / 12.0, 0.0];

struct Stepper<'s, S: OdeSystem + ?Sized> {
    sys: &'s S,
    cfg: &'s IntegratorConfig,
    n: usize,
    rhs_evals: usize,
    // stiff cache
    lu: Option<(f64, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
    jac: DMatrix<f64>,
    jac_fresh: bool,
    // times handed to the stepper are relative to this origin
    anchor: f64,
}

struct StepOut {
    y1: Vec<f64>,
    f1: Vec<f64>,
    err: f64,
    dense: DenseSegment,
}

enum StepFail {
    Newton,
    NonFinite,
}

impl<'s, S: OdeSystem + ?Sized> Stepper<'s, S> {
    fn new(sys: &'s S, cfg: &'s IntegratorConfig) -> Self {
        let n = sys.dim();
        Self { sys, cfg, n, rhs_evals: 0, lu: None, jac: DMatrix::zeros(n, n), jac_fresh: false, anchor: 0.0 }
    }

    fn f(&mut self, t: f64, y: &[f64], out: &mut [f64]) {
        self.rhs_evals += 1;
        self.sys.rhs(self.anchor + t, y, out);
    }

    fn err_norm(&self, e: &[f64], y0: &[f64], y1: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let sc = self.cfg.abs_tol + self.cfg.rel_tol * y0[i].abs().max(y1[i].abs());
            s += (e[i] / sc).powi(2);
        }
        (s / self.n as f64).sqrt()
    }

    fn initial_step(&mut self, t0: f64, y0: &[f64], f0: &[f64], dir: f64, order: f64) -> f64 {
        if let Some(h) = self.cfg.initial_step {
            return h.abs() * dir;
        }
        let n = self.n;
        let sc: Vec<f64> = y0.iter().map(|v| self.cfg.abs_tol + self.cfg.rel_tol * v.abs()).collect();
        let d0 = (y0.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d1 = (f0.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h = h.min(self.cfg.max_step);
        let y1: Vec<f64> = (0..n).map(|i| y0[i] + dir * h * f0[i]).collect();
        let mut f1 = vec![0.0; n];
        self.f(t0 + dir * h, &y1, &mut f1);
        let d2 = ((0..n).map(|i| ((f1[i] - f0[i]) / sc[i]).powi(2)).sum::<f64>() / n as f64).sqrt() / h;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / order)
        };
        dir * (100.0 * h).min(h1).min(self.cfg.max_step)
    }

    fn dopri(&mut self, t: f64, y: &[f64], k1: &[f64], h: f64) -> Result<StepOut, StepFail> {
        let n = self.n;
        let mut tmp = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut k5 = vec![0.0; n];
        let mut k6 = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        self.f(t + C2 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        self.f(t + C3 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        self.f(t + C4 * h, &tmp, &mut k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        self.f(t + C5 * h, &tmp, &mut k5);
        for i in 0..n {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        self.f(t + h, &tmp, &mut k6);
        let mut y1 = vec![0.0; n];
        for i in 0..n {
            y1[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        self.f(t + h, &y1, &mut k7);
        if y1.iter().chain(&k7).any(|v| !v.is_finite()) {
            return Err(StepFail::NonFinite);
        }
        let mut e = vec![0.0; n];
        for i in 0..n {
            e[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let err = self.err_norm(&e, y, &y1);
        let mut r = [y.to_vec(), vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let ydiff = y1[i] - y[i];
            let bspl = h * k1[i] - ydiff;
            r[1][i] = ydiff;
            r[2][i] = bspl;
            r[3][i] = ydiff - h * k7[i] - bspl;
            r[4][i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        }
        Ok(StepOut { y1, f1: k7, err, dense: DenseSegment::Dopri { t0: t, h, r } })
    }

    fn update_jacobian(&mut self, t: f64, y: &[f64], f0: &[f64]) {
        let n = self.n;
        if !self.sys.jacobian(self.anchor + t, y, &mut self.jac) {
            let mut yp = y.to_vec();
            let mut fp = vec![0.0; n];
            for j in 0..n {
                let d = (f64::EPSILON * y[j].abs().max(1e-5)).sqrt();
                yp[j] = y[j] + d;
                self.f(t, &yp, &mut fp);
                for i in 0..n {
                    self.jac[(i, j)] = (fp[i] - f0[i]) / d;
                }
                yp[j] = y[j];
            }
        }
        self.jac_fresh = true;
        self.lu = None;
    }

    fn factor(&mut self, h: f64) {
        if let Some((hh, _)) = &self.lu {
            if *hh == h {
                return;
            }
        }
        let m = DMatrix::identity(self.n, self.n) - &self.jac * (h * SDIRK_GAMMA);
        self.lu = Some((h, m.lu()));
    }

    fn sdirk(&mut self, t: f64, y: &[f64], f0: &[f64], h: f64) -> Result<StepOut, StepFail> {
        let n = self.n;
        self.factor(h);
        let sc: Vec<f64> = y.iter().map(|v| self.cfg.abs_tol + self.cfg.rel_tol * v.abs()).collect();
        let snorm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt();
        let newton_tol = 1e-3;
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(5);
        let mut ystage = y.to_vec();
        let mut fy = vec![0.0; n];
        for s in 0..5 {
            let mut base = y.to_vec();
            for (j, kj) in ks.iter().enumerate() {
                let a = SDIRK_A[s][j];
                for i in 0..n {
                    base[i] += h * a * kj[i];
                }
            }
            // predictor: previous stage value (y0 for the first stage)
            if s == 0 {
                for i in 0..n {
                    ystage[i] = y[i] + h * SDIRK_GAMMA * f0[i];
                }
            }
            let ts = t + SDIRK_C[s] * h;
            let mut prev = f64::INFINITY;
            let mut converged = false;
            for _ in 0..12 {
                self.f(ts, &ystage, &mut fy);
                if fy.iter().any(|v| !v.is_finite()) {
                    return Err(StepFail::NonFinite);
                }
                let res = DVector::from_iterator(
                    n,
                    (0..n).map(|i| -(ystage[i] - base[i] - h * SDIRK_GAMMA * fy[i])),
                );
                let lu = &self.lu.as_ref().expect("factored").1;
                let delta = match lu.solve(&res) {
                    Some(d) => d,
                    None => return Err(StepFail::Newton),
                };
                for i in 0..n {
                    ystage[i] += delta[i];
                }
                let dn = snorm(delta.as_slice());
                if !dn.is_finite() {
                    return Err(StepFail::Newton);
                }
                if dn <= newton_tol || dn == 0.0 {
                    converged = true;
                    break;
                }
                if dn > 0.9 * prev && prev < f64::INFINITY {
                    return Err(StepFail::Newton);
                }
                prev = dn;
            }
            if !converged {
                return Err(StepFail::Newton);
            }
            // stage derivative from the implicit relation, consistent with the solve
            let k: Vec<f64> = (0..n).map(|i| (ystage[i] - base[i]) / (h * SDIRK_GAMMA)).collect();
            ks.push(k);
        }
        let y1 = ystage.clone();
        let mut f1 = vec![0.0; n];
        self.f(t + h, &y1, &mut f1);
        if y1.iter().chain(&f1).any(|v| !v.is_finite()) {
            return Err(StepFail::NonFinite);
        }
        let mut e = DVector::zeros(n);
        for i in 0..n {
            let yhat: f64 = y[i] + h * (0..5).map(|s| SDIRK_BHAT[s] * ks[s][i]).sum::<f64>();
            e[i] = y1[i] - yhat;
        }
        // filter the estimate through (I - h gamma J)^-1 so stiff modes do not inflate it
        let lu = &self.lu.as_ref().expect("factored").1;
        let ef = lu.solve(&e).unwrap_or(e);
        let err = self.err_norm(ef.as_slice(), y, &y1);
        let dense = DenseSegment::Hermite {
            t0: t,
            h,
            y0: y.to_vec(),
            y1: y1.clone(),
            f0: f0.to_vec(),
            f1: f1.clone(),
        };
        Ok(StepOut { y1, f1, err, dense })
    }

    fn step(&mut self, t: f64, y: &[f64], f0: &[f64], h: f64) -> Result<StepOut, StepFail> {
        match self.cfg.method {
            Method::AdaptiveExplicit => self.dopri(t, y, f0, h),
            Method::ImplicitStiff => self.sdirk(t, y, f0, h),
        }
    }

    fn order(&self) -> f64 {
        match self.cfg.method {
            Method::AdaptiveExplicit => 5.0,
            Method::ImplicitStiff => 4.0,
        }
    }

    /// One step of exactly `h` without error control, for event polishing.
    // the inner loop restarts through `continue 'outer` after `pieces` changes
    #[allow(clippy::mut_range_bound)]
    fn exact_step(&mut self, t: f64, y: &[f64], f0: &[f64], h: f64) -> Option<Vec<f64>> {
        if h == 0.0 {
            return Some(y.to_vec());
        }
        if self.cfg.method == Method::ImplicitStiff {
            self.update_jacobian(t, y, f0);
        }
        // split into pieces small enough for the Newton solve to converge
        let mut pieces = 1usize;
        'outer: for _ in 0..12 {
            let hp = h / pieces as f64;
            let mut tt = t;
            let mut yy = y.to_vec();
            let mut ff = f0.to_vec();
            for _ in 0..pieces {
                match self.step(tt, &yy, &ff, hp) {
                    Ok(o) => {
                        yy = o.y1;
                        ff = o.f1;
                        tt += hp;
                    }
                    Err(_) => {
                        pieces *= 2;
                        continue 'outer;
                    }
                }
            }
            return Some(yy);
        }
        None
    }
}

/// Integrate `sys` from `t0` to `t1` (either direction).
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t1: f64,
    cfg: &IntegratorConfig,
    events: &[Event<'_>],
) -> Result<Solution, FlowError> {
    cfg.validate()?;
    let n = sys.dim();
    assert_eq!(y0.len(), n, "state dimension mismatch");
    let mut st = Stepper::new(sys, cfg);
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    // local time; the absolute time is `st.anchor + t`. The origin moves
    // forward when steps become tiny against |t| so fast layers deep into a
    // run stay resolvable.
    st.anchor = t0;
    let mut t = 0.0;
    let mut t_end = t1 - t0;
    let mut y = y0.to_vec();
    let mut f0 = vec![0.0; n];
    st.f(t, &y, &mut f0);
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite { t: t0, y });
    }
    let mut traj = Trajectory::default();
    if cfg.store {
        traj.t.push(t0);
        traj.y.push(y.clone());
    }
    let mut crossings = Vec::new();
    if t1 == t0 {
        return Ok(Solution { t: t0, y, crossings, stopped_by: None, trajectory: traj });
    }
    let order = st.order();
    let mut h = st.initial_step(t, &y, &f0, dir, order);
    // an event value within this of zero at the start does not count as a sign
    let start_tol = 1e-13;
    let mut g_prev: Vec<Option<f64>> = events
        .iter()
        .map(|e| {
            let g = (e.g)(t0, &y);
            if g.abs() <= start_tol { None } else { Some(g) }
        })
        .collect();
    let mut need_jac = true;
    let mut last_rejected = false;
    loop {
        if traj.steps >= cfg.max_steps {
            return Err(FlowError::MaxSteps { limit: cfg.max_steps, t: st.anchor + t, y });
        }
        let remaining = t_end - t;
        if remaining * dir <= 0.0 {
            break;
        }
        h = dir * h.abs().min(cfg.max_step).min(remaining.abs());
        if (remaining - h).abs() < 1e-12 * h.abs() {
            h = remaining;
        }
        if t + h == t {
            return Err(FlowError::StepUnderflow { t: st.anchor + t, y });
        }
        if cfg.method == Method::ImplicitStiff && (need_jac || !st.jac_fresh) {
            st.update_jacobian(t, &y, &f0);
            need_jac = false;
        }
        let out = match st.step(t, &y, &f0, h) {
            Ok(o) => o,
            Err(StepFail::NonFinite) | Err(StepFail::Newton) => {
                traj.rejected += 1;
                h *= 0.25;
                need_jac = true;
                last_rejected = true;
                continue;
            }
        };
        if !(out.err <= 1.0) {
            traj.rejected += 1;
            let fac = if out.err.is_finite() { (0.9 * out.err.powf(-1.0 / order)).clamp(0.1, 0.9) } else { 0.1 };
            h *= fac;
            last_rejected = true;
            if cfg.method == Method::ImplicitStiff {
                need_jac = true;
            }
            continue;
        }
        // accepted
        traj.steps += 1;
        let t_new = if h == remaining { t_end } else { t + h };
        let anchor = st.anchor;
        // events on [t, t_new]
        let mut hits: Vec<(f64, usize, i32)> = Vec::new();
        let mut g_new_all = Vec::with_capacity(events.len());
        for (ei, ev) in events.iter().enumerate() {
            let g1 = (ev.g)(anchor + t_new, &out.y1);
            g_new_all.push(g1);
            let Some(g0) = g_prev[ei] else { continue };
            if g1 == 0.0 || (g0 < 0.0) != (g1 < 0.0) {
                let d = if g1 > g0 { 1 } else { -1 };
                if ev.direction != 0 && ev.direction != d {
                    continue;
                }
                let tc = locate(&out.dense, &*ev.g, anchor, t, t_new, g0, n, cfg.event_tol_time);
                hits.push((tc, ei, d));
            }
        }
        hits.sort_by(|a, b| ((a.0 - t) * dir).partial_cmp(&((b.0 - t) * dir)).unwrap());
        let mut stop = None;
        for (tc, ei, d) in hits {
            let ev = &events[ei];
            let (tp, yp, res) = polish(&mut st, &*ev.g, t, &y, &f0, tc, &out.dense);
            crossings.push(CrossingRecord { event: ei, t: anchor + tp, state: yp.clone(), residual: res, direction: d });
            if ev.terminal {
                stop = Some((ei, anchor + tp, yp));
                break;
            }
        }
        if let Some((ei, tp, yp)) = stop {
            if cfg.store {
                traj.dense.push(out.dense);
                traj.t.push(tp);
                traj.y.push(yp.clone());
            }
            traj.rhs_evals = st.rhs_evals;
            return Ok(Solution { t: tp, y: yp, crossings, stopped_by: Some(ei), trajectory: traj });
        }
        for (ei, g1) in g_new_all.into_iter().enumerate() {
            if g_prev[ei].is_some() || g1.abs() > start_tol {
                g_prev[ei] = Some(g1);
            }
        }
        t = t_new;
        y = out.y1;
        f0 = out.f1;
        if cfg.store {
            traj.t.push(anchor + t);
            traj.y.push(y.clone());
            traj.dense.push(out.dense);
        }
        let mut fac = if out.err == 0.0 { 5.0 } else { (0.9 * out.err.powf(-1.0 / order)).clamp(0.2, 5.0) };
        if last_rejected {
            fac = fac.min(1.0);
        }
        last_rejected = false;
        if cfg.method == Method::ImplicitStiff {
            st.jac_fresh = false;
            // keep the factorization when the step barely changes
            if (0.9..=1.2).contains(&fac) {
                fac = 1.0;
                st.jac_fresh = true;
            }
        }
        h *= fac;
        if !cfg.store && h.abs() < 1e-6 * t.abs() {
            st.anchor += t;
            t_end -= t;
            t = 0.0;
        }
    }
    traj.rhs_evals = st.rhs_evals;
    Ok(Solution { t: t1, y, crossings, stopped_by: None, trajectory: traj })
}

/// Bisection on the dense interpolant for a sign change of `g` in `[a, b]`.
#[allow(clippy::too_many_arguments)]
fn locate(
    dense: &DenseSegment,
    g: &dyn Fn(f64, &[f64]) -> f64,
    anchor: f64,
    a: f64,
    b: f64,
    ga: f64,
    n: usize,
    tol: f64,
) -> f64 {
    let mut buf = vec![0.0; n];
    let (mut lo, mut hi) = (a, b);
    let mut glo = ga;
    for _ in 0..200 {
        let tol_here = tol.max(4.0 * f64::EPSILON * lo.abs().max(hi.abs()));
        if (hi - lo).abs() <= tol_here {
            break;
        }
        let mid = 0.5 * (lo + hi);
        dense.eval(mid, &mut buf);
        let gm = g(anchor + mid, &buf);
        if gm == 0.0 {
            return mid;
        }
        if (gm < 0.0) == (glo < 0.0) {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Re-integrate from the step start to the located time and refine with
/// Newton iterations in t on the section value.
fn polish<S: OdeSystem + ?Sized>(
    st: &mut Stepper<'_, S>,
    g: &dyn Fn(f64, &[f64]) -> f64,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    tc: f64,
    dense: &DenseSegment,
) -> (f64, Vec<f64>, f64) {
    let n = st.n;
    let interp = |t: f64| {
        let mut b = vec![0.0; n];
        dense.eval(t, &mut b);
        b
    };
    let mut best_t = tc;
    let mut best_y = st.exact_step(t0, y0, f0, tc - t0).unwrap_or_else(|| interp(tc));
    let anchor = st.anchor;
    let mut best_g = g(anchor + best_t, &best_y);
    let mut fy = vec![0.0; n];
    for _ in 0..4 {
        if best_g.abs() <= 1e-15 {
            break;
        }
        st.f(best_t, &best_y, &mut fy);
        let scale = best_y.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let fn_ = fy.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        let d = 1e-6 * scale / fn_;
        let yp: Vec<f64> = (0..n).map(|i| best_y[i] + d * fy[i]).collect();
        let ym: Vec<f64> = (0..n).map(|i| best_y[i] - d * fy[i]).collect();
        let gdot = (g(anchor + best_t + d, &yp) - g(anchor + best_t - d, &ym)) / (2.0 * d);
        if gdot == 0.0 || !gdot.is_finite() {
            break;
        }
        let tn = best_t - best_g / gdot;
        let Some(yn) = st.exact_step(t0, y0, f0, tn - t0) else { break };
        let gn = g(anchor + tn, &yn);
        if gn.abs() < best_g.abs() {
            best_t = tn;
            best_y = yn;
            best_g = gn;
        } else {
            break;
        }
    }
    (best_t, best_y, best_g.abs())
}

/// First crossing of `section` in `direction` within `max_time` of `t0`
/// (negative `max_time` integrates backwards).
pub fn poincare<S: OdeSystem + ?Sized>(
    sys: &S,
    section: impl Fn(f64, &[f64]) -> f64,
    t0: f64,
    start: &[f64],
    cfg: &IntegratorConfig,
    max_time: f64,
    direction: i32,
) -> Result<CrossingRecord, FlowError> {
    let ev = [Event::new(section, direction, true)];
    let sol = integrate(sys, t0, start, t0 + max_time, cfg, &ev)?;
    match sol.stopped_by {
        Some(_) => Ok(sol.crossings.into_iter().last().expect("terminal crossing recorded")),
        None => Err(FlowError::Timeout { t: sol.t, y: sol.y }),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("map failed at stencil point {point:?}: {message}")]
pub struct StencilError {
    pub point: Vec<f64>,
    pub message: String,
}

/// Central-difference Jacobian of `map` at `at`. With `richardson` the step
/// is halved once and the two estimates combined as `(4 D(h/2) - D(h))/3`.
pub fn map_derivative<E: std::fmt::Display>(
    map: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>, E>,
    at: &[f64],
    step: f64,
    richardson: bool,
) -> Result<DMatrix<f64>, StencilError> {
    let mut central = |h: f64| -> Result<DMatrix<f64>, StencilError> {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(at.len());
        for j in 0..at.len() {
            let mut xp = at.to_vec();
            let mut xm = at.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fp = map(&xp).map_err(|e| StencilError { point: xp.clone(), message: e.to_string() })?;
            let fm = map(&xm).map_err(|e| StencilError { point: xm.clone(), message: e.to_string() })?;
            cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
        }
        let m = cols.first().map_or(0, |c| c.len());
        Ok(DMatrix::from_fn(m, at.len(), |i, j| cols[j][i]))
    };
    let d1 = central(step)?;
    if !richardson {
        return Ok(d1);
    }
    let d2 = central(0.5 * step)?;
    Ok((d2 * 4.0 - d1) / 3.0)
}
