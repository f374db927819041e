//! Grazing suite: benchmark system, chart-122 Chini transition, chart-121
//! reflection, folded saddle and canard in Q213, W1/W2 wedges and the
//! saddle-node search on the full model.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::atlas::ChartId;
use crate::charts::ChartModel;
use crate::flow::{self, FlowError, IntegratorConfig, OdeSystem};
use crate::model::{fold_constants, ModelError, ModelParams, Shifted};
use crate::pws::{AffineField, BenchmarkPlus, PwsSystem, ScalarFn};
use crate::regfun::RegFun;
use crate::roots::{brent, sign_changes, RootError};
use crate::sweep::par_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrazingError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Root(#[from] RootError),
    #[error("domain: {0}")]
    Domain(String),
    #[error("no transition: {0}")]
    NoTransition(String),
    #[error("fold-line singularity at nu213 = {0}")]
    Singular(f64),
    #[error("{what} escaped before the section; last state {state:?}")]
    Escape { what: &'static str, state: Vec<f64> },
    #[error("no canard: {0}")]
    NoCanard(String),
    #[error("not found: {0}")]
    NotFound(String),
}

fn tight() -> IntegratorConfig {
    IntegratorConfig::default().with_tol(1e-12, 1e-14)
}

// ---------------------------------------------------------------- systems

/// Normal form `Z_+ = (1 + f, 2x + y g)`, `Z_- = (0, 1)` with the fold
/// pinned at the origin.
#[derive(Clone)]
pub struct GrazingNormalForm {
    pub f: ScalarFn,
    pub g: ScalarFn,
    pub mu: f64,
}

impl std::fmt::Debug for GrazingNormalForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrazingNormalForm(mu = {})", self.mu)
    }
}

impl GrazingNormalForm {
    /// Rejects `f` with `|f(0, 0, mu)| > 1e-14` at any of `mus`.
    pub fn new(f: ScalarFn, g: ScalarFn, mu: f64, mus: &[f64]) -> Result<Self, GrazingError> {
        for &m in mus.iter().chain(std::iter::once(&mu)) {
            let v = f(0.0, 0.0, m);
            if !(v.abs() <= 1e-14) {
                return Err(GrazingError::Domain(format!("f(0, 0, {m}) = {v}")));
            }
        }
        Ok(Self { f, g, mu })
    }

    pub fn constant_g(g0: f64, mu: f64) -> Self {
        Self { f: Arc::new(|_, _, _| 0.0), g: Arc::new(move |_, _, _| g0), mu }
    }

    pub fn system(&self) -> PwsSystem {
        PwsSystem::new(
            Arc::new(crate::pws::NormalFormPlus { f: self.f.clone(), g: self.g.clone() }),
            Arc::new(AffineField::constant([0.0, 1.0])),
            self.mu,
        )
    }
}

/// Repelling unit circle around `(0, 1 + mu)` above, `Z_- = (0, 1)` below.
pub fn benchmark_system(mu: f64, lambda: f64) -> Result<PwsSystem, GrazingError> {
    if !(lambda > 0.0) {
        return Err(GrazingError::Domain(format!("lambda_rep = {lambda} must be positive")));
    }
    Ok(PwsSystem::new(
        Arc::new(BenchmarkPlus { lambda }),
        Arc::new(AffineField::constant([0.0, 1.0])),
        mu,
    ))
}

// ---------------------------------------------------------------- wedges

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wedge {
    W1,
    W2,
    Neither,
}

impl Wedge {
    pub fn as_str(&self) -> &'static str {
        match self {
            Wedge::W1 => "W1",
            Wedge::W2 => "W2",
            Wedge::Neither => "neither",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeConstants {
    pub alpha0: f64,
    pub eps0: f64,
    pub eps1: f64,
}

impl Default for RegimeConstants {
    fn default() -> Self {
        Self { alpha0: 0.5, eps0: 0.5, eps1: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimePoint {
    pub epsilon: f64,
    pub alpha: f64,
    pub wedge: Wedge,
    /// `alpha / eps^{2k}`
    pub w1_coord: f64,
    /// `eps / alpha^{(k+1)/k}`
    pub w2_coord: f64,
}

/// W1 is tested first; the two wedges only meet far from the origin.
pub fn classify_regime(
    epsilon: f64,
    alpha: f64,
    k: u32,
    c: &RegimeConstants,
) -> Result<RegimePoint, GrazingError> {
    if !(epsilon > 0.0 && alpha > 0.0) {
        return Err(GrazingError::Domain(format!("eps = {epsilon}, alpha = {alpha}")));
    }
    let kf = k as f64;
    let w1 = alpha / epsilon.powf(2.0 * kf);
    let w2 = epsilon / alpha.powf((kf + 1.0) / kf);
    let wedge = if w1 <= c.alpha0 {
        Wedge::W1
    } else if c.eps0 < w2 && w2 <= c.eps1 {
        Wedge::W2
    } else {
        Wedge::Neither
    };
    Ok(RegimePoint { epsilon, alpha, wedge, w1_coord: w1, w2_coord: w2 })
}

// ---------------------------------------------------------------- chart 122

/// Printed chart-122 field on `(x122, r122)`.
pub fn eqns122(k: u32, beta: f64, z: [f64; 2]) -> [f64; 2] {
    let kf = k as f64;
    let [x, r] = z;
    let b = beta + 2.0 * x;
    [kf * x * b + r, (2.0 * kf + 1.0) * r * b]
}

/// `(u, v) = ((beta r^k)^{-1/(2k+1)} x, beta^{-2/(2k+1)} r^{1/(2k+1)})`.
pub fn chini_coordinate_map(x: f64, r: f64, beta: f64, k: u32) -> Result<(f64, f64), GrazingError> {
    if !(r > 0.0) {
        return Err(GrazingError::Domain(format!("r122 = {r} must be positive")));
    }
    let m = 2.0 * k as f64 + 1.0;
    let u = (beta * r.powi(k as i32)).powf(-1.0 / m) * x;
    let v = beta.powf(-2.0 / m) * r.powf(1.0 / m);
    Ok((u, v))
}

/// `du/dt` along the chart-122 field; dividing by it gives the Chini field.
pub fn chini_time_factor(r: f64, beta: f64, k: u32) -> f64 {
    let m = 2.0 * k as f64 + 1.0;
    beta.powf(-1.0 / m) * r.powf((k as f64 + 1.0) / m)
}

pub fn chini_field(k: u32, u: f64, v: f64) -> [f64; 2] {
    [1.0, 2.0 * u + v.powi(-(k as i32))]
}

pub const CHINI_HORIZON: f64 = 1e12;
/// Default entry section and sample grid. Below about x = -2 the map is
/// flat to integration tolerance for c3 = 1.
pub const CHINI_C3: f64 = 1.0;
pub const CHINI_FAR: f64 = -1.3;
pub const CHINI_NEAR_GAP: f64 = 0.1;
pub const CHINI_N: usize = 20;

/// `n` uniform entries from `far` to `-beta/2 - near_gap`.
pub fn chini_grid(beta: f64, far: f64, near_gap: f64, n: usize) -> Vec<f64> {
    let b = -0.5 * beta - near_gap;
    (0..n).map(|i| far + (b - far) * i as f64 / (n - 1) as f64).collect()
}
pub const CHINI_ESCAPE: f64 = 1e3;

/// x-component of the transition of the chart-122 field from
/// `{r = c3, x < -beta/2}` to `{r = c3, x > -beta/2}`.
pub fn chini_transition(k: u32, beta: f64, c3: f64, x_in: f64) -> Result<f64, GrazingError> {
    if !(x_in < -0.5 * beta) {
        return Err(GrazingError::Domain(format!("x122 = {x_in} not below -beta/2")));
    }
    if !(c3 > 0.0) {
        return Err(GrazingError::Domain(format!("c3 = {c3}")));
    }
    let sys = flow::FnSystem::new(2, move |_t, z: &[f64], d: &mut [f64]| {
        let f = eqns122(k, beta, [z[0], z[1]]);
        d[0] = f[0];
        d[1] = f[1];
    });
    // far entries collapse r to about c3 (beta / 2|x|)^{(2k+1)/k}; the return
    // along the centre manifold then takes time of order 1/r
    let evs = [
        flow::Event::new(move |_t, z: &[f64]| z[1] - c3, 1, true),
        flow::Event::new(move |_t, z: &[f64]| z[0] - CHINI_ESCAPE, 1, true),
    ];
    let sol = flow::integrate(&sys, 0.0, &[x_in, c3], CHINI_HORIZON, &tight(), &evs)
        .map_err(|e| GrazingError::NoTransition(e.to_string()))?;
    let x = sol.y[0];
    match sol.stopped_by {
        Some(0) if x > -0.5 * beta => Ok(x),
        Some(0) => Err(GrazingError::NoTransition(format!("exit x = {x} below -beta/2"))),
        Some(_) => Err(GrazingError::NoTransition(format!("escaped to x = {x} without crossing r = c3"))),
        None => Err(GrazingError::NoTransition(format!("no crossing before t = {}", sol.t))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiniSample {
    pub x_in: f64,
    pub x_out: f64,
    pub deriv: f64,
    /// Divided second difference of `x_out`; NaN at the grid ends.
    pub second_diff: f64,
}

pub fn chini_derivative(k: u32, beta: f64, c3: f64, x: f64) -> Result<f64, GrazingError> {
    let h = (1e-4 * x.abs().max(1.0)).min(0.25 * (-0.5 * beta - x));
    let d = flow::map_derivative(
        &mut |z: &[f64]| chini_transition(k, beta, c3, z[0]).map(|v| vec![v]),
        &[x],
        h,
        true,
    )
    .map_err(|e| GrazingError::NoTransition(e.to_string()))?;
    Ok(d[(0, 0)])
}

/// Transition, derivative and second differences on the grid `xs`
/// (increasing).
pub fn chini_samples(k: u32, beta: f64, c3: f64, xs: &[f64]) -> Result<Vec<ChiniSample>, GrazingError> {
    let rows = par_map(xs, |&x| -> Result<(f64, f64), GrazingError> {
        Ok((chini_transition(k, beta, c3, x)?, chini_derivative(k, beta, c3, x)?))
    });
    let rows: Vec<(f64, f64)> = rows.into_iter().collect::<Result<_, _>>()?;
    let n = xs.len();
    Ok((0..n)
        .map(|i| {
            let sd = if i == 0 || i + 1 == n {
                f64::NAN
            } else {
                let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
                let s0 = (rows[i].0 - rows[i - 1].0) / h0;
                let s1 = (rows[i + 1].0 - rows[i].0) / h1;
                2.0 * (s1 - s0) / (h0 + h1)
            };
            ChiniSample { x_in: xs[i], x_out: rows[i].0, deriv: rows[i].1, second_diff: sd }
        })
        .collect())
}

// ---------------------------------------------------------------- chart 121

/// Horizon of the reflection transit. Entries closer to `x = -1` than about
/// `2e-11` need longer and are reported as timeouts.
pub const REFLECTION_HORIZON: f64 = 25.0;

/// x-component of the transition of `x' = 1 - x^2, sigma' = 2 sigma x` from
/// `sigma = c3` back to `sigma = c3`.
pub fn reflection_map(x_in: f64, c3: f64, horizon: f64) -> Result<f64, GrazingError> {
    if !(x_in > -1.0 && x_in < 0.0) {
        return Err(GrazingError::NoTransition(format!("x121 = {x_in} outside (-1, 0)")));
    }
    if !(c3 > 0.0) {
        return Err(GrazingError::Domain(format!("c3 = {c3}")));
    }
    let sys = flow::FnSystem::new(2, |_t, z: &[f64], d: &mut [f64]| {
        d[0] = 1.0 - z[0] * z[0];
        d[1] = 2.0 * z[1] * z[0];
    });
    let c = flow::poincare(&sys, move |_t, z: &[f64]| z[1] - c3, 0.0, &[x_in, c3], &tight(), horizon, 1)?;
    Ok(c.state[0])
}

/// G11 field with `f = 0`, `g = g0`, on `(x11, sigma11, alpha11)` at fixed eps.
pub fn g11_field(k: u32, beta: f64, eps: f64, g0: f64, z: [f64; 3]) -> [f64; 3] {
    let kf = k as f64;
    let [x, s, a] = z;
    let sk = s.powi(k as i32);
    let ek = eps.powi(k as i32);
    let ak = a.powi(k as i32);
    let m = 1.0 - beta * ek * sk * ak;
    let g = (2.0 * x + sk * g0) * m + beta * ek * ak;
    [m - 0.5 * x * g, s * g / (2.0 * kf), -(2.0 * kf + 1.0) / (2.0 * kf) * a * g]
}

/// G121 field with `f = 0`, `g = g0`, on `(x121, sigma12, xi121, eps121)`.
pub fn g121_field(k: u32, beta: f64, g0: f64, z: [f64; 4]) -> [f64; 4] {
    let kf = k as f64;
    let [x, s, xi, e] = z;
    let ki = k as i32;
    let m = 1.0 - beta * xi.powi(ki) * e.powi(ki) * s.powi(ki);
    let f = (2.0 * x + s.powi(ki) * xi.powi(ki) * g0) * m + beta * e.powi(ki);
    let c = (2.0 * kf + 1.0) / (2.0 * kf);
    [m - 0.5 * x * f, -s * f, c * xi * f, -c * e * f]
}

/// `(-2x, x/k, -(2k+1)x/k)` at `q11 = (x, 0, 0)`.
pub fn eigval1(k: u32, x: f64) -> [f64; 3] {
    let kf = k as f64;
    [-2.0 * x, x / kf, -(2.0 * kf + 1.0) * x / kf]
}

/// `(-2x, -2x, (2k+1)x/k, -(2k+1)x/k)` at `z121 = (x, 0, 0, 0)`.
pub fn eigval2(k: u32, x: f64) -> [f64; 4] {
    let kf = k as f64;
    let c = (2.0 * kf + 1.0) * x / kf;
    [-2.0 * x, -2.0 * x, c, -c]
}

/// Real parts of the eigenvalues of the Richardson central-difference
/// Jacobian of `f` at `at`, sorted ascending.
pub fn fd_eigenvalues(f: &dyn Fn(&[f64]) -> Vec<f64>, at: &[f64]) -> Vec<f64> {
    let j: DMatrix<f64> = flow::map_derivative(
        &mut |z: &[f64]| Ok::<_, std::convert::Infallible>(f(z)),
        at,
        1e-4,
        true,
    )
    .expect("infallible");
    let mut ev: Vec<f64> = j.complex_eigenvalues().iter().map(|c| c.re).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

// ---------------------------------------------------------------- Q213 reduced

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldedSaddle {
    pub k: u32,
    pub beta: f64,
    pub alpha213: f64,
    pub g0: f64,
    pub x_f: f64,
    pub nu_f: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
}

pub fn folded_saddle(k: u32, beta: f64, alpha213: f64, g0: f64) -> Result<FoldedSaddle, GrazingError> {
    if !(alpha213 > 0.0) {
        return Err(GrazingError::Domain(format!("alpha213 = {alpha213}")));
    }
    let kf = k as f64;
    let (nu_f, _) = fold_constants(k, beta);
    let x_f = 0.5 * alpha213 * g0 - 0.5 * beta * nu_f.powf(-kf);
    let disc = (8.0 * (kf + 1.0) * nu_f * alpha213 + nu_f * nu_f).sqrt();
    Ok(FoldedSaddle {
        k,
        beta,
        alpha213,
        g0,
        x_f,
        nu_f,
        lambda_plus: -0.5 * nu_f + 0.5 * disc,
        lambda_minus: -0.5 * nu_f - 0.5 * disc,
    })
}

impl FoldedSaddle {
    /// Eigenvalues of the finite-difference Jacobian of the desingularized
    /// reduced flow at the saddle, ascending.
    pub fn numerical_eigenvalues(&self) -> Vec<f64> {
        let f = |z: &[f64]| {
            reduced_r213(self.k, self.beta, self.alpha213, self.g0, [z[0], z[1]], true)
                .map(|v| v.to_vec())
                .unwrap_or(vec![f64::NAN; 2])
        };
        fd_eigenvalues(&f, &[self.x_f, self.nu_f])
    }
}

/// Reduced flow on the Q213 critical manifold in `(x213, nu213)`. The
/// desingularized form multiplies by `1 - k beta nu^{-k-1}`.
pub fn reduced_r213(
    k: u32,
    beta: f64,
    alpha213: f64,
    g0: f64,
    z: [f64; 2],
    desingularized: bool,
) -> Result<[f64; 2], GrazingError> {
    let [x, nu] = z;
    if !(nu > 0.0) {
        return Err(GrazingError::Domain(format!("nu213 = {nu}")));
    }
    let kf = k as f64;
    let d = nu - kf * beta * nu.powf(-kf);
    let br = 2.0 * x - alpha213 * g0 + beta * nu.powf(-kf);
    if desingularized {
        return Ok([alpha213 * d, br * nu]);
    }
    if d.abs() < 1e-12 {
        return Err(GrazingError::Singular(nu));
    }
    Ok([nu * alpha213, br * nu * nu / d])
}

// ---------------------------------------------------------------- canard

/// Q213 field with `x = rho^k x213`, `alpha = rho^k alpha213` on
/// `(x213, nu213, p213)`, time as in the Q213 chart.
#[derive(Debug, Clone)]
pub struct CanardSystem {
    pub model: ChartModel,
    pub alpha213: f64,
    pub rho: f64,
    pub cfg: IntegratorConfig,
}

impl CanardSystem {
    /// Normal form with `f = 0`, `g = g0`, `mu = 0`.
    pub fn new(reg: RegFun, g0: f64, alpha213: f64, rho: f64) -> Result<Self, GrazingError> {
        if !(rho > 0.0 && rho <= 0.2) {
            return Err(GrazingError::Domain(format!("rho213 = {rho} outside (0, 0.2]")));
        }
        if !(alpha213 > 0.0) {
            return Err(GrazingError::Domain(format!("alpha213 = {alpha213}")));
        }
        Ok(Self {
            model: ChartModel::new(reg, PwsSystem::normal_form(g0, 0.0)),
            alpha213,
            rho,
            cfg: tight(),
        })
    }

    fn rk(&self) -> f64 {
        self.rho.powi(self.model.reg.k as i32)
    }

    fn q213(&self, z: &[f64]) -> [f64; 5] {
        let rk = self.rk();
        [rk * z[0], z[1], z[2], self.rho, rk * self.alpha213]
    }

    pub fn fold(&self) -> (f64, f64) {
        fold_constants(self.model.reg.k, self.model.reg.beta())
    }

    /// First-order slow-manifold graph `p213(x213, nu213)`.
    pub fn slow_graph(&self, x: f64, nu: f64) -> f64 {
        let reg = &self.model.reg;
        let kf = reg.k as f64;
        let b = reg.beta();
        let nk = nu.powf(-kf);
        let p0 = -reg.tail_plus_value(self.rho / nu) * nk;
        let z = self.model.field(ChartId::Q213, &self.q213(&[x, nu, p0])).expect("Q213 field");
        // z[1] = nu (rho Y - t - p0) with p0 = -t
        let y = z[1] / (nu * self.rho);
        p0 - self.rho * kf * b * nk * y / (nu - kf * b * nk)
    }
}

impl OdeSystem for CanardSystem {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, z: &[f64], d: &mut [f64]) {
        match self.model.field(ChartId::Q213, &self.q213(z)) {
            Ok(f) => {
                d[0] = f[0] / self.rk();
                d[1] = f[1];
                d[2] = f[2];
            }
            Err(_) => d.fill(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    Attracting,
    Repelling,
}

/// Crossing of a slow-manifold trace with the fold section `nu = nu_f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionHit {
    pub x_start: f64,
    pub x: f64,
    pub p: f64,
}

/// Seed offset in nu from the fold for the attracting branch.
pub const SEED_ATTRACTING: f64 = 1.0;
/// Seed for the repelling branch as a fraction of `nu_f`.
pub const SEED_REPELLING: f64 = 0.5;

impl CanardSystem {
    /// Seed nu for a branch: `nu_f + 1` on the attracting side, `nu_f / 2`
    /// on the repelling side (`nu_f - 1 < 0` for the shipped families).
    pub fn seed_nu(&self, branch: Branch) -> f64 {
        let (nu_f, _) = self.fold();
        match branch {
            Branch::Attracting => nu_f + SEED_ATTRACTING,
            Branch::Repelling => nu_f * SEED_REPELLING,
        }
    }

    /// Trace from the graph at `(x_start, nu0)`: forward on the attracting
    /// side, backward on the repelling side, to `nu = nu_f`. Traces that turn
    /// back past their seed are escapes.
    pub fn trace(&self, branch: Branch, x_start: f64, nu0: f64) -> Result<SectionHit, GrazingError> {
        let (nu_f, _) = self.fold();
        let p0 = self.slow_graph(x_start, nu0);
        let horizon = 50.0 / self.rho.powi(self.model.reg.k as i32 + 1);
        let (t, lo, hi) = match branch {
            Branch::Attracting => (horizon, 0.0, nu0 + 0.25),
            Branch::Repelling => (-horizon, 0.5 * nu0, nu_f + 1.0),
        };
        let inside = move |z: &[f64]| z[1] > lo && z[1] < hi && z[2].abs() < 1e3;
        let evs = [
            flow::Event::new(move |_t, z: &[f64]| z[1] - nu_f, 0, true),
            flow::Event::new(move |_t, z: &[f64]| if inside(z) { 1.0 } else { -1.0 }, -1, true),
        ];
        let sol = flow::integrate(self, 0.0, &[x_start, nu0, p0], t, &self.cfg, &evs).map_err(|e| {
            GrazingError::Escape { what: "slow-manifold trace", state: e.last_state().unwrap_or(&[]).to_vec() }
        })?;
        match sol.stopped_by {
            Some(0) => {
                let s = &sol.crossings.last().expect("crossing").state;
                Ok(SectionHit { x_start, x: s[0], p: s[2] })
            }
            _ => Err(GrazingError::Escape { what: "slow-manifold trace", state: sol.y }),
        }
    }
}

/// Range of `tau` in the family parameterization `s_c -+ 10^-tau`.
pub const TAU_MIN: f64 = -0.5;
pub const TAU_MAX: f64 = 10.0;

/// Traces of one branch reaching the fold section, parameterized by the
/// log-distance of the start x from the critical start `s_c`. Starts beyond
/// `s_c` turn back before the section. The section x saturates as the start
/// approaches `s_c`, so `tau` resolves the part of the section near the
/// canard.
#[derive(Debug, Clone)]
pub struct BranchFamily<'a> {
    pub sys: &'a CanardSystem,
    pub branch: Branch,
    pub nu0: f64,
    pub s_c: f64,
    /// Largest `tau <= TAU_MAX` whose trace reaches the section; the
    /// bisection for `s_c` is only accurate to integration noise.
    pub tau_max: f64,
}

impl<'a> BranchFamily<'a> {
    pub fn new(sys: &'a CanardSystem, branch: Branch, nu0: f64) -> Result<Self, GrazingError> {
        let x_f = folded_saddle_of(sys)?.x_f;
        let step = match branch {
            Branch::Attracting => 0.25,
            Branch::Repelling => -0.25,
        };
        let mut ok = x_f - 16.0 * step;
        if sys.trace(branch, ok, nu0).is_err() {
            return Err(GrazingError::NoCanard(format!("{branch:?} trace from x = {ok} misses the fold section")));
        }
        let mut fail = None;
        for i in 1..=64 {
            let s = ok + step;
            if sys.trace(branch, s, nu0).is_err() {
                fail = Some(s);
                break;
            }
            ok = s;
            if i == 64 {
                break;
            }
        }
        let Some(mut fail) = fail else {
            return Err(GrazingError::NoCanard(format!("{branch:?} traces never turn back")));
        };
        for _ in 0..80 {
            let m = 0.5 * (ok + fail);
            if m == ok || m == fail {
                break;
            }
            if sys.trace(branch, m, nu0).is_ok() {
                ok = m;
            } else {
                fail = m;
            }
        }
        // back off one decade from the last clean trace: escapes near s_c
        // flicker at the level of the integration tolerance
        let mut fam = Self { sys, branch, nu0, s_c: ok, tau_max: TAU_MAX + 1.0 };
        loop {
            fam.tau_max -= 0.5;
            if fam.tau_max < 3.0 {
                return Err(GrazingError::NoCanard(format!("{branch:?} family unresolved near s_c = {ok}")));
            }
            if fam.hit(fam.tau_max).is_ok() && fam.hit(fam.tau_max - 1.0).is_ok() {
                fam.tau_max -= 1.0;
                return Ok(fam);
            }
        }
    }

    pub fn start(&self, tau: f64) -> f64 {
        match self.branch {
            Branch::Attracting => self.s_c - 10f64.powf(-tau),
            Branch::Repelling => self.s_c + 10f64.powf(-tau),
        }
    }

    pub fn hit(&self, tau: f64) -> Result<SectionHit, GrazingError> {
        self.sys.trace(self.branch, self.start(tau), self.nu0)
    }

    /// Section x closest to the canard that the family resolves.
    pub fn reach(&self) -> Result<f64, GrazingError> {
        Ok(self.hit(self.tau_max)?.x)
    }

    /// The family member crossing the section at `x`.
    pub fn at(&self, x: f64) -> Result<SectionHit, GrazingError> {
        let edge = self.reach()?;
        let f = |tau: f64| self.hit(tau).map_or(edge - x, |h| h.x - x);
        let tau = brent(f, TAU_MIN, self.tau_max, 1e-13, 200)?;
        self.hit(tau)
    }
}

fn folded_saddle_of(sys: &CanardSystem) -> Result<FoldedSaddle, GrazingError> {
    let reg = &sys.model.reg;
    let g0 = sys.model.sys.plus(0.0, 1.0)[1];
    folded_saddle(reg.k, reg.beta(), sys.alpha213, g0)
}

/// Both traces on the fold section, sampled at common section x values
/// inside the overlap of the two families.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowManifolds213 {
    pub overlap: (f64, f64),
    pub x: Vec<f64>,
    pub attracting: Vec<Option<SectionHit>>,
    pub repelling: Vec<Option<SectionHit>>,
}

impl SlowManifolds213 {
    /// `p_a - p_r` where both traces exist.
    pub fn gap(&self) -> Vec<f64> {
        self.attracting
            .iter()
            .zip(&self.repelling)
            .map(|(a, r)| match (a, r) {
                (Some(a), Some(r)) => a.p - r.p,
                _ => f64::NAN,
            })
            .collect()
    }
}

fn families(sys: &CanardSystem) -> Result<(BranchFamily<'_>, BranchFamily<'_>, (f64, f64)), GrazingError> {
    let fa = BranchFamily::new(sys, Branch::Attracting, sys.seed_nu(Branch::Attracting))?;
    let fr = BranchFamily::new(sys, Branch::Repelling, sys.seed_nu(Branch::Repelling))?;
    let (lo, hi) = (fr.reach()?, fa.reach()?);
    if !(lo < hi) {
        return Err(GrazingError::NoCanard(format!("section traces do not overlap: [{lo}, {hi}]")));
    }
    Ok((fa, fr, (lo, hi)))
}

/// Share of the overlap trimmed at each end before sampling.
pub const OVERLAP_MARGIN: f64 = 0.02;

fn overlap_grid((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    let w = hi - lo;
    let (a, b) = (lo + OVERLAP_MARGIN * w, hi - OVERLAP_MARGIN * w);
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Traces of both slow manifolds on `nu = nu_f` at `n` section x values.
pub fn slow_manifolds_213(sys: &CanardSystem, n: usize) -> Result<SlowManifolds213, GrazingError> {
    let (fa, fr, overlap) = families(sys)?;
    let xs = overlap_grid(overlap, n);
    let rows = par_map(&xs, |&x| (fa.at(x).ok(), fr.at(x).ok()));
    let (attracting, repelling) = rows.into_iter().unzip();
    Ok(SlowManifolds213 { overlap, x: xs, attracting, repelling })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canard {
    pub rho: f64,
    pub alpha213: f64,
    pub x_star: f64,
    pub p_star: f64,
    /// `d(p_a - p_r)/dx` at the root.
    pub gap_slope: f64,
    /// Angle between the two section traces at the root, radians.
    pub angle: f64,
    /// `x_star - x_f`.
    pub offset: f64,
    pub overlap: (f64, f64),
    pub sign_changes: usize,
}

/// Root of the gap between the two traces on the fold section, searched on
/// `n` points across the overlap of the two families.
pub fn canard_intersection(sys: &CanardSystem, n: usize) -> Result<Canard, GrazingError> {
    let fs = folded_saddle_of(sys)?;
    let (fa, fr, overlap) = families(sys)?;
    let gap = |x: f64| match (fa.at(x), fr.at(x)) {
        (Ok(a), Ok(r)) => a.p - r.p,
        _ => f64::NAN,
    };
    let xs = overlap_grid(overlap, n);
    let g = par_map(&xs, |&x| gap(x));
    let idx = sign_changes(&g);
    let Some(&i) = idx.first() else {
        return Err(GrazingError::NoCanard(format!("gap has no sign change on {n} points: {g:?}")));
    };
    let x_star = brent(gap, xs[i], xs[i + 1], 1e-12, 100)?;
    let h = 1e-3 * (overlap.1 - overlap.0);
    let a = [fa.at(x_star - h)?, fa.at(x_star + h)?];
    let r = [fr.at(x_star - h)?, fr.at(x_star + h)?];
    let sa = (a[1].p - a[0].p) / (2.0 * h);
    let sr = (r[1].p - r[0].p) / (2.0 * h);
    Ok(Canard {
        rho: sys.rho,
        alpha213: sys.alpha213,
        x_star,
        p_star: fa.at(x_star)?.p,
        gap_slope: sa - sr,
        angle: sa.atan() - sr.atan(),
        offset: x_star - fs.x_f,
        overlap,
        sign_changes: idx.len(),
    })
}

// ---------------------------------------------------------------- m22

#[derive(Debug, Clone, PartialEq)]
pub struct M22Trace {
    pub y22: Vec<f64>,
    pub x213: Vec<f64>,
    pub dx: f64,
}

/// Traces `x' = alpha213 phi(y22)`, `y22' = -(1 - phi)/phi'` from `y_hi`
/// down to `y_lo`.
pub fn m22_drift(reg: &RegFun, alpha213: f64, y_lo: f64, y_hi: f64) -> Result<M22Trace, GrazingError> {
    if !(y_lo < y_hi) {
        return Err(GrazingError::Domain(format!("empty range [{y_lo}, {y_hi}]")));
    }
    let r = *reg;
    let sys = flow::FnSystem::new(2, move |_t, z: &[f64], d: &mut [f64]| {
        let ph = r.value(z[1]);
        d[0] = alpha213 * ph;
        d[1] = -r.upper_gap(z[1]) / r.prime_value(z[1]);
    });
    let cfg = IntegratorConfig { store: true, ..tight() };
    let ev = [flow::Event::new(move |_t, z: &[f64]| z[1] - y_lo, -1, true)];
    let sol = flow::integrate(&sys, 0.0, &[0.0, y_hi], 1e4, &cfg, &ev)?;
    if sol.stopped_by.is_none() {
        return Err(GrazingError::NoTransition(format!("y22 = {} after t = {}", sol.y[1], sol.t)));
    }
    let mut y22: Vec<f64> = sol.trajectory.y.iter().map(|s| s[1]).collect();
    let mut x213: Vec<f64> = sol.trajectory.y.iter().map(|s| s[0]).collect();
    if y22.last() != Some(&sol.y[1]) {
        y22.push(sol.y[1]);
        x213.push(sol.y[0]);
    }
    Ok(M22Trace { dx: sol.y[0], y22, x213 })
}

// ---------------------------------------------------------------- saddle-node

/// Orbits sliding past `x = -SN_ESCAPE` do not come back: the benchmark's
/// sliding velocity changes sign at `x = -lambda^{-1/3}`.
pub const SN_ESCAPE: f64 = 3.0;

/// Explicit Dormand-Prince at 1e-10. At the W1 point the p layer is only
/// ten times faster than the hysteresis oscillation along the slider, where
/// SDIRK at the model tolerance spends thousands of steps per oscillation.
pub fn sn_integrator() -> IntegratorConfig {
    IntegratorConfig::default().with_tol(1e-10, 1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub c_in: f64,
    pub x_window: (f64, f64),
    pub mu_range: (f64, f64),
    pub n_mu: usize,
    pub n_x: usize,
    pub horizon: f64,
}

impl Default for SnConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            alpha: 2.5e-3,
            lambda: 0.5,
            c_in: 1.0,
            x_window: (-1.5, -0.5),
            mu_range: (-0.05, 0.05),
            n_mu: 21,
            n_x: 41,
            horizon: 50.0,
        }
    }
}

impl SnConfig {
    /// The same scan at a point of the W2 wedge.
    pub fn w2() -> Self {
        Self { epsilon: 2.5e-3, alpha: 0.05, ..Self::default() }
    }
}

/// Fixed points of the reduced map at one mu.
#[derive(Debug, Clone, PartialEq)]
pub struct SnRow {
    pub mu: f64,
    pub fp_x: Vec<f64>,
    /// `R'(x*) - 1` at each fixed point (the 1D `det(DR - I)`).
    pub det: Vec<f64>,
    /// Minimum of `R(x) - x` over the window; it crosses zero where two
    /// fixed points are born.
    pub extremum: f64,
    pub x_extremum: f64,
}

/// Outcome of one sign change of the defect minimum along the mu grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SnCandidate {
    pub mu: f64,
    pub x: f64,
    /// `R'(x)` at the defect minimum.
    pub derivative: f64,
    /// Fixed points within `SN_PAIR_WIDTH` of `x` at `mu -+ SN_PAIR_DMU`.
    pub below: Vec<f64>,
    pub above: Vec<f64>,
    pub det_below: Vec<f64>,
    pub det_above: Vec<f64>,
    /// Two nearby fixed points with opposite `det(DR - I)` on one side,
    /// none on the other.
    pub collision: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleNode {
    pub mu_star: f64,
    pub x_star: f64,
    /// `R'(x*)` at the fold.
    pub derivative: f64,
    pub rows: Vec<SnRow>,
    pub candidates: Vec<SnCandidate>,
    /// Candidates confirmed as collisions.
    pub collisions: usize,
}

/// Half-width in x of the neighbourhood searched for the colliding pair.
pub const SN_PAIR_WIDTH: f64 = 0.02;
/// Offset in mu on either side of a candidate.
pub const SN_PAIR_DMU: f64 = 1e-4;
/// Largest `|R(x) - x|` accepted at a fixed point; larger values mark a
/// jump of the map.
pub const SN_FP_RESIDUAL: f64 = 1e-8;
/// FD step for `R'`.
pub const SN_FD_STEP: f64 = 1e-6;

impl SnConfig {
    pub fn model(&self, mu: f64) -> Result<ModelParams, GrazingError> {
        Ok(ModelParams::new(self.epsilon, self.alpha, RegFun::arctan(), benchmark_system(mu, self.lambda)?)?)
    }

    /// One-dimensional reduced return map on `y = c_in` (downward), started
    /// on the slow manifold with `p` relaxed by one fixed-point step from 1.
    pub fn reduced_map(&self, m: &ModelParams, x: f64) -> Result<f64, GrazingError> {
        let p = m.reg.value((self.c_in + m.alpha) / m.ea());
        let sh = Shifted(m);
        let s0 = sh.from_ambient(&[x, self.c_in, p]);
        let (a, c) = (m.alpha, self.c_in);
        let evs = [
            flow::Event::new(move |_t, s: &[f64]| s[1] - a * s[2] - c, -1, true),
            flow::Event::new(|_t, s: &[f64]| s[0] + SN_ESCAPE, -1, true),
        ];
        let sol = flow::integrate(&sh, 0.0, &s0, self.horizon, &sn_integrator(), &evs)?;
        match sol.stopped_by {
            Some(0) => Ok(sol.y[0]),
            Some(_) => Err(GrazingError::Escape { what: "return orbit", state: sh.to_ambient(&sol.y).to_vec() }),
            None => Err(FlowError::Timeout { t: sol.t, y: sol.y }.into()),
        }
    }

    /// `R(x) - x`, NaN where the orbit escapes or times out.
    pub fn defect(&self, m: &ModelParams, x: f64) -> f64 {
        self.reduced_map(m, x).map(|v| v - x).unwrap_or(f64::NAN)
    }

    pub fn derivative(&self, m: &ModelParams, x: f64) -> Result<f64, GrazingError> {
        let d = flow::map_derivative(
            &mut |z: &[f64]| self.reduced_map(m, z[0]).map(|v| vec![v]),
            &[x],
            SN_FD_STEP,
            true,
        )
        .map_err(|e| GrazingError::NotFound(e.to_string()))?;
        Ok(d[(0, 0)])
    }

    fn grid(&self, (a, b): (f64, f64), n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    /// Fixed points of `R` on `n` points of `[a, b]`, with `R' - 1`.
    fn fixed_points(&self, m: &ModelParams, (a, b): (f64, f64), n: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>), GrazingError> {
        let xs = self.grid((a, b), n);
        let g: Vec<f64> = xs.iter().map(|&x| self.defect(m, x)).collect();
        let mut fp = Vec::new();
        let mut det = Vec::new();
        for i in sign_changes(&g) {
            // an escape boundary inside the cell is a jump, not a fixed point
            let x = match brent(|x| self.defect(m, x), xs[i], xs[i + 1], 1e-12, 100) {
                Ok(x) => x,
                Err(RootError::NonFinite(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            // a jump of R across the diagonal brackets a sign change too
            if !(self.defect(m, x).abs() <= SN_FP_RESIDUAL) {
                continue;
            }
            det.push(self.derivative(m, x)? - 1.0);
            fp.push(x);
        }
        Ok((fp, det, xs, g))
    }

    /// Fixed points and the defect minimum at one mu.
    pub fn row(&self, mu: f64) -> Result<SnRow, GrazingError> {
        let m = self.model(mu)?;
        let (fp_x, det, xs, g) = self.fixed_points(&m, self.x_window, self.n_x)?;
        let (x_extremum, extremum) = self.minimum(&m, &xs, &g)?;
        Ok(SnRow { mu, fp_x, det, extremum, x_extremum })
    }

    /// Grid minimum of the defect refined by golden section on the two
    /// neighbouring cells.
    fn minimum(&self, m: &ModelParams, xs: &[f64], g: &[f64]) -> Result<(f64, f64), GrazingError> {
        let n = xs.len();
        let i = (0..n)
            .filter(|&i| g[i].is_finite())
            .min_by(|&i, &j| g[i].total_cmp(&g[j]))
            .ok_or_else(|| GrazingError::NotFound("defect undefined on the whole window".into()))?;
        let lo = xs[i.saturating_sub(1)];
        let hi = xs[(i + 1).min(n - 1)];
        Ok(self.golden(m, lo, hi))
    }

    fn golden(&self, m: &ModelParams, mut lo: f64, mut hi: f64) -> (f64, f64) {
        // NaN (escape) counts as +inf so the search stays on the defined side
        let f = |x: f64| {
            let v = self.defect(m, x);
            if v.is_finite() { v } else { f64::INFINITY }
        };
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = hi - r * (hi - lo);
        let mut d = lo + r * (hi - lo);
        let (mut fc, mut fd) = (f(c), f(d));
        while hi - lo > 1e-9 {
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - r * (hi - lo);
                fc = f(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + r * (hi - lo);
                fd = f(d);
            }
        }
        let x = 0.5 * (lo + hi);
        (x, self.defect(m, x))
    }

    fn candidate(&self, lo: &SnRow, hi: &SnRow) -> Result<SnCandidate, GrazingError> {
        let cell = (self.x_window.1 - self.x_window.0) / (self.n_x - 1) as f64;
        // the minimum moves little between neighbouring mu; search around
        // both grid minima
        let (a, b) = (
            lo.x_extremum.min(hi.x_extremum) - 2.0 * cell,
            lo.x_extremum.max(hi.x_extremum) + 2.0 * cell,
        );
        let local = |mu: f64| -> f64 {
            match self.model(mu) {
                Ok(m) => {
                    let xs = self.grid((a, b), 17);
                    let g: Vec<f64> = xs.iter().map(|&x| self.defect(&m, x)).collect();
                    self.minimum(&m, &xs, &g).map(|v| v.1).unwrap_or(f64::NAN)
                }
                Err(_) => f64::NAN,
            }
        };
        let mu = brent(local, lo.mu, hi.mu, 1e-7, 60)?;
        let m = self.model(mu)?;
        let xs = self.grid((a, b), 17);
        let g: Vec<f64> = xs.iter().map(|&x| self.defect(&m, x)).collect();
        let (x, _) = self.minimum(&m, &xs, &g)?;
        let derivative = self.derivative(&m, x)?;
        let near = (x - SN_PAIR_WIDTH, x + SN_PAIR_WIDTH);
        let (below, det_below, _, _) = self.fixed_points(&self.model(mu - SN_PAIR_DMU)?, near, 41)?;
        let (above, det_above, _, _) = self.fixed_points(&self.model(mu + SN_PAIR_DMU)?, near, 41)?;
        let pair = |d: &[f64]| d.len() == 2 && d[0] * d[1] < 0.0;
        let collision = (pair(&det_below) && above.is_empty()) || (pair(&det_above) && below.is_empty());
        Ok(SnCandidate { mu, x, derivative, below, above, det_below, det_above, collision })
    }
}

/// Rows of the mu scan and every refined candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct SnScan {
    pub rows: Vec<SnRow>,
    pub candidates: Vec<SnCandidate>,
    /// Candidates whose refinement failed numerically.
    pub failed: Vec<String>,
}

impl SnScan {
    pub fn collisions(&self) -> impl Iterator<Item = &SnCandidate> {
        self.candidates.iter().filter(|c| c.collision)
    }
}

/// Scans the mu grid for sign changes of the defect minimum and refines each
/// by Brent, checking whether two fixed points actually collide there.
pub fn saddle_node_scan(cfg: &SnConfig) -> Result<SnScan, GrazingError> {
    let mus = cfg.grid(cfg.mu_range, cfg.n_mu);
    let rows: Vec<SnRow> = par_map(&mus, |&mu| cfg.row(mu)).into_iter().collect::<Result<_, _>>()?;
    let ext: Vec<f64> = rows.iter().map(|r| r.extremum).collect();
    let idx = sign_changes(&ext);
    let mut candidates = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in idx.iter().zip(par_map(&idx, |&i| cfg.candidate(&rows[i], &rows[i + 1]))) {
        match r {
            Ok(c) => candidates.push(c),
            Err(e) => failed.push(format!("mu in [{}, {}]: {e}", rows[*i].mu, rows[i + 1].mu)),
        }
    }
    Ok(SnScan { rows, candidates, failed })
}

/// First verified collision of [`saddle_node_scan`].
pub fn saddle_node_search(cfg: &SnConfig) -> Result<SaddleNode, GrazingError> {
    let scan = saddle_node_scan(cfg)?;
    let hits: Vec<&SnCandidate> = scan.collisions().collect();
    let Some(first) = hits.first() else {
        let (a, b) = cfg.mu_range;
        return Err(GrazingError::NotFound(format!(
            "no fixed-point collision for mu in [{a}, {b}]; fixed-point counts {:?}; candidates {}",
            scan.rows.iter().map(|r| r.fp_x.len()).collect::<Vec<_>>(),
            scan.candidates.len()
        )));
    };
    Ok(SaddleNode {
        mu_star: first.mu,
        x_star: first.x,
        derivative: first.derivative,
        collisions: hits.len(),
        rows: scan.rows.clone(),
        candidates: scan.candidates.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const BETA: f64 = 1.0 / PI;

    #[test]
    fn benchmark_examples() {
        let s = benchmark_system(0.0, 0.5).unwrap();
        assert_eq!(s.plus(0.0, 0.0), [1.0, 0.0]);
        assert!(benchmark_system(0.0, 0.0).is_err());
        // d h/dt = 2 lambda h (h + 1) along Z_+
        let s = benchmark_system(0.1, 0.5).unwrap();
        for (x, y) in [(1.1, 1.1), (0.5, 1.3), (0.0, 1.8), (-0.3, 0.4)] {
            let w = y - 1.1;
            let h: f64 = x * x + w * w - 1.0;
            let z = s.plus(x, y);
            let hd = 2.0 * x * z[0] + 2.0 * w * z[1];
            assert!((hd - 2.0 * 0.5 * h * (h + 1.0)).abs() < 1e-12);
            assert_eq!(hd.signum(), h.signum());
        }
    }

    #[test]
    fn normal_form_fold_is_pinned() {
        let bad = GrazingNormalForm::new(Arc::new(|x, _, m| x + m), Arc::new(|_, _, _| 0.0), 0.1, &[0.0]);
        assert!(bad.is_err());
        let ok = GrazingNormalForm::new(Arc::new(|x, y, _| x * y), Arc::new(|_, _, _| 1.0), 0.0, &[-0.1, 0.1]);
        assert!(ok.is_ok());
    }

    #[test]
    fn normal_form_quadratic_grazing() {
        let s = GrazingNormalForm::constant_g(0.0, 0.0).system();
        let sys = flow::FnSystem::new(2, |_t, z: &[f64], d: &mut [f64]| {
            let v = s.plus(z[0], z[1]);
            d[0] = v[0];
            d[1] = v[1];
        });
        for x0 in [-0.7, 0.0, 0.4] {
            let sol = flow::integrate(&sys, 0.0, &[x0, 0.0], 1.5, &tight(), &[]).unwrap();
            let t = 1.5;
            assert!((sol.y[1] - (t * t + 2.0 * x0 * t)).abs() < 1e-9);
        }
    }

    #[test]
    fn regimes() {
        let c = RegimeConstants::default();
        assert_eq!(classify_regime(0.1, 2.5e-3, 1, &c).unwrap().wedge, Wedge::W1);
        assert_eq!(classify_regime(2.5e-3, 0.05, 1, &c).unwrap().wedge, Wedge::W2);
        let small = RegimeConstants { alpha0: 0.1, eps0: 0.5, eps1: 2.0 };
        assert_eq!(classify_regime(0.1, 0.1, 1, &small).unwrap().wedge, Wedge::Neither);
    }

    #[test]
    fn chini_map_unit_scaling_and_monotone() {
        let (u, v) = chini_coordinate_map(0.37, 1.0, 1.0, 1).unwrap();
        assert_eq!((u, v), (0.37, 1.0));
        let mut last = 0.0;
        for r in [0.1, 0.5, 1.0, 3.0] {
            let v = chini_coordinate_map(0.0, r, BETA, 1).unwrap().1;
            assert!(v > last);
            last = v;
        }
        assert!(chini_coordinate_map(0.0, 0.0, BETA, 1).is_err());
    }

    #[test]
    fn chini_pushforward_matches_chini_field() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.gen_range(1..=3u32);
            let beta = rng.gen_range(0.2..2.0);
            let x = rng.gen_range(-2.0..1.0);
            let r = rng.gen_range(0.05..3.0);
            let f = eqns122(k, beta, [x, r]);
            let map = |z: &[f64]| {
                let (u, v) = chini_coordinate_map(z[0], z[1], beta, k).unwrap();
                Ok::<_, std::convert::Infallible>(vec![u, v])
            };
            let j = flow::map_derivative(&mut { map }, &[x, r], 1e-4, true).unwrap();
            let tf = chini_time_factor(r, beta, k);
            let (u, v) = chini_coordinate_map(x, r, beta, k).unwrap();
            let want = chini_field(k, u, v);
            for i in 0..2 {
                let push = (j[(i, 0)] * f[0] + j[(i, 1)] * f[1]) / tf;
                assert!((push - want[i]).abs() <= 1e-8 * (1.0 + want[i].abs()), "{push} {}", want[i]);
            }
        }
    }

    #[test]
    fn chini_transition_derivative_bounds() {
        let near = chini_derivative(1, BETA, CHINI_C3, -0.5 * BETA - CHINI_NEAR_GAP).unwrap();
        assert!(near > -1.0 && near < -0.9, "{near}");
        let far = chini_derivative(1, BETA, CHINI_C3, CHINI_FAR).unwrap();
        assert!(far > -0.1 && far < 0.0, "{far}");
        assert!(chini_transition(1, BETA, CHINI_C3, 0.0).is_err());
    }

    #[test]
    fn chini_concave_on_grid() {
        let xs = chini_grid(BETA, CHINI_FAR, CHINI_NEAR_GAP, CHINI_N);
        let s = chini_samples(1, BETA, CHINI_C3, &xs).unwrap();
        assert!(s.iter().all(|r| r.deriv > -1.0 && r.deriv < 0.0));
        assert!(s.windows(2).all(|w| w[1].deriv < w[0].deriv));
        assert!(s[1..CHINI_N - 1].iter().all(|r| r.second_diff < 0.0));
    }

    #[test]
    fn reflection_examples() {
        let h = REFLECTION_HORIZON;
        assert!((reflection_map(-0.5, 0.3, h).unwrap() - 0.5).abs() < 1e-8);
        assert!((reflection_map(-0.99, 0.3, h).unwrap() - 0.99).abs() < 1e-6);
        assert!(matches!(reflection_map(-1.0 + 1e-12, 0.3, h), Err(GrazingError::Flow(FlowError::Timeout { .. }))));
        assert!(reflection_map(-1.0, 0.3, h).is_err());
    }

    #[test]
    fn reflection_involution() {
        for x in [-0.8, -0.3, -0.05] {
            let y = reflection_map(x, 0.2, REFLECTION_HORIZON).unwrap();
            let back = reflection_map(-y, 0.2, REFLECTION_HORIZON).unwrap();
            assert!((back + x).abs() < 2e-10, "{x} {back}");
        }
    }

    #[test]
    fn grazing_chart_eigenvalues() {
        for k in [1u32, 2] {
            for x in [-1.0, 1.0] {
                let f11 = |z: &[f64]| g11_field(k, BETA, 0.05, 0.3, [z[0], z[1], z[2]]).to_vec();
                let ev = fd_eigenvalues(&f11, &[x, 0.0, 0.0]);
                let mut want = eigval1(k, x).to_vec();
                want.sort_by(|a, b| a.total_cmp(b));
                for (a, b) in ev.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-6, "{k} {x}: {ev:?} {want:?}");
                }
                let f121 = |z: &[f64]| g121_field(k, BETA, 0.3, [z[0], z[1], z[2], z[3]]).to_vec();
                let ev = fd_eigenvalues(&f121, &[x, 0.0, 0.0, 0.0]);
                let mut want = eigval2(k, x).to_vec();
                want.sort_by(|a, b| a.total_cmp(b));
                for (a, b) in ev.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-6, "{k} {x}: {ev:?} {want:?}");
                }
            }
        }
    }

    #[test]
    fn g11_equilibria() {
        for x in [-1.0, 1.0] {
            let f = g11_field(1, BETA, 0.05, 0.3, [x, 0.0, 0.0]);
            assert!(f.iter().all(|v| v.abs() < 1e-15));
            let f = g121_field(1, BETA, 0.3, [x, 0.0, 0.0, 0.0]);
            assert!(f.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn folded_saddle_example() {
        let fs = folded_saddle(1, BETA, 1.0, 0.0).unwrap();
        assert!((fs.nu_f - PI.powf(-0.5)).abs() < 1e-15);
        assert!((fs.x_f + 0.5 * PI.powf(-0.5)).abs() < 1e-15);
        let disc = (16.0 * fs.nu_f + fs.nu_f * fs.nu_f).sqrt();
        assert!((fs.lambda_plus - 0.5 * (-fs.nu_f + disc)).abs() < 1e-15);
        assert!((fs.lambda_plus - 1.2465).abs() < 1e-4 && (fs.lambda_minus + 1.8107).abs() < 1e-4);
        for a in [0.1, 1.0, 10.0] {
            let fs = folded_saddle(1, BETA, a, 0.0).unwrap();
            assert!(fs.lambda_plus * fs.lambda_minus < 0.0);
        }
        assert!(folded_saddle(1, BETA, 0.0, 0.0).is_err());
    }

    #[test]
    fn folded_saddle_matches_jacobian() {
        for k in [1u32, 2] {
            for a in [0.5, 1.0, 2.0] {
                let fs = folded_saddle(k, BETA, a, 0.4).unwrap();
                let ev = fs.numerical_eigenvalues();
                assert!((ev[0] - fs.lambda_minus).abs() < 1e-6 * fs.lambda_minus.abs());
                assert!((ev[1] - fs.lambda_plus).abs() < 1e-6 * fs.lambda_plus.abs());
            }
        }
    }

    #[test]
    fn reduced_r213_examples() {
        let fs = folded_saddle(1, BETA, 1.0, 0.0).unwrap();
        let v = reduced_r213(1, BETA, 1.0, 0.0, [fs.x_f, fs.nu_f], true).unwrap();
        assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
        assert!(matches!(reduced_r213(1, BETA, 1.0, 0.0, [0.0, fs.nu_f], false), Err(GrazingError::Singular(_))));
        let v = reduced_r213(1, BETA, 1.0, 0.0, [5.0, 1.5], false).unwrap();
        assert!(v[1] > 0.0);
        for (x, nu) in [(0.3, 0.3), (-1.0, 0.4), (2.0, 0.1)] {
            let a = reduced_r213(1, BETA, 1.0, 0.0, [x, nu], false).unwrap();
            let b = reduced_r213(1, BETA, 1.0, 0.0, [x, nu], true).unwrap();
            let dot = a[0] * b[0] + a[1] * b[1];
            let cross = a[0] * b[1] - a[1] * b[0];
            assert!(dot < 0.0 && cross.abs() < 1e-12 * (1.0 + dot.abs()));
        }
    }

    #[test]
    fn canard_unique_and_transverse() {
        let sys = CanardSystem::new(RegFun::arctan(), 0.0, 1.0, 0.05).unwrap();
        let c = canard_intersection(&sys, 9).unwrap();
        assert_eq!(c.sign_changes, 1);
        assert!(c.angle.abs() > 1e-2, "{c:?}");
        assert!(c.overlap.0 < c.x_star && c.x_star < c.overlap.1);
        let sys2 = CanardSystem::new(RegFun::arctan(), 0.0, 2.0, 0.05).unwrap();
        let c2 = canard_intersection(&sys2, 9).unwrap();
        assert_eq!(c2.sign_changes, 1);
        assert!(c2.angle.abs() > 1e-2, "{c2:?}");
    }

    #[test]
    fn slow_manifold_trace_is_seed_insensitive() {
        let sys = CanardSystem::new(RegFun::arctan(), 0.0, 1.0, 0.05).unwrap();
        let nu = sys.seed_nu(Branch::Attracting);
        let a = BranchFamily::new(&sys, Branch::Attracting, nu).unwrap();
        let b = BranchFamily::new(&sys, Branch::Attracting, nu + 0.5).unwrap();
        for x in [-1.0, -0.5, -0.3] {
            let (ha, hb) = (a.at(x).unwrap(), b.at(x).unwrap());
            assert!((ha.p - hb.p).abs() < 1e-8, "{x}: {ha:?} {hb:?}");
        }
    }

    #[test]
    fn canard_rejects_bad_parameters() {
        assert!(CanardSystem::new(RegFun::arctan(), 0.0, 1.0, 0.3).is_err());
        assert!(CanardSystem::new(RegFun::arctan(), 0.0, -1.0, 0.1).is_err());
    }

    #[test]
    fn sn_default_point_is_w1() {
        let c = SnConfig::default();
        let p = classify_regime(c.epsilon, c.alpha, 1, &RegimeConstants::default()).unwrap();
        assert_eq!(p.wedge, Wedge::W1);
        let c = SnConfig::w2();
        let p = classify_regime(c.epsilon, c.alpha, 1, &RegimeConstants::default()).unwrap();
        assert_eq!(p.wedge, Wedge::W2);
    }

    #[test]
    fn sn_flat_branch_crosses_diagonal() {
        // orbits entering left of the fold slide and leave at a mu-dependent
        // point, nearly independent of x
        let c = SnConfig::default();
        let x = -1.05;
        let lo = c.model(0.002).unwrap();
        let hi = c.model(0.004).unwrap();
        assert!(c.defect(&lo, x) > 0.0);
        assert!(c.defect(&hi, x) < 0.0);
        let d = c.derivative(&c.model(0.003).unwrap(), x).unwrap();
        assert!(d.abs() < 0.5, "{d}");
    }

    #[test]
    fn sn_far_left_escapes() {
        let c = SnConfig::default();
        let m = c.model(0.01).unwrap();
        assert!(matches!(c.reduced_map(&m, -1.45), Err(GrazingError::Escape { .. })));
    }

    #[test]
    fn m22_drift_closed_form() {
        let reg = RegFun::arctan();
        let tr = m22_drift(&reg, 1.0, -5.0, 5.0).unwrap();
        assert!(tr.y22.windows(2).all(|w| w[1] < w[0]));
        // dx/dq = -alpha q/(1 - q) with q = phi(y22)
        let prim = |q: f64| -q - (1.0 - q).ln();
        let want = prim(reg.value(5.0)) - prim(reg.value(-5.0));
        assert!(tr.dx > 0.0 && (tr.dx - want).abs() < 1e-9, "{} {want}", tr.dx);
        let tr2 = m22_drift(&reg, 2.5, -5.0, 5.0).unwrap();
        assert!((tr2.dx - 2.5 * tr.dx).abs() < 1e-9);
    }
}
