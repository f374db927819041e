//! Return maps of the full model on the section `y + alpha p = 0`, their
//! Filippov predictions, scaling fits, the invariant curve, slow-manifold
//! residuals and reduced flows in the charts.

use thiserror::Error;

use crate::atlas::ChartId;
use crate::charts::{ChartFlow, ChartModel};
use crate::flow::{self, CrossingRecord, FlowError, IntegratorConfig, Method};
use crate::model::{ModelParams, Shifted};
use crate::pws::{PwsError, PwsSystem};
use crate::regfun::RegFun;
use crate::roots::linear_fit;
use crate::sweep::par_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlidingError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Pws(#[from] PwsError),
    #[error("start p = {0} outside the section window [-0.2, 0.3]")]
    Window(f64),
    #[error("degenerate fit: {0} points on ray")]
    DegenerateFit(usize),
    #[error("invariant curve iteration did not converge at x = {x}: {iterates:?}")]
    NoConvergence { x: f64, iterates: Vec<f64> },
    #[error("no slow-manifold expansion shipped for chart {0}")]
    UnsupportedChart(&'static str),
    #[error("desingularization factor vanishes: {0}")]
    Singular(f64),
    #[error("atlas: {0}")]
    Atlas(String),
    #[error("section exit not reached: {0}")]
    NoExit(String),
}

/// One transition between points on `y + alpha p = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSample {
    pub x_in: f64,
    pub p_in: f64,
    pub x_out: f64,
    pub p_out: f64,
    pub transit_time: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub residual_in: f64,
    pub residual_out: f64,
}

/// Integrator settings used for the full model.
pub fn model_config() -> IntegratorConfig {
    IntegratorConfig {
        method: Method::ImplicitStiff,
        rel_tol: 1e-11,
        abs_tol: 1e-14,
        ..IntegratorConfig::default()
    }
}

pub fn section(m: &ModelParams, y: &[f64]) -> f64 {
    y[1] + m.alpha * y[2]
}

/// Integrates in the shifted coordinates `(x, y + alpha p, p)`, where the
/// section is a coordinate plane; states are returned in ambient form.
fn cross(
    m: &ModelParams,
    start: &[f64],
    direction: i32,
    max_time: f64,
    cfg: &IntegratorConfig,
) -> Result<CrossingRecord, FlowError> {
    let sh = Shifted(m);
    let s0 = sh.from_ambient(&[start[0], start[1], start[2]]);
    let mut c = flow::poincare(&sh, |_t, y: &[f64]| y[1], 0.0, &s0, cfg, max_time, direction)?;
    c.state = sh.to_ambient(&c.state).to_vec();
    Ok(c)
}

fn default_horizon(m: &ModelParams) -> f64 {
    1000.0 * m.alpha
}

/// First return to the section near `p = 0`: up through the jump to `p ~ 1`,
/// along `y > 0`, down through the jump to `p ~ 0` and back up.
pub fn return_map(m: &ModelParams, x: f64, p: f64) -> Result<ReturnSample, SlidingError> {
    return_map_with(m, x, p, &model_config(), default_horizon(m))
}

pub fn return_map_with(
    m: &ModelParams,
    x: f64,
    p: f64,
    cfg: &IntegratorConfig,
    max_time: f64,
) -> Result<ReturnSample, SlidingError> {
    let start = [x, -m.alpha * p, p];
    let c = cross(m, &start, 1, max_time, cfg)?;
    Ok(sample(m, &start, &c))
}

fn sample(m: &ModelParams, start: &[f64], c: &CrossingRecord) -> ReturnSample {
    ReturnSample {
        x_in: start[0],
        p_in: start[2],
        x_out: c.state[0],
        p_out: c.state[2],
        transit_time: c.t,
        epsilon: m.epsilon,
        alpha: m.alpha,
        residual_in: section(m, start).abs(),
        residual_out: c.residual,
    }
}

/// Which end of the unit p-interval a half map starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfStart {
    NearZero,
    NearOne,
}

/// Transition from the section near one end of the p-interval to the next
/// section crossing near the other end.
pub fn half_map(m: &ModelParams, x: f64, p: f64, from: HalfStart) -> Result<ReturnSample, SlidingError> {
    let start = [x, -m.alpha * p, p];
    let dir = match from {
        HalfStart::NearZero => -1,
        HalfStart::NearOne => 1,
    };
    let c = cross(m, &start, dir, default_horizon(m), &model_config())?;
    Ok(sample(m, &start, &c))
}

/// Leading-order half-map increment: `alpha (1 - p) X_+/|Y_+|` from near 0,
/// `alpha p X_-/|Y_-|` from near 1.
pub fn half_map_prediction(m: &ModelParams, x: f64, p: f64, from: HalfStart) -> f64 {
    let zp = m.sys.plus(x, 0.0);
    let zm = m.sys.minus(x, 0.0);
    match from {
        HalfStart::NearZero => m.alpha * (1.0 - p) * zp[0] / zp[1].abs(),
        HalfStart::NearOne => m.alpha * p * zm[0] / zm[1].abs(),
    }
}

/// `(alpha [1/|Y_+| + 1/|Y_-|] X_sl, alpha [1/|Y_+| + 1/|Y_-|])`.
pub fn filippov_prediction(m: &ModelParams, x: f64) -> Result<(f64, f64), SlidingError> {
    let xsl = m.sys.filippov(x)?;
    let w = 1.0 / m.sys.plus(x, 0.0)[1].abs() + 1.0 / m.sys.minus(x, 0.0)[1].abs();
    Ok((m.alpha * w * xsl, m.alpha * w))
}

/// Which parameter a ray refines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RayKind {
    /// `alpha` fixed, `eps -> 0`; fit against `ln eps`.
    Epsilon,
    /// `eps` fixed, `alpha -> 0`; fit against `ln alpha`.
    Alpha,
    /// Mixed grid; fit against `ln(alpha^2 + eps^{k/(k+1)} alpha)`.
    Grid,
}

#[derive(Debug, Clone)]
pub struct Ray {
    pub id: String,
    pub kind: RayKind,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub sample: ReturnSample,
    pub pred_dx: f64,
    pub pred_t: f64,
    pub err_dx: f64,
    pub err_t: f64,
    /// `alpha^2 + eps^{k/(k+1)} alpha`.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayFit {
    pub id: String,
    pub kind: RayKind,
    pub samples: Vec<RaySample>,
    pub exponent_dx: f64,
    pub exponent_t: f64,
    pub rms_dx: f64,
    pub rms_t: f64,
    pub monotone_dx: bool,
    pub monotone_t: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub rays: Vec<RayFit>,
}

pub fn remainder_scale(k: u32, eps: f64, alpha: f64) -> f64 {
    let kf = k as f64;
    alpha * alpha + eps.powf(kf / (kf + 1.0)) * alpha
}

/// One return map compared with the Filippov prediction.
pub fn compare(m: &ModelParams, x: f64) -> Result<RaySample, SlidingError> {
    let r = return_map(m, x, 0.0)?;
    let (dx, dt) = filippov_prediction(m, x)?;
    Ok(RaySample {
        err_dx: (r.x_out - r.x_in - dx).abs(),
        err_t: (r.transit_time - dt).abs(),
        scale: remainder_scale(m.reg.k, m.epsilon, m.alpha),
        sample: r,
        pred_dx: dx,
        pred_t: dt,
    })
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Return maps along each ray, fitted on log scales. Points of all rays run
/// through one parallel sweep.
pub fn scaling_study(reg: RegFun, sys: &PwsSystem, rays: &[Ray], x: f64) -> Result<ScalingFit, SlidingError> {
    for r in rays {
        if r.points.len() < 3 {
            return Err(SlidingError::DegenerateFit(r.points.len()));
        }
    }
    let jobs: Vec<(usize, f64, f64)> =
        rays.iter().enumerate().flat_map(|(i, r)| r.points.iter().map(move |&(e, a)| (i, e, a))).collect();
    let results = par_map(&jobs, |&(_, e, a)| -> Result<RaySample, SlidingError> {
        let m = ModelParams::new(e, a, reg, sys.clone()).map_err(|err| SlidingError::Atlas(err.to_string()))?;
        compare(&m, x)
    });
    let mut per_ray: Vec<Vec<RaySample>> = vec![Vec::new(); rays.len()];
    for ((i, _, _), r) in jobs.iter().zip(results) {
        per_ray[*i].push(r?);
    }
    let mut out = Vec::with_capacity(rays.len());
    for (ray, samples) in rays.iter().zip(per_ray) {
        let abscissa: Vec<f64> = samples
            .iter()
            .map(|s| match ray.kind {
                RayKind::Epsilon => s.sample.epsilon.ln(),
                RayKind::Alpha => s.sample.alpha.ln(),
                RayKind::Grid => s.scale.ln(),
            })
            .collect();
        let ldx: Vec<f64> = samples.iter().map(|s| s.err_dx.ln()).collect();
        let ldt: Vec<f64> = samples.iter().map(|s| s.err_t.ln()).collect();
        let (edx, _, rdx) = linear_fit(&abscissa, &ldx);
        let (edt, _, rdt) = linear_fit(&abscissa, &ldt);
        let edx_v: Vec<f64> = samples.iter().map(|s| s.err_dx).collect();
        let edt_v: Vec<f64> = samples.iter().map(|s| s.err_t).collect();
        out.push(RayFit {
            id: ray.id.clone(),
            kind: ray.kind,
            exponent_dx: edx,
            exponent_t: edt,
            rms_dx: rdx,
            rms_t: rdt,
            monotone_dx: strictly_decreasing(&edx_v),
            monotone_t: strictly_decreasing(&edt_v),
            samples,
        });
    }
    Ok(ScalingFit { rays: out })
}

/// One point of the invariant curve `p = c22(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub p: f64,
    /// `|p_{n+1} - p_n|` after each iteration.
    pub increments: Vec<f64>,
}

impl CurvePoint {
    /// Iterations until the increment first drops below `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.increments.iter().position(|d| *d < tol).map(|i| i + 1)
    }
}

pub const CURVE_STOP: f64 = 1e-12;
pub const CURVE_MAX_ITER: usize = 10;
pub const CURVE_ACCEPT: f64 = 1e-10;

/// Fixed point in `p` of the return map at each `x`, iterated from `p = 0`.
pub fn invariant_curve_point(m: &ModelParams, x: f64) -> Result<CurvePoint, SlidingError> {
    let mut p = 0.0;
    let mut increments = Vec::new();
    let mut iterates = vec![p];
    for _ in 0..CURVE_MAX_ITER {
        let r = return_map(m, x, p)?;
        let d = (r.p_out - p).abs();
        p = r.p_out;
        iterates.push(p);
        increments.push(d);
        if d < CURVE_STOP {
            break;
        }
    }
    if increments.last().is_none_or(|d| *d > CURVE_ACCEPT) {
        return Err(SlidingError::NoConvergence { x, iterates });
    }
    Ok(CurvePoint { x, p, increments })
}

pub fn invariant_curve(m: &ModelParams, x_grid: &[f64]) -> Result<Vec<CurvePoint>, SlidingError> {
    par_map(x_grid, |&x| invariant_curve_point(m, x)).into_iter().collect()
}

/// Normal-component residual `p' - grad P . z'` of an asymptotic graph
/// `p = P(.)` in a chart, evaluated on the graph. The slot of `p` in the
/// chart coordinates is overwritten by the graph value.
///
/// | chart | order 0 | order 1 |
/// |-------|---------|---------|
/// | C1   | 1 | `1 - phi_+(eps a1) (eps a1)^k` |
/// | C2   | 1 | `1 - phi_+(eps/y2) (eps/y2)^k` |
/// | C22  | `phi(y22)` | `+ eps Y(x, 0, phi(y22))` |
/// | Q211 | `-phi_+(rho e) e^k` | same |
/// | Q213 | `-phi_+(rho/nu) nu^-k` | `- rho k beta nu^-k Y_+(x,0)/(nu - k beta nu^-k)` |
///
/// The sign of the Q213 correction is the one that solves the invariance
/// equation and reproduces the reduced flow on the critical manifold.
pub fn slow_manifold_residual(
    model: &ChartModel,
    chart: ChartId,
    order: u32,
    coords: [f64; 5],
) -> Result<f64, SlidingError> {
    let graph = graph_fn(model, chart, order)?;
    let mut c = coords;
    c[2] = graph(&c);
    let f = model.field(chart, &c)?;
    let mut normal = f[2];
    for j in [0usize, 1, 3, 4] {
        if f[j] == 0.0 {
            continue;
        }
        let h = 1e-3 * c[j].abs().max(1e-3);
        let d = |h: f64| {
            let mut cp = c;
            let mut cm = c;
            cp[j] += h;
            cm[j] -= h;
            (graph(&cp) - graph(&cm)) / (2.0 * h)
        };
        let g = (4.0 * d(0.5 * h) - d(h)) / 3.0;
        normal -= g * f[j];
    }
    Ok(normal)
}

type Graph<'a> = Box<dyn Fn(&[f64; 5]) -> f64 + 'a>;

fn graph_fn(model: &ChartModel, chart: ChartId, order: u32) -> Result<Graph<'_>, SlidingError> {
    let reg = model.reg;
    let k = reg.k as f64;
    let tail = move |s: f64| reg.tail_plus_value(s) * s.powf(k);
    Ok(match (chart, order) {
        (ChartId::C1, 0) | (ChartId::C2, 0) => Box::new(|_c| 1.0),
        (ChartId::C1, _) => Box::new(move |c| 1.0 - tail(c[4] * c[3])),
        (ChartId::C2, _) => Box::new(move |c| 1.0 - tail(c[4] / c[1])),
        (ChartId::C22, 0) => Box::new(move |c| reg.value(c[1])),
        (ChartId::C22, _) => Box::new(move |c| {
            let ph = reg.value(c[1]);
            ph + c[3] * model.sys.combine(c[0], 0.0, ph)[1]
        }),
        (ChartId::Q211, _) => Box::new(move |c| -reg.tail_plus_value(c[1] * c[3]) * c[3].powf(k)),
        (ChartId::Q213, 0) => Box::new(move |c| -reg.tail_plus_value(c[3] / c[1]) * c[1].powf(-k)),
        (ChartId::Q213, _) => Box::new(move |c| {
            let (nu, rho) = (c[1], c[3]);
            let kb = k * reg.beta() * nu.powf(-k);
            -reg.tail_plus_value(rho / nu) * nu.powf(-k) - rho * kb / (nu - kb) * model.sys.plus(c[0], 0.0)[1]
        }),
        (other, _) => return Err(SlidingError::UnsupportedChart(other.name())),
    })
}

/// Reduced (slow) flows. Point layouts:
///
/// | chart | point | result |
/// |-------|-------|--------|
/// | C1   | `(x, r1, alpha1, eps)` | `(x, r1, alpha1)` velocities, desingularized |
/// | C2   | `(x, y2, eps, alpha)`  | `(x, y2)` |
/// | C22  | `(x, y22, eps, alpha)` | `(x, y22)` |
/// | C21, Q211, Q212 | chart coordinates | full desingularized field |
/// | Q213 | `(x, nu213)` | `(x, nu213)` on the critical manifold |
pub fn reduced_flow(model: &ChartModel, chart: ChartId, point: &[f64]) -> Result<Vec<f64>, SlidingError> {
    let reg = model.reg;
    let sys = &model.sys;
    let k = reg.k as f64;
    let beta = reg.beta();
    let need = |n: usize| {
        if point.len() != n {
            Err(SlidingError::Atlas(format!("{} expects {n} coordinates, got {}", chart.name(), point.len())))
        } else {
            Ok(())
        }
    };
    match chart {
        ChartId::C1 => {
            need(4)?;
            let (x, r1, a1, eps) = (point[0], point[1], point[2], point[3]);
            let alpha = r1 * a1;
            let s = eps * a1;
            let pp = 1.0 - reg.tail_plus_value(s) * s.powf(k);
            let pb = 1.0 - beta * s.powf(k);
            let xd = r1 * sys.combine(x, -alpha * pp + r1, pp)[0];
            let yb = sys.combine(x, -alpha * pb + r1, pb)[1];
            Ok(vec![xd, r1 * yb, -a1 * yb])
        }
        ChartId::C2 => {
            need(4)?;
            let (x, y2, eps, alpha) = (point[0], point[1], point[2], point[3]);
            let s = eps / y2;
            let p2 = 1.0 - reg.tail_plus_value(s) * s.powf(k);
            Ok(vec![
                alpha * sys.combine(x, -alpha * p2 + alpha * y2, p2)[0],
                sys.combine(x, -alpha + alpha * y2, 1.0)[1],
            ])
        }
        ChartId::C22 => {
            need(4)?;
            let (x, y22, eps, alpha) = (point[0], point[1], point[2], point[3]);
            let ph = reg.value(y22);
            let y0 = sys.combine(x, 0.0, ph)[1];
            let p22 = ph + eps * y0;
            let d = reg.prime_value(y22);
            if d == 0.0 {
                return Err(SlidingError::Singular(d));
            }
            Ok(vec![alpha * sys.combine(x, -alpha * p22 + eps * alpha * y22, p22)[0], -y0 / d])
        }
        ChartId::C21 | ChartId::Q211 | ChartId::Q212 => {
            need(5)?;
            let c = [point[0], point[1], point[2], point[3], point[4]];
            Ok(model.field(chart, &c)?.to_vec())
        }
        ChartId::Q213 => {
            need(2)?;
            let (x, nu) = (point[0], point[1]);
            let den = nu - k * beta * nu.powf(-k);
            if den.abs() < 1e-14 {
                return Err(SlidingError::Singular(den));
            }
            Ok(vec![0.0, sys.plus(x, 0.0)[1] * nu * nu / den])
        }
        other => Err(SlidingError::UnsupportedChart(other.name())),
    }
}

/// Limit problem on the repelling manifold, `(x', p') = (0, -Y(x, 0, p))`.
pub fn m22_flow(sys: &PwsSystem, x: f64, p: f64) -> [f64; 2] {
    [0.0, -sys.combine(x, 0.0, p)[1]]
}

/// Critical set of the limit problem: `p = Y_-/(Y_- - Y_+)` and the
/// x-velocity `X(x, 0, p)` there.
pub fn k22(sys: &PwsSystem, x: f64) -> Result<(f64, f64), SlidingError> {
    let p = sys.sliding_fraction(x)?;
    Ok((p, sys.combine(x, 0.0, p)[0]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Q211Exit {
    pub rho_in: f64,
    pub eps211_in: f64,
    pub rho_out: f64,
    pub eps211_out: f64,
    pub x_out: f64,
    pub p211_out: f64,
    pub time: f64,
    /// `|rho_in^{k+1} eps211_in - rho_out^{k+1} eps211_out| / eps`.
    pub relation_residual: f64,
}

/// Integrates the entry-chart field from `rho211 = c_in` (on the graph
/// `p211 = -phi_+(rho e) e^k`) until `eps211 = c_out`.
pub fn q211_exit(
    model: &ChartModel,
    x: f64,
    eps: f64,
    alpha: f64,
    c_in: f64,
    c_out: f64,
) -> Result<Q211Exit, SlidingError> {
    let k = model.reg.k as f64;
    let e_in = eps / c_in.powf(k + 1.0);
    let p_in = -model.reg.tail_plus_value(c_in * e_in) * e_in.powf(k);
    let start = [x, c_in, p_in, e_in, alpha];
    let sys = ChartFlow { model, chart: ChartId::Q211 };
    let cfg = IntegratorConfig::default().with_tol(1e-12, 1e-15);
    let horizon = 1e3 / (eps.sqrt() * e_in.sqrt()).max(1e-12);
    let c = flow::poincare(&sys, |_t, y: &[f64]| y[3] - c_out, 0.0, &start, &cfg, horizon, 1)
        .map_err(|e| SlidingError::NoExit(e.to_string()))?;
    let rho_out = c.state[1];
    let e_out = c.state[3];
    Ok(Q211Exit {
        rho_in: c_in,
        eps211_in: e_in,
        rho_out,
        eps211_out: e_out,
        x_out: c.state[0],
        p211_out: c.state[2],
        time: c.t,
        relation_residual: (c_in.powf(k + 1.0) * e_in - rho_out.powf(k + 1.0) * c_out).abs() / eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slider(e: f64, a: f64) -> ModelParams {
        ModelParams::new(e, a, RegFun::arctan(), PwsSystem::slider()).unwrap()
    }

    fn cm(sys: PwsSystem) -> ChartModel {
        ChartModel::new(RegFun::arctan(), sys)
    }

    #[test]
    fn filippov_prediction_examples() {
        let m = slider(1e-2, 1e-2);
        let (dx, dt) = filippov_prediction(&m, 0.0).unwrap();
        assert!((dx - 1e-2).abs() < 1e-16 && (dt - 2e-2).abs() < 1e-16);
        let z = ModelParams::new(1e-2, 1e-2, RegFun::arctan(), PwsSystem::constant([0.0, -1.0], [0.0, 1.0])).unwrap();
        assert_eq!(filippov_prediction(&z, 0.0).unwrap(), (0.0, 2e-2));
    }

    #[test]
    fn return_map_closes_on_section() {
        let m = slider(1e-2, 1e-2);
        let r = return_map(&m, 0.0, 0.0).unwrap();
        assert!(r.residual_in <= 1e-12 && r.residual_out <= 1e-12);
        assert!(r.transit_time > 0.0);
        let bound = 5.0 * remainder_scale(1, 1e-2, 1e-2);
        assert!((r.x_out - 1e-2).abs() < bound);
        assert!((r.transit_time - 2e-2).abs() < bound);
    }

    #[test]
    fn p_contraction() {
        let m = slider(0.02, 0.01);
        let a = return_map(&m, 0.0, -0.05).unwrap();
        let b = return_map(&m, 0.0, 0.1).unwrap();
        assert!((a.p_out - b.p_out).abs() / 0.15 <= 1e-6);
    }

    #[test]
    fn half_maps_follow_prediction() {
        // Z_- = (0, 3) keeps the start at p = 1/2 off the sliding critical set
        let m = ModelParams::new(1e-3, 1e-2, RegFun::arctan(), PwsSystem::constant([1.0, -1.0], [0.0, 3.0])).unwrap();
        for p in [0.0, 0.5] {
            let h = half_map(&m, 0.0, p, HalfStart::NearZero).unwrap();
            let pred = half_map_prediction(&m, 0.0, p, HalfStart::NearZero);
            assert!((h.x_out - h.x_in - pred).abs() < 0.2 * pred, "{p}: {} vs {pred}", h.x_out - h.x_in);
            // lands near p = 1 with a gap of order eps^{1/2}
            assert!((h.p_out - 1.0).abs() < 10.0 * 1e-3f64.sqrt());
        }
    }

    #[test]
    fn filippov_limit_monotone() {
        let mut gaps = Vec::new();
        for j in 0..4 {
            let m = slider(1e-2 / 4f64.powi(j), 1e-2 / 2f64.powi(j));
            let r = return_map(&m, 0.0, 0.0).unwrap();
            gaps.push(((r.x_out - r.x_in) / r.transit_time - 0.5).abs());
        }
        assert!(strictly_decreasing(&gaps), "{gaps:?}");
    }

    #[test]
    fn invariant_curve_small() {
        let m = slider(1e-3, 1e-2);
        let c = invariant_curve(&m, &[-0.1, 0.0, 0.1]).unwrap();
        for pt in &c {
            assert!(pt.p.abs() <= 10.0 * 1e-3f64.sqrt(), "{}", pt.p);
            assert!(pt.iterations_to(1e-10).unwrap() <= 3);
        }
    }

    #[test]
    fn c1_residual_order() {
        let m = cm(PwsSystem::slider());
        let r1 = slow_manifold_residual(&m, ChartId::C1, 1, [0.0, 0.2, 0.0, 0.5, 1e-3]).unwrap();
        let r2 = slow_manifold_residual(&m, ChartId::C1, 1, [0.0, 0.2, 0.0, 0.25, 1e-3]).unwrap();
        let q = r1 / r2;
        assert!((4.0 * 0.7..=4.0 * 1.3).contains(&q), "{q}");
        assert!(r1.abs() < 10.0 * (1e-3f64 * 0.5).powi(2));
    }

    #[test]
    fn c22_residual_order() {
        let m = cm(PwsSystem::slider());
        let r = |e: f64| slow_manifold_residual(&m, ChartId::C22, 1, [0.0, 0.3, 0.0, e, 1e-3]).unwrap();
        let q = r(1e-3) / r(5e-4);
        assert!((4.0 * 0.7..=4.0 * 1.3).contains(&q), "{q}");
    }

    #[test]
    fn q213_graph_exact_at_rho_zero() {
        let m = cm(PwsSystem::slider());
        for nu in [0.4, 1.0, 2.0] {
            let r = slow_manifold_residual(&m, ChartId::Q213, 0, [0.0, nu, 0.0, 0.0, 0.01]).unwrap();
            assert!(r.abs() < 1e-15);
        }
        // the first-order correction gains one order in rho
        let r0 = |rho: f64| slow_manifold_residual(&m, ChartId::Q213, 0, [0.0, 1.0, 0.0, rho, 1e-4]).unwrap();
        let r1 = |rho: f64| slow_manifold_residual(&m, ChartId::Q213, 1, [0.0, 1.0, 0.0, rho, 1e-4]).unwrap();
        assert!((r0(0.02) / r0(0.01) - 2.0).abs() < 0.2);
        assert!((r1(0.02) / r1(0.01) - 4.0).abs() < 0.8);
    }

    #[test]
    fn unsupported_chart() {
        let m = cm(PwsSystem::slider());
        assert!(matches!(
            slow_manifold_residual(&m, ChartId::G11, 0, [0.0; 5]),
            Err(SlidingError::UnsupportedChart(_))
        ));
    }

    #[test]
    fn m22_critical_set_carries_sliding() {
        let sys = PwsSystem::new(
            std::sync::Arc::new(crate::pws::AffineField { a: [[0.0, 0.0], [0.5, 0.0]], b: [2.0, -1.0] }),
            std::sync::Arc::new(crate::pws::AffineField::constant([-1.0, 2.0])),
            0.0,
        );
        for x in [-0.5, 0.0, 0.7] {
            let (p, xd) = k22(&sys, x).unwrap();
            assert!(m22_flow(&sys, x, p)[1].abs() < 1e-15);
            assert!((xd - sys.filippov(x).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn q213_reduced_flow_singular_at_fold() {
        let m = cm(PwsSystem::slider());
        let (nu_f, _) = crate::model::fold_constants(1, m.reg.beta());
        assert!(matches!(reduced_flow(&m, ChartId::Q213, &[0.0, nu_f]), Err(SlidingError::Singular(_))));
        let v = reduced_flow(&m, ChartId::Q213, &[0.0, 2.0 * nu_f]).unwrap();
        assert!(v[1] < 0.0);
    }

    #[test]
    fn q211_exit_relation() {
        let m = cm(PwsSystem::slider());
        let e = q211_exit(&m, 0.0, 1e-4, 1e-2, 0.1, 1.0).unwrap();
        assert!(e.relation_residual < 1e-10, "{e:?}");
        assert!(e.rho_out < e.rho_in);
    }
}
