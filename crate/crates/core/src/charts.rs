//! Chart-local vector fields of the model in the cylinder and sphere charts,
//! written out term by term, together with the time rescaling that relates
//! each of them to the fast ambient field
//! `(eps alpha X, eps alpha Y, phi((y + alpha p)/(eps alpha)) - p, 0, 0)`.

use crate::atlas::{Atlas, ChartId, ChartPoint};
use crate::flow::{self, IntegratorConfig, OdeSystem};
use crate::pws::PwsSystem;
use crate::regfun::RegFun;
use crate::sliding::SlidingError;

#[derive(Debug, Clone)]
pub struct ChartModel {
    pub reg: RegFun,
    pub sys: PwsSystem,
}

impl ChartModel {
    pub fn new(reg: RegFun, sys: PwsSystem) -> Self {
        Self { reg, sys }
    }

    pub fn atlas(&self) -> Atlas {
        Atlas::new(self.reg.k)
    }

    fn kf(&self) -> f64 {
        self.reg.k as f64
    }

    fn z(&self, x: f64, y: f64, p: f64) -> [f64; 2] {
        self.sys.combine(x, y, p)
    }

    /// `phi_+(s) s^k`.
    fn tail(&self, s: f64) -> f64 {
        self.reg.tail_plus_value(s) * s.powi(self.reg.k as i32)
    }

    /// Fast ambient field on `(x, y, p, eps, alpha)`.
    pub fn ambient_fast(&self, a: &[f64; 5]) -> [f64; 5] {
        let [x, y, p, eps, alpha] = *a;
        let ea = eps * alpha;
        let z = self.z(x, y, p);
        [ea * z[0], ea * z[1], self.reg.phi_minus((y + alpha * p) / ea, p), 0.0, 0.0]
    }

    /// Factor `f` such that the chart field equals `f` times the pullback of
    /// the fast ambient field.
    pub fn time_factor(&self, chart: ChartId, c: &[f64; 5]) -> Result<f64, SlidingError> {
        Ok(match chart {
            ChartId::Ambient | ChartId::C1 | ChartId::C2 | ChartId::Q211 => 1.0,
            ChartId::C22 => c[3],
            ChartId::C21 => c[1],
            ChartId::Q212 => c[3],
            ChartId::Q213 => c[1],
            other => return Err(SlidingError::UnsupportedChart(other.name())),
        })
    }

    /// Chart vector field in the atlas coordinate order.
    pub fn field(&self, chart: ChartId, c: &[f64; 5]) -> Result<[f64; 5], SlidingError> {
        let k = self.kf();
        Ok(match chart {
            ChartId::Ambient => self.ambient_fast(c),
            ChartId::C1 => {
                let [x, r1, p, a1, eps] = *c;
                let alpha = r1 * a1;
                let z = self.z(x, -alpha * p + r1, p);
                let g = self.tail(eps * a1);
                let br = 1.0 - g - p + eps * z[1];
                [eps * r1 * a1 * z[0], r1 * a1 * br, 1.0 - g - p, -a1 * a1 * br, 0.0]
            }
            ChartId::C2 => {
                let [x, y2, p, alpha, eps] = *c;
                let z = self.z(x, -alpha * p + alpha * y2, p);
                let ph = self.reg.value(y2 / eps);
                [eps * alpha * z[0], ph - p + eps * z[1], ph - p, 0.0, 0.0]
            }
            ChartId::C22 => {
                let [x, y22, p, eps, alpha] = *c;
                let z = self.z(x, -alpha * p + eps * alpha * y22, p);
                let ph = self.reg.value(y22);
                [eps * eps * alpha * z[0], ph - p + eps * z[1], eps * (ph - p), 0.0, 0.0]
            }
            ChartId::C21 => {
                let [x, nu, p, e21, alpha] = *c;
                let z = self.z(x, -alpha * p + alpha * nu, p);
                let g = self.tail(e21);
                let br = 1.0 - g - p + nu * e21 * z[1];
                [nu * nu * e21 * alpha * z[0], nu * br, nu * (1.0 - g - p), -e21 * br, 0.0]
            }
            ChartId::Q211 => {
                let [x, rho, p211, e211, alpha] = *c;
                let rk = rho.powf(k);
                let p = 1.0 + rk * p211;
                let z = self.z(x, -alpha * p + alpha * rk, p);
                let b = -p211 - self.reg.tail_plus_value(rho * e211) * e211.powf(k);
                let br = b + rho * e211 * z[1];
                [
                    rho.powf(k + 1.0) * e211 * alpha * z[0],
                    rho / k * br,
                    (1.0 - p211) * b - rho * e211 * p211 * z[1],
                    -(k + 1.0) / k * e211 * br,
                    0.0,
                ]
            }
            ChartId::Q212 => {
                let [x, rho, p212, nu, alpha] = *c;
                let rk = rho.powf(k);
                let p = 1.0 + rk * p212;
                let z = self.z(x, -alpha * p + alpha * rk * nu, p);
                let fp = self.reg.tail_plus_value(rho);
                let br = -rho * nu * z[1] + fp + p212;
                [
                    rho.powf(k + 1.0) * nu * nu * alpha * z[0],
                    rho * br,
                    -k * p212 * br - nu * (fp + p212),
                    -(1.0 + k) * nu * br,
                    0.0,
                ]
            }
            ChartId::Q213 => {
                let [x, nu, p213, rho, alpha] = *c;
                let rk = rho.powf(k);
                let p = 1.0 + rk * p213;
                let z = self.z(x, -alpha * p + alpha * rk * nu, p);
                let t = self.reg.tail_plus_value(rho / nu) * nu.powf(-k);
                [
                    rho.powf(k + 1.0) * nu * alpha * z[0],
                    nu * (rho * z[1] - t - p213),
                    -nu * (t + p213),
                    0.0,
                    0.0,
                ]
            }
            other => return Err(SlidingError::UnsupportedChart(other.name())),
        })
    }

    /// Chart field minus the time-rescaled pullback of the ambient field,
    /// in max-norm relative to the field size.
    pub fn pullback_mismatch(&self, pt: &ChartPoint) -> Result<f64, SlidingError> {
        let atlas = self.atlas();
        let f = self.field(pt.chart, &pt.coords)?;
        let tf = self.time_factor(pt.chart, &pt.coords)?;
        let pb = atlas
            .pullback(pt, &|a: &[f64; 5]| self.ambient_fast(a))
            .map_err(|e| SlidingError::Atlas(e.to_string()))?;
        let scale = f.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        Ok(f.iter().zip(&pb).map(|(u, v)| (u - tf * v).abs()).fold(0.0, f64::max) / scale)
    }
}

/// Largest relative change of the `(eps, alpha)` implied by the chart
/// coordinates along a trajectory of the chart field, and the time reached.
/// The run stops at `t_end`, when the orbit leaves the validity box, or
/// when it blows up after the first chunk.
pub fn conservation_drift(model: &ChartModel, pt: &ChartPoint, t_end: f64) -> Result<(f64, f64), SlidingError> {
    const CHUNKS: usize = 50;
    let atlas = model.atlas();
    let sys = ChartFlow { model, chart: pt.chart };
    let cfg = IntegratorConfig::default().with_tol(1e-12, 1e-14);
    let (e0, a0) = atlas.conserved(pt);
    let mut cur = pt.clone();
    let mut drift = 0.0f64;
    let mut t = 0.0;
    for i in 1..=CHUNKS {
        let t1 = t_end * i as f64 / CHUNKS as f64;
        // a blow-up inside a chunk ends the run like leaving the box does
        let sol = match flow::integrate(&sys, t, &cur.coords, t1, &cfg, &[]) {
            Ok(s) => s,
            Err(_) if i > 1 => break,
            Err(e) => return Err(e.into()),
        };
        let next = ChartPoint { coords: [sol.y[0], sol.y[1], sol.y[2], sol.y[3], sol.y[4]], ..cur.clone() };
        if atlas.validate(&next).is_err() {
            break;
        }
        let (e, a) = atlas.conserved(&next);
        drift = drift.max(((e - e0) / e0).abs()).max(((a - a0) / a0).abs());
        cur = next;
        t = t1;
    }
    Ok((drift, t))
}

/// Charts with a written-out field.
pub const FIELD_CHARTS: [ChartId; 8] = [
    ChartId::Ambient,
    ChartId::C1,
    ChartId::C2,
    ChartId::C21,
    ChartId::C22,
    ChartId::Q211,
    ChartId::Q212,
    ChartId::Q213,
];

/// A chart field as an ODE system.
pub struct ChartFlow<'a> {
    pub model: &'a ChartModel,
    pub chart: ChartId,
}

impl OdeSystem for ChartFlow<'_> {
    fn dim(&self) -> usize {
        5
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let c = [y[0], y[1], y[2], y[3], y[4]];
        match self.model.field(self.chart, &c) {
            Ok(v) => dy.copy_from_slice(&v),
            Err(_) => dy.fill(f64::NAN),
        }
    }
}
