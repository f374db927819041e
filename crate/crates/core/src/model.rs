//! The hysteresis-regularized system
//!
//! ```text
//! x' = X(z, p),  y' = Y(z, p),  eps alpha p' = phi((y + alpha p)/(eps alpha)) - p
//! ```
//!
//! with `Z(z, p) = Z_+ p + Z_- (1 - p)`, its fast form and the p-nullcline.

use thiserror::Error;

use nalgebra::DMatrix;

use crate::flow::OdeSystem;
use crate::pws::PwsSystem;
use crate::regfun::RegFun;
use crate::roots;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("p = {0} outside (0, 1)")]
    OutsideUnitInterval(f64),
    #[error("no fold points: eps = {eps} >= max phi' = {max}")]
    NoFold { eps: f64, max: f64 },
}

/// Which nullcline formula `nullcline_f` evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nullcline {
    /// `y = eps alpha phi^-1(p) - alpha p`, the exact solution of `p' = 0`.
    #[default]
    AlphaP,
    /// `y = eps alpha phi^-1(p) - alpha`.
    AlphaConst,
}

/// `(x, y, p)`.
pub type State = [f64; 3];

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub reg: RegFun,
    pub sys: PwsSystem,
    pub nullcline: Nullcline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldBranch {
    NearZero,
    NearOne,
}

impl FoldBranch {
    pub fn as_str(&self) -> &'static str {
        match self {
            FoldBranch::NearZero => "near_zero",
            FoldBranch::NearOne => "near_one",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldPoint {
    pub p_f: f64,
    pub y_f: f64,
    pub branch: FoldBranch,
    /// Distance of `p_f` from its end of the unit interval (`p_f` or `1 - p_f`),
    /// kept separately because `1 - p_f` loses digits for tiny eps.
    pub end_gap: f64,
    /// `phi^-1(p_f)`.
    pub s_f: f64,
    /// `F'(p_f)`.
    pub residual: f64,
    /// `F''(p_f)`.
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldPrediction {
    pub nu_f: f64,
    pub p213_f: f64,
    pub p_plus: f64,
    pub y_plus: f64,
    pub p_minus: f64,
    pub y_minus: f64,
}

impl ModelParams {
    pub fn new(epsilon: f64, alpha: f64, reg: RegFun, sys: PwsSystem) -> Result<Self, ModelError> {
        if !(epsilon > 0.0) {
            return Err(ModelError::NonPositive { name: "epsilon", value: epsilon });
        }
        if !(alpha > 0.0) {
            return Err(ModelError::NonPositive { name: "alpha", value: alpha });
        }
        Ok(Self { epsilon, alpha, reg, sys, nullcline: Nullcline::AlphaP })
    }

    pub fn mu(&self) -> f64 {
        self.sys.mu
    }

    pub fn ea(&self) -> f64 {
        self.epsilon * self.alpha
    }

    /// Argument `(y + alpha p)/(eps alpha)` of `phi`.
    pub fn phi_arg(&self, y: f64, p: f64) -> f64 {
        (y + self.alpha * p) / self.ea()
    }

    /// `phi(arg) - p`, the fast-time p-velocity.
    pub fn p_fast(&self, y: f64, p: f64) -> f64 {
        self.reg.phi_minus(self.phi_arg(y, p), p)
    }

    pub fn rhs_slow(&self, s: &State) -> State {
        let [x, y, p] = *s;
        let z = self.sys.combine(x, y, p);
        [z[0], z[1], self.p_fast(y, p) / self.ea()]
    }

    /// Right side in the fast time `t = eps alpha tau`. With `extended` the
    /// constant `eps' = alpha' = 0` slots are appended.
    pub fn rhs_fast(&self, s: &State, extended: bool) -> Vec<f64> {
        let [x, y, p] = *s;
        let ea = self.ea();
        let z = self.sys.combine(x, y, p);
        let mut v = vec![ea * z[0], ea * z[1], self.p_fast(y, p)];
        if extended {
            v.extend_from_slice(&[0.0, 0.0]);
        }
        v
    }

    /// The p-nullcline `y = F(p)`.
    pub fn nullcline_f(&self, p: f64) -> Result<f64, ModelError> {
        let s = self.reg.phi_inv(p).map_err(|_| ModelError::OutsideUnitInterval(p))?;
        let a = self.alpha;
        Ok(match self.nullcline {
            Nullcline::AlphaP => self.ea() * s - a * p,
            Nullcline::AlphaConst => self.ea() * s - a,
        })
    }

    /// `F'(p) = eps alpha / phi'(phi^-1 p) - alpha` (the `-alpha p` form).
    pub fn nullcline_slope(&self, p: f64) -> Result<f64, ModelError> {
        let s = self.reg.phi_inv(p).map_err(|_| ModelError::OutsideUnitInterval(p))?;
        Ok(self.slope_at_s(s))
    }

    fn slope_at_s(&self, s: f64) -> f64 {
        self.alpha * (self.epsilon / self.reg.prime_value(s) - 1.0)
    }

    fn curvature_at_s(&self, s: f64) -> f64 {
        let d1 = self.reg.prime_value(s);
        -self.ea() * self.reg.second_value(s) / (d1 * d1 * d1)
    }

    /// Both folds `phi'(phi^-1(p)) = eps` of the nullcline. The root is
    /// bracketed in `s = phi^-1(p)` on each side of the maximum of `phi'`.
    pub fn find_folds(&self) -> Result<Vec<FoldPoint>, ModelError> {
        let eps = self.epsilon;
        let s0 = 0.0;
        let max = self.reg.prime_value(s0);
        if eps >= max {
            return Err(ModelError::NoFold { eps, max });
        }
        let g = |s: f64| self.reg.prime_value(s) / eps - 1.0;
        let mut out = Vec::with_capacity(2);
        for (sign, branch) in [(-1.0, FoldBranch::NearZero), (1.0, FoldBranch::NearOne)] {
            let mut hi = 1.0;
            while g(sign * hi) > 0.0 {
                hi *= 2.0;
            }
            let s_abs = roots::brent(|t| g(sign * t), 0.0, hi, 1e-15 * hi, 500)
                .expect("fold bracket holds by construction");
            let s = sign * s_abs;
            let (p_f, end_gap) = match branch {
                FoldBranch::NearOne => (self.reg.value(s), self.reg.upper_gap(s)),
                FoldBranch::NearZero => {
                    let p = self.reg.lower_gap(s);
                    (p, p)
                }
            };
            out.push(FoldPoint {
                p_f,
                y_f: self.ea() * s - self.alpha * p_f,
                branch,
                end_gap,
                s_f: s,
                residual: self.slope_at_s(s),
                curvature: self.curvature_at_s(s),
            });
        }
        Ok(out)
    }

    /// Leading-order fold locations from the scaling `p = 1 + eps^{k/(k+1)} p213`.
    pub fn fold_asymptotics(&self) -> FoldPrediction {
        let k = self.reg.k as f64;
        let bp = self.reg.beta_plus;
        let bm = self.reg.beta_minus;
        let (nu_f, p213_f) = fold_constants(self.reg.k, bp);
        let nu_m = (k * bm).powf(1.0 / (k + 1.0));
        let rk = self.epsilon.powf(k / (k + 1.0));
        let a = self.alpha;
        let p_plus = 1.0 + rk * p213_f;
        let p_minus = rk * bm * nu_m.powf(-k);
        FoldPrediction {
            nu_f,
            p213_f,
            p_plus,
            y_plus: -a * p_plus + a * rk * nu_f,
            p_minus,
            y_minus: -a * rk * nu_m - a * p_minus,
        }
    }
}

/// Slow-time form with the analytic Jacobian; the `p` column is stiff.
impl OdeSystem for ModelParams {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let v = self.rhs_slow(&[y[0], y[1], y[2]]);
        dy.copy_from_slice(&v);
    }

    fn jacobian(&self, _t: f64, s: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let (x, y, p) = (s[0], s[1], s[2]);
        let jp = self.sys.jacobian(true, x, y);
        let jm = self.sys.jacobian(false, x, y);
        let zp = self.sys.plus(x, y);
        let zm = self.sys.minus(x, y);
        for r in 0..2 {
            jac[(r, 0)] = p * jp[r][0] + (1.0 - p) * jm[r][0];
            jac[(r, 1)] = p * jp[r][1] + (1.0 - p) * jm[r][1];
            jac[(r, 2)] = zp[r] - zm[r];
        }
        let ea = self.ea();
        let d = self.reg.prime_value(self.phi_arg(y, p));
        jac[(2, 0)] = 0.0;
        jac[(2, 1)] = d / (ea * ea);
        jac[(2, 2)] = (d * self.alpha / ea - 1.0) / ea;
        true
    }
}

/// The model in the shifted coordinates `(x, w, p)` with `w = y + alpha p`.
/// For tiny `eps alpha` the argument `w/(eps alpha)` keeps full precision,
/// which `(y + alpha p)` formed from a stored `y` does not.
#[derive(Debug, Clone, Copy)]
pub struct Shifted<'a>(pub &'a ModelParams);

impl Shifted<'_> {
    pub fn to_ambient(&self, s: &[f64]) -> State {
        [s[0], s[1] - self.0.alpha * s[2], s[2]]
    }

    pub fn from_ambient(&self, s: &State) -> [f64; 3] {
        [s[0], s[1] + self.0.alpha * s[2], s[2]]
    }
}

impl OdeSystem for Shifted<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, s: &[f64], dy: &mut [f64]) {
        let m = self.0;
        let (x, w, p) = (s[0], s[1], s[2]);
        let z = m.sys.combine(x, w - m.alpha * p, p);
        let pd = m.reg.phi_minus(w / m.ea(), p) / m.ea();
        dy[0] = z[0];
        dy[1] = z[1] + m.alpha * pd;
        dy[2] = pd;
    }

    fn jacobian(&self, _t: f64, s: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let m = self.0;
        let a = m.alpha;
        let ea = m.ea();
        let (x, w, p) = (s[0], s[1], s[2]);
        let y = w - a * p;
        let jp = m.sys.jacobian(true, x, y);
        let jm = m.sys.jacobian(false, x, y);
        let zp = m.sys.plus(x, y);
        let zm = m.sys.minus(x, y);
        let d = m.reg.prime_value(w / ea);
        let pw = d / (ea * ea);
        let pp = -1.0 / ea;
        let mut zx = [0.0; 2];
        let mut zy = [0.0; 2];
        let mut zpp = [0.0; 2];
        for r in 0..2 {
            zx[r] = p * jp[r][0] + (1.0 - p) * jm[r][0];
            zy[r] = p * jp[r][1] + (1.0 - p) * jm[r][1];
            zpp[r] = zp[r] - zm[r] - a * zy[r];
        }
        jac[(0, 0)] = zx[0];
        jac[(0, 1)] = zy[0];
        jac[(0, 2)] = zpp[0];
        jac[(1, 0)] = zx[1];
        jac[(1, 1)] = zy[1] + a * pw;
        jac[(1, 2)] = zpp[1] + a * pp;
        jac[(2, 0)] = 0.0;
        jac[(2, 1)] = pw;
        jac[(2, 2)] = pp;
        true
    }
}

/// `(nu_213f, p_213f) = ((k beta)^{1/(k+1)}, -beta (k beta)^{-k/(k+1)})`.
pub fn fold_constants(k: u32, beta: f64) -> (f64, f64) {
    let kf = k as f64;
    let nu = (kf * beta).powf(1.0 / (kf + 1.0));
    (nu, -beta * nu.powf(-kf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn slider(eps: f64, alpha: f64) -> ModelParams {
        ModelParams::new(eps, alpha, RegFun::arctan(), PwsSystem::slider()).unwrap()
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let m = ModelParams::new(0.1, 0.05, RegFun::arctan(), PwsSystem::curved_slider()).unwrap();
        let s = [0.3, -0.004, 0.6];
        let mut j = DMatrix::zeros(3, 3);
        assert!(m.jacobian(0.0, &s, &mut j));
        let h = [1e-6, 1e-9, 1e-7];
        for c in 0..3 {
            let mut a = s;
            let mut b = s;
            a[c] += h[c];
            b[c] -= h[c];
            let fa = m.rhs_slow(&a);
            let fb = m.rhs_slow(&b);
            for r in 0..3 {
                let fd = (fa[r] - fb[r]) / (2.0 * h[c]);
                assert!((fd - j[(r, c)]).abs() <= 1e-5 * (1.0 + j[(r, c)].abs()), "{r} {c}");
            }
        }
    }

    #[test]
    fn shifted_form_agrees() {
        let m = ModelParams::new(0.1, 0.05, RegFun::arctan(), PwsSystem::curved_slider()).unwrap();
        let sh = Shifted(&m);
        let amb = [0.3, -0.004, 0.6];
        let s = sh.from_ambient(&amb);
        let mut d = [0.0; 3];
        sh.rhs(0.0, &s, &mut d);
        let v = m.rhs_slow(&amb);
        assert!((d[0] - v[0]).abs() < 1e-14 && (d[2] - v[2]).abs() < 1e-12);
        assert!((d[1] - (v[1] + m.alpha * v[2])).abs() < 1e-12);
        let mut j = DMatrix::zeros(3, 3);
        sh.jacobian(0.0, &s, &mut j);
        let h = [1e-6, 1e-9, 1e-7];
        for c in 0..3 {
            let mut a = s;
            let mut b = s;
            a[c] += h[c];
            b[c] -= h[c];
            let mut fa = [0.0; 3];
            let mut fb = [0.0; 3];
            sh.rhs(0.0, &a, &mut fa);
            sh.rhs(0.0, &b, &mut fb);
            for r in 0..3 {
                let fd = (fa[r] - fb[r]) / (2.0 * h[c]);
                assert!((fd - j[(r, c)]).abs() <= 1e-5 * (1.0 + j[(r, c)].abs()), "{r} {c}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(ModelParams::new(0.0, 1.0, RegFun::arctan(), PwsSystem::slider()).is_err());
        assert!(ModelParams::new(1.0, -1.0, RegFun::arctan(), PwsSystem::slider()).is_err());
    }

    #[test]
    fn p_velocity_vanishes_on_nullcline() {
        let m = slider(1e-3, 1e-2);
        for i in 0..=90 {
            let p = 0.05 + 0.01 * i as f64;
            let y = m.nullcline_f(p).unwrap();
            assert!(m.rhs_slow(&[0.0, y, p])[2].abs() * m.ea() <= 1e-12);
        }
    }

    #[test]
    fn slider_velocity_at_p_one() {
        let m = slider(1e-2, 1e-2);
        let v = m.rhs_slow(&[0.0, 0.1, 1.0]);
        assert_eq!([v[0], v[1]], [1.0, -1.0]);
        // tiny negative tail correction
        let s = m.ea() / (0.1 + m.alpha);
        let expect = -m.reg.tail_plus_value(s) * s;
        assert!(v[2] < 0.0);
        assert!((v[2] * m.ea() - expect).abs() <= 1e-12 * expect.abs());
    }

    #[test]
    fn fast_form_rescales() {
        let m = slider(1e-2, 3e-2);
        let st = [0.2, 0.01, 0.4];
        let slow = m.rhs_slow(&st);
        let fast = m.rhs_fast(&st, true);
        assert_eq!(fast.len(), 5);
        assert!((fast[0] - m.ea() * slow[0]).abs() < 1e-15);
        assert!((fast[1] - m.ea() * slow[1]).abs() < 1e-15);
        assert!((fast[2] - m.ea() * slow[2]).abs() < 1e-12);
        assert_eq!(&fast[3..], &[0.0, 0.0]);
    }

    #[test]
    fn layer_limit_above_sigma() {
        for p in [0.1, 0.5, 0.9] {
            let m = slider(1e-9, 1e-9);
            let v = m.rhs_fast(&[0.0, 0.3, p], false);
            assert!((v[2] - (1.0 - p)).abs() < 1e-15);
        }
    }

    #[test]
    fn nullcline_examples() {
        let m = slider(1e-3, 1e-2);
        assert!((m.nullcline_f(0.5).unwrap() + 0.005).abs() < 1e-16);
        // bisection oracle on phi((y + alpha p)/(eps alpha)) = p
        let p = 0.3;
        let y = roots::bisect(|y| m.p_fast(y, p), -1.0, 1.0, 1e-16, 400).unwrap();
        assert!((m.nullcline_f(p).unwrap() - y).abs() <= 1e-12);
        assert!(m.nullcline_f(1.0 - 1e-12).unwrap() > m.nullcline_f(0.99).unwrap());
        assert!(m.nullcline_f(1.0).is_err());
    }

    #[test]
    fn constant_variant_differs_by_alpha_one_minus_p() {
        let mut m = slider(1e-3, 1e-2);
        let a = m.nullcline_f(0.3).unwrap();
        m.nullcline = Nullcline::AlphaConst;
        let b = m.nullcline_f(0.3).unwrap();
        assert!((a - b - 0.7e-2).abs() < 1e-15);
    }

    #[test]
    fn folds_at_small_eps() {
        let m = slider(1e-4, 1e-2);
        let f = m.find_folds().unwrap();
        assert_eq!(f.len(), 2);
        let up = f.iter().find(|q| q.branch == FoldBranch::NearOne).unwrap();
        let lo = f.iter().find(|q| q.branch == FoldBranch::NearZero).unwrap();
        assert!((up.end_gap - 0.0056419).abs() < 5e-5);
        assert!((lo.end_gap - 0.0056419).abs() < 5e-5);
        for q in &f {
            assert!(q.residual.abs() <= 1e-10);
            assert!(q.curvature.abs() > 1e-6 * m.ea());
            // closed form phi'(s) = eps for arctan
            let s = (1.0 / (PI * 1e-4) - 1.0).sqrt();
            assert!((q.s_f.abs() - s).abs() <= 1e-9 * s);
        }
    }

    #[test]
    fn no_fold_for_large_eps() {
        assert!(matches!(slider(0.5, 0.1).find_folds(), Err(ModelError::NoFold { .. })));
    }

    #[test]
    fn scaled_fold_error_shrinks() {
        let (_, p213) = fold_constants(1, 1.0 / PI);
        let mut last = f64::INFINITY;
        for eps in [1e-4, 1e-6, 1e-8] {
            let up = slider(eps, 1e-2).find_folds().unwrap()[1];
            let e = (-up.end_gap / eps.sqrt() - p213).abs();
            assert!(e < last);
            last = e;
        }
        assert!(last < 0.02);
    }

    #[test]
    fn asymptotic_constants() {
        let (nu, p) = fold_constants(1, 1.0 / PI);
        assert!((nu - 0.564190).abs() < 1e-6 && (p + 0.564190).abs() < 1e-6);
        let (nu, p) = fold_constants(2, 1.0);
        assert!((nu - 2f64.powf(1.0 / 3.0)).abs() < 1e-14);
        assert!((p + 2f64.powf(-2.0 / 3.0)).abs() < 1e-14);
        let pred = slider(1e-6, 1e-2).fold_asymptotics();
        assert!((pred.p_plus - (1.0 - 1e-3 * PI.powf(-0.5))).abs() < 1e-12);
        assert!((pred.p_minus - 1e-3 * PI.powf(-0.5)).abs() < 1e-12);
    }
}
