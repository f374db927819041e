//! Planar piecewise-smooth systems `Z_+` (y > 0) / `Z_-` (y < 0), their
//! affine p-combination and the Filippov sliding field on `y = 0`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub const TANGENCY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PwsError {
    #[error("Y_- - Y_+ vanishes at x = {0}")]
    Degenerate(f64),
    #[error("no stable sliding at x = {x} ({class:?})")]
    NotSliding { x: f64, class: SigmaClass },
}

/// A smooth planar field depending on the unfolding parameter `mu`.
pub trait PlanarField: Send + Sync + fmt::Debug {
    fn eval(&self, x: f64, y: f64, mu: f64) -> [f64; 2];

    /// Analytic Jacobian `d(X, Y)/d(x, y)` if available.
    fn jacobian(&self, _x: f64, _y: f64, _mu: f64) -> Option<[[f64; 2]; 2]> {
        None
    }
}

/// `Z(z) = b + A z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineField {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl AffineField {
    pub fn constant(v: [f64; 2]) -> Self {
        Self { a: [[0.0; 2]; 2], b: v }
    }
}

impl PlanarField for AffineField {
    fn eval(&self, x: f64, y: f64, _mu: f64) -> [f64; 2] {
        [
            self.b[0] + self.a[0][0] * x + self.a[0][1] * y,
            self.b[1] + self.a[1][0] * x + self.a[1][1] * y,
        ]
    }

    fn jacobian(&self, _x: f64, _y: f64, _mu: f64) -> Option<[[f64; 2]; 2]> {
        Some(self.a)
    }
}

pub type ScalarFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Upper field of the visible-fold normal form: `(1 + f, 2x + y g)`.
#[derive(Clone)]
pub struct NormalFormPlus {
    pub f: ScalarFn,
    pub g: ScalarFn,
}

impl NormalFormPlus {
    /// `f = 0`, `g = g0`.
    pub fn with_constant_g(g0: f64) -> Self {
        Self {
            f: Arc::new(|_, _, _| 0.0),
            g: Arc::new(move |_, _, _| g0),
        }
    }
}

impl fmt::Debug for NormalFormPlus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NormalFormPlus")
    }
}

impl PlanarField for NormalFormPlus {
    fn eval(&self, x: f64, y: f64, mu: f64) -> [f64; 2] {
        [1.0 + (self.f)(x, y, mu), 2.0 * x + y * (self.g)(x, y, mu)]
    }
}

/// Repelling unit circle around `(0, 1 + mu)`, rotating counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkPlus {
    pub lambda: f64,
}

impl PlanarField for BenchmarkPlus {
    fn eval(&self, x: f64, y: f64, mu: f64) -> [f64; 2] {
        let c = 1.0 + mu;
        let w = y - c;
        let h = x * x + w * w - 1.0;
        [-w + self.lambda * x * h, x + self.lambda * w * h]
    }

    fn jacobian(&self, x: f64, y: f64, mu: f64) -> Option<[[f64; 2]; 2]> {
        let l = self.lambda;
        let w = y - 1.0 - mu;
        let h = x * x + w * w - 1.0;
        Some([
            [l * (h + 2.0 * x * x), -1.0 + 2.0 * l * x * w],
            [1.0 + 2.0 * l * x * w, l * (h + 2.0 * w * w)],
        ])
    }
}

/// Wraps a closure as a field.
#[derive(Clone)]
pub struct FnField(pub Arc<dyn Fn(f64, f64, f64) -> [f64; 2] + Send + Sync>);

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnField")
    }
}

impl PlanarField for FnField {
    fn eval(&self, x: f64, y: f64, mu: f64) -> [f64; 2] {
        (self.0)(x, y, mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaClass {
    StableSliding,
    CrossingUp,
    CrossingDown,
    UnstableSliding,
    Tangency,
}

impl SigmaClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            SigmaClass::StableSliding => "stable_sliding",
            SigmaClass::CrossingUp => "crossing_up",
            SigmaClass::CrossingDown => "crossing_down",
            SigmaClass::UnstableSliding => "unstable_sliding",
            SigmaClass::Tangency => "tangency",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PwsSystem {
    pub z_plus: Arc<dyn PlanarField>,
    pub z_minus: Arc<dyn PlanarField>,
    pub mu: f64,
}

impl PwsSystem {
    pub fn new(z_plus: Arc<dyn PlanarField>, z_minus: Arc<dyn PlanarField>, mu: f64) -> Self {
        Self { z_plus, z_minus, mu }
    }

    /// Constant fields `Z_+ = (1, -1)`, `Z_- = (0, 1)`.
    pub fn slider() -> Self {
        Self::constant([1.0, -1.0], [0.0, 1.0])
    }

    pub fn constant(zp: [f64; 2], zm: [f64; 2]) -> Self {
        Self::new(
            Arc::new(AffineField::constant(zp)),
            Arc::new(AffineField::constant(zm)),
            0.0,
        )
    }

    /// Slider with the same values on `y = 0` but y-dependent fields:
    /// `Z_+ = (1 + y, -1 + y)`, `Z_- = (y, 1 + y)`.
    pub fn curved_slider() -> Self {
        Self::new(
            Arc::new(AffineField { a: [[0.0, 1.0], [0.0, 1.0]], b: [1.0, -1.0] }),
            Arc::new(AffineField { a: [[0.0, 1.0], [0.0, 1.0]], b: [0.0, 1.0] }),
            0.0,
        )
    }

    /// Visible-fold normal form with `f = 0`, `g = g0`, `Z_- = (0, 1)`.
    pub fn normal_form(g0: f64, mu: f64) -> Self {
        Self::new(
            Arc::new(NormalFormPlus::with_constant_g(g0)),
            Arc::new(AffineField::constant([0.0, 1.0])),
            mu,
        )
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    pub fn plus(&self, x: f64, y: f64) -> [f64; 2] {
        self.z_plus.eval(x, y, self.mu)
    }

    pub fn minus(&self, x: f64, y: f64) -> [f64; 2] {
        self.z_minus.eval(x, y, self.mu)
    }

    /// `Z_+ p + Z_- (1 - p)`.
    pub fn combine(&self, x: f64, y: f64, p: f64) -> [f64; 2] {
        let a = self.plus(x, y);
        let b = self.minus(x, y);
        [a[0] * p + b[0] * (1.0 - p), a[1] * p + b[1] * (1.0 - p)]
    }

    pub fn classify_sigma(&self, x: f64) -> SigmaClass {
        let yp = self.plus(x, 0.0)[1];
        let ym = self.minus(x, 0.0)[1];
        if yp.abs() <= TANGENCY_TOL || ym.abs() <= TANGENCY_TOL {
            SigmaClass::Tangency
        } else if yp < 0.0 && ym > 0.0 {
            SigmaClass::StableSliding
        } else if yp > 0.0 && ym > 0.0 {
            SigmaClass::CrossingUp
        } else if yp < 0.0 && ym < 0.0 {
            SigmaClass::CrossingDown
        } else {
            SigmaClass::UnstableSliding
        }
    }

    /// `p(x) = Y_-/(Y_- - Y_+)` on `y = 0`.
    pub fn sliding_fraction(&self, x: f64) -> Result<f64, PwsError> {
        let class = self.classify_sigma(x);
        if class != SigmaClass::StableSliding {
            return Err(PwsError::NotSliding { x, class });
        }
        let yp = self.plus(x, 0.0)[1];
        let ym = self.minus(x, 0.0)[1];
        let d = ym - yp;
        if d == 0.0 {
            return Err(PwsError::Degenerate(x));
        }
        Ok(ym / d)
    }

    /// Filippov sliding velocity `X_sl(x)`.
    pub fn filippov(&self, x: f64) -> Result<f64, PwsError> {
        let p = self.sliding_fraction(x)?;
        Ok(self.plus(x, 0.0)[0] * p + self.minus(x, 0.0)[0] * (1.0 - p))
    }

    /// Jacobian of `Z_+` (`upper = true`) or `Z_-`; analytic when the field
    /// provides it, central differences otherwise.
    pub fn jacobian(&self, upper: bool, x: f64, y: f64) -> [[f64; 2]; 2] {
        let field = if upper { &self.z_plus } else { &self.z_minus };
        if let Some(j) = field.jacobian(x, y, self.mu) {
            return j;
        }
        let h = 1e-7 * x.abs().max(y.abs()).max(1.0);
        let fx1 = field.eval(x + h, y, self.mu);
        let fx0 = field.eval(x - h, y, self.mu);
        let fy1 = field.eval(x, y + h, self.mu);
        let fy0 = field.eval(x, y - h, self.mu);
        let mut j = [[0.0; 2]; 2];
        for r in 0..2 {
            j[r][0] = (fx1[r] - fx0[r]) / (2.0 * h);
            j[r][1] = (fy1[r] - fy0[r]) / (2.0 * h);
        }
        j
    }
}
