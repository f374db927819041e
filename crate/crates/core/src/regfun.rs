//! Regularization functions: a smooth monotone step `phi` with algebraic
//! tails, its derivative, inverse and tail decomposition.

use std::f64::consts::{FRAC_1_PI, PI};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegError {
    #[error("argument {0} is not finite")]
    NonFinite(f64),
    #[error("p = {0} outside (0, 1)")]
    OutsideUnitInterval(f64),
    #[error("tail argument {0} is negative")]
    NegativeTail(f64),
}

/// Family tag. New families add a variant and the matching arms below.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Arctan,
}

/// Arguments beyond this magnitude are evaluated through the tail identity.
pub const TAIL_SWITCH: f64 = 1e6;

const SERIES_CUTOFF: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegFun {
    pub family: Family,
    pub k: u32,
    pub beta_plus: f64,
    pub beta_minus: f64,
}

impl Default for RegFun {
    fn default() -> Self {
        Self::arctan()
    }
}

impl RegFun {
    /// `phi(s) = 1/2 + arctan(s)/pi`, with k = 1 and beta = 1/pi on both sides.
    pub fn arctan() -> Self {
        Self {
            family: Family::Arctan,
            k: 1,
            beta_plus: FRAC_1_PI,
            beta_minus: FRAC_1_PI,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta_plus
    }

    pub fn phi(&self, s: f64) -> Result<f64, RegError> {
        check_finite(s)?;
        Ok(self.value(s))
    }

    /// Unchecked `phi`; NaN propagates.
    pub fn value(&self, s: f64) -> f64 {
        match self.family {
            Family::Arctan => {
                if s > TAIL_SWITCH {
                    1.0 - self.upper_gap(s)
                } else if s < -TAIL_SWITCH {
                    self.lower_gap(s)
                } else {
                    0.5 + s.atan() * FRAC_1_PI
                }
            }
        }
    }

    /// `1 - phi(s)`, accurate for large positive `s`.
    pub fn upper_gap(&self, s: f64) -> f64 {
        if s > 1.0 {
            let u = 1.0 / s;
            self.tail_plus_value(u) * u.powi(self.k as i32)
        } else {
            match self.family {
                Family::Arctan => 0.5 - s.atan() * FRAC_1_PI,
            }
        }
    }

    /// `phi(s)`, accurate for large negative `s`.
    pub fn lower_gap(&self, s: f64) -> f64 {
        if s < -1.0 {
            let u = -1.0 / s;
            self.tail_minus_value(u) * u.powi(self.k as i32)
        } else {
            self.value(s)
        }
    }

    /// `phi(s) - p` without cancellation when both are close to 0 or 1.
    pub fn phi_minus(&self, s: f64, p: f64) -> f64 {
        if s > 1.0 {
            (1.0 - p) - self.upper_gap(s)
        } else if s < -1.0 {
            self.lower_gap(s) - p
        } else {
            self.value(s) - p
        }
    }

    pub fn phi_prime(&self, s: f64) -> Result<f64, RegError> {
        check_finite(s)?;
        Ok(self.prime_value(s))
    }

    pub fn prime_value(&self, s: f64) -> f64 {
        match self.family {
            Family::Arctan => FRAC_1_PI / (1.0 + s * s),
        }
    }

    pub fn second_value(&self, s: f64) -> f64 {
        match self.family {
            Family::Arctan => {
                let d = 1.0 + s * s;
                -2.0 * s * FRAC_1_PI / (d * d)
            }
        }
    }

    pub fn phi_inv(&self, p: f64) -> Result<f64, RegError> {
        if !p.is_finite() || p <= 0.0 || p >= 1.0 {
            return Err(RegError::OutsideUnitInterval(p));
        }
        Ok(match self.family {
            // cotangent forms near the ends keep full relative accuracy
            Family::Arctan => {
                if p < 0.25 {
                    -1.0 / (PI * p).tan()
                } else if p > 0.75 {
                    1.0 / (PI * (1.0 - p)).tan()
                } else {
                    (PI * (p - 0.5)).tan()
                }
            }
        })
    }

    /// Inverse by bisection, for families without a closed-form inverse.
    /// The bracket comes from the tail asymptotics `1 - p ~ beta s^-k`.
    pub fn phi_inv_bisect(&self, p: f64) -> Result<f64, RegError> {
        if !p.is_finite() || p <= 0.0 || p >= 1.0 {
            return Err(RegError::OutsideUnitInterval(p));
        }
        let kf = self.k as f64;
        let mut hi = 1.0 + 2.0 * (self.beta_plus / (1.0 - p)).powf(1.0 / kf);
        let mut lo = -1.0 - 2.0 * (self.beta_minus / p).powf(1.0 / kf);
        while self.value(hi) < p {
            hi *= 2.0;
        }
        while self.value(lo) > p {
            lo *= 2.0;
        }
        let f = |s: f64| {
            if p > 0.5 {
                (1.0 - p) - self.upper_gap(s)
            } else {
                self.lower_gap(s) - p
            }
        };
        crate::roots::bisect(f, lo, hi, 1e-14 * (1.0 + hi.abs().max(lo.abs())), 400)
            .map_err(|_| RegError::OutsideUnitInterval(p))
    }

    /// `phi_+` with `phi(1/s) = 1 - phi_+(s) s^k`.
    pub fn tail_plus(&self, s: f64) -> Result<f64, RegError> {
        check_finite(s)?;
        if s < 0.0 {
            return Err(RegError::NegativeTail(s));
        }
        Ok(self.tail_plus_value(s))
    }

    /// `phi_-` with `phi(-1/s) = phi_-(s) s^k`.
    pub fn tail_minus(&self, s: f64) -> Result<f64, RegError> {
        check_finite(s)?;
        if s < 0.0 {
            return Err(RegError::NegativeTail(s));
        }
        Ok(self.tail_minus_value(s))
    }

    pub fn tail_plus_value(&self, s: f64) -> f64 {
        match self.family {
            Family::Arctan => atan_over(s),
        }
    }

    pub fn tail_minus_value(&self, s: f64) -> f64 {
        match self.family {
            Family::Arctan => atan_over(s),
        }
    }

    /// d/ds of `phi_+`.
    pub fn tail_plus_prime(&self, s: f64) -> f64 {
        match self.family {
            Family::Arctan => {
                if s.abs() < SERIES_CUTOFF {
                    FRAC_1_PI * (-2.0 * s / 3.0 + 4.0 * s.powi(3) / 5.0)
                } else {
                    FRAC_1_PI * (1.0 / (s * (1.0 + s * s)) - s.atan() / (s * s))
                }
            }
        }
    }
}

fn atan_over(s: f64) -> f64 {
    if s.abs() < SERIES_CUTOFF {
        let s2 = s * s;
        FRAC_1_PI * (1.0 - s2 / 3.0 + s2 * s2 / 5.0 - s2 * s2 * s2 / 7.0)
    } else {
        s.atan() / (PI * s)
    }
}

fn check_finite(s: f64) -> Result<(), RegError> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(RegError::NonFinite(s))
    }
}
