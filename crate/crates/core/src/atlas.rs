//! The blowup atlas. Every chart is a node in a tree rooted at the ambient
//! extended space `(x, y, p, eps, alpha)`; each node stores its map to and
//! from the parent chart, and to/from ambient compose along the tree.
//!
//! Coordinates (all charts carry five numbers so that every point maps back
//! to ambient):
//!
//! | chart | coords |
//! |-------|--------|
//! | Ambient | x, y, p, eps, alpha |
//! | C1   | x, r1, p, alpha1, eps |
//! | C2   | x, y2, p, r2, eps |
//! | C21  | x, nu21, p, eps21, r2 |
//! | C22  | x, y22, p, nu22, r2 |
//! | Q211 | x, rho211, p211, eps211, r2 |
//! | Q212 | x, rho212, p212, nu212, r2 |
//! | Q213 | x, nu213, p213, rho213, r2 |
//! | G11  | x11, sigma11, alpha11, eps, p |
//! | G12  | x12, sigma12, r12, eps, p |
//! | G13  | x13, sigma13, r13, eps, p |
//! | G121 | x121, sigma12, xi121, eps121, p |
//! | G122 | x122, sigma12, r122, xi122, p |
//!
//! The mirrored twin of C1 has `y = -r alpha1 p - r`; the mirrored twin of
//! C21 has `y2 = -nu`. Grazing charts hang below C1 and carry `p` unchanged.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChartId {
    Ambient,
    C1,
    C2,
    C21,
    C22,
    Q211,
    Q212,
    Q213,
    G11,
    G12,
    G13,
    G121,
    G122,
}

pub const ALL_CHARTS: [ChartId; 13] = [
    ChartId::Ambient,
    ChartId::C1,
    ChartId::C2,
    ChartId::C21,
    ChartId::C22,
    ChartId::Q211,
    ChartId::Q212,
    ChartId::Q213,
    ChartId::G11,
    ChartId::G12,
    ChartId::G13,
    ChartId::G121,
    ChartId::G122,
];

impl ChartId {
    pub fn name(&self) -> &'static str {
        match self {
            ChartId::Ambient => "AMBIENT",
            ChartId::C1 => "C1",
            ChartId::C2 => "C2",
            ChartId::C21 => "C21",
            ChartId::C22 => "C22",
            ChartId::Q211 => "Q211",
            ChartId::Q212 => "Q212",
            ChartId::Q213 => "Q213",
            ChartId::G11 => "G11",
            ChartId::G12 => "G12",
            ChartId::G13 => "G13",
            ChartId::G121 => "G121",
            ChartId::G122 => "G122",
        }
    }

    pub fn coord_names(&self) -> [&'static str; 5] {
        match self {
            ChartId::Ambient => ["x", "y", "p", "eps", "alpha"],
            ChartId::C1 => ["x", "r1", "p", "alpha1", "eps"],
            ChartId::C2 => ["x", "y2", "p", "r2", "eps"],
            ChartId::C21 => ["x", "nu21", "p", "eps21", "r2"],
            ChartId::C22 => ["x", "y22", "p", "nu22", "r2"],
            ChartId::Q211 => ["x", "rho211", "p211", "eps211", "r2"],
            ChartId::Q212 => ["x", "rho212", "p212", "nu212", "r2"],
            ChartId::Q213 => ["x", "nu213", "p213", "rho213", "r2"],
            ChartId::G11 => ["x11", "sigma11", "alpha11", "eps", "p"],
            ChartId::G12 => ["x12", "sigma12", "r12", "eps", "p"],
            ChartId::G13 => ["x13", "sigma13", "r13", "eps", "p"],
            ChartId::G121 => ["x121", "sigma12", "xi121", "eps121", "p"],
            ChartId::G122 => ["x122", "sigma12", "r122", "xi122", "p"],
        }
    }

    pub fn parent(&self) -> Option<ChartId> {
        use ChartId::*;
        match self {
            Ambient => None,
            C1 | C2 => Some(Ambient),
            C21 | C22 => Some(C2),
            Q211 | Q212 | Q213 => Some(C21),
            G11 | G12 | G13 => Some(C1),
            G121 | G122 => Some(G12),
        }
    }

    pub fn is_grazing(&self) -> bool {
        matches!(self, ChartId::G11 | ChartId::G12 | ChartId::G13 | ChartId::G121 | ChartId::G122)
    }

    /// Whether a mirrored twin exists.
    pub fn can_mirror(&self) -> bool {
        matches!(self, ChartId::C1 | ChartId::C21)
    }

    /// Kind of each coordinate for validity checks.
    pub fn kinds(&self) -> [Kind; 5] {
        use Kind::*;
        match self {
            ChartId::Ambient => [Free, Free, Free, Param, Param],
            ChartId::C1 => [Free, Radial, Free, Radial, Param],
            ChartId::C2 => [Free, Scaled, Free, Radial, Param],
            ChartId::C21 => [Free, Radial, Free, Radial, Radial],
            ChartId::C22 => [Free, Scaled, Free, Radial, Radial],
            ChartId::Q211 => [Free, Radial, Scaled, Radial, Radial],
            ChartId::Q212 => [Free, Radial, Scaled, Radial, Radial],
            ChartId::Q213 => [Free, Radial, Scaled, Radial, Radial],
            ChartId::G11 => [Scaled, Radial, Radial, Param, Free],
            ChartId::G12 => [Scaled, Radial, Radial, Param, Free],
            ChartId::G13 => [Scaled, Radial, Radial, Param, Free],
            ChartId::G121 => [Scaled, Radial, Radial, Radial, Free],
            ChartId::G122 => [Scaled, Radial, Radial, Radial, Free],
        }
    }
}

impl fmt::Display for ChartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Unbounded (x, y, p).
    Free,
    /// Positive parameter (eps, alpha) held fixed by the flow.
    Param,
    /// Nonnegative radial coordinate, bounded by the validity box.
    Radial,
    /// Signed scaled coordinate, bounded by the validity box.
    Scaled,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtlasError {
    #[error("{chart}: {constraint}")]
    Domain { chart: ChartId, constraint: String },
    #[error("{from} and {to} do not overlap")]
    EmptyOverlap { from: String, to: String },
    #[error("{chart} has no mirrored twin")]
    NoMirror { chart: ChartId },
    #[error("{chart} expects 5 coordinates, got {got}")]
    Dimension { chart: ChartId, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub chart: ChartId,
    pub mirrored: bool,
    pub coords: [f64; 5],
}

impl ChartPoint {
    pub fn new(chart: ChartId, coords: [f64; 5]) -> Self {
        Self { chart, mirrored: false, coords }
    }

    pub fn mirrored(chart: ChartId, coords: [f64; 5]) -> Self {
        Self { chart, mirrored: true, coords }
    }

    pub fn label(&self) -> String {
        if self.mirrored {
            format!("{}-", self.chart)
        } else {
            self.chart.name().to_string()
        }
    }
}

/// Validity boxes for the charts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidityBox {
    pub radial_max: f64,
    pub scaled_max: f64,
}

impl Default for ValidityBox {
    fn default() -> Self {
        Self { radial_max: 10.0, scaled_max: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atlas {
    pub k: u32,
    pub validity: ValidityBox,
}

fn dom(chart: ChartId, msg: impl Into<String>) -> AtlasError {
    AtlasError::Domain { chart, constraint: msg.into() }
}

impl Atlas {
    pub fn new(k: u32) -> Self {
        Self { k, validity: ValidityBox::default() }
    }

    fn kf(&self) -> f64 {
        self.k as f64
    }

    /// Checks signs and the validity box for the coordinates of `pt`.
    pub fn validate(&self, pt: &ChartPoint) -> Result<(), AtlasError> {
        if pt.mirrored && !pt.chart.can_mirror() {
            return Err(AtlasError::NoMirror { chart: pt.chart });
        }
        let names = pt.chart.coord_names();
        for (i, kind) in pt.chart.kinds().iter().enumerate() {
            let v = pt.coords[i];
            if !v.is_finite() {
                return Err(dom(pt.chart, format!("{} = {v} not finite", names[i])));
            }
            match kind {
                Kind::Free => {}
                Kind::Param => {
                    if !(v > 0.0) {
                        return Err(dom(pt.chart, format!("{} = {v} must be > 0", names[i])));
                    }
                }
                Kind::Radial => {
                    if !(v > 0.0) {
                        return Err(dom(pt.chart, format!("{} = {v} must be > 0", names[i])));
                    }
                    if v >= self.validity.radial_max {
                        return Err(dom(
                            pt.chart,
                            format!("{} = {v} outside radial box < {}", names[i], self.validity.radial_max),
                        ));
                    }
                }
                Kind::Scaled => {
                    if v.abs() > self.validity.scaled_max {
                        return Err(dom(
                            pt.chart,
                            format!("|{}| = {} outside box {}", names[i], v.abs(), self.validity.scaled_max),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Map to the parent chart's coordinates.
    fn up(&self, pt: &ChartPoint) -> [f64; 5] {
        let k = self.kf();
        let c = pt.coords;
        let m = if pt.mirrored { -1.0 } else { 1.0 };
        match pt.chart {
            ChartId::Ambient => c,
            ChartId::C1 => {
                let [x, r1, p, a1, eps] = c;
                [x, -r1 * a1 * p + m * r1, p, eps, r1 * a1]
            }
            ChartId::C2 => {
                let [x, y2, p, r2, eps] = c;
                [x, -r2 * p + r2 * y2, p, eps, r2]
            }
            ChartId::C21 => {
                let [x, nu, p, e21, r2] = c;
                [x, m * nu, p, r2, nu * e21]
            }
            ChartId::C22 => {
                let [x, y22, p, nu22, r2] = c;
                [x, nu22 * y22, p, r2, nu22]
            }
            ChartId::Q211 => {
                let [x, rho, p211, e211, r2] = c;
                let rk = rho.powf(k);
                [x, rk, 1.0 + rk * p211, rho * e211, r2]
            }
            ChartId::Q212 => {
                let [x, rho, p212, nu212, r2] = c;
                let rk = rho.powf(k);
                [x, rk * nu212, 1.0 + rk * p212, rho, r2]
            }
            ChartId::Q213 => {
                let [x, nu, p213, rho, r2] = c;
                let rk = rho.powf(k);
                [x, rk * nu, 1.0 + rk * p213, rho / nu, r2]
            }
            ChartId::G11 => {
                let [x11, s, a11, eps, p] = c;
                [s.powf(k) * x11, s.powf(2.0 * k), p, s * a11, eps]
            }
            ChartId::G13 => {
                let [x13, s, r13, eps, p] = c;
                [s.powf(k) * x13, s.powf(2.0 * k) * r13, p, s / r13, eps]
            }
            ChartId::G12 => {
                let [x12, s, r12, eps, p] = c;
                [s.powf(k) * x12, s.powf(2.0 * k) * r12, p, s, eps]
            }
            ChartId::G121 => {
                let [x121, s, xi, e121, p] = c;
                [xi.powf(k) * x121, s, xi.powf(2.0 * k), xi * e121, p]
            }
            ChartId::G122 => {
                let [x122, s, r122, xi, p] = c;
                [xi.powf(k) * x122, s, xi.powf(2.0 * k) * r122, xi, p]
            }
        }
    }

    /// Inverse of `up`: coordinates in `chart` from the parent's coordinates.
    fn down(&self, chart: ChartId, mirrored: bool, c: [f64; 5]) -> Result<ChartPoint, AtlasError> {
        let k = self.kf();
        let m = if mirrored { -1.0 } else { 1.0 };
        let coords = match chart {
            ChartId::Ambient => c,
            ChartId::C1 => {
                let [x, y, p, eps, a] = c;
                let r1 = m * (y + a * p);
                if !(r1 > 0.0) {
                    let which = if mirrored { "-(y + alpha p)" } else { "y + alpha p" };
                    return Err(dom(chart, format!("{which} = {r1} must be > 0")));
                }
                [x, r1, p, a / r1, eps]
            }
            ChartId::C2 => {
                let [x, y, p, eps, a] = c;
                if !(a > 0.0) {
                    return Err(dom(chart, format!("alpha = {a} must be > 0")));
                }
                [x, (y + a * p) / a, p, a, eps]
            }
            ChartId::C21 => {
                let [x, y2, p, r2, eps] = c;
                let nu = m * y2;
                if !(nu > 0.0) {
                    return Err(dom(chart, format!("nu21 = {nu} must be > 0")));
                }
                [x, nu, p, eps / nu, r2]
            }
            ChartId::C22 => {
                let [x, y2, p, r2, eps] = c;
                if !(eps > 0.0) {
                    return Err(dom(chart, format!("eps = {eps} must be > 0")));
                }
                [x, y2 / eps, p, eps, r2]
            }
            ChartId::Q211 => {
                let [x, nu21, p, e21, r2] = c;
                if !(nu21 > 0.0) {
                    return Err(dom(chart, format!("nu21 = {nu21} must be > 0")));
                }
                let rho = nu21.powf(1.0 / k);
                [x, rho, (p - 1.0) / nu21, e21 / rho, r2]
            }
            ChartId::Q212 => {
                let [x, nu21, p, e21, r2] = c;
                if !(e21 > 0.0) {
                    return Err(dom(chart, format!("eps21 = {e21} must be > 0")));
                }
                let rk = e21.powf(k);
                [x, e21, (p - 1.0) / rk, nu21 / rk, r2]
            }
            ChartId::Q213 => {
                let [x, nu21, p, e21, r2] = c;
                let eps = nu21 * e21;
                if !(eps > 0.0) {
                    return Err(dom(chart, format!("eps = nu21 eps21 = {eps} must be > 0")));
                }
                let rho = eps.powf(1.0 / (k + 1.0));
                let rk = rho.powf(k);
                [x, nu21 / rk, (p - 1.0) / rk, rho, r2]
            }
            ChartId::G11 => {
                let [x, r1, p, a1, eps] = c;
                let s = r1.powf(1.0 / (2.0 * k));
                [x / s.powf(k), s, a1 / s, eps, p]
            }
            ChartId::G13 => {
                let [x, r1, p, a1, eps] = c;
                let s = (r1 * a1).powf(1.0 / (2.0 * k + 1.0));
                if !(s > 0.0) {
                    return Err(dom(chart, format!("alpha = {} must be > 0", r1 * a1)));
                }
                [x / s.powf(k), s, r1 / s.powf(2.0 * k), eps, p]
            }
            ChartId::G12 => {
                let [x, r1, p, a1, eps] = c;
                if !(a1 > 0.0) {
                    return Err(dom(chart, format!("alpha1 = {a1} must be > 0")));
                }
                [x / a1.powf(k), a1, r1 / a1.powf(2.0 * k), eps, p]
            }
            ChartId::G121 => {
                let [x12, s, r12, eps, p] = c;
                if !(r12 > 0.0) {
                    return Err(dom(chart, format!("r12 = {r12} must be > 0")));
                }
                let xi = r12.powf(1.0 / (2.0 * k));
                [x12 / xi.powf(k), s, xi, eps / xi, p]
            }
            ChartId::G122 => {
                let [x12, s, r12, eps, p] = c;
                if !(eps > 0.0) {
                    return Err(dom(chart, format!("eps = {eps} must be > 0")));
                }
                [x12 / eps.powf(k), s, r12 / eps.powf(2.0 * k), eps, p]
            }
        };
        Ok(ChartPoint { chart, mirrored, coords })
    }

    fn path(chart: ChartId) -> Vec<ChartId> {
        let mut v = vec![chart];
        let mut c = chart;
        while let Some(p) = c.parent() {
            v.push(p);
            c = p;
        }
        v.reverse();
        v
    }

    /// Mirroring of a chart propagates to all its descendants.
    fn mirror_on_path(path: &[ChartId], mirrored: bool, i: usize) -> bool {
        mirrored && path[i].can_mirror()
    }

    pub fn to_ambient(&self, pt: &ChartPoint) -> Result<[f64; 5], AtlasError> {
        self.validate(pt)?;
        let path = Self::path(pt.chart);
        let mut cur = pt.clone();
        for i in (1..path.len()).rev() {
            let up = self.up(&cur);
            let parent = path[i - 1];
            cur = ChartPoint { chart: parent, mirrored: Self::mirror_on_path(&path, pt.mirrored, i - 1), coords: up };
        }
        Ok(cur.coords)
    }

    /// `(x, r1, alpha1, eps)` of a grazing-chart point.
    pub fn grazing_to_c1(&self, pt: &ChartPoint) -> Result<[f64; 4], AtlasError> {
        if !pt.chart.is_grazing() {
            return Err(dom(pt.chart, "not a grazing chart"));
        }
        self.validate(pt)?;
        let mut cur = pt.clone();
        while cur.chart != ChartId::C1 {
            let parent = cur.chart.parent().expect("grazing charts hang below C1");
            cur = ChartPoint { chart: parent, mirrored: false, coords: self.up(&cur) };
        }
        let [x, r1, _p, a1, eps] = cur.coords;
        Ok([x, r1, a1, eps])
    }

    pub fn from_ambient(&self, chart: ChartId, mirrored: bool, amb: [f64; 5]) -> Result<ChartPoint, AtlasError> {
        if mirrored && !chart.can_mirror() {
            return Err(AtlasError::NoMirror { chart });
        }
        let path = Self::path(chart);
        let mut cur = ChartPoint { chart: ChartId::Ambient, mirrored: false, coords: amb };
        for (i, c) in path.iter().enumerate().skip(1) {
            let mir = Self::mirror_on_path(&path, mirrored, i);
            cur = self.down(*c, mir, cur.coords)?;
        }
        self.validate(&cur)?;
        Ok(cur)
    }

    /// `(eps, alpha)` implied by the coordinates.
    pub fn conserved(&self, pt: &ChartPoint) -> (f64, f64) {
        let k = self.kf();
        let c = pt.coords;
        match pt.chart {
            ChartId::Ambient => (c[3], c[4]),
            ChartId::C1 => (c[4], c[1] * c[3]),
            ChartId::C2 => (c[4], c[3]),
            ChartId::C21 => (c[1] * c[3], c[4]),
            ChartId::C22 => (c[3], c[4]),
            ChartId::Q211 => (c[1].powf(k + 1.0) * c[3], c[4]),
            ChartId::Q212 => (c[1].powf(k + 1.0) * c[3], c[4]),
            ChartId::Q213 => (c[3].powf(k + 1.0), c[4]),
            ChartId::G11 => (c[3], c[1].powf(2.0 * k + 1.0) * c[2]),
            ChartId::G13 => (c[3], c[1].powf(2.0 * k + 1.0)),
            ChartId::G12 => (c[3], c[1].powf(2.0 * k + 1.0) * c[2]),
            ChartId::G121 => (c[2] * c[3], c[1].powf(2.0 * k + 1.0) * c[2].powf(2.0 * k)),
            ChartId::G122 => (c[3], c[1].powf(2.0 * k + 1.0) * c[3].powf(2.0 * k) * c[2]),
        }
    }

    /// Overlap change of coordinates; closed forms where available,
    /// otherwise through ambient.
    pub fn change_chart(&self, pt: &ChartPoint, target: ChartId, target_mirrored: bool) -> Result<ChartPoint, AtlasError> {
        let same_family = |a: ChartId, b: ChartId| {
            let fam = |c: ChartId| match c {
                ChartId::C1 | ChartId::G11 | ChartId::G12 | ChartId::G13 | ChartId::G121 | ChartId::G122 => 1,
                ChartId::C21 | ChartId::Q211 | ChartId::Q212 | ChartId::Q213 => 21,
                _ => 0,
            };
            fam(a) == fam(b) && fam(a) != 0
        };
        if pt.mirrored != target_mirrored && (pt.chart == target || same_family(pt.chart, target)) {
            return Err(AtlasError::EmptyOverlap {
                from: pt.label(),
                to: ChartPoint { chart: target, mirrored: target_mirrored, coords: [0.0; 5] }.label(),
            });
        }
        self.validate(pt)?;
        if let Some(c) = self.closed_form(pt, target, target_mirrored) {
            let out = ChartPoint { chart: target, mirrored: target_mirrored, coords: c };
            self.validate(&out)?;
            return Ok(out);
        }
        self.composed(pt, target, target_mirrored)
    }

    /// Change of chart through the ambient space.
    pub fn composed(&self, pt: &ChartPoint, target: ChartId, target_mirrored: bool) -> Result<ChartPoint, AtlasError> {
        let amb = self.to_ambient(pt)?;
        self.from_ambient(target, target_mirrored, amb)
    }

    fn closed_form(&self, pt: &ChartPoint, target: ChartId, tm: bool) -> Option<[f64; 5]> {
        use ChartId::*;
        let k = self.kf();
        let c = pt.coords;
        if pt.mirrored || tm {
            return None;
        }
        Some(match (pt.chart, target) {
            (C2, C1) => {
                let [x, y2, p, r2, eps] = c;
                [x, r2 * y2, p, 1.0 / y2, eps]
            }
            (C1, C2) => {
                let [x, r1, p, a1, eps] = c;
                [x, 1.0 / a1, p, r1 * a1, eps]
            }
            (C22, C21) => {
                let [x, y22, p, nu22, r2] = c;
                [x, nu22 * y22, p, 1.0 / y22, r2]
            }
            (C21, C22) => {
                let [x, nu, p, e21, r2] = c;
                [x, 1.0 / e21, p, nu * e21, r2]
            }
            (Q213, Q211) => {
                let [x, nu, p, rho, r2] = c;
                [x, rho * nu.powf(1.0 / k), p / nu, nu.powf(-(k + 1.0) / k), r2]
            }
            (Q213, Q212) => {
                let [x, nu, p, rho, r2] = c;
                [x, rho / nu, p * nu.powf(k), nu.powf(k + 1.0), r2]
            }
            (Q211, Q213) => {
                let [x, rho, p, e, r2] = c;
                let nu = e.powf(-k / (k + 1.0));
                [x, nu, p * nu, rho / nu.powf(1.0 / k), r2]
            }
            (Q212, Q213) => {
                let [x, rho, p, n, r2] = c;
                let nu = n.powf(1.0 / (k + 1.0));
                [x, nu, p / nu.powf(k), rho * nu, r2]
            }
            (G12, G11) => {
                let [x12, s, r12, eps, p] = c;
                [x12 * r12.powf(-0.5), s * r12.powf(1.0 / (2.0 * k)), r12.powf(-1.0 / (2.0 * k)), eps, p]
            }
            (G12, G13) => {
                let [x12, s, r12, eps, p] = c;
                let q = 1.0 / (2.0 * k + 1.0);
                [x12 * r12.powf(-k * q), s * r12.powf(q), r12.powf(q), eps, p]
            }
            (G122, G121) => {
                let [x, s, r, xi, p] = c;
                let q = 1.0 / (2.0 * k);
                [x * r.powf(-0.5), s, xi * r.powf(q), r.powf(-q), p]
            }
            _ => return None,
        })
    }

    /// Pairs with a closed-form change of coordinates.
    pub fn closed_form_pairs() -> &'static [(ChartId, ChartId)] {
        use ChartId::*;
        &[
            (C2, C1),
            (C1, C2),
            (C22, C21),
            (C21, C22),
            (Q213, Q211),
            (Q213, Q212),
            (Q211, Q213),
            (Q212, Q213),
            (G12, G11),
            (G12, G13),
            (G122, G121),
        ]
    }

    /// Pullback of an ambient vector field to chart coordinates, by central
    /// differences of `from_ambient` along the field direction with one
    /// Richardson step.
    pub fn pullback(
        &self,
        pt: &ChartPoint,
        field: &dyn Fn(&[f64; 5]) -> [f64; 5],
    ) -> Result<[f64; 5], AtlasError> {
        let a = self.to_ambient(pt)?;
        let v = field(&a);
        let mut t = f64::INFINITY;
        for j in 0..5 {
            if v[j] != 0.0 {
                t = t.min(a[j].abs().max(1e-8) / v[j].abs());
            }
        }
        if !t.is_finite() {
            return Ok([0.0; 5]);
        }
        let d = |h: f64| -> Result<[f64; 5], AtlasError> {
            let mut ap = a;
            let mut am = a;
            for j in 0..5 {
                ap[j] += h * v[j];
                am[j] -= h * v[j];
            }
            let fp = self.from_ambient(pt.chart, pt.mirrored, ap)?.coords;
            let fm = self.from_ambient(pt.chart, pt.mirrored, am)?.coords;
            let mut out = [0.0; 5];
            for j in 0..5 {
                out[j] = (fp[j] - fm[j]) / (2.0 * h);
            }
            Ok(out)
        };
        let h = 1e-4 * t;
        let d1 = d(h)?;
        let d2 = d(0.5 * h)?;
        let mut out = [0.0; 5];
        for j in 0..5 {
            out[j] = (4.0 * d2[j] - d1[j]) / 3.0;
        }
        Ok(out)
    }
}

/// Worst round-trip and overlap residuals of one chart over random points.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartResidual {
    pub chart: ChartId,
    pub mirrored: bool,
    pub samples: usize,
    /// `from_ambient(to_ambient(pt))` against `pt`.
    pub round_trip: f64,
    /// Closed-form overlap against the change through ambient; NaN when the
    /// chart has no closed-form pair.
    pub overlap: f64,
    pub overlap_samples: usize,
}

impl Atlas {
    /// Residual survey over every chart (and mirrored twin) with `n` accepted
    /// random points each. Points whose image leaves the target box are
    /// redrawn.
    pub fn residual_survey(&self, n: usize, seed: u64) -> Result<Vec<ChartResidual>, AtlasError> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for chart in ALL_CHARTS {
            for mirrored in [false, true] {
                if mirrored && !chart.can_mirror() {
                    continue;
                }
                let mut rt = 0.0f64;
                for _ in 0..n {
                    let pt = random_point(chart, mirrored, &mut rng);
                    let back = self.from_ambient(chart, mirrored, self.to_ambient(&pt)?)?;
                    rt = rt.max(mixed_err(&pt.coords, &back.coords, 1.0));
                }
                let pairs: Vec<ChartId> =
                    Self::closed_form_pairs().iter().filter(|(a, _)| *a == chart).map(|(_, b)| *b).collect();
                let (mut ov, mut m) = (0.0f64, 0usize);
                if !mirrored && !pairs.is_empty() {
                    let mut tries = 0;
                    while m < n && tries < 100 * n {
                        tries += 1;
                        let pt = random_point(chart, false, &mut rng);
                        let pairs_ok: Result<Vec<f64>, AtlasError> = pairs
                            .iter()
                            .map(|&t| {
                                let c = self.change_chart(&pt, t, false)?;
                                let d = self.composed(&pt, t, false)?;
                                Ok(mixed_err(&c.coords, &d.coords, 1.0))
                            })
                            .collect();
                        if let Ok(v) = pairs_ok {
                            ov = v.into_iter().fold(ov, f64::max);
                            m += 1;
                        }
                    }
                } else {
                    ov = f64::NAN;
                }
                out.push(ChartResidual { chart, mirrored, samples: n, round_trip: rt, overlap: ov, overlap_samples: m });
            }
        }
        Ok(out)
    }
}

/// Random point well inside the validity box of `chart`.
pub fn random_point<R: rand::Rng>(chart: ChartId, mirrored: bool, rng: &mut R) -> ChartPoint {
    let mut coords = [0.0; 5];
    for (c, kind) in coords.iter_mut().zip(chart.kinds()) {
        *c = match kind {
            Kind::Free => rng.gen_range(-1.0..1.0),
            Kind::Param => 10f64.powf(rng.gen_range(-4.0..-1.0)),
            Kind::Radial => rng.gen_range(0.05..2.0),
            Kind::Scaled => rng.gen_range(-2.0..2.0),
        };
    }
    ChartPoint { chart, mirrored, coords }
}

/// Relative distance used for round-trip checks.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

/// Mixed distance: relative for large entries, absolute below `floor`.
pub fn mixed_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn atlas() -> Atlas {
        Atlas::new(1)
    }

    #[test]
    fn c2_and_c22_examples() {
        let a = atlas();
        let amb = a.to_ambient(&ChartPoint::new(ChartId::C2, [0.1, 0.3, 0.4, 0.02, 1e-3])).unwrap();
        assert!((amb[1] - (-0.02 * 0.4 + 0.02 * 0.3)).abs() < 1e-16);
        let amb = a.to_ambient(&ChartPoint::new(ChartId::C22, [0.1, 0.0, 0.4, 1e-3, 0.02])).unwrap();
        assert_eq!(amb[1], -0.02 * 0.4);
    }

    #[test]
    fn q213_example() {
        let a = atlas();
        let amb = a.to_ambient(&ChartPoint::new(ChartId::Q213, [0.0, 1.0, -0.5, 0.1, 0.01])).unwrap();
        assert!((amb[2] - 0.95).abs() < 1e-15);
        assert!((amb[3] - 0.01).abs() < 1e-16);
        // y = -alpha (1 + rho^k p) + alpha rho^k nu
        assert!((amb[1] - (-0.01 * 0.95 + 0.01 * 0.1)).abs() < 1e-16);
    }

    #[test]
    fn overlap_examples() {
        let a = atlas();
        let q = ChartPoint::new(ChartId::Q213, [0.2, 1.0, -0.3, 0.07, 0.01]);
        let q211 = a.change_chart(&q, ChartId::Q211, false).unwrap();
        assert!((q211.coords[1] - 0.07).abs() < 1e-16);
        assert!((q211.coords[2] + 0.3).abs() < 1e-16);
        assert!((q211.coords[3] - 1.0).abs() < 1e-16);
        let q212 = a.change_chart(&q, ChartId::Q212, false).unwrap();
        assert!((q212.coords[1] - 0.07).abs() < 1e-16 && (q212.coords[2] + 0.3).abs() < 1e-16);
        let c22 = ChartPoint::new(ChartId::C22, [0.0, 2.0, 0.5, 1e-3, 0.01]);
        let c21 = a.change_chart(&c22, ChartId::C21, false).unwrap();
        assert!((c21.coords[1] - 2e-3).abs() < 1e-18 && (c21.coords[3] - 0.5).abs() < 1e-16);
        let c2 = ChartPoint::new(ChartId::C2, [0.0, 4.0, 0.5, 0.01, 1e-3]);
        let c1 = a.change_chart(&c2, ChartId::C1, false).unwrap();
        assert!((c1.coords[1] - 0.04).abs() < 1e-16 && (c1.coords[3] - 0.25).abs() < 1e-16);
    }

    #[test]
    fn mirrored_c1_does_not_overlap() {
        let a = atlas();
        let p = ChartPoint::new(ChartId::C1, [0.0, 0.5, 0.2, 0.1, 1e-3]);
        assert!(matches!(a.change_chart(&p, ChartId::C1, true), Err(AtlasError::EmptyOverlap { .. })));
        // the twin lives below y + alpha p = 0
        let m = ChartPoint::mirrored(ChartId::C1, [0.0, 0.5, 0.2, 0.1, 1e-3]);
        let amb = a.to_ambient(&m).unwrap();
        assert!(amb[1] + amb[4] * amb[2] < 0.0);
        assert!(a.from_ambient(ChartId::C1, false, amb).is_err());
        let back = a.from_ambient(ChartId::C1, true, amb).unwrap();
        assert!(rel_err(&back.coords, &m.coords) < 1e-14);
    }

    #[test]
    fn domain_error_names_constraint() {
        let a = atlas();
        let e = a.from_ambient(ChartId::C1, false, [0.0, -1.0, 0.0, 1e-3, 0.01]).unwrap_err();
        assert!(e.to_string().contains("y + alpha p"));
        let e = a.validate(&ChartPoint::new(ChartId::C21, [0.0, 20.0, 0.0, 0.1, 0.1])).unwrap_err();
        assert!(e.to_string().contains("nu21"));
        assert!(matches!(
            a.validate(&ChartPoint::mirrored(ChartId::C2, [0.0; 5])),
            Err(AtlasError::NoMirror { .. })
        ));
    }

    #[test]
    fn grazing_conserved_quantities() {
        let a = Atlas::new(2);
        let g = ChartPoint::new(ChartId::G121, [0.3, 1.0, 0.2, 0.5, 0.9]);
        let (eps, alpha) = a.conserved(&g);
        assert!((alpha - 0.2f64.powi(4)).abs() < 1e-16);
        assert!((eps - 0.1).abs() < 1e-16);
        let c1 = a.grazing_to_c1(&g).unwrap();
        assert!((c1[1] * c1[2] - alpha).abs() < 1e-16 && (c1[3] - eps).abs() < 1e-16);
        let g13 = ChartPoint::new(ChartId::G13, [0.3, 0.4, 0.7, 1e-3, 0.9]);
        assert!((a.conserved(&g13).1 - 0.4f64.powi(5)).abs() < 1e-16);
    }

    #[test]
    fn survey_small() {
        let s = Atlas::new(1).residual_survey(10, 3).unwrap();
        assert_eq!(s.len(), 13 + ALL_CHARTS.iter().filter(|c| c.can_mirror()).count());
        for r in &s {
            assert!(r.round_trip < 1e-12, "{r:?}");
            assert!(r.overlap.is_nan() || (r.overlap < 1e-12 && r.overlap_samples == 10), "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn closed_forms_commute(
            x in -1.0f64..1.0, u in 0.5f64..2.0, v in -2.0f64..2.0, w in 0.5f64..2.0, r in 0.01f64..0.5, k in 1u32..3
        ) {
            let a = Atlas::new(k);
            for &(from, to) in Atlas::closed_form_pairs() {
                let coords = match from {
                    ChartId::C2 | ChartId::C22 => [x, u, v, r, w * 1e-2],
                    ChartId::C1 => [x, u, v, w, r],
                    ChartId::C21 => [x, u, v, w, r],
                    ChartId::Q211 | ChartId::Q212 | ChartId::Q213 => [x, u, v, w, r],
                    _ => [v, u, w, r, x],
                };
                let pt = ChartPoint::new(from, coords);
                let c = a.change_chart(&pt, to, false).unwrap();
                let d = a.composed(&pt, to, false).unwrap();
                prop_assert!(mixed_err(&c.coords, &d.coords, 1.0) < 1e-12, "{from}->{to} {:?} {:?}", c.coords, d.coords);
            }
        }
    }
}
