//! Nonlinear terms `F(t, x, u)`, Dirichlet data and their admissibility checks.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryParam, Domain, Endpoint, Face, Layout, Point, Shape, SpaceTimeGrid, SpatialGrid};
use crate::smooth::{bump, smooth_step};
use crate::stencil::forward_weights;

/// Function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeProfile {
    Polynomial { coeffs: Vec<f64> },
    Sin { freq: f64, #[serde(default)] phase: f64 },
    Bump { center: f64, half_width: f64 },
    SmoothStep { start: f64, end: f64 },
    Exp { rate: f64 },
    /// `6 / (t_star - t)^2`, capped at `cap`.
    BlowUp { t_star: f64, cap: f64 },
    AbsPower { center: f64, exponent: f64 },
}

impl TimeProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeProfile::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c),
            TimeProfile::Sin { freq, phase } => (freq * t + phase).sin(),
            TimeProfile::Bump { center, half_width } => bump((t - center) / half_width),
            TimeProfile::SmoothStep { start, end } => smooth_step((t - start) / (end - start)),
            TimeProfile::Exp { rate } => (rate * t).exp(),
            TimeProfile::BlowUp { t_star, cap } => {
                if t >= *t_star {
                    *cap
                } else {
                    (6.0 / (t_star - t).powi(2)).min(*cap)
                }
            }
            TimeProfile::AbsPower { center, exponent } => (t - center).abs().powf(*exponent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub c: f64,
    #[serde(default)]
    pub px: u32,
    #[serde(default)]
    pub py: u32,
}

/// Function of the spatial point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceProfile {
    Monomials { terms: Vec<Monomial> },
    /// `cos(kx x + px) cos(ky y + py)`.
    Trig {
        #[serde(default)]
        kx: f64,
        #[serde(default)]
        px: f64,
        #[serde(default)]
        ky: f64,
        #[serde(default)]
        py: f64,
    },
    Bump { center: Point, radius: f64 },
    Gaussian { center: Point, width: f64 },
}

impl SpaceProfile {
    pub fn eval(&self, p: Point) -> f64 {
        match self {
            SpaceProfile::Monomials { terms } => terms
                .iter()
                .map(|m| m.c * p[0].powi(m.px as i32) * p[1].powi(m.py as i32))
                .sum(),
            SpaceProfile::Trig { kx, px, ky, py } => (kx * p[0] + px).cos() * (ky * p[1] + py).cos(),
            SpaceProfile::Bump { center, radius } => {
                bump((p[0] - center[0]).hypot(p[1] - center[1]) / radius)
            }
            SpaceProfile::Gaussian { center, width } => {
                let r2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                (-r2 / (width * width)).exp()
            }
        }
    }

    pub fn sin_x(k: f64) -> Self {
        SpaceProfile::Trig { kx: k, px: -std::f64::consts::FRAC_PI_2, ky: 0.0, py: 0.0 }
    }
}

pub type ScalarFn = Arc<dyn Fn(f64, Point) -> f64 + Send + Sync>;

/// Space-time coefficient `c(t, x)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficient {
    Constant { value: f64 },
    Time { profile: TimeProfile },
    Space { profile: SpaceProfile },
    Product { factors: Vec<Coefficient> },
    Sum { terms: Vec<Coefficient> },
    Power { base: Box<Coefficient>, exponent: i32 },
    Sampled(SampledCoefficient),
    #[serde(skip)]
    Custom(ScalarFn),
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant { value } => write!(f, "Constant({value})"),
            Coefficient::Time { profile } => write!(f, "Time({profile:?})"),
            Coefficient::Space { profile } => write!(f, "Space({profile:?})"),
            Coefficient::Product { factors } => f.debug_list().entries(factors).finish(),
            Coefficient::Sum { terms } => write!(f, "Sum{terms:?}"),
            Coefficient::Power { base, exponent } => write!(f, "({base:?})^{exponent}"),
            Coefficient::Sampled(s) => write!(f, "Sampled({} levels)", s.nt + 1),
            Coefficient::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Coefficient {
    pub fn constant(value: f64) -> Self {
        Coefficient::Constant { value }
    }

    pub fn time(profile: TimeProfile) -> Self {
        Coefficient::Time { profile }
    }

    pub fn space(profile: SpaceProfile) -> Self {
        Coefficient::Space { profile }
    }

    pub fn product(factors: Vec<Coefficient>) -> Self {
        Coefficient::Product { factors }
    }

    pub fn custom(f: impl Fn(f64, Point) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::Custom(Arc::new(f))
    }

    pub fn eval(&self, t: f64, p: Point) -> f64 {
        match self {
            Coefficient::Constant { value } => *value,
            Coefficient::Time { profile } => profile.eval(t),
            Coefficient::Space { profile } => profile.eval(p),
            Coefficient::Product { factors } => factors.iter().map(|c| c.eval(t, p)).product(),
            Coefficient::Sum { terms } => terms.iter().map(|c| c.eval(t, p)).sum(),
            Coefficient::Power { base, exponent } => base.eval(t, p).powi(*exponent),
            Coefficient::Sampled(s) => s.eval(t, p),
            Coefficient::Custom(f) => f(t, p),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Coefficient::Constant { value } if *value == 0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Coefficient::Product { factors: vec![Coefficient::constant(s), self.clone()] }
    }
}

/// Samples of `c(t, x)` on uniform time levels and the nodes of a spatial grid.
#[derive(Debug, Clone)]
pub struct SampledCoefficient {
    pub grid: Arc<SpatialGrid>,
    pub t0: f64,
    pub dt: f64,
    pub nt: usize,
    /// `(nt + 1) x grid.len()` row-major.
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SampledRepr {
    domain: Domain,
    layout: Layout,
    t0: f64,
    dt: f64,
    nt: usize,
    values: Vec<f64>,
}

impl Serialize for SampledCoefficient {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SampledRepr {
            domain: self.grid.domain.clone(),
            layout: self.grid.layout,
            t0: self.t0,
            dt: self.dt,
            nt: self.nt,
            values: self.values.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SampledCoefficient {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = SampledRepr::deserialize(d)?;
        let grid = SpatialGrid::from_layout(&r.domain, r.layout).map_err(serde::de::Error::custom)?;
        SampledCoefficient::new(Arc::new(grid), r.t0, r.dt, r.nt, r.values).map_err(serde::de::Error::custom)
    }
}

impl SampledCoefficient {
    pub fn new(grid: Arc<SpatialGrid>, t0: f64, dt: f64, nt: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (nt + 1) * grid.len() {
            return Err(Error::Shape(format!(
                "sampled coefficient has {} values, expected {}",
                values.len(),
                (nt + 1) * grid.len()
            )));
        }
        if nt > 0 && dt <= 0.0 {
            return Err(Error::Config("sampled coefficient needs a positive time step".into()));
        }
        Ok(SampledCoefficient { grid, t0, dt, nt, values })
    }

    /// Piecewise linear in time (clamped), multilinear in space.
    pub fn eval(&self, t: f64, p: Point) -> f64 {
        let ns = self.grid.len();
        let stencil = self.grid.interpolation_stencil(p);
        let at = |n: usize| stencil.iter().map(|(k, w)| w * self.values[n * ns + k]).sum::<f64>();
        if self.nt == 0 {
            return at(0);
        }
        let s = ((t - self.t0) / self.dt).clamp(0.0, self.nt as f64);
        let n = (s.floor() as usize).min(self.nt - 1);
        let f = s - n as f64;
        (1.0 - f) * at(n) + f * at(n + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTag {
    A,
    AStar,
    Unconstrained,
}

/// Closure-backed nonlinearity.
#[derive(Clone)]
pub struct CustomNonlinearity {
    pub name: String,
    pub eval: Arc<dyn Fn(f64, Point, f64) -> f64 + Send + Sync>,
    pub du: Option<Arc<dyn Fn(f64, Point, f64) -> f64 + Send + Sync>>,
    pub duu: Option<Arc<dyn Fn(f64, Point, f64) -> f64 + Send + Sync>>,
}

impl fmt::Debug for CustomNonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Custom({})", self.name)
    }
}

/// `F = offset(t, x) + integral from anchor to u of s(t, x, v) dv`, with
/// `s` piecewise linear in `v` through the sampled slopes at `u_nodes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableNonlinearity {
    pub u_nodes: Vec<f64>,
    pub slopes: Vec<SampledCoefficient>,
    #[serde(default)]
    pub anchor: f64,
    #[serde(default)]
    pub offset: Option<SampledCoefficient>,
}

impl TableNonlinearity {
    pub fn new(u_nodes: Vec<f64>, slopes: Vec<SampledCoefficient>, anchor: f64, offset: Option<SampledCoefficient>) -> Result<Self> {
        if u_nodes.len() < 2 || u_nodes.len() != slopes.len() {
            return Err(Error::Config("table needs at least two u nodes, one slope grid per node".into()));
        }
        if u_nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("table u nodes must be strictly increasing".into()));
        }
        Ok(TableNonlinearity { u_nodes, slopes, anchor, offset })
    }

    fn piece(&self, u: f64) -> usize {
        let m = self.u_nodes.len();
        match self.u_nodes.iter().position(|&v| v > u) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => m - 2,
        }
    }

    fn slope_line(&self, t: f64, p: Point, i: usize) -> (f64, f64, f64) {
        let a = self.u_nodes[i];
        let b = self.u_nodes[i + 1];
        let sa = self.slopes[i].eval(t, p);
        let sb = self.slopes[i + 1].eval(t, p);
        (a, sa, (sb - sa) / (b - a))
    }

    /// Integral of the slope from `lo` to `hi` within one linear piece.
    fn piece_integral(line: (f64, f64, f64), lo: f64, hi: f64) -> f64 {
        let (a, sa, k) = line;
        let prim = |v: f64| sa * (v - a) + 0.5 * k * (v - a).powi(2);
        prim(hi) - prim(lo)
    }

    fn integral(&self, t: f64, p: Point, from: f64, to: f64) -> f64 {
        if to < from {
            return -self.integral(t, p, to, from);
        }
        let m = self.u_nodes.len();
        let mut total = 0.0;
        let mut lo = from;
        while lo < to {
            let i = self.piece(lo);
            let piece_end = if i + 1 < m - 1 { self.u_nodes[i + 1] } else { f64::INFINITY };
            let hi = if lo < self.u_nodes[0] { self.u_nodes[0].min(to) } else { piece_end.min(to) };
            total += Self::piece_integral(self.slope_line(t, p, i), lo, hi);
            lo = hi;
        }
        total
    }

    pub fn eval(&self, t: f64, p: Point, u: f64) -> f64 {
        let base = self.offset.as_ref().map_or(0.0, |o| o.eval(t, p));
        base + self.integral(t, p, self.anchor, u)
    }

    pub fn du(&self, t: f64, p: Point, u: f64) -> f64 {
        let (a, sa, k) = self.slope_line(t, p, self.piece(u));
        sa + k * (u - a)
    }

    pub fn duu(&self, t: f64, p: Point, u: f64) -> f64 {
        self.slope_line(t, p, self.piece(u)).2
    }
}

fn default_one() -> Coefficient {
    Coefficient::constant(1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonlinearityKind {
    Zero,
    /// `m(t, x) u`.
    Linear { m: Coefficient },
    /// `alpha(t, x) u^2`.
    Quadratic { alpha: Coefficient },
    /// `c(t, x) u^3`.
    Cubic {
        #[serde(default = "default_one")]
        coeff: Coefficient,
    },
    /// `-u^2`.
    BlowupQuadratic,
    /// `sum_k c_k(t, x) u^k`.
    Polynomial { coeffs: Vec<Coefficient> },
    /// `amplitude * e^u`.
    Exponential { amplitude: f64 },
    Table(TableNonlinearity),
    #[serde(skip)]
    Custom(CustomNonlinearity),
}

/// A nonlinear term together with its growth constants and admissibility class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Nonlinearity {
    #[serde(flatten)]
    pub kind: NonlinearityKind,
    #[serde(default = "default_b")]
    pub growth_b: f64,
    #[serde(default = "default_c1")]
    pub growth_c1: f64,
    #[serde(default = "default_tag")]
    pub class_tag: ClassTag,
}

fn default_b() -> f64 {
    3.0
}

fn default_c1() -> f64 {
    10.0
}

fn default_tag() -> ClassTag {
    ClassTag::Unconstrained
}

/// Relative step of the finite difference fallback.
pub const FD_STEP: f64 = 1e-5;

fn five_point(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

fn five_point_second(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x - 2.0 * h) + 16.0 * f(x - h) - 30.0 * f(x) + 16.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h * h)
}

impl Nonlinearity {
    pub fn new(kind: NonlinearityKind, growth_b: f64, growth_c1: f64, class_tag: ClassTag) -> Self {
        Nonlinearity { kind, growth_b, growth_c1, class_tag }
    }

    pub fn zero() -> Self {
        Self::new(NonlinearityKind::Zero, 3.0, 1.0, ClassTag::A)
    }

    pub fn cubic() -> Self {
        Self::new(NonlinearityKind::Cubic { coeff: default_one() }, 3.0, 10.0, ClassTag::AStar)
    }

    pub fn quadratic(alpha: Coefficient) -> Self {
        Self::new(NonlinearityKind::Quadratic { alpha }, 2.0, 10.0, ClassTag::Unconstrained)
    }

    pub fn linear(m: Coefficient) -> Self {
        Self::new(NonlinearityKind::Linear { m }, 2.0, 10.0, ClassTag::Unconstrained)
    }

    pub fn blowup_quadratic() -> Self {
        Self::new(NonlinearityKind::BlowupQuadratic, 2.0, 1.0, ClassTag::AStar)
    }

    pub fn custom(name: &str, f: impl Fn(f64, Point, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(
            NonlinearityKind::Custom(CustomNonlinearity { name: name.into(), eval: Arc::new(f), du: None, duu: None }),
            3.0,
            10.0,
            ClassTag::Unconstrained,
        )
    }

    pub fn name(&self) -> String {
        match &self.kind {
            NonlinearityKind::Zero => "zero".into(),
            NonlinearityKind::Linear { .. } => "linear".into(),
            NonlinearityKind::Quadratic { .. } => "quadratic".into(),
            NonlinearityKind::Cubic { .. } => "cubic".into(),
            NonlinearityKind::BlowupQuadratic => "blowup_quadratic".into(),
            NonlinearityKind::Polynomial { .. } => "polynomial".into(),
            NonlinearityKind::Exponential { .. } => "exponential".into(),
            NonlinearityKind::Table(_) => "table".into(),
            NonlinearityKind::Custom(c) => c.name.clone(),
        }
    }

    /// True when `F` does not depend on `u` nonlinearly and vanishes at `u = 0`.
    pub fn is_zero(&self) -> bool {
        matches!(self.kind, NonlinearityKind::Zero)
    }

    pub fn eval(&self, t: f64, p: Point, u: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { m } => m.eval(t, p) * u,
            NonlinearityKind::Quadratic { alpha } => alpha.eval(t, p) * u * u,
            NonlinearityKind::Cubic { coeff } => coeff.eval(t, p) * u * u * u,
            NonlinearityKind::BlowupQuadratic => -u * u,
            NonlinearityKind::Polynomial { coeffs } => {
                coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c.eval(t, p))
            }
            NonlinearityKind::Exponential { amplitude } => amplitude * u.exp(),
            NonlinearityKind::Table(tab) => tab.eval(t, p, u),
            NonlinearityKind::Custom(c) => (c.eval)(t, p, u),
        }
    }

    /// `d_u F`, analytic where available.
    pub fn du(&self, t: f64, p: Point, u: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { m } => m.eval(t, p),
            NonlinearityKind::Quadratic { alpha } => 2.0 * alpha.eval(t, p) * u,
            NonlinearityKind::Cubic { coeff } => 3.0 * coeff.eval(t, p) * u * u,
            NonlinearityKind::BlowupQuadratic => -2.0 * u,
            NonlinearityKind::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, c)| acc * u + k as f64 * c.eval(t, p)),
            NonlinearityKind::Exponential { amplitude } => amplitude * u.exp(),
            NonlinearityKind::Table(tab) => tab.du(t, p, u),
            NonlinearityKind::Custom(c) => match &c.du {
                Some(d) => d(t, p, u),
                None => self.du_fd(t, p, u),
            },
        }
    }

    /// `d_u^2 F`, analytic where available.
    pub fn duu(&self, t: f64, p: Point, u: f64) -> f64 {
        match &self.kind {
            NonlinearityKind::Zero | NonlinearityKind::Linear { .. } => 0.0,
            NonlinearityKind::Quadratic { alpha } => 2.0 * alpha.eval(t, p),
            NonlinearityKind::Cubic { coeff } => 6.0 * coeff.eval(t, p) * u,
            NonlinearityKind::BlowupQuadratic => -2.0,
            NonlinearityKind::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .skip(2)
                .rev()
                .fold(0.0, |acc, (k, c)| acc * u + (k * (k - 1)) as f64 * c.eval(t, p)),
            NonlinearityKind::Exponential { amplitude } => amplitude * u.exp(),
            NonlinearityKind::Table(tab) => tab.duu(t, p, u),
            NonlinearityKind::Custom(c) => match &c.duu {
                Some(d) => d(t, p, u),
                None => self.duu_fd(t, p, u),
            },
        }
    }

    /// Five-point finite difference `d_u F`.
    pub fn du_fd(&self, t: f64, p: Point, u: f64) -> f64 {
        five_point(|v| self.eval(t, p, v), u, FD_STEP * u.abs().max(1.0))
    }

    /// Five-point finite difference `d_u^2 F` (larger step to limit cancellation).
    pub fn duu_fd(&self, t: f64, p: Point, u: f64) -> f64 {
        five_point_second(|v| self.eval(t, p, v), u, 1e3 * FD_STEP * u.abs().max(1.0))
    }

    /// `d_t F` by finite differences (one-sided near `t = 0`).
    pub fn dt(&self, t: f64, p: Point, u: f64) -> f64 {
        time_derivative(|s| self.eval(s, p, u), t)
    }

    /// Largest discrepancy between analytic and finite difference `u`
    /// derivatives at the given samples, relative to `1 + |analytic|`.
    pub fn derivative_cross_check(&self, samples: &[(f64, Point, f64)]) -> f64 {
        samples
            .iter()
            .map(|&(t, p, u)| {
                let a = self.du(t, p, u);
                let b = self.du_fd(t, p, u);
                let c = self.duu(t, p, u);
                let d = self.duu_fd(t, p, u);
                ((a - b).abs() / (1.0 + a.abs())).max((c - d).abs() / (1.0 + c.abs()))
            })
            .fold(0.0, f64::max)
    }
}

fn time_derivative(f: impl Fn(f64) -> f64, t: f64) -> f64 {
    let h = 1e-3 * t.abs().max(1.0);
    if t - 2.0 * h < 0.0 {
        let w = forward_weights(1, 4, h);
        w.iter().enumerate().map(|(j, c)| c * f(t + j as f64 * h)).sum()
    } else {
        five_point(f, t, h)
    }
}

/// Result of [`validate_class`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub growth_ok: bool,
    pub class_a_ok: bool,
    pub class_a_star_ok: bool,
    pub worst_ratio: f64,
}

/// Tolerance of the boundary vanishing checks, relative to `1 + |F|` scale.
pub const CLASS_TOL: f64 = 1e-9;

fn random_point(domain: &Domain, rng: &mut ChaCha8Rng) -> Point {
    match domain.shape {
        Shape::Interval { length } => [rng.gen_range(0.0..=length), 0.0],
        Shape::Rectangle { width, height } => [rng.gen_range(0.0..=width), rng.gen_range(0.0..=height)],
        Shape::Disk { radius } => loop {
            let p = [rng.gen_range(-radius..=radius), rng.gen_range(-radius..=radius)];
            if p[0].hypot(p[1]) <= radius {
                break p;
            }
        },
    }
}

fn random_boundary_point(domain: &Domain, rng: &mut ChaCha8Rng) -> Point {
    let param = match domain.shape {
        Shape::Interval { .. } => BoundaryParam::End { end: if rng.gen_bool(0.5) { Endpoint::Left } else { Endpoint::Right } },
        Shape::Rectangle { width, height } => {
            let face = [Face::Bottom, Face::Right, Face::Top, Face::Left][rng.gen_range(0..4)];
            let len = if matches!(face, Face::Bottom | Face::Top) { width } else { height };
            BoundaryParam::Face { face, s: rng.gen_range(0.0..=len) }
        }
        Shape::Disk { .. } => BoundaryParam::Angle { theta: rng.gen_range(0.0..std::f64::consts::TAU) },
    };
    domain.exp_boundary(&param, 0.0).expect("boundary parameter matches domain")
}

/// Sampled check of the growth bound and of the two boundary vanishing classes.
pub fn validate_class(
    f: &Nonlinearity,
    domain: &Domain,
    t_prime: f64,
    u_range: (f64, f64),
    samples: usize,
) -> Result<ClassReport> {
    if samples < 100 {
        return Err(Error::Config(format!("validate_class needs at least 100 samples, got {samples}")));
    }
    let (ulo, uhi) = u_range;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut pts: Vec<(f64, Point, f64)> = (0..samples)
        .map(|_| (rng.gen_range(0.0..=t_prime), random_point(domain, &mut rng), rng.gen_range(ulo..=uhi)))
        .collect();
    pts.push((0.0, random_point(domain, &mut rng), ulo));
    pts.push((t_prime, random_point(domain, &mut rng), uhi));
    let mut bpts: Vec<(Point, f64)> = (0..samples.max(100) / 4)
        .map(|_| (random_boundary_point(domain, &mut rng), rng.gen_range(ulo..=uhi)))
        .collect();
    bpts.push((random_boundary_point(domain, &mut rng), ulo));
    bpts.push((random_boundary_point(domain, &mut rng), uhi));

    let b = f.growth_b;
    let c1 = f.growth_c1;
    let hx = 1e-4;
    let dim = domain.dim();
    let ratios: Vec<Result<f64>> = pts
        .par_chunks(64)
        .map(|chunk| {
            let mut worst: f64 = 0.0;
            for &(t, p, u) in chunk {
                let derivs: [&dyn Fn(f64, Point) -> f64; 3] =
                    [&|s, q| f.eval(s, q, u), &|s, q| f.du(s, q, u), &|s, q| f.duu(s, q, u)];
                for (j, g) in derivs.iter().enumerate() {
                    let bound = c1 * (1.0 + u.abs().powf(b - j as f64));
                    let mut vals = vec![g(t, p), time_derivative(|s| g(s, p), t)];
                    for a in 0..dim {
                        vals.push(five_point(
                            |x| {
                                let mut q = p;
                                q[a] = x;
                                g(t, q)
                            },
                            p[a],
                            hx,
                        ));
                    }
                    for v in vals {
                        if !v.is_finite() {
                            return Err(Error::Evaluation { t, x: p[0], y: p[1], u });
                        }
                        worst = worst.max(v.abs() / bound);
                    }
                }
            }
            Ok(worst)
        })
        .collect();
    let mut worst_ratio: f64 = 0.0;
    for r in ratios {
        worst_ratio = worst_ratio.max(r?);
    }

    let vanishes = |p: Point, u: f64| -> Result<bool> {
        let v0 = f.eval(0.0, p, u);
        let v1 = f.dt(0.0, p, u);
        if !v0.is_finite() || !v1.is_finite() {
            return Err(Error::Evaluation { t: 0.0, x: p[0], y: p[1], u });
        }
        let scale = 1.0 + f.eval(t_prime.min(1.0), p, u).abs();
        Ok(v0.abs() <= CLASS_TOL * scale && v1.abs() <= 1e-6 * scale)
    };
    let mut class_a_ok = true;
    let mut class_a_star_ok = true;
    for &(p, u) in &bpts {
        class_a_ok &= vanishes(p, u)?;
        class_a_star_ok &= vanishes(p, 0.0)?;
    }
    Ok(ClassReport { growth_ok: worst_ratio <= 1.0, class_a_ok, class_a_star_ok, worst_ratio })
}

/// Analytic description of Dirichlet data `(f, u0, u1)`; `u0` and `u1` are
/// evaluated at `t = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSpec {
    pub f: Coefficient,
    pub u0: Coefficient,
    pub u1: Coefficient,
}

impl DataSpec {
    /// `(lambda, lambda, 0)`.
    pub fn constant(lambda: f64) -> Self {
        DataSpec { f: Coefficient::constant(lambda), u0: Coefficient::constant(lambda), u1: Coefficient::constant(0.0) }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        DataSpec { f: self.f.scaled(s), u0: self.u0.scaled(s), u1: self.u1.scaled(s) }
    }

    /// Sample on the boundary nodes for levels `0..=max(nt, nt')` and on all nodes at `t = 0`.
    pub fn sample(&self, grid: Arc<SpaceTimeGrid>) -> DirichletData {
        let levels = grid.nt.max(grid.nt_prime()) + 1;
        let sp = &grid.space;
        let coords = sp.coords();
        let mut f = Vec::with_capacity(levels * sp.boundary_nodes().len());
        for n in 0..levels {
            let t = grid.time(n);
            f.extend(sp.boundary_nodes().iter().map(|&b| self.f.eval(t, coords[b])));
        }
        let u0 = coords.iter().map(|&p| self.u0.eval(0.0, p)).collect();
        let u1 = coords.iter().map(|&p| self.u1.eval(0.0, p)).collect();
        DirichletData { grid, levels, f, u0, u1 }
    }
}

/// Sampled Dirichlet data: lateral trace at the boundary nodes of every time
/// level, plus initial position and velocity on all nodes.
#[derive(Debug, Clone)]
pub struct DirichletData {
    pub grid: Arc<SpaceTimeGrid>,
    pub levels: usize,
    /// `levels x nb` row-major, columns ordered as `grid.space.boundary_nodes()`.
    pub f: Vec<f64>,
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataReport {
    pub comp1_residuals: [f64; 5],
    pub comp1_ok: [bool; 5],
    pub comp2_residuals: [f64; 5],
    pub star_flag: bool,
    pub norm_low: f64,
    pub norm_high: f64,
}

/// Relative tolerances of the five compatibility identities (order 0..4),
/// scaled by `1 + sup` of the identity's two sides.
pub const COMPAT_TOL: [f64; 5] = [1e-10, 1e-6, 1e-3, 1e-2, 5e-2];

/// Relative tolerances for the vanishing of `d_t^k f(0)`, `k = 1..=5`.
pub const STAR_TOL: [f64; 5] = [1e-6, 1e-5, 1e-3, 1e-2, 5e-2];

impl DirichletData {
    pub fn new(grid: Arc<SpaceTimeGrid>, f: Vec<f64>, u0: Vec<f64>, u1: Vec<f64>) -> Result<Self> {
        let nb = grid.space.boundary_nodes().len();
        let ns = grid.ns();
        if f.len() % nb != 0 || f.len() / nb < grid.nt + 1 {
            return Err(Error::Shape(format!("lateral data has {} samples, need a multiple of {nb} covering {} levels", f.len(), grid.nt + 1)));
        }
        if u0.len() != ns || u1.len() != ns {
            return Err(Error::Shape(format!("initial data sizes {}, {} differ from grid size {ns}", u0.len(), u1.len())));
        }
        let levels = f.len() / nb;
        Ok(DirichletData { grid, levels, f, u0, u1 })
    }

    pub fn nb(&self) -> usize {
        self.grid.space.boundary_nodes().len()
    }

    /// `self + s * other`, componentwise.
    pub fn axpy(&self, s: f64, other: &DirichletData) -> Result<Self> {
        if self.f.len() != other.f.len() || self.u0.len() != other.u0.len() {
            return Err(Error::Shape("data sampled on different grids".into()));
        }
        let c = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + s * y).collect();
        Ok(DirichletData { grid: self.grid.clone(), levels: self.levels, f: c(&self.f, &other.f), u0: c(&self.u0, &other.u0), u1: c(&self.u1, &other.u1) })
    }

    pub fn has_initial_data(&self) -> bool {
        self.u0.iter().chain(&self.u1).any(|v| *v != 0.0)
    }

    pub fn f_at(&self, level: usize) -> &[f64] {
        let nb = self.nb();
        &self.f[level * nb..(level + 1) * nb]
    }

    /// Data restricted to a shorter horizon on the same grid spacing.
    pub fn on_grid(&self, grid: Arc<SpaceTimeGrid>) -> Result<Self> {
        if grid.dt != self.grid.dt || grid.ns() != self.grid.ns() {
            return Err(Error::Shape("data grid and target grid differ".into()));
        }
        let nb = self.nb();
        let levels = (grid.nt + 1).min(self.levels);
        if levels < grid.nt + 1 {
            return Err(Error::Shape("data do not cover the target horizon".into()));
        }
        Ok(DirichletData { grid, levels, f: self.f[..levels * nb].to_vec(), u0: self.u0.clone(), u1: self.u1.clone() })
    }

    /// Time derivatives `d_t^k f(0)` for `k = 0..=5` at each boundary node,
    /// from one-sided fourth order stencils.
    pub fn initial_time_derivatives(&self) -> Result<Vec<Vec<f64>>> {
        let nb = self.nb();
        let dt = self.grid.dt;
        (0..=5)
            .map(|k| {
                let w = forward_weights(k, 4, dt);
                if w.len() > self.levels {
                    return Err(Error::Shape(format!("need {} time levels for order {k} stencils", w.len())));
                }
                Ok((0..nb).map(|b| w.iter().enumerate().map(|(j, c)| c * self.f[j * nb + b]).sum()).collect())
            })
            .collect()
    }

    pub fn validate(&self) -> Result<DataReport> {
        let sp = &self.grid.space;
        let dts = self.initial_time_derivatives()?;
        let lap0 = sp.laplacian_extended(&self.u0);
        let lap1 = sp.laplacian_extended(&self.u1);
        let bilap0 = sp.laplacian_extended(&lap0);
        let traces = [&self.u0, &self.u1, &lap0, &lap1, &bilap0];
        let mut comp1_residuals = [0.0; 5];
        let mut comp1_ok = [true; 5];
        for k in 0..5 {
            let mut res: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for (i, &b) in sp.boundary_nodes().iter().enumerate() {
                res = res.max((dts[k][i] - traces[k][b]).abs());
                scale = scale.max(dts[k][i].abs()).max(traces[k][b].abs());
            }
            comp1_residuals[k] = res;
            comp1_ok[k] = res <= COMPAT_TOL[k] * (1.0 + scale);
        }
        let mut comp2_residuals = [0.0; 5];
        for k in 0..5 {
            comp2_residuals[k] = dts[k + 1].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        }
        let fscale = 1.0 + self.f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let initial_zero = self.u0.iter().chain(&self.u1).all(|v| v.abs() <= 1e-14);
        let star_flag = initial_zero
            && dts[0].iter().all(|v| v.abs() <= 1e-12 * fscale)
            && comp2_residuals.iter().zip(STAR_TOL).all(|(r, tol)| *r <= tol * fscale);
        Ok(DataReport {
            comp1_residuals,
            comp1_ok,
            comp2_residuals,
            star_flag,
            norm_low: self.norm_low(),
            norm_high: self.norm_high(),
        })
    }

    fn lateral_norm(&self, order: usize) -> f64 {
        let sp = &self.grid.space;
        let nb = self.nb();
        let dt = self.grid.dt;
        let levels = self.levels;
        let bw = sp.boundary_weights();
        let coords = sp.coords();
        let bn = sp.boundary_nodes();
        let closed = sp.domain.dim() == 2;
        // repeated differences along time and along the boundary loop
        let diff_t = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for n in 0..levels {
                for b in 0..nb {
                    let (a, c, h) = if n == 0 {
                        (0, 1, dt)
                    } else if n == levels - 1 {
                        (n - 1, n, dt)
                    } else {
                        (n - 1, n + 1, 2.0 * dt)
                    };
                    out[n * nb + b] = (v[c * nb + b] - v[a * nb + b]) / h;
                }
            }
            out
        };
        let diff_s = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for n in 0..levels {
                for b in 0..nb {
                    let bp = (b + 1) % nb;
                    let bm = (b + nb - 1) % nb;
                    let d = |i: usize, j: usize| {
                        let (p, q) = (coords[bn[i]], coords[bn[j]]);
                        (p[0] - q[0]).hypot(p[1] - q[1])
                    };
                    out[n * nb + b] = (v[n * nb + bp] - v[n * nb + bm]) / (d(bp, b) + d(b, bm));
                }
            }
            out
        };
        let sq = |v: &[f64]| -> f64 {
            let mut s = 0.0;
            for n in 0..levels {
                let wt = if n == 0 || n == levels - 1 { 0.5 * dt } else { dt };
                for b in 0..nb {
                    s += wt * bw[b] * v[n * nb + b].powi(2);
                }
            }
            s
        };
        let mut layer = vec![self.f.clone()];
        let mut total = sq(&self.f);
        for _ in 0..order {
            let mut next = Vec::new();
            for v in &layer {
                next.push(diff_t(v));
                if closed {
                    next.push(diff_s(v));
                }
            }
            total += next.iter().map(|v| sq(v)).sum::<f64>();
            layer = next;
        }
        total
    }

    fn interior_norm(&self, u: &[f64], order: usize) -> f64 {
        let sp = &self.grid.space;
        let mut total = sp.l2_norm(u).powi(2);
        let mut cur = u.to_vec();
        for k in 1..=order {
            if k % 2 == 1 {
                total += sp.integrate(&sp.grad_sq(&cur));
            } else {
                cur = sp.laplacian_extended(&cur);
                total += sp.l2_norm(&cur).powi(2);
            }
        }
        total
    }

    /// Integer-order surrogate of the low data norm (order two throughout).
    pub fn norm_low(&self) -> f64 {
        (self.lateral_norm(2) + self.interior_norm(&self.u0, 2) + self.interior_norm(&self.u1, 2)).sqrt()
    }

    /// Integer-order surrogate of the high data norm (order three throughout).
    pub fn norm_high(&self) -> f64 {
        (self.lateral_norm(3) + self.interior_norm(&self.u0, 3) + self.interior_norm(&self.u1, 3)).sqrt()
    }
}

pub fn validate_data(data: &DirichletData) -> Result<DataReport> {
    data.validate()
}

/// Options of [`estimate_existence_time`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExistenceOptions {
    /// Cap on the tracked energy norms; `None` means `10 L`.
    pub norm_cap: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub bisection_steps: usize,
    pub p: f64,
}

impl Default for ExistenceOptions {
    fn default() -> Self {
        ExistenceOptions { norm_cap: None, max_iters: 60, tol: 1e-9, bisection_steps: 12, p: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceEstimate {
    pub t1: f64,
    pub warning: Option<String>,
    pub tested: Vec<(f64, bool)>,
}

/// Default stress battery: a few smooth data shapes on the given domain,
/// each rescaled to `norm_low = level`.
pub fn stress_battery(domain: &Domain) -> Vec<DataSpec> {
    let mut shapes = vec![DataSpec::constant(1.0)];
    let (k, l) = match domain.shape {
        Shape::Interval { length } => (std::f64::consts::PI / length, 0.0),
        Shape::Rectangle { width, height } => (std::f64::consts::PI / width, std::f64::consts::PI / height),
        Shape::Disk { radius } => (std::f64::consts::FRAC_PI_2 / radius, std::f64::consts::FRAC_PI_2 / radius),
    };
    let mode = Coefficient::product(vec![
        Coefficient::space(SpaceProfile::sin_x(k)),
        Coefficient::space(if l > 0.0 { SpaceProfile::Trig { kx: 0.0, px: 0.0, ky: l, py: -std::f64::consts::FRAC_PI_2 } } else { SpaceProfile::Trig { kx: 0.0, px: 0.0, ky: 0.0, py: 0.0 } }),
    ]);
    if matches!(domain.shape, Shape::Disk { .. }) {
        let cap = Coefficient::space(SpaceProfile::Trig { kx: k, px: 0.0, ky: l, py: 0.0 });
        shapes.push(DataSpec { f: Coefficient::constant(0.0), u0: Coefficient::constant(0.0), u1: cap });
    } else {
        shapes.push(DataSpec { f: Coefficient::constant(0.0), u0: Coefficient::constant(0.0), u1: mode.clone() });
        shapes.push(DataSpec { f: Coefficient::constant(0.0), u0: mode, u1: Coefficient::constant(0.0) });
    }
    shapes
}

fn battery_for_level(domain: &Domain, level: f64, grid: &Arc<SpaceTimeGrid>) -> Vec<DataSpec> {
    stress_battery(domain)
        .into_iter()
        .map(|s| {
            let n = s.sample(grid.clone()).norm_low();
            if n > 0.0 { s.scaled(level / n) } else { s }
        })
        .collect()
}

/// Empirical existence horizon for data with `norm_low <= level`.
pub fn estimate_existence_time(
    f: &Nonlinearity,
    level: f64,
    grid: &SpaceTimeGrid,
    opts: &ExistenceOptions,
) -> Result<ExistenceEstimate> {
    if !(level > 0.0) {
        return Err(Error::Config(format!("data level must be positive, got {level}")));
    }
    let full = Arc::new(SpaceTimeGrid::with_dt(grid.space.clone(), grid.dt, grid.t_prime, grid.t_prime)?);
    let battery = battery_for_level(&grid.space.domain, level, &full);
    let cap = opts.norm_cap.unwrap_or(10.0 * level);
    estimate_existence_time_battery(f, &battery, grid, cap, opts)
}

/// Bisection on the horizon for a fixed battery of data.
pub fn estimate_existence_time_battery(
    f: &Nonlinearity,
    battery: &[DataSpec],
    grid: &SpaceTimeGrid,
    norm_cap: f64,
    opts: &ExistenceOptions,
) -> Result<ExistenceEstimate> {
    use crate::forward::{energy_norms, picard_duhamel_solve, PicardOptions};
    let t_prime = grid.t_prime;
    let dt = grid.dt;
    let mut tested = Vec::new();
    let survives = |t: f64| -> Result<bool> {
        let g = Arc::new(SpaceTimeGrid::with_dt(grid.space.clone(), dt, t, t_prime)?);
        for spec in battery {
            let data = spec.sample(g.clone());
            let popts = PicardOptions { max_iters: opts.max_iters, tol: opts.tol, modes: None };
            match picard_duhamel_solve(f, &data, &popts) {
                Ok(out) => {
                    let sup = out.field.re.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let norms = energy_norms(&out.field, opts.p)?;
                    if !sup.is_finite() || sup > crate::forward::DEFAULT_BLOWUP_THRESHOLD || norms.c_h1 + norms.lp_l2p > norm_cap {
                        return Ok(false);
                    }
                }
                Err(Error::Divergence { .. }) | Err(Error::BlowUp { .. }) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    };
    let ok = survives(t_prime)?;
    tested.push((t_prime, ok));
    if ok {
        return Ok(ExistenceEstimate { t1: t_prime, warning: None, tested });
    }
    let mut lo = 0.0;
    let mut hi = t_prime;
    for _ in 0..opts.bisection_steps {
        let mid = 0.5 * (lo + hi);
        if mid < 8.0 * dt {
            break;
        }
        let ok = survives(mid)?;
        tested.push((mid, ok));
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= dt {
            break;
        }
    }
    if lo == 0.0 {
        let t1 = hi.min(8.0 * dt).max(dt);
        return Ok(ExistenceEstimate {
            t1,
            warning: Some(format!("battery failed at every tested horizon; returning {t1:.3e}")),
            tested,
        });
    }
    Ok(ExistenceEstimate { t1: lo, warning: None, tested })
}
