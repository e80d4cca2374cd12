//! Spatial domains, boundary normal coordinates and discrete grids.
//!
//! Three flat domains are supported: an interval `[0, l]`, an axis-aligned
//! rectangle `[0, w] x [0, h]` and a disk of radius `r0` centred at the
//! origin. Points are always `[f64; 2]`; the second coordinate is ignored
//! for the interval.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

const MEMBERSHIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Interval { length: f64 },
    Rectangle { width: f64, height: f64 },
    Disk { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Left,
    Right,
}

/// Rectangle faces. The face parameter is the free Cartesian coordinate
/// (x on bottom/top, y on left/right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    Bottom,
    Right,
    Top,
    Left,
}

/// Boundary coordinate `x'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryParam {
    End { end: Endpoint },
    Face { face: Face, s: f64 },
    /// Polar angle in `[0, 2 pi)`.
    Angle { theta: f64 },
}

/// An open portion `gamma` of the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryPortion {
    Endpoints { left: bool, right: bool },
    FaceSegment { face: Face, start: f64, end: f64 },
    /// Counter-clockwise arc from `start` to `end` (radians, `end > start`).
    Arc { start: f64, end: f64 },
    Whole,
}

impl BoundaryPortion {
    pub fn contains(&self, p: &BoundaryParam) -> bool {
        match (self, p) {
            (BoundaryPortion::Whole, _) => true,
            (BoundaryPortion::Endpoints { left, right }, BoundaryParam::End { end }) => match end {
                Endpoint::Left => *left,
                Endpoint::Right => *right,
            },
            (BoundaryPortion::FaceSegment { face, start, end }, BoundaryParam::Face { face: f, s }) => {
                face == f && *s > *start && *s < *end
            }
            (BoundaryPortion::Arc { start, end }, BoundaryParam::Angle { theta }) => {
                let rel = (theta - start).rem_euclid(2.0 * PI);
                rel > 0.0 && rel < end - start
            }
            _ => false,
        }
    }

    /// Distance (in the boundary parameter) from `p` to the complement of
    /// the portion; zero when `p` is outside.
    pub fn interior_margin(&self, p: &BoundaryParam) -> f64 {
        if !self.contains(p) {
            return 0.0;
        }
        match (self, p) {
            (BoundaryPortion::FaceSegment { start, end, .. }, BoundaryParam::Face { s, .. }) => {
                (s - start).min(end - s)
            }
            (BoundaryPortion::Arc { start, end }, BoundaryParam::Angle { theta }) => {
                let rel = (theta - start).rem_euclid(2.0 * PI);
                rel.min(end - start - rel)
            }
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub shape: Shape,
    #[serde(default)]
    pub portions: BTreeMap<String, BoundaryPortion>,
    pub collar_width: f64,
}

impl Domain {
    pub fn new(shape: Shape, collar_width: f64) -> Result<Self> {
        let extents_ok = match shape {
            Shape::Interval { length } => length > 0.0,
            Shape::Rectangle { width, height } => width > 0.0 && height > 0.0,
            Shape::Disk { radius } => radius > 0.0,
        };
        if !extents_ok {
            return Err(Error::Config(format!("non-positive extent in {shape:?}")));
        }
        let d = Domain { shape, portions: BTreeMap::new(), collar_width };
        d.check_collar()?;
        Ok(d)
    }

    /// Domain with the default collar (three quarters of the injectivity threshold).
    pub fn with_default_collar(shape: Shape) -> Result<Self> {
        let tmp = Domain { shape, portions: BTreeMap::new(), collar_width: 0.0 };
        Domain::new(shape, 0.75 * tmp.injectivity_threshold())
    }

    pub fn interval(length: f64) -> Result<Self> {
        Self::with_default_collar(Shape::Interval { length })
    }

    pub fn rectangle(width: f64, height: f64) -> Result<Self> {
        Self::with_default_collar(Shape::Rectangle { width, height })
    }

    pub fn disk(radius: f64) -> Result<Self> {
        Self::with_default_collar(Shape::Disk { radius })
    }

    pub fn with_portion(mut self, name: &str, portion: BoundaryPortion) -> Result<Self> {
        self.check_portion(&portion)?;
        self.portions.insert(name.to_string(), portion);
        Ok(self)
    }

    pub fn portion(&self, name: &str) -> Result<&BoundaryPortion> {
        self.portions
            .get(name)
            .ok_or_else(|| Error::Geometry(format!("unknown boundary portion `{name}`")))
    }

    pub fn check_portion(&self, portion: &BoundaryPortion) -> Result<()> {
        let ok = match (&self.shape, portion) {
            (_, BoundaryPortion::Whole) => true,
            (Shape::Interval { .. }, BoundaryPortion::Endpoints { left, right }) => *left || *right,
            (Shape::Rectangle { width, height }, BoundaryPortion::FaceSegment { face, start, end }) => {
                let len = match face {
                    Face::Bottom | Face::Top => *width,
                    Face::Left | Face::Right => *height,
                };
                *start >= 0.0 && end > start && *end <= len
            }
            (Shape::Disk { .. }, BoundaryPortion::Arc { start, end }) => {
                end > start && end - start <= 2.0 * PI
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "boundary portion {portion:?} is not a nonempty open subset of the boundary of {:?}",
                self.shape
            )))
        }
    }

    fn check_collar(&self) -> Result<()> {
        let limit = self.injectivity_threshold();
        if !(self.collar_width > 0.0 && self.collar_width < limit) {
            return Err(Error::Config(format!(
                "collar width {} must lie in (0, {limit})",
                self.collar_width
            )));
        }
        Ok(())
    }

    /// Upper bound for the collar width on which the normal map is injective.
    pub fn injectivity_threshold(&self) -> f64 {
        match self.shape {
            Shape::Interval { length } => 0.5 * length,
            Shape::Rectangle { width, height } => 0.5 * width.min(height),
            Shape::Disk { radius } => radius,
        }
    }

    pub fn dim(&self) -> usize {
        match self.shape {
            Shape::Interval { .. } => 1,
            _ => 2,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        let tol = MEMBERSHIP_TOL;
        match self.shape {
            Shape::Interval { length } => p[0] >= -tol && p[0] <= length + tol,
            Shape::Rectangle { width, height } => {
                p[0] >= -tol && p[0] <= width + tol && p[1] >= -tol && p[1] <= height + tol
            }
            Shape::Disk { radius } => p[0].hypot(p[1]) <= radius + tol,
        }
    }

    fn require(&self, p: Point) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutsideDomain { x: p[0], y: p[1] })
        }
    }

    /// `dist(x, boundary)`.
    pub fn boundary_distance(&self, p: Point) -> Result<f64> {
        self.require(p)?;
        let d = match self.shape {
            Shape::Interval { length } => p[0].min(length - p[0]),
            Shape::Rectangle { width, height } => {
                p[0].min(width - p[0]).min(p[1]).min(height - p[1])
            }
            Shape::Disk { radius } => radius - p[0].hypot(p[1]),
        };
        Ok(d.max(0.0))
    }

    /// Boundary normal coordinates `(x', x_n)` of a collar point.
    pub fn boundary_normal_coords(&self, p: Point) -> Result<(BoundaryParam, f64)> {
        let xn = self.boundary_distance(p)?;
        if xn >= self.collar_width {
            return Err(Error::OutsideCollar { depth: xn, collar: self.collar_width });
        }
        let param = match self.shape {
            Shape::Interval { length } => {
                let end = if p[0] <= length - p[0] { Endpoint::Left } else { Endpoint::Right };
                BoundaryParam::End { end }
            }
            Shape::Rectangle { width, height } => {
                // ties resolved in the order bottom, right, top, left
                let cands = [
                    (p[1], Face::Bottom, p[0]),
                    (width - p[0], Face::Right, p[1]),
                    (height - p[1], Face::Top, p[0]),
                    (p[0], Face::Left, p[1]),
                ];
                let mut best = cands[0];
                for c in &cands[1..] {
                    if c.0 < best.0 {
                        best = *c;
                    }
                }
                BoundaryParam::Face { face: best.1, s: best.2.clamp(0.0, if matches!(best.1, Face::Bottom | Face::Top) { width } else { height }) }
            }
            Shape::Disk { .. } => {
                let theta = if p[0] == 0.0 && p[1] == 0.0 { 0.0 } else { p[1].atan2(p[0]).rem_euclid(2.0 * PI) };
                BoundaryParam::Angle { theta }
            }
        };
        Ok((param, xn))
    }

    /// The boundary normal map `exp_{dM}(x', x_n)`.
    pub fn exp_boundary(&self, param: &BoundaryParam, xn: f64) -> Result<Point> {
        if xn < 0.0 || xn >= self.collar_width {
            return Err(Error::OutsideCollar { depth: xn, collar: self.collar_width });
        }
        match (self.shape, param) {
            (Shape::Interval { length }, BoundaryParam::End { end }) => Ok(match end {
                Endpoint::Left => [xn, 0.0],
                Endpoint::Right => [length - xn, 0.0],
            }),
            (Shape::Rectangle { width, height }, BoundaryParam::Face { face, s }) => Ok(match face {
                Face::Bottom => [*s, xn],
                Face::Top => [*s, height - xn],
                Face::Left => [xn, *s],
                Face::Right => [width - xn, *s],
            }),
            (Shape::Disk { radius }, BoundaryParam::Angle { theta }) => {
                let r = radius - xn;
                Ok([r * theta.cos(), r * theta.sin()])
            }
            _ => Err(Error::Geometry(format!("boundary parameter {param:?} does not belong to {:?}", self.shape))),
        }
    }

    /// Outward unit normal at a boundary point.
    pub fn outward_normal(&self, param: &BoundaryParam) -> Result<Point> {
        match (self.shape, param) {
            (Shape::Interval { .. }, BoundaryParam::End { end }) => Ok(match end {
                Endpoint::Left => [-1.0, 0.0],
                Endpoint::Right => [1.0, 0.0],
            }),
            (Shape::Rectangle { .. }, BoundaryParam::Face { face, .. }) => Ok(match face {
                Face::Bottom => [0.0, -1.0],
                Face::Top => [0.0, 1.0],
                Face::Left => [-1.0, 0.0],
                Face::Right => [1.0, 0.0],
            }),
            (Shape::Disk { .. }, BoundaryParam::Angle { theta }) => Ok([theta.cos(), theta.sin()]),
            _ => Err(Error::Geometry(format!("boundary parameter {param:?} does not belong to {:?}", self.shape))),
        }
    }

    /// `det g0(x', x_n)` of the induced metric on the parallel hypersurface,
    /// with arc length as the boundary parameter.
    pub fn metric_factor_beta(&self, _param: &BoundaryParam, xn: f64) -> Result<f64> {
        if xn < 0.0 || xn >= self.collar_width {
            return Err(Error::OutsideCollar { depth: xn, collar: self.collar_width });
        }
        Ok(match self.shape {
            Shape::Interval { .. } | Shape::Rectangle { .. } => 1.0,
            Shape::Disk { radius } => ((radius - xn) / radius).powi(2),
        })
    }

    /// `d/dx_n log sqrt(beta)`, which equals the Laplacian of the distance
    /// function inside the collar.
    pub fn log_sqrt_beta_slope(&self, xn: f64) -> f64 {
        match self.shape {
            Shape::Disk { radius } => -1.0 / (radius - xn),
            _ => 0.0,
        }
    }

    /// Derivative in `x_n` of [`Domain::log_sqrt_beta_slope`].
    pub fn log_sqrt_beta_curvature(&self, xn: f64) -> f64 {
        match self.shape {
            Shape::Disk { radius } => -1.0 / (radius - xn).powi(2),
            _ => 0.0,
        }
    }

    /// Arc length coordinate of a boundary parameter.
    pub fn arc_length(&self, param: &BoundaryParam) -> f64 {
        match (self.shape, param) {
            (_, BoundaryParam::End { .. }) => 0.0,
            (_, BoundaryParam::Face { s, .. }) => *s,
            (Shape::Disk { radius }, BoundaryParam::Angle { theta }) => radius * theta,
            _ => 0.0,
        }
    }

    /// Inverse of [`Domain::arc_length`] for a fixed face/endpoint family.
    pub fn param_from_arc(&self, like: &BoundaryParam, s: f64) -> BoundaryParam {
        match (self.shape, like) {
            (_, BoundaryParam::End { end }) => BoundaryParam::End { end: *end },
            (_, BoundaryParam::Face { face, .. }) => BoundaryParam::Face { face: *face, s },
            (Shape::Disk { radius }, BoundaryParam::Angle { .. }) => {
                BoundaryParam::Angle { theta: (s / radius).rem_euclid(2.0 * PI) }
            }
            _ => *like,
        }
    }
}

/// Node layout of a spatial grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Line { n: usize, dx: f64 },
    Cartesian { nx: usize, ny: usize, dx: f64, dy: f64 },
    /// Polar nodes `(r_in + i dr, theta_j)`. With `r_in = 0` ring 0 holds `ntheta`
    /// copies of the centre; otherwise ring 0 is an inner circle held fixed.
    Polar {
        nr: usize,
        ntheta: usize,
        dr: f64,
        dtheta: f64,
        #[serde(default)]
        r_in: f64,
    },
}

/// Discretisation of a [`Domain`] with quadrature and boundary bookkeeping.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    pub domain: Domain,
    pub layout: Layout,
    coords: Vec<Point>,
    is_boundary: Vec<bool>,
    weights: Vec<f64>,
    boundary_nodes: Vec<usize>,
    boundary_params: Vec<BoundaryParam>,
    boundary_weights: Vec<f64>,
    /// first, second inward neighbours along the normal, and their spacing
    normal_stencil: Vec<([usize; 2], f64)>,
    /// four inward nodes used for cubic extrapolation to the boundary
    extrapolation: Vec<[usize; 4]>,
}

impl SpatialGrid {
    /// Uniform grid with `n` points per axis (radial and angular count for the disk: `n` and `4(n-1)`).
    pub fn new(domain: &Domain, n: usize) -> Result<Self> {
        match domain.shape {
            Shape::Interval { .. } => Self::line(domain, n),
            Shape::Rectangle { width, height } => {
                let h = width.min(height) / (n - 1) as f64;
                let nx = (width / h).round() as usize + 1;
                let ny = (height / h).round() as usize + 1;
                Self::cartesian(domain, nx.max(n), ny.max(n))
            }
            Shape::Disk { .. } => Self::polar(domain, n, 4 * (n - 1)),
        }
    }

    /// Grid whose spacing does not exceed `h`.
    pub fn with_spacing(domain: &Domain, h: f64) -> Result<Self> {
        match domain.shape {
            Shape::Interval { length } => Self::line(domain, ((length / h).ceil() as usize + 1).max(8)),
            Shape::Rectangle { width, height } => Self::cartesian(
                domain,
                ((width / h).ceil() as usize + 1).max(8),
                ((height / h).ceil() as usize + 1).max(8),
            ),
            Shape::Disk { radius } => {
                let nr = ((radius / h).ceil() as usize + 1).max(8);
                let nth = ((2.0 * PI * radius / h).ceil() as usize).max(8);
                Self::polar(domain, nr, nth)
            }
        }
    }

    pub fn from_layout(domain: &Domain, layout: Layout) -> Result<Self> {
        match layout {
            Layout::Line { n, .. } => Self::line(domain, n),
            Layout::Cartesian { nx, ny, .. } => Self::cartesian(domain, nx, ny),
            Layout::Polar { nr, ntheta, r_in, .. } => Self::annulus(domain, r_in, nr, ntheta),
        }
    }

    pub fn line(domain: &Domain, n: usize) -> Result<Self> {
        let Shape::Interval { length } = domain.shape else {
            return Err(Error::Config("line layout requires an interval".into()));
        };
        if n < 8 {
            return Err(Error::Config(format!("need at least 8 points per axis, got {n}")));
        }
        let dx = length / (n - 1) as f64;
        let coords = (0..n).map(|i| [i as f64 * dx, 0.0]).collect();
        let mut is_boundary = vec![false; n];
        is_boundary[0] = true;
        is_boundary[n - 1] = true;
        let mut weights = vec![dx; n];
        weights[0] = 0.5 * dx;
        weights[n - 1] = 0.5 * dx;
        Ok(SpatialGrid {
            domain: domain.clone(),
            layout: Layout::Line { n, dx },
            coords,
            is_boundary,
            weights,
            boundary_nodes: vec![0, n - 1],
            boundary_params: vec![
                BoundaryParam::End { end: Endpoint::Left },
                BoundaryParam::End { end: Endpoint::Right },
            ],
            boundary_weights: vec![1.0, 1.0],
            normal_stencil: vec![([1, 2], dx), ([n - 2, n - 3], dx)],
            extrapolation: vec![[1, 2, 3, 4], [n - 2, n - 3, n - 4, n - 5]],
        })
    }

    pub fn cartesian(domain: &Domain, nx: usize, ny: usize) -> Result<Self> {
        let Shape::Rectangle { width, height } = domain.shape else {
            return Err(Error::Config("cartesian layout requires a rectangle".into()));
        };
        if nx < 8 || ny < 8 {
            return Err(Error::Config(format!("need at least 8 points per axis, got {nx}x{ny}")));
        }
        let dx = width / (nx - 1) as f64;
        let dy = height / (ny - 1) as f64;
        let idx = |i: usize, j: usize| j * nx + i;
        let mut coords = Vec::with_capacity(nx * ny);
        let mut is_boundary = Vec::with_capacity(nx * ny);
        let mut weights = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                coords.push([i as f64 * dx, j as f64 * dy]);
                let bi = i == 0 || i == nx - 1;
                let bj = j == 0 || j == ny - 1;
                is_boundary.push(bi || bj);
                let wx = if bi { 0.5 * dx } else { dx };
                let wy = if bj { 0.5 * dy } else { dy };
                weights.push(wx * wy);
            }
        }
        let mut boundary_nodes = Vec::new();
        let mut boundary_params = Vec::new();
        let mut boundary_weights = Vec::new();
        let mut normal_stencil = Vec::new();
        let mut extrapolation = Vec::new();
        let corner_w = 0.5 * (dx + dy);
        // bottom, including both bottom corners
        for i in 0..nx {
            boundary_nodes.push(idx(i, 0));
            boundary_params.push(BoundaryParam::Face { face: Face::Bottom, s: i as f64 * dx });
            boundary_weights.push(if i == 0 || i == nx - 1 { corner_w } else { dx });
            normal_stencil.push(([idx(i, 1), idx(i, 2)], dy));
            extrapolation.push(corner_or(i, 0, nx, ny, [idx(i, 1), idx(i, 2), idx(i, 3), idx(i, 4)], &idx));
        }
        for j in 1..ny {
            boundary_nodes.push(idx(nx - 1, j));
            boundary_params.push(BoundaryParam::Face { face: Face::Right, s: j as f64 * dy });
            boundary_weights.push(if j == ny - 1 { corner_w } else { dy });
            normal_stencil.push(([idx(nx - 2, j), idx(nx - 3, j)], dx));
            extrapolation.push(corner_or(nx - 1, j, nx, ny, [idx(nx - 2, j), idx(nx - 3, j), idx(nx - 4, j), idx(nx - 5, j)], &idx));
        }
        for i in (0..nx - 1).rev() {
            boundary_nodes.push(idx(i, ny - 1));
            boundary_params.push(BoundaryParam::Face { face: Face::Top, s: i as f64 * dx });
            boundary_weights.push(if i == 0 { corner_w } else { dx });
            normal_stencil.push(([idx(i, ny - 2), idx(i, ny - 3)], dy));
            extrapolation.push(corner_or(i, ny - 1, nx, ny, [idx(i, ny - 2), idx(i, ny - 3), idx(i, ny - 4), idx(i, ny - 5)], &idx));
        }
        for j in (1..ny - 1).rev() {
            boundary_nodes.push(idx(0, j));
            boundary_params.push(BoundaryParam::Face { face: Face::Left, s: j as f64 * dy });
            boundary_weights.push(dy);
            normal_stencil.push(([idx(1, j), idx(2, j)], dx));
            extrapolation.push([idx(1, j), idx(2, j), idx(3, j), idx(4, j)]);
        }
        Ok(SpatialGrid {
            domain: domain.clone(),
            layout: Layout::Cartesian { nx, ny, dx, dy },
            coords,
            is_boundary,
            weights,
            boundary_nodes,
            boundary_params,
            boundary_weights,
            normal_stencil,
            extrapolation,
        })
    }

    pub fn polar(domain: &Domain, nr: usize, ntheta: usize) -> Result<Self> {
        Self::annulus(domain, 0.0, nr, ntheta)
    }

    /// Polar grid of the ring `r_in <= r <= R` of a disk; the inner circle is not
    /// part of the boundary and its nodes are never updated.
    pub fn annulus(domain: &Domain, r_in: f64, nr: usize, ntheta: usize) -> Result<Self> {
        let Shape::Disk { radius } = domain.shape else {
            return Err(Error::Config("polar layout requires a disk".into()));
        };
        if nr < 8 || ntheta < 8 {
            return Err(Error::Config(format!("need at least 8 points per axis, got {nr}x{ntheta}")));
        }
        if !(0.0..radius).contains(&r_in) {
            return Err(Error::Config(format!("inner radius {r_in} must lie in [0, {radius})")));
        }
        let dr = (radius - r_in) / (nr - 1) as f64;
        let dtheta = 2.0 * PI / ntheta as f64;
        let idx = |i: usize, j: usize| i * ntheta + j;
        let mut coords = Vec::with_capacity(nr * ntheta);
        let mut is_boundary = Vec::with_capacity(nr * ntheta);
        let mut weights = Vec::with_capacity(nr * ntheta);
        for i in 0..nr {
            let r = r_in + i as f64 * dr;
            for j in 0..ntheta {
                let th = j as f64 * dtheta;
                coords.push([r * th.cos(), r * th.sin()]);
                is_boundary.push(i == nr - 1 || (i == 0 && r_in > 0.0));
                let w = if i == 0 && r_in > 0.0 {
                    r * 0.5 * dr * dtheta
                } else if i == 0 {
                    PI * (0.5 * dr).powi(2) / ntheta as f64
                } else if i == nr - 1 {
                    r * 0.5 * dr * dtheta
                } else {
                    r * dr * dtheta
                };
                weights.push(w);
            }
        }
        let mut boundary_nodes = Vec::new();
        let mut boundary_params = Vec::new();
        let mut boundary_weights = Vec::new();
        let mut normal_stencil = Vec::new();
        let mut extrapolation = Vec::new();
        for j in 0..ntheta {
            boundary_nodes.push(idx(nr - 1, j));
            boundary_params.push(BoundaryParam::Angle { theta: j as f64 * dtheta });
            boundary_weights.push(radius * dtheta);
            normal_stencil.push(([idx(nr - 2, j), idx(nr - 3, j)], dr));
            extrapolation.push([idx(nr - 2, j), idx(nr - 3, j), idx(nr - 4, j), idx(nr - 5, j)]);
        }
        Ok(SpatialGrid {
            domain: domain.clone(),
            layout: Layout::Polar { nr, ntheta, dr, dtheta, r_in },
            coords,
            is_boundary,
            weights,
            boundary_nodes,
            boundary_params,
            boundary_weights,
            normal_stencil,
            extrapolation,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.is_boundary[node]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn boundary_params(&self) -> &[BoundaryParam] {
        &self.boundary_params
    }

    pub fn boundary_weights(&self) -> &[f64] {
        &self.boundary_weights
    }

    /// Largest spacing over the axes.
    pub fn max_spacing(&self) -> f64 {
        match self.layout {
            Layout::Line { dx, .. } => dx,
            Layout::Cartesian { dx, dy, .. } => dx.max(dy),
            Layout::Polar { nr, dr, dtheta, r_in, .. } => dr.max((r_in + (nr - 1) as f64 * dr) * dtheta),
        }
    }

    /// Largest stable leapfrog step for the free wave operator.
    pub fn stable_dt(&self) -> f64 {
        match self.layout {
            Layout::Line { dx, .. } => dx,
            Layout::Cartesian { dx, dy, .. } => 1.0 / (1.0 / (dx * dx) + 1.0 / (dy * dy)).sqrt(),
            Layout::Polar { dr, dtheta, r_in, .. } => {
                let ring = (r_in + dr) * dtheta;
                1.0 / (1.0 / (dr * dr) + 1.0 / (ring * ring)).sqrt()
            }
        }
    }

    /// Discrete Laplacian at interior nodes; boundary entries are set to zero.
    pub fn laplacian(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.len());
        match self.layout {
            Layout::Line { n, dx } => {
                let c = 1.0 / (dx * dx);
                out[0] = 0.0;
                out[n - 1] = 0.0;
                for i in 1..n - 1 {
                    out[i] = (u[i - 1] - 2.0 * u[i] + u[i + 1]) * c;
                }
            }
            Layout::Cartesian { nx, ny, dx, dy } => {
                let cx = 1.0 / (dx * dx);
                let cy = 1.0 / (dy * dy);
                out.iter_mut().for_each(|v| *v = 0.0);
                for j in 1..ny - 1 {
                    let row = j * nx;
                    for i in 1..nx - 1 {
                        let k = row + i;
                        out[k] = (u[k - 1] - 2.0 * u[k] + u[k + 1]) * cx
                            + (u[k - nx] - 2.0 * u[k] + u[k + nx]) * cy;
                    }
                }
            }
            Layout::Polar { nr, ntheta, dr, dtheta, r_in } => {
                let centre = if r_in > 0.0 {
                    0.0
                } else {
                    let ring1: f64 = u[ntheta..2 * ntheta].iter().sum::<f64>() / ntheta as f64;
                    4.0 * (ring1 - u[0]) / (dr * dr)
                };
                for v in out[..ntheta].iter_mut() {
                    *v = centre;
                }
                for i in 1..nr - 1 {
                    let r = r_in + i as f64 * dr;
                    let rp = r + 0.5 * dr;
                    let rm = r - 0.5 * dr;
                    for j in 0..ntheta {
                        let k = i * ntheta + j;
                        let jp = i * ntheta + (j + 1) % ntheta;
                        let jm = i * ntheta + (j + ntheta - 1) % ntheta;
                        let radial = (rp * (u[k + ntheta] - u[k]) - rm * (u[k] - u[k - ntheta])) / (r * dr * dr);
                        let angular = (u[jp] - 2.0 * u[k] + u[jm]) / (r * r * dtheta * dtheta);
                        out[k] = radial + angular;
                    }
                }
                for v in out[(nr - 1) * ntheta..].iter_mut() {
                    *v = 0.0;
                }
            }
        }
    }

    /// Squared gradient magnitude at every node (centred in the interior,
    /// one-sided second order at the edges).
    pub fn grad_sq(&self, u: &[f64]) -> Vec<f64> {
        fn d1(u: &[f64], k: usize, stride: usize, i: usize, n: usize, h: f64) -> f64 {
            if i == 0 {
                (-3.0 * u[k] + 4.0 * u[k + stride] - u[k + 2 * stride]) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * u[k] - 4.0 * u[k - stride] + u[k - 2 * stride]) / (2.0 * h)
            } else {
                (u[k + stride] - u[k - stride]) / (2.0 * h)
            }
        }
        match self.layout {
            Layout::Line { n, dx } => (0..n).map(|i| d1(u, i, 1, i, n, dx).powi(2)).collect(),
            Layout::Cartesian { nx, ny, dx, dy } => {
                let mut g = vec![0.0; nx * ny];
                for j in 0..ny {
                    for i in 0..nx {
                        let k = j * nx + i;
                        g[k] = d1(u, k, 1, i, nx, dx).powi(2) + d1(u, k, nx, j, ny, dy).powi(2);
                    }
                }
                g
            }
            Layout::Polar { nr, ntheta, dr, dtheta, r_in } => {
                let mut g = vec![0.0; nr * ntheta];
                for i in 0..nr {
                    for j in 0..ntheta {
                        let k = i * ntheta + j;
                        if i == 0 && r_in == 0.0 {
                            // centre: gradient from the first ring
                            let mut gx = 0.0;
                            let mut gy = 0.0;
                            for jj in 0..ntheta {
                                let th = jj as f64 * dtheta;
                                let v = u[ntheta + jj] - u[0];
                                gx += v * th.cos();
                                gy += v * th.sin();
                            }
                            let s = 2.0 / (ntheta as f64 * dr);
                            g[k] = (gx * s).powi(2) + (gy * s).powi(2);
                            continue;
                        }
                        let r = r_in + i as f64 * dr;
                        let ur = d1(u, k, ntheta, i, nr, dr);
                        let jp = i * ntheta + (j + 1) % ntheta;
                        let jm = i * ntheta + (j + ntheta - 1) % ntheta;
                        let ut = (u[jp] - u[jm]) / (2.0 * dtheta * r);
                        g[k] = ur * ur + ut * ut;
                    }
                }
                g
            }
        }
    }

    /// `sqrt(sum w u^2)`.
    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        self.weights.iter().zip(u).map(|(w, v)| w * v * v).sum::<f64>().sqrt()
    }

    pub fn integrate(&self, u: &[f64]) -> f64 {
        self.weights.iter().zip(u).map(|(w, v)| w * v).sum()
    }

    /// Discrete H^1 norm.
    pub fn h1_norm(&self, u: &[f64]) -> f64 {
        let g = self.grad_sq(u);
        self.weights
            .iter()
            .zip(u.iter().zip(&g))
            .map(|(w, (v, gg))| w * (v * v + gg))
            .sum::<f64>()
            .sqrt()
    }

    /// Outward normal derivative at every boundary node (three-point one-sided stencil).
    pub fn outward_normal_derivative(&self, u: &[f64]) -> Vec<f64> {
        self.boundary_nodes
            .iter()
            .zip(&self.normal_stencil)
            .map(|(&b, (nb, h))| (3.0 * u[b] - 4.0 * u[nb[0]] + u[nb[1]]) / (2.0 * h))
            .collect()
    }

    /// Cubic extrapolation of interior values onto the boundary nodes.
    pub fn extrapolate_to_boundary(&self, v: &mut [f64]) {
        for (&b, e) in self.boundary_nodes.iter().zip(&self.extrapolation) {
            v[b] = 4.0 * v[e[0]] - 6.0 * v[e[1]] + 4.0 * v[e[2]] - v[e[3]];
        }
    }

    /// Laplacian with boundary values filled by extrapolation.
    pub fn laplacian_extended(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.laplacian(u, &mut out);
        if let Layout::Polar { ntheta, r_in, .. } = self.layout {
            if r_in > 0.0 {
                self.extrapolate_to_boundary(&mut out);
                return out;
            }
            let c = out[0];
            out[..ntheta].iter_mut().for_each(|v| *v = c);
        }
        self.extrapolate_to_boundary(&mut out);
        out
    }

    /// Indices of boundary nodes (positions in [`Self::boundary_nodes`]) inside a portion.
    pub fn portion_indices(&self, portion: &BoundaryPortion) -> Vec<usize> {
        self.boundary_params
            .iter()
            .enumerate()
            .filter(|(_, p)| portion.contains(p))
            .map(|(i, _)| i)
            .collect()
    }

    /// Multilinear interpolation stencil (node, weight) for an arbitrary
    /// point of the closed domain.
    pub fn interpolation_stencil(&self, p: Point) -> Vec<(usize, f64)> {
        fn cell(x: f64, h: f64, n: usize) -> (usize, f64) {
            let s = (x / h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            (i, s - i as f64)
        }
        match self.layout {
            Layout::Line { n, dx } => {
                let (i, f) = cell(p[0], dx, n);
                vec![(i, 1.0 - f), (i + 1, f)]
            }
            Layout::Cartesian { nx, ny, dx, dy } => {
                let (i, fx) = cell(p[0], dx, nx);
                let (j, fy) = cell(p[1], dy, ny);
                let k = j * nx + i;
                vec![
                    (k, (1.0 - fx) * (1.0 - fy)),
                    (k + 1, fx * (1.0 - fy)),
                    (k + nx, (1.0 - fx) * fy),
                    (k + nx + 1, fx * fy),
                ]
            }
            Layout::Polar { nr, ntheta, dr, dtheta, r_in } => {
                let r = p[0].hypot(p[1]);
                let th = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                let (i, fr) = cell(r - r_in, dr, nr);
                let s = th / dtheta;
                let j = (s.floor() as usize) % ntheta;
                let ft = s - s.floor();
                let j1 = (j + 1) % ntheta;
                vec![
                    (i * ntheta + j, (1.0 - fr) * (1.0 - ft)),
                    (i * ntheta + j1, (1.0 - fr) * ft),
                    ((i + 1) * ntheta + j, fr * (1.0 - ft)),
                    ((i + 1) * ntheta + j1, fr * ft),
                ]
            }
        }
    }

    /// Shape tuple used by the binary field format.
    pub fn shape_dims(&self) -> (usize, usize) {
        match self.layout {
            Layout::Line { n, .. } => (n, 1),
            Layout::Cartesian { nx, ny, .. } => (nx, ny),
            Layout::Polar { nr, ntheta, .. } => (nr, ntheta),
        }
    }

    pub fn spacings(&self) -> (f64, f64) {
        match self.layout {
            Layout::Line { dx, .. } => (dx, 0.0),
            Layout::Cartesian { dx, dy, .. } => (dx, dy),
            Layout::Polar { dr, dtheta, .. } => (dr, dtheta),
        }
    }
}

fn corner_or(
    i: usize,
    j: usize,
    nx: usize,
    ny: usize,
    default: [usize; 4],
    idx: &dyn Fn(usize, usize) -> usize,
) -> [usize; 4] {
    let ci = i == 0 || i == nx - 1;
    let cj = j == 0 || j == ny - 1;
    if !(ci && cj) {
        return default;
    }
    let step = |a: usize, n: usize, k: usize| if a == 0 { k } else { n - 1 - k };
    [
        idx(step(i, nx, 1), step(j, ny, 1)),
        idx(step(i, nx, 2), step(j, ny, 2)),
        idx(step(i, nx, 3), step(j, ny, 3)),
        idx(step(i, nx, 4), step(j, ny, 4)),
    ]
}

/// Space-time grid: spatial nodes times `nt + 1` uniform time levels on `[0, T]`.
#[derive(Debug, Clone)]
pub struct SpaceTimeGrid {
    pub space: SpatialGrid,
    pub nt: usize,
    pub t_final: f64,
    pub t_prime: f64,
    pub dt: f64,
}

pub const DEFAULT_CFL: f64 = 0.5;

impl SpaceTimeGrid {
    pub fn new(space: SpatialGrid, nt: usize, t_final: f64, t_prime: f64, cfl: f64) -> Result<Self> {
        if nt < 8 {
            return Err(Error::Config(format!("need at least 8 time steps, got {nt}")));
        }
        if !(t_final > 0.0 && t_prime >= t_final) {
            return Err(Error::Config(format!("need 0 < T <= T', got T={t_final}, T'={t_prime}")));
        }
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(Error::Config(format!("cfl factor {cfl} outside (0, 1]")));
        }
        let dt = t_final / nt as f64;
        let limit = cfl * space.stable_dt();
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Config(format!("time step {dt:.4e} violates the CFL bound {limit:.4e}")));
        }
        Ok(SpaceTimeGrid { space, nt, t_final, t_prime, dt })
    }

    /// Smallest number of steps that satisfies the CFL bound.
    pub fn with_cfl(space: SpatialGrid, t_final: f64, t_prime: f64, cfl: f64) -> Result<Self> {
        let nt = ((t_final / (cfl * space.stable_dt())).ceil() as usize).max(8);
        Self::new(space, nt, t_final, t_prime, cfl)
    }

    /// Grid with a prescribed step; the horizon is rounded to a whole number of steps.
    pub fn with_dt(space: SpatialGrid, dt: f64, t_final: f64, t_prime: f64) -> Result<Self> {
        if !(dt > 0.0) || dt > space.stable_dt() * (1.0 + 1e-12) {
            return Err(Error::Config(format!("time step {dt:.4e} violates the CFL bound {:.4e}", space.stable_dt())));
        }
        let nt = ((t_final / dt).round() as usize).max(8);
        let t = nt as f64 * dt;
        Ok(SpaceTimeGrid { space, nt, t_final: t, t_prime: t_prime.max(t), dt })
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn ns(&self) -> usize {
        self.space.len()
    }

    /// Number of levels needed to cover `[0, T']`.
    pub fn nt_prime(&self) -> usize {
        (self.t_prime / self.dt).round() as usize
    }

    /// Same spatial grid on a shorter horizon with the same time step.
    pub fn truncated(&self, nt: usize) -> Result<Self> {
        let t = nt as f64 * self.dt;
        Ok(SpaceTimeGrid { space: self.space.clone(), nt, t_final: t, t_prime: self.t_prime.max(t), dt: self.dt })
    }
}

/// Discrete wave operator `d_t^2 u - Lap u` on a real field stored as
/// `(nt + 1) x ns` row-major samples. Interior spatial nodes only; the time
/// endpoints use one-sided second order stencils.
pub fn apply_wave_operator(values: &[f64], grid: &SpaceTimeGrid) -> Result<Vec<f64>> {
    let ns = grid.ns();
    let nl = grid.nt + 1;
    if values.len() != nl * ns {
        return Err(Error::Shape(format!("field has {} samples, grid expects {}", values.len(), nl * ns)));
    }
    let dt2 = grid.dt * grid.dt;
    let mut out = vec![0.0; nl * ns];
    let mut lap = vec![0.0; ns];
    for n in 0..nl {
        let row = &values[n * ns..(n + 1) * ns];
        grid.space.laplacian(row, &mut lap);
        let at = |m: usize, k: usize| values[m * ns + k];
        for k in 0..ns {
            if grid.space.is_boundary(k) {
                continue;
            }
            let utt = if n == 0 {
                (2.0 * at(0, k) - 5.0 * at(1, k) + 4.0 * at(2, k) - at(3, k)) / dt2
            } else if n == nl - 1 {
                (2.0 * at(n, k) - 5.0 * at(n - 1, k) + 4.0 * at(n - 2, k) - at(n - 3, k)) / dt2
            } else {
                (at(n + 1, k) - 2.0 * at(n, k) + at(n - 1, k)) / dt2
            };
            out[n * ns + k] = utt - lap[k];
        }
    }
    Ok(out)
}
