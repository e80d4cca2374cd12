//! Geometric optics probes: highly oscillating approximate solutions
//! `e^{i rho (t - x_n)} (a0 + a1 / rho + a2 / rho^2)` entering the domain through a
//! small boundary patch around a point `x0` at time `t0`.
//!
//! All work happens on a chart: a box around the patch (time shifted to start just
//! before the probe arrives) that is fine enough to resolve the oscillation. Outside
//! the chart the probe and every solution driven by it vanish up to the final time of
//! the chart, so solves on the chart coincide with solves on the whole domain.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::WaveField;
use crate::geometry::{BoundaryParam, BoundaryPortion, Domain, Face, Layout, Point, Shape, SpaceTimeGrid, SpatialGrid};
use crate::linear::{linear_observe, normal_derivative_trace, solve_linear, BoundaryTrace, LinearData, Potential, SolveOptions};
use crate::mollify::mollify_potential;
use crate::persist;
use crate::smooth::{plateau, plateau_jet, Jet};
use crate::sobolev;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeOptions {
    /// Outer radius (arc length) of the tangential cutoff; chosen from the geometry if absent.
    pub radius: Option<f64>,
    pub points_per_wavelength: f64,
    pub cfl: f64,
    /// Extra cells around the light cone of the probe in the chart.
    pub margin_cells: usize,
    /// Cap on `levels x nodes` of stored amplitude arrays.
    pub max_samples: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { radius: None, points_per_wavelength: 40.0, cfl: 0.5, margin_cells: 16, max_samples: 60_000_000 }
    }
}

/// Where, when and how fast the probe oscillates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub t0: f64,
    pub x0: BoundaryParam,
    pub delta: f64,
    pub rho: f64,
    /// Final time `T` of the experiment.
    pub horizon: f64,
    /// Accessible boundary portion; the probe must sit inside it.
    pub gamma: BoundaryPortion,
    #[serde(default)]
    pub options: ProbeOptions,
}

/// Upper bound `min(collar, t0, T - t0) / 16` for the probe width.
pub fn max_delta(domain: &Domain, t0: f64, horizon: f64) -> f64 {
    domain.collar_width.min(t0).min(horizon - t0) / 16.0
}

/// Default width, a fixed fraction of [`max_delta`].
pub fn default_delta(domain: &Domain, t0: f64, horizon: f64) -> f64 {
    0.8 * max_delta(domain, t0, horizon)
}

/// Grid line running from a boundary node straight into the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
struct NormalLine {
    boundary: usize,
    stride: isize,
    depth: usize,
    h: f64,
}

impl NormalLine {
    fn node(&self, m: usize) -> usize {
        (self.boundary as isize + m as isize * self.stride) as usize
    }

    fn xn(&self) -> f64 {
        self.depth as f64 * self.h
    }
}

/// Chart, cutoffs and boundary data of one probe.
#[derive(Debug, Clone)]
pub struct ProbeSetup {
    pub domain: Domain,
    pub spec: ProbeSpec,
    /// Outer radius of the tangential cutoff (zero for intervals, where it is unused).
    pub radius: f64,
    /// Chart grid; its time `tau` corresponds to `t = t_start + tau`.
    pub grid: Arc<SpaceTimeGrid>,
    pub t_start: f64,
    /// Translation from chart coordinates to domain coordinates.
    pub offset: Point,
    /// Chart boundary portion lying on the face (or endpoint) of `x0`.
    pub portion: BoundaryPortion,
    s0: f64,
    lines: Vec<Option<NormalLine>>,
    sigma: Vec<f64>,
}

fn same_family(a: &BoundaryParam, b: &BoundaryParam) -> bool {
    match (a, b) {
        (BoundaryParam::End { end: x }, BoundaryParam::End { end: y }) => x == y,
        (BoundaryParam::Face { face: x, .. }, BoundaryParam::Face { face: y, .. }) => x == y,
        (BoundaryParam::Angle { .. }, BoundaryParam::Angle { .. }) => true,
        _ => false,
    }
}

/// What a chart has to hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartKind {
    /// The amplitudes up to `t0 + delta`: depth `4 delta` and the whole tangential cutoff.
    Amplitudes,
    /// Only the backward light cone of the filter window around `(t0, x0)`.
    Traces,
}

impl ProbeSetup {
    pub fn new(domain: &Domain, spec: &ProbeSpec) -> Result<Self> {
        Self::with_kind(domain, spec, ChartKind::Amplitudes)
    }

    /// Chart for trace solves only; much smaller than the amplitude chart.
    pub fn for_traces(domain: &Domain, spec: &ProbeSpec) -> Result<Self> {
        Self::with_kind(domain, spec, ChartKind::Traces)
    }

    pub fn with_kind(domain: &Domain, spec: &ProbeSpec, kind: ChartKind) -> Result<Self> {
        let (t0, delta, rho, horizon) = (spec.t0, spec.delta, spec.rho, spec.horizon);
        let opts = spec.options;
        if !(t0 > 0.0 && t0 < horizon) {
            return Err(Error::Config(format!("probe time {t0} must lie in (0, {horizon})")));
        }
        let bound = max_delta(domain, t0, horizon);
        if !(delta > 0.0 && delta < bound) {
            return Err(Error::Config(format!("probe width {delta} must lie in (0, {bound:.4e}) = (0, min(collar, t0, T - t0) / 16)")));
        }
        if !(rho > 1.0) {
            return Err(Error::Config(format!("probe frequency must exceed 1, got {rho}")));
        }
        if opts.points_per_wavelength < 10.0 {
            return Err(Error::Config("at least 10 points per wavelength are required".into()));
        }
        domain.check_portion(&spec.gamma)?;
        if !spec.gamma.contains(&spec.x0) {
            return Err(Error::Geometry(format!("probe point {:?} is not inside the accessible portion", spec.x0)));
        }
        let h = (2.0 * PI / (opts.points_per_wavelength * rho)).min(delta / 8.0);
        if 3.0 * delta + 4.0 * h >= domain.collar_width {
            return Err(Error::OutsideCollar { depth: 3.0 * delta + 4.0 * h, collar: domain.collar_width });
        }
        let s0 = domain.arc_length(&spec.x0);
        let radius = match domain.shape {
            Shape::Interval { .. } => 0.0,
            Shape::Rectangle { width, height } => {
                let BoundaryParam::Face { face, .. } = spec.x0 else {
                    return Err(Error::Geometry("rectangle probes need a face parameter".into()));
                };
                let len = if matches!(face, Face::Bottom | Face::Top) { width } else { height };
                let limit = spec.gamma.interior_margin(&spec.x0).min(s0.min(len - s0) - 4.0 * delta);
                pick_radius(opts.radius, limit, delta)?
            }
            Shape::Disk { radius: r0 } => {
                let limit = (spec.gamma.interior_margin(&spec.x0) * r0).min(PI * r0 - 4.0 * delta);
                pick_radius(opts.radius, limit, delta)?
            }
        };
        let pad = (opts.margin_cells + 4) as f64 * h;
        let t_start = t0 - 2.0 * delta - 4.0 * h;
        let (half_along, depth, t_end) = match kind {
            ChartKind::Amplitudes => (2.0 * radius / 3.0 + 4.0 * delta + pad, 4.0 * delta + pad, t0 + delta + 4.0 * h),
            ChartKind::Traces => {
                let t_end = t0 + 0.25 * delta + 4.0 * h;
                let cone = t_end - t_start + pad;
                (0.25 * delta + cone, cone, t_end)
            }
        };
        let (space, offset, portion) = chart_space(domain, &spec.x0, s0, half_along, depth, h)?;
        let span = t_end - t_start;
        let grid = Arc::new(SpaceTimeGrid::with_cfl(space, span, span, opts.cfl)?);
        let coarse = grid.space.max_spacing().max(grid.dt);
        if rho * coarse > 2.0 * PI / 10.0 {
            return Err(Error::Resolution {
                msg: format!("frequency {rho} needs 10 points per wavelength, grid spacing is {coarse:.3e}"),
                max_rho: Some(2.0 * PI / (10.0 * coarse)),
            });
        }
        let mut setup =
            ProbeSetup { domain: domain.clone(), spec: spec.clone(), radius, grid, t_start, offset, portion, s0, lines: Vec::new(), sigma: Vec::new() };
        setup.build_lines(3.0 * delta + 4.0 * h);
        Ok(setup)
    }

    fn build_lines(&mut self, depth_max: f64) {
        let sp = &self.grid.space;
        let ns = sp.len();
        let mut lines = vec![None; ns];
        let mut sigma = vec![0.0; ns];
        let dim1 = matches!(self.domain.shape, Shape::Interval { .. });
        for (k, slot) in lines.iter_mut().enumerate() {
            let (line, s) = match (sp.layout, self.spec.x0) {
                (Layout::Line { n, dx }, BoundaryParam::End { end }) => {
                    let left = matches!(end, crate::geometry::Endpoint::Left) && self.offset[0] == 0.0 || n == 0;
                    let line = if left { NormalLine { boundary: 0, stride: 1, depth: k, h: dx } } else { NormalLine { boundary: n - 1, stride: -1, depth: n - 1 - k, h: dx } };
                    (line, 0.0)
                }
                (Layout::Cartesian { nx, ny, dx, dy }, BoundaryParam::Face { face, .. }) => {
                    let (i, j) = (k % nx, k / nx);
                    match face {
                        Face::Bottom => (NormalLine { boundary: i, stride: nx as isize, depth: j, h: dy }, self.offset[0] + i as f64 * dx - self.s0),
                        Face::Top => (NormalLine { boundary: (ny - 1) * nx + i, stride: -(nx as isize), depth: ny - 1 - j, h: dy }, self.offset[0] + i as f64 * dx - self.s0),
                        Face::Left => (NormalLine { boundary: j * nx, stride: 1, depth: i, h: dx }, self.offset[1] + j as f64 * dy - self.s0),
                        Face::Right => (NormalLine { boundary: j * nx + nx - 1, stride: -1, depth: nx - 1 - i, h: dx }, self.offset[1] + j as f64 * dy - self.s0),
                    }
                }
                (Layout::Polar { nr, ntheta, dr, dtheta, .. }, _) => {
                    let (i, j) = (k / ntheta, k % ntheta);
                    let Shape::Disk { radius } = self.domain.shape else { unreachable!() };
                    let line = NormalLine { boundary: (nr - 1) * ntheta + j, stride: -(ntheta as isize), depth: nr - 1 - i, h: dr };
                    (line, wrap(radius * j as f64 * dtheta - self.s0, 2.0 * PI * radius))
                }
                _ => continue,
            };
            sigma[k] = s;
            if line.xn() <= depth_max && (dim1 || s.abs() < self.radius) {
                *slot = Some(line);
            }
        }
        self.lines = lines;
        self.sigma = sigma;
    }

    /// Physical time of chart level `n`.
    pub fn time(&self, n: usize) -> f64 {
        self.t_start + self.grid.time(n)
    }

    /// Fractional chart level of physical time `t`, clamped to the chart.
    fn level_of(&self, t: f64) -> f64 {
        ((t - self.t_start) / self.grid.dt).clamp(0.0, self.grid.nt as f64)
    }

    /// Time cutoff: 1 on `[-delta, delta]`, supported in `(-2 delta, 2 delta)`.
    pub fn chi(&self, s: f64) -> f64 {
        plateau(s, self.spec.delta, 2.0 * self.spec.delta)
    }

    /// Wider time cutoff, 1 on the support of [`Self::chi`].
    pub fn chi1(&self, s: f64) -> f64 {
        plateau(s, 2.0 * self.spec.delta, 3.0 * self.spec.delta)
    }

    /// Tangential cutoff around `x0` with its second derivative in arc length.
    pub fn phi(&self, sigma: f64) -> Jet {
        if self.radius == 0.0 {
            Jet::constant(1.0)
        } else {
            plateau_jet(sigma, self.radius / 3.0, 2.0 * self.radius / 3.0)
        }
    }

    /// Wider tangential cutoff, 1 on the support of [`Self::phi`].
    pub fn phi1(&self, sigma: f64) -> f64 {
        if self.radius == 0.0 {
            1.0
        } else {
            plateau(sigma, 2.0 * self.radius / 3.0, self.radius)
        }
    }

    /// Time envelope of the boundary data: `chi(t - t0)` up to `t0 + delta`, then
    /// reflected about `t0 + delta`.
    pub fn envelope(&self, t: f64) -> f64 {
        let (t0, d) = (self.spec.t0, self.spec.delta);
        if t <= t0 + d {
            self.chi(t - t0)
        } else {
            self.chi(t0 + 2.0 * d - t)
        }
    }

    /// Boundary data at time `t` and tangential offset `sigma` from `x0`.
    pub fn boundary_value(&self, t: f64, sigma: f64) -> Complex64 {
        let a = self.envelope(t) * self.phi(sigma).v;
        if a == 0.0 {
            Complex64::default()
        } else {
            Complex64::from_polar(a, self.spec.rho * t)
        }
    }

    /// Tangential offset of a boundary parameter from `x0`, if it lies on the same face.
    pub fn offset_of(&self, param: &BoundaryParam) -> Option<f64> {
        if !same_family(param, &self.spec.x0) {
            return None;
        }
        let s = self.domain.arc_length(param) - self.s0;
        Some(match self.domain.shape {
            Shape::Disk { radius } => wrap(s, 2.0 * PI * radius),
            _ => s,
        })
    }

    /// Probe data on the chart grid.
    pub fn boundary_data(&self) -> LinearData {
        let sp = &self.grid.space;
        let on_face: Vec<bool> = sp.boundary_params().iter().map(|p| self.portion.contains(p)).collect();
        let sig: Vec<f64> = sp.boundary_nodes().iter().map(|&k| self.sigma[k]).collect();
        LinearData::lateral_fn(self.grid.clone(), |tau, i, _| if on_face[i] { self.boundary_value(tau + self.t_start, sig[i]) } else { Complex64::default() })
    }

    /// Probe data on a grid of the whole domain, on `[0, T']`.
    pub fn boundary_data_on(&self, grid: Arc<SpaceTimeGrid>) -> LinearData {
        let offs: Vec<Option<f64>> = grid.space.boundary_params().iter().map(|p| self.offset_of(p)).collect();
        LinearData::lateral_fn(grid, |t, i, _| offs[i].map_or(Complex64::default(), |s| self.boundary_value(t, s)))
    }

    /// A potential of the domain seen in chart coordinates.
    pub fn chart_potential(&self, q: &Potential) -> Potential {
        match q {
            Potential::Constant(c) => Potential::Constant(*c),
            _ => {
                let (q, t0, off) = (q.clone(), self.t_start, self.offset);
                Potential::analytic(&format!("chart:{}:{}:{:?}", q.hash(), t0, off), move |tau, p| q.eval(tau + t0, [p[0] + off[0], p[1] + off[1]]))
            }
        }
    }

    /// Outward normal derivative on the chart face of the solution with potential
    /// `q` (a potential of the domain) driven by the probe data.
    pub fn chart_trace(&self, q: &Potential) -> Result<BoundaryTrace> {
        let qc = self.chart_potential(q);
        let (trace, _) = linear_observe(&qc, &self.boundary_data(), None, &self.portion, false, &SolveOptions::default())?;
        Ok(trace)
    }

    /// Tangential offset from `x0` of every column of a chart trace.
    pub fn chart_offsets(&self, trace: &BoundaryTrace) -> Vec<f64> {
        let nodes = self.grid.space.boundary_nodes();
        trace.indices.iter().map(|&i| self.sigma[nodes[i]]).collect()
    }

    /// Samples of a domain potential on every chart node and level.
    fn sample(&self, q: &Potential) -> Vec<f64> {
        let ns = self.grid.ns();
        let coords = self.grid.space.coords();
        let mut out = vec![0.0; (self.grid.nt + 1) * ns];
        out.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
            let t = self.time(n);
            for (k, v) in row.iter_mut().enumerate() {
                *v = q.eval(t, [coords[k][0] + self.offset[0], coords[k][1] + self.offset[1]]);
            }
        });
        out
    }

    /// Position in the chart's boundary list of the node closest to `x0`.
    fn x0_node(&self) -> Result<NormalLine> {
        self.lines
            .iter()
            .enumerate()
            .filter_map(|(k, l)| l.filter(|l| l.depth == 0).map(|l| (k, l)))
            .min_by(|a, b| self.sigma[a.0].abs().total_cmp(&self.sigma[b.0].abs()))
            .map(|(_, l)| l)
            .ok_or_else(|| Error::Geometry("probe chart has no boundary node near x0".into()))
    }

    fn beta(&self, xn: f64) -> f64 {
        self.domain.metric_factor_beta(&self.spec.x0, xn).unwrap_or(1.0)
    }

    fn b(&self, xn: f64) -> f64 {
        self.beta(xn).powf(-0.25)
    }

    /// Depth of chart node `k` below the face of `x0` (zero off the patch).
    pub fn depth(&self, k: usize) -> f64 {
        self.lines[k].map_or(0.0, |l| l.xn())
    }

    /// Sample count of one stored amplitude.
    pub fn samples(&self) -> usize {
        (self.grid.nt + 1) * self.grid.ns()
    }
}

fn wrap(s: f64, period: f64) -> f64 {
    let r = s.rem_euclid(period);
    if r > 0.5 * period {
        r - period
    } else {
        r
    }
}

fn pick_radius(requested: Option<f64>, limit: f64, delta: f64) -> Result<f64> {
    let r = requested.unwrap_or_else(|| limit.min(12.0 * delta));
    if r > limit + 1e-12 {
        return Err(Error::Geometry(format!("cutoff radius {r} exceeds the room {limit:.4e} around x0")));
    }
    if r <= 3.0 * delta {
        return Err(Error::Geometry(format!("x0 is too close to the edge of the accessible portion (room {limit:.4e})")));
    }
    Ok(r)
}

/// Spatial chart around `x0` reaching `reach` into the domain and `half` along it on each side.
fn chart_space(domain: &Domain, x0: &BoundaryParam, s0: f64, half: f64, reach: f64, h: f64) -> Result<(SpatialGrid, Point, BoundaryPortion)> {
    let local = |shape: Shape| -> Result<Domain> {
        let tmp = Domain { shape, portions: Default::default(), collar_width: 1.0 };
        Domain::new(shape, 0.9 * tmp.injectivity_threshold())
    };
    match (domain.shape, x0) {
        (Shape::Interval { length }, BoundaryParam::End { end }) => {
            let d = reach.min(length);
            let chart = local(Shape::Interval { length: d })?;
            let left = matches!(end, crate::geometry::Endpoint::Left);
            let offset = if left { [0.0, 0.0] } else { [length - d, 0.0] };
            Ok((SpatialGrid::with_spacing(&chart, h)?, offset, BoundaryPortion::Endpoints { left, right: !left }))
        }
        (Shape::Rectangle { width, height }, BoundaryParam::Face { face, .. }) => {
            let (len, across) = if matches!(face, Face::Bottom | Face::Top) { (width, height) } else { (height, width) };
            let (lo, hi) = ((s0 - half).max(0.0), (s0 + half).min(len));
            let d = reach.min(across);
            let along = hi - lo;
            let (shape, offset) = match face {
                Face::Bottom => (Shape::Rectangle { width: along, height: d }, [lo, 0.0]),
                Face::Top => (Shape::Rectangle { width: along, height: d }, [lo, height - d]),
                Face::Left => (Shape::Rectangle { width: d, height: along }, [0.0, lo]),
                Face::Right => (Shape::Rectangle { width: d, height: along }, [width - d, lo]),
            };
            let chart = local(shape)?;
            Ok((SpatialGrid::with_spacing(&chart, h)?, offset, BoundaryPortion::FaceSegment { face: *face, start: 0.0, end: along }))
        }
        (Shape::Disk { radius: r0 }, BoundaryParam::Angle { .. }) => {
            let r_in = (r0 - reach).max(0.0);
            let nr = (((r0 - r_in) / h).ceil() as usize + 1).max(8);
            let nth = ((2.0 * PI * r0 / h).ceil() as usize).max(8);
            Ok((SpatialGrid::annulus(domain, r_in, nr, nth)?, [0.0, 0.0], BoundaryPortion::Whole))
        }
        _ => Err(Error::Geometry(format!("boundary parameter {x0:?} does not belong to {:?}", domain.shape))),
    }
}

/// Amplitudes of one probe `G_j` built for the potential `q_j`.
#[derive(Debug, Clone)]
pub struct GoProbe {
    pub setup: Arc<ProbeSetup>,
    /// Leading amplitude, `levels x nodes` on the chart.
    pub a0: Arc<Vec<f64>>,
    pub a1: Vec<Complex64>,
    /// First amplitude built from the mollified potential.
    pub a1_mollified: Vec<Complex64>,
    pub a2: Vec<Complex64>,
    /// Chart samples of the potential and of its mollification.
    pub q: Vec<f64>,
    pub q_mollified: Vec<f64>,
}

/// Trapezoid rule along a normal line at physical time `t`, the integrand being
/// `g(m, t - x_n + y_m)` at depth `y_m`.
fn ray_integral<T>(line: &NormalLine, mut g: impl FnMut(usize, f64, f64) -> T) -> T
where
    T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Default,
{
    let mut acc = T::default();
    if line.depth == 0 {
        return acc;
    }
    for m in 0..=line.depth {
        let w = if m == 0 || m == line.depth { 0.5 * line.h } else { line.h };
        acc = acc + g(line.node(m), m as f64 * line.h, w) * 1.0;
    }
    acc
}

/// Linear interpolation in time of a chart array at node `k`.
fn at_time<T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>>(a: &[T], ns: usize, nt: usize, k: usize, s: f64) -> T {
    let n = (s.floor() as usize).min(nt - 1);
    let f = s - n as f64;
    a[n * ns + k] * (1.0 - f) + a[(n + 1) * ns + k] * f
}

impl ProbeSetup {
    /// Leading amplitude `chi(s2) phi(x') beta^{-1/4}`.
    fn leading(&self) -> Vec<f64> {
        let ns = self.grid.ns();
        let mut a0 = vec![0.0; (self.grid.nt + 1) * ns];
        a0.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
            let t = self.time(n);
            for (k, v) in row.iter_mut().enumerate() {
                if let Some(line) = self.lines[k] {
                    let xn = line.xn();
                    *v = self.chi(t - xn - self.spec.t0) * self.phi(self.sigma[k]).v * self.b(xn);
                }
            }
        });
        a0
    }

    /// First amplitude `(i/2) chi1 phi1 b (a3 + a_{j,3})` for chart samples `q`.
    fn first(&self, q: &[f64]) -> Vec<Complex64> {
        let ns = self.grid.ns();
        let nt = self.grid.nt;
        let mut a1 = vec![Complex64::default(); (nt + 1) * ns];
        a1.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
            let t = self.time(n);
            for (k, v) in row.iter_mut().enumerate() {
                let Some(line) = self.lines[k] else { continue };
                let xn = line.xn();
                let s2 = t - xn - self.spec.t0;
                let (c1, p1) = (self.chi1(s2), self.phi1(self.sigma[k]));
                let chi = self.chi(s2);
                if c1 * p1 == 0.0 || chi == 0.0 {
                    continue;
                }
                let phi = self.phi(self.sigma[k]);
                // d1 / b along the ray: chi [phi (kappa^2/4 + kappa'/2) - phi'' / beta]
                let a3 = chi
                    * ray_integral(&line, |_, y, w| {
                        let kappa = self.domain.log_sqrt_beta_slope(y);
                        let kp = self.domain.log_sqrt_beta_curvature(y);
                        w * (phi.v * (0.25 * kappa * kappa + 0.5 * kp) - phi.d2 / self.beta(y))
                    });
                let aq = chi
                    * phi.v
                    * ray_integral(&line, |node, y, w| w * at_time(q, ns, nt, node, self.level_of(t - xn + y)));
                *v = 0.5 * I * c1 * p1 * self.b(xn) * (a3 + aq);
            }
        });
        a1
    }

    /// Second amplitude `chi1 phi1 b / (2i) int B / b` from samples of `B`.
    fn second(&self, source: &[Complex64]) -> Vec<Complex64> {
        let ns = self.grid.ns();
        let nt = self.grid.nt;
        let mut a2 = vec![Complex64::default(); (nt + 1) * ns];
        a2.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
            let t = self.time(n);
            for (k, v) in row.iter_mut().enumerate() {
                let Some(line) = self.lines[k] else { continue };
                let xn = line.xn();
                let s2 = t - xn - self.spec.t0;
                let c = self.chi1(s2) * self.phi1(self.sigma[k]);
                if c == 0.0 {
                    continue;
                }
                let integral = ray_integral(&line, |node, y, w| at_time(source, ns, nt, node, self.level_of(t - xn + y)) * (w / self.b(y)));
                *v = c * self.b(xn) / (2.0 * I) * integral;
            }
        });
        a2
    }

    /// `(d_t^2 - Lap_h + q) a` at interior nodes of levels `1..nt`; zero elsewhere.
    fn wave_apply<A: AsComplex>(&self, a: &[A], q: &[f64]) -> Vec<Complex64> {
        let sp = &self.grid.space;
        let ns = sp.len();
        let nt = self.grid.nt;
        let dt2 = self.grid.dt * self.grid.dt;
        let mut out = vec![Complex64::default(); (nt + 1) * ns];
        out.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
            if n == 0 || n == nt {
                return;
            }
            let level = |m: usize| &a[m * ns..(m + 1) * ns];
            let (re, im): (Vec<f64>, Vec<f64>) = level(n).iter().map(|z| (z.re(), z.im())).unzip();
            let (mut lr, mut li) = (vec![0.0; ns], vec![0.0; ns]);
            sp.laplacian(&re, &mut lr);
            sp.laplacian(&im, &mut li);
            let (prev, cur, next) = (level(n - 1), level(n), level(n + 1));
            for k in 0..ns {
                if sp.is_boundary(k) || self.lines[k].is_none() {
                    continue;
                }
                let c = cur[k].c();
                let tt = (next[k].c() - 2.0 * c + prev[k].c()) / dt2;
                row[k] = tt - Complex64::new(lr[k], li[k]) + q[n * ns + k] * c;
            }
        });
        out
    }
}

trait AsComplex: Copy + Sync {
    fn c(self) -> Complex64;
    fn re(self) -> f64 {
        self.c().re
    }
    fn im(self) -> f64 {
        self.c().im
    }
}

impl AsComplex for f64 {
    fn c(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
}

impl AsComplex for Complex64 {
    fn c(self) -> Complex64 {
        self
    }
}

/// Builds the probes for a pair of potentials; both share the leading amplitude and
/// the boundary data. `base` is the grid on which the potentials are mollified.
pub fn build_probe(domain: &Domain, q_pair: (&Potential, &Potential), spec: &ProbeSpec, base: Arc<SpaceTimeGrid>) -> Result<(GoProbe, GoProbe)> {
    let setup = Arc::new(ProbeSetup::new(domain, spec)?);
    let cost = setup.samples();
    if cost > spec.options.max_samples {
        let dim = domain.dim() as f64;
        return Err(Error::Resolution {
            msg: format!("probe amplitudes need {cost} samples per field, the cap is {}", spec.options.max_samples),
            max_rho: Some(spec.rho * (spec.options.max_samples as f64 / cost as f64).powf(1.0 / (dim + 1.0))),
        });
    }
    let a0 = Arc::new(setup.leading());
    let one = |q: &Potential| -> Result<GoProbe> {
        let mollified = mollify_potential(q, base.clone(), spec.rho, domain.dim())?;
        let qs = setup.sample(q);
        let qm = setup.sample(&mollified);
        let a1 = setup.first(&qs);
        let a1m = setup.first(&qm);
        let source: Vec<Complex64> = setup.wave_apply(&a1m, &qm).into_iter().map(|z| -z).collect();
        let a2 = setup.second(&source);
        Ok(GoProbe { setup: setup.clone(), a0: a0.clone(), a1, a1_mollified: a1m, a2, q: qs, q_mollified: qm })
    };
    let (p1, p2) = rayon::join(|| one(q_pair.0), || one(q_pair.1));
    Ok((p1?, p2?))
}

/// Size of the ansatz error and diagnostics of the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnsatzResidual {
    /// `L^2((0, t0 + delta) x M)` norm of `(d_t^2 - Lap + q) G` with the transport
    /// equations of `a0` and `a1` taken as exact.
    pub l2: f64,
    /// `rho * l2`.
    pub scaled: f64,
    /// The same norm with every derivative replaced by grid differences.
    pub discrete_l2: f64,
    /// Sup of the differenced transport equation of `a0`.
    pub transport_a0: f64,
    /// Sup of the differenced transport equation of `a1`.
    pub transport_a1: f64,
    /// Sup of `||grad psi|^2 - 1|` on the patch.
    pub eikonal_defect: f64,
    /// Discrete space-time `H^2` norm of `a2`.
    pub a2_h2: f64,
}

impl GoProbe {
    /// `E2 / rho + E3 / rho^2`, the part of `e^{-i rho (t - psi)} (d_t^2 - Lap + q) G`
    /// left after the eikonal and the first two transport equations.
    fn remainder_amplitude(&self) -> Vec<Complex64> {
        let s = &self.setup;
        let rho = s.spec.rho;
        let ns = s.grid.ns();
        let w1 = s.wave_apply(&self.a1, &self.q);
        let w1m = s.wave_apply(&self.a1_mollified, &self.q_mollified);
        let w2 = s.wave_apply(&self.a2, &self.q);
        let mut out = vec![Complex64::default(); w1.len()];
        out.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
            let t = s.time(n);
            for (k, v) in row.iter_mut().enumerate() {
                let Some(line) = s.lines[k] else { continue };
                let c = s.chi1(t - line.xn() - s.spec.t0) * s.phi1(s.sigma[k]);
                let j = n * ns + k;
                let e2 = w1[j] - c * w1m[j];
                *v = e2 / rho + w2[j] / (rho * rho);
            }
        });
        out
    }

    /// Full probe `G` on the chart.
    fn assemble(&self) -> Vec<Complex64> {
        let s = &self.setup;
        let rho = s.spec.rho;
        let ns = s.grid.ns();
        let mut g = vec![Complex64::default(); self.a1.len()];
        g.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
            let t = s.time(n);
            for (k, v) in row.iter_mut().enumerate() {
                let j = n * ns + k;
                let amp = self.a0[j] + self.a1[j] / rho + self.a2[j] / (rho * rho);
                *v = amp * Complex64::from_polar(1.0, rho * (t - s.depth(k)));
            }
        });
        g
    }

    fn patch_norm(&self, f: &[Complex64]) -> f64 {
        let s = &self.setup;
        let ns = s.grid.ns();
        let w = s.grid.space.weights();
        let t_end = s.spec.t0 + s.spec.delta;
        let mut acc = 0.0;
        for n in 0..=s.grid.nt {
            if s.time(n) > t_end + 1e-12 {
                break;
            }
            for k in 0..ns {
                acc += s.grid.dt * w[k] * f[n * ns + k].norm_sqr();
            }
        }
        acc.sqrt()
    }

    /// Differenced transport equations `T a0 = 0` and `T a1 = i (d_t^2 - Lap + q) a0`.
    fn transport_defects(&self) -> (f64, f64) {
        let s = &self.setup;
        let ns = s.grid.ns();
        let nt = s.grid.nt;
        let dt = s.grid.dt;
        let w0 = s.wave_apply(&self.a0[..], &self.q);
        let mut d0: f64 = 0.0;
        let mut d1: f64 = 0.0;
        for n in 1..nt {
            for k in 0..ns {
                let Some(line) = s.lines[k] else { continue };
                if line.depth == 0 {
                    continue;
                }
                let (inner, outer) = ((k as isize + line.stride) as usize, (k as isize - line.stride) as usize);
                if s.lines[inner].is_none() {
                    continue;
                }
                let kappa = s.domain.log_sqrt_beta_slope(line.xn());
                let tr = |a: &dyn Fn(usize) -> Complex64| -> Complex64 {
                    (a((n + 1) * ns + k) - a((n - 1) * ns + k)) / dt + (a(n * ns + inner) - a(n * ns + outer)) / line.h + kappa * a(n * ns + k)
                };
                let t0 = tr(&|j| Complex64::new(self.a0[j], 0.0));
                let t1 = tr(&|j| self.a1[j]) - I * w0[n * ns + k];
                d0 = d0.max(t0.norm());
                d1 = d1.max(t1.norm());
            }
        }
        (d0, d1)
    }

    fn eikonal_defect(&self) -> f64 {
        let s = &self.setup;
        let sp = &s.grid.space;
        let coords = sp.coords();
        let dist = |p: Point| s.domain.boundary_distance([p[0] + s.offset[0], p[1] + s.offset[1]]).unwrap_or(0.0);
        let mut worst: f64 = 0.0;
        for (k, line) in s.lines.iter().enumerate() {
            let Some(line) = line else { continue };
            if line.depth == 0 || sp.is_boundary(k) {
                continue;
            }
            let g2 = match sp.layout {
                Layout::Line { dx, .. } => ((dist(coords[k + 1]) - dist(coords[k - 1])) / (2.0 * dx)).powi(2),
                Layout::Cartesian { nx, dx, dy, .. } => {
                    ((dist(coords[k + 1]) - dist(coords[k - 1])) / (2.0 * dx)).powi(2) + ((dist(coords[k + nx]) - dist(coords[k - nx])) / (2.0 * dy)).powi(2)
                }
                Layout::Polar { ntheta, dr, dtheta, r_in, .. } => {
                    let (i, j) = (k / ntheta, k % ntheta);
                    let r = r_in + i as f64 * dr;
                    let jp = i * ntheta + (j + 1) % ntheta;
                    let jm = i * ntheta + (j + ntheta - 1) % ntheta;
                    let gr = (dist(coords[k + ntheta]) - dist(coords[k - ntheta])) / (2.0 * dr);
                    let gt = (dist(coords[jp]) - dist(coords[jm])) / (2.0 * dtheta * r);
                    gr * gr + gt * gt
                }
            };
            worst = worst.max((g2 - 1.0).abs());
        }
        worst
    }

    fn a2_h2(&self) -> f64 {
        let g = &self.setup.grid;
        let re: Vec<f64> = self.a2.iter().map(|z| z.re).collect();
        let im: Vec<f64> = self.a2.iter().map(|z| z.im).collect();
        (sobolev::space_time_norm_sq(&re, g, 2, sobolev::Orders::Full) + sobolev::space_time_norm_sq(&im, g, 2, sobolev::Orders::Full)).sqrt()
    }

    /// Largest `|a1|`, `|a2|` on the boundary face of the chart.
    pub fn boundary_vanishing(&self) -> f64 {
        let s = &self.setup;
        let sp = &s.grid.space;
        let ns = sp.len();
        let mut worst: f64 = 0.0;
        for (i, &k) in sp.boundary_nodes().iter().enumerate() {
            if !s.portion.contains(&sp.boundary_params()[i]) {
                continue;
            }
            for n in 0..=s.grid.nt {
                worst = worst.max(self.a1[n * ns + k].norm()).max(self.a2[n * ns + k].norm());
            }
        }
        worst
    }

    /// Largest `|a0|`, the natural scale of the amplitudes.
    pub fn scale(&self) -> f64 {
        self.a0.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Writes `a0`, `a1`, `a2` (levels x chart nodes) and the chart boundary data
    /// as flat binary matrices with JSON sidecars.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let s = &self.setup;
        let (rows, cols) = (s.grid.nt + 1, s.grid.ns());
        let meta = BundleMeta {
            spec: s.spec.clone(),
            t_start: s.t_start,
            offset: s.offset,
            dims: s.grid.space.shape_dims(),
            spacing: s.grid.space.spacings(),
            dt: s.grid.dt,
            nt: s.grid.nt,
            q_hash: persist::hash_f64(&self.q),
        };
        let flat = |v: &[Complex64]| v.iter().flat_map(|z| [z.re, z.im]).collect::<Vec<f64>>();
        let write = |name: &str, complex: bool, c: usize, data: &[f64]| -> Result<()> {
            let p = dir.join(name);
            persist::write_matrix(&p, rows, c, complex, data)?;
            persist::write_sidecar(&p, &meta)
        };
        write("a0.bin", false, cols, &self.a0)?;
        write("a1.bin", true, cols, &flat(&self.a1))?;
        write("a2.bin", true, cols, &flat(&self.a2))?;
        let f = s.boundary_data();
        write("f.bin", true, f.nb(), &flat(&f.lateral[..rows * f.nb()]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub spec: ProbeSpec,
    pub t_start: f64,
    pub offset: Point,
    pub dims: (usize, usize),
    pub spacing: (f64, f64),
    pub dt: f64,
    pub nt: usize,
    pub q_hash: String,
}

/// Norm of the ansatz error `(d_t^2 - Lap + q) G` on `(0, t0 + delta) x M` and diagnostics.
pub fn ansatz_residual(probe: &GoProbe) -> AnsatzResidual {
    let rho = probe.setup.spec.rho;
    let l2 = probe.patch_norm(&probe.remainder_amplitude());
    let g = probe.assemble();
    let discrete = probe.setup.wave_apply(&g, &probe.q);
    let (transport_a0, transport_a1) = probe.transport_defects();
    AnsatzResidual {
        l2,
        scaled: rho * l2,
        discrete_l2: probe.patch_norm(&discrete),
        transport_a0,
        transport_a1,
        eikonal_defect: probe.eikonal_defect(),
        a2_h2: probe.a2_h2(),
    }
}

/// Correction `R = u - G` driven by the ansatz error, with zero data.
#[derive(Debug, Clone)]
pub struct RemainderSolution {
    pub field: WaveField,
    /// `L^2((0, t0 + delta) x dM)` norm of the normal derivative of `R`.
    pub trace_norm: f64,
    pub scaled_trace: f64,
    /// Largest `|R|` on the boundary and at the first level.
    pub boundary_max: f64,
    pub initial_max: f64,
}

/// Solves `(d_t^2 - Lap + q) R = -(d_t^2 - Lap + q) G` with zero initial and boundary values.
pub fn solve_remainder(probe: &GoProbe) -> Result<RemainderSolution> {
    let s = &probe.setup;
    let rho = s.spec.rho;
    let ns = s.grid.ns();
    let amp = probe.remainder_amplitude();
    let mut source = vec![Complex64::default(); amp.len()];
    source.par_chunks_mut(ns).enumerate().for_each(|(n, row)| {
        let t = s.time(n);
        for (k, v) in row.iter_mut().enumerate() {
            let a = amp[n * ns + k];
            if a != Complex64::default() {
                *v = -a * Complex64::from_polar(1.0, rho * (t - s.depth(k)));
            }
        }
    });
    let q = Potential::sampled(s.grid.clone(), probe.q.clone())?;
    let field = solve_linear(&q, &LinearData::zero(s.grid.clone()), Some(&source))?;
    let trace = normal_derivative_trace(&field, &s.portion)?;
    let trace_norm = trace.l2_norm_until(Some(s.spec.t0 + s.spec.delta - s.t_start));
    let sp = &s.grid.space;
    let mut boundary_max: f64 = 0.0;
    for n in 0..field.levels() {
        for &b in sp.boundary_nodes() {
            boundary_max = boundary_max.max(field.re[n * ns + b].abs()).max(field.im.as_ref().map_or(0.0, |im| im[n * ns + b].abs()));
        }
    }
    let initial_max = field.level(0).iter().chain(field.level_im(0).unwrap_or(&[])).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(RemainderSolution { field, trace_norm, scaled_trace: rho * trace_norm, boundary_max, initial_max })
}

/// Inward normal derivative of `a_{1,1} - a_{2,1}` at `(t0, x0)`.
pub fn first_amplitude_jump(p1: &GoProbe, p2: &GoProbe) -> Result<Complex64> {
    let s = &p1.setup;
    if !Arc::ptr_eq(s, &p2.setup) {
        return Err(Error::Config("probes were built separately".into()));
    }
    let line = s.x0_node()?;
    let ns = s.grid.ns();
    let lvl = s.level_of(s.spec.t0);
    let d = |m: usize| {
        let k = line.node(m);
        at_time(&p1.a1, ns, s.grid.nt, k, lvl) - at_time(&p2.a1, ns, s.grid.nt, k, lvl)
    };
    Ok((-3.0 * d(0) + 4.0 * d(1) - d(2)) / (2.0 * line.h))
}

/// Probe data on a grid of the whole domain.
pub fn probe_boundary_data(probe: &GoProbe, grid: Arc<SpaceTimeGrid>) -> LinearData {
    probe.setup.boundary_data_on(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Endpoint;

    fn interval_spec(rho: f64, delta: f64) -> (Domain, ProbeSpec, Arc<SpaceTimeGrid>) {
        let d = Domain::interval(PI).unwrap();
        let base = Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, 65).unwrap(), 1.2, 1.2, 0.5).unwrap());
        let spec = ProbeSpec {
            t0: 0.5,
            x0: BoundaryParam::End { end: Endpoint::Left },
            delta,
            rho,
            horizon: 1.2,
            gamma: BoundaryPortion::Endpoints { left: true, right: false },
            options: ProbeOptions::default(),
        };
        (d, spec, base)
    }

    #[test]
    fn width_invariant_is_enforced() {
        let (d, mut spec, _) = interval_spec(100.0, 0.02);
        assert!(ProbeSetup::new(&d, &spec).is_ok());
        spec.delta = max_delta(&d, 0.5, 1.2) * 1.01;
        assert!(matches!(ProbeSetup::new(&d, &spec), Err(Error::Config(_))));
        spec.delta = 0.02;
        spec.gamma = BoundaryPortion::Endpoints { left: false, right: true };
        assert!(matches!(ProbeSetup::new(&d, &spec), Err(Error::Geometry(_))));
    }

    #[test]
    fn boundary_data_support_and_size() {
        let (d, spec, base) = interval_spec(100.0, 0.02);
        let s = ProbeSetup::new(&d, &spec).unwrap();
        let f = s.boundary_data_on(base.clone());
        for n in 0..=base.nt {
            let t = base.time(n);
            let (l, r) = (f.lateral[2 * n], f.lateral[2 * n + 1]);
            assert!(l.norm() <= 1.0 + 1e-15 && r.norm() == 0.0);
            if t < 0.46 {
                assert_eq!(l.norm(), 0.0);
            }
            if (t - 0.5).abs() <= 0.02 {
                assert!((l.norm() - 1.0).abs() < 1e-14);
                assert!((l - Complex64::from_polar(1.0, 100.0 * t)).norm() < 1e-12);
            }
            if t > 0.5 + 4.0 * 0.02 {
                assert_eq!(l.norm(), 0.0);
            }
        }
    }

    #[test]
    fn flat_leading_amplitude_is_constant_along_rays() {
        let (d, spec, base) = interval_spec(100.0, 0.02);
        let (p, _) = build_probe(&d, (&Potential::zero(), &Potential::zero()), &spec, base).unwrap();
        let s = &p.setup;
        let ns = s.grid.ns();
        for n in 0..=s.grid.nt {
            for k in 0..ns {
                let xn = s.depth(k);
                if s.lines[k].is_some() {
                    assert!((p.a0[n * ns + k] - s.chi(s.time(n) - xn - 0.5)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn first_amplitudes_vanish_on_the_boundary_and_recover_the_constant() {
        let (d, spec, base) = interval_spec(200.0, 0.02);
        let (p1, p2) = build_probe(&d, (&Potential::constant(0.5), &Potential::zero()), &spec, base).unwrap();
        assert!(p1.boundary_vanishing() <= 1e-12 * p1.scale());
        assert!(p2.boundary_vanishing() <= 1e-12 * p2.scale());
        let jump = first_amplitude_jump(&p1, &p2).unwrap();
        assert!((jump - 0.25 * I).norm() <= 0.02 * 0.25, "{jump}");
    }

    #[test]
    fn free_flat_probe_is_exact() {
        // in one dimension chi(t - x - t0) e^{i rho (t - x)} solves the free equation
        let (d, spec, base) = interval_spec(150.0, 0.02);
        let (p, _) = build_probe(&d, (&Potential::zero(), &Potential::zero()), &spec, base).unwrap();
        let r = ansatz_residual(&p);
        assert_eq!((r.l2, r.a2_h2), (0.0, 0.0));
        assert!(r.eikonal_defect < 1e-10);
        let sol = solve_remainder(&p).unwrap();
        assert_eq!((sol.trace_norm, sol.boundary_max, sol.initial_max), (0.0, 0.0, 0.0));
    }

    #[test]
    fn differenced_transport_defect_is_second_order() {
        let defect = |ppw: f64| {
            let (d, mut spec, base) = interval_spec(150.0, 0.02);
            spec.options.points_per_wavelength = ppw;
            let (p, _) = build_probe(&d, (&Potential::zero(), &Potential::zero()), &spec, base).unwrap();
            ansatz_residual(&p).transport_a0
        };
        let ratio = defect(40.0) / defect(80.0);
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn disk_probe_builds_with_curved_amplitude() {
        let d = Domain::disk(1.0).unwrap();
        let base = Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, 17).unwrap(), 1.0, 1.0, 0.5).unwrap());
        let mut options = ProbeOptions { points_per_wavelength: 12.0, ..Default::default() };
        options.radius = Some(0.3);
        let spec = ProbeSpec { t0: 0.5, x0: BoundaryParam::Angle { theta: 0.0 }, delta: 0.025, rho: 30.0, horizon: 1.0, gamma: BoundaryPortion::Whole, options };
        let (p1, p2) = build_probe(&d, (&Potential::constant(1.0), &Potential::zero()), &spec, base).unwrap();
        let s = &p1.setup;
        let ns = s.grid.ns();
        // a0 = chi phi beta^{-1/4} with beta = (1 - x_n)^2
        let n = s.grid.nt / 2;
        for k in 0..ns {
            if let Some(l) = s.lines[k] {
                let xn = l.xn();
                let want = s.chi(s.time(n) - xn - 0.5) * s.phi(s.sigma[k]).v / (1.0 - xn).sqrt();
                assert!((p1.a0[n * ns + k] - want).abs() < 1e-12);
            }
        }
        assert!(p1.boundary_vanishing() == 0.0);
        let jump = first_amplitude_jump(&p1, &p2).unwrap();
        assert!((jump - 0.5 * I).norm() < 0.02 * 0.5, "{jump}");
    }

    #[test]
    fn bundle_round_trip() {
        let (d, spec, base) = interval_spec(100.0, 0.02);
        let (p, _) = build_probe(&d, (&Potential::constant(0.5), &Potential::zero()), &spec, base).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save_bundle(dir.path()).unwrap();
        let (rows, cols, complex, data) = persist::read_matrix(&dir.path().join("a1.bin")).unwrap();
        assert!(complex && rows == p.setup.grid.nt + 1 && cols == p.setup.grid.ns());
        assert_eq!(data[2 * cols + 3], p.a1[cols + 1].re);
        let meta: BundleMeta = persist::read_sidecar(&dir.path().join("a1.bin")).unwrap();
        assert_eq!(meta.spec, spec);
    }
}
