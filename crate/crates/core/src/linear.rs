//! Linear wave equation with a time-dependent potential and the associated
//! boundary (Dirichlet-to-Neumann) operators.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::WaveField;
use crate::geometry::{BoundaryPortion, Layout, Point, SpaceTimeGrid};
use crate::nonlinearity::DirichletData;
use crate::persist;
use crate::sobolev;

type ScalarField = dyn Fn(f64, Point) -> f64 + Send + Sync;

/// Real potential `q(t, x)`: constant, sampled on its own space-time grid, or analytic.
#[derive(Clone)]
pub enum Potential {
    Constant(f64),
    Sampled { grid: Arc<SpaceTimeGrid>, values: Arc<Vec<f64>> },
    Analytic { label: String, f: Arc<ScalarField> },
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Constant(c) => write!(f, "Potential::Constant({c})"),
            Potential::Sampled { grid, values } => write!(f, "Potential::Sampled({} levels x {} nodes, {} values)", grid.nt + 1, grid.ns(), values.len()),
            Potential::Analytic { label, .. } => write!(f, "Potential::Analytic({label})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub sup: f64,
    pub h2: f64,
}

fn same_sampling(a: &SpaceTimeGrid, b: &SpaceTimeGrid) -> bool {
    a.space.layout == b.space.layout && (a.dt - b.dt).abs() <= 1e-14 * a.dt
}

impl Potential {
    pub fn sampled(grid: Arc<SpaceTimeGrid>, values: Vec<f64>) -> Result<Self> {
        let n = (grid.nt + 1) * grid.ns();
        if values.len() != n {
            return Err(Error::Shape(format!("potential has {} samples, grid expects {n}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("potential contains non-finite values".into()));
        }
        Ok(Potential::Sampled { grid, values: Arc::new(values) })
    }

    pub fn zero() -> Self {
        Potential::Constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Potential::Constant(c)
    }

    /// Closed-form potential; `label` identifies it in cache keys.
    pub fn analytic(label: &str, f: impl Fn(f64, Point) -> f64 + Send + Sync + 'static) -> Self {
        Potential::Analytic { label: label.to_string(), f: Arc::new(f) }
    }

    /// Samples `f` on every node of `grid`.
    pub fn from_fn(grid: Arc<SpaceTimeGrid>, f: impl Fn(f64, Point) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity((grid.nt + 1) * grid.ns());
        for n in 0..=grid.nt {
            let t = grid.time(n);
            values.extend(grid.space.coords().iter().map(|&p| f(t, p)));
        }
        Self::sampled(grid, values)
    }

    pub fn grid(&self) -> Option<&Arc<SpaceTimeGrid>> {
        match self {
            Potential::Sampled { grid, .. } => Some(grid),
            _ => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Potential::Sampled { values, .. } => Some(values),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Potential::Constant(c) => *c == 0.0,
            Potential::Sampled { values, .. } => values.iter().all(|v| *v == 0.0),
            Potential::Analytic { .. } => false,
        }
    }

    /// Value at `(t, p)`; sampled potentials interpolate multilinearly in `(t, x)`
    /// and clamp `t` to their horizon.
    pub fn eval(&self, t: f64, p: Point) -> f64 {
        match self {
            Potential::Constant(c) => *c,
            Potential::Analytic { f, .. } => f(t, p),
            Potential::Sampled { grid, values } => {
                let ns = grid.ns();
                let st = grid.space.interpolation_stencil(p);
                let s = (t / grid.dt).clamp(0.0, grid.nt as f64);
                let n = (s.floor() as usize).min(grid.nt - 1);
                let fr = s - n as f64;
                let at = |m: usize| st.iter().map(|(k, w)| w * values[m * ns + k]).sum::<f64>();
                (1.0 - fr) * at(n) + fr * at(n + 1)
            }
        }
    }

    /// Samples on `target`.
    pub fn sample_on(&self, target: Arc<SpaceTimeGrid>) -> Result<Self> {
        if let Potential::Sampled { grid, .. } = self {
            if Arc::ptr_eq(grid, &target) {
                return Ok(self.clone());
            }
        }
        Self::from_fn(target, |t, p| self.eval(t, p))
    }

    /// Sup and discrete `H^2` norm of the samples on `grid`.
    pub fn smoothness_report(&self, grid: Arc<SpaceTimeGrid>) -> Result<SmoothnessReport> {
        let s = self.sample_on(grid.clone())?;
        let v = s.values().expect("sampled");
        Ok(SmoothnessReport { sup: v.iter().fold(0.0f64, |m, x| m.max(x.abs())), h2: sobolev::space_time_norm(v, &grid, 2) })
    }

    pub fn hash(&self) -> String {
        match self {
            Potential::Constant(c) => persist::hash_parts(&[b"constant", &c.to_le_bytes()]),
            Potential::Analytic { label, .. } => persist::hash_parts(&[b"analytic", label.as_bytes()]),
            Potential::Sampled { grid, values } => {
                let meta = serde_json::to_string(&(grid.space.layout, grid.dt, grid.nt)).unwrap_or_default();
                persist::hash_parts(&[b"sampled", meta.as_bytes(), persist::hash_f64(values).as_bytes()])
            }
        }
    }

    /// Horizon covered by the samples (infinite for closed forms).
    pub fn horizon(&self) -> f64 {
        match self {
            Potential::Sampled { grid, .. } => grid.t_final,
            _ => f64::INFINITY,
        }
    }
}

/// Per-solve evaluator of `q` at the updated nodes of each level.
enum LevelSampler<'a> {
    Constant(f64),
    Same { values: &'a [f64], ns: usize },
    Foreign { values: &'a [f64], ns: usize, dt: f64, nt: usize, stencils: Vec<Vec<(usize, f64)>> },
    Analytic { f: &'a ScalarField, coords: &'a [Point] },
}

impl<'a> LevelSampler<'a> {
    fn new(q: &'a Potential, grid: &'a SpaceTimeGrid, nodes: &[usize]) -> Result<Self> {
        Ok(match q {
            Potential::Constant(c) => LevelSampler::Constant(*c),
            Potential::Analytic { f, .. } => LevelSampler::Analytic { f: f.as_ref(), coords: grid.space.coords() },
            Potential::Sampled { grid: qg, values } => {
                if qg.t_final < grid.t_final * (1.0 - 1e-12) {
                    return Err(Error::Shape(format!("potential covers [0, {}], solve needs [0, {}]", qg.t_final, grid.t_final)));
                }
                if same_sampling(qg, grid) {
                    LevelSampler::Same { values, ns: qg.ns() }
                } else {
                    let coords = grid.space.coords();
                    let mut stencils = vec![Vec::new(); grid.ns()];
                    for &k in nodes {
                        stencils[k] = qg.space.interpolation_stencil(coords[k]);
                    }
                    LevelSampler::Foreign { values, ns: qg.ns(), dt: qg.dt, nt: qg.nt, stencils }
                }
            }
        })
    }

    fn fill(&self, n: usize, t: f64, nodes: &[usize], out: &mut [f64]) {
        match self {
            LevelSampler::Constant(c) => nodes.iter().for_each(|&k| out[k] = *c),
            LevelSampler::Same { values, ns } => nodes.iter().for_each(|&k| out[k] = values[n * ns + k]),
            LevelSampler::Analytic { f, coords } => nodes.iter().for_each(|&k| out[k] = f(t, coords[k])),
            LevelSampler::Foreign { values, ns, dt, nt, stencils } => {
                let s = (t / dt).clamp(0.0, *nt as f64);
                let m = (s.floor() as usize).min(nt - 1);
                let fr = s - m as f64;
                let (lo, hi) = (&values[m * ns..(m + 1) * ns], &values[(m + 1) * ns..(m + 2) * ns]);
                for &k in nodes {
                    let (a, b) = stencils[k].iter().fold((0.0, 0.0), |(a, b), (j, w)| (a + w * lo[*j], b + w * hi[*j]));
                    out[k] = (1.0 - fr) * a + fr * b;
                }
            }
        }
    }
}

/// Dirichlet data `(h, h0, h1)` for the linear problem, possibly complex.
#[derive(Debug, Clone)]
pub struct LinearData {
    pub grid: Arc<SpaceTimeGrid>,
    /// `levels x nb`, columns ordered as the grid's boundary nodes.
    pub lateral: Vec<Complex64>,
    pub h0: Vec<Complex64>,
    pub h1: Vec<Complex64>,
}

impl LinearData {
    pub fn zero(grid: Arc<SpaceTimeGrid>) -> Self {
        let nb = grid.space.boundary_nodes().len();
        let ns = grid.ns();
        let levels = grid.nt + 1;
        LinearData { grid, lateral: vec![Complex64::default(); levels * nb], h0: vec![Complex64::default(); ns], h1: vec![Complex64::default(); ns] }
    }

    pub fn from_real(d: &DirichletData) -> Self {
        let c = |v: &[f64]| v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        LinearData { grid: d.grid.clone(), lateral: c(&d.f), h0: c(&d.u0), h1: c(&d.u1) }
    }

    /// Lateral data from a closure `(t, boundary index, point)`, zero initial data.
    pub fn lateral_fn(grid: Arc<SpaceTimeGrid>, f: impl Fn(f64, usize, Point) -> Complex64) -> Self {
        let mut d = Self::zero(grid.clone());
        let nb = grid.space.boundary_nodes().len();
        for n in 0..=grid.nt {
            let t = grid.time(n);
            for (i, &b) in grid.space.boundary_nodes().iter().enumerate() {
                d.lateral[n * nb + i] = f(t, i, grid.space.coords()[b]);
            }
        }
        d
    }

    pub fn nb(&self) -> usize {
        self.grid.space.boundary_nodes().len()
    }

    pub fn levels(&self) -> usize {
        self.lateral.len() / self.nb()
    }

    pub fn has_initial_data(&self) -> bool {
        self.h0.iter().chain(&self.h1).any(|v| v.norm() != 0.0)
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        let m = |v: &[Complex64]| v.iter().map(|x| x * s).collect();
        LinearData { grid: self.grid.clone(), lateral: m(&self.lateral), h0: m(&self.h0), h1: m(&self.h1) }
    }

    pub fn add(&self, other: &LinearData) -> Result<Self> {
        if self.lateral.len() != other.lateral.len() || self.h0.len() != other.h0.len() {
            return Err(Error::Shape("linear data on different grids".into()));
        }
        let a = |x: &[Complex64], y: &[Complex64]| x.iter().zip(y).map(|(p, q)| p + q).collect();
        Ok(LinearData { grid: self.grid.clone(), lateral: a(&self.lateral, &other.lateral), h0: a(&self.h0, &other.h0), h1: a(&self.h1, &other.h1) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

/// Right-hand side `s` of `w_tt - Lap w + q w = s`, delivered one level at a time.
pub trait Forcing: Sync {
    /// Adds the chosen part of `s(t_n, .)` into `out`.
    fn add_level(&self, n: usize, part: Part, out: &mut [f64]);
    /// Levels before this one carry no forcing.
    fn first_level(&self) -> usize;
    /// Bounding box `[xmin, xmax, ymin, ymax]` of the support, `None` if unknown.
    fn bbox(&self) -> Option<[f64; 4]>;
    fn has_imaginary(&self) -> bool;
}

/// Forcing stored densely as `levels x ns` complex samples.
pub struct DenseForcing<'a> {
    pub values: &'a [Complex64],
    pub ns: usize,
}

impl Forcing for DenseForcing<'_> {
    fn add_level(&self, n: usize, part: Part, out: &mut [f64]) {
        let row = &self.values[n * self.ns..(n + 1) * self.ns];
        for (o, v) in out.iter_mut().zip(row) {
            *o += match part {
                Part::Re => v.re,
                Part::Im => v.im,
            };
        }
    }

    fn first_level(&self) -> usize {
        self.values.chunks(self.ns).position(|row| row.iter().any(|v| v.norm() != 0.0)).unwrap_or(self.values.len() / self.ns)
    }

    fn bbox(&self) -> Option<[f64; 4]> {
        None
    }

    fn has_imaginary(&self) -> bool {
        self.values.iter().any(|v| v.im != 0.0)
    }
}

/// Solver options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Restrict updates to the light cone of the data support plus a margin; nodes
    /// outside stay zero. Applies to line and Cartesian layouts with zero initial data.
    pub window: bool,
    pub margin_cells: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { window: false, margin_cells: 16 }
    }
}

/// Which nodes a solve updates.
struct Plan {
    /// Non-boundary nodes advanced by the stencil.
    interior: Vec<usize>,
    /// Positions in `boundary_nodes()` whose lateral data are imposed.
    boundary: Vec<usize>,
}

fn full_plan(grid: &SpaceTimeGrid) -> Plan {
    let sp = &grid.space;
    Plan { interior: (0..sp.len()).filter(|&k| !sp.is_boundary(k)).collect(), boundary: (0..sp.boundary_nodes().len()).collect() }
}

fn window_plan(grid: &SpaceTimeGrid, data: &LinearData, forcing: Option<&dyn Forcing>, opts: &SolveOptions) -> Plan {
    let sp = &grid.space;
    if !opts.window || data.has_initial_data() || matches!(sp.layout, Layout::Polar { .. }) {
        return full_plan(grid);
    }
    let nb = data.nb();
    let coords = sp.coords();
    let mut bb = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    let mut t_first = f64::INFINITY;
    let mut grow = |p: Point, t: f64, bb: &mut [f64; 4]| {
        bb[0] = bb[0].min(p[0]);
        bb[1] = bb[1].max(p[0]);
        bb[2] = bb[2].min(p[1]);
        bb[3] = bb[3].max(p[1]);
        t_first = t_first.min(t);
    };
    for n in 0..=grid.nt {
        for i in 0..nb {
            if data.lateral[n * nb + i].norm() != 0.0 {
                grow(coords[sp.boundary_nodes()[i]], grid.time(n), &mut bb);
            }
        }
    }
    if let Some(f) = forcing {
        match f.bbox() {
            Some(b) => {
                grow([b[0], b[2]], grid.time(f.first_level()), &mut bb);
                grow([b[1], b[3]], grid.time(f.first_level()), &mut bb);
            }
            None => return full_plan(grid),
        }
    }
    if !t_first.is_finite() {
        return Plan { interior: Vec::new(), boundary: Vec::new() };
    }
    let reach = (grid.t_final - t_first).max(0.0);
    let idx = |x: f64, h: f64, n: usize, up: bool| -> usize {
        let s = x / h;
        let i = if up { s.ceil() } else { s.floor() };
        (i.max(0.0) as usize).min(n - 1)
    };
    match sp.layout {
        Layout::Line { n, dx } => {
            let m = opts.margin_cells as f64 * dx;
            let i0 = idx(bb[0] - reach - m, dx, n, false);
            let i1 = idx(bb[1] + reach + m, dx, n, true);
            let interior = (i0 + 1..i1).filter(|&k| !sp.is_boundary(k)).collect();
            let boundary = (0..nb).filter(|&i| (i0..=i1).contains(&sp.boundary_nodes()[i])).collect();
            Plan { interior, boundary }
        }
        Layout::Cartesian { nx, ny, dx, dy } => {
            let mx = opts.margin_cells as f64 * dx;
            let my = opts.margin_cells as f64 * dy;
            let i0 = idx(bb[0] - reach - mx, dx, nx, false);
            let i1 = idx(bb[1] + reach + mx, dx, nx, true);
            let j0 = idx(bb[2] - reach - my, dy, ny, false);
            let j1 = idx(bb[3] + reach + my, dy, ny, true);
            let mut interior = Vec::new();
            for j in j0 + 1..j1 {
                for i in i0 + 1..i1 {
                    let k = j * nx + i;
                    if !sp.is_boundary(k) {
                        interior.push(k);
                    }
                }
            }
            let boundary = (0..nb)
                .filter(|&i| {
                    let k = sp.boundary_nodes()[i];
                    let (bi, bj) = (k % nx, k / nx);
                    (i0..=i1).contains(&bi) && (j0..=j1).contains(&bj)
                })
                .collect();
            Plan { interior, boundary }
        }
        Layout::Polar { .. } => full_plan(grid),
    }
}

/// Leapfrog for one real part, streaming each level to `visit`.
#[allow(clippy::too_many_arguments)]
fn stream_part(
    grid: &SpaceTimeGrid,
    q: &LevelSampler<'_>,
    plan: &Plan,
    lateral: &[f64],
    h0: &[f64],
    h1: &[f64],
    forcing: Option<(&dyn Forcing, Part)>,
    visit: &mut dyn FnMut(usize, &[f64]),
) {
    let sp = &grid.space;
    let ns = sp.len();
    let nb = sp.boundary_nodes().len();
    let nt = grid.nt;
    let bn = sp.boundary_nodes();
    let dt2 = grid.dt * grid.dt;
    let zero_initial = h0.iter().chain(h1).all(|v| *v == 0.0);
    let lat_zero = |n: usize| plan.boundary.iter().all(|&i| lateral[n * nb + i] == 0.0);
    let f_first = forcing.map_or(usize::MAX, |(f, _)| f.first_level());
    let mut first = 0;
    if zero_initial {
        while first < nt && lat_zero(first) && lat_zero(first + 1) && f_first > first {
            first += 1;
        }
    }
    let zeros = vec![0.0; ns];
    let mut prev = vec![0.0; ns];
    let mut cur = vec![0.0; ns];
    let mut next = vec![0.0; ns];
    let mut qv = vec![0.0; ns];
    let mut src = vec![0.0; ns];
    let mut lap = vec![0.0; ns];
    let laplace_at = |u: &[f64], lap: &mut [f64]| match sp.layout {
        Layout::Line { dx, .. } => {
            let c = 1.0 / (dx * dx);
            for &k in &plan.interior {
                lap[k] = (u[k - 1] - 2.0 * u[k] + u[k + 1]) * c;
            }
        }
        Layout::Cartesian { nx, dx, dy, .. } => {
            let (cx, cy) = (1.0 / (dx * dx), 1.0 / (dy * dy));
            for &k in &plan.interior {
                lap[k] = (u[k - 1] - 2.0 * u[k] + u[k + 1]) * cx + (u[k - nx] - 2.0 * u[k] + u[k + nx]) * cy;
            }
        }
        Layout::Polar { .. } => sp.laplacian(u, lap),
    };
    let load_forcing = |n: usize, src: &mut [f64]| {
        if let Some((f, part)) = forcing {
            if n >= f.first_level() {
                src.iter_mut().for_each(|v| *v = 0.0);
                f.add_level(n, part, src);
                return true;
            }
        }
        false
    };
    for n in 0..first {
        visit(n, &zeros);
    }
    if first >= nt && lat_zero(nt) {
        visit(nt, &zeros);
        return;
    }
    let start = if first == 0 {
        cur.copy_from_slice(h0);
        for &i in &plan.boundary {
            cur[bn[i]] = lateral[i];
        }
        visit(0, &cur);
        laplace_at(&cur, &mut lap);
        q.fill(0, 0.0, &plan.interior, &mut qv);
        let has_src = load_forcing(0, &mut src);
        for &k in &plan.interior {
            let s = if has_src { src[k] } else { 0.0 };
            next[k] = cur[k] + grid.dt * h1[k] + 0.5 * dt2 * (lap[k] - qv[k] * cur[k] + s);
        }
        for &i in &plan.boundary {
            next[bn[i]] = lateral[nb + i];
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        visit(1, &cur);
        1
    } else {
        visit(first, &cur);
        first
    };
    for n in start..nt {
        laplace_at(&cur, &mut lap);
        q.fill(n, grid.time(n), &plan.interior, &mut qv);
        if load_forcing(n, &mut src) {
            for &k in &plan.interior {
                next[k] = 2.0 * cur[k] - prev[k] + dt2 * (lap[k] - qv[k] * cur[k] + src[k]);
            }
        } else {
            for &k in &plan.interior {
                next[k] = 2.0 * cur[k] - prev[k] + dt2 * (lap[k] - qv[k] * cur[k]);
            }
        }
        for &i in &plan.boundary {
            next[bn[i]] = lateral[(n + 1) * nb + i];
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        visit(n + 1, &cur);
    }
}

fn re(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|z| z.re).collect()
}

fn im(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|z| z.im).collect()
}

fn check_inputs(grid: &SpaceTimeGrid, data: &LinearData) -> Result<()> {
    if grid.dt > grid.space.stable_dt() * (1.0 + 1e-12) {
        return Err(Error::Config(format!("time step {} violates the CFL bound {}", grid.dt, grid.space.stable_dt())));
    }
    let ns = grid.ns();
    if data.levels() < grid.nt + 1 || data.h0.len() != ns || data.h1.len() != ns {
        return Err(Error::Shape("linear data do not match the grid".into()));
    }
    Ok(())
}

fn needs_imaginary(data: &LinearData, forcing: Option<&dyn Forcing>) -> bool {
    data.lateral.iter().chain(&data.h0).chain(&data.h1).any(|z| z.im != 0.0) || forcing.is_some_and(|f| f.has_imaginary())
}

type Visitor<'a> = Box<dyn FnMut(usize, &[f64]) + Send + 'a>;

/// Runs the real and imaginary solves (in parallel) with per-level callbacks.
fn stream_complex(q: &Potential, data: &LinearData, forcing: Option<&dyn Forcing>, opts: &SolveOptions, mut visit_re: Visitor<'_>, visit_im: Option<Visitor<'_>>) -> Result<()> {
    let grid = &data.grid;
    check_inputs(grid, data)?;
    let plan = window_plan(grid, data, forcing, opts);
    let sampler = LevelSampler::new(q, grid, &plan.interior)?;
    let run = |lat: Vec<f64>, h0: Vec<f64>, h1: Vec<f64>, part: Part, visit: &mut Visitor<'_>| {
        stream_part(grid, &sampler, &plan, &lat, &h0, &h1, forcing.map(|f| (f, part)), visit);
    };
    match visit_im {
        Some(mut vi) => {
            rayon::join(
                || run(re(&data.lateral), re(&data.h0), re(&data.h1), Part::Re, &mut visit_re),
                || run(im(&data.lateral), im(&data.h0), im(&data.h1), Part::Im, &mut vi),
            );
        }
        None => run(re(&data.lateral), re(&data.h0), re(&data.h1), Part::Re, &mut visit_re),
    }
    Ok(())
}

/// Solves `w_tt - Lap w + q w = source` with Dirichlet data and stores every level;
/// complex data are handled as two real solves.
pub fn solve_linear(q: &Potential, data: &LinearData, source: Option<&[Complex64]>) -> Result<WaveField> {
    let grid = data.grid.clone();
    let ns = grid.ns();
    if let Some(s) = source {
        if s.len() < (grid.nt + 1) * ns {
            return Err(Error::Shape("source term does not cover the grid".into()));
        }
    }
    let dense = source.map(|values| DenseForcing { values, ns });
    let forcing = dense.as_ref().map(|d| d as &dyn Forcing);
    let complex = needs_imaginary(data, forcing);
    let n_all = (grid.nt + 1) * ns;
    let mut w_re = vec![0.0; n_all];
    let mut w_im = vec![0.0; if complex { n_all } else { 0 }];
    {
        let wr = &mut w_re;
        let wi = &mut w_im;
        let vr: Visitor = Box::new(move |n, level| wr[n * ns..(n + 1) * ns].copy_from_slice(level));
        let vi: Option<Visitor> = if complex { Some(Box::new(move |n, level| wi[n * ns..(n + 1) * ns].copy_from_slice(level))) } else { None };
        stream_complex(q, data, forcing, &SolveOptions::default(), vr, vi)?;
    }
    if complex {
        WaveField::complex(grid, w_re, w_im)
    } else {
        WaveField::real(grid, w_re)
    }
}

/// Outward normal derivative on a boundary portion at every time level.
#[derive(Debug, Clone)]
pub struct BoundaryTrace {
    pub grid: Arc<SpaceTimeGrid>,
    pub portion: BoundaryPortion,
    /// Positions in `grid.space.boundary_nodes()`.
    pub indices: Vec<usize>,
    /// `levels x indices.len()`.
    pub values: Vec<Complex64>,
}

impl BoundaryTrace {
    pub fn width(&self) -> usize {
        self.indices.len()
    }

    pub fn levels(&self) -> usize {
        if self.indices.is_empty() { 0 } else { self.values.len() / self.indices.len() }
    }

    pub fn at(&self, level: usize, j: usize) -> Complex64 {
        self.values[level * self.width() + j]
    }

    /// `L^2((0, t_end) x gamma)` norm; `t_end = None` means the whole horizon.
    pub fn l2_norm_until(&self, t_end: Option<f64>) -> f64 {
        let bw = self.grid.space.boundary_weights();
        let m = self.width();
        let last = match t_end {
            Some(t) => ((t / self.grid.dt).floor() as usize).min(self.levels() - 1),
            None => self.levels() - 1,
        };
        let mut s = 0.0;
        for n in 0..=last {
            let wt = if n == 0 || n == last { 0.5 } else { 1.0 } * self.grid.dt;
            for j in 0..m {
                s += wt * bw[self.indices[j]] * self.values[n * m + j].norm_sqr();
            }
        }
        s.sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_until(None)
    }

    pub fn sub(&self, other: &BoundaryTrace) -> Result<BoundaryTrace> {
        if self.values.len() != other.values.len() || self.indices != other.indices {
            return Err(Error::Shape("traces live on different portions or grids".into()));
        }
        Ok(BoundaryTrace {
            grid: self.grid.clone(),
            portion: self.portion.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }
}

fn portion_positions(grid: &SpaceTimeGrid, portion: &BoundaryPortion) -> Result<Vec<usize>> {
    let sp = &grid.space;
    sp.domain.check_portion(portion)?;
    let indices = sp.portion_indices(portion);
    if indices.is_empty() {
        return Err(Error::Geometry("boundary portion contains no grid nodes".into()));
    }
    Ok(indices)
}

/// Outward normal derivative of `w` on `portion` (three-point one-sided stencil).
pub fn normal_derivative_trace(w: &WaveField, portion: &BoundaryPortion) -> Result<BoundaryTrace> {
    let sp = &w.grid.space;
    let indices = portion_positions(&w.grid, portion)?;
    let levels = w.levels();
    let mut values = Vec::with_capacity(levels * indices.len());
    for n in 0..levels {
        let dre = sp.outward_normal_derivative(w.level(n));
        let dim = w.level_im(n).map(|v| sp.outward_normal_derivative(v));
        for &j in &indices {
            values.push(Complex64::new(dre[j], dim.as_ref().map_or(0.0, |d| d[j])));
        }
    }
    Ok(BoundaryTrace { grid: w.grid.clone(), portion: portion.clone(), indices, values })
}

/// `(w(T), d_t w(T))` with a second-order backward difference in time.
pub fn final_state(w: &WaveField) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = w.levels() - 1;
    let z = |lvl: usize| -> Vec<Complex64> {
        let r = w.level(lvl);
        match w.level_im(lvl) {
            Some(i) => r.iter().zip(i).map(|(a, b)| Complex64::new(*a, *b)).collect(),
            None => r.iter().map(|a| Complex64::new(*a, 0.0)).collect(),
        }
    };
    backward_state(&z(n), &z(n - 1), &z(n - 2), w.grid.dt)
}

fn backward_state(a: &[Complex64], b: &[Complex64], c: &[Complex64], dt: f64) -> (Vec<Complex64>, Vec<Complex64>) {
    let vel = (0..a.len()).map(|k| (3.0 * a[k] - 4.0 * b[k] + c[k]) / (2.0 * dt)).collect();
    (a.to_vec(), vel)
}

/// Per-part collector of the trace and the last three levels.
struct Collector<'a> {
    grid: &'a SpaceTimeGrid,
    indices: &'a [usize],
    trace: Vec<f64>,
    tail: Vec<Vec<f64>>,
    keep_tail: bool,
}

impl<'a> Collector<'a> {
    fn new(grid: &'a SpaceTimeGrid, indices: &'a [usize], keep_tail: bool) -> Self {
        Collector { grid, indices, trace: Vec::with_capacity((grid.nt + 1) * indices.len()), tail: Vec::new(), keep_tail }
    }

    fn visit(&mut self, n: usize, level: &[f64]) {
        let d = self.grid.space.outward_normal_derivative(level);
        self.trace.extend(self.indices.iter().map(|&j| d[j]));
        if self.keep_tail && n + 3 > self.grid.nt {
            self.tail.push(level.to_vec());
        }
    }
}

/// Trace on `portion` (and optionally the final state) without storing the field.
pub fn linear_observe(
    q: &Potential,
    data: &LinearData,
    forcing: Option<&dyn Forcing>,
    portion: &BoundaryPortion,
    with_final_state: bool,
    opts: &SolveOptions,
) -> Result<(BoundaryTrace, Option<(Vec<Complex64>, Vec<Complex64>)>)> {
    let grid = data.grid.clone();
    let indices = portion_positions(&grid, portion)?;
    let complex = needs_imaginary(data, forcing);
    let mut cr = Collector::new(&grid, &indices, with_final_state);
    let mut ci = Collector::new(&grid, &indices, with_final_state);
    {
        let vr: Visitor = Box::new(|n, l| cr.visit(n, l));
        let vi: Option<Visitor> = if complex { Some(Box::new(|n, l| ci.visit(n, l))) } else { None };
        stream_complex(q, data, forcing, opts, vr, vi)?;
    }
    let values = if complex {
        cr.trace.iter().zip(&ci.trace).map(|(a, b)| Complex64::new(*a, *b)).collect()
    } else {
        cr.trace.iter().map(|a| Complex64::new(*a, 0.0)).collect()
    };
    let state = if with_final_state {
        let z = |k: usize| -> Vec<Complex64> {
            match complex {
                true => cr.tail[k].iter().zip(&ci.tail[k]).map(|(a, b)| Complex64::new(*a, *b)).collect(),
                false => cr.tail[k].iter().map(|a| Complex64::new(*a, 0.0)).collect(),
            }
        };
        Some(backward_state(&z(2), &z(1), &z(0), grid.dt))
    } else {
        None
    };
    Ok((BoundaryTrace { grid, portion: portion.clone(), indices, values }, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtnMode {
    LateralOnly,
    WithFinalState,
}

#[derive(Debug, Clone)]
pub struct DtnOutput {
    pub trace: BoundaryTrace,
    /// `(w(T), d_t w(T))` on all nodes.
    pub final_state: Option<(Vec<Complex64>, Vec<Complex64>)>,
}

/// Applies the boundary operator for potential `q` to `data`.
pub fn dtn_apply(q: &Potential, data: &LinearData, portion: &BoundaryPortion, mode: DtnMode) -> Result<DtnOutput> {
    dtn_apply_with(q, data, portion, mode, &SolveOptions::default())
}

pub fn dtn_apply_with(q: &Potential, data: &LinearData, portion: &BoundaryPortion, mode: DtnMode, opts: &SolveOptions) -> Result<DtnOutput> {
    if mode == DtnMode::LateralOnly && data.has_initial_data() {
        return Err(Error::Restriction("lateral-only mode requires vanishing initial data".into()));
    }
    let (trace, final_state) = linear_observe(q, data, None, portion, mode == DtnMode::WithFinalState, opts)?;
    Ok(DtnOutput { trace, final_state })
}

/// Columns are traces (flattened `levels x width`) of the basis data.
#[derive(Debug, Clone)]
pub struct DtnMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, complex entries interleaved.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtnSidecar {
    pub dims: (usize, usize),
    pub spacing: (f64, f64),
    pub dt: f64,
    pub nt: usize,
    pub portion: BoundaryPortion,
    pub q_hash: String,
    pub basis: String,
    pub rows: usize,
    pub cols: usize,
}

impl DtnMatrix {
    pub fn entry(&self, r: usize, c: usize) -> Complex64 {
        let k = 2 * (r * self.cols + c);
        Complex64::new(self.data[k], self.data[k + 1])
    }
}

/// Materializes the operator over a basis of lateral data, in parallel over basis elements.
pub fn materialize_dtn(q: &Potential, portion: &BoundaryPortion, basis: &[LinearData]) -> Result<DtnMatrix> {
    let traces: Vec<Result<BoundaryTrace>> =
        basis.par_iter().map(|b| dtn_apply(q, b, portion, DtnMode::LateralOnly).map(|o| o.trace)).collect();
    let traces: Vec<BoundaryTrace> = traces.into_iter().collect::<Result<_>>()?;
    let rows = traces.first().map_or(0, |t| t.values.len());
    let cols = traces.len();
    let mut data = vec![0.0; 2 * rows * cols];
    for (c, t) in traces.iter().enumerate() {
        for (r, v) in t.values.iter().enumerate() {
            data[2 * (r * cols + c)] = v.re;
            data[2 * (r * cols + c) + 1] = v.im;
        }
    }
    Ok(DtnMatrix { rows, cols, data })
}

/// Directory cache of materialized operators keyed by a content hash.
#[derive(Debug, Clone)]
pub struct DtnCache {
    pub dir: PathBuf,
}

impl DtnCache {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(DtnCache { dir: dir.to_path_buf() })
    }

    fn sidecar(grid: &SpaceTimeGrid, q: &Potential, portion: &BoundaryPortion, basis_label: &str, rows: usize, cols: usize) -> DtnSidecar {
        DtnSidecar {
            dims: grid.space.shape_dims(),
            spacing: grid.space.spacings(),
            dt: grid.dt,
            nt: grid.nt,
            portion: portion.clone(),
            q_hash: q.hash(),
            basis: basis_label.to_string(),
            rows,
            cols,
        }
    }

    pub fn key(grid: &SpaceTimeGrid, q: &Potential, portion: &BoundaryPortion, basis_label: &str) -> Result<String> {
        let meta = Self::sidecar(grid, q, portion, basis_label, 0, 0);
        Ok(persist::hash_parts(&[serde_json::to_string(&meta)?.as_bytes()]))
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("dtn-{key}.bin"))
    }

    /// Returns the cached matrix or materializes and stores it; the flag reports a cache hit.
    pub fn get_or_materialize(&self, q: &Potential, portion: &BoundaryPortion, basis_label: &str, basis: &[LinearData]) -> Result<(DtnMatrix, bool)> {
        let grid = basis.first().ok_or_else(|| Error::Config("empty basis".into()))?.grid.clone();
        let key = Self::key(&grid, q, portion, basis_label)?;
        let path = self.path_for(&key);
        if path.exists() {
            let meta: DtnSidecar = persist::read_sidecar(&path)?;
            if meta.q_hash == q.hash() && meta.basis == basis_label && &meta.portion == portion {
                let (rows, cols, _, data) = persist::read_matrix(&path)?;
                return Ok((DtnMatrix { rows, cols, data }, true));
            }
        }
        let m = materialize_dtn(q, portion, basis)?;
        persist::write_matrix(&path, m.rows, m.cols, true, &m.data)?;
        persist::write_sidecar(&path, &Self::sidecar(&grid, q, portion, basis_label, m.rows, m.cols))?;
        Ok((m, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domain, Face, SpatialGrid};
    use std::f64::consts::PI;

    fn grid(n: usize, t: f64) -> Arc<SpaceTimeGrid> {
        let d = Domain::interval(PI).unwrap();
        Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, n).unwrap(), t, t, 0.5).unwrap())
    }

    fn sine_initial(g: &Arc<SpaceTimeGrid>) -> LinearData {
        let mut d = LinearData::zero(g.clone());
        d.h0 = g.space.coords().iter().map(|p| Complex64::new(p[0].sin(), 0.0)).collect();
        d
    }

    fn max_err(w: &WaveField, exact: impl Fn(f64, f64) -> f64) -> f64 {
        let g = &w.grid;
        let ns = g.ns();
        let mut e: f64 = 0.0;
        for n in 0..=g.nt {
            for (k, p) in g.space.coords().iter().enumerate() {
                e = e.max((w.re[n * ns + k] - exact(g.time(n), p[0])).abs());
            }
        }
        e
    }

    #[test]
    fn zero_data_zero_solution() {
        let g = grid(33, 1.0);
        let q = Potential::from_fn(g.clone(), |t, p| t + p[0]).unwrap();
        let w = solve_linear(&q, &LinearData::zero(g), None).unwrap();
        assert!(w.re.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eigenmodes_with_and_without_potential() {
        let g = grid(129, 1.0);
        let d = sine_initial(&g);
        let w = solve_linear(&Potential::zero(), &d, None).unwrap();
        assert!(max_err(&w, |t, x| x.sin() * t.cos()) < 1e-4);
        for q in [Potential::constant(1.0), Potential::analytic("one", |_, _| 1.0), Potential::from_fn(g.clone(), |_, _| 1.0).unwrap()] {
            let w = solve_linear(&q, &d, None).unwrap();
            assert!(max_err(&w, |t, x| x.sin() * (2f64.sqrt() * t).cos()) < 1e-4);
        }
    }

    #[test]
    fn foreign_potential_is_interpolated() {
        let g = grid(129, 1.0);
        let coarse = grid(33, 1.0);
        let q = Potential::from_fn(coarse, |_, _| 1.0).unwrap();
        let w = solve_linear(&q, &sine_initial(&g), None).unwrap();
        assert!(max_err(&w, |t, x| x.sin() * (2f64.sqrt() * t).cos()) < 1e-4);
        let short = Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&Domain::interval(PI).unwrap(), 33).unwrap(), 0.5, 0.5, 0.5).unwrap());
        let q = Potential::from_fn(short, |_, _| 1.0).unwrap();
        assert!(solve_linear(&q, &sine_initial(&g), None).is_err());
    }

    #[test]
    fn trace_examples_and_order() {
        let left = BoundaryPortion::Endpoints { left: true, right: false };
        let right = BoundaryPortion::Endpoints { left: false, right: true };
        let mut errs = Vec::new();
        for n in [33, 65] {
            let g = grid(n, 1.0);
            let w = solve_linear(&Potential::zero(), &sine_initial(&g), None).unwrap();
            let mut e: f64 = 0.0;
            for portion in [&left, &right] {
                let tr = normal_derivative_trace(&w, portion).unwrap();
                for lvl in 0..=g.nt {
                    e = e.max((tr.at(lvl, 0).re + g.time(lvl).cos()).abs());
                }
            }
            errs.push(e);
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order >= 1.8, "{errs:?}");
        let g = grid(17, 1.0);
        let c = WaveField::real(g.clone(), vec![0.7; (g.nt + 1) * g.ns()]).unwrap();
        assert!(normal_derivative_trace(&c, &left).unwrap().sup() < 1e-12);
        let bad = BoundaryPortion::Arc { start: 0.0, end: 1.0 };
        assert!(normal_derivative_trace(&c, &bad).is_err());
    }

    #[test]
    fn periodic_mode_returns() {
        let g = grid(129, 2.0 * PI);
        let out = dtn_apply(&Potential::zero(), &sine_initial(&g), &BoundaryPortion::Whole, DtnMode::WithFinalState).unwrap();
        let (w, _) = out.final_state.unwrap();
        for (k, p) in g.space.coords().iter().enumerate() {
            assert!((w[k].re - p[0].sin()).abs() < 1e-3);
        }
        assert!(dtn_apply(&Potential::zero(), &sine_initial(&g), &BoundaryPortion::Whole, DtnMode::LateralOnly).is_err());
    }

    #[test]
    fn streamed_and_stored_agree() {
        let g = grid(65, 1.5);
        let data = LinearData::lateral_fn(g.clone(), |t, i, _| if i == 0 { Complex64::new(t.sin().powi(3), (2.0 * t).sin().powi(3)) } else { Complex64::default() });
        let q = Potential::analytic("wave", |t, p| 1.0 + (t * p[0]).sin());
        let w = solve_linear(&q, &data, None).unwrap();
        let stored = normal_derivative_trace(&w, &BoundaryPortion::Whole).unwrap();
        let (fv, fvel) = final_state(&w);
        let out = dtn_apply(&q, &data, &BoundaryPortion::Whole, DtnMode::WithFinalState).unwrap();
        assert_eq!(stored.values, out.trace.values);
        let (sv, svel) = out.final_state.unwrap();
        assert_eq!(fv, sv);
        assert_eq!(fvel, svel);
    }

    #[test]
    fn linearity_and_identical_potentials() {
        let g = grid(65, 2.0);
        let pulse = |c: f64| {
            LinearData::lateral_fn(g.clone(), move |t, i, _| {
                let s = (t - c) / 0.3;
                if i == 0 { Complex64::new(crate::smooth::bump(s), 0.5 * crate::smooth::bump(s)) } else { Complex64::default() }
            })
        };
        let (a, b) = (pulse(0.6), pulse(0.9));
        let q = Potential::from_fn(g.clone(), |t, p| 1.0 + 0.3 * (t * p[0]).sin()).unwrap();
        let whole = BoundaryPortion::Whole;
        let ta = dtn_apply(&q, &a, &whole, DtnMode::LateralOnly).unwrap().trace;
        let tb = dtn_apply(&q, &b, &whole, DtnMode::LateralOnly).unwrap().trace;
        let s = Complex64::new(0.3, -1.2);
        let combo = a.scaled(s).add(&b).unwrap();
        let tc = dtn_apply(&q, &combo, &whole, DtnMode::LateralOnly).unwrap().trace;
        let mut worst: f64 = 0.0;
        for k in 0..tc.values.len() {
            worst = worst.max((tc.values[k] - (s * ta.values[k] + tb.values[k])).norm());
        }
        assert!(worst < 1e-9 * (1.0 + tc.sup()), "{worst}");
        let q2 = q.clone();
        let tq2 = dtn_apply(&q2, &a, &whole, DtnMode::LateralOnly).unwrap().trace;
        assert_eq!(tq2.sub(&ta).unwrap().sup(), 0.0);
    }

    #[test]
    fn finite_propagation_speed() {
        let g = grid(129, 3.0);
        let ts = 0.5;
        let data = LinearData::lateral_fn(g.clone(), move |t, i, _| {
            if i == 0 && t > ts { Complex64::new(((t - ts) * 3.0).sin().powi(2), 0.0) } else { Complex64::default() }
        });
        let tr = dtn_apply(&Potential::constant(0.5), &data, &BoundaryPortion::Endpoints { left: false, right: true }, DtnMode::LateralOnly).unwrap().trace;
        let dx = PI / 128.0;
        for n in 0..=g.nt {
            if g.time(n) < ts + PI - 2.0 * dx {
                assert!(tr.at(n, 0).norm() <= 1e-10, "t = {}", g.time(n));
            }
        }
    }

    #[test]
    fn windowed_solve_matches_full_solve() {
        let d = Domain::rectangle(2.0, 1.0).unwrap();
        let g = Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, 81).unwrap(), 0.9, 0.9, 0.5).unwrap());
        let sp = g.space.clone();
        let data = LinearData::lateral_fn(g.clone(), move |t, i, _| match sp.boundary_params()[i] {
            crate::geometry::BoundaryParam::Face { face: Face::Bottom, s } => {
                let a = crate::smooth::bump((s - 1.0) / 0.2) * crate::smooth::bump((t - 0.6) / 0.15);
                Complex64::new(a * (25.0 * t).cos(), a * (25.0 * t).sin())
            }
            _ => Complex64::default(),
        });
        let q = Potential::analytic("bumpy", |t, p| 0.5 + t * p[0]);
        let portion = BoundaryPortion::FaceSegment { face: Face::Bottom, start: 0.6, end: 1.4 };
        let full = dtn_apply(&q, &data, &portion, DtnMode::LateralOnly).unwrap().trace;
        let win = dtn_apply_with(&q, &data, &portion, DtnMode::LateralOnly, &SolveOptions { window: true, ..Default::default() }).unwrap().trace;
        let diff = win.sub(&full).unwrap().sup();
        assert!(diff <= 1e-10 * full.sup(), "{diff} vs {}", full.sup());
    }

    #[test]
    fn cached_operator_is_reused() {
        let g = grid(17, 1.0);
        let basis: Vec<LinearData> = (0..3)
            .map(|c| LinearData::lateral_fn(g.clone(), move |t, i, _| if i == 0 { Complex64::new((t * (c + 1) as f64).sin().powi(2), 0.0) } else { Complex64::default() }))
            .collect();
        let q = Potential::constant(0.2);
        let dir = tempfile::tempdir().unwrap();
        let cache = DtnCache::new(dir.path()).unwrap();
        let (m1, hit1) = cache.get_or_materialize(&q, &BoundaryPortion::Whole, "sin2", &basis).unwrap();
        let (m2, hit2) = cache.get_or_materialize(&q, &BoundaryPortion::Whole, "sin2", &basis).unwrap();
        assert!(!hit1 && hit2);
        assert_eq!(m1.data, m2.data);
        let direct = dtn_apply(&q, &basis[1], &BoundaryPortion::Whole, DtnMode::LateralOnly).unwrap().trace;
        assert_eq!(m1.entry(5, 1), direct.values[5]);
    }
}
