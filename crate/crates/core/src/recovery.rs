//! Recovery of potentials at boundary points from probe traces, of `d_u F` on the
//! accessible boundary from lambda sweeps, and of `F(0, x, lambda)` in the interior.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{solve_semilinear, ForwardOptions};
use crate::geometry::{BoundaryParam, BoundaryPortion, Domain, Shape, SpaceTimeGrid};
use crate::linear::{linear_observe, BoundaryTrace, LinearData, Potential, SolveOptions};
use crate::linearization::{effective_potential, log_log_slope};
use crate::nonlinearity::{DataSpec, DirichletData, Nonlinearity};
use crate::persist;
use crate::probe::{default_delta, ProbeOptions, ProbeSetup, ProbeSpec};
use crate::smooth::{bump, smooth_step};

/// One trace difference filtered against the probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterValue {
    pub rho: f64,
    pub value: Complex64,
}

/// Where the samples of a trace sit relative to the probe.
#[derive(Debug, Clone, Copy)]
pub enum TraceFrame<'a> {
    /// Trace computed on the probe chart.
    Chart(&'a ProbeSetup),
    /// Trace on a grid of the whole domain.
    Domain(&'a ProbeSetup),
}

/// `sum W g e^{-i rho t} w / sum W w` with `g = -rho (trace1 - trace2)` (inward
/// derivative), `W` the quadrature weights and `w` a bump window of half-width
/// `delta / 4` around `(t0, x0)`.
pub fn matched_filter(trace1: &BoundaryTrace, trace2: &BoundaryTrace, frame: TraceFrame) -> Result<FilterValue> {
    let diff = trace1.sub(trace2)?;
    let (setup, t_origin, offsets) = match frame {
        TraceFrame::Chart(s) => (s, s.t_start, s.chart_offsets(&diff)),
        TraceFrame::Domain(s) => {
            let params = diff.grid.space.boundary_params();
            let offs = diff.indices.iter().map(|&i| s.offset_of(&params[i]).unwrap_or(f64::INFINITY)).collect();
            (s, 0.0, offs)
        }
    };
    let spec = &setup.spec;
    let half = spec.delta / 4.0;
    let bw = diff.grid.space.boundary_weights();
    let dim1 = setup.radius == 0.0;
    let (mut num, mut den) = (Complex64::default(), 0.0);
    for n in 0..diff.levels() {
        let t = t_origin + diff.grid.time(n);
        let wt = bump((t - spec.t0) / half);
        if wt == 0.0 {
            continue;
        }
        for (j, &i) in diff.indices.iter().enumerate() {
            let ws = if dim1 { 1.0 } else { bump(offsets[j] / half) };
            let w = wt * ws * diff.grid.dt * bw[i];
            if w == 0.0 {
                continue;
            }
            num += -spec.rho * diff.at(n, j) * Complex64::from_polar(w, -spec.rho * t);
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::Geometry("the trace has no samples in the window around (t0, x0)".into()));
    }
    Ok(FilterValue { rho: spec.rho, value: num / den })
}

/// Fit `m(rho) = m_inf + c rho^{-sigma}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub limit: Complex64,
    pub coefficient: Complex64,
    pub exponent: f64,
    pub residual: f64,
    /// `|m(rho) - m_inf|` decreases along the ladder, or stays within
    /// [`SETTLED_TOL`] of `|m_inf|`.
    pub monotone: bool,
}

/// Relative spread below which a ladder counts as converged.
pub const SETTLED_TOL: f64 = 0.05;

const EXPONENTS: (f64, f64, usize) = (0.5, 3.0, 251);

/// Least squares in `(m_inf, c)` for every exponent of a fixed grid; keeps the best.
/// Two ladder points fix the exponent at 1.
pub fn extrapolate(values: &[FilterValue]) -> Result<Extrapolation> {
    if values.len() < 2 {
        return Err(Error::Config("extrapolation needs at least two frequencies".into()));
    }
    let fit = |sigma: f64| -> (Complex64, Complex64, f64) {
        // normal equations for the basis (1, rho^-sigma)
        let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
        let (mut b1, mut b2) = (Complex64::default(), Complex64::default());
        for v in values {
            let x = v.rho.powf(-sigma);
            s11 += 1.0;
            s12 += x;
            s22 += x * x;
            b1 += v.value;
            b2 += v.value * x;
        }
        let det = s11 * s22 - s12 * s12;
        let m = (b1 * s22 - b2 * s12) / det;
        let c = (b2 * s11 - b1 * s12) / det;
        let r = values.iter().map(|v| (v.value - m - c * v.rho.powf(-sigma)).norm_sqr()).sum::<f64>().sqrt();
        (m, c, r)
    };
    let exponents: Vec<f64> = if values.len() == 2 {
        vec![1.0]
    } else {
        let (lo, hi, n) = EXPONENTS;
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    };
    let (mut best, mut best_sigma) = (fit(exponents[0]), exponents[0]);
    for &s in &exponents[1..] {
        let f = fit(s);
        if f.2 < best.2 {
            best = f;
            best_sigma = s;
        }
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let gaps: Vec<f64> = sorted.iter().map(|v| (v.value - best.0).norm()).collect();
    Ok(Extrapolation {
        limit: best.0,
        coefficient: best.1,
        exponent: best_sigma,
        residual: best.2,
        monotone: gaps.windows(2).all(|w| w[1] <= w[0]) || gaps.iter().all(|g| *g <= SETTLED_TOL * best.0.norm()),
    })
}


/// Largest accepted ratio `|imag| / |estimate|`.
pub const IMAG_TOL: f64 = 0.2;

/// Recovered value of `q1 - q2` at a boundary point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub t0: f64,
    pub x0: BoundaryParam,
    pub delta: f64,
    /// `-2i m_inf`.
    pub estimate: Complex64,
    /// Real part of the estimate.
    pub value: f64,
    /// `|imag| / |estimate|` (zero for a zero estimate).
    pub imag_residual: f64,
    pub filters: Vec<FilterValue>,
    pub extrapolation: Extrapolation,
    pub warnings: Vec<String>,
}

impl PointEstimate {
    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if !self.extrapolation.monotone {
            f.push("extrapolation");
        }
        if self.imag_residual > IMAG_TOL {
            f.push("reliability");
        }
        f.join("|")
    }
}

/// Estimate of `q1 - q2` at `(t0, x0)` from trace pairs measured with the probes
/// of a frequency ladder (one pair per frequency).
pub fn recover_q_difference_point(ladder: &[(&BoundaryTrace, &BoundaryTrace, TraceFrame)]) -> Result<PointEstimate> {
    let first = ladder.first().ok_or_else(|| Error::Config("empty frequency ladder".into()))?;
    let setup = match first.2 {
        TraceFrame::Chart(s) | TraceFrame::Domain(s) => s,
    };
    let filters = ladder.iter().map(|(a, b, f)| matched_filter(a, b, *f)).collect::<Result<Vec<_>>>()?;
    let extrapolation = extrapolate(&filters)?;
    let estimate = -2.0 * Complex64::i() * extrapolation.limit;
    let imag_residual = if estimate.norm() > 0.0 { estimate.im.abs() / estimate.norm() } else { 0.0 };
    let mut warnings = Vec::new();
    if !extrapolation.monotone {
        warnings.push("extrapolation: |m(rho) - m_inf| does not decrease along the ladder".to_string());
    }
    if imag_residual > IMAG_TOL {
        warnings.push(format!("reliability: imaginary part is {:.1}% of the estimate", 100.0 * imag_residual));
    }
    Ok(PointEstimate {
        t0: setup.spec.t0,
        x0: setup.spec.x0,
        delta: setup.spec.delta,
        estimate,
        value: estimate.re,
        imag_residual,
        filters,
        extrapolation,
        warnings,
    })
}

/// Frequencies of the probe ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoLadder {
    /// `rho = m / delta` for each multiple `m`.
    Scaled { multiples: Vec<f64> },
    Absolute { values: Vec<f64> },
}

impl Default for RhoLadder {
    fn default() -> Self {
        RhoLadder::Scaled { multiples: vec![12.0, 16.0, 24.0] }
    }
}

impl RhoLadder {
    pub fn values(&self, delta: f64) -> Vec<f64> {
        match self {
            RhoLadder::Scaled { multiples } => multiples.iter().map(|m| m / delta).collect(),
            RhoLadder::Absolute { values } => values.clone(),
        }
    }
}

/// Boundary point and time of one probe; the width defaults to [`default_delta`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub t0: f64,
    pub x0: BoundaryParam,
    #[serde(default)]
    pub delta: Option<f64>,
}

/// Space-time cutoff `chi` of the boundary data `lambda chi`: a smooth ramp in time
/// reaching 1 at `ramp`, times 1 on `gamma` with a smooth taper of width `taper`
/// beyond its ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCutoff {
    pub ramp: f64,
    pub gamma: BoundaryPortion,
    #[serde(default)]
    pub taper: f64,
}

impl BoundaryCutoff {
    pub fn value(&self, domain: &Domain, t: f64, p: &BoundaryParam) -> f64 {
        let time = smooth_step(t / self.ramp);
        let fade = |d: f64| if d <= 0.0 { 1.0 } else if self.taper > 0.0 { smooth_step(1.0 - d / self.taper) } else { 0.0 };
        let space = match (&self.gamma, p) {
            (BoundaryPortion::Whole, _) => 1.0,
            (BoundaryPortion::Endpoints { .. }, _) => f64::from(u8::from(self.gamma.contains(p))),
            (BoundaryPortion::FaceSegment { face, start, end }, BoundaryParam::Face { face: f, s }) if face == f => fade((start - s).max(s - end)),
            (BoundaryPortion::Arc { start, end }, BoundaryParam::Angle { theta }) => {
                let r = match domain.shape {
                    Shape::Disk { radius } => radius,
                    _ => 1.0,
                };
                let rel = (theta - start).rem_euclid(2.0 * PI);
                let width = end - start;
                let outside = if rel <= width { 0.0 } else { (rel - width).min(2.0 * PI - rel) };
                fade(r * outside)
            }
            _ => 0.0,
        };
        time * space
    }

    /// Data `(chi, 0, 0)` on a grid.
    pub fn sample(&self, grid: Arc<SpaceTimeGrid>) -> DirichletData {
        let sp = &grid.space;
        let levels = grid.nt.max(grid.nt_prime()) + 1;
        let params = sp.boundary_params();
        let mut f = Vec::with_capacity(levels * params.len());
        for n in 0..levels {
            let t = grid.time(n);
            f.extend(params.iter().map(|p| self.value(&sp.domain, t, p)));
        }
        let ns = grid.ns();
        DirichletData { grid, levels, f, u0: vec![0.0; ns], u1: vec![0.0; ns] }
    }
}

/// Faces of the partial-data variant: inputs live on a neighbourhood `U'` of the
/// face lit by `omega` (`nu . omega > -slack`), traces are kept on a neighbourhood
/// `V'` of the shadowed face (`nu . omega < slack`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Faces {
    pub omega: [f64; 2],
    pub slack: f64,
}

impl Faces {
    fn dot(&self, domain: &Domain, p: &BoundaryParam) -> f64 {
        let nu = domain.outward_normal(p).unwrap_or([0.0, 0.0]);
        let norm = self.omega[0].hypot(self.omega[1]);
        (nu[0] * self.omega[0] + nu[1] * self.omega[1]) / norm
    }

    pub fn in_input(&self, domain: &Domain, p: &BoundaryParam) -> bool {
        self.dot(domain, p) > -self.slack
    }

    pub fn in_output(&self, domain: &Domain, p: &BoundaryParam) -> bool {
        self.dot(domain, p) < self.slack
    }

    /// Rejects inputs with an initial value or with lateral data off `U'`.
    pub fn check_input(&self, input: &LinearData) -> Result<()> {
        if input.h0.iter().any(|v| v.norm() != 0.0) {
            return Err(Error::Restriction("inputs of the partial-data variant need h0 = 0".into()));
        }
        let sp = &input.grid.space;
        let nb = input.nb();
        for (i, p) in sp.boundary_params().iter().enumerate() {
            if !self.in_input(&sp.domain, p) && input.lateral.iter().skip(i).step_by(nb).any(|v| v.norm() != 0.0) {
                return Err(Error::Restriction(format!("lateral input is supported at {p:?}, outside U")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    /// Symmetric grid on `[-L1, L1]` containing 0.
    pub lambda_grid: Vec<f64>,
    pub chi_boundary: BoundaryCutoff,
    /// `chi = 1` on `[delta, T'] x gamma`; probes sit in `(delta, T - delta)`.
    pub delta: f64,
    /// Final measurement time `T`.
    pub horizon: f64,
    pub probe_points: Vec<ProbePoint>,
    #[serde(default)]
    pub rho_ladder: RhoLadder,
    #[serde(default)]
    pub probe: ProbeOptions,
    #[serde(default)]
    pub faces: Option<Faces>,
}

/// `2 k + 1` equispaced values on `[-max, max]`.
pub fn symmetric_lambda_grid(max: f64, per_side: usize) -> Vec<f64> {
    let k = per_side as i64;
    (-k..=k).map(|j| max * j as f64 / k.max(1) as f64).collect()
}

fn check_lambda_grid(lambdas: &[f64]) -> Result<usize> {
    let n = lambdas.len();
    if n == 0 || lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("lambda grid must be strictly increasing and non-empty".into()));
    }
    let scale = lambdas.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if (0..n).any(|i| (lambdas[i] + lambdas[n - 1 - i]).abs() > 1e-12 * scale) {
        return Err(Error::Config("lambda grid must be symmetric about 0".into()));
    }
    lambdas.iter().position(|v| *v == 0.0).ok_or_else(|| Error::Config("lambda grid must contain 0".into()))
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda_grid(&self.lambda_grid)?;
        if !(self.delta > 0.0 && 2.0 * self.delta < self.horizon) {
            return Err(Error::Config(format!("delta {} must lie in (0, T / 2)", self.delta)));
        }
        if !(self.chi_boundary.ramp > 0.0 && self.chi_boundary.ramp <= self.delta) {
            return Err(Error::Config("the cutoff must reach 1 by t = delta".into()));
        }
        for p in &self.probe_points {
            if !(p.t0 > self.delta && p.t0 < self.horizon - self.delta) {
                return Err(Error::Config(format!("probe time {} outside (delta, T - delta)", p.t0)));
            }
        }
        if self.rho_ladder.values(1.0).len() < 2 {
            return Err(Error::Config("the frequency ladder needs at least two entries".into()));
        }
        Ok(())
    }

    /// Probe charts of one point along the ladder.
    pub fn ladder(&self, domain: &Domain, point: &ProbePoint) -> Result<Vec<ProbeSetup>> {
        probe_ladder(domain, point, self.horizon, &self.chi_boundary.gamma, &self.rho_ladder, &self.probe)
    }
}

/// Trace charts of the probes at `point` for every frequency of the ladder.
pub fn probe_ladder(domain: &Domain, point: &ProbePoint, horizon: f64, gamma: &BoundaryPortion, ladder: &RhoLadder, options: &ProbeOptions) -> Result<Vec<ProbeSetup>> {
    let delta = point.delta.unwrap_or_else(|| default_delta(domain, point.t0, horizon));
    ladder
        .values(delta)
        .into_iter()
        .map(|rho| {
            let spec = ProbeSpec { t0: point.t0, x0: point.x0, delta, rho, horizon, gamma: gamma.clone(), options: *options };
            ProbeSetup::for_traces(domain, &spec)
        })
        .collect()
}

/// Recovers `q - 0` at a point from a black box returning, for a probe chart, the
/// normal derivative trace of the solution with unknown potential `q`.
pub fn recover_potential_point(
    domain: &Domain,
    point: &ProbePoint,
    horizon: f64,
    gamma: &BoundaryPortion,
    ladder: &RhoLadder,
    options: &ProbeOptions,
    measure: &(dyn Fn(&ProbeSetup) -> Result<BoundaryTrace> + Sync),
) -> Result<PointEstimate> {
    let setups = probe_ladder(domain, point, horizon, gamma, ladder, options)?;
    let pairs = setups.par_iter().map(|s| Ok((measure(s)?, s.chart_trace(&Potential::zero())?))).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = pairs.iter().zip(&setups).map(|((a, b), s)| (a, b, TraceFrame::Chart(s))).collect();
    recover_q_difference_point(&refs)
}

/// Where measured data come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    SimulatedBlackBox,
    InjectedTraces,
}

/// Linearized boundary measurements indexed by the load parameter `lambda`.
pub trait Measurements: Sync {
    fn kind(&self) -> SourceKind;

    /// Trace on the probe chart of the linearized solution driven by the probe data.
    fn probe_trace(&self, lambda: f64, probe: &ProbeSetup) -> Result<BoundaryTrace>;

    /// Trace on the whole boundary (or the output faces) for data on the base grid.
    fn apply(&self, lambda: f64, input: &LinearData) -> Result<BoundaryTrace>;
}

/// Background data of the linearization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    /// Lateral data `lambda chi` with zero initial values.
    Lateral { chi: BoundaryCutoff },
    /// Constant data `(lambda, lambda, 0)`.
    Constant,
}

/// Black box built from a hidden nonlinearity: solves the forward problem with the
/// background data and answers with the linearized traces.
pub struct SimulatedSource {
    hidden: Nonlinearity,
    base: Arc<SpaceTimeGrid>,
    background: Background,
    faces: Option<Faces>,
    noise: f64,
    seed: u64,
    radius: Option<f64>,
    forward: ForwardOptions,
    cache: Mutex<HashMap<u64, Potential>>,
}

impl std::fmt::Debug for SimulatedSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedSource").field("background", &self.background).field("noise", &self.noise).finish_non_exhaustive()
    }
}

/// Wraps a hidden nonlinearity into a measurement source on `base`.
pub fn simulate_measurements(hidden: Nonlinearity, background: Background, base: Arc<SpaceTimeGrid>) -> SimulatedSource {
    SimulatedSource { hidden, base, background, faces: None, noise: 0.0, seed: 0, radius: None, forward: ForwardOptions::default(), cache: Mutex::new(HashMap::new()) }
}

impl SimulatedSource {
    /// Additive Gaussian noise of relative level `level` on every trace.
    pub fn with_noise(mut self, level: f64, seed: u64) -> Self {
        self.noise = level;
        self.seed = seed;
        self
    }

    /// Restricts inputs to `U'` and outputs to `V'`.
    pub fn with_faces(mut self, faces: Faces) -> Self {
        self.faces = Some(faces);
        self
    }

    /// Rejects background data whose low norm exceeds `radius`.
    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = Some(radius);
        self
    }

    fn potential(&self, lambda: f64) -> Result<Potential> {
        if let Some(q) = self.cache.lock().expect("cache").get(&lambda.to_bits()) {
            return Ok(q.clone());
        }
        let data = match &self.background {
            Background::Lateral { chi } => {
                let d = chi.sample(self.base.clone());
                let zero = DataSpec::zero().sample(self.base.clone());
                zero.axpy(lambda, &d)?
            }
            Background::Constant => DataSpec::constant(lambda).sample(self.base.clone()),
        };
        check_radius(&data, self.radius, lambda)?;
        let u = solve_semilinear(&self.hidden, &data, &self.forward).map_err(|e| as_range(e, lambda))?;
        let q = effective_potential(&self.hidden, &u)?;
        self.cache.lock().expect("cache").insert(lambda.to_bits(), q.clone());
        Ok(q)
    }

    fn noisy(&self, mut trace: BoundaryTrace, key: &[&[u8]]) -> BoundaryTrace {
        if self.noise > 0.0 && !trace.values.is_empty() {
            let rms = (trace.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / trace.values.len() as f64).sqrt();
            let mut parts: Vec<&[u8]> = key.to_vec();
            let seed = self.seed.to_le_bytes();
            parts.push(&seed);
            let h = persist::hash_parts(&parts);
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from_str_radix(&h[..16], 16).expect("hex"));
            let s = self.noise * rms / 2f64.sqrt();
            for v in trace.values.iter_mut() {
                let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                *v += Complex64::new(a, b) * s;
            }
        }
        trace
    }
}

fn check_radius(data: &DirichletData, radius: Option<f64>, lambda: f64) -> Result<()> {
    if let Some(l) = radius {
        let n = data.norm_low();
        if n > l {
            return Err(Error::Range(format!("lambda = {lambda}: data norm {n:.4e} exceeds the admissible radius {l:.4e}")));
        }
    }
    Ok(())
}

fn as_range(e: Error, lambda: f64) -> Error {
    match e {
        Error::BlowUp { time, .. } => Error::Range(format!("lambda = {lambda}: the forward solution blows up at t = {time:.4}")),
        other => other,
    }
}

impl Measurements for SimulatedSource {
    fn kind(&self) -> SourceKind {
        SourceKind::SimulatedBlackBox
    }

    fn probe_trace(&self, lambda: f64, probe: &ProbeSetup) -> Result<BoundaryTrace> {
        if let Some(faces) = &self.faces {
            let x0 = &probe.spec.x0;
            if !(faces.in_input(&probe.domain, x0) && faces.in_output(&probe.domain, x0)) {
                return Err(Error::Restriction(format!("probe point {x0:?} is not on both U and V")));
            }
        }
        let q = self.potential(lambda)?;
        let trace = probe.chart_trace(&q)?;
        let spec = serde_json::to_vec(&probe.spec)?;
        Ok(self.noisy(trace, &[&lambda.to_le_bytes(), &spec]))
    }

    fn apply(&self, lambda: f64, input: &LinearData) -> Result<BoundaryTrace> {
        if let Some(faces) = &self.faces {
            faces.check_input(input)?;
        }
        let q = self.potential(lambda)?;
        let (mut trace, _) = linear_observe(&q, input, None, &BoundaryPortion::Whole, false, &SolveOptions::default())?;
        if let Some(faces) = &self.faces {
            let sp = &trace.grid.space;
            let keep: Vec<usize> = (0..trace.width()).filter(|&j| faces.in_output(&sp.domain, &sp.boundary_params()[trace.indices[j]])).collect();
            let values = (0..trace.levels()).flat_map(|n| keep.iter().map(move |&j| (n, j))).map(|(n, j)| trace.at(n, j)).collect();
            trace.indices = keep.iter().map(|&j| trace.indices[j]).collect();
            trace.values = values;
        }
        let bytes: Vec<u8> = input.lateral.iter().flat_map(|v| v.re.to_le_bytes().into_iter().chain(v.im.to_le_bytes())).collect();
        Ok(self.noisy(trace, &[&lambda.to_le_bytes(), &bytes]))
    }
}

/// Traces supplied from outside, keyed by `lambda` and the probe.
#[derive(Debug, Default)]
pub struct InjectedSource {
    traces: HashMap<String, BoundaryTrace>,
}

fn probe_key(lambda: f64, probe: &ProbeSetup) -> String {
    let spec = serde_json::to_string(&probe.spec).unwrap_or_default();
    format!("{:016x}:{spec}", lambda.to_bits())
}

impl InjectedSource {
    pub fn insert(&mut self, lambda: f64, probe: &ProbeSetup, trace: BoundaryTrace) {
        self.traces.insert(probe_key(lambda, probe), trace);
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

impl Measurements for InjectedSource {
    fn kind(&self) -> SourceKind {
        SourceKind::InjectedTraces
    }

    fn probe_trace(&self, lambda: f64, probe: &ProbeSetup) -> Result<BoundaryTrace> {
        self.traces
            .get(&probe_key(lambda, probe))
            .cloned()
            .ok_or_else(|| Error::Gap(format!("no injected trace for lambda = {lambda} at t0 = {}, rho = {}", probe.spec.t0, probe.spec.rho)))
    }

    fn apply(&self, _lambda: f64, _input: &LinearData) -> Result<BoundaryTrace> {
        Err(Error::Config("an injected source only answers probe queries".into()))
    }
}

/// `d_u F(t0, x0, lambda)` at every probe point and every `lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralRecovery {
    pub lambdas: Vec<f64>,
    /// `estimates[point][lambda]`.
    pub estimates: Vec<Vec<PointEstimate>>,
}

impl LateralRecovery {
    pub fn values(&self, point: usize) -> Vec<Option<f64>> {
        self.estimates[point].iter().map(|e| Some(e.value)).collect()
    }

    /// Least-squares slope of the recovered values against `lambda`.
    pub fn slope(&self, point: usize) -> f64 {
        let n = self.lambdas.len() as f64;
        let v: Vec<f64> = self.estimates[point].iter().map(|e| e.value).collect();
        let ml = self.lambdas.iter().sum::<f64>() / n;
        let mv = v.iter().sum::<f64>() / n;
        let sxy: f64 = self.lambdas.iter().zip(&v).map(|(l, y)| (l - ml) * (y - mv)).sum();
        let sxx: f64 = self.lambdas.iter().map(|l| (l - ml).powi(2)).sum();
        sxy / sxx
    }

    /// `F(t0, x0, lambda)` at a point from its anchor `F(t0, x0, 0)`.
    pub fn assemble(&self, point: usize, anchor: f64) -> Result<Vec<f64>> {
        assemble_f(&self.lambdas, &self.values(point), anchor)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t0", "x0", "lambda", "value", "imag_residual", "flags"])?;
        for row in &self.estimates {
            for (e, l) in row.iter().zip(&self.lambdas) {
                w.write_record([e.t0.to_string(), param_label(&e.x0), l.to_string(), e.value.to_string(), e.imag_residual.to_string(), e.flags()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn param_label(p: &BoundaryParam) -> String {
    match p {
        BoundaryParam::End { end } => format!("{end:?}").to_lowercase(),
        BoundaryParam::Face { face, s } => format!("{}:{s}", format!("{face:?}").to_lowercase()),
        BoundaryParam::Angle { theta } => format!("angle:{theta}"),
    }
}

/// Lateral recovery: for each `lambda`, probe traces of the source against the
/// free traces computed here, filtered and extrapolated in `rho`.
pub fn recover_du_f_lateral(source: &dyn Measurements, config: &RecoveryConfig, domain: &Domain) -> Result<LateralRecovery> {
    config.validate()?;
    let ladders = config.probe_points.iter().map(|p| config.ladder(domain, p)).collect::<Result<Vec<_>>>()?;
    let references = ladders
        .par_iter()
        .map(|l| l.iter().map(|s| s.chart_trace(&Potential::zero())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let estimates = ladders
        .par_iter()
        .zip(&references)
        .map(|(ladder, refs)| {
            config
                .lambda_grid
                .par_iter()
                .map(|&lambda| {
                    let measured = ladder.iter().map(|s| source.probe_trace(lambda, s)).collect::<Result<Vec<_>>>()?;
                    let pairs: Vec<_> = measured.iter().zip(refs).zip(ladder).map(|((a, b), s)| (a, b, TraceFrame::Chart(s))).collect();
                    recover_q_difference_point(&pairs)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LateralRecovery { lambdas: config.lambda_grid.clone(), estimates })
}

/// `anchor + int_0^lambda du` by the composite trapezoid rule on a symmetric grid.
pub fn assemble_f(lambdas: &[f64], du: &[Option<f64>], anchor: f64) -> Result<Vec<f64>> {
    if lambdas.len() != du.len() {
        return Err(Error::Shape(format!("{} lambda values but {} samples", lambdas.len(), du.len())));
    }
    let zero = check_lambda_grid(lambdas)?;
    if let Some(k) = du.iter().position(|v| v.is_none_or(|x| !x.is_finite())) {
        return Err(Error::Gap(format!("no sample of d_u F at lambda = {}", lambdas[k])));
    }
    let v: Vec<f64> = du.iter().map(|x| x.expect("checked")).collect();
    let mut out = vec![anchor; lambdas.len()];
    for k in zero + 1..lambdas.len() {
        out[k] = out[k - 1] + 0.5 * (lambdas[k] - lambdas[k - 1]) * (v[k] + v[k - 1]);
    }
    for k in (0..zero).rev() {
        out[k] = out[k + 1] - 0.5 * (lambdas[k + 1] - lambdas[k]) * (v[k] + v[k + 1]);
    }
    Ok(out)
}

/// Supplies `q_{F, lambda}` in the interior for `t > 0`, standing in for an interior
/// reconstruction.
pub trait InteriorOracle: Sync {
    fn potential(&self, lambda: f64) -> Result<Potential>;
    fn label(&self) -> String;
}

/// Oracle reading the potential off a forward solve with the true nonlinearity.
pub struct ExactOracle {
    hidden: Nonlinearity,
    grid: Arc<SpaceTimeGrid>,
}

impl ExactOracle {
    pub fn new(hidden: Nonlinearity, grid: Arc<SpaceTimeGrid>) -> Self {
        ExactOracle { hidden, grid }
    }
}

impl InteriorOracle for ExactOracle {
    fn potential(&self, lambda: f64) -> Result<Potential> {
        let data = DataSpec::constant(lambda).sample(self.grid.clone());
        let u = solve_semilinear(&self.hidden, &data, &ForwardOptions::default()).map_err(|e| as_range(e, lambda))?;
        effective_potential(&self.hidden, &u)
    }

    fn label(&self) -> String {
        format!("oracle mode (exact potential of {})", self.hidden.name())
    }
}

/// Source of `q_{F, lambda}` for the initial-time identity.
pub enum InitialSource<'a> {
    /// Forward solves with a known nonlinearity.
    Direct(&'a Nonlinearity),
    Oracle(&'a dyn InteriorOracle),
}

/// `d_u F(0, x, lambda)` and `F(0, x, lambda)` at every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialRecovery {
    pub lambdas: Vec<f64>,
    /// `du[lambda][node]`.
    pub du: Vec<Vec<f64>>,
    /// `f[lambda][node]`.
    pub f: Vec<Vec<f64>>,
    pub mode: String,
}

/// For constant data `(lambda, lambda, 0)` the solution equals `lambda` at `t = 0`,
/// so `q_{F, lambda}(0, x) = d_u F(0, x, lambda)`; integrating in `lambda` from the
/// anchor `F(0, x, 0)` gives `F(0, x, lambda)`.
pub fn recover_f_initial_interior(source: InitialSource, lambdas: &[f64], grid: Arc<SpaceTimeGrid>, anchor: &[f64], radius: Option<f64>) -> Result<InitialRecovery> {
    check_lambda_grid(lambdas)?;
    let ns = grid.ns();
    if anchor.len() != ns {
        return Err(Error::Shape(format!("anchor has {} values, grid has {ns} nodes", anchor.len())));
    }
    if let Some(l) = radius {
        let unit = DataSpec::constant(1.0).sample(grid.clone()).norm_low();
        let limit = l / unit;
        if let Some(bad) = lambdas.iter().find(|v| v.abs() > limit) {
            return Err(Error::Range(format!("lambda = {bad} exceeds L2 = {limit:.4e}")));
        }
    }
    let (du, mode) = match source {
        InitialSource::Direct(f) => {
            let du = lambdas
                .par_iter()
                .map(|&lambda| {
                    let data = DataSpec::constant(lambda).sample(grid.clone());
                    let u = solve_semilinear(f, &data, &ForwardOptions::default()).map_err(|e| as_range(e, lambda))?;
                    let q = effective_potential(f, &u)?;
                    Ok(q.values().expect("sampled")[..ns].to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            (du, "direct".to_string())
        }
        InitialSource::Oracle(o) => {
            let coords = grid.space.coords();
            let du = lambdas
                .par_iter()
                .map(|&lambda| {
                    let q = o.potential(lambda)?;
                    Ok(coords.iter().map(|&p| q.eval(0.0, p)).collect::<Vec<f64>>())
                })
                .collect::<Result<Vec<_>>>()?;
            (du, o.label())
        }
    };
    let mut f = vec![vec![0.0; ns]; lambdas.len()];
    for k in 0..ns {
        let column: Vec<Option<f64>> = du.iter().map(|row| Some(row[k])).collect();
        for (j, v) in assemble_f(lambdas, &column, anchor[k])?.into_iter().enumerate() {
            f[j][k] = v;
        }
    }
    Ok(InitialRecovery { lambdas: lambdas.to_vec(), du, f, mode })
}

impl InitialRecovery {
    pub fn write_csv(&self, path: &Path, grid: &SpaceTimeGrid) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "lambda", "du_f", "f"])?;
        for (j, l) in self.lambdas.iter().enumerate() {
            for (k, p) in grid.space.coords().iter().enumerate() {
                w.write_record([p[0].to_string(), p[1].to_string(), l.to_string(), self.du[j][k].to_string(), self.f[j][k].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Observed order of the trapezoid error of a lambda integration under grid
/// halving, from the errors at successive refinements.
pub fn quadrature_order(steps: &[f64], errors: &[f64]) -> f64 {
    log_log_slope(steps, errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Endpoint, Face, SpatialGrid};
    use crate::nonlinearity::{Coefficient, SpaceProfile, TimeProfile};

    fn interval() -> Domain {
        Domain::interval(PI).unwrap()
    }

    fn left() -> BoundaryParam {
        BoundaryParam::End { end: Endpoint::Left }
    }

    fn left_only() -> BoundaryPortion {
        BoundaryPortion::Endpoints { left: true, right: false }
    }

    fn base(d: &Domain, n: usize, t: f64) -> Arc<SpaceTimeGrid> {
        let sp = SpatialGrid::new(d, n).unwrap();
        let dt = 0.5 * sp.stable_dt();
        Arc::new(SpaceTimeGrid::with_dt(sp, dt, t, t).unwrap())
    }

    fn config(lambdas: Vec<f64>, t0s: &[f64]) -> RecoveryConfig {
        RecoveryConfig {
            lambda_grid: lambdas,
            chi_boundary: BoundaryCutoff { ramp: 0.2, gamma: left_only(), taper: 0.0 },
            delta: 0.2,
            horizon: 1.2,
            probe_points: t0s.iter().map(|&t0| ProbePoint { t0, x0: left(), delta: None }).collect(),
            rho_ladder: RhoLadder::default(),
            probe: ProbeOptions::default(),
            faces: None,
        }
    }

    fn fv(rho: f64, v: Complex64) -> FilterValue {
        FilterValue { rho, value: v }
    }

    #[test]
    fn equal_traces_filter_to_zero() {
        let d = interval();
        let spec = ProbeSpec { t0: 0.5, x0: left(), delta: 0.025, rho: 480.0, horizon: 1.2, gamma: left_only(), options: ProbeOptions::default() };
        let s = ProbeSetup::for_traces(&d, &spec).unwrap();
        let t = s.chart_trace(&Potential::zero()).unwrap();
        let m = matched_filter(&t, &t, TraceFrame::Chart(&s)).unwrap();
        assert_eq!(m.value, Complex64::default());
    }

    #[test]
    fn extrapolation_recovers_the_model() {
        let limit = Complex64::new(0.3, -0.1);
        let c = Complex64::new(2.0, 1.0);
        let values: Vec<_> = [100.0, 200.0, 400.0, 800.0].iter().map(|&r: &f64| fv(r, limit + c * r.powf(-1.5))).collect();
        let e = extrapolate(&values).unwrap();
        assert!((e.limit - limit).norm() < 1e-12, "{e:?}");
        assert!((e.exponent - 1.5).abs() < 1e-9);
        assert!(e.monotone);
        // two points: sigma = 1
        let e = extrapolate(&values[..2]).unwrap();
        let exact = (values[1].value * 200.0 - values[0].value * 100.0) / 100.0;
        assert!((e.limit - exact).norm() < 1e-12);
        assert!(extrapolate(&values[..1]).is_err());
    }

    #[test]
    fn non_monotone_ladder_is_flagged() {
        let values = [fv(10.0, Complex64::new(1.0, 0.0)), fv(20.0, Complex64::new(0.2, 0.0)), fv(40.0, Complex64::new(0.9, 0.0))];
        assert!(!extrapolate(&values).unwrap().monotone);
    }

    #[test]
    fn trapezoid_assembly() {
        let l = symmetric_lambda_grid(1.0, 4);
        assert_eq!(l.len(), 9);
        // du = 2 lambda + 1 integrates exactly
        let du: Vec<_> = l.iter().map(|x| Some(2.0 * x + 1.0)).collect();
        let f = assemble_f(&l, &du, 0.5).unwrap();
        for (x, v) in l.iter().zip(&f) {
            assert!((v - (x * x + x + 0.5)).abs() < 1e-14);
        }
        // du = 3 lambda^2: error h^2 / 4 |lambda| at spacing h
        let du: Vec<_> = l.iter().map(|x| Some(3.0 * x * x)).collect();
        let f = assemble_f(&l, &du, 0.0).unwrap();
        assert!((f[8] - 1.0 - 0.25 * 0.25 * 0.25 * 2.0).abs() < 1e-12, "{}", f[8]);
        let mut gap = du.clone();
        gap[2] = None;
        assert!(matches!(assemble_f(&l, &gap, 0.0), Err(Error::Gap(_))));
        assert!(matches!(assemble_f(&[0.0, 1.0], &[Some(1.0), Some(1.0)], 0.0), Err(Error::Config(_))));
        assert!(matches!(assemble_f(&[-1.0, 1.0], &[Some(1.0), Some(1.0)], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = config(vec![-1.0, 0.0, 1.0], &[0.5]);
        c.validate().unwrap();
        c.probe_points[0].t0 = 1.1;
        assert!(c.validate().is_err());
        let mut c = config(vec![-1.0, 0.0, 1.0], &[0.5]);
        c.chi_boundary.ramp = 0.3;
        assert!(c.validate().is_err());
        let mut c = config(vec![-1.0, 0.0, 1.0], &[0.5]);
        c.rho_ladder = RhoLadder::Absolute { values: vec![100.0] };
        assert!(c.validate().is_err());
    }

    #[test]
    fn cutoff_tapers_outside_gamma() {
        let d = Domain::rectangle(1.0, 1.0).unwrap();
        let c = BoundaryCutoff { ramp: 0.1, gamma: BoundaryPortion::FaceSegment { face: Face::Bottom, start: 0.3, end: 0.7 }, taper: 0.1 };
        let at = |t, face, s| c.value(&d, t, &BoundaryParam::Face { face, s });
        assert_eq!(at(0.0, Face::Bottom, 0.5), 0.0);
        assert_eq!(at(0.2, Face::Bottom, 0.5), 1.0);
        assert_eq!(at(0.2, Face::Bottom, 0.7), 1.0);
        let mid = at(0.2, Face::Bottom, 0.75);
        assert!(mid > 0.0 && mid < 1.0);
        assert_eq!(at(0.2, Face::Bottom, 0.85), 0.0);
        assert_eq!(at(0.2, Face::Top, 0.5), 0.0);
        let disk = Domain::disk(1.0).unwrap();
        let arc = BoundaryCutoff { ramp: 0.1, gamma: BoundaryPortion::Arc { start: 6.0, end: 6.5 }, taper: 0.0 };
        assert_eq!(arc.value(&disk, 1.0, &BoundaryParam::Angle { theta: 0.1 }), 1.0);
        assert_eq!(arc.value(&disk, 1.0, &BoundaryParam::Angle { theta: 1.0 }), 0.0);
    }

    #[test]
    fn zero_nonlinearity_gives_zero() {
        let d = interval();
        let c = config(vec![-1.0, 0.0, 1.0], &[0.5]);
        let src = simulate_measurements(Nonlinearity::zero(), Background::Lateral { chi: c.chi_boundary.clone() }, base(&d, 41, 1.2));
        let r = recover_du_f_lateral(&src, &c, &d).unwrap();
        assert!(r.estimates[0].iter().all(|e| e.estimate == Complex64::default()), "{r:?}");
    }

    #[test]
    fn linear_nonlinearity_is_lambda_independent() {
        let d = interval();
        let m = Coefficient::product(vec![Coefficient::constant(0.5), Coefficient::time(TimeProfile::Sin { freq: 1.0, phase: 1.0 })]);
        let hidden = Nonlinearity::linear(m.clone());
        let c = config(vec![-2.0, 0.0, 2.0], &[0.5]);
        let src = simulate_measurements(hidden, Background::Lateral { chi: c.chi_boundary.clone() }, base(&d, 41, 1.2));
        let r = recover_du_f_lateral(&src, &c, &d).unwrap();
        let v: Vec<f64> = r.estimates[0].iter().map(|e| e.value).collect();
        assert!(v.iter().all(|x| (x - v[0]).abs() < 1e-10), "{v:?}");
        let exact = m.eval(0.5, [0.0, 0.0]);
        assert!((v[0] - exact).abs() < 0.05 * exact, "{v:?} vs {exact}");
        assert!(r.slope(0).abs() < 1e-10);
    }

    #[test]
    fn constant_potential_through_black_box() {
        let d = interval();
        let q = Potential::constant(0.5);
        let point = ProbePoint { t0: 0.5, x0: left(), delta: Some(0.025) };
        let e = recover_potential_point(&d, &point, 1.2, &left_only(), &RhoLadder::default(), &ProbeOptions::default(), &|s| s.chart_trace(&q)).unwrap();
        assert!((e.value - 0.5).abs() < 0.05 * 0.5, "{e:?}");
        assert!(e.imag_residual < IMAG_TOL);
    }

    #[test]
    fn noise_is_seeded() {
        let d = interval();
        let c = config(vec![0.0], &[0.5]);
        let g = base(&d, 41, 1.2);
        let hidden = || Nonlinearity::quadratic(Coefficient::space(SpaceProfile::sin_x(1.0)));
        let bg = Background::Lateral { chi: c.chi_boundary.clone() };
        let a = simulate_measurements(hidden(), bg.clone(), g.clone()).with_noise(0.01, 7);
        let b = simulate_measurements(hidden(), bg.clone(), g.clone()).with_noise(0.01, 7);
        let e = simulate_measurements(hidden(), bg, g).with_noise(0.01, 8);
        let s = &c.ladder(&d, &c.probe_points[0]).unwrap()[0];
        let (ta, tb, te) = (a.probe_trace(0.0, s).unwrap(), b.probe_trace(0.0, s).unwrap(), e.probe_trace(0.0, s).unwrap());
        assert_eq!(ta.values, tb.values);
        assert_ne!(ta.values, te.values);
    }

    #[test]
    fn partial_data_inputs_are_checked() {
        let d = Domain::rectangle(1.0, 1.0).unwrap();
        let g = base(&d, 9, 0.5);
        let faces = Faces { omega: [0.0, -1.0], slack: 0.1 };
        let src = simulate_measurements(Nonlinearity::zero(), Background::Constant, g.clone()).with_faces(faces);
        let mut input = LinearData::zero(g.clone());
        input.h0[10] = Complex64::new(1.0, 0.0);
        assert!(matches!(src.apply(0.0, &input), Err(Error::Restriction(_))));
        // lateral data on the top face lies outside U
        let top = LinearData::lateral_fn(g.clone(), |t, _, p| Complex64::new(if p[1] > 0.99 { t } else { 0.0 }, 0.0));
        assert!(matches!(src.apply(0.0, &top), Err(Error::Restriction(_))));
        let bottom = LinearData::lateral_fn(g.clone(), |t, _, p| Complex64::new(if p[1] < 0.01 { t * t } else { 0.0 }, 0.0));
        let tr = src.apply(0.0, &bottom).unwrap();
        let params = g.space.boundary_params();
        assert!(tr.indices.iter().all(|&i| faces.in_output(&d, &params[i])));
        assert!(tr.indices.iter().all(|&i| !matches!(params[i], BoundaryParam::Face { face: Face::Bottom, .. }) || faces.in_input(&d, &params[i])));
    }

    #[test]
    fn injected_traces_round_trip() {
        let d = interval();
        let c = config(vec![0.0], &[0.5]);
        let s = &c.ladder(&d, &c.probe_points[0]).unwrap()[0];
        let t = s.chart_trace(&Potential::constant(0.3)).unwrap();
        let mut src = InjectedSource::default();
        assert!(matches!(src.probe_trace(0.0, s), Err(Error::Gap(_))));
        src.insert(0.0, s, t.clone());
        assert_eq!(src.probe_trace(0.0, s).unwrap().values, t.values);
        assert_eq!(src.kind(), SourceKind::InjectedTraces);
    }

    #[test]
    fn initial_recovery_of_a_cubic() {
        let d = interval();
        let g = base(&d, 21, 0.2);
        let l = symmetric_lambda_grid(1.0, 8);
        let anchor = vec![0.0; g.ns()];
        let r = recover_f_initial_interior(InitialSource::Direct(&Nonlinearity::cubic()), &l, g.clone(), &anchor, None).unwrap();
        let h = 1.0 / 8.0;
        for (j, x) in l.iter().enumerate() {
            let du_err = r.du[j].iter().fold(0.0f64, |m, v| m.max((v - 3.0 * x * x).abs()));
            assert!(du_err < 1e-10, "{du_err}");
            // trapezoid error of int 3 s^2 is h^2 |x| / 2
            let f_err = r.f[j].iter().fold(0.0f64, |m, v| m.max((v - x * x * x).abs()));
            assert!((f_err - h * h * x.abs() / 2.0).abs() < 1e-10, "{x}: {f_err}");
        }
        let o = ExactOracle::new(Nonlinearity::cubic(), g.clone());
        let r2 = recover_f_initial_interior(InitialSource::Oracle(&o), &l, g.clone(), &anchor, None).unwrap();
        assert!(r2.mode.starts_with("oracle mode"));
        assert!(r2.f.iter().flatten().zip(r.f.iter().flatten()).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(matches!(recover_f_initial_interior(InitialSource::Direct(&Nonlinearity::cubic()), &l, g, &anchor, Some(1e-3)), Err(Error::Range(_))));
    }
}
