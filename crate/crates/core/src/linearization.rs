//! Linearization of the boundary measurement map around a nonlinear solution:
//! the effective potential `q = d_u F(t, x, u)` and checks of the Frechet derivative.

use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::WaveField;
use crate::forward::{solve_semilinear, ForwardOptions};
use crate::geometry::BoundaryPortion;
use crate::linear::{final_state, normal_derivative_trace, solve_linear, BoundaryTrace, LinearData, Potential};
use crate::nonlinearity::{ClassTag, DirichletData, Nonlinearity};

/// `q(t, x) = d_u F(t, x, u(t, x))` on the grid of `u`.
pub fn effective_potential(f: &Nonlinearity, u: &WaveField) -> Result<Potential> {
    if !u.is_real() {
        return Err(Error::Shape("effective potential needs a real field".into()));
    }
    let grid = u.grid.clone();
    let ns = grid.ns();
    let coords = grid.space.coords();
    let mut values = Vec::with_capacity(u.levels() * ns);
    for n in 0..u.levels() {
        let t = grid.time(n);
        for (k, &p) in coords.iter().enumerate() {
            let v = u.re[n * ns + k];
            let q = f.du(t, p, v);
            if !q.is_finite() {
                return Err(Error::Evaluation { t, x: p[0], y: p[1], u: v });
            }
            values.push(q);
        }
    }
    Potential::sampled(grid, values)
}

/// Normal derivative trace on a portion plus the final state `(w(T), d_t w(T))`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub trace: BoundaryTrace,
    pub final_value: Vec<Complex64>,
    pub final_velocity: Vec<Complex64>,
}

impl Observation {
    pub fn of(w: &WaveField, portion: &BoundaryPortion) -> Result<Self> {
        let trace = normal_derivative_trace(w, portion)?;
        let (final_value, final_velocity) = final_state(w);
        Ok(Observation { trace, final_value, final_velocity })
    }

    /// Trace `L^2` norm plus discrete `H^1` of `w(T)` plus `L^2` of `d_t w(T)`.
    pub fn norm(&self) -> f64 {
        let sp = &self.trace.grid.space;
        let split = |v: &[Complex64]| -> (Vec<f64>, Vec<f64>) { (v.iter().map(|z| z.re).collect(), v.iter().map(|z| z.im).collect()) };
        let (vr, vi) = split(&self.final_value);
        let (wr, wi) = split(&self.final_velocity);
        let h1 = (sp.h1_norm(&vr).powi(2) + sp.h1_norm(&vi).powi(2)).sqrt();
        let l2 = (sp.l2_norm(&wr).powi(2) + sp.l2_norm(&wi).powi(2)).sqrt();
        self.trace.l2_norm() + h1 + l2
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Observation, b: f64) -> Result<Observation> {
        if self.trace.values.len() != other.trace.values.len() || self.final_value.len() != other.final_value.len() {
            return Err(Error::Shape("observations on different grids".into()));
        }
        let mix = |x: &[Complex64], y: &[Complex64]| x.iter().zip(y).map(|(p, q)| p * a + q * b).collect::<Vec<_>>();
        let mut trace = self.trace.clone();
        trace.values = mix(&self.trace.values, &other.trace.values);
        Ok(Observation {
            trace,
            final_value: mix(&self.final_value, &other.final_value),
            final_velocity: mix(&self.final_velocity, &other.final_velocity),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetOptions {
    pub forward: ForwardOptions,
    /// Admissible radius `L` for `norm_low(G)`; `None` skips the check.
    pub norm_bound: Option<f64>,
}

impl Default for FrechetOptions {
    fn default() -> Self {
        FrechetOptions { forward: ForwardOptions::default(), norm_bound: None }
    }
}

/// The nonlinear measurement map `G -> (d_nu u|gamma, u(T), d_t u(T))`.
pub fn measure(f: &Nonlinearity, g: &DirichletData, portion: &BoundaryPortion, opts: &FrechetOptions) -> Result<Observation> {
    let u = solve_semilinear(f, g, &opts.forward)?;
    Observation::of(&u, portion)
}

#[derive(Debug, Clone)]
pub struct FrechetOutput {
    pub observation: Observation,
    pub potential: Potential,
    pub warnings: Vec<String>,
}

fn check_ball(g: &DirichletData, opts: &FrechetOptions) -> Result<()> {
    if let Some(l) = opts.norm_bound {
        let n = g.norm_low();
        if n > l {
            return Err(Error::Range(format!("base data norm {n:.4e} exceeds the admissible radius {l:.4e}")));
        }
    }
    Ok(())
}

/// Derivative of the measurement map at `G` applied to `H`: the linear problem
/// with potential `d_u F(u_G)`.
pub fn frechet_apply(f: &Nonlinearity, g: &DirichletData, h: &DirichletData, portion: &BoundaryPortion, opts: &FrechetOptions) -> Result<FrechetOutput> {
    check_ball(g, opts)?;
    let u = solve_semilinear(f, g, &opts.forward)?;
    let q = effective_potential(f, &u)?;
    let w = solve_linear(&q, &LinearData::from_real(h), None)?;
    Ok(FrechetOutput { observation: Observation::of(&w, portion)?, potential: q, warnings: Vec::new() })
}

/// Variant restricted to lateral data vanishing near `t = 0` with zero initial values.
pub fn frechet_apply_star(f: &Nonlinearity, g: &DirichletData, h: &DirichletData, portion: &BoundaryPortion, opts: &FrechetOptions) -> Result<FrechetOutput> {
    if h.has_initial_data() {
        return Err(Error::Restriction("star variant requires zero initial data in the direction".into()));
    }
    let mut out = frechet_apply(f, g, h, portion, opts)?;
    if f.class_tag != ClassTag::AStar {
        if g.has_initial_data() {
            return Err(Error::Restriction("star variant with non-zero initial data needs F(0, x, u) = 0".into()));
        }
        out.warnings.push(format!("nonlinearity {} is not tagged A*; allowed because the initial data vanish", f.name()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub scales: Vec<f64>,
    /// `||B(G + sH) - B(G) - s B'(G)H||`.
    pub remainders: Vec<f64>,
    /// `||(B(G + sH) - B(G))/s - B'(G)H||`.
    pub identity_residuals: Vec<f64>,
    /// Consecutive `r(s_k) / r(s_{k+1})`.
    pub ratios: Vec<f64>,
    pub fitted_order: f64,
    pub identity_slope: f64,
    /// All remainders at round-off level relative to the derivative norm.
    pub degenerate: bool,
    pub derivative_norm: f64,
}

/// Relative level below which remainders count as round-off.
pub const DEGENERATE_TOL: f64 = 1e-10;

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Measures the Frechet remainder along `G + sH` for descending scales.
pub fn frechet_remainder_check(f: &Nonlinearity, g: &DirichletData, h: &DirichletData, portion: &BoundaryPortion, scales: &[f64], opts: &FrechetOptions) -> Result<RemainderReport> {
    if scales.len() < 3 || scales.windows(2).any(|w| !(w[0] > w[1])) || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("scales must be positive, strictly descending, with at least three entries".into()));
    }
    let base = measure(f, g, portion, opts)?;
    let deriv = frechet_apply(f, g, h, portion, opts)?.observation;
    let shifted: Vec<Result<Observation>> = scales
        .par_iter()
        .map(|&s| {
            let gs = g.axpy(s, h)?;
            measure(f, &gs, portion, opts).map_err(|e| Error::AtScale { scale: s, source: Box::new(e) })
        })
        .collect();
    let mut remainders = Vec::with_capacity(scales.len());
    let mut identity_residuals = Vec::with_capacity(scales.len());
    for (obs, &s) in shifted.into_iter().zip(scales) {
        let obs = obs?;
        let diff = obs.combine(1.0, &base, -1.0)?;
        let r = diff.combine(1.0, &deriv, -s)?.norm();
        remainders.push(r);
        identity_residuals.push(r / s);
    }
    let derivative_norm = deriv.norm();
    let degenerate = remainders.iter().zip(scales).all(|(r, s)| *r <= DEGENERATE_TOL * (1.0 + s * derivative_norm));
    let ratios = remainders.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(RemainderReport {
        fitted_order: log_log_slope(scales, &remainders),
        identity_slope: log_log_slope(scales, &identity_residuals),
        scales: scales.to_vec(),
        remainders,
        identity_residuals,
        ratios,
        degenerate,
        derivative_norm,
    })
}

impl RemainderReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scale", "remainder", "identity_residual"])?;
        for k in 0..self.scales.len() {
            w.write_record([self.scales[k].to_string(), self.remainders[k].to_string(), self.identity_residuals[k].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `sup |q_{G + sK} - q_G|` along the scales, with a flag for monotone decrease.
pub fn potential_continuity(f: &Nonlinearity, g: &DirichletData, k: &DirichletData, scales: &[f64], opts: &FrechetOptions) -> Result<(Vec<f64>, bool)> {
    let q0 = effective_potential(f, &solve_semilinear(f, g, &opts.forward)?)?;
    let diffs = scales
        .par_iter()
        .map(|&s| {
            let qs = effective_potential(f, &solve_semilinear(f, &g.axpy(s, k)?, &opts.forward)?)?;
            Ok(qs.values().unwrap_or_default().iter().zip(q0.values().unwrap_or_default()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        })
        .collect::<Result<Vec<f64>>>()?;
    let monotone = diffs.windows(2).all(|w| w[1] < w[0]);
    Ok((diffs, monotone))
}
