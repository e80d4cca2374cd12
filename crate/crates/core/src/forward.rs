//! Forward solvers for the semilinear problem: leapfrog finite differences
//! and a spectral Picard iteration on the Duhamel formula.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::WaveField;
use crate::geometry::{Layout, SpaceTimeGrid, SpatialGrid};
use crate::nonlinearity::{DirichletData, Nonlinearity};
use crate::smooth::plateau;
use crate::stencil::{fd_weights, forward_weights};

pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e6;

/// The lift keeps its Taylor part unchanged on `[0, LIFT_TAPER T']` and tapers it off beyond.
pub const LIFT_TAPER: f64 = 1.0;

/// Harmonic extension of boundary values (ordered as `grid.boundary_nodes()`).
/// A previous solution may be passed as a warm start.
pub fn harmonic_extension(grid: &SpatialGrid, boundary: &[f64], warm: Option<&[f64]>) -> Result<Vec<f64>> {
    let bn = grid.boundary_nodes();
    if boundary.len() != bn.len() {
        return Err(Error::Shape(format!("{} boundary values for {} boundary nodes", boundary.len(), bn.len())));
    }
    let mut out = vec![0.0; grid.len()];
    if boundary.iter().all(|v| *v == 0.0) {
        return Ok(out);
    }
    match grid.layout {
        Layout::Line { n, .. } => {
            let (a, b) = (boundary[0], boundary[1]);
            for (i, v) in out.iter_mut().enumerate() {
                let s = i as f64 / (n - 1) as f64;
                *v = (1.0 - s) * a + s * b;
            }
        }
        Layout::Cartesian { nx, ny, .. } => {
            for (&k, &v) in bn.iter().zip(boundary) {
                out[k] = v;
            }
            if let Some(w) = warm {
                for k in 0..grid.len() {
                    if !grid.is_boundary(k) {
                        out[k] = w[k];
                    }
                }
            }
            laplace_cg(grid, &mut out, nx, ny)?;
        }
        Layout::Polar { nr, ntheta, dr, .. } => {
            let radius = (nr - 1) as f64 * dr;
            let kmax = ntheta / 2;
            let mut a = vec![0.0; kmax + 1];
            let mut b = vec![0.0; kmax + 1];
            for k in 0..=kmax {
                for (j, g) in boundary.iter().enumerate() {
                    let th = 2.0 * PI * (k * j) as f64 / ntheta as f64;
                    a[k] += g * th.cos();
                    b[k] += g * th.sin();
                }
                let norm = if k == 0 || (ntheta % 2 == 0 && k == kmax) { ntheta as f64 } else { 0.5 * ntheta as f64 };
                a[k] /= norm;
                b[k] /= norm;
            }
            for i in 0..nr {
                let rho = i as f64 * dr / radius;
                for j in 0..ntheta {
                    let mut v = a[0];
                    let mut pw = 1.0;
                    for k in 1..=kmax {
                        pw *= rho;
                        let th = 2.0 * PI * (k * j) as f64 / ntheta as f64;
                        v += pw * (a[k] * th.cos() + b[k] * th.sin());
                    }
                    out[i * ntheta + j] = v;
                }
            }
            for (&k, &v) in bn.iter().zip(boundary) {
                out[k] = v;
            }
        }
    }
    Ok(out)
}

/// Conjugate gradients for the five-point Laplace equation with the
/// boundary entries of `u` held fixed.
fn laplace_cg(grid: &SpatialGrid, u: &mut [f64], nx: usize, ny: usize) -> Result<()> {
    let n = grid.len();
    let interior = |k: usize| !grid.is_boundary(k);
    let mut lap = vec![0.0; n];
    grid.laplacian(u, &mut lap);
    // solve -Lap x = Lap u on the interior, x vanishing on the boundary
    let mut r: Vec<f64> = (0..n).map(|k| if interior(k) { lap[k] } else { 0.0 }).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let scale: f64 = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = (1e-13 * scale).powi(2) * n as f64 * 1e-2;
    let mut ap = vec![0.0; n];
    let max_iter = 4 * (nx + ny) * 10;
    let mut it = 0;
    while rr > target && it < max_iter {
        grid.laplacian(&p, &mut ap);
        for k in 0..n {
            ap[k] = if interior(k) { -ap[k] } else { 0.0 };
        }
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rr / pap;
        for k in 0..n {
            u[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
        it += 1;
    }
    if !rr.is_finite() {
        return Err(Error::Divergence { iterations: it, ratio: f64::NAN });
    }
    Ok(())
}

/// Options of [`lift_data`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftOptions {
    /// Number of compatibility identities (orders `0..compat_orders`) that must hold.
    pub compat_orders: usize,
}

impl Default for LiftOptions {
    fn default() -> Self {
        LiftOptions { compat_orders: 2 }
    }
}

/// Lifting `G = w(t) P(t) + H[f - w P]` together with `d_t^2 G`.
struct Lift {
    g: Vec<f64>,
    gtt: Vec<f64>,
    /// Taylor coefficient fields and their harmonic parts.
    taylor: [Vec<f64>; 6],
    taylor_harm: [Vec<f64>; 6],
    /// `H[f]` at each level.
    harm_f: Vec<Vec<f64>>,
    /// `d_t G` at `t = 0`.
    gt0: Vec<f64>,
}

fn cutoff(t: f64, tau: f64) -> f64 {
    plateau(t, tau, 2.0 * tau)
}

fn cutoff_derivs(t: f64, tau: f64) -> [f64; 3] {
    let h = 1e-4 * tau;
    let w = |s: f64| cutoff(s, tau);
    let d1 = (w(t - 2.0 * h) - 8.0 * w(t - h) + 8.0 * w(t + h) - w(t + 2.0 * h)) / (12.0 * h);
    let d2 = (-w(t - 2.0 * h) + 16.0 * w(t - h) - 30.0 * w(t) + 16.0 * w(t + h) - w(t + 2.0 * h)) / (12.0 * h * h);
    [w(t), d1, d2]
}

/// Weights of a derivative of `order` at level `n` from a window of
/// `width` samples kept inside `[0, levels)`.
fn window_weights(n: usize, levels: usize, order: usize, width: usize, dt: f64) -> (usize, Vec<f64>) {
    let width = width.min(levels);
    let start = n.saturating_sub(width / 2).min(levels - width);
    let nodes: Vec<f64> = (0..width).map(|j| (start + j) as f64 - n as f64).collect();
    let w = fd_weights(0.0, &nodes, order);
    (start, w[order].iter().map(|c| c / dt.powi(order as i32)).collect())
}

fn build_lift(data: &DirichletData, opts: &LiftOptions) -> Result<Lift> {
    let report = data.validate()?;
    for k in 0..opts.compat_orders.min(5) {
        if !report.comp1_ok[k] {
            return Err(Error::Compatibility { index: k, residual: report.comp1_residuals[k] });
        }
    }
    let grid = &data.grid;
    let sp = &grid.space;
    let ns = sp.len();
    let nb = data.nb();
    let levels = grid.nt + 1;
    let bn = sp.boundary_nodes();
    let lap0 = sp.laplacian_extended(&data.u0);
    let lap1 = sp.laplacian_extended(&data.u1);
    let bilap0 = sp.laplacian_extended(&lap0);
    let bilap1 = sp.laplacian_extended(&lap1);
    let taylor = [data.u0.clone(), data.u1.clone(), lap0, lap1, bilap0, bilap1];
    let mut taylor_harm: [Vec<f64>; 6] = Default::default();
    for (m, d) in taylor.iter().enumerate() {
        let b: Vec<f64> = bn.iter().map(|&k| d[k]).collect();
        taylor_harm[m] = harmonic_extension(sp, &b, None)?;
    }
    let tau = LIFT_TAPER * grid.t_prime;
    let fact = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0];

    let mut harm_f: Vec<Vec<f64>> = Vec::with_capacity(levels);
    let mut harm_ftt = Vec::with_capacity(levels);
    let mut prev: Option<Vec<f64>> = None;
    let mut prev_tt: Option<Vec<f64>> = None;
    for n in 0..levels {
        let h = harmonic_extension(sp, data.f_at(n), prev.as_deref())?;
        let (start, w) = window_weights(n, data.levels, 2, 6, grid.dt);
        let ftt: Vec<f64> = (0..nb)
            .map(|b| w.iter().enumerate().map(|(j, c)| c * data.f[(start + j) * nb + b]).sum())
            .collect();
        let htt = harmonic_extension(sp, &ftt, prev_tt.as_deref())?;
        prev = Some(h.clone());
        prev_tt = Some(htt.clone());
        harm_f.push(h);
        harm_ftt.push(htt);
    }

    let mut g = vec![0.0; levels * ns];
    let mut gtt = vec![0.0; levels * ns];
    for n in 0..levels {
        let t = grid.time(n);
        let [w, w1, w2] = cutoff_derivs(t, tau);
        // coefficients of D_m in w P, and in its second time derivative
        let mut c = [0.0; 6];
        let mut ctt = [0.0; 6];
        for m in 0..6 {
            let p = t.powi(m as i32) / fact[m];
            let p1 = if m >= 1 { t.powi(m as i32 - 1) / fact[m - 1] } else { 0.0 };
            let p2 = if m >= 2 { t.powi(m as i32 - 2) / fact[m - 2] } else { 0.0 };
            c[m] = w * p;
            ctt[m] = w2 * p + 2.0 * w1 * p1 + w * p2;
        }
        let row = &mut g[n * ns..(n + 1) * ns];
        let row_tt = &mut gtt[n * ns..(n + 1) * ns];
        for k in 0..ns {
            let mut v = harm_f[n][k];
            let mut vtt = harm_ftt[n][k];
            for m in 0..6 {
                let d = taylor[m][k] - taylor_harm[m][k];
                v += c[m] * d;
                vtt += ctt[m] * d;
            }
            row[k] = v;
            row_tt[k] = vtt;
        }
    }
    let w1 = forward_weights(1, 4, grid.dt);
    let ft0: Vec<f64> = (0..nb).map(|b| w1.iter().enumerate().map(|(j, c)| c * data.f[j * nb + b]).sum()).collect();
    let mut resid: Vec<f64> = ft0.clone();
    for (i, &k) in bn.iter().enumerate() {
        resid[i] -= data.u1[k];
    }
    let corr = harmonic_extension(sp, &resid, None)?;
    let gt0 = (0..ns).map(|k| if sp.is_boundary(k) { ft0[bn.iter().position(|&b| b == k).unwrap_or(0)] } else { data.u1[k] + corr[k] }).collect();
    Ok(Lift { g, gtt, taylor, taylor_harm, harm_f, gt0 })
}

/// Smooth space-time field matching the lateral data and the initial traces.
pub fn lift_data(data: &DirichletData, opts: &LiftOptions) -> Result<WaveField> {
    let lift = build_lift(data, opts)?;
    WaveField::real(data.grid.clone(), lift.g)
}

/// Options of [`solve_semilinear`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub blowup_threshold: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { blowup_threshold: DEFAULT_BLOWUP_THRESHOLD }
    }
}

/// Explicit leapfrog for `u_tt - Lap u + F(t, x, u) = 0` with Dirichlet rows
/// overwritten by the lateral data.
pub fn solve_semilinear(f: &Nonlinearity, data: &DirichletData, opts: &ForwardOptions) -> Result<WaveField> {
    let grid = data.grid.clone();
    let sp = &grid.space;
    let ns = sp.len();
    let nt = grid.nt;
    if data.levels < nt + 1 {
        return Err(Error::Shape(format!("data cover {} levels, solve needs {}", data.levels, nt + 1)));
    }
    let dt2 = grid.dt * grid.dt;
    let coords = sp.coords();
    let bn = sp.boundary_nodes();
    let mut out = vec![0.0; (nt + 1) * ns];
    let mut lap = vec![0.0; ns];
    let mut fval = vec![0.0; ns];

    let eval_f = |t: f64, u: &[f64], fval: &mut [f64]| {
        if f.is_zero() {
            fval.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for k in 0..ns {
                fval[k] = f.eval(t, coords[k], u[k]);
            }
        }
    };

    out[..ns].copy_from_slice(&data.u0);
    for (i, &k) in bn.iter().enumerate() {
        out[k] = data.f_at(0)[i];
    }
    {
        let u0 = out[..ns].to_vec();
        sp.laplacian(&u0, &mut lap);
        eval_f(0.0, &u0, &mut fval);
        let next = &mut out[ns..2 * ns];
        for k in 0..ns {
            next[k] = u0[k] + grid.dt * data.u1[k] + 0.5 * dt2 * (lap[k] - fval[k]);
        }
        for (i, &k) in bn.iter().enumerate() {
            next[k] = data.f_at(1)[i];
        }
    }
    for n in 1..nt {
        let t = grid.time(n);
        let (head, tail) = out.split_at_mut((n + 1) * ns);
        let prev = &head[(n - 1) * ns..n * ns];
        let cur = &head[n * ns..(n + 1) * ns];
        let next = &mut tail[..ns];
        sp.laplacian(cur, &mut lap);
        eval_f(t, cur, &mut fval);
        let mut sup: f64 = 0.0;
        for k in 0..ns {
            next[k] = 2.0 * cur[k] - prev[k] + dt2 * (lap[k] - fval[k]);
            sup = sup.max(next[k].abs());
        }
        for (i, &k) in bn.iter().enumerate() {
            next[k] = data.f_at(n + 1)[i];
        }
        if !(sup <= opts.blowup_threshold) {
            return Err(Error::BlowUp { time: grid.time(n + 1), max_abs: sup });
        }
    }
    WaveField::real(grid, out)
}

/// Sine basis of the Dirichlet Laplacian sampled on a line or Cartesian grid.
struct SineBasis {
    /// per axis: (node count, retained modes, wavenumbers, K x n sample matrix)
    axes: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl SineBasis {
    fn new(grid: &SpatialGrid, modes: Option<usize>) -> Result<Self> {
        let dims: Vec<(usize, f64)> = match grid.layout {
            Layout::Line { n, dx } => vec![(n, dx * (n - 1) as f64)],
            Layout::Cartesian { nx, ny, dx, dy } => vec![(nx, dx * (nx - 1) as f64), (ny, dy * (ny - 1) as f64)],
            Layout::Polar { .. } => {
                return Err(Error::Config("the spectral oracle needs an interval or a rectangle".into()))
            }
        };
        let axes = dims
            .into_iter()
            .map(|(n, len)| {
                let k = modes.unwrap_or((n - 1) / 2).min(n - 2);
                let wn: Vec<f64> = (1..=k).map(|m| m as f64 * PI / len).collect();
                let mut s = vec![0.0; k * n];
                for m in 0..k {
                    for i in 0..n {
                        s[m * n + i] = ((m + 1) as f64 * PI * i as f64 / (n - 1) as f64).sin();
                    }
                }
                (n, k, wn, s)
            })
            .collect();
        Ok(SineBasis { axes })
    }

    fn len(&self) -> usize {
        self.axes.iter().map(|a| a.1).product()
    }

    fn omegas(&self) -> Vec<f64> {
        match self.axes.as_slice() {
            [a] => a.2.clone(),
            [a, b] => {
                let mut w = Vec::with_capacity(a.1 * b.1);
                for l in 0..b.1 {
                    for k in 0..a.1 {
                        w.push((a.2[k].powi(2) + b.2[l].powi(2)).sqrt());
                    }
                }
                w
            }
            _ => unreachable!(),
        }
    }

    /// Discrete sine coefficients (boundary samples carry zero weight).
    fn forward(&self, g: &[f64]) -> Vec<f64> {
        match self.axes.as_slice() {
            [(n, k, _, s)] => (0..*k)
                .map(|m| 2.0 / (*n - 1) as f64 * (0..*n).map(|i| s[m * n + i] * g[i]).sum::<f64>())
                .collect(),
            [(nx, kx, _, sx), (ny, ky, _, sy)] => {
                let mut tmp = vec![0.0; kx * ny];
                for j in 0..*ny {
                    let row = &g[j * nx..(j + 1) * nx];
                    for m in 0..*kx {
                        tmp[j * kx + m] = sx[m * nx..(m + 1) * nx].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                let c = 4.0 / ((*nx - 1) * (*ny - 1)) as f64;
                let mut out = vec![0.0; kx * ky];
                for l in 0..*ky {
                    for j in 0..*ny {
                        let w = sy[l * ny + j];
                        if w == 0.0 {
                            continue;
                        }
                        for m in 0..*kx {
                            out[l * kx + m] += w * tmp[j * kx + m];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= c);
                out
            }
            _ => unreachable!(),
        }
    }

    fn inverse(&self, c: &[f64], out: &mut [f64]) {
        match self.axes.as_slice() {
            [(n, k, _, s)] => {
                for i in 0..*n {
                    out[i] = (0..*k).map(|m| c[m] * s[m * n + i]).sum();
                }
            }
            [(nx, kx, _, sx), (ny, ky, _, sy)] => {
                let mut tmp = vec![0.0; kx * ny];
                for l in 0..*ky {
                    for j in 0..*ny {
                        let w = sy[l * ny + j];
                        for m in 0..*kx {
                            tmp[j * kx + m] += w * c[l * kx + m];
                        }
                    }
                }
                for j in 0..*ny {
                    for i in 0..*nx {
                        out[j * nx + i] = (0..*kx).map(|m| tmp[j * kx + m] * sx[m * nx + i]).sum();
                    }
                }
            }
            _ => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Retained sine modes per axis; defaults to half the node count.
    pub modes: Option<usize>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { max_iters: 50, tol: 1e-10, modes: None }
    }
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub field: WaveField,
    pub iterations: usize,
    pub contraction: f64,
    /// Relative size of the discarded high modes of the final source term.
    pub tail_norm: f64,
    /// First iterate minus the linear solution.
    pub first_correction: Vec<f64>,
}

/// Fixed point of the Duhamel map in a truncated sine basis, using the
/// trapezoid rule in time.
pub fn picard_duhamel_solve(f: &Nonlinearity, data: &DirichletData, opts: &PicardOptions) -> Result<PicardOutcome> {
    let grid = data.grid.clone();
    let sp = &grid.space;
    let basis = SineBasis::new(sp, opts.modes)?;
    let lift = build_lift(data, &LiftOptions::default())?;
    let ns = sp.len();
    let levels = grid.nt + 1;
    let dt = grid.dt;
    let nm = basis.len();
    let om = basis.omegas();
    let coords = sp.coords();
    let tau = LIFT_TAPER * grid.t_prime;
    let fact = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0];

    // source without the nonlinear term: -G_tt + Lap G, with Lap G taken
    // spectrally on the part of G that vanishes on the boundary
    let zero_part: Vec<Vec<f64>> = (0..6)
        .map(|m| {
            let d: Vec<f64> = (0..ns).map(|k| lift.taylor[m][k] - lift.taylor_harm[m][k]).collect();
            basis.forward(&d)
        })
        .collect();
    let mut linear_src = vec![0.0; levels * nm];
    for n in 0..levels {
        let t = grid.time(n);
        let w = cutoff(t, tau);
        let gtt = basis.forward(&lift.gtt[n * ns..(n + 1) * ns]);
        // the harmonic part H[f] is discretely harmonic on the grid
        let hf = &lift.harm_f[n];
        let mut lap_h = vec![0.0; ns];
        sp.laplacian(hf, &mut lap_h);
        let lap_h_modal = basis.forward(&lap_h);
        for q in 0..nm {
            let mut lapg = lap_h_modal[q];
            for m in 0..6 {
                lapg -= om[q] * om[q] * w * t.powi(m as i32) / fact[m] * zero_part[m][q];
            }
            linear_src[n * nm + q] = -gtt[q] + lapg;
        }
    }
    let g0 = &lift.g[..ns];
    let a0 = basis.forward(&data.u0.iter().zip(g0).map(|(a, b)| a - b).collect::<Vec<_>>());
    let b0 = basis.forward(&data.u1.iter().zip(&lift.gt0).map(|(a, b)| a - b).collect::<Vec<_>>());

    let duhamel = |src: &[f64]| -> Vec<f64> {
        let mut coef = vec![0.0; levels * nm];
        for q in 0..nm {
            let w = om[q];
            // running sums of dt * cos(ws) S(s) and dt * sin(ws) S(s)
            let mut cs = 0.0;
            let mut sn = 0.0;
            let mut first = (0.0, 0.0);
            for n in 0..levels {
                let (s, c) = (w * grid.time(n)).sin_cos();
                let val = src[n * nm + q];
                let (ci, si) = (c * val, s * val);
                if n == 0 {
                    first = (ci, si);
                }
                cs += dt * ci;
                sn += dt * si;
                let (ic, is) = if n == 0 {
                    (0.0, 0.0)
                } else {
                    (cs - 0.5 * dt * (first.0 + ci), sn - 0.5 * dt * (first.1 + si))
                };
                coef[n * nm + q] = a0[q] * c + b0[q] * s / w + (s * ic - c * is) / w;
            }
        }
        coef
    };

    let nonlinear = !f.is_zero();
    let to_nodes = |coef: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; levels * ns];
        for n in 0..levels {
            basis.inverse(&coef[n * nm..(n + 1) * nm], &mut out[n * ns..(n + 1) * ns]);
        }
        out
    };
    // linear part first; the iteration starts from it
    let v_lin = to_nodes(&duhamel(&linear_src));
    let mut v = v_lin.clone();
    let mut u = vec![0.0; ns];
    let mut src = vec![0.0; levels * nm];
    let mut prev_diff = f64::NAN;
    let mut contraction = 0.0;
    let mut first_correction = Vec::new();
    let tail_norm;
    for it in 1..=opts.max_iters {
        for n in 0..levels {
            let t = grid.time(n);
            let row = &mut src[n * nm..(n + 1) * nm];
            row.copy_from_slice(&linear_src[n * nm..(n + 1) * nm]);
            if nonlinear {
                for k in 0..ns {
                    u[k] = f.eval(t, coords[k], lift.g[n * ns + k] + v[n * ns + k]);
                }
                let fm = basis.forward(&u);
                for q in 0..nm {
                    row[q] -= fm[q];
                }
            }
        }
        let vnew = to_nodes(&duhamel(&src));
        if !vnew.iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence { iterations: it, ratio: f64::INFINITY });
        }
        let diff = vnew.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = 1.0 + vnew.iter().zip(&lift.g).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        if it >= 2 && prev_diff > 0.0 {
            contraction = diff / prev_diff;
        }
        prev_diff = diff;
        if it == 1 {
            first_correction = vnew.iter().zip(&v_lin).map(|(a, b)| a - b).collect();
        }
        v = vnew;
        if scale > DEFAULT_BLOWUP_THRESHOLD || diff > 1e3 * scale {
            return Err(Error::Divergence { iterations: it, ratio: contraction.max(1.0) });
        }
        if diff <= opts.tol * scale {
            tail_norm = tail_fraction(sp, &basis, &src, nm, levels)?;
            let re = lift.g.iter().zip(&v).map(|(a, b)| a + b).collect();
            return Ok(PicardOutcome {
                field: WaveField::real(grid, re)?,
                iterations: it,
                contraction,
                tail_norm,
                first_correction,
            });
        }
    }
    Err(Error::Divergence { iterations: opts.max_iters, ratio: contraction })
}

/// Fraction of the final source's norm carried by discarded modes, at the last level.
fn tail_fraction(
    sp: &SpatialGrid,
    basis: &SineBasis,
    src: &[f64],
    nm: usize,
    levels: usize,
) -> Result<f64> {
    let full = SineBasis::new(sp, Some(usize::MAX))?;
    let n = levels - 1;
    let mut phys = vec![0.0; sp.len()];
    basis.inverse(&src[n * nm..(n + 1) * nm], &mut phys);
    let kept: f64 = src[n * nm..(n + 1) * nm].iter().map(|v| v * v).sum();
    let all: f64 = full.forward(&phys).iter().map(|v| v * v).sum();
    Ok(if all > 0.0 { ((all - kept).max(0.0) / all).sqrt() } else { 0.0 })
}

/// Norms tracked by the local existence theory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyNorms {
    pub c_h1: f64,
    pub lp_l2p: f64,
    pub c1_l2: f64,
}

/// `sup_t ||u||_{H^1}`, `||u||_{L^p(0,T; L^{2p})}` and `sup_t ||d_t u||_{L^2}`.
pub fn energy_norms(u: &WaveField, p: f64) -> Result<EnergyNorms> {
    if !(p >= 1.0) {
        return Err(Error::Config(format!("exponent p must be at least 1, got {p}")));
    }
    let grid = &u.grid;
    let sp = &grid.space;
    let ns = sp.len();
    let levels = u.levels();
    let w = sp.weights();
    let modulus = |n: usize| -> Vec<f64> {
        match u.level_im(n) {
            None => u.level(n).to_vec(),
            Some(im) => u.level(n).iter().zip(im).map(|(a, b)| a.hypot(*b)).collect(),
        }
    };
    let mut c_h1: f64 = 0.0;
    let mut lp = 0.0;
    let mut c1: f64 = 0.0;
    for n in 0..levels {
        let mut h1 = 0.0;
        for part in [Some(u.level(n)), u.level_im(n)].into_iter().flatten() {
            let g = sp.grad_sq(part);
            h1 += (0..ns).map(|k| w[k] * (part[k] * part[k] + g[k])).sum::<f64>();
        }
        c_h1 = c_h1.max(h1.sqrt());
        let m = modulus(n);
        let l2p = (0..ns).map(|k| w[k] * m[k].powf(2.0 * p)).sum::<f64>().powf(1.0 / (2.0 * p));
        let wt = if n == 0 || n == levels - 1 { 0.5 * grid.dt } else { grid.dt };
        lp += wt * l2p.powf(p);
        if n + 1 < levels {
            let mut s = 0.0;
            for k in 0..ns {
                let dre = (u.re[(n + 1) * ns + k] - u.re[n * ns + k]) / grid.dt;
                let dim = u.im.as_ref().map_or(0.0, |v| (v[(n + 1) * ns + k] - v[n * ns + k]) / grid.dt);
                s += w[k] * (dre * dre + dim * dim);
            }
            c1 = c1.max(s.sqrt());
        }
    }
    Ok(EnergyNorms { c_h1, lp_l2p: lp.powf(1.0 / p), c1_l2: c1 })
}

/// Discrete energy conserved by leapfrog for the free equation:
/// `||(u^{n+1} - u^n)/dt||^2 - <Lap_h u^{n+1}, u^n>`.
pub fn discrete_energy(u: &WaveField) -> Vec<f64> {
    let grid = &u.grid;
    let sp = &grid.space;
    let ns = sp.len();
    let w = sp.weights();
    let mut lap = vec![0.0; ns];
    (0..u.levels() - 1)
        .map(|n| {
            let a = u.level(n);
            let b = u.level(n + 1);
            sp.laplacian(b, &mut lap);
            (0..ns).map(|k| w[k] * (((b[k] - a[k]) / grid.dt).powi(2) - lap[k] * a[k])).sum()
        })
        .collect()
}

/// Convenience: grid as a shared handle.
pub fn shared(grid: SpaceTimeGrid) -> Arc<SpaceTimeGrid> {
    Arc::new(grid)
}
