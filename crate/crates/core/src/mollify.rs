//! Mollification of potentials at the scale `rho^{-1/(n+2)}`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Layout, SpaceTimeGrid};
use crate::linear::Potential;
use crate::smooth::bump;

/// Kernel radius `rho^{-1/(n+2)}` for spatial dimension `n`.
pub fn mollifier_radius(rho: f64, n: usize) -> f64 {
    rho.powf(-1.0 / (n as f64 + 2.0))
}

/// Largest `rho` whose kernel still spans two cells of the grid.
pub fn max_resolvable_rho(grid: &SpaceTimeGrid, n: usize) -> f64 {
    (2.0 * grid.space.max_spacing().max(grid.dt)).powf(-(n as f64 + 2.0))
}

/// Normalized discrete weights of the one-dimensional bump with radius `eps` on spacing `h`.
fn weights(eps: f64, h: f64) -> Vec<f64> {
    let m = (eps / h).ceil() as isize;
    let w: Vec<f64> = (-m..=m).map(|k| bump(k as f64 * h / eps)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Rows `-m..len+m` of a `len x inner` block, extended past both ends by point
/// reflection through the end values (`v(-k) = 2 v(0) - v(k)`), which keeps the
/// extension continuously differentiable.
fn extend_rows(src: &[f64], len: usize, inner: usize, m: usize) -> Vec<f64> {
    let total = len + 2 * m;
    let mut ext = vec![0.0; total * inner];
    ext[m * inner..(m + len) * inner].copy_from_slice(src);
    let at = |i: isize| (i + m as isize) as usize * inner;
    let (first, last) = (0isize, len as isize - 1);
    for k in 1..=m as isize {
        for (target, end, mirror) in [(first - k, first, first + k), (last + k, last, last - k)] {
            let (t, e, r) = (at(target), at(end), at(mirror));
            for c in 0..inner {
                ext[t + c] = 2.0 * ext[e + c] - ext[r + c];
            }
        }
    }
    ext
}

/// Convolves along the middle axis of an `outer x len x inner` array.
fn convolve_axis(a: &[f64], len: usize, inner: usize, w: &[f64]) -> Vec<f64> {
    let m = w.len() / 2;
    let mut out = vec![0.0; a.len()];
    out.par_chunks_mut(len * inner).enumerate().for_each(|(o, block)| {
        let ext = extend_rows(&a[o * len * inner..(o + 1) * len * inner], len, inner, m);
        for i in 0..len {
            let row = &mut block[i * inner..(i + 1) * inner];
            for (k, wk) in w.iter().enumerate() {
                let s = &ext[(i + k) * inner..(i + k + 1) * inner];
                row.iter_mut().zip(s).for_each(|(r, v)| *r += wk * v);
            }
        }
    });
    out
}

/// Convolution of `q` (sampled on `base`) with a separable unit-mass bump of radius
/// `rho^{-1/(n+2)}`. Samples are extended past the grid in every axis by point
/// reflection through the end values.
pub fn mollify_potential(q: &Potential, base: Arc<SpaceTimeGrid>, rho: f64, n: usize) -> Result<Potential> {
    if let Potential::Constant(c) = q {
        return Ok(Potential::Constant(*c));
    }
    if !(rho > 0.0) {
        return Err(Error::Config(format!("mollifier parameter must be positive, got {rho}")));
    }
    let eps = mollifier_radius(rho, n);
    let coarsest = base.space.max_spacing().max(base.dt);
    if eps < 2.0 * coarsest {
        return Err(Error::Resolution {
            msg: format!("mollifier radius {eps:.3e} is below two grid cells ({coarsest:.3e})"),
            max_rho: Some(max_resolvable_rho(&base, n)),
        });
    }
    let sampled = q.sample_on(base.clone())?;
    let values = sampled.values().expect("sampled");
    let levels = base.nt + 1;
    let ns = base.ns();
    let mut a = convolve_axis(values, levels, ns, &weights(eps, base.dt));
    match base.space.layout {
        Layout::Line { n: nx, dx } => {
            a = convolve_axis(&a, nx, 1, &weights(eps, dx));
        }
        Layout::Cartesian { nx, ny, dx, dy } => {
            a = convolve_axis(&a, nx, 1, &weights(eps, dx));
            a = convolve_axis(&a, ny, nx, &weights(eps, dy));
        }
        Layout::Polar { .. } => {
            return Err(Error::Config("mollification of non-constant potentials needs a line or Cartesian grid".into()));
        }
    }
    Potential::sampled(base, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domain, SpatialGrid};
    use crate::sobolev;

    fn rect_grid(t: f64) -> Arc<SpaceTimeGrid> {
        let d = Domain::rectangle(0.3, 0.3).unwrap();
        Arc::new(SpaceTimeGrid::with_dt(SpatialGrid::new(&d, 11).unwrap(), 0.01, t, t).unwrap())
    }

    #[test]
    fn extension_reproduces_linear_functions() {
        let src = [1.0, 3.0, 5.0];
        let ext = extend_rows(&src, 3, 1, 5);
        for (i, v) in ext.iter().enumerate() {
            assert_eq!(*v, 1.0 + 2.0 * (i as f64 - 5.0));
        }
    }

    #[test]
    fn unit_mass_keeps_constants() {
        let g = rect_grid(1.0);
        assert!(matches!(mollify_potential(&Potential::constant(0.7), g.clone(), 10.0, 2).unwrap(), Potential::Constant(c) if c == 0.7));
        let q = Potential::from_fn(g.clone(), |_, _| 0.7).unwrap();
        let m = mollify_potential(&q, g, 10.0, 2).unwrap();
        assert!(m.values().unwrap().iter().all(|v| (v - 0.7).abs() < 1e-14));
    }

    #[test]
    fn unresolved_kernel_is_rejected() {
        let g = rect_grid(1.0);
        let q = Potential::from_fn(g.clone(), |t, _| t).unwrap();
        match mollify_potential(&q, g.clone(), 1e8, 2) {
            Err(Error::Resolution { max_rho: Some(r), .. }) => assert!((mollifier_radius(r, 2) - 0.06).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn smooth_potential_converges_in_h2() {
        let g = rect_grid(2.0);
        let q = Potential::from_fn(g.clone(), |t, p| (1.3 * t).sin() * (1.0 + p[0] * p[1])).unwrap();
        let base = q.values().unwrap().to_vec();
        let diffs: Vec<f64> = [10.0, 20.0, 40.0, 80.0]
            .iter()
            .map(|&rho| {
                let m = mollify_potential(&q, g.clone(), rho, 2).unwrap();
                let d: Vec<f64> = m.values().unwrap().iter().zip(&base).map(|(a, b)| a - b).collect();
                sobolev::space_time_norm(&d, &g, 2)
            })
            .collect();
        assert!(diffs.windows(2).all(|w| w[1] < w[0]), "{diffs:?}");
    }

    #[test]
    fn rough_potential_norms_grow_at_the_predicted_rate() {
        let g = rect_grid(4.0);
        // borderline H^2 in time; the quadratic makes the second derivative vanish at both ends
        let q = Potential::from_fn(g.clone(), |t, _| (t - 2.0).abs().powf(1.5) - 0.375 / 2f64.sqrt() * (t - 2.0).powi(2)).unwrap();
        let rhos = [10.0, 20.0, 40.0, 80.0];
        for (l, target) in [(3usize, 0.25), (4, 0.5)] {
            let norms: Vec<f64> = rhos
                .iter()
                .map(|&rho| sobolev::top_order_seminorm(mollify_potential(&q, g.clone(), rho, 2).unwrap().values().unwrap(), &g, l))
                .collect();
            let slope = crate::linearization::log_log_slope(&rhos, &norms);
            assert!((slope - target).abs() <= 0.2 * target, "l={l}: {slope} {norms:?}");
        }
    }
}
