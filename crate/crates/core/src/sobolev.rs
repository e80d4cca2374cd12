//! Discrete space-time Sobolev norms built from repeated forward differences.

use crate::geometry::{Layout, SpaceTimeGrid};

/// Which derivative orders enter the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orders {
    /// All multi-indices with `|alpha| <= l`.
    Full,
    /// Only the pure derivatives `d_axis^l` of top order.
    TopPure,
}

fn axes(grid: &SpaceTimeGrid) -> (Vec<usize>, Vec<f64>) {
    let dt = grid.dt;
    match grid.space.layout {
        Layout::Line { n, dx } => (vec![grid.nt + 1, n], vec![dt, dx]),
        Layout::Cartesian { nx, ny, dx, dy } => (vec![grid.nt + 1, ny, nx], vec![dt, dy, dx]),
        // index-space surrogate: angular spacing measured on the boundary circle
        Layout::Polar { nr, ntheta, dr, dtheta, r_in } => (vec![grid.nt + 1, nr, ntheta], vec![dt, dr, (r_in + (nr - 1) as f64 * dr) * dtheta]),
    }
}

/// Forward difference along `axis` of a dense row-major array; the axis shrinks by one.
fn diff(a: &[f64], dims: &[usize], axis: usize, h: f64) -> (Vec<f64>, Vec<usize>) {
    let mut nd = dims.to_vec();
    nd[axis] -= 1;
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let n = dims[axis];
    let mut out = Vec::with_capacity(nd.iter().product());
    for o in 0..outer {
        for i in 0..n - 1 {
            let base = (o * n + i) * inner;
            for k in 0..inner {
                out.push((a[base + inner + k] - a[base + k]) / h);
            }
        }
    }
    (out, nd)
}

fn multi_indices(dim: usize, max: usize, orders: Orders) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    let mut cur = vec![0usize; dim];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
        if pos == cur.len() {
            all.push(cur.clone());
            return;
        }
        for k in 0..=left {
            cur[pos] = k;
            rec(pos + 1, left - k, cur, all);
        }
        cur[pos] = 0;
    }
    rec(0, max, &mut cur, &mut all);
    match orders {
        Orders::Full => all,
        Orders::TopPure => all
            .into_iter()
            .filter(|a| a.iter().sum::<usize>() == max && a.iter().filter(|&&k| k > 0).count() == 1)
            .collect(),
    }
}

/// Squared discrete `H^order` (semi)norm of `values` sampled on `grid`.
pub fn space_time_norm_sq(values: &[f64], grid: &SpaceTimeGrid, order: usize, orders: Orders) -> f64 {
    let (dims, h) = axes(grid);
    let cell: f64 = h.iter().product();
    let mut total = 0.0;
    for alpha in multi_indices(dims.len(), order, orders) {
        let mut a = values.to_vec();
        let mut d = dims.clone();
        for (axis, &k) in alpha.iter().enumerate() {
            for _ in 0..k {
                let (na, nd) = diff(&a, &d, axis, h[axis]);
                a = na;
                d = nd;
            }
        }
        total += cell * a.iter().map(|v| v * v).sum::<f64>();
    }
    total
}

pub fn space_time_norm(values: &[f64], grid: &SpaceTimeGrid, order: usize) -> f64 {
    space_time_norm_sq(values, grid, order, Orders::Full).sqrt()
}

/// Sum over axes of `||d_axis^order v||`.
pub fn top_order_seminorm(values: &[f64], grid: &SpaceTimeGrid, order: usize) -> f64 {
    let (dims, h) = axes(grid);
    let cell: f64 = h.iter().product();
    multi_indices(dims.len(), order, Orders::TopPure)
        .into_iter()
        .map(|alpha| {
            let mut a = values.to_vec();
            let mut d = dims.clone();
            for (axis, &k) in alpha.iter().enumerate() {
                for _ in 0..k {
                    let (na, nd) = diff(&a, &d, axis, h[axis]);
                    a = na;
                    d = nd;
                }
            }
            (cell * a.iter().map(|v| v * v).sum::<f64>()).sqrt()
        })
        .sum()
}
