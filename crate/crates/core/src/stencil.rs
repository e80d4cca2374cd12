//! Finite difference weights on arbitrary nodes (Fornberg's recursion).

/// Weights `w[m][j]` such that `sum_j w[m][j] f(x[j])` approximates the
/// m-th derivative of `f` at `z`, for `m = 0..=max_order`.
pub fn fd_weights(z: f64, x: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// One-sided forward weights for the `order`-th derivative at the first of
/// `order + accuracy` equispaced nodes with spacing `h`.
pub fn forward_weights(order: usize, accuracy: usize, h: f64) -> Vec<f64> {
    let n = order + accuracy;
    let nodes: Vec<f64> = (0..n).map(|j| j as f64).collect();
    let w = fd_weights(0.0, &nodes, order);
    let s = h.powi(order as i32);
    w[order].iter().map(|v| v / s).collect()
}
