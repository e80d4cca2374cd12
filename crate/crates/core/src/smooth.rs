//! Smooth cutoff functions.

fn edge(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

/// C-infinity step: 0 for `x <= 0`, 1 for `x >= 1`.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = edge(x);
        a / (a + edge(1.0 - x))
    }
}

/// Compactly supported bump on `(-1, 1)` with value 1 at the origin.
pub fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Equals 1 on `|x| <= inner`, vanishes for `|x| >= outer`.
pub fn plateau(x: f64, inner: f64, outer: f64) -> f64 {
    smooth_step((outer - x.abs()) / (outer - inner))
}

/// Value with first and second derivative along one variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { v, d1: 0.0, d2: 0.0 }
    }

    /// The independent variable at `x`.
    pub fn var(x: f64) -> Self {
        Jet { v: x, d1: 1.0, d2: 0.0 }
    }

    /// `g(self)` given `g`, `g'`, `g''` at `self.v`.
    fn compose(self, g: f64, g1: f64, g2: f64) -> Self {
        Jet { v: g, d1: g1 * self.d1, d2: g2 * self.d1 * self.d1 + g1 * self.d2 }
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.compose(r, -r * r, 2.0 * r * r * r)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.compose(e, e, e)
    }

    pub fn scale(self, c: f64) -> Self {
        Jet { v: c * self.v, d1: c * self.d1, d2: c * self.d2 }
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet { v: self.v + o.v, d1: self.d1 + o.d1, d2: self.d2 + o.d2 }
    }
}

impl std::ops::Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet { v: self.v - o.v, d1: self.d1 - o.d1, d2: self.d2 - o.d2 }
    }
}

impl std::ops::Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet { v: self.v * o.v, d1: self.d1 * o.v + self.v * o.d1, d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2 }
    }
}

fn edge_jet(x: Jet) -> Jet {
    if x.v <= 0.0 {
        Jet::constant(0.0)
    } else {
        x.recip().scale(-1.0).exp()
    }
}

/// [`smooth_step`] with derivatives.
pub fn smooth_step_jet(x: Jet) -> Jet {
    if x.v <= 0.0 {
        Jet::constant(0.0)
    } else if x.v >= 1.0 {
        Jet::constant(1.0)
    } else {
        let a = edge_jet(x);
        a * (a + edge_jet(Jet::constant(1.0) - x)).recip()
    }
}

/// [`plateau`] and its first two derivatives at `x`.
pub fn plateau_jet(x: f64, inner: f64, outer: f64) -> Jet {
    let ax = if x < 0.0 { Jet { v: -x, d1: -1.0, d2: 0.0 } } else { Jet::var(x) };
    smooth_step_jet((Jet::constant(outer) - ax).scale(1.0 / (outer - inner)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_jet_matches_differences() {
        let h = 1e-4;
        for &x in &[-0.8, -0.65, 0.55, 0.7, 0.93, 0.2, 1.1] {
            let j = plateau_jet(x, 0.5, 1.0);
            let f = |y: f64| plateau(y, 0.5, 1.0);
            assert!((j.v - f(x)).abs() < 1e-15);
            let d1 = (f(x + h) - f(x - h)) / (2.0 * h);
            let d2 = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
            assert!((j.d1 - d1).abs() < 1e-5, "{x}: {} vs {d1}", j.d1);
            assert!((j.d2 - d2).abs() < 1e-4, "{x}: {} vs {d2}", j.d2);
        }
    }

    #[test]
    fn step_limits_and_symmetry() {
        assert_eq!(smooth_step(-0.1), 0.0);
        assert_eq!(smooth_step(1.2), 1.0);
        for &x in &[0.1, 0.3, 0.5, 0.77] {
            assert!((smooth_step(x) + smooth_step(1.0 - x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn plateau_shape() {
        assert_eq!(plateau(0.2, 0.5, 1.0), 1.0);
        assert_eq!(plateau(-1.0, 0.5, 1.0), 0.0);
        assert!(plateau(0.75, 0.5, 1.0) > 0.0 && plateau(0.75, 0.5, 1.0) < 1.0);
        assert_eq!(bump(0.0), 1.0);
        assert_eq!(bump(1.0), 0.0);
    }
}
