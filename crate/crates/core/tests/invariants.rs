use std::f64::consts::PI;
use std::sync::Arc;

use semiwave::geometry::{apply_wave_operator, BoundaryParam, BoundaryPortion, Domain, Endpoint, SpaceTimeGrid, SpatialGrid};
use semiwave::linearization::log_log_slope;
use semiwave::nonlinearity::{estimate_existence_time, Coefficient, ExistenceOptions, Nonlinearity};
use semiwave::probe::ProbeOptions;
use semiwave::recovery::{recover_du_f_lateral, simulate_measurements, Background, BoundaryCutoff, ProbePoint, RecoveryConfig, RhoLadder};

fn eigenmode_residual(domain: &Domain, n: usize, mode: impl Fn(f64, [f64; 2]) -> f64) -> (f64, f64) {
    let grid = SpaceTimeGrid::with_cfl(SpatialGrid::new(domain, n).unwrap(), 1.0, 1.0, 0.5).unwrap();
    let ns = grid.ns();
    let coords = grid.space.coords();
    let vals: Vec<f64> = (0..=grid.nt).flat_map(|k| coords.iter().map(move |p| (k, *p))).map(|(k, p)| mode(grid.time(k), p)).collect();
    let res = apply_wave_operator(&vals, &grid).unwrap();
    let mut worst: f64 = 0.0;
    for k in 1..grid.nt {
        for j in 0..ns {
            if !grid.space.is_boundary(j) {
                worst = worst.max(res[k * ns + j].abs());
            }
        }
    }
    (grid.space.max_spacing(), worst)
}

#[test]
fn wave_operator_is_second_order_on_eigenmodes() {
    let line = Domain::interval(1.0).unwrap();
    let rect = Domain::rectangle(1.0, 1.0).unwrap();
    let cases: Vec<(&Domain, Box<dyn Fn(f64, [f64; 2]) -> f64>)> = vec![
        (&line, Box::new(|t, p| (2.0 * PI * p[0]).sin() * (2.0 * PI * t).cos())),
        (&rect, Box::new(|t, p| (PI * p[0]).sin() * (2.0 * PI * p[1]).sin() * (5f64.sqrt() * PI * t).cos())),
    ];
    for (d, mode) in cases {
        let (h, r): (Vec<f64>, Vec<f64>) = [17, 33, 65].iter().map(|&n| eigenmode_residual(d, n, &mode)).unzip();
        let order = log_log_slope(&h, &r);
        assert!(order >= 1.9, "{order}: {r:?}");
    }
}

#[test]
fn existence_time_does_not_grow_with_the_data() {
    let d = Domain::interval(PI).unwrap();
    let grid = SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, 17).unwrap(), 2.0, 2.0, 0.5).unwrap();
    let f = Nonlinearity::quadratic(Coefficient::constant(-1.0));
    let t1: Vec<f64> = [1.0, 4.0, 16.0].iter().map(|&l| estimate_existence_time(&f, l, &grid, &ExistenceOptions::default()).unwrap().t1).collect();
    assert!(t1.windows(2).all(|w| w[1] <= w[0]), "{t1:?}");
    assert!(t1[2] < t1[0], "{t1:?}");
}

// estimates amplify relative trace noise by about 2e5 at this ladder
const NOISE: f64 = 1e-8;

#[test]
fn identical_sources_give_identical_recoveries() {
    let d = Domain::interval(PI).unwrap();
    let gamma = BoundaryPortion::Endpoints { left: true, right: false };
    let cfg = RecoveryConfig {
        lambda_grid: vec![-0.5, 0.0, 0.5],
        chi_boundary: BoundaryCutoff { ramp: 0.2, gamma, taper: 0.0 },
        delta: 0.2,
        horizon: 1.2,
        probe_points: vec![ProbePoint { t0: 0.6, x0: BoundaryParam::End { end: Endpoint::Left }, delta: None }],
        rho_ladder: RhoLadder::default(),
        probe: ProbeOptions::default(),
        faces: None,
    };
    let base = Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, 65).unwrap(), 1.2, 1.2, 0.5).unwrap());
    let f = || Nonlinearity::quadratic(Coefficient::constant(0.8));
    let run = |seed| {
        let src = simulate_measurements(f(), Background::Lateral { chi: cfg.chi_boundary.clone() }, base.clone()).with_noise(NOISE, seed);
        recover_du_f_lateral(&src, &cfg, &d).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    for k in 0..3 {
        let (va, vb, vc) = (a.estimates[0][k].value, b.estimates[0][k].value, c.estimates[0][k].value);
        assert_eq!(va, vb);
        assert!((va - vc).abs() <= 0.01, "{va} {vc}");
    }
}
