use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use proptest::prelude::*;

use semiwave::field::WaveField;
use semiwave::forward::{solve_semilinear, ForwardOptions};
use semiwave::geometry::{BoundaryParam, BoundaryPortion, Domain, Endpoint, Face, SpaceTimeGrid, SpatialGrid};
use semiwave::linear::{dtn_apply, DtnMode, LinearData, Potential};
use semiwave::linearization::effective_potential;
use semiwave::nonlinearity::{validate_class, validate_data, Coefficient, DataSpec, Nonlinearity, SpaceProfile, TimeProfile};
use semiwave::persist;
use semiwave::probe::{ProbeOptions, ProbeSetup, ProbeSpec};
use semiwave::recovery::{assemble_f, extrapolate, matched_filter, symmetric_lambda_grid, BoundaryCutoff, FilterValue, TraceFrame};

fn domains() -> Vec<Domain> {
    vec![Domain::interval(PI).unwrap(), Domain::rectangle(1.0, 0.7).unwrap(), Domain::disk(1.0).unwrap()]
}

fn interval_grid(n: usize, t: f64) -> Arc<SpaceTimeGrid> {
    let d = Domain::interval(PI).unwrap();
    Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, n).unwrap(), t, t, 0.5).unwrap())
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn normal_coordinates_round_trip(which in 0usize..3, a in 0.0f64..1.0, b in 0.0f64..1.0, depth in 0.0f64..0.99) {
        let d = &domains()[which];
        let xn = depth * d.collar_width;
        let param = match which {
            0 => BoundaryParam::End { end: if a < 0.5 { Endpoint::Left } else { Endpoint::Right } },
            1 => {
                let face = [Face::Bottom, Face::Right, Face::Top, Face::Left][(a * 4.0) as usize % 4];
                let len = if matches!(face, Face::Bottom | Face::Top) { 1.0 } else { 0.7 };
                // stay off the corner bisectors, where the nearest face is ambiguous
                BoundaryParam::Face { face, s: xn + 1e-6 + b * (len - 2.0 * xn - 2e-6) }
            }
            _ => BoundaryParam::Angle { theta: b * 2.0 * PI },
        };
        let p = d.exp_boundary(&param, xn).unwrap();
        let (back, depth_back) = d.boundary_normal_coords(p).unwrap();
        prop_assert!((depth_back - xn).abs() < 1e-12);
        let q = d.exp_boundary(&back, depth_back).unwrap();
        prop_assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        // eikonal: unit gradient of the distance off the ridges
        if xn > 1e-3 {
            let h = 1e-6;
            let g = |e: [f64; 2]| (d.boundary_distance([p[0] + h * e[0], p[1] + h * e[1]]).unwrap() - d.boundary_distance([p[0] - h * e[0], p[1] - h * e[1]]).unwrap()) / (2.0 * h);
            let norm = if which == 0 { g([1.0, 0.0]).abs() } else { g([1.0, 0.0]).hypot(g([0.0, 1.0])) };
            prop_assert!((norm - 1.0).abs() < 1e-6, "{norm}");
        }
    }

    #[test]
    fn cutoff_stays_in_unit_range(t in -0.5f64..2.0, s in -0.2f64..1.2, ramp in 0.01f64..0.5, taper in 0.0f64..0.3) {
        let d = Domain::rectangle(1.0, 1.0).unwrap();
        let c = BoundaryCutoff { ramp, gamma: BoundaryPortion::FaceSegment { face: Face::Bottom, start: 0.3, end: 0.7 }, taper };
        let v = c.value(&d, t, &BoundaryParam::Face { face: Face::Bottom, s: s.clamp(0.0, 1.0) });
        prop_assert!((0.0..=1.0).contains(&v));
        if t >= ramp && (0.3..=0.7).contains(&s) {
            prop_assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn affine_integrands_are_integrated_exactly(a in -3.0f64..3.0, b in -3.0f64..3.0, anchor in -1.0f64..1.0, k in 1usize..8, max in 0.1f64..4.0) {
        let l = symmetric_lambda_grid(max, k);
        let du: Vec<_> = l.iter().map(|x| Some(a + b * x)).collect();
        let f = assemble_f(&l, &du, anchor).unwrap();
        for (x, v) in l.iter().zip(&f) {
            let exact = anchor + a * x + 0.5 * b * x * x;
            prop_assert!((v - exact).abs() <= 1e-12 * (1.0 + exact.abs()), "{v} vs {exact}");
        }
    }

    #[test]
    fn extrapolation_is_exact_on_the_model(re in -2.0f64..2.0, im in -2.0f64..2.0, c in -5.0f64..5.0, k in 0usize..251) {
        let sigma = 0.5 + 2.5 * k as f64 / 250.0;
        let limit = Complex64::new(re, im);
        let values: Vec<FilterValue> = [300.0, 400.0, 600.0, 900.0]
            .iter()
            .map(|&r: &f64| FilterValue { rho: r, value: limit + c * r.powf(-sigma) })
            .collect();
        let e = extrapolate(&values).unwrap();
        prop_assert!((e.limit - limit).norm() < 1e-8 * (1.0 + limit.norm()), "{e:?}");
    }

    #[test]
    fn matrices_round_trip_bit_exactly(values in proptest::collection::vec(-1e6f64..1e6, 1..64), complex in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let n = if complex { values.len() / 2 * 2 } else { values.len() };
        prop_assume!(n > 0);
        let cols = if complex { n / 2 } else { n };
        persist::write_matrix(&path, 1, cols, complex, &values[..n]).unwrap();
        let (rows, c, cx, back) = persist::read_matrix(&path).unwrap();
        prop_assert_eq!((rows, c, cx), (1, cols, complex));
        prop_assert!(back.iter().zip(&values[..n]).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn linear_nonlinearity_superposes(alpha in -2.0f64..2.0, beta in -2.0f64..2.0, m in 0.0f64..2.0) {
        let g = interval_grid(33, 1.0);
        let f = Nonlinearity::linear(Coefficient::product(vec![Coefficient::constant(m), Coefficient::time(TimeProfile::Sin { freq: 2.0, phase: 0.3 })]));
        let d1 = DataSpec::constant(0.4).sample(g.clone());
        let d2 = DataSpec { f: Coefficient::constant(0.0), u0: Coefficient::space(SpaceProfile::sin_x(2.0)), u1: Coefficient::space(SpaceProfile::sin_x(1.0)) }.sample(g.clone());
        let zero = DataSpec::zero().sample(g.clone());
        let mix = zero.axpy(alpha, &d1).unwrap().axpy(beta, &d2).unwrap();
        let opts = ForwardOptions::default();
        let (u1, u2, u) = (solve_semilinear(&f, &d1, &opts).unwrap(), solve_semilinear(&f, &d2, &opts).unwrap(), solve_semilinear(&f, &mix, &opts).unwrap());
        let err: Vec<f64> = u.re.iter().zip(&u1.re).zip(&u2.re).map(|((w, a), b)| w - alpha * a - beta * b).collect();
        prop_assert!(sup(&err) <= 1e-11 * (1.0 + sup(&u.re)));
    }

    #[test]
    fn boundary_operator_is_linear(a_re in -2.0f64..2.0, a_im in -2.0f64..2.0, b in -2.0f64..2.0, q0 in -1.0f64..1.0) {
        let g = interval_grid(33, 1.0);
        let q = Potential::analytic("q", move |t, p| q0 + 0.3 * t * p[0].cos());
        let d1 = LinearData::lateral_fn(g.clone(), |t, i, _| Complex64::new(if i == 0 { (t * t * t).min(1.0) } else { 0.0 }, 0.0));
        let d2 = LinearData::lateral_fn(g.clone(), |t, i, _| Complex64::new(0.0, if i == 1 { (t * t * t * t).sin() } else { 0.0 }));
        let a = Complex64::new(a_re, a_im);
        let mix = d1.scaled(a).add(&d2.scaled(Complex64::new(b, 0.0))).unwrap();
        let run = |d: &LinearData| dtn_apply(&q, d, &BoundaryPortion::Whole, DtnMode::LateralOnly).unwrap().trace;
        let (t1, t2, t) = (run(&d1), run(&d2), run(&mix));
        let worst = t.values.iter().zip(&t1.values).zip(&t2.values).map(|((w, x), y)| (w - a * x - b * y).norm()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-11 * (1.0 + t.sup()), "{worst}");
    }

    #[test]
    fn traces_respect_finite_speed(ts in 0.1f64..0.8) {
        let d = Domain::interval(1.0).unwrap();
        // at unit Courant number the discrete cone of the leapfrog stencil is the light cone
        let g = Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, 81).unwrap(), 2.0, 2.0, 1.0).unwrap());
        let data = LinearData::lateral_fn(g.clone(), move |t, i, _| Complex64::new(if i == 0 && t > ts { (3.0 * (t - ts)).min(PI / 2.0).sin().powi(2) } else { 0.0 }, 0.0));
        let tr = dtn_apply(&Potential::constant(0.7), &data, &BoundaryPortion::Whole, DtnMode::LateralOnly).unwrap().trace;
        let dx = 1.0 / 80.0;
        let right = tr.indices.iter().position(|&i| i == 1).unwrap();
        let scale = tr.sup();
        for n in 0..tr.levels() {
            if g.time(n) < ts + 1.0 - 2.0 * dx {
                prop_assert!(tr.at(n, right).norm() <= 1e-10 * scale, "t = {} value {:e} scale {scale:e}", g.time(n), tr.at(n, right).norm());
            }
        }
    }

    #[test]
    fn potential_commutes_with_restriction(levels in 9usize..40, c in -2.0f64..2.0) {
        let g = interval_grid(17, 1.0);
        let ns = g.ns();
        let vals: Vec<f64> = (0..(g.nt + 1) * ns).map(|k| (0.37 * k as f64).sin() * c).collect();
        let u = WaveField::real(g.clone(), vals.clone()).unwrap();
        let f = Nonlinearity::quadratic(Coefficient::space(SpaceProfile::sin_x(1.0)));
        let q = effective_potential(&f, &u).unwrap();
        let levels = levels.min(g.nt + 1);
        let short = Arc::new(SpaceTimeGrid::with_dt(g.space.clone(), g.dt, g.dt * (levels - 1) as f64, g.t_prime).unwrap());
        let us = WaveField::real(short.clone(), vals[..levels * ns].to_vec()).unwrap();
        let qs = effective_potential(&f, &us).unwrap();
        prop_assert_eq!(&q.values().unwrap()[..levels * ns], qs.values().unwrap());
    }

    #[test]
    fn growth_check_is_monotone_in_the_constant(c1 in 0.01f64..20.0, extra in 0.0f64..20.0, a in 0.1f64..3.0) {
        let d = Domain::rectangle(1.0, 1.0).unwrap();
        let base = Nonlinearity::quadratic(Coefficient::constant(a));
        let small = Nonlinearity::new(base.kind.clone(), base.growth_b, c1, base.class_tag);
        let large = Nonlinearity::new(base.kind.clone(), base.growth_b, c1 + extra, base.class_tag);
        let rs = validate_class(&small, &d, 1.0, (-2.0, 2.0), 200).unwrap();
        let rl = validate_class(&large, &d, 1.0, (-2.0, 2.0), 200).unwrap();
        prop_assert!(!rs.growth_ok || rl.growth_ok);
    }

    #[test]
    fn constant_data_are_compatible_for_class_a(lambda in -2.0f64..2.0) {
        let g = interval_grid(33, 1.0);
        let report = validate_data(&DataSpec::constant(lambda).sample(g)).unwrap();
        prop_assert!(report.comp1_ok.iter().all(|ok| *ok), "{report:?}");
    }

    #[test]
    fn filter_is_linear_in_the_trace_difference(c in -3.0f64..3.0, q in 0.1f64..1.0) {
        let d = Domain::interval(PI).unwrap();
        let spec = ProbeSpec {
            t0: 0.5,
            x0: BoundaryParam::End { end: Endpoint::Left },
            delta: 0.025,
            rho: 480.0,
            horizon: 1.2,
            gamma: BoundaryPortion::Endpoints { left: true, right: false },
            options: ProbeOptions::default(),
        };
        let s = ProbeSetup::for_traces(&d, &spec).unwrap();
        let t1 = s.chart_trace(&Potential::constant(q)).unwrap();
        let t0 = s.chart_trace(&Potential::zero()).unwrap();
        let mut scaled = t1.clone();
        for (v, z) in scaled.values.iter_mut().zip(&t0.values) {
            *v = z + c * (*v - z);
        }
        let m1 = matched_filter(&t1, &t0, TraceFrame::Chart(&s)).unwrap().value;
        let mc = matched_filter(&scaled, &t0, TraceFrame::Chart(&s)).unwrap().value;
        prop_assert!((mc - c * m1).norm() <= 1e-10 * (1.0 + m1.norm()));
    }
}
