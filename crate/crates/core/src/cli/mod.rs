//! Experiment runner behind the `semiwave` binary.

pub mod config;
pub mod report;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{discrete_energy, energy_norms, solve_semilinear, ForwardOptions};
use crate::linear::Potential;
use crate::linearization::{frechet_remainder_check, log_log_slope};
use crate::mollify::mollify_potential;
use crate::nonlinearity::{Coefficient, Nonlinearity};
use crate::persist;
use crate::probe::{ansatz_residual, build_probe, default_delta, first_amplitude_jump, solve_remainder, ProbeSpec};
use crate::recovery::{
    probe_ladder, recover_du_f_lateral, recover_f_initial_interior, recover_q_difference_point, simulate_measurements, symmetric_lambda_grid, Background, ExactOracle,
    InitialSource, LateralRecovery, PointEstimate, TraceFrame,
};
use crate::sobolev;

pub use config::{ExperimentConfig, Pipeline};
pub use report::{PlotKind, Provenance, Report};

use report::Provenance::{Catalog, Computed, Config};

/// Results keyed by a content hash, stored as JSON under `<out>/cache`.
pub struct Cache {
    dir: PathBuf,
}

impl Cache {
    pub fn new(dir: &Path) -> Self {
        Cache { dir: dir.to_path_buf() }
    }

    pub fn key(label: &str, parts: &[&dyn erased::Json]) -> Result<String> {
        let bytes = parts.iter().map(|p| p.bytes()).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[u8]> = bytes.iter().map(|b| b.as_slice()).collect();
        Ok(format!("{label}-{}", &persist::hash_parts(&refs)[..16]))
    }

    pub fn get_or_compute<T: Serialize + DeserializeOwned>(&self, key: &str, compute: impl FnOnce() -> Result<T>) -> Result<T> {
        let path = self.dir.join(format!("{key}.json"));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(v) = serde_json::from_str(&text) {
                return Ok(v);
            }
        }
        let v = compute()?;
        fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(&v)?)?;
        fs::rename(&tmp, &path)?;
        Ok(v)
    }
}

mod erased {
    use serde::Serialize;

    /// Object-safe serialization for cache keys.
    pub trait Json {
        fn bytes(&self) -> crate::Result<Vec<u8>>;
    }

    impl<T: Serialize> Json for T {
        fn bytes(&self) -> crate::Result<Vec<u8>> {
            Ok(serde_json::to_vec(self)?)
        }
    }
}

/// Command-line overrides of the config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Validates, runs the pipeline and writes the report into the output directory.
pub fn run_experiment(pipeline: Pipeline, mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate(pipeline)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let ctx = Context::new(&cfg)?;
    let mut report = Report::new(pipeline.name(), &ctx.hash, ctx.blind);
    match pipeline {
        Pipeline::Forward => forward(&ctx, &mut report)?,
        Pipeline::FrechetCheck => frechet(&ctx, &mut report)?,
        Pipeline::ProbeCertify => certify(&ctx, &mut report)?,
        Pipeline::RecoverBoundary => boundary(&ctx, &mut report)?,
        Pipeline::RecoverNonlinearity => nonlinearity(&ctx, &mut report)?,
        Pipeline::RecoverInitial => initial(&ctx, &mut report)?,
    }
    report.warnings.sort();
    report.warnings.dedup();
    report.emit(&out)?;
    Ok(report)
}

/// Re-renders the CSV and SVG outputs of an existing `report.json`.
pub fn rerender(dir: &Path) -> Result<Report> {
    let r = Report::read(&dir.join("report.json"))?;
    r.emit_tables(dir)?;
    Ok(r)
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    domain: crate::geometry::Domain,
    grid: std::sync::Arc<crate::geometry::SpaceTimeGrid>,
    f: Nonlinearity,
    blind: bool,
    hash: String,
    cache: Cache,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let domain = cfg.domain.build()?;
        let grid = cfg.grid.build(&domain)?;
        let (f, blind) = cfg.nonlinearity()?;
        let hash = cfg.content_hash()?;
        Ok(Context { cfg, cache: Cache::new(&cfg.output_dir.join("cache")), domain, grid, f, blind, hash })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn grid_values(&self, r: &mut Report) {
        r.value("grid.nodes", self.cfg.grid.nodes as f64, Config);
        r.value("grid.horizon", self.grid.t_final, Config);
        r.computed("grid.dt", self.grid.dt);
        r.computed("grid.max_spacing", self.grid.space.max_spacing());
        r.computed("grid.time_levels", (self.grid.nt + 1) as f64);
    }
}

fn constant_of(c: &Coefficient) -> Option<f64> {
    match c {
        Coefficient::Constant { value } => Some(*value),
        _ => None,
    }
}

fn forward(ctx: &Context, r: &mut Report) -> Result<()> {
    let spec = ctx.cfg.data.as_ref().expect("validated");
    ctx.grid_values(r);
    let data = spec.sample(ctx.grid.clone());
    let u = solve_semilinear(&ctx.f, &data, &ForwardOptions::default())?;
    r.computed("max_abs_u", u.sup_abs());
    let norms = energy_norms(&u, 2.0)?;
    r.computed("sup_h1", norms.c_h1);
    r.computed("l2_l4", norms.lp_l2p);
    r.computed("sup_dt_l2", norms.c1_l2);
    let energy = discrete_energy(&u);
    let e0 = energy.first().copied().unwrap_or(0.0);
    let drift = energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
    r.computed("energy_drift", drift);
    let times: Vec<f64> = (0..energy.len()).map(|n| ctx.grid.time(n)).collect();
    r.series("energy", ("t", "discrete energy"), Computed, times, energy);
    r.plot("energy", PlotKind::Overlay, "Discrete energy", &["energy"]);
    if let (Some(a), Some(b), Some(0.0)) = (constant_of(&spec.f), constant_of(&spec.u0), constant_of(&spec.u1)) {
        if a == b {
            r.value("lambda", a, Config);
            let dev = u.re.iter().map(|v| (v - a).abs()).fold(0.0, f64::max);
            r.computed("max_abs_u_minus_lambda", dev);
        }
    }
    if ctx.domain.dim() == 1 {
        let x: Vec<f64> = ctx.grid.space.coords().iter().map(|p| p[0]).collect();
        r.series("final_level", ("x", "u(T, x)"), Computed, x, u.level(ctx.grid.nt).to_vec());
        r.plot("final_level", PlotKind::Overlay, "Solution at the final time", &["final_level"]);
    }
    u.write_csv_level(&ctx.out("field_final.csv"), ctx.grid.nt)?;
    Ok(())
}

fn frechet(ctx: &Context, r: &mut Report) -> Result<()> {
    let s = ctx.cfg.frechet.as_ref().expect("validated");
    ctx.grid_values(r);
    let rep = frechet_remainder_check(&ctx.f, &s.base.sample(ctx.grid.clone()), &s.direction.sample(ctx.grid.clone()), &s.portion, &s.scales, &s.options)?;
    r.computed("fitted_order", rep.fitted_order);
    r.computed("identity_slope", rep.identity_slope);
    r.computed("derivative_norm", rep.derivative_norm);
    r.computed("ratio_min", rep.ratios.iter().copied().fold(f64::INFINITY, f64::min));
    r.computed("ratio_max", rep.ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    r.flag("degenerate", rep.degenerate);
    r.series("remainder", ("scale", "remainder"), Computed, rep.scales.clone(), rep.remainders.clone());
    r.series("identity_residual", ("scale", "identity residual"), Computed, rep.scales.clone(), rep.identity_residuals.clone());
    r.plot("frechet_slopes", PlotKind::Slope, "Linearization remainders", &["remainder", "identity_residual"]);
    rep.write_csv(&ctx.out("frechet.csv"))?;
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CertifyRow {
    vanishing: f64,
    residual_scaled: f64,
    a2_h2: f64,
    trace_scaled: f64,
    transport_a0: f64,
    transport_a1: f64,
    eikonal_defect: f64,
    jump: Complex64,
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn certify(ctx: &Context, r: &mut Report) -> Result<()> {
    let s = ctx.cfg.certify.as_ref().expect("validated");
    ctx.grid_values(r);
    let (q1, q2) = (s.q1.build(), s.q2.build());
    let horizon = ctx.grid.t_final;
    let delta = s.delta.unwrap_or_else(|| default_delta(&ctx.domain, s.t0, horizon));
    r.value("delta", delta, if s.delta.is_some() { Config } else { Computed });
    let rows = s
        .rhos
        .iter()
        .map(|&rho| {
            let spec = ProbeSpec { t0: s.t0, x0: s.x0, delta, rho, horizon, gamma: s.gamma.clone(), options: s.options };
            let key = Cache::key("certify", &[&ctx.cfg.domain, &ctx.cfg.grid, &s.q1, &s.q2, &spec])?;
            ctx.cache.get_or_compute(&key, || {
                let (p1, p2) = build_probe(&ctx.domain, (&q1, &q2), &spec, ctx.grid.clone())?;
                let res = ansatz_residual(&p1);
                Ok(CertifyRow {
                    vanishing: (p1.boundary_vanishing() / p1.scale()).max(p2.boundary_vanishing() / p2.scale()),
                    residual_scaled: res.scaled,
                    a2_h2: res.a2_h2,
                    trace_scaled: solve_remainder(&p1)?.scaled_trace,
                    transport_a0: res.transport_a0,
                    transport_a1: res.transport_a1,
                    eikonal_defect: res.eikonal_defect,
                    jump: first_amplitude_jump(&p1, &p2)?,
                })
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&CertifyRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (residual, trace, a2) = (col(|c| c.residual_scaled), col(|c| c.trace_scaled), col(|c| c.a2_h2));
    r.computed("boundary_vanishing_max", col(|c| c.vanishing).into_iter().fold(0.0, f64::max));
    r.computed("transport_a0_max", col(|c| c.transport_a0).into_iter().fold(0.0, f64::max));
    r.computed("transport_a1_max", col(|c| c.transport_a1).into_iter().fold(0.0, f64::max));
    r.computed("eikonal_defect_max", col(|c| c.eikonal_defect).into_iter().fold(0.0, f64::max));
    if s.rhos.len() > 1 {
        r.computed("a2_h2_slope", log_log_slope(&s.rhos, &a2));
    }
    r.flag("scaled_residual_decreasing", strictly_decreasing(&residual));
    r.flag("scaled_trace_decreasing", strictly_decreasing(&trace));
    r.series("scaled_residual", ("rho", "rho * residual"), Computed, s.rhos.clone(), residual);
    r.series("scaled_trace", ("rho", "rho * remainder trace"), Computed, s.rhos.clone(), trace);
    r.series("a2_h2", ("rho", "H2 norm of a2"), Computed, s.rhos.clone(), a2);
    r.plot("certify_slopes", PlotKind::Slope, "Probe residuals", &["scaled_residual", "scaled_trace", "a2_h2"]);

    // the first amplitudes differ by (i/2)(q1 - q2) at the probe point
    let recovered = col(|c| (c.jump / Complex64::new(0.0, 0.5)).re);
    r.series("jump_difference", ("rho", "recovered q1 - q2"), Computed, s.rhos.clone(), recovered.clone());
    if let Some(last) = recovered.last() {
        r.computed("jump_difference", *last);
        let x = ctx.domain.exp_boundary(&s.x0, 0.0)?;
        let truth = q1.eval(s.t0, x) - q2.eval(s.t0, x);
        r.value("true_difference", truth, Catalog);
        if truth != 0.0 {
            r.computed("jump_relative_error", (last - truth).abs() / truth.abs());
        }
    }

    let n = ctx.domain.dim();
    let sampled = Potential::from_fn(ctx.grid.clone(), |t, p| q1.eval(t, p))?;
    let norms = s
        .rhos
        .par_iter()
        .map(|&rho| {
            let m = mollify_potential(&sampled, ctx.grid.clone(), rho, n)?;
            let v = m.values().expect("sampled");
            Ok([3, 4].map(|l| sobolev::top_order_seminorm(v, &ctx.grid, l)))
        })
        .collect::<Result<Vec<_>>>()?;
    for (k, l) in [3, 4].iter().enumerate() {
        let name = format!("mollifier_h{l}");
        let y: Vec<f64> = norms.iter().map(|v| v[k]).collect();
        if s.rhos.len() > 1 {
            r.computed(&format!("{name}_slope"), log_log_slope(&s.rhos, &y));
        }
        r.series(&name, ("rho", &format!("top-order H{l} seminorm")), Computed, s.rhos.clone(), y);
    }
    r.plot("mollifier_norms", PlotKind::Slope, "Mollified potential seminorms", &["mollifier_h3", "mollifier_h4"]);
    Ok(())
}

fn estimate_values(r: &mut Report, prefix: &str, e: &PointEstimate) {
    r.computed(&format!("{prefix}.value"), e.value);
    r.computed(&format!("{prefix}.imag_residual"), e.imag_residual);
    r.computed(&format!("{prefix}.delta"), e.delta);
    r.computed(&format!("{prefix}.extrapolation_exponent"), e.extrapolation.exponent);
    r.flag(&format!("{prefix}.extrapolation_settled"), e.extrapolation.monotone);
    r.warnings.extend(e.warnings.iter().map(|w| format!("{prefix}: {w}")));
}

fn boundary(ctx: &Context, r: &mut Report) -> Result<()> {
    let s = ctx.cfg.boundary.as_ref().expect("validated");
    let (q1, q2) = (s.q1.build(), s.q2.build());
    let horizon = ctx.grid.t_final;
    r.value("horizon", horizon, Config);
    let estimates = s
        .points
        .iter()
        .map(|pt| {
            let key = Cache::key("boundary", &[&ctx.cfg.domain, &horizon, &s.q1, &s.q2, pt, &s.gamma, &s.rho_ladder, &s.options])?;
            ctx.cache.get_or_compute(&key, || {
                let ladder = probe_ladder(&ctx.domain, pt, horizon, &s.gamma, &s.rho_ladder, &s.options)?;
                let traces = ladder.par_iter().map(|p| Ok((p.chart_trace(&q1)?, p.chart_trace(&q2)?))).collect::<Result<Vec<_>>>()?;
                let pairs: Vec<_> = traces.iter().zip(&ladder).map(|((a, b), p)| (a, b, TraceFrame::Chart(p))).collect();
                recover_q_difference_point(&pairs)
            })
        })
        .collect::<Result<Vec<PointEstimate>>>()?;
    let t0: Vec<f64> = s.points.iter().map(|p| p.t0).collect();
    let mut truth = Vec::new();
    for (k, (e, pt)) in estimates.iter().zip(&s.points).enumerate() {
        let prefix = format!("point{k}");
        r.value(&format!("{prefix}.t0"), pt.t0, Config);
        estimate_values(r, &prefix, e);
        let x = ctx.domain.exp_boundary(&pt.x0, 0.0)?;
        let t = q1.eval(pt.t0, x) - q2.eval(pt.t0, x);
        r.value(&format!("{prefix}.truth"), t, Catalog);
        r.computed(&format!("{prefix}.abs_error"), (e.value - t).abs());
        truth.push(t);
    }
    let worst = estimates.iter().zip(&truth).map(|(e, t)| (e.value - t).abs()).fold(0.0, f64::max);
    let scale = truth.iter().map(|t| t.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        r.computed("sup_relative_error", worst / scale);
    }
    r.series("recovered", ("t0", "q1 - q2 at the boundary"), Computed, t0.clone(), estimates.iter().map(|e| e.value).collect());
    r.series("truth", ("t0", "q1 - q2 at the boundary"), Catalog, t0, truth);
    r.plot("boundary_overlay", PlotKind::Overlay, "Recovered boundary values", &["recovered", "truth"]);
    Ok(())
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn nonlinearity(ctx: &Context, r: &mut Report) -> Result<()> {
    let rc = ctx.cfg.recovery.as_ref().expect("validated");
    ctx.grid_values(r);
    r.value("noise", ctx.cfg.noise, Config);
    r.value("seed", ctx.cfg.seed as f64, Config);
    r.value("anchor", ctx.cfg.anchor, Config);
    let key = Cache::key("lateral", &[&ctx.hash])?;
    let rec: LateralRecovery = ctx.cache.get_or_compute(&key, || {
        let mut src = simulate_measurements(ctx.f.clone(), Background::Lateral { chi: rc.chi_boundary.clone() }, ctx.grid.clone()).with_noise(ctx.cfg.noise, ctx.cfg.seed);
        if let Some(faces) = rc.faces {
            src = src.with_faces(faces);
        }
        recover_du_f_lateral(&src, rc, &ctx.domain)
    })?;
    rec.write_csv(&ctx.out("recovery.csv"))?;
    let lambdas = rec.lambdas.clone();
    let (mut num, mut den, mut slope_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (k, pt) in rc.probe_points.iter().enumerate() {
        let prefix = format!("point{k}");
        r.value(&format!("{prefix}.t0"), pt.t0, Config);
        for (j, e) in rec.estimates[k].iter().enumerate() {
            estimate_values(r, &format!("{prefix}.lambda{j}"), e);
        }
        let du: Vec<f64> = rec.estimates[k].iter().map(|e| e.value).collect();
        let f = rec.assemble(k, ctx.cfg.anchor)?;
        let slope = rec.slope(k);
        r.computed(&format!("{prefix}.du_slope"), slope);
        r.series(&format!("du_recovered_p{k}"), ("lambda", "d_u F"), Computed, lambdas.clone(), du);
        r.series(&format!("f_recovered_p{k}"), ("lambda", "F"), Computed, lambdas.clone(), f.clone());
        if ctx.blind {
            r.plot(&format!("f_p{k}"), PlotKind::Overlay, &format!("Recovered F at t0 = {}", pt.t0), &[&format!("f_recovered_p{k}")]);
            continue;
        }
        let x = ctx.domain.exp_boundary(&pt.x0, 0.0)?;
        let du_true: Vec<f64> = lambdas.iter().map(|l| ctx.f.du(pt.t0, x, *l)).collect();
        let f_true: Vec<f64> = lambdas.iter().map(|l| ctx.f.eval(pt.t0, x, *l)).collect();
        for (a, b) in f.iter().zip(&f_true) {
            num = num.max((a - b).abs());
            den = den.max(b.abs());
        }
        let true_slope = least_squares_slope(&lambdas, &du_true);
        r.value(&format!("{prefix}.du_slope_true"), true_slope, Catalog);
        if true_slope != 0.0 {
            slope_err = slope_err.max((slope - true_slope).abs() / true_slope.abs());
        }
        let (rn, tn) = (format!("f_recovered_p{k}"), format!("f_true_p{k}"));
        r.series(&format!("du_true_p{k}"), ("lambda", "d_u F"), Catalog, lambdas.clone(), du_true);
        r.series(&tn, ("lambda", "F"), Catalog, lambdas.clone(), f_true);
        r.plot(&format!("f_p{k}"), PlotKind::Overlay, &format!("Recovered and true F at t0 = {}", pt.t0), &[&rn, &tn]);
        r.plot(&format!("du_p{k}"), PlotKind::Overlay, &format!("Recovered and true d_u F at t0 = {}", pt.t0), &[&format!("du_recovered_p{k}"), &format!("du_true_p{k}")]);
    }
    if !ctx.blind && den > 0.0 {
        r.computed("sup_relative_error", num / den);
        r.computed("slope_relative_error", slope_err);
    }
    Ok(())
}

fn initial(ctx: &Context, r: &mut Report) -> Result<()> {
    let s = ctx.cfg.initial.as_ref().expect("validated");
    ctx.grid_values(r);
    let lambdas = symmetric_lambda_grid(s.lambda_max, s.per_side);
    let anchor = vec![ctx.cfg.anchor; ctx.grid.ns()];
    let oracle;
    let source = if s.oracle {
        oracle = ExactOracle::new(ctx.f.clone(), ctx.grid.clone());
        InitialSource::Oracle(&oracle)
    } else {
        InitialSource::Direct(&ctx.f)
    };
    let rec = recover_f_initial_interior(source, &lambdas, ctx.grid.clone(), &anchor, s.radius)?;
    rec.write_csv(&ctx.out("initial.csv"), &ctx.grid)?;
    r.flag("oracle", s.oracle);
    let coords = ctx.grid.space.coords();
    let mid = coords.len() / 2;
    r.series("f_recovered_mid", ("lambda", "F(0, x, lambda)"), Computed, lambdas.clone(), rec.f.iter().map(|row| row[mid]).collect());
    if ctx.blind {
        r.plot("f_mid", PlotKind::Overlay, "Recovered F at the central node", &["f_recovered_mid"]);
        return Ok(());
    }
    let (mut du_err, mut f_err, mut f_scale): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (j, l) in lambdas.iter().enumerate() {
        for (k, p) in coords.iter().enumerate() {
            let want = ctx.f.du(0.0, *p, *l);
            let got = rec.du[j][k];
            du_err = du_err.max(if want != 0.0 { (got - want).abs() / want.abs() } else { got.abs() });
            let want = ctx.f.eval(0.0, *p, *l) - ctx.f.eval(0.0, *p, 0.0) + ctx.cfg.anchor;
            f_err = f_err.max((rec.f[j][k] - want).abs());
            f_scale = f_scale.max(want.abs());
        }
    }
    r.computed("du_relative_error", du_err);
    r.computed("f_sup_error", f_err);
    if f_scale > 0.0 {
        r.computed("f_sup_relative_error", f_err / f_scale);
    }
    let p = coords[mid];
    let truth = lambdas.iter().map(|l| ctx.f.eval(0.0, p, *l) - ctx.f.eval(0.0, p, 0.0) + ctx.cfg.anchor).collect();
    r.series("f_true_mid", ("lambda", "F(0, x, lambda)"), Catalog, lambdas, truth);
    r.plot("f_mid", PlotKind::Overlay, "Recovered and true F at the central node", &["f_recovered_mid", "f_true_mid"]);
    Ok(())
}

/// Machine-readable description of a failure.
pub fn error_json(e: &Error) -> String {
    let v = serde_json::json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
            "exit_code": e.exit_code(),
        }
    });
    format!("{}\n", serde_json::to_string_pretty(&v).expect("plain json"))
}
