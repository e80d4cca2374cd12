//! Minimal SVG line charts. Every plotted point carries its exact data values
//! in `data-x`/`data-y` attributes.

use std::fmt::Write;

use super::report::{Plot, PlotKind, Series};
use crate::linearization::log_log_slope;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
            (lo, hi) = (lo - pad, hi + pad);
        }
        Axis { lo, hi, log }
    }

    fn unit(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    /// Tick positions in data units.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.floor() as i32, self.hi.ceil() as i32);
            let step = ((b - a) / 6).max(1);
            (a..=b).step_by(step as usize).map(|e| 10f64.powi(e)).filter(|t| (self.lo..=self.hi).contains(&t.log10())).collect()
        } else {
            let raw = (self.hi - self.lo) / 5.0;
            let mag = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
            let first = (self.lo / step).ceil() as i64;
            let last = (self.hi / step).floor() as i64;
            (first..=last).map(|k| k as f64 * step).collect()
        }
    }
}

fn label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        format!("{}", (v * 1e4).round() / 1e4)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders one chart. Points with non-positive coordinates are dropped from log axes.
pub fn render(plot: &Plot, series: &[(&str, &Series)]) -> String {
    let log = plot.kind == PlotKind::Slope;
    let keep = |x: f64, y: f64| !log || (x > 0.0 && y > 0.0);
    let points: Vec<Vec<(f64, f64)>> = series.iter().map(|(_, s)| s.x.iter().zip(&s.y).map(|(a, b)| (*a, *b)).filter(|(a, b)| keep(*a, *b)).collect()).collect();
    let xa = Axis::fit(points.iter().flatten().map(|p| p.0), log);
    let ya = Axis::fit(points.iter().flatten().map(|p| p.1), log);
    let (l, r, t, b) = MARGIN;
    let (pw, ph) = (WIDTH - l - r, HEIGHT - t - b);
    let px = |x: f64| l + pw * xa.unit(x);
    let py = |y: f64| t + ph * (1.0 - ya.unit(y));

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(&plot.title));
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, t - 15.0, escape(&plot.title));
    for tick in xa.ticks() {
        let x = px(tick);
        let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, t + ph, t + ph + 4.0);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, t + ph + 16.0, label(tick));
    }
    for tick in ya.ticks() {
        let y = py(tick);
        let _ = writeln!(out, r#"<line x1="{}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, y + 4.0, label(tick));
    }
    if let Some((_, s)) = series.first() {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, l + pw / 2.0, HEIGHT - 10.0, escape(&s.x_label));
        let _ = writeln!(out, r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#, t + ph / 2.0, t + ph / 2.0, escape(&s.y_label));
    }
    for (k, ((name, _), pts)) in series.iter().zip(&points).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(out, r#"<g class="series" data-name="{}">"#, escape(name));
        if pts.len() > 1 {
            let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        for (x, y) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-x="{x}" data-y="{y}"/>"#, px(*x), py(*y));
        }
        let _ = writeln!(out, "</g>");
        let legend = if log && pts.len() > 1 {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
            format!("{name} (slope {:.3})", log_log_slope(&xs, &ys))
        } else {
            name.to_string()
        };
        let ly = t + 16.0 + 16.0 * k as f64;
        let _ = writeln!(out, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, l + 10.0, l + 30.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, l + 36.0, ly + 4.0, escape(&legend));
    }
    out.push_str("</svg>\n");
    out
}

/// `(data-x, data-y)` pairs of every plotted point, per series, in document order.
pub fn plotted_points(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let attr = |line: &str, key: &str| -> Option<String> {
        let start = line.find(&format!(r#"{key}=""#))? + key.len() + 2;
        let len = line[start..].find('"')?;
        Some(line[start..start + len].to_string())
    };
    for line in svg.lines() {
        if line.starts_with(r#"<g class="series""#) {
            out.push((attr(line, "data-name").unwrap_or_default(), Vec::new()));
        } else if line.starts_with("<circle") {
            if let (Some(x), Some(y), Some(last)) = (attr(line, "data-x"), attr(line, "data-y"), out.last_mut()) {
                if let (Ok(x), Ok(y)) = (x.parse(), y.parse()) {
                    last.1.push((x, y));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::report::Provenance;

    fn series(x: Vec<f64>, y: Vec<f64>) -> Series {
        Series { x_label: "rho".into(), y_label: "norm".into(), provenance: Provenance::Computed, x, y }
    }

    #[test]
    fn points_are_embedded_exactly() {
        let s = series(vec![10.0, 20.0, 40.0], vec![0.1 + 0.2, 1.0 / 3.0, 7e-9]);
        let plot = Plot { name: "p".into(), kind: PlotKind::Slope, title: "a < b".into(), series: vec!["s".into()] };
        let svg = render(&plot, &[("s", &s)]);
        let pts = plotted_points(&svg);
        assert_eq!(pts.len(), 1);
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts[0].1.iter().copied().unzip();
        assert_eq!(xs, s.x);
        assert_eq!(ys, s.y);
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn empty_chart_is_well_formed() {
        let plot = Plot { name: "p".into(), kind: PlotKind::Overlay, title: "empty".into(), series: vec![] };
        let svg = render(&plot, &[]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(plotted_points(&svg).is_empty());
    }

    #[test]
    fn log_axes_drop_non_positive_points() {
        let s = series(vec![1.0, 2.0, 4.0], vec![0.0, 1.0, 0.5]);
        let plot = Plot { name: "p".into(), kind: PlotKind::Slope, title: "t".into(), series: vec!["s".into()] };
        assert_eq!(plotted_points(&render(&plot, &[("s", &s)]))[0].1.len(), 2);
    }
}
