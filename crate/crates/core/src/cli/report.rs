//! Run reports: `report.json` plus per-series CSV tables and SVG charts, all
//! rendered from the same [`Report`] value.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::SCHEMA_VERSION;
use super::svg;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Produced by this run.
    Computed,
    /// Copied from the experiment config.
    Config,
    /// Evaluated from a catalog nonlinearity or an analytic potential.
    Catalog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tagged {
    pub value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub x_label: String,
    pub y_label: String,
    pub provenance: Provenance,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Log-log axes with the fitted slope of each series in the legend.
    Slope,
    /// Linear axes, several series on top of each other.
    Overlay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plot {
    pub name: String,
    pub kind: PlotKind,
    pub title: String,
    pub series: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub pipeline: String,
    pub config_hash: String,
    /// True when the nonlinearity came from a hidden file; no truth values are reported.
    pub blind: bool,
    pub values: BTreeMap<String, Tagged>,
    pub flags: BTreeMap<String, bool>,
    pub series: BTreeMap<String, Series>,
    pub plots: Vec<Plot>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(pipeline: &str, config_hash: &str, blind: bool) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            pipeline: pipeline.into(),
            config_hash: config_hash.into(),
            blind,
            values: BTreeMap::new(),
            flags: BTreeMap::new(),
            series: BTreeMap::new(),
            plots: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Records a number; non-finite values become a warning since JSON has no encoding for them.
    pub fn value(&mut self, name: &str, value: f64, provenance: Provenance) {
        if value.is_finite() {
            self.values.insert(name.into(), Tagged { value, provenance });
        } else {
            self.warnings.push(format!("{name} is not finite ({value})"));
        }
    }

    pub fn computed(&mut self, name: &str, value: f64) {
        self.value(name, value, Provenance::Computed);
    }

    pub fn flag(&mut self, name: &str, value: bool) {
        self.flags.insert(name.into(), value);
    }

    pub fn series(&mut self, name: &str, labels: (&str, &str), provenance: Provenance, x: Vec<f64>, y: Vec<f64>) {
        let (x, y): (Vec<f64>, Vec<f64>) = x.into_iter().zip(y).filter(|(a, b)| a.is_finite() && b.is_finite()).unzip();
        self.series.insert(name.into(), Series { x_label: labels.0.into(), y_label: labels.1.into(), provenance, x, y });
    }

    pub fn plot(&mut self, name: &str, kind: PlotKind, title: &str, series: &[&str]) {
        self.plots.push(Plot { name: name.into(), kind, title: title.into(), series: series.iter().map(|s| s.to_string()).collect() });
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let r: Report = serde_json::from_str(&text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("report schema_version {} is not supported", r.schema_version)));
        }
        Ok(r)
    }

    /// Writes `report.json`, `<series>.csv` and `<plot>.svg` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        self.emit_tables(dir)
    }

    /// CSV and SVG outputs only.
    pub fn emit_tables(&self, dir: &Path) -> Result<()> {
        for (name, s) in &self.series {
            write_series_csv(&dir.join(format!("{name}.csv")), s)?;
        }
        for p in &self.plots {
            let series: Vec<(&str, &Series)> = p
                .series
                .iter()
                .map(|n| self.series.get(n).map(|s| (n.as_str(), s)).ok_or_else(|| Error::Config(format!("plot {} references unknown series {n}", p.name))))
                .collect::<Result<_>>()?;
            fs::write(dir.join(format!("{}.svg", p.name)), svg::render(p, &series))?;
        }
        Ok(())
    }
}

/// Floats are written in the shortest form that parses back to the same bits.
pub fn write_series_csv(path: &Path, s: &Series) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record([s.x_label.as_str(), s.y_label.as_str()]).map_err(csv_err)?;
    for (x, y) in s.x.iter().zip(&s.y) {
        w.write_record([x.to_string(), y.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Reads a two-column table written by [`write_series_csv`].
pub fn read_series_csv(path: &Path, provenance: Provenance) -> Result<Series> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let head = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if head.len() != 2 {
        return Err(Error::Csv(format!("{}: expected two columns, found {}", path.display(), head.len())));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let parse = |i: usize| rec[i].parse::<f64>().map_err(|e| Error::Csv(format!("{}: '{}': {e}", path.display(), &rec[i])));
        x.push(parse(0)?);
        y.push(parse(1)?);
    }
    Ok(Series { x_label: head[0].into(), y_label: head[1].into(), provenance, x, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_values_become_warnings() {
        let mut r = Report::new("forward", "h", false);
        r.computed("a", f64::NAN);
        r.computed("b", 1.0);
        assert_eq!(r.values.len(), 1);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn json_round_trip() {
        let mut r = Report::new("forward", "h", false);
        r.computed("a", 0.1 + 0.2);
        r.series("s", ("x", "y"), Provenance::Catalog, vec![1.0, 2.0], vec![1e-300, -3.5]);
        r.plot("p", PlotKind::Overlay, "t", &["s"]);
        let back: Report = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
