//! Space-time fields and their on-disk formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::SpaceTimeGrid;

const MAGIC: &[u8; 8] = b"SWFIELD1";

/// Samples on `(nt + 1) x ns` nodes, optionally complex.
#[derive(Debug, Clone)]
pub struct WaveField {
    pub grid: Arc<SpaceTimeGrid>,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
}

/// Header of the flat binary layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldHeader {
    pub complex: bool,
    pub levels: usize,
    pub dims: (usize, usize),
    pub spacing: (f64, f64),
    pub dt: f64,
}

impl WaveField {
    pub fn real(grid: Arc<SpaceTimeGrid>, re: Vec<f64>) -> Result<Self> {
        let f = WaveField { grid, re, im: None };
        f.check()?;
        Ok(f)
    }

    pub fn complex(grid: Arc<SpaceTimeGrid>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let f = WaveField { grid, re, im: Some(im) };
        f.check()?;
        Ok(f)
    }

    pub fn zeros(grid: Arc<SpaceTimeGrid>) -> Self {
        let n = (grid.nt + 1) * grid.ns();
        WaveField { grid, re: vec![0.0; n], im: None }
    }

    fn check(&self) -> Result<()> {
        let n = (self.grid.nt + 1) * self.grid.ns();
        if self.re.len() != n || self.im.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::Shape(format!("field payload does not match {} samples", n)));
        }
        if self.re.iter().chain(self.im.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("field contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.grid.nt + 1
    }

    pub fn ns(&self) -> usize {
        self.grid.ns()
    }

    pub fn is_real(&self) -> bool {
        self.im.is_none()
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let ns = self.ns();
        &self.re[n * ns..(n + 1) * ns]
    }

    pub fn level_im(&self, n: usize) -> Option<&[f64]> {
        let ns = self.ns();
        self.im.as_ref().map(|v| &v[n * ns..(n + 1) * ns])
    }

    pub fn sup_abs(&self) -> f64 {
        match &self.im {
            None => self.re.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            Some(im) => self.re.iter().zip(im).fold(0.0f64, |m, (a, b)| m.max(a.hypot(*b))),
        }
    }

    /// Largest pointwise modulus of `self - other`.
    pub fn sup_diff(&self, other: &WaveField) -> Result<f64> {
        if self.re.len() != other.re.len() {
            return Err(Error::Shape("fields have different sizes".into()));
        }
        let zero = vec![0.0; self.re.len()];
        let ai = self.im.as_deref().unwrap_or(&zero);
        let bi = other.im.as_deref().unwrap_or(&zero);
        Ok((0..self.re.len()).fold(0.0f64, |m, k| m.max((self.re[k] - other.re[k]).hypot(ai[k] - bi[k]))))
    }

    pub fn header(&self) -> FieldHeader {
        FieldHeader {
            complex: self.im.is_some(),
            levels: self.levels(),
            dims: self.grid.space.shape_dims(),
            spacing: self.grid.space.spacings(),
            dt: self.grid.dt,
        }
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let h = self.header();
        w.write_all(MAGIC)?;
        w.write_all(&[h.complex as u8, 0, 0, 0, 0, 0, 0, 0])?;
        for v in [h.levels, h.dims.0, h.dims.1] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in [h.spacing.0, h.spacing.1, h.dt] {
            w.write_all(&v.to_le_bytes())?;
        }
        match &self.im {
            None => {
                for v in &self.re {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Some(im) => {
                for (a, b) in self.re.iter().zip(im) {
                    w.write_all(&a.to_le_bytes())?;
                    w.write_all(&b.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a field written by [`WaveField::write_binary`] onto a matching grid.
    pub fn read_binary(path: &Path, grid: Arc<SpaceTimeGrid>) -> Result<Self> {
        let (h, payload) = read_raw(path)?;
        if h.levels != grid.nt + 1 || h.dims != grid.space.shape_dims() {
            return Err(Error::Shape(format!(
                "file has {} levels on {:?}, grid has {} on {:?}",
                h.levels,
                h.dims,
                grid.nt + 1,
                grid.space.shape_dims()
            )));
        }
        if h.complex {
            let re = payload.iter().step_by(2).copied().collect();
            let im = payload.iter().skip(1).step_by(2).copied().collect();
            WaveField::complex(grid, re, im)
        } else {
            WaveField::real(grid, payload)
        }
    }

    /// CSV of one time level: `x,y,re,im`.
    pub fn write_csv_level(&self, path: &Path, level: usize) -> Result<()> {
        if level >= self.levels() {
            return Err(Error::Range(format!("level {level} beyond {}", self.levels() - 1)));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "re", "im"])?;
        let im = self.level_im(level);
        for (k, p) in self.grid.space.coords().iter().enumerate() {
            let iv = im.map_or(0.0, |v| v[k]);
            w.write_record([p[0], p[1], self.level(level)[k], iv].iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV of the history at one node: `t,re,im`.
    pub fn write_csv_history(&self, path: &Path, node: usize) -> Result<()> {
        if node >= self.ns() {
            return Err(Error::Range(format!("node {node} beyond {}", self.ns() - 1)));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "re", "im"])?;
        let ns = self.ns();
        for n in 0..self.levels() {
            let iv = self.im.as_ref().map_or(0.0, |v| v[n * ns + node]);
            w.write_record([self.grid.time(n), self.re[n * ns + node], iv].iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Header and payload of a binary field file without grid validation.
pub fn read_raw(path: &Path) -> Result<(FieldHeader, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Shape("not a field file".into()));
    }
    let mut flags = [0u8; 8];
    r.read_exact(&mut flags)?;
    let mut u = [0u8; 8];
    let mut ints = [0usize; 3];
    for v in ints.iter_mut() {
        r.read_exact(&mut u)?;
        *v = u64::from_le_bytes(u) as usize;
    }
    let mut reals = [0f64; 3];
    for v in reals.iter_mut() {
        r.read_exact(&mut u)?;
        *v = f64::from_le_bytes(u);
    }
    let h = FieldHeader {
        complex: flags[0] != 0,
        levels: ints[0],
        dims: (ints[1], ints[2]),
        spacing: (reals[0], reals[1]),
        dt: reals[2],
    };
    let count = h.levels * h.dims.0 * h.dims.1 * if h.complex { 2 } else { 1 };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Shape(format!("payload has {} bytes, header implies {}", bytes.len(), count * 8)));
    }
    let payload = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((h, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domain, SpatialGrid};

    fn grid() -> Arc<SpaceTimeGrid> {
        let d = Domain::rectangle(1.0, 0.5).unwrap();
        Arc::new(SpaceTimeGrid::with_cfl(SpatialGrid::new(&d, 9).unwrap(), 0.5, 0.5, 0.5).unwrap())
    }

    #[test]
    fn binary_round_trip_complex() {
        let g = grid();
        let n = (g.nt + 1) * g.ns();
        let re: Vec<f64> = (0..n).map(|k| (k as f64).sin()).collect();
        let im: Vec<f64> = (0..n).map(|k| (k as f64 * 0.3).cos()).collect();
        let f = WaveField::complex(g.clone(), re, im).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        f.write_binary(&p).unwrap();
        let back = WaveField::read_binary(&p, g).unwrap();
        assert_eq!(back.re, f.re);
        assert_eq!(back.im, f.im);
        assert_eq!(read_raw(&p).unwrap().0.dims, (17, 9));
    }

    #[test]
    fn rejects_wrong_payload() {
        let g = grid();
        assert!(WaveField::real(g.clone(), vec![0.0; 3]).is_err());
        let n = (g.nt + 1) * g.ns();
        let mut v = vec![0.0; n];
        v[4] = f64::NAN;
        assert!(WaveField::real(g, v).is_err());
    }

    #[test]
    fn csv_slices() {
        let g = grid();
        let f = WaveField::zeros(g.clone());
        let dir = tempfile::tempdir().unwrap();
        f.write_csv_level(&dir.path().join("a.csv"), 1).unwrap();
        f.write_csv_history(&dir.path().join("b.csv"), 3).unwrap();
        let text = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
        assert_eq!(text.lines().count(), g.nt + 2);
        assert!(f.write_csv_level(&dir.path().join("c.csv"), g.nt + 1).is_err());
    }
}
