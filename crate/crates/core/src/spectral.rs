//! Circle-fibre eigenbasis, wavefield containers and mode projection.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RadiusProfile, TubeGeometry};

pub const DEFAULT_K_MAX: i64 = 8;
pub const DEFAULT_N_PHI: usize = 64;

/// Eigenfunctions `e^{ik phi}/sqrt(2 pi)` of the circle Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeBasis {
    pub phi_period: f64,
    pub hbar: f64,
    pub mass: f64,
    pub k_max: i64,
}

impl ModeBasis {
    pub fn new(hbar: f64, mass: f64, k_max: i64) -> Result<Self> {
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::param("hbar", "must be positive"));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::param("mass", "must be positive"));
        }
        if k_max < 0 {
            return Err(Error::param("k_max", "must be non-negative"));
        }
        Ok(ModeBasis { phi_period: 2.0 * PI, hbar, mass, k_max })
    }

    fn check(&self, k: i64) -> Result<()> {
        if k.abs() > self.k_max {
            Err(Error::ModeCutoff { k, k_max: self.k_max })
        } else {
            Ok(())
        }
    }

    /// `E_k = hbar^2 k^2 / 2m`
    pub fn eigenvalue(&self, k: i64) -> Result<f64> {
        self.check(k)?;
        Ok(mode_energy(self.hbar, self.mass, k))
    }

    pub fn mode(&self, k: i64, phi: f64) -> Result<Complex64> {
        self.check(k)?;
        Ok(mode_function(k, phi))
    }

    pub fn modes(&self) -> impl Iterator<Item = i64> {
        -self.k_max..=self.k_max
    }
}

pub fn mode_energy(hbar: f64, mass: f64, k: i64) -> f64 {
    let hk = hbar * k as f64;
    hk * hk / (2.0 * mass)
}

/// `Phi_k(phi) = e^{ik phi} / sqrt(2 pi)`
pub fn mode_function(k: i64, phi: f64) -> Complex64 {
    Complex64::from_polar(1.0 / (2.0 * PI).sqrt(), k as f64 * phi)
}

/// Uniform grid `x_i = x_min + i dx`, `i = 0..n`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XGrid {
    pub x_min: f64,
    pub dx: f64,
    pub n: usize,
}

impl XGrid {
    pub fn new(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if n < 2 || !(x_max > x_min) {
            return Err(Error::param("x_grid", format!("need n >= 2 and x_max > x_min (n={n})")));
        }
        Ok(XGrid { x_min, dx: (x_max - x_min) / (n - 1) as f64, n })
    }

    /// `n` points spaced `dx` apart and centred on `center`.
    pub fn centered(center: f64, dx: f64, n: usize) -> Result<Self> {
        if n < 1 || !(dx > 0.0) {
            return Err(Error::param("x_grid", "need n >= 1 and dx > 0"));
        }
        Ok(XGrid { x_min: center - 0.5 * (n - 1) as f64 * dx, dx, n })
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.n - 1)
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    fn same(&self, o: &XGrid) -> bool {
        self.n == o.n
            && (self.x_min - o.x_min).abs() <= 1e-12 * (1.0 + self.x_min.abs())
            && (self.dx - o.dx).abs() <= 1e-12 * self.dx
    }
}

/// Periodic grid `phi_j = j 2 pi / n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiGrid {
    pub n: usize,
}

impl PhiGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::param("n_phi", "must be positive"));
        }
        Ok(PhiGrid { n })
    }

    pub fn dphi(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    pub fn phi(&self, j: usize) -> f64 {
        j as f64 * self.dphi()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormConvention {
    /// `sum |Psi|^2 b dx dphi`
    Covariant,
    /// `sum |psi|^2 dx`
    Reduced,
}

/// Complex samples on a 1D x-grid or a 2D (x, phi) grid, stored x-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveField {
    pub x_grid: XGrid,
    pub phi_grid: Option<PhiGrid>,
    pub values: Vec<Complex64>,
    pub norm_convention: NormConvention,
}

impl WaveField {
    pub fn zeros_1d(x_grid: XGrid) -> Self {
        WaveField {
            x_grid,
            phi_grid: None,
            values: vec![Complex64::new(0.0, 0.0); x_grid.n],
            norm_convention: NormConvention::Reduced,
        }
    }

    pub fn zeros_2d(x_grid: XGrid, phi_grid: PhiGrid) -> Self {
        WaveField {
            x_grid,
            phi_grid: Some(phi_grid),
            values: vec![Complex64::new(0.0, 0.0); x_grid.n * phi_grid.n],
            norm_convention: NormConvention::Covariant,
        }
    }

    pub fn from_fn_1d(x_grid: XGrid, f: impl Fn(f64) -> Complex64) -> Self {
        WaveField {
            x_grid,
            phi_grid: None,
            values: (0..x_grid.n).map(|i| f(x_grid.x(i))).collect(),
            norm_convention: NormConvention::Reduced,
        }
    }

    pub fn from_fn_2d(x_grid: XGrid, phi_grid: PhiGrid, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let mut values = Vec::with_capacity(x_grid.n * phi_grid.n);
        for i in 0..x_grid.n {
            for j in 0..phi_grid.n {
                values.push(f(x_grid.x(i), phi_grid.phi(j)));
            }
        }
        WaveField { x_grid, phi_grid: Some(phi_grid), values, norm_convention: NormConvention::Covariant }
    }

    pub fn dims(&self) -> usize {
        if self.phi_grid.is_some() {
            2
        } else {
            1
        }
    }

    pub fn n_phi(&self) -> usize {
        self.phi_grid.map_or(1, |g| g.n)
    }

    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.values[i * self.n_phi() + j]
    }

    /// `sum |psi|^2 dx` for 1D fields.
    pub fn reduced_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.x_grid.dx
    }

    /// `sum |Psi|^2 b(x, eta) dx dphi` for 2D fields.
    pub fn covariant_norm(&self, profile: &RadiusProfile, eta: f64) -> f64 {
        let np = self.n_phi();
        let dphi = self.phi_grid.map_or(1.0, |g| g.dphi());
        let mut acc = 0.0;
        for i in 0..self.x_grid.n {
            let row: f64 = self.values[i * np..(i + 1) * np].iter().map(|v| v.norm_sqr()).sum();
            acc += row * profile.b_at(self.x_grid.x(i), eta);
        }
        acc * self.x_grid.dx * dphi
    }

    /// Norm under the field's own convention (static measure).
    pub fn norm(&self, profile: &RadiusProfile) -> f64 {
        match self.norm_convention {
            NormConvention::Reduced => self.reduced_norm(),
            NormConvention::Covariant => self.covariant_norm(profile, 0.0),
        }
    }

    pub fn check_same_grid(&self, o: &WaveField) -> Result<()> {
        if !self.x_grid.same(&o.x_grid) || self.phi_grid != o.phi_grid {
            return Err(Error::GridMismatch(format!(
                "x grids ({}, {}, {}) vs ({}, {}, {}), phi {:?} vs {:?}",
                self.x_grid.x_min, self.x_grid.dx, self.x_grid.n, o.x_grid.x_min, o.x_grid.dx, o.x_grid.n,
                self.phi_grid, o.phi_grid
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, s: Complex64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        match self.phi_grid {
            None => {
                writeln!(w, "x,re,im")?;
                for i in 0..self.x_grid.n {
                    let v = self.values[i];
                    writeln!(w, "{},{},{}", self.x_grid.x(i), v.re, v.im)?;
                }
            }
            Some(pg) => {
                writeln!(w, "x,phi,re,im")?;
                for i in 0..self.x_grid.n {
                    for j in 0..pg.n {
                        let v = self.at(i, j);
                        writeln!(w, "{},{},{},{}", self.x_grid.x(i), pg.phi(j), v.re, v.im)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`WaveField::write_csv`]; the grid is rebuilt from
    /// the first and last x values.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Io("empty CSV".into()))??;
        let two_d = match header.trim() {
            "x,re,im" => false,
            "x,phi,re,im" => true,
            h => return Err(Error::Io(format!("unrecognized CSV header `{h}`"))),
        };
        let mut xs = Vec::new();
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Io(format!("bad number `{c}`: {e}"))))
                .collect::<Result<_>>()?;
            let want = if two_d { 4 } else { 3 };
            if cols.len() != want {
                return Err(Error::Io(format!("expected {want} columns, got {}", cols.len())));
            }
            xs.push(cols[0]);
            values.push(Complex64::new(cols[want - 2], cols[want - 1]));
        }
        let n_phi = if two_d { count_run(&xs) } else { 1 };
        let n_x = values.len() / n_phi.max(1);
        if n_x < 2 || n_x * n_phi != values.len() {
            return Err(Error::Io("CSV does not describe a rectangular grid".into()));
        }
        let x_grid = XGrid::new(xs[0], xs[(n_x - 1) * n_phi], n_x)?;
        Ok(WaveField {
            x_grid,
            phi_grid: if two_d { Some(PhiGrid::new(n_phi)?) } else { None },
            values,
            norm_convention: if two_d { NormConvention::Covariant } else { NormConvention::Reduced },
        })
    }

    /// Binary layout (little endian): magic `WVF1`, u32 dims, u32 norm
    /// convention (0 covariant, 1 reduced), u64 n_x, f64 x_min, f64 dx,
    /// u64 n_phi (0 for 1D), then `re, im` f64 pairs in x-major order.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"WVF1")?;
        w.write_all(&(self.dims() as u32).to_le_bytes())?;
        let nc: u32 = match self.norm_convention {
            NormConvention::Covariant => 0,
            NormConvention::Reduced => 1,
        };
        w.write_all(&nc.to_le_bytes())?;
        w.write_all(&(self.x_grid.n as u64).to_le_bytes())?;
        w.write_all(&self.x_grid.x_min.to_le_bytes())?;
        w.write_all(&self.x_grid.dx.to_le_bytes())?;
        w.write_all(&(self.phi_grid.map_or(0, |g| g.n) as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"WVF1" {
            return Err(Error::Io("not a WVF1 file".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dims = u32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let norm_convention = match u32::from_le_bytes(b4) {
            0 => NormConvention::Covariant,
            1 => NormConvention::Reduced,
            c => return Err(Error::Io(format!("unknown norm convention {c}"))),
        };
        let mut rd_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n_x = rd_u64(&mut r)? as usize;
        let x_min = f64::from_bits(rd_u64(&mut r)?);
        let dx = f64::from_bits(rd_u64(&mut r)?);
        let n_phi = rd_u64(&mut r)? as usize;
        let phi_grid = match (dims, n_phi) {
            (1, 0) => None,
            (2, n) if n > 0 => Some(PhiGrid::new(n)?),
            _ => return Err(Error::Io(format!("inconsistent header: dims {dims}, n_phi {n_phi}"))),
        };
        let total = n_x * n_phi.max(1);
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            let re = f64::from_bits(rd_u64(&mut r)?);
            let im = f64::from_bits(rd_u64(&mut r)?);
            values.push(Complex64::new(re, im));
        }
        Ok(WaveField { x_grid: XGrid { x_min, dx, n: n_x }, phi_grid, values, norm_convention })
    }
}

fn count_run(xs: &[f64]) -> usize {
    xs.iter().take_while(|&&x| x == xs[0]).count()
}

fn check_2d(field: &WaveField) -> Result<PhiGrid> {
    field.phi_grid.ok_or_else(|| Error::GridMismatch("expected a 2D (x, phi) field".into()))
}

/// `psi_k(x) = b(x, eta)^{1/2} int dphi Phi_k^*(phi) Psi(x, phi)`, trapezoid on the periodic grid.
pub fn project_mode_at(field: &WaveField, profile: &RadiusProfile, k: i64, eta: f64) -> Result<WaveField> {
    let pg = check_2d(field)?;
    let np = pg.n;
    let dphi = pg.dphi();
    let weights: Vec<Complex64> = (0..np).map(|j| mode_function(k, pg.phi(j)).conj() * dphi).collect();
    let values = (0..field.x_grid.n)
        .map(|i| {
            let row = &field.values[i * np..(i + 1) * np];
            let s: Complex64 = row.iter().zip(&weights).map(|(v, w)| v * w).sum();
            s * profile.b_at(field.x_grid.x(i), eta).sqrt()
        })
        .collect();
    Ok(WaveField { x_grid: field.x_grid, phi_grid: None, values, norm_convention: NormConvention::Reduced })
}

pub fn project_mode(field: &WaveField, geom: &TubeGeometry, k: i64) -> Result<WaveField> {
    project_mode_at(field, &geom.profile, k, 0.0)
}

/// `Psi(x, phi) = sum_k Phi_k(phi) b(x, eta)^{-1/2} psi_k(x)`
pub fn assemble_from_modes_at(
    modes: &BTreeMap<i64, WaveField>,
    profile: &RadiusProfile,
    x_grid: XGrid,
    phi_grid: PhiGrid,
    eta: f64,
) -> Result<WaveField> {
    let mut out = WaveField::zeros_2d(x_grid, phi_grid);
    let np = phi_grid.n;
    for (&k, f) in modes {
        if f.phi_grid.is_some() || !f.x_grid.same(&x_grid) {
            return Err(Error::GridMismatch(format!("mode {k} is not a 1D field on the target x grid")));
        }
        let phases: Vec<Complex64> = (0..np).map(|j| mode_function(k, phi_grid.phi(j))).collect();
        for i in 0..x_grid.n {
            let amp = f.values[i] / profile.b_at(x_grid.x(i), eta).sqrt();
            for j in 0..np {
                out.values[i * np + j] += phases[j] * amp;
            }
        }
    }
    Ok(out)
}

pub fn assemble_from_modes(
    modes: &BTreeMap<i64, WaveField>,
    geom: &TubeGeometry,
    x_grid: XGrid,
    phi_grid: PhiGrid,
) -> Result<WaveField> {
    assemble_from_modes_at(modes, &geom.profile, x_grid, phi_grid, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (TubeGeometry, XGrid, PhiGrid) {
        let g = TubeGeometry::new(RadiusProfile::exp_tanh(0.3), -4.0, 4.0).unwrap();
        (g, XGrid::new(-4.0, 4.0, 41).unwrap(), PhiGrid::new(16).unwrap())
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn eigenvalues() {
        let b = ModeBasis::new(1.0, 1.0, 8).unwrap();
        assert_eq!(b.eigenvalue(0).unwrap(), 0.0);
        assert_eq!(b.eigenvalue(3).unwrap(), 4.5);
        assert_eq!(ModeBasis::new(2.0, 1.0, 8).unwrap().eigenvalue(1).unwrap(), 2.0);
        assert!(matches!(b.eigenvalue(9), Err(Error::ModeCutoff { .. })));
    }

    #[test]
    fn orthonormality_matrix() {
        let k_max = 8;
        let pg = PhiGrid::new(2 * k_max as usize + 2).unwrap();
        for k in -k_max..=k_max {
            for kp in -k_max..=k_max {
                let s: Complex64 =
                    (0..pg.n).map(|j| mode_function(k, pg.phi(j)) * mode_function(kp, pg.phi(j)).conj() * pg.dphi()).sum();
                let want = if k == kp { 1.0 } else { 0.0 };
                assert!((s - want).norm() < 1e-12, "{k} {kp}");
            }
        }
    }

    #[test]
    fn projection_examples() {
        let (g, xg, pg) = setup();
        let f = |x: f64| c((-x * x).exp(), 0.3 * x);
        let h = |x: f64| c(x.cos(), (-x * x / 2.0).exp());
        let pure = WaveField::from_fn_2d(xg, pg, |x, p| mode_function(2, p) * f(x) / g.profile.b(x).sqrt());
        let got = project_mode(&pure, &g, 2).unwrap();
        for i in 0..xg.n {
            assert!((got.values[i] - f(xg.x(i))).norm() < 1e-12);
        }
        let one = WaveField::from_fn_2d(xg, pg, |x, p| mode_function(1, p) * f(x));
        assert!(project_mode(&one, &g, 3).unwrap().values.iter().all(|v| v.norm() < 1e-12));
        let mixed = WaveField::from_fn_2d(xg, pg, |x, p| {
            (mode_function(1, p) * f(x) + mode_function(2, p) * h(x)) / g.profile.b(x).sqrt()
        });
        let got = project_mode(&mixed, &g, 2).unwrap();
        for i in 0..xg.n {
            assert!((got.values[i] - h(xg.x(i))).norm() < 1e-12);
        }
    }

    #[test]
    fn assembly_examples() {
        let (g, xg, pg) = setup();
        let mut m = BTreeMap::new();
        m.insert(0, WaveField::from_fn_1d(xg, |_| c(2.0, 0.0)));
        let a = assemble_from_modes(&m, &g, xg, pg).unwrap();
        for i in 0..xg.n {
            let want = 2.0 / (g.profile.b(xg.x(i)).sqrt() * (2.0 * PI).sqrt());
            for j in 0..pg.n {
                assert!((a.at(i, j) - want).norm() < 1e-14);
            }
        }
        let empty = assemble_from_modes(&BTreeMap::new(), &g, xg, pg).unwrap();
        assert!(empty.values.iter().all(|v| *v == c(0.0, 0.0)));
        let bad = XGrid::new(-4.0, 4.0, 11).unwrap();
        m.insert(1, WaveField::zeros_1d(bad));
        assert!(assemble_from_modes(&m, &g, xg, pg).is_err());
    }

    #[test]
    fn project_rejects_1d() {
        let (g, xg, _) = setup();
        assert!(project_mode(&WaveField::zeros_1d(xg), &g, 0).is_err());
    }

    #[test]
    fn io_round_trips() {
        let (_, xg, pg) = setup();
        let dir = tempfile::tempdir().unwrap();
        let f2 = WaveField::from_fn_2d(xg, pg, |x, p| c(x.sin() * p, x - p));
        let f1 = WaveField::from_fn_1d(xg, |x| c(x, -x * x));
        for f in [&f1, &f2] {
            let pb = dir.path().join("f.bin");
            f.write_binary(&pb).unwrap();
            assert_eq!(&WaveField::read_binary(&pb).unwrap(), f);
            let pc = dir.path().join("f.csv");
            f.write_csv(&pc).unwrap();
            let back = WaveField::read_csv(&pc).unwrap();
            assert_eq!(back.values, f.values);
            assert_eq!(back.phi_grid, f.phi_grid);
            assert!((back.x_grid.dx - f.x_grid.dx).abs() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_and_parseval(coef in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 9 * 5)) {
            let (g, xg, pg) = setup();
            // Band-limited: |k| <= 4 with n_phi = 16.
            let field = WaveField::from_fn_2d(xg, pg, |x, p| {
                let mut s = c(0.0, 0.0);
                for (idx, k) in (-4i64..=4).enumerate() {
                    for q in 0..5 {
                        let (a, b) = coef[idx * 5 + q];
                        s += c(a, b) * (-(x - q as f64 + 2.0).powi(2)).exp() * mode_function(k, p);
                    }
                }
                s
            });
            let mut modes = BTreeMap::new();
            let mut reduced_total = 0.0;
            for k in -4..=4 {
                let m = project_mode(&field, &g, k).unwrap();
                reduced_total += m.reduced_norm();
                modes.insert(k, m);
            }
            let back = assemble_from_modes(&modes, &g, xg, pg).unwrap();
            let scale = field.values.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
            for (a, b) in back.values.iter().zip(&field.values) {
                prop_assert!((a - b).norm() < 1e-12 * scale.max(1.0));
            }
            let cov = field.covariant_norm(&g.profile, 0.0);
            prop_assert!((cov - reduced_total).abs() <= 1e-10 * cov.max(1e-300));
        }
    }
}
