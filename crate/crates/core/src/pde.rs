//! Grid Schrodinger solvers used as oracles: full (x, phi) evolution on the
//! tube, the reduced 1D equation, and the time-dependent variant.
//!
//! All steppers are Crank-Nicolson in time with second-order differences in
//! x. The tube Laplacian uses the flux form
//! `(1/b_i dx^2) [b_{i+1/2} (psi_{i+1} - psi_i) - b_{i-1/2} (psi_i - psi_{i-1})]`,
//! which is self-adjoint under the `b`-weighted inner product.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{curvature_of, RadiusProfile, TubeGeometry};
use crate::kernels::{delta_v_from_jet, delta_v_slope_from_jet, PhysicsConstants};
use crate::spectral::{mode_energy, NormConvention, WaveField, XGrid};

/// Edge amplitude, relative to the peak, above which a run is rejected.
pub const BOUNDARY_TOLERANCE: f64 = 1e-6;

/// Real tridiagonal Hamiltonian with Dirichlet ends.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    /// `-(hbar^2/2m) L + V` with `L` the flux-form Laplacian for weights `b`
    /// (`b_nodes[i] = b(x_i)`, `b_mid[i] = b(x_i + dx/2)`, `b_mid_left = b(x_0 - dx/2)`).
    pub fn flux_form(kinetic: f64, dx: f64, b_nodes: &[f64], b_left_edge: f64, b_mid: &[f64], potential: &[f64]) -> Self {
        let n = b_nodes.len();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let inv = 1.0 / (dx * dx);
        for i in 0..n {
            let bl = if i == 0 { b_left_edge } else { b_mid[i - 1] };
            let br = b_mid[i];
            let s = kinetic * inv / b_nodes[i];
            lower[i] = -s * bl;
            upper[i] = -s * br;
            diag[i] = s * (bl + br) + potential[i];
        }
        Tridiagonal { lower, diag, upper }
    }

    /// `-(hbar^2/2m) d^2/dx^2 + V`
    pub fn plain(kinetic: f64, dx: f64, potential: &[f64]) -> Self {
        let n = potential.len();
        let s = kinetic / (dx * dx);
        Tridiagonal { lower: vec![-s; n], diag: potential.iter().map(|v| 2.0 * s + v).collect(), upper: vec![-s; n] }
    }

    pub fn apply(&self, psi: &[Complex64], out: &mut [Complex64]) {
        let n = psi.len();
        for i in 0..n {
            let mut v = psi[i] * self.diag[i];
            if i > 0 {
                v += psi[i - 1] * self.lower[i];
            }
            if i + 1 < n {
                v += psi[i + 1] * self.upper[i];
            }
            out[i] = v;
        }
    }
}

/// Crank-Nicolson propagator `(1 + i dt H / 2 hbar)^{-1} (1 - i dt H / 2 hbar)` with
/// a pre-factored Thomas solve.
#[derive(Debug, Clone)]
pub struct CnStepper {
    h: Tridiagonal,
    alpha: Complex64,
    cprime: Vec<Complex64>,
    inv_pivot: Vec<Complex64>,
}

impl CnStepper {
    pub fn new(h: Tridiagonal, dt: f64, hbar: f64) -> Result<Self> {
        Self::with_tau(h, Complex64::new(dt, 0.0), hbar)
    }

    /// Step of complex duration `tau`; `Im tau < 0` damps high energies.
    pub fn with_tau(h: Tridiagonal, tau: Complex64, hbar: f64) -> Result<Self> {
        let n = h.diag.len();
        let alpha = Complex64::new(0.0, 0.5 / hbar) * tau;
        let mut cprime = vec![Complex64::new(0.0, 0.0); n];
        let mut inv_pivot = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let d = Complex64::new(1.0, 0.0) + alpha * h.diag[i];
            let l = alpha * h.lower[i];
            let piv = if i == 0 { d } else { d - l * cprime[i - 1] };
            if piv.norm() < 1e-300 {
                return Err(Error::SingularSystem { row: i });
            }
            inv_pivot[i] = piv.inv();
            cprime[i] = alpha * h.upper[i] * inv_pivot[i];
        }
        Ok(CnStepper { h, alpha, cprime, inv_pivot })
    }

    pub fn len(&self) -> usize {
        self.cprime.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cprime.is_empty()
    }

    /// Advances `psi` in place; `scratch` is resized as needed.
    pub fn step(&self, psi: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        let n = psi.len();
        scratch.resize(n, Complex64::new(0.0, 0.0));
        self.h.apply(psi, scratch);
        for i in 0..n {
            scratch[i] = psi[i] - self.alpha * scratch[i];
        }
        // Forward sweep.
        for i in 0..n {
            let prev = if i == 0 { Complex64::new(0.0, 0.0) } else { psi[i - 1] };
            psi[i] = (scratch[i] - self.alpha * self.h.lower[i] * prev) * self.inv_pivot[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let next = psi[i + 1];
            psi[i] -= self.cprime[i] * next;
        }
    }
}

fn boundary_ratio_of(values: &[Complex64], n_x: usize, n_phi: usize) -> f64 {
    let peak = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let edge_rows = [0, n_x - 1];
    let edge = edge_rows
        .iter()
        .flat_map(|&i| values[i * n_phi..(i + 1) * n_phi].iter())
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    edge / peak
}

/// Largest `|psi|` on the two x-boundary rows relative to the peak.
pub fn boundary_ratio(field: &WaveField) -> f64 {
    boundary_ratio_of(&field.values, field.x_grid.n, field.n_phi())
}

fn check_boundary(field: &WaveField) -> Result<()> {
    let r = boundary_ratio(field);
    if r > BOUNDARY_TOLERANCE {
        Err(Error::BoundaryContamination { ratio: r })
    } else {
        Ok(())
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        Err(Error::param("dt", "must be positive"))
    } else {
        Ok(())
    }
}

fn check_grid_in_domain(geom: &TubeGeometry, g: &XGrid) -> Result<()> {
    geom.check_domain(g.x(0))?;
    geom.check_domain(g.x_max())
}

/// Fourier index `j` of an `n`-point FFT as a signed mode number.
pub fn fft_mode(j: usize, n: usize) -> i64 {
    if j < n.div_ceil(2) {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Radii on nodes, staggered midpoints, and the left ghost midpoint.
fn radii(profile: &RadiusProfile, g: &XGrid, eta: f64) -> (Vec<f64>, f64, Vec<f64>) {
    let nodes = (0..g.n).map(|i| profile.b_at(g.x(i), eta)).collect();
    let left = profile.b_at(g.x(0) - 0.5 * g.dx, eta);
    let mid = (0..g.n).map(|i| profile.b_at(g.x(i) + 0.5 * g.dx, eta)).collect();
    (nodes, left, mid)
}

/// Stepper for Fourier sector `k` of the full tube Hamiltonian at history value `eta`.
fn full_sector_stepper(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    g: &XGrid,
    k: i64,
    eta: f64,
    dt: f64,
    radii_eta: &(Vec<f64>, f64, Vec<f64>),
) -> Result<CnStepper> {
    let kin = c.kinetic();
    let pot: Vec<f64> = (0..g.n)
        .map(|i| {
            let x = g.x(i);
            let j = geom.profile.jet_at(x, eta);
            c.v0.value(x) + kin * (k * k) as f64 / (j.b * j.b) + kin * c.xi * curvature_of(&j)
        })
        .collect();
    let (nodes, left, mid) = radii_eta;
    CnStepper::new(Tridiagonal::flux_form(kin, g.dx, nodes, *left, mid, &pot), dt, c.hbar)
}

/// Full field held as Fourier sectors in phi: `sectors[j][i]` is the FFT
/// coefficient of index `j` at `x_i`.
struct Sectors {
    n_x: usize,
    n_phi: usize,
    data: Vec<Vec<Complex64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Sectors {
    fn from_field(field: &WaveField) -> Result<Self> {
        let pg = field.phi_grid.ok_or_else(|| Error::GridMismatch("expected a 2D field".into()))?;
        let (n_x, n_phi) = (field.x_grid.n, pg.n);
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_phi);
        let inverse = planner.plan_fft_inverse(n_phi);
        let mut data = vec![vec![Complex64::new(0.0, 0.0); n_x]; n_phi];
        let mut row = vec![Complex64::new(0.0, 0.0); n_phi];
        for i in 0..n_x {
            row.copy_from_slice(&field.values[i * n_phi..(i + 1) * n_phi]);
            fwd.process(&mut row);
            for j in 0..n_phi {
                data[j][i] = row[j];
            }
        }
        Ok(Sectors { n_x, n_phi, data, inverse })
    }

    fn write_into(&self, field: &mut WaveField) {
        let mut row = vec![Complex64::new(0.0, 0.0); self.n_phi];
        let scale = 1.0 / self.n_phi as f64;
        for i in 0..self.n_x {
            for j in 0..self.n_phi {
                row[j] = self.data[j][i];
            }
            self.inverse.process(&mut row);
            for j in 0..self.n_phi {
                field.values[i * self.n_phi + j] = row[j] * scale;
            }
        }
    }

    fn edge_ratio(&self) -> f64 {
        let mut peak: f64 = 0.0;
        let mut edge: f64 = 0.0;
        for s in &self.data {
            for v in s {
                peak = peak.max(v.norm());
            }
            edge = edge.max(s[0].norm()).max(s[self.n_x - 1].norm());
        }
        if peak == 0.0 {
            0.0
        } else {
            edge / peak
        }
    }
}

/// Observer invoked with `(step, field)` every `stride` steps (including step 0).
pub type Observer<'a> = &'a mut dyn FnMut(usize, &WaveField) -> Result<()>;

/// Options for the time-dependent stepper, where `b(x, t) = b(x, eta = t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeDependence {
    pub t0: f64,
    /// Apply the `-(i hbar d/2) d_t ln b` term; disabling it is an ablation.
    pub compensate: bool,
}

fn run_full(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    dt: f64,
    steps: usize,
    time: Option<TimeDependence>,
    stride: usize,
    mut observer: Option<Observer<'_>>,
) -> Result<WaveField> {
    check_dt(dt)?;
    c.validate()?;
    check_grid_in_domain(geom, &field.x_grid)?;
    let g = field.x_grid;
    let mut sectors = Sectors::from_field(field)?;
    let n_phi = sectors.n_phi;
    let mut out = field.clone();
    out.norm_convention = NormConvention::Covariant;
    if let Some(obs) = observer.as_mut() {
        obs(0, &out)?;
    }
    let moving = time.is_some() && geom.profile.history_coupling().is_some();
    let mut steppers: Vec<CnStepper> = Vec::new();
    let build = |eta: f64| -> Result<Vec<CnStepper>> {
        let r = radii(&geom.profile, &g, eta);
        (0..n_phi).map(|j| full_sector_stepper(geom, c, &g, fft_mode(j, n_phi), eta, dt, &r)).collect()
    };
    if !moving {
        steppers = build(0.0)?;
    }
    let mut scratch = Vec::new();
    let t0 = time.map_or(0.0, |t| t.t0);
    for n in 0..steps {
        if moving {
            let td = time.expect("moving implies time dependence");
            let t = t0 + n as f64 * dt;
            let tm = t + 0.5 * dt;
            steppers = build(tm)?;
            let (half_a, half_b): (Vec<f64>, Vec<f64>) = if td.compensate {
                (0..g.n)
                    .map(|i| {
                        let x = g.x(i);
                        let (b0, bm, b1) =
                            (geom.profile.b_at(x, t), geom.profile.b_at(x, tm), geom.profile.b_at(x, t + dt));
                        (((b0 / bm).sqrt()), (bm / b1).sqrt())
                    })
                    .unzip()
            } else {
                (vec![1.0; g.n], vec![1.0; g.n])
            };
            for (j, s) in sectors.data.iter_mut().enumerate() {
                for i in 0..g.n {
                    s[i] *= half_a[i];
                }
                steppers[j].step(s, &mut scratch);
                for i in 0..g.n {
                    s[i] *= half_b[i];
                }
            }
        } else {
            for (j, s) in sectors.data.iter_mut().enumerate() {
                steppers[j].step(s, &mut scratch);
            }
        }
        let r = sectors.edge_ratio();
        if r > BOUNDARY_TOLERANCE {
            return Err(Error::BoundaryContamination { ratio: r });
        }
        if let Some(obs) = observer.as_mut() {
            if (n + 1) % stride.max(1) == 0 {
                sectors.write_into(&mut out);
                obs(n + 1, &out)?;
            }
        }
    }
    sectors.write_into(&mut out);
    check_boundary(&out)?;
    Ok(out)
}

/// Evolves a 2D field under `H = (hbar^2/2m)(-Laplacian + xi R) + V0` on the static tube.
pub fn evolve_full_2d(field: &WaveField, geom: &TubeGeometry, c: &PhysicsConstants, dt: f64, steps: usize) -> Result<WaveField> {
    run_full(field, geom, c, dt, steps, None, 1, None)
}

pub fn evolve_full_2d_observed(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    dt: f64,
    steps: usize,
    stride: usize,
    observer: Observer<'_>,
) -> Result<WaveField> {
    run_full(field, geom, c, dt, steps, None, stride, Some(observer))
}

/// Evolves on a tube whose radius depends on time through the profile's
/// history coupling with `eta = t`. Each step is split as a half measure
/// rescaling, a Crank-Nicolson step with `H(t + dt/2)`, and a second half
/// rescaling, which together integrate the `d_t ln b` term exactly.
pub fn evolve_time_dependent(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    dt: f64,
    steps: usize,
    time: TimeDependence,
) -> Result<WaveField> {
    run_full(field, geom, c, dt, steps, Some(time), 1, None)
}

pub fn evolve_time_dependent_observed(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    dt: f64,
    steps: usize,
    time: TimeDependence,
    stride: usize,
    observer: Observer<'_>,
) -> Result<WaveField> {
    run_full(field, geom, c, dt, steps, Some(time), stride, Some(observer))
}

/// Evolves one Fourier sector `Psi_k(x)` of the full equation, i.e.
/// `(hbar^2/2m)(-(1/b) d_x b d_x + k^2/b^2 + xi R) + V0`, with `n_sub`
/// Crank-Nicolson substeps of `dt / n_sub` each.
pub fn evolve_full_sector(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    dt: f64,
    n_sub: usize,
) -> Result<WaveField> {
    check_dt(dt)?;
    c.validate()?;
    if field.phi_grid.is_some() || n_sub == 0 {
        return Err(Error::param("field", "expects a 1D sector field and at least one substep"));
    }
    let g = field.x_grid;
    check_grid_in_domain(geom, &g)?;
    let h = dt / n_sub as f64;
    let st = full_sector_stepper(geom, c, &g, k, 0.0, h, &radii(&geom.profile, &g, 0.0))?;
    let mut out = field.clone();
    out.norm_convention = NormConvention::Covariant;
    let mut scratch = Vec::new();
    for _ in 0..n_sub {
        st.step(&mut out.values, &mut scratch);
    }
    check_boundary(&out)?;
    Ok(out)
}

/// Fibre energy entering the reduced equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FibreEnergy {
    Mode(i64),
    Energy(f64),
}

impl FibreEnergy {
    pub fn value(&self, c: &PhysicsConstants) -> f64 {
        match *self {
            FibreEnergy::Mode(k) => mode_energy(c.hbar, c.mass, k),
            FibreEnergy::Energy(e) => e,
        }
    }
}

/// `V0 + E/b^2 [+ Delta V_eff]` on the grid at history value `eta`.
pub fn reduced_potential(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    g: &XGrid,
    e_phi: f64,
    eta: f64,
    include_delta_v: bool,
) -> Vec<f64> {
    (0..g.n)
        .map(|i| {
            let x = g.x(i);
            let j = geom.profile.jet_at(x, eta);
            let mut v = c.v0.value(x) + e_phi / (j.b * j.b);
            if include_delta_v {
                v += delta_v_from_jet(&j, c, geom.d);
            }
            v
        })
        .collect()
}

pub fn reduced_stepper(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    g: &XGrid,
    e_phi: f64,
    eta: f64,
    dt: f64,
    include_delta_v: bool,
) -> Result<CnStepper> {
    let pot = reduced_potential(geom, c, g, e_phi, eta, include_delta_v);
    CnStepper::new(Tridiagonal::plain(c.kinetic(), g.dx, &pot), dt, c.hbar)
}

#[allow(clippy::too_many_arguments)]
fn run_reduced(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    energy: FibreEnergy,
    dt: f64,
    steps: usize,
    include_delta_v: bool,
    t0: Option<f64>,
    stride: usize,
    mut observer: Option<Observer<'_>>,
) -> Result<WaveField> {
    check_dt(dt)?;
    c.validate()?;
    if field.phi_grid.is_some() {
        return Err(Error::GridMismatch("reduced evolution expects a 1D field".into()));
    }
    check_grid_in_domain(geom, &field.x_grid)?;
    let g = field.x_grid;
    let e_phi = energy.value(c);
    let moving = t0.is_some() && geom.profile.history_coupling().is_some();
    let mut out = field.clone();
    out.norm_convention = NormConvention::Reduced;
    if let Some(obs) = observer.as_mut() {
        obs(0, &out)?;
    }
    let mut stepper = reduced_stepper(geom, c, &g, e_phi, 0.0, dt, include_delta_v)?;
    let mut scratch = Vec::new();
    for n in 0..steps {
        if moving {
            let tm = t0.unwrap_or(0.0) + (n as f64 + 0.5) * dt;
            stepper = reduced_stepper(geom, c, &g, e_phi, tm, dt, include_delta_v)?;
        }
        stepper.step(&mut out.values, &mut scratch);
        let r = boundary_ratio(&out);
        if r > BOUNDARY_TOLERANCE {
            return Err(Error::BoundaryContamination { ratio: r });
        }
        if let Some(obs) = observer.as_mut() {
            if (n + 1) % stride.max(1) == 0 {
                obs(n + 1, &out)?;
            }
        }
    }
    Ok(out)
}

/// Evolves `i hbar d_t psi = [-(hbar^2/2m) d_x^2 + V_cl (+ Delta V_eff)] psi`.
#[allow(clippy::too_many_arguments)]
pub fn evolve_reduced_1d(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    energy: FibreEnergy,
    dt: f64,
    steps: usize,
    include_delta_v: bool,
) -> Result<WaveField> {
    run_reduced(field, geom, c, energy, dt, steps, include_delta_v, None, 1, None)
}

#[allow(clippy::too_many_arguments)]
pub fn evolve_reduced_1d_observed(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    energy: FibreEnergy,
    dt: f64,
    steps: usize,
    include_delta_v: bool,
    stride: usize,
    observer: Observer<'_>,
) -> Result<WaveField> {
    run_reduced(field, geom, c, energy, dt, steps, include_delta_v, None, stride, Some(observer))
}

/// Reduced evolution with `b(x, t)`; each step uses the potential at `t + dt/2`.
#[allow(clippy::too_many_arguments)]
pub fn evolve_reduced_time_dependent(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    energy: FibreEnergy,
    t0: f64,
    dt: f64,
    steps: usize,
    include_delta_v: bool,
) -> Result<WaveField> {
    run_reduced(field, geom, c, energy, dt, steps, include_delta_v, Some(t0), 1, None)
}

/// `<x>` under the field's norm convention (covariant fields use `b(x, eta)`).
pub fn expectation_x(field: &WaveField, profile: &RadiusProfile, eta: f64) -> f64 {
    let np = field.n_phi();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..field.x_grid.n {
        let x = field.x_grid.x(i);
        let mut w: f64 = field.values[i * np..(i + 1) * np].iter().map(|v| v.norm_sqr()).sum();
        if field.norm_convention == NormConvention::Covariant {
            w *= profile.b_at(x, eta);
        }
        num += w * x;
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `<d_x V_cl [+ d_x Delta V_eff]>` in a reduced field.
pub fn expectation_force(
    field: &WaveField,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    e_phi: f64,
    include_delta_v: bool,
) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..field.x_grid.n {
        let x = field.x_grid.x(i);
        let w = field.values[i].norm_sqr();
        let j = geom.profile.jet(x);
        let mut f = c.v0.derivative(x) - 2.0 * e_phi * j.d1 / (j.b * j.b * j.b);
        if include_delta_v {
            f += delta_v_slope_from_jet(&j, c, geom.d);
        }
        num += w * f;
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `r_n = m (<x>_{n+1} - 2 <x>_n + <x>_{n-1}) / dt^2 + <d_x V_cl (+ d_x Delta V_eff)>_n`
/// for reduced snapshots spaced `dt` apart; returns one value per interior snapshot.
pub fn ehrenfest_residual(
    trajectory: &[WaveField],
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    e_phi: f64,
    dt: f64,
    include_delta_v: bool,
) -> Result<Vec<f64>> {
    if trajectory.len() < 3 {
        return Err(Error::param("trajectory", "need at least three snapshots"));
    }
    if trajectory.iter().any(|f| f.phi_grid.is_some()) {
        return Err(Error::GridMismatch("Ehrenfest residual expects reduced 1D snapshots".into()));
    }
    let xs: Vec<f64> = trajectory.iter().map(|f| expectation_x(f, &geom.profile, 0.0)).collect();
    Ok((1..xs.len() - 1)
        .map(|n| {
            let acc = (xs[n + 1] - 2.0 * xs[n] + xs[n - 1]) / (dt * dt);
            c.mass * acc + expectation_force(&trajectory[n], geom, c, e_phi, include_delta_v)
        })
        .collect())
}
