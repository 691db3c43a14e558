//! Time-sliced path integrals: grid composition of short-time kernels,
//! exact lattice path sums, and assembly of the full propagator from modes.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TubeGeometry;
use crate::history::HistoryContext;
use crate::kernels::{short_time_full, short_time_mode_with, ModeKernelOptions, PhysicsConstants, SliceTime, StepContext};
use crate::spectral::{mode_function, XGrid};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Default cap on enumerated lattice paths.
pub const DEFAULT_PATH_BUDGET: u128 = 10_000_000;
/// Default cap on complex multiply-adds spent composing kernel matrices.
pub const DEFAULT_COMPOSE_BUDGET: f64 = 5e10;
/// Largest admissible kinetic phase `m dx^2 / (2 hbar eps)` between neighbours.
pub const KINETIC_PHASE_LIMIT: f64 = PI / 3.0;

/// Rejects grids whose neighbour kinetic phase `m dx^2/(2 hbar eps)` exceeds pi/3.
pub fn check_kinetic_phase(c: &PhysicsConstants, dx: f64, eps: f64) -> Result<()> {
    let ratio = c.mass * dx * dx / (2.0 * c.hbar * eps);
    if ratio > KINETIC_PHASE_LIMIT {
        Err(Error::KineticPhaseUnresolved { ratio })
    } else {
        Ok(())
    }
}

pub fn trapezoid_weights(g: &XGrid) -> Vec<f64> {
    let mut w = vec![g.dx; g.n];
    if g.n > 1 {
        w[0] *= 0.5;
        w[g.n - 1] *= 0.5;
    }
    w
}

/// Kernel sampled on a grid, `values[i * n + j] = K(x_i, x_j)`, with the
/// quadrature weights used when it is composed or applied.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub grid: XGrid,
    pub values: Vec<Complex64>,
    pub weights: Vec<f64>,
    pub eps: f64,
    pub slices: usize,
}

impl KernelMatrix {
    pub fn from_fn(grid: XGrid, eps: f64, weights: Vec<f64>, mut f: impl FnMut(f64, f64) -> Result<Complex64>) -> Result<Self> {
        if weights.len() != grid.n {
            return Err(Error::GridMismatch("one weight per grid point".into()));
        }
        let mut values = Vec::with_capacity(grid.n * grid.n);
        for i in 0..grid.n {
            for j in 0..grid.n {
                values.push(f(grid.x(i), grid.x(j))?);
            }
        }
        Ok(KernelMatrix { grid, values, weights, eps, slices: 1 })
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.values[i * self.grid.n + j]
    }

    pub fn elapsed(&self) -> f64 {
        self.eps * self.slices as f64
    }

    /// Index of the grid node at `x`, if `x` lies on one.
    pub fn node_index(&self, x: f64) -> Option<usize> {
        let r = (x - self.grid.x_min) / self.grid.dx;
        let i = r.round();
        ((r - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.grid.n).then_some(i as usize)
    }

    /// `(K psi)(x_i) = sum_j K_ij w_j psi_j`
    pub fn apply(&self, psi: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.grid.n;
        if psi.len() != n {
            return Err(Error::GridMismatch(format!("kernel has {n} points, vector has {}", psi.len())));
        }
        let wpsi: Vec<Complex64> = psi.iter().zip(&self.weights).map(|(p, w)| p * w).collect();
        Ok((0..n)
            .map(|i| self.values[i * n..(i + 1) * n].iter().zip(&wpsi).map(|(k, v)| k * v).sum())
            .collect())
    }

    fn times(&self, one: &KernelMatrix) -> KernelMatrix {
        let n = self.grid.n;
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            let row = &mut out[i * n..(i + 1) * n];
            for l in 0..n {
                let a = self.values[i * n + l] * self.weights[l];
                let src = &one.values[l * n..(l + 1) * n];
                for (r, s) in row.iter_mut().zip(src) {
                    *r += a * s;
                }
            }
        }
        KernelMatrix { grid: self.grid, values: out, weights: self.weights.clone(), eps: self.eps, slices: self.slices + one.slices }
    }
}

/// `K^steps` under the kernel's quadrature rule.
pub fn compose(kernel: &KernelMatrix, steps: usize) -> Result<KernelMatrix> {
    compose_with_budget(kernel, steps, DEFAULT_COMPOSE_BUDGET)
}

pub fn compose_with_budget(kernel: &KernelMatrix, steps: usize, budget: f64) -> Result<KernelMatrix> {
    if steps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    let n = kernel.grid.n as f64;
    let cost = (steps - 1) as f64 * n * n * n;
    if cost > budget {
        return Err(Error::BudgetExceeded { paths: cost as u128, budget: budget as u128 });
    }
    let mut acc = kernel.clone();
    for _ in 1..steps {
        acc = acc.times(kernel);
    }
    Ok(acc)
}

/// Slice options shared by the path-integral builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceOptions {
    /// Regulator `delta` in `tau = eps (1 - i delta)`.
    pub delta: f64,
    pub mode: ModeKernelOptions,
}

impl Default for SliceOptions {
    fn default() -> Self {
        SliceOptions { delta: 0.0, mode: ModeKernelOptions::default() }
    }
}

fn slice_eps(total: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::param("n_slices", "must be at least 1"));
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::param("t", "total time must be positive"));
    }
    Ok(total / n as f64)
}

/// One-slice mode-`k` kernel on `grid` with trapezoid weights.
pub fn mode_step_matrix(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    grid: &XGrid,
    eps: f64,
    opts: SliceOptions,
) -> Result<KernelMatrix> {
    check_kinetic_phase(c, grid.dx, eps)?;
    let dt = SliceTime::regulated(eps, opts.delta);
    KernelMatrix::from_fn(*grid, eps, trapezoid_weights(grid), |xl, xe| {
        short_time_mode_with(geom, c, k, xl, xe, dt, &StepContext::STATIC, opts.mode)
    })
}

/// Mode-`k` propagator over time `t` from `n` composed slices.
pub fn reduced_path_propagator(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    grid: &XGrid,
    t: f64,
    n: usize,
    opts: SliceOptions,
) -> Result<KernelMatrix> {
    let eps = slice_eps(t, n)?;
    compose(&mode_step_matrix(geom, c, k, grid, eps, opts)?, n)
}

/// Pinned path endpoints, `(x_0, phi_0)` at `t = 0` and `(x_f, phi_f)` at `t = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub x_f: f64,
    pub phi_f: f64,
    pub x_0: f64,
    pub phi_0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeSum {
    pub value: Complex64,
    /// Largest term magnitude at `|k| = k_max`.
    pub tail: f64,
}

/// Mode propagators `K_k`, `|k| <= k_max`, on a shared grid, reassembled into
/// the full kernel by [`ModeSumPropagator::eval`].
#[derive(Debug, Clone)]
pub struct ModeSumPropagator {
    geom: TubeGeometry,
    k_max: i64,
    kernels: Vec<KernelMatrix>,
}

impl ModeSumPropagator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        geom: &TubeGeometry,
        c: &PhysicsConstants,
        grid: &XGrid,
        t: f64,
        n: usize,
        k_max: i64,
        opts: SliceOptions,
    ) -> Result<Self> {
        if k_max < 0 {
            return Err(Error::param("k_max", "must be non-negative"));
        }
        let kernels = (-k_max..=k_max).map(|k| reduced_path_propagator(geom, c, k, grid, t, n, opts)).collect::<Result<_>>()?;
        Ok(ModeSumPropagator { geom: *geom, k_max, kernels })
    }

    pub fn kernel(&self, k: i64) -> Option<&KernelMatrix> {
        (k.abs() <= self.k_max).then(|| &self.kernels[(k + self.k_max) as usize])
    }

    /// `sum_{|k| <= k_max} Phi_k(phi_f) Phi_k*(phi_0) (b_f b_0)^{-d/2} K_k(x_f, x_0)`;
    /// both `x` endpoints must be grid nodes.
    pub fn eval(&self, ends: Endpoints) -> Result<ModeSum> {
        let k0 = &self.kernels[0];
        let (i, j) = match (k0.node_index(ends.x_f), k0.node_index(ends.x_0)) {
            (Some(i), Some(j)) => (i, j),
            _ => return Err(Error::GridMismatch("mode-sum endpoints must be grid nodes".into())),
        };
        let meas = (self.geom.profile.b(ends.x_f) * self.geom.profile.b(ends.x_0)).powf(-0.5 * self.geom.d as f64);
        let mut value = Complex64::new(0.0, 0.0);
        let mut tail: f64 = 0.0;
        for (kk, k) in self.kernels.iter().zip(-self.k_max..=self.k_max) {
            let term = mode_function(k, ends.phi_f) * mode_function(k, ends.phi_0).conj() * meas * kk.get(i, j);
            if k.abs() == self.k_max {
                tail = tail.max(term.norm());
            }
            value += term;
        }
        Ok(ModeSum { value, tail })
    }
}

/// One-off [`ModeSumPropagator`] evaluation. With `tail_tolerance`, a tail
/// estimate above it is an error.
#[allow(clippy::too_many_arguments)]
pub fn mode_sum_propagator(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    ends: Endpoints,
    grid: &XGrid,
    t: f64,
    n: usize,
    k_max: i64,
    opts: SliceOptions,
    tail_tolerance: Option<f64>,
) -> Result<ModeSum> {
    let m = ModeSumPropagator::new(geom, c, grid, t, n, k_max, opts)?.eval(ends)?;
    if let Some(tol) = tail_tolerance {
        if m.tail > tol {
            return Err(Error::TruncationTail { tail: m.tail, tolerance: tol });
        }
    }
    Ok(m)
}

/// Interior lattice for brute-force path sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub x: XGrid,
    pub n_phi: usize,
    pub budget: u128,
}

impl Lattice {
    pub fn new(x: XGrid, n_phi: usize) -> Self {
        Lattice { x, n_phi, budget: DEFAULT_PATH_BUDGET }
    }

    pub fn with_budget(mut self, budget: u128) -> Self {
        self.budget = budget;
        self
    }

    pub fn full_paths(&self, n: usize) -> u128 {
        ((self.x.n * self.n_phi) as u128).saturating_pow(n.saturating_sub(1) as u32)
    }

    pub fn reduced_paths(&self, n: usize) -> u128 {
        (self.x.n as u128).saturating_pow(n.saturating_sub(1) as u32)
    }

    fn check(&self, paths: u128) -> Result<()> {
        if paths > self.budget {
            Err(Error::BudgetExceeded { paths, budget: self.budget })
        } else {
            Ok(())
        }
    }
}

/// How the history value `eta` accumulates along a path.
#[derive(Debug, Clone, Copy)]
pub enum PathContext<'a> {
    /// `eta = 0` throughout.
    Static,
    /// `eta_n = t_n`, i.e. `f = 1`.
    TimeDependent,
    History(&'a HistoryContext),
}

impl PathContext<'_> {
    pub fn f(&self, x: f64) -> f64 {
        match self {
            PathContext::Static => 0.0,
            PathContext::TimeDependent => 1.0,
            PathContext::History(h) => h.f.eval(x),
        }
    }

    /// History value and step context for the slice ending at `x_next`.
    pub fn advance(&self, geom: &TubeGeometry, eps: f64, x_next: f64, eta_prev: f64) -> (f64, StepContext) {
        let f = self.f(x_next);
        let eta = eta_prev + eps * f;
        let dlnb_dt = if f == 0.0 { 0.0 } else { f * geom.profile.dlnb_deta(eta) };
        (eta, StepContext { eta_prev, eta, dlnb_dt })
    }
}

struct FullWalk<'a> {
    geom: &'a TubeGeometry,
    c: &'a PhysicsConstants,
    ctx: PathContext<'a>,
    ends: Endpoints,
    xs: Vec<f64>,
    wx: Vec<f64>,
    phis: Vec<f64>,
    dphi: f64,
    dt: SliceTime,
    n: usize,
}

impl FullWalk<'_> {
    fn kernel(&self, xl: f64, pl: f64, xe: f64, pe: f64, sc: &StepContext) -> Result<Complex64> {
        short_time_full(self.geom, self.c, xl, pl, xe, pe, self.dt, sc)
    }

    /// `v` holds amplitudes on the phi lattice at interior point `x_prev`
    /// (index `n` along the path); `None` marks the pinned start.
    fn visit(&self, n: usize, x_prev: f64, w_prev: f64, eta_prev: f64, v: Option<&[Complex64]>) -> Result<Complex64> {
        let np = self.phis.len();
        let eps = self.dt.eps;
        let measure = |eta: f64| w_prev * self.dphi * self.geom.profile.b_at(x_prev, eta).powi(self.geom.d as i32);
        if n + 1 == self.n {
            let (_, sc) = self.ctx.advance(self.geom, eps, self.ends.x_f, eta_prev);
            return match v {
                None => self.kernel(self.ends.x_f, self.ends.phi_f, self.ends.x_0, self.ends.phi_0, &sc),
                Some(v) => {
                    let m = measure(eta_prev);
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (j, vj) in v.iter().enumerate() {
                        acc += self.kernel(self.ends.x_f, self.ends.phi_f, x_prev, self.phis[j], &sc)? * *vj * m;
                    }
                    Ok(acc)
                }
            };
        }
        let mut total = Complex64::new(0.0, 0.0);
        let mut next = vec![Complex64::new(0.0, 0.0); np];
        for (ix, &x) in self.xs.iter().enumerate() {
            let (eta, sc) = self.ctx.advance(self.geom, eps, x, eta_prev);
            match v {
                None => {
                    for (i, slot) in next.iter_mut().enumerate() {
                        *slot = self.kernel(x, self.phis[i], self.ends.x_0, self.ends.phi_0, &sc)?;
                    }
                }
                Some(v) => {
                    // The kernel depends on the angle difference only.
                    let kv: Vec<Complex64> =
                        (0..np).map(|m| self.kernel(x, m as f64 * self.dphi, x_prev, 0.0, &sc)).collect::<Result<_>>()?;
                    let wm = measure(eta_prev);
                    for (i, slot) in next.iter_mut().enumerate() {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for (j, vj) in v.iter().enumerate() {
                            acc += kv[(i + np - j) % np] * vj;
                        }
                        *slot = acc * wm;
                    }
                }
            }
            total += self.visit(n + 1, x, self.wx[ix], eta, Some(&next))?;
        }
        Ok(total)
    }
}

/// Exact sum over all lattice paths of the product of full short-time kernels,
/// with interior measure `w_x dphi b(x_n, eta_n)^d`.
pub fn brute_force_full(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    ends: Endpoints,
    t: f64,
    n: usize,
    lattice: &Lattice,
    ctx: PathContext<'_>,
    delta: f64,
) -> Result<Complex64> {
    let eps = slice_eps(t, n)?;
    lattice.check(lattice.full_paths(n))?;
    if lattice.n_phi == 0 {
        return Err(Error::param("n_phi", "must be positive"));
    }
    let dphi = 2.0 * PI / lattice.n_phi as f64;
    let walk = FullWalk {
        geom,
        c,
        ctx,
        ends,
        xs: lattice.x.points(),
        wx: trapezoid_weights(&lattice.x),
        phis: (0..lattice.n_phi).map(|j| j as f64 * dphi).collect(),
        dphi,
        dt: SliceTime::regulated(eps, delta),
        n,
    };
    walk.visit(0, ends.x_0, 0.0, 0.0, None)
}

struct ReducedWalk<'a> {
    geom: &'a TubeGeometry,
    c: &'a PhysicsConstants,
    ctx: PathContext<'a>,
    ks: &'a [i64],
    x_f: f64,
    x_0: f64,
    xs: Vec<f64>,
    wx: Vec<f64>,
    dt: SliceTime,
    opts: ModeKernelOptions,
    n: usize,
    endpoint_measure: bool,
}

impl ReducedWalk<'_> {
    fn visit(&self, n: usize, x_prev: f64, eta_prev: f64, amp: &[Complex64], out: &mut [Complex64]) -> Result<()> {
        let eps = self.dt.eps;
        if n + 1 == self.n {
            let (eta, sc) = self.ctx.advance(self.geom, eps, self.x_f, eta_prev);
            let meas = if self.endpoint_measure {
                let p = &self.geom.profile;
                (p.b_at(self.x_f, eta) * p.b(self.x_0)).powf(-0.5 * self.geom.d as f64)
            } else {
                1.0
            };
            for (i, &k) in self.ks.iter().enumerate() {
                out[i] += amp[i] * short_time_mode_with(self.geom, self.c, k, self.x_f, x_prev, self.dt, &sc, self.opts)? * meas;
            }
            return Ok(());
        }
        let mut next = vec![Complex64::new(0.0, 0.0); self.ks.len()];
        for (ix, &x) in self.xs.iter().enumerate() {
            let (eta, sc) = self.ctx.advance(self.geom, eps, x, eta_prev);
            for (i, &k) in self.ks.iter().enumerate() {
                next[i] = amp[i] * short_time_mode_with(self.geom, self.c, k, x, x_prev, self.dt, &sc, self.opts)? * self.wx[ix];
            }
            self.visit(n + 1, x, eta, &next, out)?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn reduced_walk(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    ks: &[i64],
    x_f: f64,
    x_0: f64,
    t: f64,
    n: usize,
    lattice: &Lattice,
    ctx: PathContext<'_>,
    opts: SliceOptions,
    endpoint_measure: bool,
) -> Result<Vec<Complex64>> {
    let eps = slice_eps(t, n)?;
    lattice.check(lattice.reduced_paths(n))?;
    let walk = ReducedWalk {
        geom,
        c,
        ctx,
        ks,
        x_f,
        x_0,
        xs: lattice.x.points(),
        wx: trapezoid_weights(&lattice.x),
        dt: SliceTime::regulated(eps, opts.delta),
        opts: opts.mode,
        n,
        endpoint_measure,
    };
    let mut out = vec![Complex64::new(0.0, 0.0); ks.len()];
    walk.visit(0, x_0, 0.0, &vec![Complex64::new(1.0, 0.0); ks.len()], &mut out)?;
    Ok(out)
}

/// Exact sum over 1D lattice paths of products of mode-`k` kernels.
#[allow(clippy::too_many_arguments)]
pub fn reduced_brute_force(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    x_f: f64,
    x_0: f64,
    t: f64,
    n: usize,
    lattice: &Lattice,
    ctx: PathContext<'_>,
    opts: SliceOptions,
) -> Result<Complex64> {
    Ok(reduced_walk(geom, c, &[k], x_f, x_0, t, n, lattice, ctx, opts, false)?[0])
}

/// Mode sum of reduced lattice sums reassembled into the full kernel,
/// `sum_k Phi_k(phi_f) Phi_k*(phi_0) sum_paths (b(x_f, eta_N) b(x_0, 0))^{-d/2} prod K_k`.
#[allow(clippy::too_many_arguments)]
pub fn reduced_mode_sum_brute_force(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    ends: Endpoints,
    t: f64,
    n: usize,
    lattice: &Lattice,
    ctx: PathContext<'_>,
    k_max: i64,
    opts: SliceOptions,
) -> Result<ModeSum> {
    let ks: Vec<i64> = (-k_max..=k_max).collect();
    let sums = reduced_walk(geom, c, &ks, ends.x_f, ends.x_0, t, n, lattice, ctx, opts, true)?;
    let mut value = Complex64::new(0.0, 0.0);
    let mut tail: f64 = 0.0;
    for (k, s) in ks.iter().zip(&sums) {
        let term = mode_function(*k, ends.phi_f) * mode_function(*k, ends.phi_0).conj() * s;
        if k.abs() == k_max {
            tail = tail.max(term.norm());
        }
        value += term;
    }
    Ok(ModeSum { value, tail })
}

/// Least-squares slope of `ln e` against `ln h`.
pub fn fit_convergence_order(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::param("points", "need at least three (h, e) pairs"));
    }
    if points.iter().any(|&(h, e)| !(h > 0.0 && e > 0.0)) {
        return Err(Error::param("points", "step sizes and errors must be positive"));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(h, e)| (h.ln(), e.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// One row of a convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n_slices: usize,
    pub n_x: usize,
    pub n_phi: usize,
    pub eps: f64,
    pub error: f64,
}

/// Writes `N,n_x,n_phi,eps,error,slope_estimate`; the slope column is the
/// local order against the previous row (empty on the first).
pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "N,n_x,n_phi,eps,error,slope_estimate")?;
    for (i, r) in rows.iter().enumerate() {
        let slope = if i == 0 {
            String::new()
        } else {
            let p = rows[i - 1];
            format!("{:.12e}", (r.error / p.error).ln() / (r.eps / p.eps).ln())
        };
        writeln!(f, "{},{},{},{:.12e},{:.12e},{}", r.n_slices, r.n_x, r.n_phi, r.eps, r.error, slope)?;
    }
    Ok(())
}

/// Free kernel `sqrt(m/(2 pi i hbar tau)) exp(i m (x - x')^2 / (2 hbar tau))`.
pub fn free_kernel(c: &PhysicsConstants, x: f64, xp: f64, tau: Complex64) -> Complex64 {
    let d = x - xp;
    (c.mass / (2.0 * PI * I * c.hbar * tau)).sqrt() * (I * c.mass * d * d / (2.0 * c.hbar * tau)).exp()
}

/// Harmonic-oscillator kernel for `V = m omega^2 x^2 / 2`, valid for `|omega tau| < pi`.
pub fn mehler_kernel(c: &PhysicsConstants, omega: f64, x: f64, xp: f64, tau: Complex64) -> Complex64 {
    let s = (omega * tau).sin();
    let co = (omega * tau).cos();
    let pre = (c.mass * omega / (2.0 * PI * I * c.hbar * s)).sqrt();
    pre * (I * c.mass * omega / (2.0 * c.hbar * s) * ((x * x + xp * xp) * co - 2.0 * x * xp)).exp()
}

/// Free propagator on the flat cylinder of radius `b`, summed over windings `|w| <= w_max`.
#[allow(clippy::too_many_arguments)]
pub fn flat_cylinder_kernel(c: &PhysicsConstants, b: f64, ends: Endpoints, tau: Complex64, w_max: i64) -> Complex64 {
    let kx = free_kernel(c, ends.x_f, ends.x_0, tau);
    let mut ky = Complex64::new(0.0, 0.0);
    for w in -w_max..=w_max {
        ky += free_kernel(c, b * (ends.phi_f - ends.phi_0 + 2.0 * PI * w as f64), 0.0, tau);
    }
    kx * ky
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RadiusProfile;
    use crate::kernels::{semiclassical_action, DiscretePath, Potential};
    use crate::pde::FibreEnergy;
    use crate::spectral::mode_energy;

    fn flat(x: f64) -> TubeGeometry {
        TubeGeometry::new(RadiusProfile::constant(1.0), -x, x).unwrap()
    }

    #[test]
    fn fit_examples() {
        let hs = [0.1, 0.05, 0.025, 0.0125];
        let sq: Vec<_> = hs.iter().map(|&h| (h, h * h)).collect();
        assert!((fit_convergence_order(&sq).unwrap() - 2.0).abs() < 1e-12);
        let lin: Vec<_> = hs.iter().map(|&h| (h, 3.0 * h)).collect();
        assert!((fit_convergence_order(&lin).unwrap() - 1.0).abs() < 1e-12);
        let noise = [0.01, -0.01, 0.005, -0.005];
        let p: Vec<_> = hs.iter().zip(noise).map(|(&h, z)| (h, h.powf(1.5) * (1.0 + z))).collect();
        assert!((fit_convergence_order(&p).unwrap() - 1.5).abs() < 0.05);
        assert!(fit_convergence_order(&sq[..2]).is_err());
        assert!(fit_convergence_order(&[(0.1, 1.0), (0.05, 0.0), (0.01, 1.0)]).is_err());
    }

    #[test]
    fn kinetic_phase_rule() {
        let c = PhysicsConstants::natural();
        assert!(check_kinetic_phase(&c, 0.1, 0.01).is_ok());
        assert!(matches!(check_kinetic_phase(&c, 0.5, 0.01), Err(Error::KineticPhaseUnresolved { .. })));
    }

    #[test]
    fn compose_one_is_identity_and_free_semigroup() {
        let geom = flat(12.0);
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-10.0, 10.0, 401).unwrap();
        let opts = SliceOptions { delta: 0.1, ..Default::default() };
        let one = mode_step_matrix(&geom, &c, 0, &g, 0.25, opts).unwrap();
        assert_eq!(compose(&one, 1).unwrap(), one);
        let four = compose(&one, 4).unwrap();
        assert!((four.elapsed() - 1.0).abs() < 1e-15);
        let tau = Complex64::new(1.0, -0.1);
        let mut worst: f64 = 0.0;
        for i in (0..g.n).filter(|&i| g.x(i).abs() <= 2.0) {
            for j in (0..g.n).filter(|&j| g.x(j).abs() <= 2.0) {
                let want = free_kernel(&c, g.x(i), g.x(j), tau);
                worst = worst.max((four.get(i, j) - want).norm() / want.norm());
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn flat_mode_kernel_is_free_times_phase() {
        let geom = flat(12.0);
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-10.0, 10.0, 201).unwrap();
        let opts = SliceOptions { delta: 0.1, ..Default::default() };
        let k0 = reduced_path_propagator(&geom, &c, 0, &g, 1.0, 3, opts).unwrap();
        let k2 = reduced_path_propagator(&geom, &c, 2, &g, 1.0, 3, opts).unwrap();
        let phase = (-I * Complex64::new(1.0, -0.1) * mode_energy(1.0, 1.0, 2)).exp();
        for idx in [0usize, 5000, 20100, 40400] {
            assert!((k0.values[idx] * phase - k2.values[idx]).norm() < 1e-12 * (1.0 + k2.values[idx].norm()));
        }
    }

    #[test]
    fn composed_kernel_matches_regulated_pde() {
        let geom = TubeGeometry::new(RadiusProfile::tanh_step(0.1).unwrap(), -12.0, 12.0).unwrap();
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-10.0, 10.0, 401).unwrap();
        let (t, n, delta) = (1.0, 8, 0.1);
        let opts = SliceOptions { delta, ..Default::default() };
        let kk = reduced_path_propagator(&geom, &c, 1, &g, t, n, opts).unwrap();
        let psi0: Vec<Complex64> = g.points().iter().map(|&x| Complex64::new(-(x * x) / 2.0, 0.5 * x).exp()).collect();
        let via_kernel = kk.apply(&psi0).unwrap();
        // Regulated CN reference on a finer time step.
        let sub = 400;
        let e = FibreEnergy::Mode(1).value(&c);
        let tau = Complex64::new(t / sub as f64, -delta * t / sub as f64);
        let h = crate::pde::Tridiagonal::plain(c.kinetic(), g.dx, &crate::pde::reduced_potential(&geom, &c, &g, e, 0.0, true));
        let cn = crate::pde::CnStepper::with_tau(h, tau, c.hbar).unwrap();
        let mut psi = psi0.clone();
        let mut scratch = Vec::new();
        for _ in 0..sub {
            cn.step(&mut psi, &mut scratch);
        }
        let num: f64 = via_kernel.iter().zip(&psi).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = psi.iter().map(|v| v.norm_sqr()).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn flat_mode_sum_matches_cylinder_images() {
        let geom = flat(12.0);
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-10.0, 10.0, 401).unwrap();
        let opts = SliceOptions { delta: 0.2, ..Default::default() };
        let ends = Endpoints { x_f: 0.5, phi_f: 0.7, x_0: 0.0, phi_0: 0.0 };
        let got = mode_sum_propagator(&geom, &c, ends, &g, 1.0, 2, 12, opts, Some(1e-6)).unwrap();
        let want = flat_cylinder_kernel(&c, 1.0, ends, Complex64::new(1.0, -0.2), 4);
        assert!((got.value - want).norm() < 1e-4 * want.norm(), "{} vs {want}", got.value);
        // Orthonormality recovers one mode.
        let n_phi = 64;
        let k = 3;
        let ms = ModeSumPropagator::new(&geom, &c, &g, 1.0, 2, 6, opts).unwrap();
        let mut proj = Complex64::new(0.0, 0.0);
        for j in 0..n_phi {
            let phi = 2.0 * PI * j as f64 / n_phi as f64;
            let e = Endpoints { phi_f: phi, ..ends };
            proj += mode_function(k, phi).conj() * ms.eval(e).unwrap().value * (2.0 * PI / n_phi as f64);
        }
        let kk = ms.kernel(k).unwrap();
        let direct = mode_function(k, 0.0).conj() * kk.get(kk.node_index(0.5).unwrap(), kk.node_index(0.0).unwrap());
        assert!((proj - direct).norm() < 1e-10 * direct.norm());
        let bad = Endpoints { x_f: 0.51, ..ends };
        assert!(mode_sum_propagator(&geom, &c, bad, &g, 1.0, 2, 2, opts, None).is_err());
    }

    #[test]
    fn brute_force_single_slice_and_budget() {
        let geom = TubeGeometry::new(RadiusProfile::tanh_step(0.2).unwrap(), -5.0, 5.0).unwrap();
        let c = PhysicsConstants::natural();
        let lat = Lattice::new(XGrid::centered(0.0, 0.15, 7).unwrap(), 8);
        let ends = Endpoints { x_f: 0.3, phi_f: 0.4, x_0: 0.0, phi_0: 0.1 };
        let bf = brute_force_full(&geom, &c, ends, 0.25, 1, &lat, PathContext::Static, 0.2).unwrap();
        let direct =
            short_time_full(&geom, &c, 0.3, 0.4, 0.0, 0.1, SliceTime::regulated(0.25, 0.2), &StepContext::STATIC).unwrap();
        assert_eq!(bf, direct);
        let small = lat.with_budget(1000);
        assert!(matches!(
            brute_force_full(&geom, &c, ends, 1.0, 4, &small, PathContext::Static, 0.2),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn brute_force_matches_explicit_enumeration() {
        let geom = TubeGeometry::new(RadiusProfile::tanh_step(0.2).unwrap(), -5.0, 5.0).unwrap();
        let c = PhysicsConstants::natural();
        let xg = XGrid::centered(0.0, 0.3, 3).unwrap();
        let lat = Lattice::new(xg, 4);
        let ends = Endpoints { x_f: 0.2, phi_f: 0.4, x_0: -0.1, phi_0: 0.0 };
        let dt = SliceTime::regulated(0.2, 0.2);
        let got = brute_force_full(&geom, &c, ends, 0.4, 2, &lat, PathContext::Static, 0.2).unwrap();
        let w = trapezoid_weights(&xg);
        let mut want = Complex64::new(0.0, 0.0);
        for i in 0..3 {
            for j in 0..4 {
                let (x, p) = (xg.x(i), j as f64 * PI / 2.0);
                let s = StepContext::STATIC;
                want += short_time_full(&geom, &c, 0.2, 0.4, x, p, dt, &s).unwrap()
                    * short_time_full(&geom, &c, x, p, -0.1, 0.0, dt, &s).unwrap()
                    * w[i]
                    * (PI / 2.0)
                    * geom.profile.b(x);
            }
        }
        assert!((got - want).norm() < 1e-12 * want.norm());
    }

    #[test]
    fn stationary_phase_tracks_discrete_action() {
        // Quadratic action: the sliced integral is Gaussian, so its phase is
        // S_cl/hbar plus an hbar-independent prefactor phase.
        let omega = 1.0;
        let (x0, xf, t, n) = (-0.5, 0.5, 0.5, 4);
        let eps = t / n as f64;
        let mut offsets = Vec::new();
        for hbar in [0.4, 0.2, 0.1] {
            let c = PhysicsConstants::new(1.0, hbar, 0.0).unwrap().with_potential(Potential::harmonic(1.0, omega));
            let geom = flat(12.0);
            let g = XGrid::new(-8.0, 8.0, 1601).unwrap();
            let opts = SliceOptions { delta: 0.002, ..Default::default() };
            let one = mode_step_matrix(&geom, &c, 0, &g, eps, opts).unwrap();
            // Propagate the column of x0 rather than composing full matrices.
            let j0 = one.node_index(x0).unwrap();
            let mut col: Vec<Complex64> = (0..g.n).map(|i| one.get(i, j0)).collect();
            for _ in 1..n {
                col = one.apply(&col).unwrap();
            }
            let kf = col[one.node_index(xf).unwrap()];
            // Stationary discrete path of the later-point action.
            let a = 1.0 / eps;
            let diag = 2.0 / eps - eps * omega * omega;
            // n - 1 interior unknowns, symmetric tridiagonal with off-diagonal -a.
            let m = n - 1;
            let mut rhs = vec![0.0; m];
            rhs[0] += a * x0;
            rhs[m - 1] += a * xf;
            let mut cp = vec![0.0; m];
            let mut dp = vec![0.0; m];
            for i in 0..m {
                let piv = diag - if i > 0 { -a * cp[i - 1] } else { 0.0 };
                cp[i] = -a / piv;
                dp[i] = (rhs[i] - if i > 0 { -a * dp[i - 1] } else { 0.0 }) / piv;
            }
            let mut xs = vec![0.0; m];
            for i in (0..m).rev() {
                xs[i] = dp[i] - if i + 1 < m { cp[i] * xs[i + 1] } else { 0.0 };
            }
            let mut path = vec![x0];
            path.extend(xs);
            path.push(xf);
            let s = semiclassical_action(&DiscretePath::new(eps, path).unwrap(), &geom, &c, 0.0, None, false).unwrap();
            let off = (kf * (-I * s / hbar).exp()).arg();
            offsets.push(off);
        }
        // The residual phase is O(hbar^0): it does not grow like 1/hbar.
        let spread = offsets.iter().fold(0.0f64, |a, b| a.max((b - offsets[0]).abs()));
        assert!(spread < 0.05, "{offsets:?}");
    }

    #[test]
    fn convergence_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let rows = [
            ConvergenceRow { n_slices: 2, n_x: 10, n_phi: 0, eps: 0.5, error: 0.1 },
            ConvergenceRow { n_slices: 4, n_x: 10, n_phi: 0, eps: 0.25, error: 0.025 },
        ];
        write_convergence_csv(&p, &rows).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "N,n_x,n_phi,eps,error,slope_estimate");
        assert!(lines[1].ends_with(','));
        assert!(lines[2].ends_with("2.000000000000e0"));
    }
}
