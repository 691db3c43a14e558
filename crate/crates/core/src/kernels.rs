//! Pointwise physics: classical and quantum effective potentials, capacity,
//! short-time propagators and discrete actions.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{curvature_of, reduce_angle, taylor_sigma, Jet, RadiusPairing, RadiusProfile, TubeGeometry};
use crate::quadrature::{extrapolate_regulator, SmoothWindow, REGULATOR_DELTAS};
use crate::spectral::mode_energy;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Polynomial scalar potential `V0(x) = sum c_n x^n`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Potential {
    #[serde(default)]
    pub coefficients: Vec<f64>,
}

impl Potential {
    pub fn zero() -> Self {
        Potential { coefficients: Vec::new() }
    }

    /// `m omega^2 x^2 / 2`
    pub fn harmonic(mass: f64, omega: f64) -> Self {
        Potential { coefficients: vec![0.0, 0.0, 0.5 * mass * omega * omega] }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.coefficients.iter().enumerate().skip(1).rev().fold(0.0, |acc, (n, c)| acc * x + n as f64 * c)
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|&c| c == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConstants {
    pub mass: f64,
    pub hbar: f64,
    #[serde(default)]
    pub xi: f64,
    #[serde(default)]
    pub v0: Potential,
}

impl PhysicsConstants {
    pub fn new(mass: f64, hbar: f64, xi: f64) -> Result<Self> {
        let c = PhysicsConstants { mass, hbar, xi, v0: Potential::zero() };
        c.validate()?;
        Ok(c)
    }

    /// `m = hbar = 1`, `xi = 0`, no potential.
    pub fn natural() -> Self {
        PhysicsConstants { mass: 1.0, hbar: 1.0, xi: 0.0, v0: Potential::zero() }
    }

    pub fn with_potential(mut self, v0: Potential) -> Self {
        self.v0 = v0;
        self
    }

    pub fn with_xi(mut self, xi: f64) -> Self {
        self.xi = xi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::param("mass", "must be positive and finite"));
        }
        if !(self.hbar > 0.0 && self.hbar.is_finite()) {
            return Err(Error::param("hbar", "must be positive and finite"));
        }
        if !self.xi.is_finite() {
            return Err(Error::param("xi", "must be finite"));
        }
        Ok(())
    }

    /// `hbar^2 / 2m`
    pub fn kinetic(&self) -> f64 {
        self.hbar * self.hbar / (2.0 * self.mass)
    }
}

/// Slice duration with an optional convergence regulator, `tau = eps (1 - i delta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceTime {
    pub eps: f64,
    pub delta: f64,
}

impl SliceTime {
    pub fn real(eps: f64) -> Self {
        SliceTime { eps, delta: 0.0 }
    }

    pub fn regulated(eps: f64, delta: f64) -> Self {
        SliceTime { eps, delta }
    }

    pub fn tau(&self) -> Complex64 {
        Complex64::new(self.eps, -self.eps * self.delta)
    }

    fn check(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::param("eps", format!("slice time must be positive, got {}", self.eps)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::param("delta", "regulator must be non-negative"));
        }
        Ok(())
    }
}

/// Where along a slice the potential terms of a mode kernel are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPoint {
    /// The later point `x_n`.
    #[default]
    Later,
    Earlier,
    Midpoint,
}

impl EvalPoint {
    pub fn select(&self, later: f64, earlier: f64) -> f64 {
        match self {
            EvalPoint::Later => later,
            EvalPoint::Earlier => earlier,
            EvalPoint::Midpoint => 0.5 * (later + earlier),
        }
    }
}

/// History values entering one slice `t_{n-1} -> t_n`.
///
/// The world function and curvature use the metric at `eta_prev`; measures,
/// `V_cl` and `Delta V_eff` use `eta`; `dlnb_dt` is `d ln b / dt` at the later point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepContext {
    pub eta_prev: f64,
    pub eta: f64,
    pub dlnb_dt: f64,
}

impl StepContext {
    pub const STATIC: StepContext = StepContext { eta_prev: 0.0, eta: 0.0, dlnb_dt: 0.0 };
}

/// `S = d ln b - d ln ell`
pub fn capacity_s(geom: &TubeGeometry, x: f64, ell: f64, d: u32) -> Result<f64> {
    if !(ell > 0.0) {
        return Err(Error::param("ell", "cell scale must be positive"));
    }
    geom.check_domain(x)?;
    Ok(d as f64 * (geom.profile.b(x).ln() - ell.ln()))
}

/// `Delta V_eff` in terms of `b'/b` and `b''/b`.
pub fn delta_v_from_jet(jet: &Jet, c: &PhysicsConstants, d: u32) -> f64 {
    let d = d as f64;
    let u = jet.log_slope();
    let w = jet.curvature_ratio();
    c.kinetic() * d * (((d - 2.0) / 4.0 + c.xi * (1.0 - d)) * u * u + 0.5 * (1.0 - 4.0 * c.xi) * w)
}

/// `d Delta V_eff / dx` from the closed-form jet.
pub fn delta_v_slope_from_jet(jet: &Jet, c: &PhysicsConstants, d: u32) -> f64 {
    let d = d as f64;
    let u = jet.log_slope();
    let w = jet.curvature_ratio();
    let du = w - u * u;
    let dw = jet.d3 / jet.b - u * w;
    c.kinetic() * d * (((d - 2.0) / 4.0 + c.xi * (1.0 - d)) * 2.0 * u * du + 0.5 * (1.0 - 4.0 * c.xi) * dw)
}

pub fn delta_v_eff_from_b(geom: &TubeGeometry, c: &PhysicsConstants, x: f64, d: u32) -> Result<f64> {
    geom.check_domain(x)?;
    Ok(delta_v_from_jet(&geom.profile.jet(x), c, d))
}

/// Capacity function fed to the S-form of the quantum correction.
pub enum Capacity<'a> {
    /// `S = d ln b(x, eta) - d ln ell`, differentiated in closed form.
    LogRadius { profile: &'a RadiusProfile, d: u32, ell: f64, eta: f64 },
    /// Arbitrary `S(x)`, differentiated by central differences with step [`CAPACITY_FD_STEP`].
    Custom(&'a dyn Fn(f64) -> f64),
}

pub const CAPACITY_FD_STEP: f64 = 1e-4;

impl Capacity<'_> {
    /// `(S', S'')`
    pub fn derivatives(&self, x: f64) -> (f64, f64) {
        match self {
            Capacity::LogRadius { profile, d, eta, .. } => {
                let j = profile.jet_at(x, *eta);
                let u = j.log_slope();
                let d = *d as f64;
                (d * u, d * (j.curvature_ratio() - u * u))
            }
            Capacity::Custom(f) => {
                let h = CAPACITY_FD_STEP;
                let (p, z, m) = (f(x + h), f(x), f(x - h));
                ((p - m) / (2.0 * h), (p - 2.0 * z + m) / (h * h))
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Capacity::LogRadius { profile, d, ell, eta } => *d as f64 * (profile.b_at(x, *eta).ln() - ell.ln()),
            Capacity::Custom(f) => f(x),
        }
    }
}

/// `(hbar^2/8m) [(1 - 4 xi (d+1)/d) S'^2 + 2 (1 - 4 xi) S'']`
pub fn delta_v_eff_from_s(s: &Capacity<'_>, c: &PhysicsConstants, x: f64, d: u32) -> f64 {
    let (s1, s2) = s.derivatives(x);
    let df = d as f64;
    c.hbar * c.hbar / (8.0 * c.mass) * ((1.0 - 4.0 * c.xi * (df + 1.0) / df) * s1 * s1 + 2.0 * (1.0 - 4.0 * c.xi) * s2)
}

/// `V0(x) + E_phi / b^2`
pub fn classical_effective_potential(geom: &TubeGeometry, c: &PhysicsConstants, x: f64, e_phi: f64) -> f64 {
    let b = geom.profile.b(x);
    c.v0.value(x) + e_phi / (b * b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectivePotentialTerms {
    pub x: f64,
    pub v_cl: f64,
    pub delta_v: f64,
    pub e_phi: f64,
}

impl EffectivePotentialTerms {
    pub fn at(geom: &TubeGeometry, c: &PhysicsConstants, x: f64, e_phi: f64, eta: f64) -> Self {
        let j = geom.profile.jet_at(x, eta);
        EffectivePotentialTerms {
            x,
            v_cl: c.v0.value(x) + e_phi / (j.b * j.b),
            delta_v: delta_v_from_jet(&j, c, geom.d),
            e_phi,
        }
    }

    pub fn total(&self) -> f64 {
        self.v_cl + self.delta_v
    }
}

/// `sqrt(m / (2 pi i hbar tau))` on the principal branch.
pub fn free_prefactor(c: &PhysicsConstants, tau: Complex64) -> Complex64 {
    (c.mass / (2.0 * PI * I * c.hbar * tau)).sqrt()
}

/// Full short-time propagator from `(x, phi)` to `(x', phi')`, summed over
/// windings `|w| <= w_max` around the reduced angle.
#[allow(clippy::too_many_arguments)]
pub fn short_time_full(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    x_later: f64,
    phi_later: f64,
    x_earlier: f64,
    phi_earlier: f64,
    dt: SliceTime,
    ctx: &StepContext,
) -> Result<Complex64> {
    dt.check()?;
    geom.check_domain(x_later)?;
    geom.check_domain(x_earlier)?;
    let (reduced, _) = reduce_angle(phi_later - phi_earlier);
    let tau = dt.tau();
    let p = &geom.profile;
    let bbar2 = p.b_at(x_later, ctx.eta_prev) * p.b_at(x_earlier, ctx.eta_prev);
    let mut acc = Complex64::new(0.0, 0.0);
    let wm = geom.w_max as i64;
    for w in -wm..=wm {
        let th = reduced + 2.0 * PI * w as f64;
        let s = taylor_sigma(p, x_earlier, x_later, th, ctx.eta_prev, RadiusPairing::Explicit(bbar2));
        acc += (I * c.mass * s / (c.hbar * tau)).exp();
    }
    Ok(full_prefactor(geom, c, x_later, tau, ctx) * acc)
}

/// Prefactor and potential phase of the full kernel at the later point.
pub fn full_prefactor(geom: &TubeGeometry, c: &PhysicsConstants, x_later: f64, tau: Complex64, ctx: &StepContext) -> Complex64 {
    let jet = geom.profile.jet_at(x_later, ctx.eta_prev);
    let r = curvature_of(&jet);
    let d = geom.d as f64;
    let pot = Complex64::new(c.kinetic() * (c.xi - 1.0 / 3.0) * r + c.v0.value(x_later), -0.5 * c.hbar * d * ctx.dlnb_dt);
    let pre = free_prefactor(c, tau).powi(2 * geom.d as i32);
    pre * (-I * tau / c.hbar * pot).exp()
}

/// Options for the mode kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeKernelOptions {
    pub eval: EvalPoint,
    pub include_delta_v: bool,
}

impl Default for ModeKernelOptions {
    fn default() -> Self {
        ModeKernelOptions { eval: EvalPoint::Later, include_delta_v: true }
    }
}

/// Potential felt by mode `k` at `x`: `V0 + hbar^2 k^2/(2 m b^2) [+ Delta V_eff]`, with `b = b(x, eta)`.
pub fn mode_potential(geom: &TubeGeometry, c: &PhysicsConstants, k: i64, x: f64, eta: f64, include_delta_v: bool) -> f64 {
    let t = EffectivePotentialTerms::at(geom, c, x, mode_energy(c.hbar, c.mass, k), eta);
    if include_delta_v {
        t.total()
    } else {
        t.v_cl
    }
}

/// Mode-`k` short-time kernel from `x` to `x'`.
#[allow(clippy::too_many_arguments)]
pub fn short_time_mode_with(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    x_later: f64,
    x_earlier: f64,
    dt: SliceTime,
    ctx: &StepContext,
    opts: ModeKernelOptions,
) -> Result<Complex64> {
    dt.check()?;
    geom.check_domain(x_later)?;
    geom.check_domain(x_earlier)?;
    let tau = dt.tau();
    let xe = opts.eval.select(x_later, x_earlier);
    let v = mode_potential(geom, c, k, xe, ctx.eta, opts.include_delta_v);
    let dx = x_later - x_earlier;
    Ok(free_prefactor(c, tau) * (I * c.mass * dx * dx / (2.0 * c.hbar * tau) - I * tau / c.hbar * v).exp())
}

pub fn short_time_mode(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    x_later: f64,
    x_earlier: f64,
    dt: SliceTime,
    ctx: &StepContext,
) -> Result<Complex64> {
    short_time_mode_with(geom, c, k, x_later, x_earlier, dt, ctx, ModeKernelOptions::default())
}

/// Uniformly sliced path `x_0, ..., x_N` with `t_n = n eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    pub eps: f64,
    pub x: Vec<f64>,
}

impl DiscretePath {
    pub fn new(eps: f64, x: Vec<f64>) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if x.len() < 2 {
            return Err(Error::param("path", "need at least one slice (two points)"));
        }
        Ok(DiscretePath { eps, x })
    }

    pub fn slices(&self) -> usize {
        self.x.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.eps * self.slices() as f64
    }

    pub fn reversed(&self) -> Self {
        DiscretePath { eps: self.eps, x: self.x.iter().rev().copied().collect() }
    }
}

/// Discrete reduced action. The potential of each slice is the trapezoid
/// average of its endpoints, which keeps the action invariant under time
/// reversal. `etas[n]` supplies the history value at `x_n` when present.
pub fn semiclassical_action(
    path: &DiscretePath,
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    e_phi: f64,
    etas: Option<&[f64]>,
    include_delta_v: bool,
) -> Result<f64> {
    if path.x.len() < 2 {
        return Err(Error::param("path", "need at least one slice"));
    }
    if let Some(e) = etas {
        if e.len() != path.x.len() {
            return Err(Error::param("etas", "one history value per path point"));
        }
    }
    let pot = |n: usize| -> Result<f64> {
        let x = path.x[n];
        geom.check_domain(x)?;
        let eta = etas.map_or(0.0, |e| e[n]);
        let t = EffectivePotentialTerms::at(geom, c, x, e_phi, eta);
        Ok(if include_delta_v { t.total() } else { t.v_cl })
    };
    let eps = path.eps;
    let mut s = 0.0;
    let mut prev = pot(0)?;
    for n in 1..path.x.len() {
        let v = (path.x[n] - path.x[n - 1]) / eps;
        let cur = pot(n)?;
        s += eps * (0.5 * c.mass * v * v - 0.5 * (prev + cur));
        prev = cur;
    }
    Ok(s)
}

/// `(b(x, eta) / b(x, eta - eps f))^{d/2}`
pub fn history_measure_factor(profile: &RadiusProfile, x: f64, eta: f64, eps: f64, f_value: f64, d: u32) -> f64 {
    if profile.history_coupling().is_none() {
        return 1.0;
    }
    (profile.b_at(x, eta) / profile.b_at(x, eta - eps * f_value)).powf(0.5 * d as f64)
}

/// Result of the regulated Gaussian-moment integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentResidual {
    /// Largest component magnitude, normalized by `2 pi i hbar eps / m`.
    pub residual: f64,
    /// Regulator extrapolation error estimate on the same scale.
    pub extrapolation_error: f64,
}

/// Evaluates `int d^2q' sqrt(g) e^{i m sigma/(hbar tau)} [grad^i sigma grad^j sigma - (i hbar tau/m) g^ij]`
/// around `(x, 0)` for `tau = eps (1 - i delta)`, extrapolated to `delta -> 0`.
///
/// The integral runs over scaled variables `x' = x + s u`, `theta = (s/b) v` with
/// `s = sqrt(hbar eps/m)` and a smooth window in `u` and `v`.
pub fn gaussian_moment_residual(geom: &TubeGeometry, c: &PhysicsConstants, x: f64, eps: f64) -> Result<MomentResidual> {
    gaussian_moment_residual_with(geom, c, x, eps, &SmoothWindow::default(), &REGULATOR_DELTAS)
}

pub fn gaussian_moment_residual_with(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    x: f64,
    eps: f64,
    window: &SmoothWindow,
    deltas: &[f64; 3],
) -> Result<MomentResidual> {
    SliceTime::real(eps).check()?;
    geom.check_domain(x)?;
    let p = &geom.profile;
    let s = (c.hbar * eps / c.mass).sqrt();
    let b0 = p.b(x);
    let nodes = window.nodes();
    // Per-u data: (weight, dx, b', b'_x, P, Q, dP, dQ) at x' = x + s u.
    struct Row {
        w: f64,
        dx: f64,
        bp: f64,
        bp1: f64,
        p: f64,
        q: f64,
        dp: f64,
        dq: f64,
    }
    let mut rows = Vec::with_capacity(nodes.len());
    for &(u, w) in &nodes {
        let xp = x + s * u;
        geom.check_domain(xp)?;
        let jp = p.jet(xp);
        let jm = p.jet(0.5 * (x + xp));
        rows.push(Row {
            w,
            dx: xp - x,
            bp: jp.b,
            bp1: jp.d1,
            p: jm.b * jm.d2,
            q: (jm.b * jm.d1).powi(2),
            dp: jm.d1 * jm.d2 + jm.b * jm.d3,
            dq: 2.0 * jm.b * jm.d1 * (jm.d1 * jm.d1 + jm.b * jm.d2),
        });
    }
    let thetas: Vec<(f64, f64)> = nodes.iter().map(|&(v, w)| (s * v / b0, w)).collect();
    let measure = s * s / b0;
    let ex = extrapolate_regulator(deltas, |delta| {
        let tau = SliceTime::regulated(eps, delta).tau();
        let ht = c.hbar * tau / c.mass;
        let phase_scale = I * c.mass / (c.hbar * tau);
        let iht = I * ht;
        let mut acc = [Complex64::new(0.0, 0.0); 3];
        for r in &rows {
            let (dx, dx2) = (r.dx, r.dx * r.dx);
            let mut row = [Complex64::new(0.0, 0.0); 3];
            let inv_b2 = 1.0 / (r.bp * r.bp);
            for &(th, wv) in &thetas {
                let th2 = th * th;
                let sig = 0.5 * (dx2 + b0 * r.bp * th2 - r.p / 6.0 * dx2 * th2 - r.q / 12.0 * th2 * th2);
                let sx = dx + 0.5 * (b0 * r.bp1 * th2 - r.dp / 12.0 * dx2 * th2 - r.p / 3.0 * dx * th2 - r.dq / 24.0 * th2 * th2);
                let st = b0 * r.bp * th - r.p / 6.0 * dx2 * th - r.q / 6.0 * th2 * th;
                let e = (phase_scale * sig).exp() * wv;
                row[0] += e * (sx * sx - iht);
                row[1] += e * (sx * st * inv_b2);
                row[2] += e * (st * st * inv_b2 * inv_b2 - iht * inv_b2);
            }
            let f = r.w * r.bp * measure;
            for k in 0..3 {
                acc[k] += row[k] * f;
            }
        }
        let z = 2.0 * PI * I * ht;
        Ok(acc.iter().map(|a| a / z).collect())
    })?;
    let residual = ex.value.iter().map(|v| v.norm()).fold(0.0, f64::max);
    Ok(MomentResidual { residual, extrapolation_error: ex.error })
}
