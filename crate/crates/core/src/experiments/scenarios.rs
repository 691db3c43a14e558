//! Parameter blocks and drivers for each scenario kind.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::short_time::{full_kernel_sector_action, mode_kernel_action};
use super::{compare_fields, Diagnostic, ExperimentSpec, FieldNorm, Outcome, Scenario};
use crate::error::{Error, Result};
use crate::geometry::{sigma_gradient_norm, world_function_geodesic, world_function_taylor, RadiusPairing, WorldPointPair};
use crate::geometry::{HistoryCoupling, RadiusProfile, TubeGeometry};
use crate::history::{cancellation_product, HistoryContext, Polynomial};
use crate::kernels::{
    delta_v_eff_from_b, delta_v_eff_from_s, gaussian_moment_residual, Capacity, DiscretePath, PhysicsConstants, Potential,
};
use crate::pde::{
    ehrenfest_residual, evolve_full_2d, evolve_full_2d_observed, evolve_full_sector, evolve_reduced_1d, evolve_reduced_1d_observed,
    evolve_time_dependent_observed, FibreEnergy, TimeDependence, BOUNDARY_TOLERANCE,
};
use crate::quadrature::SmoothWindow;
use crate::sliced::{
    brute_force_full, fit_convergence_order, free_kernel, mehler_kernel, mode_step_matrix, reduced_mode_sum_brute_force,
    write_convergence_csv, ConvergenceRow, Endpoints, Lattice, PathContext, SliceOptions, DEFAULT_PATH_BUDGET,
    KINETIC_PHASE_LIMIT,
};
use crate::spectral::{mode_function, project_mode, PhiGrid, WaveField, XGrid};

/// Gaussian packet `exp(-(x - x0)^2 / (4 sigma^2) + i p0 x / hbar)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Packet {
    pub x0: f64,
    pub sigma: f64,
    #[serde(default)]
    pub p0: f64,
}

impl Packet {
    fn eval(&self, c: &PhysicsConstants, x: f64) -> Complex64 {
        let z = x - self.x0;
        Complex64::new(-z * z / (4.0 * self.sigma * self.sigma), self.p0 * x / c.hbar).exp()
    }

    /// Distance from the centre at which `|psi|` falls to the boundary tolerance.
    fn reach(&self) -> f64 {
        2.0 * self.sigma * (1.0 / BOUNDARY_TOLERANCE).ln().sqrt()
    }
}

/// Mode-projected full 2D evolution against the reduced 1D equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCompare {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_phi: usize,
    pub dt: f64,
    pub t_final: f64,
    pub k: i64,
    pub packet: Packet,
    /// Repeat with halved `dx` and `dt` and report the ratio of discrepancies.
    #[serde(default = "yes")]
    pub refine: bool,
}

/// Ehrenfest residuals of the projected full evolution, plus a flat harmonic control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ehrenfest {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_phi: usize,
    pub dt: f64,
    pub t_final: f64,
    pub k: i64,
    pub packet: Packet,
    pub control: HarmonicControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicControl {
    pub omega: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub dt: f64,
    pub t_final: f64,
    pub x0: f64,
}

/// Composed one-slice kernels against closed forms at complex time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicingConvergence {
    #[serde(default = "minus_ten")]
    pub x_min: f64,
    #[serde(default = "ten")]
    pub x_max: f64,
    pub n_x: usize,
    #[serde(default = "one")]
    pub t_final: f64,
    #[serde(default = "tenth")]
    pub delta: f64,
    pub ns: Vec<usize>,
    #[serde(default = "one")]
    pub omega: f64,
    /// Source points of the kernel columns that are compared.
    #[serde(default = "default_sources")]
    pub sources: Vec<f64>,
    /// Rows with `|x| <= window` enter the error.
    #[serde(default = "two")]
    pub window: f64,
}

/// Full lattice path sum against the mode sum of reduced lattice sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BruteForceEquivalence {
    pub n_slices: usize,
    pub t_final: f64,
    pub lattice_dx: f64,
    pub n_x: usize,
    /// First entry is the base lattice, the last the refinement.
    pub n_phi: Vec<usize>,
    pub delta: f64,
    pub k_max: i64,
    pub x_0: f64,
    pub x_f: Vec<f64>,
    pub delta_phi: Vec<f64>,
    #[serde(default = "default_budget")]
    pub budget: u64,
}

/// History-dependent lattice sums and the cancellation product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEquivalence {
    pub f: Polynomial,
    pub n_slices: usize,
    pub t_final: f64,
    pub lattice_dx: f64,
    pub n_x: usize,
    pub n_phi: usize,
    pub delta: f64,
    pub k_max: i64,
    pub x_0: f64,
    pub x_f: Vec<f64>,
    pub delta_phi: Vec<f64>,
    /// Quadratic coupling used for the cancellation-product study.
    pub cancellation_nu: f64,
    pub cancellation_eps: Vec<f64>,
    pub cancellation_slices: usize,
    #[serde(default = "default_budget")]
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentIdentity {
    pub x: f64,
    pub eps: Vec<f64>,
    pub flat_eps: f64,
}

/// Both forms of the quantum correction on the spec profile, one metric per `xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiScan {
    pub xi: Vec<f64>,
    #[serde(default = "default_dims")]
    pub d: Vec<u32>,
    #[serde(default = "default_ells")]
    pub ell: Vec<f64>,
    #[serde(default = "minus_three")]
    pub x_min: f64,
    #[serde(default = "three")]
    pub x_max: f64,
    #[serde(default = "default_points")]
    pub n_points: usize,
}

/// Both forms of the quantum correction over a list of profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormEquivalence {
    pub profiles: Vec<RadiusProfile>,
    pub xi: Vec<f64>,
    #[serde(default = "default_dims")]
    pub d: Vec<u32>,
    #[serde(default = "default_ells")]
    pub ell: Vec<f64>,
    #[serde(default = "minus_three")]
    pub x_min: f64,
    #[serde(default = "three")]
    pub x_max: f64,
    #[serde(default = "default_points")]
    pub n_points: usize,
}

/// One slice of each kernel applied to a packet against a fine PDE step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortTimeOrder {
    pub k: i64,
    pub packet: Packet,
    pub eps: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
    /// Spacing of the reference grid.
    pub reference_dx: f64,
    pub reference_substeps: usize,
    pub sample_min: f64,
    pub sample_max: f64,
    pub sample_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeDependentUnitarity {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_phi: usize,
    pub k: i64,
    pub packet: Packet,
    pub dt: f64,
    pub steps: usize,
    /// Step sizes for the ablation run; each advances `ablation_time`.
    pub ablation_dt: Vec<f64>,
    pub ablation_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryIdentities {
    pub x_min: f64,
    pub x_max: f64,
    /// Pairs `(x, x', theta)` for the symmetry and gradient checks.
    pub pairs: Vec<[f64; 3]>,
    /// Separation scales for the Taylor-versus-geodesic slope.
    pub h: Vec<f64>,
    /// Base point and direction `(x, dx, dtheta)` scaled by `h`.
    pub direction: [f64; 3],
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn three() -> f64 {
    3.0
}
fn minus_three() -> f64 {
    -3.0
}
fn ten() -> f64 {
    10.0
}
fn minus_ten() -> f64 {
    -10.0
}
fn tenth() -> f64 {
    0.1
}
fn default_sources() -> Vec<f64> {
    vec![-1.0, 0.0, 0.5, 1.5]
}
fn default_budget() -> u64 {
    DEFAULT_PATH_BUDGET as u64
}
fn default_dims() -> Vec<u32> {
    vec![1, 2, 3]
}
fn default_ells() -> Vec<f64> {
    vec![0.1, 1.0, 10.0]
}
fn default_points() -> usize {
    101
}
fn default_fd_step() -> f64 {
    1e-4
}

fn spacing(x_min: f64, x_max: f64, n: usize) -> f64 {
    (x_max - x_min) / (n.max(2) - 1) as f64
}

fn push(d: &mut Vec<Diagnostic>, pointer: &str, message: impl Into<String>) {
    d.push(Diagnostic { pointer: format!("/scenario/{pointer}"), message: message.into() });
}

fn check_range(d: &mut Vec<Diagnostic>, x_min: f64, x_max: f64) {
    if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
        push(d, "x_min", format!("need finite x_min < x_max, got [{x_min}, {x_max}]"));
    }
}

fn check_positive(d: &mut Vec<Diagnostic>, name: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        push(d, name, "must be positive and finite");
    }
}

fn check_count(d: &mut Vec<Diagnostic>, name: &str, n: usize, min: usize) {
    if n < min {
        push(d, name, format!("must be at least {min}"));
    }
}

fn check_kinetic(d: &mut Vec<Diagnostic>, pointer: &str, c: &PhysicsConstants, dx: f64, eps: f64) {
    if c.validate().is_err() || !(eps > 0.0) {
        return;
    }
    let ratio = c.mass * dx * dx / (2.0 * c.hbar * eps);
    if ratio > KINETIC_PHASE_LIMIT {
        push(
            d,
            pointer,
            format!("kinetic phase rule violated: m dx^2 / (2 hbar eps) = {ratio:.4} exceeds pi/3 (dx = {dx}, eps = {eps})"),
        );
    }
}

fn check_packet(d: &mut Vec<Diagnostic>, p: &Packet, x_min: f64, x_max: f64) {
    if !(p.sigma > 0.0 && p.sigma.is_finite()) {
        push(d, "packet/sigma", "must be positive and finite");
        return;
    }
    let room = (p.x0 - x_min).min(x_max - p.x0);
    if room < p.reach() {
        push(
            d,
            "packet/x0",
            format!(
                "boundary width rule violated: packet centre is {room:.3} from the edge, needs {:.3} ({:.2} sigma)",
                p.reach(),
                p.reach() / p.sigma
            ),
        );
    }
}

fn check_fit(d: &mut Vec<Diagnostic>, name: &str, v: &[f64]) {
    if v.len() < 3 {
        push(d, name, "need at least three values for an order fit");
    }
    if v.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        push(d, name, "values must be positive and finite");
    }
}

pub(super) fn validate_scenario(spec: &ExperimentSpec, d: &mut Vec<Diagnostic>) {
    let c = &spec.constants;
    match &spec.scenario {
        Scenario::OracleCompare(s) => {
            check_range(d, s.x_min, s.x_max);
            check_count(d, "n_x", s.n_x, 8);
            check_count(d, "n_phi", s.n_phi, 1);
            check_positive(d, "dt", s.dt);
            check_positive(d, "t_final", s.t_final);
            check_packet(d, &s.packet, s.x_min, s.x_max);
        }
        Scenario::Ehrenfest(s) => {
            check_range(d, s.x_min, s.x_max);
            check_count(d, "n_x", s.n_x, 8);
            check_count(d, "n_phi", s.n_phi, 1);
            check_positive(d, "dt", s.dt);
            check_positive(d, "t_final", s.t_final);
            check_packet(d, &s.packet, s.x_min, s.x_max);
            let h = &s.control;
            if !(h.x_min < h.x_max) {
                push(d, "control/x_min", "need x_min < x_max");
            }
            check_count(d, "control/n_x", h.n_x, 8);
            check_positive(d, "control/dt", h.dt);
            check_positive(d, "control/omega", h.omega);
            let p = Packet { x0: h.x0, sigma: (c.hbar / (2.0 * c.mass * h.omega.abs().max(1e-300))).sqrt(), p0: 0.0 };
            let room = (p.x0 - h.x_min).min(h.x_max - p.x0);
            if room < p.reach() {
                push(d, "control/x0", format!("boundary width rule violated: {room:.3} from the edge, needs {:.3}", p.reach()));
            }
        }
        Scenario::SlicingConvergence(s) => {
            check_range(d, s.x_min, s.x_max);
            check_count(d, "n_x", s.n_x, 3);
            check_positive(d, "t_final", s.t_final);
            check_count(d, "ns", s.ns.len(), 3);
            if s.ns.contains(&0) {
                push(d, "ns", "slice counts must be positive");
            }
            if !(s.delta >= 0.0) {
                push(d, "delta", "must be non-negative");
            }
            if let Some(&n) = s.ns.iter().max() {
                if n > 0 {
                    check_kinetic(d, "n_x", c, spacing(s.x_min, s.x_max, s.n_x), s.t_final / n as f64);
                }
            }
            if s.sources.iter().any(|&x| x < s.x_min || x > s.x_max) {
                push(d, "sources", "source points must lie on the grid range");
            }
        }
        Scenario::BruteForceEquivalence(s) => {
            check_count(d, "n_slices", s.n_slices, 1);
            check_positive(d, "t_final", s.t_final);
            check_positive(d, "lattice_dx", s.lattice_dx);
            check_count(d, "n_x", s.n_x, 1);
            check_count(d, "n_phi", s.n_phi.len(), 1);
            if s.n_slices > 0 {
                check_kinetic(d, "lattice_dx", c, s.lattice_dx, s.t_final / s.n_slices as f64);
            }
            if s.x_f.is_empty() || s.delta_phi.is_empty() {
                push(d, "x_f", "need at least one endpoint");
            }
        }
        Scenario::HistoryEquivalence(s) => {
            check_count(d, "n_slices", s.n_slices, 1);
            check_positive(d, "t_final", s.t_final);
            check_positive(d, "lattice_dx", s.lattice_dx);
            if s.n_slices > 0 {
                check_kinetic(d, "lattice_dx", c, s.lattice_dx, s.t_final / s.n_slices as f64);
            }
            check_fit(d, "cancellation_eps", &s.cancellation_eps);
            check_count(d, "cancellation_slices", s.cancellation_slices, 1);
            if spec.profile.history_coupling().is_none() {
                d.push(Diagnostic { pointer: "/profile".into(), message: "history scenario needs a history_coupling".into() });
            }
            if s.x_f.is_empty() || s.delta_phi.is_empty() {
                push(d, "x_f", "need at least one endpoint");
            }
        }
        Scenario::MomentIdentity(s) => {
            check_fit(d, "eps", &s.eps);
            check_positive(d, "flat_eps", s.flat_eps);
        }
        Scenario::XiScan(s) => {
            check_range(d, s.x_min, s.x_max);
            check_count(d, "n_points", s.n_points, 1);
            check_count(d, "xi", s.xi.len(), 1);
        }
        Scenario::FormEquivalence(s) => {
            check_range(d, s.x_min, s.x_max);
            check_count(d, "n_points", s.n_points, 1);
            check_count(d, "profiles", s.profiles.len(), 1);
        }
        Scenario::ShortTimeOrder(s) => {
            check_range(d, s.x_min, s.x_max);
            check_fit(d, "eps", &s.eps);
            check_positive(d, "reference_dx", s.reference_dx);
            check_count(d, "reference_substeps", s.reference_substeps, 1);
            check_positive(d, "sample_step", s.sample_step);
            check_packet(d, &s.packet, s.x_min, s.x_max);
            if !(s.sample_min >= s.x_min && s.sample_max <= s.x_max && s.sample_min <= s.sample_max) {
                push(d, "sample_min", "sample range must lie inside the grid range");
            }
        }
        Scenario::TimeDependentUnitarity(s) => {
            check_range(d, s.x_min, s.x_max);
            check_count(d, "n_x", s.n_x, 8);
            check_count(d, "n_phi", s.n_phi, 1);
            check_positive(d, "dt", s.dt);
            check_count(d, "steps", s.steps, 1);
            check_fit(d, "ablation_dt", &s.ablation_dt);
            check_positive(d, "ablation_time", s.ablation_time);
            check_packet(d, &s.packet, s.x_min, s.x_max);
            if spec.profile.history_coupling().is_none() {
                d.push(Diagnostic { pointer: "/profile".into(), message: "time dependence needs a history_coupling".into() });
            }
        }
        Scenario::GeometryIdentities(s) => {
            check_range(d, s.x_min, s.x_max);
            check_count(d, "pairs", s.pairs.len(), 1);
            check_fit(d, "h", &s.h);
            check_positive(d, "fd_step", s.fd_step);
        }
    }
}

pub(super) fn run_scenario(spec: &ExperimentSpec, out: &mut Outcome) -> Result<()> {
    let c = &spec.constants;
    let p = spec.profile;
    match &spec.scenario {
        Scenario::OracleCompare(s) => oracle_compare(s, p, c, out),
        Scenario::Ehrenfest(s) => ehrenfest(s, p, c, out),
        Scenario::SlicingConvergence(s) => slicing_convergence(s, c, out),
        Scenario::BruteForceEquivalence(s) => brute_force_equivalence(s, p, c, out),
        Scenario::HistoryEquivalence(s) => history_equivalence(s, p, c, out),
        Scenario::MomentIdentity(s) => moment_identity(s, p, c, out),
        Scenario::XiScan(s) => xi_scan(s, p, c, out),
        Scenario::FormEquivalence(s) => form_equivalence(s, c, out),
        Scenario::ShortTimeOrder(s) => short_time_order(s, p, c, out),
        Scenario::TimeDependentUnitarity(s) => time_dependent_unitarity(s, p, c, out),
        Scenario::GeometryIdentities(s) => geometry_identities(s, p, out),
    }
}

fn steps_for(t: f64, dt: f64) -> usize {
    (t / dt).round().max(1.0) as usize
}

fn fit_or_nan(points: &[(f64, f64)]) -> f64 {
    fit_convergence_order(points).unwrap_or(f64::NAN)
}

/// Initial full field `Phi_k(phi) b^{-1/2} psi(x)` and its reduced counterpart.
fn initial_pair(geom: &TubeGeometry, c: &PhysicsConstants, g: XGrid, pg: PhiGrid, k: i64, pk: &Packet) -> (WaveField, WaveField) {
    let full = WaveField::from_fn_2d(g, pg, |x, phi| mode_function(k, phi) * pk.eval(c, x) / geom.profile.b(x).sqrt());
    let reduced = WaveField::from_fn_1d(g, |x| pk.eval(c, x));
    (full, reduced)
}

fn oracle_compare(s: &OracleCompare, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let geom = TubeGeometry::new(p, s.x_min, s.x_max)?;
    let base = XGrid::new(s.x_min, s.x_max, s.n_x)?;
    let dv_max = base.points().iter().map(|&x| delta_v_eff_from_b(&geom, c, x, geom.d)).try_fold(0.0f64, |m, v| v.map(|v| m.max(v.abs())))?;
    out.set("delta_v_max_abs", dv_max);
    let pg = PhiGrid::new(s.n_phi)?;
    let energy = FibreEnergy::Mode(s.k);
    let run_at = |g: XGrid, dt: f64| -> Result<(f64, f64, WaveField, WaveField)> {
        let steps = steps_for(s.t_final, dt);
        let (full0, red0) = initial_pair(&geom, c, g, pg, s.k, &s.packet);
        let full = evolve_full_2d(&full0, &geom, c, dt, steps)?;
        let projected = project_mode(&full, &geom, s.k)?;
        let with = evolve_reduced_1d(&red0, &geom, c, energy, dt, steps, true)?;
        let without = evolve_reduced_1d(&red0, &geom, c, energy, dt, steps, false)?;
        Ok((compare_fields(&with, &projected, FieldNorm::L2)?, compare_fields(&without, &projected, FieldNorm::L2)?, projected, with))
    };
    let (e_with, e_without, projected, with) = run_at(base, s.dt)?;
    out.set("l2_with_dv", e_with);
    out.set("l2_without_dv", e_without);
    out.set("with_without_ratio", if e_without > 0.0 { e_with / e_without } else if e_with == 0.0 { 0.0 } else { f64::INFINITY });
    let rows: Vec<Vec<f64>> = (0..base.n)
        .map(|i| {
            let (a, b) = (projected.values[i], with.values[i]);
            vec![base.x(i), a.re, a.im, b.re, b.im]
        })
        .collect();
    out.write_csv("fields.csv", "x,projected_re,projected_im,reduced_re,reduced_im", &rows)?;
    if s.refine {
        let fine = XGrid::new(s.x_min, s.x_max, 2 * s.n_x - 1)?;
        let (f_with, f_without, _, _) = run_at(fine, 0.5 * s.dt)?;
        out.set("l2_with_dv_refined", f_with);
        out.set("l2_without_dv_refined", f_without);
        out.set("refinement_ratio", if e_with > 0.0 { f_with / e_with } else { 0.0 });
    }
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn ehrenfest(s: &Ehrenfest, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let geom = TubeGeometry::new(p, s.x_min, s.x_max)?;
    let g = XGrid::new(s.x_min, s.x_max, s.n_x)?;
    let pg = PhiGrid::new(s.n_phi)?;
    let (full0, _) = initial_pair(&geom, c, g, pg, s.k, &s.packet);
    let mut traj = Vec::new();
    let mut obs = |_: usize, f: &WaveField| {
        traj.push(project_mode(f, &geom, s.k)?);
        Ok(())
    };
    evolve_full_2d_observed(&full0, &geom, c, s.dt, steps_for(s.t_final, s.dt), 1, &mut obs)?;
    let e_phi = FibreEnergy::Mode(s.k).value(c);
    let with = ehrenfest_residual(&traj, &geom, c, e_phi, s.dt, true)?;
    let without = ehrenfest_residual(&traj, &geom, c, e_phi, s.dt, false)?;
    let (mw, mo) = (max_abs(&with), max_abs(&without));
    out.set("max_residual_with_dv", mw);
    out.set("max_residual_without_dv", mo);
    out.set("with_without_ratio", if mo > 0.0 { mw / mo } else { f64::INFINITY });
    let rows: Vec<Vec<f64>> =
        with.iter().zip(&without).enumerate().map(|(n, (a, b))| vec![(n + 1) as f64 * s.dt, *a, *b]).collect();
    out.write_csv("residuals.csv", "t,residual_with_dv,residual_without_dv", &rows)?;

    let h = &s.control;
    let hc = c.clone().with_potential(Potential::harmonic(c.mass, h.omega));
    let flat = TubeGeometry::new(RadiusProfile::constant(1.0), h.x_min, h.x_max)?;
    let hg = XGrid::new(h.x_min, h.x_max, h.n_x)?;
    let width = c.hbar / (2.0 * c.mass * h.omega);
    let f0 = WaveField::from_fn_1d(hg, |x| Complex64::new(-(x - h.x0).powi(2) / (4.0 * width), 0.0).exp());
    let mut ctraj = Vec::new();
    let mut cobs = |_: usize, f: &WaveField| {
        ctraj.push(f.clone());
        Ok(())
    };
    evolve_reduced_1d_observed(&f0, &flat, &hc, FibreEnergy::Mode(0), h.dt, steps_for(h.t_final, h.dt), true, 1, &mut cobs)?;
    let r = ehrenfest_residual(&ctraj, &flat, &hc, 0.0, h.dt, true)?;
    out.set("control_max_residual", max_abs(&r));
    Ok(())
}

/// Kernel columns at `sources` after `n` applications of the one-slice matrix.
fn composed_columns(one: &crate::sliced::KernelMatrix, sources: &[usize], n: usize) -> Result<Vec<Vec<Complex64>>> {
    let g = one.grid;
    sources
        .iter()
        .map(|&j| {
            let mut col: Vec<Complex64> = (0..g.n).map(|i| one.get(i, j)).collect();
            for _ in 1..n {
                col = one.apply(&col)?;
            }
            Ok(col)
        })
        .collect()
}

fn slicing_convergence(s: &SlicingConvergence, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let g = XGrid::new(s.x_min, s.x_max, s.n_x)?;
    let geom = TubeGeometry::new(RadiusProfile::constant(1.0), s.x_min, s.x_max)?;
    let free_c = c.clone().with_potential(Potential::zero());
    let harm_c = c.clone().with_potential(Potential::harmonic(c.mass, s.omega));
    let opts = SliceOptions { delta: s.delta, ..Default::default() };
    let tau = Complex64::new(s.t_final, -s.delta * s.t_final);
    let src: Vec<usize> = s
        .sources
        .iter()
        .map(|&x| ((x - g.x_min) / g.dx).round() as usize)
        .collect();
    let rows: Vec<usize> = (0..g.n).filter(|&i| g.x(i).abs() <= s.window).collect();
    let worst = |cols: &[Vec<Complex64>], exact: &dyn Fn(f64, f64) -> Complex64| {
        let mut w: f64 = 0.0;
        for (col, &j) in cols.iter().zip(&src) {
            for &i in &rows {
                let e = exact(g.x(i), g.x(j));
                w = w.max((col[i] - e).norm() / e.norm());
            }
        }
        w
    };
    let mut free_err: f64 = 0.0;
    let mut harm = Vec::new();
    let mut table = Vec::new();
    for &n in &s.ns {
        let eps = s.t_final / n as f64;
        let one = mode_step_matrix(&geom, &free_c, 0, &g, eps, opts)?;
        let fe = worst(&composed_columns(&one, &src, n)?, &|x, xp| free_kernel(&free_c, x, xp, tau));
        free_err = free_err.max(fe);
        let one = mode_step_matrix(&geom, &harm_c, 0, &g, eps, opts)?;
        let he = worst(&composed_columns(&one, &src, n)?, &|x, xp| mehler_kernel(&harm_c, s.omega, x, xp, tau));
        harm.push((eps, he));
        table.push(ConvergenceRow { n_slices: n, n_x: s.n_x, n_phi: 0, eps, error: he });
    }
    out.set("free_max_rel_error", free_err);
    out.set("harmonic_slope", fit_or_nan(&harm));
    let monotone = harm.windows(2).all(|w| w[1].1 < w[0].1);
    out.set("harmonic_monotone", if monotone { 1.0 } else { 0.0 });
    if let Some(dir) = &out.out_dir {
        let path = dir.join(format!("{}_convergence.csv", out.stem));
        write_convergence_csv(&path, &table)?;
        out.artifacts.push(path.display().to_string());
    }
    Ok(())
}

fn endpoint_set(x_0: f64, x_f: &[f64], dphi: &[f64]) -> Vec<Endpoints> {
    x_f.iter().flat_map(|&xf| dphi.iter().map(move |&dp| Endpoints { x_f: xf, phi_f: dp, x_0, phi_0: 0.0 })).collect()
}

fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / a.norm()
}

fn brute_force_equivalence(s: &BruteForceEquivalence, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let half = s.lattice_dx * (s.n_x as f64 - 1.0) / 2.0;
    let reach = s.x_f.iter().fold(s.x_0.abs() + half, |m, x| m.max(x.abs()));
    let geom = TubeGeometry::new(p, -reach - 1.0, reach + 1.0)?;
    let xg = XGrid::centered(s.x_0, s.lattice_dx, s.n_x)?;
    let opts = SliceOptions { delta: s.delta, ..Default::default() };
    let ends = endpoint_set(s.x_0, &s.x_f, &s.delta_phi);
    let mut per_lattice = Vec::new();
    let mut rows = Vec::new();
    // The reduced sums do not depend on the angular lattice.
    let reduced_lat = Lattice::new(xg, 1).with_budget(s.budget as u128);
    let reduced: Vec<_> = ends
        .iter()
        .map(|&e| reduced_mode_sum_brute_force(&geom, c, e, s.t_final, s.n_slices, &reduced_lat, PathContext::Static, s.k_max, opts))
        .collect::<Result<_>>()?;
    for &n_phi in &s.n_phi {
        let lat = Lattice::new(xg, n_phi).with_budget(s.budget as u128);
        let mut worst: f64 = 0.0;
        for (e, r) in ends.iter().zip(&reduced) {
            let full = brute_force_full(&geom, c, *e, s.t_final, s.n_slices, &lat, PathContext::Static, s.delta)?;
            let d = rel(full, r.value);
            worst = worst.max(d);
            rows.push(vec![n_phi as f64, e.x_f, e.phi_f, full.re, full.im, r.value.re, r.value.im, d]);
        }
        out.set(format!("rel_discrepancy_nphi_{n_phi}"), worst);
        per_lattice.push(worst);
    }
    out.set("rel_discrepancy", per_lattice[0]);
    out.set("mode_sum_tail", reduced.iter().fold(0.0f64, |m, r| m.max(r.tail)));
    if per_lattice.len() > 1 {
        out.set("refinement_ratio", per_lattice[per_lattice.len() - 1] / per_lattice[0]);
    }
    out.write_csv("lattice_sums.csv", "n_phi,x_f,delta_phi,full_re,full_im,mode_sum_re,mode_sum_im,rel_discrepancy", &rows)?;
    Ok(())
}

fn history_equivalence(s: &HistoryEquivalence, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let half = s.lattice_dx * (s.n_x as f64 - 1.0) / 2.0;
    let reach = s.x_f.iter().fold(s.x_0.abs() + half, |m, x| m.max(x.abs()));
    let geom = TubeGeometry::new(p, -reach - 1.0, reach + 1.0)?;
    let xg = XGrid::centered(s.x_0, s.lattice_dx, s.n_x)?;
    let lat = Lattice::new(xg, s.n_phi).with_budget(s.budget as u128);
    let opts = SliceOptions { delta: s.delta, ..Default::default() };
    let ends = endpoint_set(s.x_0, &s.x_f, &s.delta_phi);
    let ctx = HistoryContext::new(s.f.clone());
    let (t, n) = (s.t_final, s.n_slices);

    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for &e in &ends {
        let full = brute_force_full(&geom, c, e, t, n, &lat, PathContext::History(&ctx), s.delta)?;
        let red = reduced_mode_sum_brute_force(&geom, c, e, t, n, &lat, PathContext::History(&ctx), s.k_max, opts)?;
        let d = rel(full, red.value);
        worst = worst.max(d);
        rows.push(vec![e.x_f, e.phi_f, full.re, full.im, red.value.re, red.value.im, d]);
    }
    out.set("rel_discrepancy", worst);
    out.write_csv("history_sums.csv", "x_f,delta_phi,full_re,full_im,mode_sum_re,mode_sum_im,rel_discrepancy", &rows)?;

    // f = 1 is ordinary time dependence and must run the identical arithmetic.
    let one = HistoryContext::new(Polynomial::constant(1.0));
    let mut f_one: f64 = 0.0;
    for &e in &ends {
        let a = brute_force_full(&geom, c, e, t, n, &lat, PathContext::History(&one), s.delta)?;
        let b = brute_force_full(&geom, c, e, t, n, &lat, PathContext::TimeDependent, s.delta)?;
        f_one = f_one.max((a - b).norm());
        let a = reduced_mode_sum_brute_force(&geom, c, e, t, n, &lat, PathContext::History(&one), s.k_max, opts)?;
        let b = reduced_mode_sum_brute_force(&geom, c, e, t, n, &lat, PathContext::TimeDependent, s.k_max, opts)?;
        f_one = f_one.max((a.value - b.value).norm());
    }
    out.set("f_one_max_difference", f_one);

    // Zero coupling must reproduce the static sums.
    let base = p.with_history_coupling(HistoryCoupling::linear(0.0));
    let g0 = TubeGeometry { profile: base, ..geom };
    let mut cont: f64 = 0.0;
    for &e in &ends {
        let a = brute_force_full(&g0, c, e, t, n, &lat, PathContext::History(&ctx), s.delta)?;
        let b = brute_force_full(&g0, c, e, t, n, &lat, PathContext::Static, s.delta)?;
        cont = cont.max(rel(b, a));
    }
    out.set("mu_zero_continuity", cont);

    // Cancellation product on a fixed path shape: per-slice deviation is
    // second order in eps, so at fixed N the product deviates like eps^2.
    let mu = p.history_coupling().map_or(0.0, |h| h.mu);
    let quad = p.with_history_coupling(HistoryCoupling { mu, nu: s.cancellation_nu });
    let shape: Vec<f64> = (0..=s.cancellation_slices).map(|i| 0.5 * (i as f64).sin()).collect();
    let mut fixed_n = Vec::new();
    let mut fixed_t = Vec::new();
    let total = s.cancellation_eps[0] * s.cancellation_slices as f64;
    let mut crow = Vec::new();
    for &eps in &s.cancellation_eps {
        let path = DiscretePath::new(eps, shape.clone())?;
        let dev = (cancellation_product(&path, &quad, &s.f, geom.d) - 1.0).abs();
        fixed_n.push((eps, dev));
        let steps = (total / eps).round() as usize;
        let long: Vec<f64> = (0..=steps).map(|i| 0.5 * (i as f64 * eps / s.cancellation_eps[0]).sin()).collect();
        let dev_t = (cancellation_product(&DiscretePath::new(eps, long)?, &quad, &s.f, geom.d) - 1.0).abs();
        fixed_t.push((eps, dev_t));
        crow.push(vec![eps, dev, dev_t]);
    }
    let linear = DiscretePath::new(s.cancellation_eps[0], shape)?;
    out.set("cancellation_linear_deviation", (cancellation_product(&linear, &p, &s.f, geom.d) - 1.0).abs());
    out.set("cancellation_slope", fit_or_nan(&fixed_n));
    out.set("cancellation_slope_fixed_t", fit_or_nan(&fixed_t));
    out.write_csv("cancellation.csv", "eps,deviation_fixed_n,deviation_fixed_t", &crow)?;
    Ok(())
}

fn moment_identity(s: &MomentIdentity, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let geom = TubeGeometry::new(p, s.x - 5.0, s.x + 5.0)?;
    let mut pts = Vec::new();
    let mut rows = Vec::new();
    for &eps in &s.eps {
        let r = gaussian_moment_residual(&geom, c, s.x, eps)?;
        pts.push((eps, r.residual));
        rows.push(vec![eps, r.residual, r.extrapolation_error]);
    }
    out.set("residual_slope", fit_or_nan(&pts));
    let flat = TubeGeometry::new(RadiusProfile::constant(1.0), s.x - 5.0, s.x + 5.0)?;
    out.set("flat_residual", gaussian_moment_residual(&flat, c, s.x, s.flat_eps)?.residual);
    out.write_csv("residuals.csv", "eps,residual,extrapolation_error", &rows)?;
    Ok(())
}

/// Max `|b-form - S-form|` over the sample grid for every `(xi, d, ell)`,
/// with one table row per sample.
#[allow(clippy::too_many_arguments)]
fn form_rows(
    p: &RadiusProfile,
    c: &PhysicsConstants,
    xi: f64,
    ds: &[u32],
    ells: &[f64],
    x_min: f64,
    x_max: f64,
    n: usize,
    rows: &mut Vec<Vec<f64>>,
) -> Result<f64> {
    let geom = TubeGeometry::new(*p, x_min, x_max)?;
    let cx = c.clone().with_xi(xi);
    let mut worst: f64 = 0.0;
    for &d in ds {
        for &ell in ells {
            for i in 0..n {
                let x = if n == 1 { x_min } else { x_min + (x_max - x_min) * i as f64 / (n - 1) as f64 };
                let a = delta_v_eff_from_b(&geom, &cx, x, d)?;
                let b = delta_v_eff_from_s(&Capacity::LogRadius { profile: p, d, ell, eta: 0.0 }, &cx, x, d);
                worst = worst.max((a - b).abs());
                rows.push(vec![xi, d as f64, ell, x, a, b]);
            }
        }
    }
    Ok(worst)
}

fn xi_scan(s: &XiScan, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, &xi) in s.xi.iter().enumerate() {
        let w = form_rows(&p, c, xi, &s.d, &s.ell, s.x_min, s.x_max, s.n_points, &mut rows)?;
        out.set(format!("form_difference_xi_{i}"), w);
        worst = worst.max(w);
    }
    out.set("max_form_difference", worst);
    out.write_csv("delta_v.csv", "xi,d,ell,x,delta_v_b_form,delta_v_s_form", &rows)?;
    Ok(())
}

fn form_equivalence(s: &FormEquivalence, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (j, p) in s.profiles.iter().enumerate() {
        let start = rows.len();
        for &xi in &s.xi {
            worst = worst.max(form_rows(p, c, xi, &s.d, &s.ell, s.x_min, s.x_max, s.n_points, &mut rows)?);
        }
        for r in &mut rows[start..] {
            r.insert(0, j as f64);
        }
    }
    out.set("max_form_difference", worst);
    out.set("cases", rows.len() as f64);
    out.write_csv("delta_v.csv", "profile,xi,d,ell,x,delta_v_b_form,delta_v_s_form", &rows)?;
    Ok(())
}

fn short_time_order(s: &ShortTimeOrder, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let geom = TubeGeometry::new(p, s.x_min, s.x_max)?;
    let n_ref = ((s.x_max - s.x_min) / s.reference_dx).round() as usize + 1;
    let g = XGrid::new(s.x_min, s.x_max, n_ref)?;
    let pk = s.packet;
    let psi = |x: f64| pk.eval(c, x);
    let reduced_psi = |x: f64| pk.eval(c, x) * p.b(x).sqrt();
    let start = WaveField::from_fn_1d(g, psi);
    let n_samples = ((s.sample_max - s.sample_min) / s.sample_step).round() as usize + 1;
    let samples: Vec<(usize, f64)> = (0..n_samples)
        .map(|i| {
            let x = s.sample_min + i as f64 * s.sample_step;
            let j = ((x - g.x_min) / g.dx).round() as usize;
            (j, g.x(j))
        })
        .collect();
    let window = SmoothWindow::default();
    let mut full_pts = Vec::new();
    let mut mode_pts = Vec::new();
    let mut rows = Vec::new();
    for &eps in &s.eps {
        let reference = evolve_full_sector(&start, &geom, c, s.k, eps, s.reference_substeps)?;
        let scale = reference.values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let (mut ef, mut em) = (0.0f64, 0.0f64);
        for &(j, x) in &samples {
            let want = reference.values[j];
            let f = full_kernel_sector_action(&geom, c, s.k, x, eps, &psi, &window)?;
            ef = ef.max((f - want).norm());
            let m = mode_kernel_action(&geom, c, s.k, x, eps, &reduced_psi, &window)?;
            em = em.max((m - want * p.b(x).sqrt()).norm());
        }
        full_pts.push((eps, ef / scale));
        mode_pts.push((eps, em / scale));
        rows.push(vec![eps, ef / scale, em / scale]);
    }
    out.set("slope_full", fit_or_nan(&full_pts));
    out.set("slope_mode", fit_or_nan(&mode_pts));
    out.write_csv("residuals.csv", "eps,residual_full,residual_mode", &rows)?;
    Ok(())
}

fn time_dependent_unitarity(s: &TimeDependentUnitarity, p: RadiusProfile, c: &PhysicsConstants, out: &mut Outcome) -> Result<()> {
    let geom = TubeGeometry::new(p, s.x_min, s.x_max)?;
    let g = XGrid::new(s.x_min, s.x_max, s.n_x)?;
    let pg = PhiGrid::new(s.n_phi)?;
    let (field, _) = initial_pair(&geom, c, g, pg, s.k, &s.packet);
    let mut norms = Vec::new();
    let dt = s.dt;
    let mut obs = |n: usize, f: &WaveField| {
        norms.push(f.covariant_norm(&geom.profile, n as f64 * dt));
        Ok(())
    };
    evolve_time_dependent_observed(&field, &geom, c, dt, s.steps, TimeDependence { t0: 0.0, compensate: true }, 1, &mut obs)?;
    let drift = norms.windows(2).fold(0.0f64, |m, w| m.max((w[1] / w[0] - 1.0).abs()));
    out.set("max_drift_per_step", drift);
    let n0 = field.covariant_norm(&geom.profile, 0.0);
    let mut pts = Vec::new();
    let mut rows = Vec::new();
    for &h in &s.ablation_dt {
        let steps = steps_for(s.ablation_time, h);
        let mut per_step: f64 = 0.0;
        let mut prev = n0;
        let mut aobs = |n: usize, f: &WaveField| {
            if n > 0 {
                let cur = f.covariant_norm(&geom.profile, n as f64 * h);
                per_step = per_step.max((cur / prev - 1.0).abs());
                prev = cur;
            }
            Ok(())
        };
        evolve_time_dependent_observed(&field, &geom, c, h, steps, TimeDependence { t0: 0.0, compensate: false }, 1, &mut aobs)?;
        pts.push((h, per_step));
        rows.push(vec![h, per_step]);
    }
    let slope = fit_or_nan(&pts);
    out.set("ablation_slope", slope);
    out.set("ablation_slope_deviation", (slope - 1.0).abs());
    let nrows: Vec<Vec<f64>> = norms.iter().enumerate().map(|(n, v)| vec![n as f64 * dt, *v]).collect();
    out.write_csv("norm.csv", "t,covariant_norm", &nrows)?;
    out.write_csv("ablation.csv", "dt,max_drift_per_step", &rows)?;
    Ok(())
}

fn geometry_identities(s: &GeometryIdentities, p: RadiusProfile, out: &mut Outcome) -> Result<()> {
    let geom = TubeGeometry::new(p, s.x_min, s.x_max)?;
    let mut sym: f64 = 0.0;
    let mut grad: f64 = 0.0;
    for &[x, xp, th] in &s.pairs {
        let pair = WorldPointPair::new(x, xp, th, 0);
        for (a, b) in [
            (world_function_taylor(&geom, &pair, RadiusPairing::Endpoints)?, world_function_taylor(&geom, &pair.swapped(), RadiusPairing::Endpoints)?),
            (world_function_geodesic(&geom, &pair)?, world_function_geodesic(&geom, &pair.swapped())?),
        ] {
            sym = sym.max((a - b).abs() / a.abs().max(f64::MIN_POSITIVE));
        }
        let (n, sigma) = sigma_gradient_norm(&geom, &pair, s.fd_step)?;
        grad = grad.max((n - 2.0 * sigma).abs() / (2.0 * sigma));
    }
    out.set("symmetry_max", sym);
    out.set("gradient_identity_max_rel", grad);
    let [x, dx, dth] = s.direction;
    let mut pts = Vec::new();
    let mut rows = Vec::new();
    for &h in &s.h {
        let pair = WorldPointPair::new(x, x + h * dx, h * dth, 0);
        let t = world_function_taylor(&geom, &pair, RadiusPairing::Endpoints)?;
        let e = world_function_geodesic(&geom, &pair)?;
        let r = (t - e).abs() / e;
        pts.push((h, r));
        rows.push(vec![h, t, e, r]);
    }
    out.set("taylor_slope", fit_or_nan(&pts));
    out.write_csv("taylor.csv", "h,sigma_taylor,sigma_geodesic,rel_error", &rows)?;
    if !sym.is_finite() || !grad.is_finite() {
        return Err(Error::Config("non-finite world function".into()));
    }
    Ok(())
}
