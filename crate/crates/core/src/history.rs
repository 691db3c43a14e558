//! History-dependent radius `b(x, eta)` with `eta[x] = int f(x(t)) dt`.
//!
//! Sliced path sums track `eta` exactly per path. For grid evolution the
//! state is augmented with `eta` as an auxiliary coordinate that is advected
//! by `f(x)`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RadiusProfile, TubeGeometry};
use crate::kernels::{DiscretePath, PhysicsConstants};
use crate::pde::{CnStepper, FibreEnergy};
use crate::sliced::{reduced_brute_force, Lattice, PathContext, SliceOptions};
use crate::spectral::{NormConvention, WaveField, XGrid};

/// Polynomial in `x`, `coefficients[i]` multiplying `x^i`.
///
/// Parsed from sums of terms such as `1`, `-x`, `0.5*x^2`, `3x^3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Polynomial {
    pub coefficients: Vec<f64>,
}

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Polynomial { coefficients: vec![c] }
    }

    pub fn identity() -> Self {
        Polynomial { coefficients: vec![0.0, 1.0] }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Extremes over the points of `g`.
    pub fn range_on(&self, g: &XGrid) -> (f64, f64) {
        g.points().iter().map(|&x| self.eval(x)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    }

    fn parse_term(t: &str) -> Result<(usize, f64)> {
        let bad = || Error::Config(format!("cannot parse polynomial term '{t}'"));
        let Some(pos) = t.find('x') else {
            return t.parse::<f64>().map(|c| (0, c)).map_err(|_| bad());
        };
        let (head, tail) = (&t[..pos], &t[pos + 1..]);
        let head = head.strip_suffix('*').unwrap_or(head);
        let coef = match head {
            "" | "+" => 1.0,
            "-" => -1.0,
            h => h.parse::<f64>().map_err(|_| bad())?,
        };
        let power = match tail {
            "" => 1,
            p => p.strip_prefix('^').ok_or_else(bad)?.parse::<usize>().map_err(|_| bad())?,
        };
        Ok((power, coef))
    }
}

impl FromStr for Polynomial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if s.is_empty() {
            return Err(Error::Config("empty polynomial".into()));
        }
        let mut terms = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..bytes.len() {
            let c = bytes[i];
            // Split before a sign that is not an exponent sign.
            if (c == b'+' || c == b'-') && !matches!(bytes[i - 1], b'e' | b'E' | b'^' | b'*') {
                terms.push(&s[start..i]);
                start = i;
            }
        }
        terms.push(&s[start..]);
        let mut coefficients = Vec::new();
        for t in terms {
            let (p, c) = Self::parse_term(t)?;
            if coefficients.len() <= p {
                coefficients.resize(p + 1, 0.0);
            }
            coefficients[p] += c;
        }
        Ok(Polynomial { coefficients })
    }
}

impl TryFrom<String> for Polynomial {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Polynomial> for String {
    fn from(p: Polynomial) -> String {
        p.to_string()
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (p, &c) in self.coefficients.iter().enumerate() {
            if c == 0.0 && !(first && p + 1 == self.coefficients.len()) {
                continue;
            }
            if !first {
                write!(f, "{}", if c < 0.0 { " - " } else { " + " })?;
            } else if c < 0.0 {
                write!(f, "-")?;
            }
            let a = c.abs();
            match p {
                0 => write!(f, "{a}")?,
                1 => write!(f, "{a}*x")?,
                _ => write!(f, "{a}*x^{p}")?,
            }
            first = false;
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

/// Uniform grid for the history coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaGrid {
    pub min: f64,
    pub step: f64,
    pub n: usize,
}

impl EtaGrid {
    /// Grid with spacing `step` covering `[lo, hi]` and containing 0 as a node.
    pub fn covering(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && lo <= 0.0 && hi >= 0.0) {
            return Err(Error::param("eta_grid", "need step > 0 and lo <= 0 <= hi"));
        }
        let below = (-lo / step - 1e-9).ceil().max(0.0) as usize;
        let above = (hi / step - 1e-9).ceil().max(0.0) as usize;
        Ok(EtaGrid { min: -(below as f64) * step, step, n: below + above + 1 })
    }

    pub fn eta(&self, j: usize) -> f64 {
        self.min + j as f64 * self.step
    }

    pub fn max(&self) -> f64 {
        self.eta(self.n - 1)
    }

    pub fn nearest(&self, eta: f64) -> usize {
        (((eta - self.min) / self.step).round().max(0.0) as usize).min(self.n - 1)
    }
}

/// History function `f` and, for grid evolution, the `eta` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryContext {
    pub f: Polynomial,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_grid: Option<EtaGrid>,
}

impl HistoryContext {
    pub fn new(f: Polynomial) -> Self {
        HistoryContext { f, eta_grid: None }
    }

    pub fn with_eta_grid(mut self, g: EtaGrid) -> Self {
        self.eta_grid = Some(g);
        self
    }

    /// Extremes of `eps sum f(x_k)` over `n` steps on lattice `g`.
    pub fn reachable(&self, g: &XGrid, eps: f64, n: usize) -> (f64, f64) {
        let (lo, hi) = self.f.range_on(g);
        let t = eps * n as f64;
        ((t * lo).min(0.0), (t * hi).max(0.0))
    }
}

/// `eta_n = sum_{k=1}^{n} eps f(x_k)`, with `eta_0 = 0`.
pub fn eta_of_path(path: &DiscretePath, f: &Polynomial) -> Vec<f64> {
    let mut out = Vec::with_capacity(path.x.len());
    let mut eta = 0.0;
    out.push(eta);
    for &x in &path.x[1..] {
        eta += path.eps * f.eval(x);
        out.push(eta);
    }
    out
}

/// Reduced lattice path sum with `V_cl` and `Delta V_eff` at `(x_n, eta_n)`.
#[allow(clippy::too_many_arguments)]
pub fn history_reduced_brute_force(
    geom: &TubeGeometry,
    ctx: &HistoryContext,
    c: &PhysicsConstants,
    k: i64,
    x_f: f64,
    x_0: f64,
    t: f64,
    n: usize,
    lattice: &Lattice,
    opts: SliceOptions,
) -> Result<Complex64> {
    reduced_brute_force(geom, c, k, x_f, x_0, t, n, lattice, PathContext::History(ctx), opts)
}

/// `prod_n (b_n / b(x_n, eta_{n-1}))^{d/2} exp(-(d/2) eps f(x_n) d_eta ln b_n)` along a path.
pub fn cancellation_product(path: &DiscretePath, profile: &RadiusProfile, f: &Polynomial, d: u32) -> f64 {
    let etas = eta_of_path(path, f);
    let half = 0.5 * d as f64;
    let mut log = 0.0;
    for n in 1..path.x.len() {
        let x = path.x[n];
        let fx = f.eval(x);
        log += half * (profile.b_at(x, etas[n]) / profile.b_at(x, etas[n - 1])).ln();
        log -= half * path.eps * fx * profile.dlnb_deta(etas[n]);
    }
    log.exp()
}

/// Reduced amplitude on an `(x, eta)` grid; `values[i * n_eta + j]` is the
/// amplitude carried by histories with `eta = eta_j` at `x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedField {
    pub x_grid: XGrid,
    pub eta_grid: EtaGrid,
    pub values: Vec<Complex64>,
}

impl AugmentedField {
    /// All amplitude at `eta = 0`.
    pub fn from_initial(psi: &WaveField, eta_grid: EtaGrid) -> Result<Self> {
        if psi.phi_grid.is_some() {
            return Err(Error::GridMismatch("augmented field starts from a 1D field".into()));
        }
        let j0 = eta_grid.nearest(0.0);
        if eta_grid.eta(j0).abs() > 1e-12 * eta_grid.step.max(1.0) {
            return Err(Error::param("eta_grid", "must contain eta = 0 as a node"));
        }
        let ne = eta_grid.n;
        let mut values = vec![Complex64::new(0.0, 0.0); psi.x_grid.n * ne];
        for i in 0..psi.x_grid.n {
            values[i * ne + j0] = psi.values[i];
        }
        Ok(AugmentedField { x_grid: psi.x_grid, eta_grid, values })
    }

    /// Sum over `eta`, the amplitude summed over all histories.
    pub fn marginal(&self) -> WaveField {
        let ne = self.eta_grid.n;
        let mut w = WaveField::zeros_1d(self.x_grid);
        w.norm_convention = NormConvention::Reduced;
        for i in 0..self.x_grid.n {
            w.values[i] = self.values[i * ne..(i + 1) * ne].iter().sum();
        }
        w
    }
}

/// Monotone cubic (Fritsch-Carlson) slopes for uniform spacing `h`.
fn pchip_slopes(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h).collect();
    for i in 1..n - 1 {
        let (a, b) = (delta[i - 1], delta[i]);
        if a * b > 0.0 {
            d[i] = 2.0 * a * b / (a + b);
        }
    }
    let end = |d0: f64, d1: f64| {
        let s = (3.0 * d0 - d1) / 2.0;
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 < 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
    } else {
        d[0] = end(delta[0], delta[1]);
        d[n - 1] = end(delta[n - 2], delta[n - 3]);
    }
    d
}

fn pchip_eval(y: &[f64], d: &[f64], h: f64, s: f64) -> f64 {
    // `s` in node units; outside the grid the value is zero.
    let n = y.len();
    if s < 0.0 || s > (n - 1) as f64 {
        return 0.0;
    }
    let i = (s.floor() as usize).min(n - 2);
    let t = s - i as f64;
    let (t2, t3) = (t * t, t * t * t);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * y[i] + h10 * h * d[i] + h01 * y[i + 1] + h11 * h * d[i + 1]
}

/// Shifts `row(eta) -> row(eta - shift)` by monotone cubic interpolation of
/// the real and imaginary parts.
fn advect(row: &mut [Complex64], step: f64, shift: f64) {
    if shift == 0.0 {
        return;
    }
    let re: Vec<f64> = row.iter().map(|v| v.re).collect();
    let im: Vec<f64> = row.iter().map(|v| v.im).collect();
    let (dr, di) = (pchip_slopes(&re, step), pchip_slopes(&im, step));
    let off = shift / step;
    for (j, v) in row.iter_mut().enumerate() {
        let s = j as f64 - off;
        *v = Complex64::new(pchip_eval(&re, &dr, step, s), pchip_eval(&im, &di, step, s));
    }
}

/// Operator-split evolution of an [`AugmentedField`]. Each step applies a
/// Crank-Nicolson x-step at every `eta_j`, with the potential taken at
/// `(x, eta_j + f(x) dt/2)`, then advects each `x` row in `eta` by `f(x) dt`.
#[allow(clippy::too_many_arguments)]
pub fn augmented_grid_evolution(
    field: &AugmentedField,
    geom: &TubeGeometry,
    ctx: &HistoryContext,
    c: &PhysicsConstants,
    energy: FibreEnergy,
    dt: f64,
    steps: usize,
    include_delta_v: bool,
) -> Result<AugmentedField> {
    let g = field.x_grid;
    let eg = field.eta_grid;
    let fx: Vec<f64> = g.points().iter().map(|&x| ctx.f.eval(x)).collect();
    let (lo, hi) = ctx.reachable(&g, dt, steps);
    if lo < eg.min - 1e-12 || hi > eg.max() + 1e-12 {
        return Err(Error::EtaOverflow { min: eg.min, max: eg.max(), needed: if lo < eg.min { lo } else { hi } });
    }
    geom.check_domain(g.x(0))?;
    geom.check_domain(g.x_max())?;
    let e_phi = energy.value(c);
    // The potential at row eta_j does not change in time, so factor once.
    let steppers: Vec<CnStepper> = (0..eg.n)
        .map(|j| {
            let eta = eg.eta(j);
            let pot: Vec<f64> = (0..g.n)
                .map(|i| {
                    let x = g.x(i);
                    let e = eta + 0.5 * dt * fx[i];
                    let jet = geom.profile.jet_at(x, e);
                    let mut v = c.v0.value(x) + e_phi / (jet.b * jet.b);
                    if include_delta_v {
                        v += crate::kernels::delta_v_from_jet(&jet, c, geom.d);
                    }
                    v
                })
                .collect();
            CnStepper::new(crate::pde::Tridiagonal::plain(c.kinetic(), g.dx, &pot), dt, c.hbar)
        })
        .collect::<Result<_>>()?;
    let ne = eg.n;
    let mut out = field.clone();
    let mut col = vec![Complex64::new(0.0, 0.0); g.n];
    let mut scratch = Vec::new();
    for _ in 0..steps {
        for (j, st) in steppers.iter().enumerate() {
            let mut any = false;
            for i in 0..g.n {
                col[i] = out.values[i * ne + j];
                any |= col[i] != Complex64::new(0.0, 0.0);
            }
            if !any {
                continue;
            }
            st.step(&mut col, &mut scratch);
            for i in 0..g.n {
                out.values[i * ne + j] = col[i];
            }
        }
        for i in 0..g.n {
            advect(&mut out.values[i * ne..(i + 1) * ne], eg.step, fx[i] * dt);
        }
    }
    Ok(out)
}

/// Reference for [`augmented_grid_evolution`]: exact enumeration of lattice
/// histories, each step applying the same x-step operator built at the
/// path's own `eta`. Cost grows as `n_x^steps`.
#[allow(clippy::too_many_arguments)]
pub fn enumerated_history_evolution(
    psi: &WaveField,
    geom: &TubeGeometry,
    ctx: &HistoryContext,
    c: &PhysicsConstants,
    energy: FibreEnergy,
    dt: f64,
    steps: usize,
    include_delta_v: bool,
    budget: u128,
) -> Result<WaveField> {
    let g = psi.x_grid;
    let paths = (g.n as u128).saturating_pow(steps as u32);
    if paths > budget {
        return Err(Error::BudgetExceeded { paths, budget });
    }
    let e_phi = energy.value(c);
    let fx: Vec<f64> = g.points().iter().map(|&x| ctx.f.eval(x)).collect();
    let stepper_at = |eta: f64| -> Result<CnStepper> {
        let pot: Vec<f64> = (0..g.n)
            .map(|i| {
                let x = g.x(i);
                let jet = geom.profile.jet_at(x, eta + 0.5 * dt * fx[i]);
                let mut v = c.v0.value(x) + e_phi / (jet.b * jet.b);
                if include_delta_v {
                    v += crate::kernels::delta_v_from_jet(&jet, c, geom.d);
                }
                v
            })
            .collect();
        CnStepper::new(crate::pde::Tridiagonal::plain(c.kinetic(), g.dx, &pot), dt, c.hbar)
    };
    let mut out = WaveField::zeros_1d(g);
    out.norm_convention = NormConvention::Reduced;
    let mut scratch = Vec::new();
    // Depth-first over (x, eta) histories: `v` is the amplitude at step `n`,
    // supported on the single point `i` with history value `eta`.
    fn walk(
        n: usize,
        steps: usize,
        v: &[Complex64],
        eta: f64,
        dt: f64,
        fx: &[f64],
        stepper_at: &dyn Fn(f64) -> Result<CnStepper>,
        out: &mut [Complex64],
        scratch: &mut Vec<Complex64>,
    ) -> Result<()> {
        let mut next = v.to_vec();
        stepper_at(eta)?.step(&mut next, scratch);
        if n + 1 == steps {
            for (o, a) in out.iter_mut().zip(&next) {
                *o += a;
            }
            return Ok(());
        }
        for i in 0..next.len() {
            if next[i] == Complex64::new(0.0, 0.0) {
                continue;
            }
            let mut single = vec![Complex64::new(0.0, 0.0); next.len()];
            single[i] = next[i];
            walk(n + 1, steps, &single, eta + fx[i] * dt, dt, fx, stepper_at, out, scratch)?;
        }
        Ok(())
    }
    if steps > 0 {
        walk(0, steps, &psi.values, 0.0, dt, &fx, &stepper_at, &mut out.values, &mut scratch)?;
    } else {
        out.values.copy_from_slice(&psi.values);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HistoryCoupling;
    use crate::pde::{evolve_reduced_1d, evolve_reduced_time_dependent};
    use proptest::prelude::*;

    #[test]
    fn polynomial_grammar() {
        let p: Polynomial = "0.5 - 2*x + x^2".parse().unwrap();
        assert_eq!(p.coefficients, vec![0.5, -2.0, 1.0]);
        assert_eq!("x".parse::<Polynomial>().unwrap(), Polynomial::identity());
        assert_eq!("-3x^3".parse::<Polynomial>().unwrap().coefficients, vec![0.0, 0.0, 0.0, -3.0]);
        assert_eq!("1e-3".parse::<Polynomial>().unwrap().coefficients, vec![1e-3]);
        assert!("x^".parse::<Polynomial>().is_err());
        assert!("y".parse::<Polynomial>().is_err());
        let q: Polynomial = p.to_string().parse().unwrap();
        assert_eq!(p, q);
        assert_eq!(Polynomial::constant(0.0).to_string(), "0");
    }

    #[test]
    fn eta_examples() {
        let one = Polynomial::constant(1.0);
        let path = DiscretePath::new(0.01, vec![0.0; 201]).unwrap();
        assert!((eta_of_path(&path, &one)[200] - 2.0).abs() < 1e-12);
        let p = DiscretePath::new(0.1, vec![3.0; 6]).unwrap();
        assert!((eta_of_path(&p, &Polynomial::identity())[5] - 1.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn even_f_ignores_reflection(xs in proptest::collection::vec(-3.0f64..3.0, 2..12)) {
            let sq: Polynomial = "x^2".parse().unwrap();
            let p = DiscretePath::new(0.05, xs.clone()).unwrap();
            let r = DiscretePath::new(0.05, xs.iter().map(|x| -x).collect()).unwrap();
            prop_assert_eq!(eta_of_path(&p, &sq), eta_of_path(&r, &sq));
        }
    }

    #[test]
    fn cancellation_exact_for_linear_coupling() {
        let prof = RadiusProfile::tanh_step(0.1).unwrap().with_history_coupling(HistoryCoupling::linear(0.2));
        let path = DiscretePath::new(0.1, vec![0.0, 0.3, -0.2, 0.5, 0.1]).unwrap();
        let v = cancellation_product(&path, &prof, &Polynomial::identity(), 1);
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_coupling_matches_static_brute_force() {
        let geom = TubeGeometry::new(RadiusProfile::tanh_step(0.2).unwrap(), -5.0, 5.0).unwrap();
        let c = PhysicsConstants::natural();
        let lat = Lattice::new(XGrid::centered(0.0, 0.15, 5).unwrap(), 1);
        let opts = SliceOptions { delta: 0.2, ..Default::default() };
        let ctx = HistoryContext::new(Polynomial::identity());
        let h = history_reduced_brute_force(&geom, &ctx, &c, 1, 0.3, 0.0, 1.0, 3, &lat, opts).unwrap();
        let s = reduced_brute_force(&geom, &c, 1, 0.3, 0.0, 1.0, 3, &lat, PathContext::Static, opts).unwrap();
        assert_eq!(h, s);
    }

    fn packet(g: XGrid) -> WaveField {
        WaveField::from_fn_1d(g, |x| Complex64::new(-(x * x) / 2.0, 0.5 * x).exp())
    }

    #[test]
    fn augmented_f_zero_is_reduced() {
        let prof = RadiusProfile::tanh_step(0.1).unwrap().with_history_coupling(HistoryCoupling::linear(0.2));
        let geom = TubeGeometry::new(prof, -10.0, 10.0).unwrap();
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-10.0, 10.0, 201).unwrap();
        let ctx = HistoryContext::new(Polynomial::constant(0.0));
        let eg = EtaGrid::covering(0.0, 0.0, 0.1).unwrap();
        let a = AugmentedField::from_initial(&packet(g), eg).unwrap();
        let out = augmented_grid_evolution(&a, &geom, &ctx, &c, FibreEnergy::Mode(1), 0.01, 50, true).unwrap().marginal();
        let want = evolve_reduced_1d(&packet(g), &geom, &c, FibreEnergy::Mode(1), 0.01, 50, true).unwrap();
        let diff = out.values.iter().zip(&want.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-14, "{diff}");
    }

    #[test]
    fn augmented_f_one_is_time_dependent() {
        let prof = RadiusProfile::tanh_step(0.1).unwrap().with_history_coupling(HistoryCoupling::linear(0.2));
        let geom = TubeGeometry::new(prof, -10.0, 10.0).unwrap();
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-10.0, 10.0, 201).unwrap();
        let ctx = HistoryContext::new(Polynomial::constant(1.0));
        let (dt, steps) = (0.01, 50);
        let eg = EtaGrid::covering(0.0, dt * steps as f64, dt).unwrap();
        let a = AugmentedField::from_initial(&packet(g), eg).unwrap();
        let out = augmented_grid_evolution(&a, &geom, &ctx, &c, FibreEnergy::Mode(1), dt, steps, true).unwrap().marginal();
        let want = evolve_reduced_time_dependent(&packet(g), &geom, &c, FibreEnergy::Mode(1), 0.0, dt, steps, true).unwrap();
        let diff = out.values.iter().zip(&want.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn augmented_converges_to_enumeration() {
        let prof = RadiusProfile::tanh_step(0.1).unwrap().with_history_coupling(HistoryCoupling::linear(0.2));
        let geom = TubeGeometry::new(prof, -4.0, 4.0).unwrap();
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-3.0, 3.0, 13).unwrap();
        let psi = WaveField::from_fn_1d(g, |x| Complex64::new(-(x * x), 0.3 * x).exp());
        let ctx = HistoryContext::new(Polynomial::identity());
        let (dt, steps) = (0.05, 6);
        let exact =
            enumerated_history_evolution(&psi, &geom, &ctx, &c, FibreEnergy::Mode(2), dt, steps, true, 10_000_000).unwrap();
        let (lo, hi) = ctx.reachable(&g, dt, steps);
        let mut errs = Vec::new();
        for refine in [1.0, 2.0, 4.0] {
            let eg = EtaGrid::covering(lo, hi, 0.13 * dt / refine).unwrap();
            let a = AugmentedField::from_initial(&psi, eg).unwrap();
            let m = augmented_grid_evolution(&a, &geom, &ctx, &c, FibreEnergy::Mode(2), dt, steps, true).unwrap().marginal();
            let e: f64 = m.values.iter().zip(&exact.values).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            errs.push(e);
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
        // Commensurate eta spacing makes every shift land on a node.
        let eg = EtaGrid::covering(lo, hi, g.dx * dt).unwrap();
        let a = AugmentedField::from_initial(&psi, eg).unwrap();
        let m = augmented_grid_evolution(&a, &geom, &ctx, &c, FibreEnergy::Mode(2), dt, steps, true).unwrap().marginal();
        let e = m.values.iter().zip(&exact.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(e < 1e-10, "{e}");
    }

    #[test]
    fn eta_overflow_detected() {
        let geom = TubeGeometry::new(RadiusProfile::constant(1.0), -4.0, 4.0).unwrap();
        let c = PhysicsConstants::natural();
        let g = XGrid::new(-3.0, 3.0, 13).unwrap();
        let ctx = HistoryContext::new(Polynomial::identity());
        let eg = EtaGrid::covering(-0.1, 0.1, 0.1).unwrap();
        let a = AugmentedField::from_initial(&packet(g), eg).unwrap();
        let r = augmented_grid_evolution(&a, &geom, &ctx, &c, FibreEnergy::Mode(0), 0.01, 10, true);
        assert!(matches!(r, Err(Error::EtaOverflow { .. })));
    }
}
