//! One-slice kernels applied to smooth states, for comparison with one PDE step.
//!
//! Both actions integrate over scaled variables `x' = x + s u` (and
//! `theta = (s/b(x)) v` for the full kernel) with `s = sqrt(hbar eps/m)`,
//! using the smooth window so the real-time Fresnel integrals converge.

use num_complex::Complex64;

use crate::error::Result;
use crate::geometry::TubeGeometry;
use crate::kernels::{free_prefactor, full_prefactor, mode_potential, PhysicsConstants, StepContext};
use crate::quadrature::SmoothWindow;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Sector-`k` value at `x` of the full kernel applied to `Psi_k(x') Phi_k(phi')`,
/// with the angle integral taken over the covering line (all windings).
pub fn full_kernel_sector_action(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    x: f64,
    eps: f64,
    psi_k: &dyn Fn(f64) -> Complex64,
    window: &SmoothWindow,
) -> Result<Complex64> {
    geom.check_domain(x)?;
    let p = &geom.profile;
    let s = (c.hbar * eps / c.mass).sqrt();
    let tau = Complex64::new(eps, 0.0);
    let bx = p.b(x);
    let nodes = window.nodes();
    let pre = full_prefactor(geom, c, x, tau, &StepContext::STATIC);
    let phase_scale = c.mass / (c.hbar * eps);
    let mut acc = Complex64::new(0.0, 0.0);
    for &(u, wu) in &nodes {
        let xp = x + s * u;
        if !geom.contains(xp) {
            continue;
        }
        let amp = psi_k(xp);
        if amp.norm() < 1e-300 {
            continue;
        }
        let bp = p.b(xp);
        let jm = p.jet(0.5 * (x + xp));
        let pp = jm.b * jm.d2;
        let q = (jm.b * jm.d1).powi(2);
        let dx2 = (s * u).powi(2);
        let bbar2 = bx * bp;
        let mut inner = Complex64::new(0.0, 0.0);
        for &(v, wv) in &nodes {
            let th = s * v / bx;
            let th2 = th * th;
            let sigma = 0.5 * (dx2 + bbar2 * th2 - pp / 6.0 * dx2 * th2 - q / 12.0 * th2 * th2);
            inner += wv * (I * (phase_scale * sigma - k as f64 * th)).exp();
        }
        acc += wu * bp * amp * inner;
    }
    Ok(pre * acc * s * (s / bx))
}

/// `(K_k psi)(x)` for the mode kernel with potentials at the later point.
pub fn mode_kernel_action(
    geom: &TubeGeometry,
    c: &PhysicsConstants,
    k: i64,
    x: f64,
    eps: f64,
    psi: &dyn Fn(f64) -> Complex64,
    window: &SmoothWindow,
) -> Result<Complex64> {
    geom.check_domain(x)?;
    let s = (c.hbar * eps / c.mass).sqrt();
    let tau = Complex64::new(eps, 0.0);
    let v = mode_potential(geom, c, k, x, 0.0, true);
    let mut acc = Complex64::new(0.0, 0.0);
    for (u, w) in window.nodes() {
        let xp = x + s * u;
        if !geom.contains(xp) {
            continue;
        }
        acc += w * (I * 0.5 * u * u).exp() * psi(xp);
    }
    Ok(free_prefactor(c, tau) * (-I * tau * v / c.hbar).exp() * acc * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RadiusProfile;

    #[test]
    fn flat_actions_match_free_evolution() {
        // Free Gaussian of width a: exact result after time eps.
        let geom = TubeGeometry::new(RadiusProfile::constant(1.0), -20.0, 20.0).unwrap();
        let c = PhysicsConstants::natural();
        let psi = |x: f64| Complex64::new(-x * x / 2.0, 0.0).exp();
        let eps = 0.05;
        let exact = |x: f64| {
            let a = Complex64::new(1.0, eps);
            (Complex64::new(-x * x / 2.0, 0.0) / a).exp() / a.sqrt()
        };
        let w = SmoothWindow::default();
        for x in [-1.0, 0.0, 0.7] {
            let m = mode_kernel_action(&geom, &c, 0, x, eps, &psi, &w).unwrap();
            assert!((m - exact(x)).norm() < 1e-9, "{m} {}", exact(x));
            let k = 2;
            let f = full_kernel_sector_action(&geom, &c, k, x, eps, &psi, &w).unwrap();
            let ph = (-I * eps * 0.5 * (k * k) as f64).exp();
            assert!((f - exact(x) * ph).norm() < 1e-8, "{f} {}", exact(x) * ph);
        }
    }
}
