//! Synge world function on the tube: a quartic Taylor form and a geodesic
//! boundary-value oracle.

use std::f64::consts::PI;

use super::{RadiusProfile, TubeGeometry};
use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Reduces an angle to `[-pi, pi)`, returning `(reduced, k)` with `a = reduced + 2 pi k`.
pub fn reduce_angle(a: f64) -> (f64, i64) {
    let k = ((a + PI) / TWO_PI).floor();
    let mut r = a - TWO_PI * k;
    let mut k = k as i64;
    if r >= PI {
        r -= TWO_PI;
        k += 1;
    }
    if r < -PI {
        r += TWO_PI;
        k -= 1;
    }
    (r, k)
}

/// Two points on the tube. The angular separation is stored reduced to
/// `[-pi, pi)`; the winding counts extra turns so that
/// `effective_angle() = delta_phi + 2 pi winding`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPointPair {
    pub x: f64,
    pub x_prime: f64,
    pub delta_phi: f64,
    pub winding: i64,
}

impl WorldPointPair {
    /// `delta_phi` may be any real; the effective angle is `delta_phi + 2 pi winding`.
    pub fn new(x: f64, x_prime: f64, delta_phi: f64, winding: i64) -> Self {
        let (r, k) = reduce_angle(delta_phi);
        WorldPointPair { x, x_prime, delta_phi: r, winding: winding + k }
    }

    pub fn effective_angle(&self) -> f64 {
        self.delta_phi + TWO_PI * self.winding as f64
    }

    pub fn dx(&self) -> f64 {
        self.x_prime - self.x
    }

    /// The same pair with the roles of the two points exchanged.
    pub fn swapped(&self) -> Self {
        WorldPointPair::new(self.x_prime, self.x, -self.effective_angle(), 0)
    }
}

/// Which product of radii multiplies `dphi^2` at leading order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RadiusPairing {
    /// `b(x') b(x)`
    #[default]
    Endpoints,
    /// Caller-supplied value of `bbar^2`.
    Explicit(f64),
}

/// Quartic Taylor world function at history value `eta`.
///
/// `2 sigma = dx^2 + bbar^2 th^2 - (b b''/6) dx^2 th^2 - ((b b')^2/12) th^4`, with the
/// quartic coefficients evaluated at the midpoint `(x + x')/2`.
pub fn taylor_sigma(profile: &RadiusProfile, x: f64, xp: f64, theta: f64, eta: f64, pairing: RadiusPairing) -> f64 {
    let bbar2 = match pairing {
        RadiusPairing::Endpoints => profile.b_at(x, eta) * profile.b_at(xp, eta),
        RadiusPairing::Explicit(v) => v,
    };
    let jm = profile.jet_at(0.5 * (x + xp), eta);
    let dx2 = (xp - x) * (xp - x);
    let th2 = theta * theta;
    let p = jm.b * jm.d2;
    let q = (jm.b * jm.d1).powi(2);
    0.5 * (dx2 + bbar2 * th2 - p / 6.0 * dx2 * th2 - q / 12.0 * th2 * th2)
}

/// Taylor world function and its derivatives with respect to the second
/// point, `(sigma, d sigma/dx', d sigma/dtheta)`, with the endpoint pairing.
pub fn taylor_sigma_grad(profile: &RadiusProfile, x: f64, xp: f64, theta: f64) -> (f64, f64, f64) {
    let b0 = profile.b(x);
    let jp = profile.jet(xp);
    let jm = profile.jet(0.5 * (x + xp));
    let dx = xp - x;
    let (dx2, th2) = (dx * dx, theta * theta);
    let p = jm.b * jm.d2;
    let q = (jm.b * jm.d1).powi(2);
    let dp = jm.d1 * jm.d2 + jm.b * jm.d3;
    let dq = 2.0 * jm.b * jm.d1 * (jm.d1 * jm.d1 + jm.b * jm.d2);
    let s = 0.5 * (dx2 + b0 * jp.b * th2 - p / 6.0 * dx2 * th2 - q / 12.0 * th2 * th2);
    let sx = 0.5 * (2.0 * dx + b0 * jp.d1 * th2 - dp / 12.0 * dx2 * th2 - p / 3.0 * dx * th2 - dq / 24.0 * th2 * th2);
    let sth = 0.5 * (2.0 * b0 * jp.b * theta - p / 3.0 * dx2 * theta - q / 3.0 * th2 * theta);
    (s, sx, sth)
}

pub fn world_function_taylor(geom: &TubeGeometry, pair: &WorldPointPair, pairing: RadiusPairing) -> Result<f64> {
    geom.check_domain(pair.x)?;
    geom.check_domain(pair.x_prime)?;
    Ok(taylor_sigma(&geom.profile, pair.x, pair.x_prime, pair.effective_angle(), 0.0, pairing))
}

const RK_STEPS: usize = 2000;
const SHOOT_MAX_ITER: usize = 60;
const SHOOT_TARGET: f64 = 1e-13;
const SHOOT_ACCEPT: f64 = 1e-9;

/// Integrates the geodesic equations over the affine interval `[0, 1]` from
/// `(x0, 0)` with initial velocity `v`, returning the endpoint `(x, phi)`.
fn shoot(geom: &TubeGeometry, x0: f64, v: [f64; 2]) -> Result<[f64; 2]> {
    let p = &geom.profile;
    let rhs = |y: [f64; 4]| -> [f64; 4] {
        let j = p.jet(y[0]);
        [y[2], y[3], j.b * j.d1 * y[3] * y[3], -2.0 * j.d1 / j.b * y[2] * y[3]]
    };
    let h = 1.0 / RK_STEPS as f64;
    let mut y = [x0, 0.0, v[0], v[1]];
    let add = |y: [f64; 4], k: [f64; 4], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2], y[3] + s * k[3]];
    for _ in 0..RK_STEPS {
        let k1 = rhs(y);
        let k2 = rhs(add(y, k1, 0.5 * h));
        let k3 = rhs(add(y, k2, 0.5 * h));
        let k4 = rhs(add(y, k3, h));
        for i in 0..4 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !geom.contains(y[0]) || !y[0].is_finite() {
            return Err(Error::GeodesicLeftDomain { x: y[0], min: geom.x_domain.0, max: geom.x_domain.1 });
        }
    }
    Ok([y[0], y[1]])
}

/// World function from the geodesic joining `(x, 0)` to `(x', theta)` where
/// `theta` is the unreduced angle on the covering space.
pub fn geodesic_sigma(geom: &TubeGeometry, x: f64, xp: f64, theta: f64) -> Result<f64> {
    geom.check_domain(x)?;
    geom.check_domain(xp)?;
    if xp == x && theta == 0.0 {
        return Ok(0.0);
    }
    let target = [xp, theta];
    let scale = (xp - x).abs().max(theta.abs()).max(1e-300);
    let residual = |v: [f64; 2]| -> Result<[f64; 2]> {
        let e = shoot(geom, x, v)?;
        Ok([e[0] - target[0], e[1] - target[1]])
    };
    let mut v = [xp - x, theta];
    let mut r = residual(v)?;
    let mut norm = r[0].hypot(r[1]);
    let mut it = 0;
    while norm > SHOOT_TARGET * scale && it < SHOOT_MAX_ITER {
        it += 1;
        let mut jac = [[0.0; 2]; 2];
        for c in 0..2 {
            let hstep = 1e-6 * v[c].abs().max(1e-3 * scale);
            let mut vp = v;
            let mut vm = v;
            vp[c] += hstep;
            vm[c] -= hstep;
            let rp = residual(vp)?;
            let rm = residual(vm)?;
            for row in 0..2 {
                jac[row][c] = (rp[row] - rm[row]) / (2.0 * hstep);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::ShootingFailed { iterations: it, residual: norm });
        }
        let dv0 = (jac[1][1] * r[0] - jac[0][1] * r[1]) / det;
        let dv1 = (jac[0][0] * r[1] - jac[1][0] * r[0]) / det;
        // Backtrack if a full step increases the residual.
        let mut lambda = 1.0;
        loop {
            let cand = [v[0] - lambda * dv0, v[1] - lambda * dv1];
            match residual(cand) {
                Ok(rc) if rc[0].hypot(rc[1]) < norm || lambda < 1e-3 => {
                    v = cand;
                    r = rc;
                    break;
                }
                Err(e) if lambda < 1e-3 => return Err(e),
                _ => lambda *= 0.5,
            }
        }
        let new_norm = r[0].hypot(r[1]);
        if new_norm >= norm && lambda < 1e-3 {
            norm = new_norm;
            break;
        }
        norm = new_norm;
    }
    if !(norm <= SHOOT_ACCEPT.min(SHOOT_ACCEPT * scale.max(1.0))) {
        return Err(Error::ShootingFailed { iterations: it, residual: norm });
    }
    let b = geom.profile.b(x);
    Ok(0.5 * (v[0] * v[0] + b * b * v[1] * v[1]))
}

pub fn world_function_geodesic(geom: &TubeGeometry, pair: &WorldPointPair) -> Result<f64> {
    geodesic_sigma(geom, pair.x, pair.x_prime, pair.effective_angle())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMethod {
    #[default]
    Taylor,
    Geodesic,
}

/// Minimizes the world function over windings `|w| <= w_max` around the
/// reduced angle. Returns `(sigma, w)` where `w` counts turns added to the raw
/// `delta_phi`, so the selected angle is `delta_phi + 2 pi w`.
pub fn min_winding_sigma(
    geom: &TubeGeometry,
    x: f64,
    x_prime: f64,
    delta_phi: f64,
    method: SigmaMethod,
) -> Result<(f64, i64)> {
    let (reduced, k) = reduce_angle(delta_phi);
    let wm = geom.w_max as i64;
    let mut best: Option<(f64, i64, f64)> = None;
    for wr in -wm..=wm {
        let angle = reduced + TWO_PI * wr as f64;
        let w = wr - k;
        let s = match method {
            SigmaMethod::Taylor => {
                geom.check_domain(x)?;
                geom.check_domain(x_prime)?;
                taylor_sigma(&geom.profile, x, x_prime, angle, 0.0, RadiusPairing::Endpoints)
            }
            SigmaMethod::Geodesic => geodesic_sigma(geom, x, x_prime, angle)?,
        };
        best = match best {
            None => Some((s, w, angle)),
            Some((bs, bw, ba)) => {
                let tol = 1e-12 * bs.abs().max(s.abs()).max(1e-300);
                let better = if (s - bs).abs() <= tol {
                    w.abs() < bw.abs() || (w.abs() == bw.abs() && angle < ba)
                } else {
                    s < bs
                };
                if better {
                    Some((s, w, angle))
                } else {
                    Some((bs, bw, ba))
                }
            }
        };
    }
    let (s, w, _) = best.expect("at least one winding");
    Ok((s, w))
}

/// `grad sigma . grad sigma` at the first point, from central differences of
/// the geodesic world function with step `h`. Returns `(norm, sigma)`.
pub fn sigma_gradient_norm(geom: &TubeGeometry, pair: &WorldPointPair, h: f64) -> Result<(f64, f64)> {
    let (x, xp, th) = (pair.x, pair.x_prime, pair.effective_angle());
    let s = geodesic_sigma(geom, x, xp, th)?;
    let sx = (geodesic_sigma(geom, x + h, xp, th)? - geodesic_sigma(geom, x - h, xp, th)?) / (2.0 * h);
    // Moving the first point by +h in phi shrinks the separation by h.
    let sphi = (geodesic_sigma(geom, x, xp, th - h)? - geodesic_sigma(geom, x, xp, th + h)?) / (2.0 * h);
    let b = geom.profile.b(x);
    Ok((sx * sx + sphi * sphi / (b * b), s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(p: RadiusProfile) -> TubeGeometry {
        TubeGeometry::new(p, -6.0, 6.0).unwrap()
    }

    #[test]
    fn taylor_examples() {
        let flat = geom(RadiusProfile::constant(1.0));
        let p = WorldPointPair::new(0.0, 0.3, 0.4, 0);
        assert!((world_function_taylor(&flat, &p, RadiusPairing::Endpoints).unwrap() - 0.125).abs() < 1e-15);
        let same = WorldPointPair::new(0.5, 0.5, 0.0, 0);
        assert_eq!(world_function_taylor(&flat, &same, RadiusPairing::Endpoints).unwrap(), 0.0);
        let e = geom(RadiusProfile::exponential(1.0));
        let p = WorldPointPair::new(0.0, 0.0, 0.1, 0);
        let s = world_function_taylor(&e, &p, RadiusPairing::Endpoints).unwrap();
        let expect = (0.01 - 1e-4 / 12.0) / 2.0;
        assert!((s - expect).abs() < 1e-16);
        assert!((s - 4.99583e-3).abs() < 1e-8);
    }

    #[test]
    fn explicit_pairing_overrides_leading_term() {
        let flat = geom(RadiusProfile::constant(1.0));
        let p = WorldPointPair::new(0.0, 0.0, 0.5, 0);
        let s = world_function_taylor(&flat, &p, RadiusPairing::Explicit(4.0)).unwrap();
        assert!((s - 0.5).abs() < 1e-15);
    }

    #[test]
    fn geodesic_examples() {
        let flat = geom(RadiusProfile::constant(1.0));
        let s = world_function_geodesic(&flat, &WorldPointPair::new(0.0, 0.3, 0.4, 0)).unwrap();
        assert!((s - 0.125).abs() < 1e-12);
        assert_eq!(world_function_geodesic(&flat, &WorldPointPair::new(1.0, 1.0, 0.0, 0)).unwrap(), 0.0);
        let e = geom(RadiusProfile::exponential(1.0));
        let pair = WorldPointPair::new(0.0, 0.0, 0.1, 0);
        let sg = world_function_geodesic(&e, &pair).unwrap();
        let st = world_function_taylor(&e, &pair, RadiusPairing::Endpoints).unwrap();
        assert!((sg - st).abs() < 2.0 * sg.powf(2.5), "{sg} vs {st}");
    }

    #[test]
    fn taylor_gradient_matches_finite_differences() {
        let p = RadiusProfile::exp_tanh(0.4);
        let h = 1e-5;
        for &(x, xp, th) in &[(0.1, 0.4, 0.3), (-0.7, -0.2, -0.5), (1.2, 0.9, 0.05)] {
            let (s, sx, sth) = taylor_sigma_grad(&p, x, xp, th);
            let f = |a: f64, t: f64| taylor_sigma(&p, x, a, t, 0.0, RadiusPairing::Endpoints);
            assert!((s - f(xp, th)).abs() < 1e-15);
            assert!((sx - (f(xp + h, th) - f(xp - h, th)) / (2.0 * h)).abs() < 1e-9);
            assert!((sth - (f(xp, th + h) - f(xp, th - h)) / (2.0 * h)).abs() < 1e-9);
        }
    }

    #[test]
    fn geodesic_leaving_domain_fails() {
        let g = TubeGeometry::new(RadiusProfile::exponential(1.0), -0.05, 0.05).unwrap();
        let r = geodesic_sigma(&g, 0.0, 0.0, 2.5);
        assert!(r.is_err());
    }

    #[test]
    fn winding_examples() {
        let flat = geom(RadiusProfile::constant(1.0));
        let (s, w) = min_winding_sigma(&flat, 0.0, 0.0, 1.9 * PI, SigmaMethod::Taylor).unwrap();
        assert_eq!(w, -1);
        assert!((s - 0.5 * (0.1 * PI).powi(2)).abs() < 1e-12);
        let (s, w) = min_winding_sigma(&flat, 0.0, 0.3, 0.0, SigmaMethod::Taylor).unwrap();
        assert_eq!(w, 0);
        assert!((s - 0.045).abs() < 1e-15);
        let two = geom(RadiusProfile::constant(2.0));
        for m in [SigmaMethod::Taylor, SigmaMethod::Geodesic] {
            let (s, w) = min_winding_sigma(&two, 0.0, 0.0, PI, m).unwrap();
            assert_eq!(w, 0);
            assert!((s - 2.0 * PI * PI).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_reduction() {
        let p = WorldPointPair::new(0.0, 0.0, 1.9 * PI, 0);
        assert!(p.delta_phi.abs() <= PI);
        assert_eq!(p.winding, 1);
        assert!((p.effective_angle() - 1.9 * PI).abs() < 1e-14);
        let (r, k) = reduce_angle(PI);
        assert_eq!((r, k), (-PI, 1));
    }

    #[test]
    fn gradient_identity_flat_and_curved() {
        for p in [RadiusProfile::constant(1.3), RadiusProfile::exp_tanh(0.3)] {
            let g = geom(p);
            let pair = WorldPointPair::new(0.2, 0.5, 0.3, 0);
            let (n, s) = sigma_gradient_norm(&g, &pair, 1e-4).unwrap();
            assert!((n - 2.0 * s).abs() < 1e-5 * 2.0 * s, "{n} vs {}", 2.0 * s);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn taylor_symmetric(x in -2.0f64..2.0, dx in -0.5f64..0.5, th in -0.6f64..0.6, amp in -0.5f64..0.5) {
            let g = geom(RadiusProfile::exp_tanh(amp));
            let p = WorldPointPair::new(x, x + dx, th, 0);
            let a = world_function_taylor(&g, &p, RadiusPairing::Endpoints).unwrap();
            let b = world_function_taylor(&g, &p.swapped(), RadiusPairing::Endpoints).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
        }

        #[test]
        fn reduced_angle_in_range(a in -50.0f64..50.0) {
            let (r, k) = reduce_angle(a);
            prop_assert!((-PI..PI).contains(&r));
            prop_assert!((r + TWO_PI * k as f64 - a).abs() < 1e-12);
        }
    }
}
