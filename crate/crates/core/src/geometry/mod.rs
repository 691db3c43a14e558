//! Tube geometry `ds^2 = dx^2 + b(x)^2 dphi^2` with a circle fibre.

mod profile;
mod world;

pub use profile::{HistoryCoupling, Jet, ProfileConfig, ProfileKind, RadiusProfile};
pub use world::{
    geodesic_sigma, min_winding_sigma, reduce_angle, sigma_gradient_norm, taylor_sigma, taylor_sigma_grad, world_function_geodesic,
    world_function_taylor, RadiusPairing, SigmaMethod, WorldPointPair,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cutoff on the number of windings summed in circle kernels.
pub const DEFAULT_W_MAX: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeGeometry {
    pub profile: RadiusProfile,
    /// Fibre dimension; only `d = 1` is supported end-to-end.
    #[serde(default = "one")]
    pub d: u32,
    #[serde(default = "two_pi")]
    pub phi_period: f64,
    pub x_domain: (f64, f64),
    #[serde(default = "default_w_max")]
    pub w_max: u32,
}

fn one() -> u32 {
    1
}
fn two_pi() -> f64 {
    2.0 * PI
}
fn default_w_max() -> u32 {
    DEFAULT_W_MAX
}

impl TubeGeometry {
    pub fn new(profile: RadiusProfile, x_min: f64, x_max: f64) -> Result<Self> {
        let g = TubeGeometry { profile, d: 1, phi_period: 2.0 * PI, x_domain: (x_min, x_max), w_max: DEFAULT_W_MAX };
        g.validate()?;
        Ok(g)
    }

    pub fn with_w_max(mut self, w_max: u32) -> Self {
        self.w_max = w_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.x_domain;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::param("x_domain", format!("need finite x_min < x_max, got [{a}, {b}]")));
        }
        if self.d != 1 {
            return Err(Error::param("d", "only the circle fibre d = 1 is implemented"));
        }
        if (self.phi_period - 2.0 * PI).abs() > 1e-12 {
            return Err(Error::param("phi_period", "the circle fibre has period 2 pi"));
        }
        // Sample positivity across the domain.
        for i in 0..=256 {
            let x = a + (b - a) * i as f64 / 256.0;
            let v = self.profile.b(x);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param("profile", format!("b({x}) = {v} is not positive")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_domain.0 && x <= self.x_domain.1
    }

    pub fn check_domain(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutsideDomain { x, min: self.x_domain.0, max: self.x_domain.1 })
        }
    }

    /// `(g_xx, g_phiphi)`
    pub fn metric(&self, x: f64) -> (f64, f64) {
        let b = self.profile.b(x);
        (1.0, b * b)
    }

    /// Covariant measure `sqrt(g) = b^d`.
    pub fn sqrt_g(&self, x: f64) -> f64 {
        self.profile.b(x).powi(self.d as i32)
    }

    pub fn scalar_curvature(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(curvature_of(&self.profile.jet(x)))
    }
}

/// `R = -2 b''/b` for the d = 1 tube.
pub fn curvature_of(jet: &Jet) -> f64 {
    -2.0 * jet.d2 / jet.b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curvature_examples() {
        let flat = TubeGeometry::new(RadiusProfile::constant(1.0), -5.0, 5.0).unwrap();
        assert_eq!(flat.scalar_curvature(1.3).unwrap(), 0.0);
        let e = TubeGeometry::new(RadiusProfile::exponential(1.0), -5.0, 5.0).unwrap();
        assert!((e.scalar_curvature(0.0).unwrap() + 2.0).abs() < 1e-15);
        let h = TubeGeometry::new(RadiusProfile::exponential(0.5), -5.0, 5.0).unwrap();
        for x in [-3.0, 0.0, 2.5] {
            assert!((h.scalar_curvature(x).unwrap() + 0.5).abs() < 1e-14);
        }
        assert!(matches!(h.scalar_curvature(7.0), Err(Error::OutsideDomain { .. })));
    }

    #[test]
    fn metric_components() {
        let g = TubeGeometry::new(RadiusProfile::exp_tanh(0.3), -4.0, 4.0).unwrap();
        let (gxx, gpp) = g.metric(0.7);
        assert_eq!(gxx, 1.0);
        assert!((gpp - g.profile.b(0.7).powi(2)).abs() < 1e-15);
        assert_eq!(g.sqrt_g(0.7), g.profile.b(0.7));
    }

    #[test]
    fn rejects_bad_domain() {
        assert!(TubeGeometry::new(RadiusProfile::constant(1.0), 1.0, -1.0).is_err());
    }
}
