//! Windowed quadrature for oscillatory Gaussian-type integrals and
//! extrapolation of the complex-time regulator to zero.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Regulator strengths used for extrapolation to `delta -> 0`.
pub const REGULATOR_DELTAS: [f64; 3] = [0.05, 0.025, 0.0125];

/// Smooth cutoff `w(r) = erfc((|r| - plateau)/ramp) / 2` sampled with spacing `step`
/// out to `plateau + reach * ramp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothWindow {
    pub plateau: f64,
    pub ramp: f64,
    pub step: f64,
    pub reach: f64,
}

impl Default for SmoothWindow {
    fn default() -> Self {
        SmoothWindow { plateau: 12.0, ramp: 2.0, step: 0.05, reach: 6.0 }
    }
}

impl SmoothWindow {
    pub fn weight(&self, r: f64) -> f64 {
        0.5 * libm::erfc((r.abs() - self.plateau) / self.ramp)
    }

    /// Trapezoid nodes `(r, step * w(r))`, symmetric about zero.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        let edge = self.plateau + self.reach * self.ramp;
        let n = (edge / self.step).ceil() as i64;
        (-n..=n)
            .map(|i| {
                let r = i as f64 * self.step;
                (r, self.step * self.weight(r))
            })
            .filter(|&(_, w)| w > 0.0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolated {
    pub value: Vec<Complex64>,
    /// Difference between the quadratic and linear extrapolants, maximized over components.
    pub error: f64,
}

/// Evaluates `f` at the three regulator strengths (successively halved) and
/// extrapolates each component quadratically to `delta = 0`.
pub fn extrapolate_regulator(
    deltas: &[f64; 3],
    mut f: impl FnMut(f64) -> Result<Vec<Complex64>>,
) -> Result<Extrapolated> {
    let [d0, d1, d2] = *deltas;
    let halving = |a: f64, b: f64| (a - 2.0 * b).abs() <= 1e-12 * a;
    if !(d0 > 0.0 && halving(d0, d1) && halving(d1, d2)) {
        return Err(Error::Extrapolation(format!("regulators must halve successively, got {deltas:?}")));
    }
    let r0 = f(d0)?;
    let r1 = f(d1)?;
    let r2 = f(d2)?;
    if r0.len() != r1.len() || r1.len() != r2.len() {
        return Err(Error::Extrapolation("component count changed between regulators".into()));
    }
    let mut value = Vec::with_capacity(r0.len());
    let mut error: f64 = 0.0;
    for i in 0..r0.len() {
        let quad = (r0[i] - 6.0 * r1[i] + 8.0 * r2[i]) / 3.0;
        let lin = 2.0 * r2[i] - r1[i];
        if !(quad.re.is_finite() && quad.im.is_finite()) {
            return Err(Error::Extrapolation(format!("component {i} is not finite")));
        }
        error = error.max((quad - lin).norm());
        value.push(quad);
    }
    Ok(Extrapolated { value, error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extrapolation_removes_quadratic_dependence() {
        let e = extrapolate_regulator(&REGULATOR_DELTAS, |d| {
            Ok(vec![Complex64::new(1.0 + 3.0 * d - 7.0 * d * d, 2.0 * d)])
        })
        .unwrap();
        assert!((e.value[0] - Complex64::new(1.0, 0.0)).norm() < 1e-13);
        assert!(extrapolate_regulator(&[0.05, 0.03, 0.01], |_| Ok(vec![])).is_err());
    }

    #[test]
    fn window_integrates_gaussian() {
        let w = SmoothWindow::default();
        let s: f64 = w.nodes().iter().map(|&(r, wt)| wt * (-r * r / 2.0).exp()).sum();
        assert!((s - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10, "{s}");
        // Oscillatory Fresnel integral converges through the window.
        let f: Complex64 =
            w.nodes().iter().map(|&(r, wt)| wt * Complex64::new(0.0, r * r / 2.0).exp()).sum();
        let exact = (2.0 * std::f64::consts::PI * Complex64::i()).sqrt();
        assert!((f - exact).norm() < 1e-10, "{f} vs {exact}");
    }
}
