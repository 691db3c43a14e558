//! Radius profiles `b(x)` of the circle fibre, optionally coupled to an
//! accumulated history variable `eta` through `ln b(x, eta) = ln b(x) + mu eta + nu eta^2 / 2`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value and first three x-derivatives of `b` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub b: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl Jet {
    /// `b'/b`
    pub fn log_slope(&self) -> f64 {
        self.d1 / self.b
    }

    /// `b''/b`
    pub fn curvature_ratio(&self) -> f64 {
        self.d2 / self.b
    }

    fn scaled(self, f: f64) -> Jet {
        Jet { b: self.b * f, d1: self.d1 * f, d2: self.d2 * f, d3: self.d3 * f }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProfileKind {
    /// `b = value`
    Constant { value: f64 },
    /// `b = scale * exp(lambda x)`
    Exponential { scale: f64, lambda: f64 },
    /// `b = scale * (1 + amp tanh((x - center) / width))`
    TanhStep { scale: f64, amp: f64, center: f64, width: f64 },
    /// `b = scale * (1 + amp exp(-(x - center)^2 / (2 width^2)))`
    GaussianBump { scale: f64, amp: f64, center: f64, width: f64 },
    /// `b = scale * exp(amp tanh((x - center) / width))`
    ExpTanh { scale: f64, amp: f64, center: f64, width: f64 },
}

/// Coupling of `ln b` to the history variable.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HistoryCoupling {
    pub mu: f64,
    #[serde(default)]
    pub nu: f64,
}

impl HistoryCoupling {
    pub fn linear(mu: f64) -> Self {
        HistoryCoupling { mu, nu: 0.0 }
    }

    /// `ln b(x, eta) - ln b(x, 0)`
    pub fn log_factor(&self, eta: f64) -> f64 {
        self.mu * eta + 0.5 * self.nu * eta * eta
    }

    /// `d ln b / d eta`
    pub fn dlnb_deta(&self, eta: f64) -> f64 {
        self.mu + self.nu * eta
    }
}

/// Analytic radius profile with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileConfig", into = "ProfileConfig")]
pub struct RadiusProfile {
    kind: ProfileKind,
    coupling: Option<HistoryCoupling>,
}

fn tanh_derivs(u: f64) -> [f64; 4] {
    let t = u.tanh();
    let s = 1.0 - t * t;
    [t, s, -2.0 * t * s, -2.0 * s * (1.0 - 3.0 * t * t)]
}

impl RadiusProfile {
    pub fn new(kind: ProfileKind) -> Result<Self> {
        let check_pos = |name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                Err(Error::param(name, format!("must be positive and finite, got {v}")))
            } else {
                Ok(())
            }
        };
        let check_finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, "must be finite"))
            }
        };
        match kind {
            ProfileKind::Constant { value } => check_pos("b", value)?,
            ProfileKind::Exponential { scale, lambda } => {
                check_pos("scale", scale)?;
                check_finite("lambda", lambda)?;
            }
            ProfileKind::TanhStep { scale, amp, center, width } => {
                check_pos("scale", scale)?;
                check_pos("width", width)?;
                check_finite("center", center)?;
                if !(amp.abs() < 1.0) {
                    return Err(Error::param("amp", "tanh step needs |amp| < 1 to keep b > 0"));
                }
            }
            ProfileKind::GaussianBump { scale, amp, center, width } => {
                check_pos("scale", scale)?;
                check_pos("width", width)?;
                check_finite("center", center)?;
                if !(amp > -1.0 && amp.is_finite()) {
                    return Err(Error::param("amp", "gaussian bump needs amp > -1 to keep b > 0"));
                }
            }
            ProfileKind::ExpTanh { scale, amp, center, width } => {
                check_pos("scale", scale)?;
                check_pos("width", width)?;
                check_finite("center", center)?;
                check_finite("amp", amp)?;
            }
        }
        Ok(RadiusProfile { kind, coupling: None })
    }

    pub fn constant(value: f64) -> Self {
        Self::new(ProfileKind::Constant { value }).expect("positive constant radius")
    }

    pub fn exponential(lambda: f64) -> Self {
        Self::new(ProfileKind::Exponential { scale: 1.0, lambda }).expect("finite lambda")
    }

    /// `1 + amp tanh(x)`
    pub fn tanh_step(amp: f64) -> Result<Self> {
        Self::new(ProfileKind::TanhStep { scale: 1.0, amp, center: 0.0, width: 1.0 })
    }

    /// `exp(amp tanh(x))`
    pub fn exp_tanh(amp: f64) -> Self {
        Self::new(ProfileKind::ExpTanh { scale: 1.0, amp, center: 0.0, width: 1.0 })
            .expect("finite amplitude")
    }

    pub fn gaussian_bump(amp: f64, width: f64) -> Result<Self> {
        Self::new(ProfileKind::GaussianBump { scale: 1.0, amp, center: 0.0, width })
    }

    pub fn with_history_coupling(mut self, coupling: HistoryCoupling) -> Self {
        self.coupling = Some(coupling);
        self
    }

    pub fn kind(&self) -> &ProfileKind {
        &self.kind
    }

    pub fn history_coupling(&self) -> Option<HistoryCoupling> {
        self.coupling
    }

    /// Jet of the static profile `b(x)`.
    pub fn jet(&self, x: f64) -> Jet {
        match self.kind {
            ProfileKind::Constant { value } => Jet { b: value, d1: 0.0, d2: 0.0, d3: 0.0 },
            ProfileKind::Exponential { scale, lambda } => {
                let b = scale * (lambda * x).exp();
                Jet { b, d1: lambda * b, d2: lambda * lambda * b, d3: lambda.powi(3) * b }
            }
            ProfileKind::TanhStep { scale, amp, center, width } => {
                let [t, t1, t2, t3] = tanh_derivs((x - center) / width);
                let a = scale * amp;
                Jet {
                    b: scale * (1.0 + amp * t),
                    d1: a * t1 / width,
                    d2: a * t2 / (width * width),
                    d3: a * t3 / width.powi(3),
                }
            }
            ProfileKind::GaussianBump { scale, amp, center, width } => {
                let u = (x - center) / width;
                let e = (-0.5 * u * u).exp();
                let a = scale * amp;
                Jet {
                    b: scale * (1.0 + amp * e),
                    d1: -a * u * e / width,
                    d2: a * (u * u - 1.0) * e / (width * width),
                    d3: a * (3.0 * u - u * u * u) * e / width.powi(3),
                }
            }
            ProfileKind::ExpTanh { scale, amp, center, width } => {
                let [t, t1, t2, t3] = tanh_derivs((x - center) / width);
                let g1 = amp * t1 / width;
                let g2 = amp * t2 / (width * width);
                let g3 = amp * t3 / width.powi(3);
                let b = scale * (amp * t).exp();
                Jet {
                    b,
                    d1: b * g1,
                    d2: b * (g2 + g1 * g1),
                    d3: b * (g3 + 3.0 * g1 * g2 + g1 * g1 * g1),
                }
            }
        }
    }

    /// Jet of `b(x, eta)` in x at fixed history value.
    pub fn jet_at(&self, x: f64, eta: f64) -> Jet {
        let j = self.jet(x);
        match self.coupling {
            Some(c) if eta != 0.0 => j.scaled(c.log_factor(eta).exp()),
            _ => j,
        }
    }

    pub fn b(&self, x: f64) -> f64 {
        self.jet(x).b
    }

    pub fn b_at(&self, x: f64, eta: f64) -> f64 {
        self.jet_at(x, eta).b
    }

    /// `d ln b / d eta`, zero without a history coupling.
    pub fn dlnb_deta(&self, eta: f64) -> f64 {
        self.coupling.map_or(0.0, |c| c.dlnb_deta(eta))
    }

    /// Parses the short form used on the command line, e.g. `exp:lambda=1`
    /// or `tanh:amp=0.2,width=2`.
    pub fn parse_short(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut parameters = BTreeMap::new();
        for item in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("profile parameter `{item}` is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("profile parameter `{k}` is not a number")))?;
            parameters.insert(k.trim().to_string(), v);
        }
        RadiusProfile::try_from(ProfileConfig { kind: kind.trim().to_string(), parameters, history_coupling: None })
    }
}

impl fmt::Display for RadiusProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cfg = ProfileConfig::from(*self);
        write!(f, "{}", cfg.kind)?;
        let mut sep = ':';
        for (k, v) in &cfg.parameters {
            write!(f, "{sep}{k}={v}")?;
            sep = ',';
        }
        Ok(())
    }
}

/// Serialized form: `{"kind": ..., "parameters": {...}, "history_coupling": {"mu": ..}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub kind: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_coupling: Option<HistoryCoupling>,
}

const KIND_NAMES: &[(&str, &[&str])] = &[
    ("constant", &["const"]),
    ("exponential", &["exp"]),
    ("tanh_step", &["tanh", "tanh-step"]),
    ("gaussian_bump", &["gauss", "gaussian-bump"]),
    ("exp_tanh", &["exptanh", "exp-tanh"]),
];

fn canonical_kind(name: &str) -> Option<&'static str> {
    KIND_NAMES
        .iter()
        .find(|(canon, aliases)| *canon == name || aliases.contains(&name))
        .map(|(canon, _)| *canon)
}

impl TryFrom<ProfileConfig> for RadiusProfile {
    type Error = Error;

    fn try_from(cfg: ProfileConfig) -> Result<Self> {
        let kind = canonical_kind(&cfg.kind)
            .ok_or_else(|| Error::Config(format!("unknown profile kind `{}`", cfg.kind)))?;
        let allowed: &[&str] = match kind {
            "constant" => &["b"],
            "exponential" => &["scale", "lambda"],
            _ => &["scale", "amp", "center", "width"],
        };
        if let Some(bad) = cfg.parameters.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "profile `{kind}` has no parameter `{bad}` (allowed: {})",
                allowed.join(", ")
            )));
        }
        let get = |k: &str, default: f64| cfg.parameters.get(k).copied().unwrap_or(default);
        let pk = match kind {
            "constant" => ProfileKind::Constant { value: get("b", 1.0) },
            "exponential" => ProfileKind::Exponential { scale: get("scale", 1.0), lambda: get("lambda", 1.0) },
            "tanh_step" => ProfileKind::TanhStep {
                scale: get("scale", 1.0),
                amp: get("amp", 0.0),
                center: get("center", 0.0),
                width: get("width", 1.0),
            },
            "gaussian_bump" => ProfileKind::GaussianBump {
                scale: get("scale", 1.0),
                amp: get("amp", 0.0),
                center: get("center", 0.0),
                width: get("width", 1.0),
            },
            _ => ProfileKind::ExpTanh {
                scale: get("scale", 1.0),
                amp: get("amp", 0.0),
                center: get("center", 0.0),
                width: get("width", 1.0),
            },
        };
        let mut p = RadiusProfile::new(pk)?;
        if let Some(c) = cfg.history_coupling {
            if !(c.mu.is_finite() && c.nu.is_finite()) {
                return Err(Error::param("history_coupling", "mu and nu must be finite"));
            }
            p = p.with_history_coupling(c);
        }
        Ok(p)
    }
}

impl From<RadiusProfile> for ProfileConfig {
    fn from(p: RadiusProfile) -> Self {
        let mut parameters = BTreeMap::new();
        let kind = match p.kind {
            ProfileKind::Constant { value } => {
                parameters.insert("b".into(), value);
                "constant"
            }
            ProfileKind::Exponential { scale, lambda } => {
                parameters.insert("scale".into(), scale);
                parameters.insert("lambda".into(), lambda);
                "exponential"
            }
            ProfileKind::TanhStep { scale, amp, center, width }
            | ProfileKind::GaussianBump { scale, amp, center, width }
            | ProfileKind::ExpTanh { scale, amp, center, width } => {
                parameters.insert("scale".into(), scale);
                parameters.insert("amp".into(), amp);
                parameters.insert("center".into(), center);
                parameters.insert("width".into(), width);
                match p.kind {
                    ProfileKind::TanhStep { .. } => "tanh_step",
                    ProfileKind::GaussianBump { .. } => "gaussian_bump",
                    _ => "exp_tanh",
                }
            }
        };
        ProfileConfig { kind: kind.to_string(), parameters, history_coupling: p.coupling }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_profiles() -> Vec<RadiusProfile> {
        vec![
            RadiusProfile::constant(1.7),
            RadiusProfile::exponential(0.5),
            RadiusProfile::new(ProfileKind::TanhStep { scale: 1.2, amp: 0.3, center: 0.4, width: 1.5 }).unwrap(),
            RadiusProfile::new(ProfileKind::GaussianBump { scale: 0.9, amp: 0.5, center: -0.2, width: 0.8 }).unwrap(),
            RadiusProfile::new(ProfileKind::ExpTanh { scale: 1.0, amp: 0.3, center: 0.1, width: 1.1 }).unwrap(),
        ]
    }

    #[test]
    fn closed_form_derivatives_match_finite_differences() {
        let h = 1e-4;
        for p in all_profiles() {
            for i in 0..41 {
                let x = -4.0 + 0.2 * i as f64;
                let j = p.jet(x);
                let (jp, jm) = (p.jet(x + h), p.jet(x - h));
                let fd1 = (jp.b - jm.b) / (2.0 * h);
                let fd2 = (jp.b - 2.0 * j.b + jm.b) / (h * h);
                let fd3 = (jp.d2 - jm.d2) / (2.0 * h);
                let rel = |a: f64, b: f64, scale: f64| (a - b).abs() / scale.max(1e-3);
                assert!(rel(fd1, j.d1, j.d1.abs().max(j.b)) < 1e-6, "{p} d1 at {x}");
                assert!(rel(fd2, j.d2, j.d2.abs().max(j.b)) < 1e-6, "{p} d2 at {x}");
                assert!(rel(fd3, j.d3, j.d3.abs().max(j.b)) < 1e-6, "{p} d3 at {x}");
                assert!(j.b > 0.0);
            }
        }
    }

    #[test]
    fn history_derivative_matches_finite_difference() {
        let p = RadiusProfile::tanh_step(0.2).unwrap().with_history_coupling(HistoryCoupling { mu: 0.3, nu: 0.7 });
        let h = 1e-4;
        for &eta in &[-0.5, 0.0, 0.4, 1.3] {
            let fd = (p.b_at(0.3, eta + h).ln() - p.b_at(0.3, eta - h).ln()) / (2.0 * h);
            assert!((fd - p.dlnb_deta(eta)).abs() < 1e-6 * p.dlnb_deta(eta).abs().max(1.0));
        }
    }

    #[test]
    fn rejects_nonpositive_radius() {
        assert!(RadiusProfile::tanh_step(1.0).is_err());
        assert!(RadiusProfile::gaussian_bump(-1.0, 1.0).is_err());
        assert!(RadiusProfile::new(ProfileKind::Constant { value: 0.0 }).is_err());
    }

    #[test]
    fn short_form_and_json_agree() {
        let a = RadiusProfile::parse_short("exp:lambda=1").unwrap();
        assert_eq!(a, RadiusProfile::exponential(1.0));
        let b = RadiusProfile::parse_short("const:b=2").unwrap();
        assert_eq!(b.b(3.0), 2.0);
        let json = serde_json::to_string(&RadiusProfile::exp_tanh(0.3)).unwrap();
        let back: RadiusProfile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, RadiusProfile::exp_tanh(0.3));
        assert!(RadiusProfile::parse_short("tanh:lambda=1").is_err());
        assert!(RadiusProfile::parse_short("spiral:amp=1").is_err());
    }
}
