//! Declarative verification scenarios: JSON specs in, metrics, pass/fail
//! criteria, CSV tables and a JSON report out.

mod scenarios;
pub mod short_time;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RadiusProfile;
use crate::kernels::PhysicsConstants;
use crate::spectral::WaveField;

pub use scenarios::{
    BruteForceEquivalence, Ehrenfest, FormEquivalence, GeometryIdentities, HarmonicControl, HistoryEquivalence, MomentIdentity,
    OracleCompare, Packet, ShortTimeOrder, SlicingConvergence, TimeDependentUnitarity, XiScan,
};

/// A complete scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "PhysicsConstants::natural")]
    pub constants: PhysicsConstants,
    #[serde(default = "flat_profile")]
    pub profile: RadiusProfile,
    pub scenario: Scenario,
    /// Threshold per metric; each entry becomes one pass/fail criterion.
    pub tolerances: BTreeMap<String, f64>,
}

fn flat_profile() -> RadiusProfile {
    RadiusProfile::constant(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    OracleCompare(OracleCompare),
    Ehrenfest(Ehrenfest),
    SlicingConvergence(SlicingConvergence),
    BruteForceEquivalence(BruteForceEquivalence),
    HistoryEquivalence(HistoryEquivalence),
    MomentIdentity(MomentIdentity),
    XiScan(XiScan),
    FormEquivalence(FormEquivalence),
    ShortTimeOrder(ShortTimeOrder),
    TimeDependentUnitarity(TimeDependentUnitarity),
    GeometryIdentities(GeometryIdentities),
}

/// How a metric is compared against its tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">=")]
    AtLeast,
}

impl Comparison {
    pub fn holds(&self, value: f64, tolerance: f64) -> bool {
        match self {
            Comparison::AtMost => value <= tolerance,
            Comparison::Below => value < tolerance,
            Comparison::AtLeast => value >= tolerance,
        }
    }

    pub fn symbol(&self) -> &'static str {
        match self {
            Comparison::AtMost => "<=",
            Comparison::Below => "<",
            Comparison::AtLeast => ">=",
        }
    }
}

impl Scenario {
    pub fn kind(&self) -> &'static str {
        match self {
            Scenario::OracleCompare(_) => "oracle_compare",
            Scenario::Ehrenfest(_) => "ehrenfest",
            Scenario::SlicingConvergence(_) => "slicing_convergence",
            Scenario::BruteForceEquivalence(_) => "brute_force_equivalence",
            Scenario::HistoryEquivalence(_) => "history_equivalence",
            Scenario::MomentIdentity(_) => "moment_identity",
            Scenario::XiScan(_) => "xi_scan",
            Scenario::FormEquivalence(_) => "form_equivalence",
            Scenario::ShortTimeOrder(_) => "short_time_order",
            Scenario::TimeDependentUnitarity(_) => "time_dependent_unitarity",
            Scenario::GeometryIdentities(_) => "geometry_identities",
        }
    }

    /// Metrics that may carry a tolerance, with their comparison.
    pub fn criteria_metrics(&self) -> &'static [(&'static str, Comparison)] {
        use Comparison::*;
        match self {
            Scenario::OracleCompare(_) => &[
                ("delta_v_max_abs", AtMost),
                ("l2_with_dv", AtMost),
                ("with_without_ratio", AtMost),
                ("refinement_ratio", Below),
            ],
            Scenario::Ehrenfest(_) => &[
                ("max_residual_with_dv", AtMost),
                ("with_without_ratio", AtMost),
                ("control_max_residual", Below),
            ],
            Scenario::SlicingConvergence(_) => {
                &[("free_max_rel_error", Below), ("harmonic_monotone", AtLeast), ("harmonic_slope", AtLeast)]
            }
            Scenario::BruteForceEquivalence(_) => &[("rel_discrepancy", Below), ("refinement_ratio", Below)],
            Scenario::HistoryEquivalence(_) => &[
                ("rel_discrepancy", Below),
                ("cancellation_slope", AtLeast),
                ("f_one_max_difference", AtMost),
                ("mu_zero_continuity", AtMost),
            ],
            Scenario::MomentIdentity(_) => &[("residual_slope", AtLeast), ("flat_residual", Below)],
            Scenario::XiScan(_) | Scenario::FormEquivalence(_) => &[("max_form_difference", AtMost)],
            Scenario::ShortTimeOrder(_) => &[("slope_full", AtLeast), ("slope_mode", AtLeast)],
            Scenario::TimeDependentUnitarity(_) => {
                &[("max_drift_per_step", Below), ("ablation_slope_deviation", AtMost)]
            }
            Scenario::GeometryIdentities(_) => &[
                ("symmetry_max", AtMost),
                ("taylor_slope", AtLeast),
                ("gradient_identity_max_rel", AtMost),
            ],
        }
    }
}

/// A validation finding located by JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub pointer: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{p}: {}", self.message)
    }
}

fn pointer_from_path(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => {}
        }
    }
    out
}

fn probe<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Option<Diagnostic> {
    serde_path_to_error::deserialize::<_, T>(v).err().map(|e| Diagnostic {
        pointer: format!("/scenario{}", pointer_from_path(e.path())),
        message: e.inner().to_string(),
    })
}

/// The tagged scenario block is buffered before it reaches its variant, which
/// hides the inner path; re-parse it against the concrete type to recover it.
fn scenario_diagnostic(text: &str) -> Option<Diagnostic> {
    let root: serde_json::Value = serde_json::from_str(text).ok()?;
    let mut block = root.get("scenario")?.as_object()?.clone();
    let kind = block.remove("kind")?.as_str()?.to_string();
    let v = serde_json::Value::Object(block);
    match kind.as_str() {
        "oracle_compare" => probe::<OracleCompare>(v),
        "ehrenfest" => probe::<Ehrenfest>(v),
        "slicing_convergence" => probe::<SlicingConvergence>(v),
        "brute_force_equivalence" => probe::<BruteForceEquivalence>(v),
        "history_equivalence" => probe::<HistoryEquivalence>(v),
        "moment_identity" => probe::<MomentIdentity>(v),
        "xi_scan" => probe::<XiScan>(v),
        "form_equivalence" => probe::<FormEquivalence>(v),
        "short_time_order" => probe::<ShortTimeOrder>(v),
        "time_dependent_unitarity" => probe::<TimeDependentUnitarity>(v),
        "geometry_identities" => probe::<GeometryIdentities>(v),
        _ => None,
    }
}

/// Parses and validates a spec, reporting problems as pointer diagnostics.
pub fn parse_spec(text: &str) -> std::result::Result<ExperimentSpec, Vec<Diagnostic>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_from_path(e.path());
        let refined = if pointer == "/scenario" { scenario_diagnostic(text) } else { None };
        vec![refined.unwrap_or(Diagnostic { pointer, message: e.inner().to_string() })]
    })?;
    let diags = validate(&spec);
    if diags.is_empty() {
        Ok(spec)
    } else {
        Err(diags)
    }
}

pub fn load_spec(path: &Path) -> std::result::Result<ExperimentSpec, Vec<Diagnostic>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![Diagnostic { pointer: String::new(), message: format!("cannot read {}: {e}", path.display()) }])?;
    parse_spec(&text)
}

/// Semantic checks beyond the schema: physical constants, tolerance keys,
/// grid rules of the scenario.
pub fn validate(spec: &ExperimentSpec) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    if spec.name.trim().is_empty() {
        d.push(Diagnostic { pointer: "/name".into(), message: "must not be empty".into() });
    }
    if let Err(e) = spec.constants.validate() {
        d.push(Diagnostic { pointer: "/constants".into(), message: e.to_string() });
    }
    let known = spec.scenario.criteria_metrics();
    for (k, v) in &spec.tolerances {
        if !known.iter().any(|(m, _)| m == k) {
            let names: Vec<&str> = known.iter().map(|(m, _)| *m).collect();
            d.push(Diagnostic {
                pointer: format!("/tolerances/{k}"),
                message: format!("no metric '{k}' for kind {}; expected one of {}", spec.scenario.kind(), names.join(", ")),
            });
        }
        if !v.is_finite() {
            d.push(Diagnostic { pointer: format!("/tolerances/{k}"), message: "must be finite".into() });
        }
    }
    scenarios::validate_scenario(spec, &mut d);
    d
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionOutcome {
    pub metric: String,
    pub value: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: String,
    /// The spec with all defaults expanded.
    pub spec: ExperimentSpec,
    pub metrics: BTreeMap<String, f64>,
    pub criteria: Vec<CriterionOutcome>,
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
    /// Module error that stopped the scenario early, if any.
    pub error: Option<String>,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Metrics and artifacts accumulated while a scenario runs.
#[derive(Debug, Default)]
pub(crate) struct Outcome {
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub stem: String,
}

impl Outcome {
    pub fn set(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    /// Writes `file` under the output directory, if one was given.
    pub fn write_csv(&mut self, file: &str, header: &str, rows: &[Vec<f64>]) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let path = dir.join(format!("{}_{file}", self.stem));
        let mut s = String::with_capacity(64 * (rows.len() + 1));
        s.push_str(header);
        s.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.12e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        std::fs::write(&path, s)?;
        self.artifacts.push(path.display().to_string());
        Ok(())
    }
}

/// Runs a validated spec. With `out_dir`, CSV tables and `<name>_report.json`
/// are written there. A module error ends the scenario but still yields a
/// (failed) report carrying the metrics gathered so far.
pub fn run(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    let diags = validate(spec);
    if !diags.is_empty() {
        let msg: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(Error::Config(msg.join("; ")));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let stem: String = spec.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    let mut out = Outcome { out_dir: out_dir.map(Path::to_path_buf), stem: stem.clone(), ..Default::default() };
    let start = Instant::now();
    let res = scenarios::run_scenario(spec, &mut out);
    let wall = start.elapsed().as_secs_f64();
    let error = res.err().map(|e| format!("scenario '{}' ({}): {e}", spec.name, spec.scenario.kind()));
    let mut criteria = Vec::new();
    for (metric, cmp) in spec.scenario.criteria_metrics() {
        if let Some(&tol) = spec.tolerances.get(*metric) {
            let value = out.metrics.get(*metric).copied().unwrap_or(f64::NAN);
            criteria.push(CriterionOutcome {
                metric: metric.to_string(),
                value,
                comparison: *cmp,
                tolerance: tol,
                passed: cmp.holds(value, tol),
            });
        }
    }
    let passed = error.is_none() && criteria.iter().all(|c| c.passed);
    let mut report = ExperimentReport {
        name: spec.name.clone(),
        kind: spec.scenario.kind().to_string(),
        spec: spec.clone(),
        metrics: out.metrics,
        criteria,
        artifacts: out.artifacts,
        wall_time_s: wall,
        error,
        passed,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(format!("{stem}_report.json"));
        report.artifacts.push(path.display().to_string());
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
    }
    Ok(report)
}

/// Norm used by [`compare_fields`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldNorm {
    L2,
    Linf,
}

/// `|b - a| / |a|` over grid values, with `a` the reference. Falls back to
/// the absolute difference when the reference vanishes.
pub fn compare_fields(a: &WaveField, b: &WaveField, norm: FieldNorm) -> Result<f64> {
    a.check_same_grid(b)?;
    let (num, den) = match norm {
        FieldNorm::L2 => {
            let n: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm_sqr()).sum();
            let d: f64 = a.values.iter().map(|x| x.norm_sqr()).sum();
            (n.sqrt(), d.sqrt())
        }
        FieldNorm::Linf => {
            let n = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            let d = a.values.iter().map(|x| x.norm()).fold(0.0, f64::max);
            (n, d)
        }
    };
    Ok(if den == 0.0 { num } else { num / den })
}

/// Scenario specs shipped with the library, as `(file name, JSON)`.
pub const BUILTIN_SPECS: &[(&str, &str)] = &[
    ("form_equivalence.json", include_str!("../../scenarios/form_equivalence.json")),
    ("flat_baseline.json", include_str!("../../scenarios/flat_baseline.json")),
    ("reduction_identity.json", include_str!("../../scenarios/reduction_identity.json")),
    ("ehrenfest.json", include_str!("../../scenarios/ehrenfest.json")),
    ("brute_force_equivalence.json", include_str!("../../scenarios/brute_force_equivalence.json")),
    ("short_time_order.json", include_str!("../../scenarios/short_time_order.json")),
    ("moment_identity.json", include_str!("../../scenarios/moment_identity.json")),
    ("slicing_convergence.json", include_str!("../../scenarios/slicing_convergence.json")),
    ("time_dependent_unitarity.json", include_str!("../../scenarios/time_dependent_unitarity.json")),
    ("history_equivalence.json", include_str!("../../scenarios/history_equivalence.json")),
    ("geometry_identities.json", include_str!("../../scenarios/geometry_identities.json")),
    ("xi_scan.json", include_str!("../../scenarios/xi_scan.json")),
];

/// Parsed built-in specs in shipping order.
pub fn builtin_specs() -> Result<Vec<ExperimentSpec>> {
    BUILTIN_SPECS
        .iter()
        .map(|(file, text)| {
            parse_spec(text).map_err(|d| {
                let msg: Vec<String> = d.iter().map(|x| x.to_string()).collect();
                Error::Config(format!("{file}: {}", msg.join("; ")))
            })
        })
        .collect()
}

pub fn builtin_spec(name: &str) -> Result<ExperimentSpec> {
    builtin_specs()?
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("no built-in scenario named '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::XGrid;
    use num_complex::Complex64;

    #[test]
    fn compare_fields_examples() {
        let g = XGrid::new(0.0, 1.0, 3).unwrap();
        let a = WaveField::from_fn_1d(g, |x| Complex64::new(1.0 + x, -x));
        assert_eq!(compare_fields(&a, &a, FieldNorm::L2).unwrap(), 0.0);
        let mut b = a.clone();
        b.scale(Complex64::new(2.0, 0.0));
        assert!((compare_fields(&a, &b, FieldNorm::L2).unwrap() - 1.0).abs() < 1e-15);
        // a = (1, 1.5 - 0.5i, 2 - i), c = (1, 1, 2 - i):
        // |a - c|_2 = 0.5 sqrt(2), |a|_2 = sqrt(1 + 2.5 + 5) = sqrt(8.5).
        let c = WaveField::from_fn_1d(g, |x| if x == 0.5 { Complex64::new(1.0, 0.0) } else { Complex64::new(1.0 + x, -x) });
        let want = (0.5f64).sqrt() / 8.5f64.sqrt();
        assert!((compare_fields(&a, &c, FieldNorm::L2).unwrap() - want).abs() < 1e-15);
        // Linf: max |a - c| = sqrt(0.5), max |a| = sqrt(5).
        let want = 0.5f64.sqrt() / 5f64.sqrt();
        assert!((compare_fields(&a, &c, FieldNorm::Linf).unwrap() - want).abs() < 1e-15);
        let other = WaveField::zeros_1d(XGrid::new(0.0, 1.0, 4).unwrap());
        assert!(compare_fields(&a, &other, FieldNorm::L2).is_err());
    }

    #[test]
    fn builtins_parse_and_validate() {
        let specs = builtin_specs().unwrap();
        assert_eq!(specs.len(), BUILTIN_SPECS.len());
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        for s in &specs {
            assert!(!s.tolerances.is_empty(), "{}", s.name);
        }
    }

    #[test]
    fn diagnostics_carry_pointers() {
        let bad = r#"{"name": "x", "scenario": {"kind": "moment_identity", "x": "oops"}, "tolerances": {}}"#;
        let d = parse_spec(bad).unwrap_err();
        assert_eq!(d[0].pointer, "/scenario/x");
        let unknown = r#"{"name": "x", "scenario": {"kind": "moment_identity", "x": 0.1, "eps": [0.1, 0.05, 0.02], "flat_eps": 0.01},
                         "tolerances": {"nope": 1}}"#;
        let d = parse_spec(unknown).unwrap_err();
        assert_eq!(d[0].pointer, "/tolerances/nope");
        let extra = r#"{"name": "x", "scenario": {"kind": "moment_identity", "x": 0.1, "eps": [0.1, 0.05, 0.02], "flat_eps": 0.01,
                       "bogus": 1}, "tolerances": {}}"#;
        let d = parse_spec(extra).unwrap_err();
        assert!(d[0].message.contains("bogus"), "{d:?}");
        let kind = r#"{"name": "x", "scenario": {"kind": "nonsense"}, "tolerances": {}}"#;
        assert_eq!(parse_spec(kind).unwrap_err()[0].pointer, "/scenario/kind");
    }

    #[test]
    fn kinetic_phase_rule_is_enforced() {
        let text = r#"{"name": "coarse", "scenario": {"kind": "slicing_convergence", "n_x": 21, "ns": [64, 128, 256]},
                       "tolerances": {"free_max_rel_error": 1e-6}}"#;
        let d = parse_spec(text).unwrap_err();
        assert!(d.iter().any(|x| x.message.contains("kinetic phase")), "{d:?}");
    }

    #[test]
    fn run_is_deterministic() {
        let spec = builtin_spec("xi_scan").unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run(&spec, Some(d1.path())).unwrap();
        let r2 = run(&spec, Some(d2.path())).unwrap();
        assert!(r1.passed && r2.passed);
        assert_eq!(r1.metrics, r2.metrics);
        let csv = |d: &Path| std::fs::read(d.join("xi_scan_delta_v.csv")).unwrap();
        assert_eq!(csv(d1.path()), csv(d2.path()));
    }
}
