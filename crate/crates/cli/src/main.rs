use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use discard_core::experiments::{self, ExperimentReport, ExperimentSpec};
use discard_core::geometry::{world_function_geodesic, world_function_taylor, RadiusPairing, RadiusProfile, TubeGeometry, WorldPointPair};
use discard_core::kernels::{classical_effective_potential, delta_v_eff_from_b, PhysicsConstants};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "discard", version, about = "Verification scenarios for propagators with an integrated-out fibre")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario specs (JSON files or built-in names).
    Run {
        #[arg(required = true)]
        specs: Vec<String>,
        #[arg(long, default_value = "./out")]
        out: PathBuf,
        /// Number of specs run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Check scenario specs without running them.
    Validate {
        #[arg(required = true)]
        specs: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// List the built-in scenarios.
    List,
    /// Print one formula value.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Formula {
    #[value(name = "delta_v")]
    DeltaV,
    #[value(name = "v_cl")]
    VCl,
    Curvature,
    Sigma,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaMethodArg {
    Taylor,
    Geodesic,
}

#[derive(clap::Args)]
struct EvalArgs {
    formula: Formula,
    /// Radius profile in short form, e.g. `exp:lambda=1` or `tanh:amp=0.2`.
    #[arg(long, default_value = "const:b=1")]
    profile: String,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    x: f64,
    /// Second point for `sigma`.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    xp: f64,
    /// Angle separation for `sigma`.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    theta: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    xi: f64,
    #[arg(long, default_value_t = 1.0)]
    mass: f64,
    #[arg(long, default_value_t = 1.0)]
    hbar: f64,
    #[arg(long, default_value_t = 1)]
    d: u32,
    /// Fibre energy for `v_cl`.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    e_phi: f64,
    #[arg(long, value_enum, default_value = "geodesic")]
    method: SigmaMethodArg,
}

/// Twelve significant digits, plain decimal for moderate magnitudes.
fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    let a = rounded.abs();
    if a == 0.0 {
        "0".into()
    } else if (1e-5..1e15).contains(&a) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

fn eval(a: &EvalArgs) -> Result<f64, String> {
    let profile = RadiusProfile::parse_short(&a.profile).map_err(|e| e.to_string())?;
    let c = PhysicsConstants::new(a.mass, a.hbar, a.xi).map_err(|e| e.to_string())?;
    let reach = a.x.abs().max(a.xp.abs()) + 10.0;
    let geom = TubeGeometry::new(profile, -reach, reach).map_err(|e| e.to_string())?;
    let r = match a.formula {
        Formula::DeltaV => delta_v_eff_from_b(&geom, &c, a.x, a.d),
        Formula::VCl => Ok(classical_effective_potential(&geom, &c, a.x, a.e_phi)),
        Formula::Curvature => geom.scalar_curvature(a.x),
        Formula::Sigma => {
            let pair = WorldPointPair::new(a.x, a.xp, a.theta, 0);
            match a.method {
                SigmaMethodArg::Taylor => world_function_taylor(&geom, &pair, RadiusPairing::Endpoints),
                SigmaMethodArg::Geodesic => world_function_geodesic(&geom, &pair),
            }
        }
    };
    r.map_err(|e| e.to_string())
}

/// A path to a JSON file, or the name of a built-in scenario.
fn load(arg: &str) -> Result<ExperimentSpec, Vec<String>> {
    let path = Path::new(arg);
    if path.exists() {
        return experiments::load_spec(path).map_err(|d| d.iter().map(|x| format!("{arg}: {x}")).collect());
    }
    match experiments::builtin_spec(arg) {
        Ok(s) => Ok(s),
        Err(_) => {
            let names: Vec<String> =
                experiments::builtin_specs().map(|v| v.into_iter().map(|s| s.name).collect()).unwrap_or_default();
            Err(vec![format!(
                "'{arg}' is neither a spec file nor a built-in scenario; built-ins: {}",
                names.join(", ")
            )])
        }
    }
}

fn load_all(args: &[String]) -> Result<Vec<ExperimentSpec>, Vec<String>> {
    let mut specs = Vec::new();
    let mut errors = Vec::new();
    for a in args {
        match load(a) {
            Ok(s) => specs.push(s),
            Err(e) => errors.extend(e),
        }
    }
    if errors.is_empty() {
        Ok(specs)
    } else {
        Err(errors)
    }
}

fn print_report(r: &ExperimentReport) {
    let status = if r.passed { "PASS" } else { "FAIL" };
    println!("{status}  {:<28} {:<26} {:>8.2}s", r.name, r.kind, r.wall_time_s);
    for c in &r.criteria {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        println!("      {mark} {:<28} {:>14.6e} {} {:e}", c.metric, c.value, c.comparison.symbol(), c.tolerance);
    }
    if let Some(e) = &r.error {
        println!("      error: {e}");
    }
}

fn run(specs: Vec<ExperimentSpec>, out: &Path, jobs: usize, quiet: bool) -> ExitCode {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ExperimentReport, String>>>> = Mutex::new(vec![None; specs.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, specs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = specs.get(i) else { break };
                let r = experiments::run(spec, Some(out)).map_err(|e| format!("{}: {e}", spec.name));
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let mut all_pass = true;
    let mut config_error = false;
    for r in results.into_inner().expect("result lock").into_iter().flatten() {
        match r {
            Ok(rep) => {
                all_pass &= rep.passed;
                if !quiet || !rep.passed {
                    print_report(&rep);
                }
            }
            Err(e) => {
                config_error = true;
                eprintln!("error: {e}");
            }
        }
    }
    if config_error {
        ExitCode::from(EXIT_USAGE)
    } else if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run { specs, out, jobs, quiet } => match load_all(&specs) {
            Ok(s) => run(s, &out, jobs, quiet),
            Err(errors) => {
                for e in errors {
                    eprintln!("error: {e}");
                }
                ExitCode::from(EXIT_USAGE)
            }
        },
        Command::Validate { specs, quiet } => {
            let mut ok = true;
            for a in &specs {
                match load(a) {
                    Ok(s) => {
                        if !quiet {
                            println!("valid  {a} ({}, {})", s.name, s.scenario.kind());
                        }
                    }
                    Err(errors) => {
                        ok = false;
                        for e in errors {
                            eprintln!("invalid  {e}");
                        }
                    }
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            }
        }
        Command::List => match experiments::builtin_specs() {
            Ok(specs) => {
                for s in specs {
                    println!("{:<28} {:<26} {}", s.name, s.scenario.kind(), s.description);
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_USAGE)
            }
        },
        Command::Eval(a) => match eval(&a) {
            Ok(v) => {
                println!("{}", format_value(v));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_USAGE)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::format_value;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(format_value(0.125), "0.125");
        assert_eq!(format_value(0.0), "0");
        assert_eq!(format_value(-0.0), "0");
        assert_eq!(format_value(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_value(2.0 / 3.0), "0.666666666667");
        assert_eq!(format_value(1.0e-7 / 3.0), "3.33333333333e-8");
    }
}
