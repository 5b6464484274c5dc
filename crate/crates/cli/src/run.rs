//! Command execution and output files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sfpe::problem::{
    check_ellipticity, check_lipschitz_f, check_lyapunov_vq, check_monotonicity, direction_probes, lipschitz_probes,
    pair_probes,
};
use sfpe::report::{
    certificates_csv, conditions_csv, convergence_csv, crosscheck_csv, estimates_csv, residuals_csv, timings_csv,
    weight_moments_csv, PointEstimate, RunMetadata,
};
use sfpe::verification::{gradient_crosscheck, moment_certificates, pde_residual, FdSteps};
use sfpe::{
    estimate_value, estimate_value_gradient, fixed_point_residual, solve, terminal_value, weight_moment_report,
    DVector, Error, LyapunovVq, McConfig, PicardConfig, ProblemSpec, RngStream,
};
use sha2::{Digest, Sha256};

use crate::config::{Command, ConfigError, RunConfig};

/// Default output directory, relative to the working directory.
pub const DEFAULT_OUTPUT: &str = "sfpe-output";

/// Probes drawn for each coefficient check in `verify`.
const CONDITION_PROBES: usize = 1_000;

/// Settings given on the command line. They take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub budget: Option<u128>,
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Budget { predicted: u128, budget: u128 },
    Runtime(String),
}

impl RunError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime(_) => 3,
            RunError::Budget { .. } => 4,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Budget { predicted, budget } => {
                write!(
                    f,
                    "refused: predicted cost {predicted} Euler steps exceeds budget {budget}"
                )
            }
            RunError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Budget { predicted, budget } => RunError::Budget { predicted, budget },
            Error::Config(m) => RunError::Config(ConfigError {
                key: None,
                line: None,
                message: m,
            }),
            other => RunError::Runtime(other.to_string()),
        }
    }
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: String,
    /// False when a verification check failed.
    pub passed: bool,
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Hex SHA-256 of the config text and the effective seed.
pub fn config_hash(text: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(format!("\nseed={seed}").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Read, parse and run a config file.
pub fn run_file(path: &Path, overrides: &Overrides) -> Result<Outcome, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RunError::Config(ConfigError {
            key: None,
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = crate::config::parse_config(&text, base).map_err(RunError::Config)?;
    run(&cfg, &text, overrides)
}

struct Stages {
    start: Instant,
    rows: Vec<(String, f64)>,
}

impl Stages {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            rows: Vec::new(),
        }
    }

    fn mark(&mut self, name: &str) {
        let now = Instant::now();
        self.rows.push((name.to_string(), (now - self.start).as_secs_f64()));
        self.start = now;
    }
}

/// Run a parsed config. `text` is the raw config, used for the hash.
pub fn run(cfg: &RunConfig, text: &str, overrides: &Overrides) -> Result<Outcome, RunError> {
    let seed = overrides.seed.or(cfg.seed).ok_or_else(|| {
        RunError::Config(ConfigError {
            key: Some("seed".into()),
            line: None,
            message: "no seed: set `seed` in [run] or pass --seed".into(),
        })
    })?;
    let meta = RunMetadata {
        seed,
        config_hash: config_hash(text, seed),
    };
    let output = overrides
        .output
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let root = RngStream::new(seed);
    let mut stages = Stages::new();
    let mut tables: Vec<(&str, String)> = Vec::new();
    let spec = &cfg.spec;
    let mc = McConfig::new(cfg.mc.n_paths, cfg.mc.grid_steps).antithetic(cfg.mc.antithetic);

    let (summary, passed) = match cfg.command {
        Command::Value => {
            let point = if cfg.t == spec.horizon {
                let vg = terminal_value(spec, &cfg.x)?;
                value_only(PointEstimate::from_value_gradient(&vg))
            } else {
                let zero = DVector::zeros(spec.dim);
                let h = |s: f64, y: &DVector<f64>| spec.eval_f(s, y, 0.0, &zero);
                let est = estimate_value(spec, cfg.t, &cfg.x, &h, mc, root.child(0))?;
                PointEstimate {
                    t: cfg.t,
                    x: cfg.x.clone(),
                    components: vec!["v".into()],
                    estimate: est,
                }
            };
            stages.mark("value");
            let summary = format!("v = {} (stderr {})", point.estimate.mean[0], point.estimate.stderr[0]);
            tables.push(("results.csv", estimates_csv(&meta, &[point])?));
            (summary, true)
        }
        Command::Gradient => {
            let zero = DVector::zeros(spec.dim);
            let g = |y: &DVector<f64>| spec.eval_g(y);
            let h = |s: f64, y: &DVector<f64>| spec.eval_f(s, y, 0.0, &zero);
            let est = estimate_value_gradient(spec, cfg.t, &cfg.x, &g, &h, mc, cfg.mc.quadrature, root.child(0))?;
            stages.mark("gradient");
            let mut components = vec!["v".to_string()];
            components.extend((1..=spec.dim).map(|i| format!("grad_{i}")));
            let summary = format!("v = {}, grad = [{}]", est.mean[0], join(&est.mean[1..]));
            let point = PointEstimate {
                t: cfg.t,
                x: cfg.x.clone(),
                components,
                estimate: est,
            };
            tables.push(("results.csv", estimates_csv(&meta, &[point])?));
            (summary, true)
        }
        Command::Solve => {
            let pc = picard_config(cfg, overrides);
            let vg = if cfg.t == spec.horizon {
                terminal_value(spec, &cfg.x)?
            } else {
                solve(spec, cfg.t, &cfg.x, &pc, root.child(0))?
            };
            stages.mark("solve");
            let summary = format!(
                "v = {} (stderr {}), {} Euler steps",
                vg.value(),
                vg.stderr[0],
                vg.euler_steps
            );
            let point = PointEstimate::from_value_gradient(&vg);
            tables.push(("results.csv", estimates_csv(&meta, &[point])?));
            (summary, true)
        }
        Command::Converge => {
            let (axis, values) = cfg.study.clone().expect("converge configs carry a study");
            let pc = picard_config(cfg, overrides);
            let rows = sfpe::convergence_study(spec, cfg.t, &cfg.x, axis, &values, &pc, root.child(0))?;
            stages.mark("converge");
            let last = rows.last().expect("study has rows");
            let summary = format!(
                "{} rows over {}; last v = {} (stderr {})",
                rows.len(),
                axis.name(),
                last.estimate[0],
                last.stderr[0]
            );
            tables.push(("results.csv", convergence_csv(&meta, axis, &rows)?));
            (summary, true)
        }
        Command::Moments => {
            let (q, rho, rows) = certificates(cfg, root.child(0))?;
            let moments = weight_moment_report(
                spec,
                cfg.t,
                spec.horizon,
                &cfg.x,
                cfg.mc.n_paths,
                cfg.mc.grid_steps,
                root.child(1),
            )?;
            stages.mark("moments");
            let passed = rows.iter().all(|r| r.pass) && moments.pass;
            let summary = format!(
                "{} of {} certificates hold, weight second moment {} vs bound {}",
                rows.iter().filter(|r| r.pass).count(),
                rows.len(),
                moments.second_moment,
                moments.bound
            );
            tables.push(("results.csv", certificates_csv(&meta, q, rho, &rows)?));
            tables.push(("weight_moments.csv", weight_moments_csv(&meta, &[moments])?));
            (summary, passed)
        }
        Command::Verify => verify(cfg, &meta, root, &mut stages, &mut tables)?,
    };

    std::fs::create_dir_all(&output)
        .map_err(|e| RunError::Runtime(format!("cannot create {}: {e}", output.display())))?;
    let mut files = Vec::new();
    tables.push(("timings.csv", timings_csv(&stages.rows)?));
    for (name, body) in tables {
        let path = output.join(name);
        std::fs::write(&path, body).map_err(|e| RunError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        files.push(path);
    }
    Ok(Outcome {
        summary: format!("{} {}: {summary}", cfg.command.name(), cfg.problem_name),
        passed,
        output_dir: output,
        files,
    })
}

fn value_only(mut p: PointEstimate) -> PointEstimate {
    p.components.truncate(1);
    p.estimate.mean.truncate(1);
    p.estimate.stderr.truncate(1);
    p
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn picard_config(cfg: &RunConfig, overrides: &Overrides) -> PicardConfig {
    let (samples, scheme, budget) = match &cfg.picard {
        Some(p) => (p.samples_per_level.clone(), p.scheme, p.budget),
        None => (vec![cfg.mc.n_paths], sfpe::Scheme::Plain, None),
    };
    PicardConfig::new(samples)
        .grid_steps(cfg.mc.grid_steps)
        .quadrature(cfg.mc.quadrature)
        .antithetic(cfg.mc.antithetic)
        .scheme(scheme)
        .budget(overrides.budget.or(budget))
}

fn certificates(
    cfg: &RunConfig,
    stream: RngStream,
) -> Result<(f64, f64, Vec<sfpe::verification::CertificateRow>), RunError> {
    let spec = &cfg.spec;
    let vq = LyapunovVq::new(cfg.q)?;
    let rho = cfg
        .rho
        .unwrap_or_else(|| vq.growth_rate(spec.constants.growth_c, spec.constants.lipschitz));
    let span = spec.horizon - cfg.t;
    let horizons = cfg
        .horizons
        .clone()
        .unwrap_or_else(|| vec![cfg.t + span / 4.0, cfg.t + span / 2.0, spec.horizon]);
    let rows = moment_certificates(
        spec,
        vq,
        rho,
        cfg.t,
        &cfg.x,
        &horizons,
        cfg.mc.n_paths,
        cfg.mc.grid_steps,
        stream,
    )?;
    Ok((cfg.q, rho, rows))
}

/// Probe points for residual checks: the configured point when it is interior,
/// then four random points with times in `[0.05 T, 0.9 T]`.
fn residual_probes(spec: &ProblemSpec, t: f64, x: &DVector<f64>, stream: RngStream) -> Vec<(f64, DVector<f64>)> {
    let horizon = spec.horizon;
    let mut probes = Vec::with_capacity(5);
    if t >= 0.05 * horizon && t <= 0.9 * horizon {
        probes.push((t, x.clone()));
    }
    for (s, y) in spec.random_points(4, stream) {
        probes.push((0.05 * horizon + 0.85 * s, y));
    }
    probes
}

fn verify(
    cfg: &RunConfig,
    meta: &RunMetadata,
    root: RngStream,
    stages: &mut Stages,
    tables: &mut Vec<(&'static str, String)>,
) -> Result<(String, bool), RunError> {
    let spec = &cfg.spec;
    let k = spec.constants;
    let mc = McConfig::new(cfg.mc.n_paths, cfg.mc.grid_steps).antithetic(cfg.mc.antithetic);
    let mut failed: Vec<String> = Vec::new();

    let conditions = vec![
        check_monotonicity(&spec.coeffs, k.c, &pair_probes(spec, CONDITION_PROBES, root.child(0)))?,
        check_ellipticity(
            &spec.coeffs,
            k.alpha,
            &direction_probes(spec, CONDITION_PROBES, root.child(1)),
        )?,
        check_lipschitz_f(spec, &lipschitz_probes(spec, CONDITION_PROBES, root.child(2)))?,
    ];
    let vq = LyapunovVq::new(cfg.q)?;
    let rho = cfg.rho.unwrap_or_else(|| vq.growth_rate(k.growth_c, k.lipschitz));
    let lyapunov = check_lyapunov_vq(spec, vq, rho, &spec.random_points(CONDITION_PROBES, root.child(3)))?;
    failed.extend(conditions.iter().filter(|c| !c.pass).map(|c| c.condition.to_string()));
    if !lyapunov.pass {
        failed.push("lyapunov".into());
    }
    stages.mark("conditions");

    let mut residual_note = "no closed-form solution, residual checks skipped";
    let residuals = match &spec.solution {
        Some(sol) => {
            let probes = residual_probes(spec, cfg.t, &cfg.x, root.child(4));
            let u = |t: f64, y: &DVector<f64>| sol(t, y);
            let pde = pde_residual(spec, &u, &probes, FdSteps::default())?;
            stages.mark("pde_residual");
            let earliest = probes.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let dt = (spec.horizon - earliest) / cfg.mc.grid_steps as f64;
            let fp = fixed_point_residual(spec, &u, &probes, mc, cfg.mc.quadrature, dt, root.child(5))?;
            stages.mark("fixed_point");
            if !pde.all_pass() {
                failed.push("pde_residual".into());
            }
            if !fp.all_pass() {
                failed.push("fixed_point".into());
            }
            residual_note = "";
            vec![("pde_residual", pde), ("fixed_point", fp)]
        }
        None => Vec::new(),
    };

    let crosscheck = gradient_crosscheck(spec, cfg.t, &cfg.x, None, mc, root.child(6))?;
    if !crosscheck.pass {
        failed.push("gradient_crosscheck".into());
    }
    stages.mark("crosscheck");

    let moments = weight_moment_report(
        spec,
        cfg.t,
        spec.horizon,
        &cfg.x,
        cfg.mc.n_paths,
        cfg.mc.grid_steps,
        root.child(7),
    )?;
    if !moments.pass {
        failed.push("weight_moments".into());
    }
    let (q, rho_cert, rows) = certificates(cfg, root.child(8))?;
    if !rows.iter().all(|r| r.pass) {
        failed.push("certificates".into());
    }
    stages.mark("moments");

    let named: Vec<(&str, &sfpe::verification::ResidualReport)> = residuals.iter().map(|(n, r)| (*n, r)).collect();
    tables.push(("results.csv", residuals_csv(meta, &named)?));
    tables.push(("conditions.csv", conditions_csv(meta, &conditions, &[lyapunov])?));
    tables.push(("crosscheck.csv", crosscheck_csv(meta, &[crosscheck])?));
    tables.push(("weight_moments.csv", weight_moments_csv(meta, &[moments])?));
    tables.push(("certificates.csv", certificates_csv(meta, q, rho_cert, &rows)?));

    let mut summary = if failed.is_empty() {
        "all checks passed".to_string()
    } else {
        format!("FAILED: {}", failed.join(", "))
    };
    if !residual_note.is_empty() {
        summary = format!("{summary} ({residual_note})");
    }
    Ok((summary, failed.is_empty()))
}
