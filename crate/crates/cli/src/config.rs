//! Run configuration: a TOML file with the sections `[problem]`, `[run]`,
//! `[mc]` and `[picard]`. Unknown keys are errors, and every error names the
//! offending key and, where known, its line.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sfpe::verification::StudyAxis;
use sfpe::{presets, DVector, ProblemSpec, Quadrature, Scheme};
use toml::Spanned;

use crate::problem_file::parse_problem;

/// A configuration error with the key it concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.key, self.line) {
            (Some(k), Some(l)) => write!(f, "key `{k}` (line {l}): {}", self.message),
            (Some(k), None) => write!(f, "key `{k}`: {}", self.message),
            (None, Some(l)) => write!(f, "line {l}: {}", self.message),
            (None, None) => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Value,
    Gradient,
    Solve,
    Verify,
    Converge,
    Moments,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Value => "value",
            Command::Gradient => "gradient",
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::Converge => "converge",
            Command::Moments => "moments",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: RawProblem,
    run: RawRun,
    mc: RawMc,
    picard: Option<RawPicard>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    name: Spanned<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    command: Command,
    t: Spanned<f64>,
    x: Spanned<Vec<f64>>,
    seed: Option<Spanned<i64>>,
    output: Option<String>,
    axis: Option<Spanned<String>>,
    values: Option<Spanned<Vec<i64>>>,
    q: Option<Spanned<f64>>,
    rho: Option<Spanned<f64>>,
    horizons: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    n_paths: Spanned<i64>,
    grid_steps: Option<Spanned<i64>>,
    #[serde(default)]
    antithetic: bool,
    quadrature: Option<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPicard {
    depth: Spanned<i64>,
    samples_per_level: Spanned<Vec<i64>>,
    scheme: Option<Spanned<String>>,
    budget: Option<Spanned<i64>>,
}

/// Sampling settings from `[mc]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McSettings {
    pub n_paths: usize,
    pub grid_steps: usize,
    pub antithetic: bool,
    pub quadrature: Quadrature,
}

/// Solver settings from `[picard]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PicardSettings {
    pub depth: usize,
    pub samples_per_level: Vec<usize>,
    pub scheme: Scheme,
    pub budget: Option<u128>,
}

/// A validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem_name: String,
    pub spec: ProblemSpec,
    pub command: Command,
    pub t: f64,
    pub x: DVector<f64>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub mc: McSettings,
    pub picard: Option<PicardSettings>,
    pub study: Option<(StudyAxis, Vec<usize>)>,
    pub q: f64,
    pub rho: Option<f64>,
    pub horizons: Option<Vec<f64>>,
}

struct Ctx<'a> {
    text: &'a str,
}

impl Ctx<'_> {
    fn line(&self, span: std::ops::Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn err<T>(&self, key: &str, value: &Spanned<T>, message: impl Into<String>) -> ConfigError {
        ConfigError {
            key: Some(key.into()),
            line: Some(self.line(value.span())),
            message: message.into(),
        }
    }

    fn positive(&self, key: &str, v: &Spanned<i64>) -> Result<usize, ConfigError> {
        if *v.get_ref() < 1 {
            return Err(self.err(key, v, format!("must be a positive integer, got {}", v.get_ref())));
        }
        Ok(*v.get_ref() as usize)
    }
}

fn resolve_problem(name: &str, base: &Path) -> Result<ProblemSpec, String> {
    if let Ok(spec) = presets::preset(name) {
        return Ok(spec);
    }
    let path = base.join(name);
    if path.extension().is_some_and(|e| e == "toml") || path.is_file() {
        let text =
            std::fs::read_to_string(&path).map_err(|e| format!("cannot read problem file {}: {e}", path.display()))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name);
        return parse_problem(&text, stem).map_err(|e| format!("problem file {}: {e}", path.display()));
    }
    Err(format!(
        "unknown preset '{name}' (known: {}) and no such problem file",
        presets::PRESET_NAMES.join(", ")
    ))
}

fn parse_quadrature(ctx: &Ctx<'_>, v: &Option<Spanned<String>>) -> Result<Quadrature, ConfigError> {
    match v {
        None => Ok(Quadrature::LeftPoint),
        Some(s) => match s.get_ref().as_str() {
            "left-point" => Ok(Quadrature::LeftPoint),
            "randomized-uniform" => Ok(Quadrature::RandomizedUniform),
            other => Err(ctx.err(
                "quadrature",
                s,
                format!("expected left-point or randomized-uniform, got '{other}'"),
            )),
        },
    }
}

/// Parse and validate a run configuration. Problem files are resolved relative to `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        ConfigError {
            key: None,
            line,
            message: e.message().to_string(),
        }
    })?;
    let ctx = Ctx { text };
    let name = raw.problem.name.get_ref().clone();
    let spec = resolve_problem(&name, base).map_err(|m| ctx.err("name", &raw.problem.name, m))?;
    let run = &raw.run;

    let t = *run.t.get_ref();
    if !(0.0..=spec.horizon).contains(&t) {
        return Err(ctx.err("t", &run.t, format!("t = {t} outside [0, T] = [0, {}]", spec.horizon)));
    }
    if run.x.get_ref().len() != spec.dim {
        return Err(ctx.err(
            "x",
            &run.x,
            format!(
                "point has {} coordinates, problem '{name}' has dimension {}",
                run.x.get_ref().len(),
                spec.dim
            ),
        ));
    }
    if run.x.get_ref().iter().any(|v| !v.is_finite()) {
        return Err(ctx.err("x", &run.x, "coordinates must be finite"));
    }
    let seed = match &run.seed {
        Some(s) if *s.get_ref() < 0 => return Err(ctx.err("seed", s, "must be nonnegative")),
        Some(s) => Some(*s.get_ref() as u64),
        None => None,
    };

    let mc = McSettings {
        n_paths: ctx.positive("n_paths", &raw.mc.n_paths)?,
        grid_steps: match &raw.mc.grid_steps {
            Some(g) => ctx.positive("grid_steps", g)?,
            None => sfpe::sde::DEFAULT_STEPS,
        },
        antithetic: raw.mc.antithetic,
        quadrature: parse_quadrature(&ctx, &raw.mc.quadrature)?,
    };
    if mc.quadrature == Quadrature::RandomizedUniform && mc.grid_steps < 2 {
        return Err(ConfigError {
            key: Some("grid_steps".into()),
            line: raw.mc.grid_steps.as_ref().map(|g| ctx.line(g.span())),
            message: "randomized-uniform quadrature needs grid_steps >= 2".into(),
        });
    }

    let picard = match &raw.picard {
        None => None,
        Some(p) => {
            let depth = ctx.positive("depth", &p.depth)?;
            let samples = p.samples_per_level.get_ref();
            if samples.len() != depth {
                return Err(ctx.err(
                    "samples_per_level",
                    &p.samples_per_level,
                    format!("has {} entries, depth is {depth}", samples.len()),
                ));
            }
            if samples.iter().any(|&m| m < 1) {
                return Err(ctx.err("samples_per_level", &p.samples_per_level, "entries must be positive"));
            }
            let scheme = match &p.scheme {
                None => Scheme::Plain,
                Some(s) => match s.get_ref().as_str() {
                    "plain" => Scheme::Plain,
                    "multilevel" => Scheme::Multilevel,
                    other => return Err(ctx.err("scheme", s, format!("expected plain or multilevel, got '{other}'"))),
                },
            };
            let samples: Vec<usize> = samples.iter().map(|&m| m as usize).collect();
            if scheme == Scheme::Multilevel && samples.windows(2).any(|w| w[1] < w[0]) {
                return Err(ctx.err(
                    "samples_per_level",
                    &p.samples_per_level,
                    "multilevel sample counts must be nondecreasing in depth",
                ));
            }
            let budget = match &p.budget {
                Some(b) => Some(ctx.positive("budget", b)? as u128),
                None => None,
            };
            Some(PicardSettings {
                depth,
                samples_per_level: samples,
                scheme,
                budget,
            })
        }
    };

    let missing = |key: &str, why: &str| ConfigError {
        key: Some(key.into()),
        line: None,
        message: format!("required {why}"),
    };
    let study = if run.command == Command::Converge {
        let axis_raw = run
            .axis
            .as_ref()
            .ok_or_else(|| missing("axis", "by command converge"))?;
        let axis = match axis_raw.get_ref().as_str() {
            "n_paths" => StudyAxis::NPaths,
            "grid_steps" => StudyAxis::GridSteps,
            "depth" => StudyAxis::Depth,
            other => {
                return Err(ctx.err(
                    "axis",
                    axis_raw,
                    format!("expected n_paths, grid_steps or depth, got '{other}'"),
                ))
            }
        };
        let values_raw = run
            .values
            .as_ref()
            .ok_or_else(|| missing("values", "by command converge"))?;
        let values = values_raw.get_ref();
        if values.is_empty() || values.iter().any(|&v| v < 1) || values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ctx.err("values", values_raw, "must be positive and strictly increasing"));
        }
        if axis == StudyAxis::Depth {
            let depth = picard.as_ref().map_or(1, |p| p.depth);
            if *values.last().unwrap() as usize > depth {
                return Err(ctx.err("values", values_raw, format!("depths beyond [picard] depth = {depth}")));
            }
        }
        Some((axis, values.iter().map(|&v| v as usize).collect()))
    } else {
        None
    };
    if run.command == Command::Solve && picard.is_none() {
        return Err(ConfigError {
            key: Some("picard".into()),
            line: None,
            message: "command solve requires a [picard] section".into(),
        });
    }
    if matches!(
        run.command,
        Command::Gradient | Command::Verify | Command::Converge | Command::Moments
    ) && t >= spec.horizon
    {
        return Err(ctx.err(
            "t",
            &run.t,
            format!("command {} needs t < T = {}", run.command.name(), spec.horizon),
        ));
    }

    let q = match &run.q {
        Some(q) if !(*q.get_ref() > 0.0) => return Err(ctx.err("q", q, "must be positive")),
        Some(q) => *q.get_ref(),
        None => 2.0,
    };
    let rho = match &run.rho {
        Some(r) if !(*r.get_ref() >= 0.0) => return Err(ctx.err("rho", r, "must be nonnegative")),
        Some(r) => Some(*r.get_ref()),
        None => None,
    };
    let horizons = match &run.horizons {
        Some(h) => {
            let hs = h.get_ref();
            if hs.is_empty() || hs.iter().any(|&s| !(s > t && s <= spec.horizon)) {
                return Err(ctx.err(
                    "horizons",
                    h,
                    format!("each horizon must lie in (t, T] = ({t}, {}]", spec.horizon),
                ));
            }
            Some(hs.clone())
        }
        None => None,
    };

    Ok(RunConfig {
        problem_name: name,
        x: DVector::from_column_slice(run.x.get_ref()),
        spec,
        command: run.command,
        t,
        seed,
        output: run.output.as_ref().map(PathBuf::from),
        mc,
        picard,
        study,
        q,
        rho,
        horizons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"[problem]
name = "heat"

[run]
command = "value"
t = 0.0
x = [0.0, 0.0]
seed = 42

[mc]
n_paths = 10000
"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config(text, Path::new("."))
    }

    #[test]
    fn minimal_heat_config() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.command, Command::Value);
        assert_eq!(c.seed, Some(42));
        assert_eq!(c.mc.n_paths, 10_000);
        assert_eq!(c.spec.dim, 2);
    }

    #[test]
    fn t_beyond_horizon_names_key() {
        let e = parse(&MINIMAL.replace("t = 0.0", "t = 1.1")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("t"));
        assert_eq!(e.line, Some(6));
    }

    #[test]
    fn unknown_key_has_line() {
        let e = parse(&MINIMAL.replace("seed = 42", "seed = 42\nfoo = 1")).unwrap_err();
        assert_eq!(e.line, Some(9));
        assert!(e.message.contains("foo"), "{e}");
    }

    #[test]
    fn missing_and_mistyped_keys() {
        let e = parse(&MINIMAL.replace("n_paths = 10000\n", "")).unwrap_err();
        assert!(e.message.contains("n_paths"), "{e}");
        let e = parse(&MINIMAL.replace("n_paths = 10000", "n_paths = \"many\"")).unwrap_err();
        assert_eq!(e.line, Some(11));
        let e = parse(&MINIMAL.replace("n_paths = 10000", "n_paths = 0")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("n_paths"));
    }

    #[test]
    fn dimension_mismatch_and_unknown_problem() {
        let e = parse(&MINIMAL.replace("x = [0.0, 0.0]", "x = [0.0]")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("x"));
        let e = parse(&MINIMAL.replace("\"heat\"", "\"nope\"")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("name"));
    }

    #[test]
    fn picard_section_checks() {
        let base = MINIMAL.replace("\"value\"", "\"solve\"");
        assert_eq!(parse(&base).unwrap_err().key.as_deref(), Some("picard"));
        let ok = format!("{base}\n[picard]\ndepth = 2\nsamples_per_level = [2, 100]\n");
        assert_eq!(parse(&ok).unwrap().picard.unwrap().depth, 2);
        let bad = format!("{base}\n[picard]\ndepth = 3\nsamples_per_level = [2, 100]\n");
        assert_eq!(parse(&bad).unwrap_err().key.as_deref(), Some("samples_per_level"));
        let bad = format!("{base}\n[picard]\ndepth = 2\nsamples_per_level = [100, 2]\nscheme = \"multilevel\"\n");
        assert!(parse(&bad).is_err());
    }
}
