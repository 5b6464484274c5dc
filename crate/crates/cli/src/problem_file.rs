//! Problem definitions read from TOML files.
//!
//! Coefficients come from a closed set of forms; there is no expression parser.
//!
//! ```toml
//! dim = 2
//! horizon = 1.0
//!
//! [drift]
//! kind = "ou"          # zero | linear | ou | sine
//! rate = 1.0
//!
//! [diffusion]
//! kind = "scalar"      # constant | scalar | geometric | tanh
//! scale = 1.0
//!
//! [terminal]
//! kind = "gaussian"    # gaussian | linear | constant
//!
//! [nonlinearity]
//! kind = "linear"      # zero | linear | manufactured
//! lambda = -0.5
//!
//! [constants]
//! c = 0.0
//! growth_c = 2.0
//! alpha = 1.0
//! lipschitz = 0.5
//! growth_p = 1.0
//! ```
//!
//! With `kind = "manufactured"` the terminal section is ignored and the
//! problem is built around a closed-form solution.

use std::sync::Arc;

use serde::Deserialize;
use sfpe::problem::{
    check_ellipticity, check_lipschitz_f, check_monotonicity, direction_probes, lipschitz_probes, manufactured_problem,
    pair_probes, ManufacturedTarget, ProbeRegion,
};
use sfpe::{CoefficientField, Constants, DMatrix, DVector, Diffusion, Drift, ProblemSpec, RngStream};

/// Number of random probes each declared constant is checked on.
const DECLARED_PROBES: usize = 500;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    name: Option<String>,
    dim: usize,
    horizon: f64,
    drift: DriftDef,
    diffusion: DiffusionDef,
    terminal: Option<TerminalDef>,
    nonlinearity: NonlinearityDef,
    constants: ConstantsDef,
    region: Option<RegionDef>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum DriftDef {
    Zero,
    Linear {
        matrix: Vec<Vec<f64>>,
        offset: Option<Vec<f64>>,
    },
    /// `mu(x) = rate (mean - x)`.
    Ou {
        rate: f64,
        mean: Option<Vec<f64>>,
    },
    Sine {
        amplitude: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum DiffusionDef {
    Constant { matrix: Vec<Vec<f64>> },
    Scalar { scale: f64 },
    Geometric { scale: f64 },
    Tanh { base: f64, amplitude: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum TerminalDef {
    /// `exp(-|x|^2 / 2)`.
    Gaussian,
    Linear {
        coefficients: Vec<f64>,
    },
    Constant {
        value: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum NonlinearityDef {
    Zero,
    /// `f = lambda a + <kappa, w> + source`.
    Linear {
        lambda: f64,
        kappa: Option<Vec<f64>>,
        #[serde(default)]
        source: f64,
    },
    Manufactured {
        lambda: f64,
        kappa: Vec<f64>,
        decay: Option<f64>,
        width: Option<f64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsDef {
    c: f64,
    growth_c: f64,
    alpha: f64,
    lipschitz: f64,
    growth_p: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionDef {
    center: Option<Vec<f64>>,
    half_width: f64,
}

fn matrix(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>, String> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(format!("{what} must be a {dim}x{dim} array of rows"));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn vector(v: Option<&Vec<f64>>, dim: usize, what: &str) -> Result<DVector<f64>, String> {
    match v {
        None => Ok(DVector::zeros(dim)),
        Some(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(format!("{what} has length {}, expected {dim}", v.len())),
    }
}

/// Parse a problem file and check its declared constants on random probes.
pub fn parse_problem(text: &str, default_name: &str) -> Result<ProblemSpec, String> {
    let def: ProblemFile = toml::from_str(text).map_err(|e| e.to_string())?;
    let d = def.dim;
    if d == 0 {
        return Err("dim must be positive".into());
    }
    let drift = match &def.drift {
        DriftDef::Zero => Drift::Zero,
        DriftDef::Linear { matrix: m, offset } => Drift::Linear {
            matrix: matrix(m, d, "drift.matrix")?,
            offset: vector(offset.as_ref(), d, "drift.offset")?,
        },
        DriftDef::Ou { rate, mean } => {
            let mean = vector(mean.as_ref(), d, "drift.mean")?;
            Drift::Linear {
                matrix: DMatrix::identity(d, d) * -*rate,
                offset: mean * *rate,
            }
        }
        DriftDef::Sine { amplitude } => Drift::Sine { amplitude: *amplitude },
    };
    let diffusion = match &def.diffusion {
        DiffusionDef::Constant { matrix: m } => Diffusion::Constant(matrix(m, d, "diffusion.matrix")?),
        DiffusionDef::Scalar { scale } => Diffusion::Constant(DMatrix::identity(d, d) * *scale),
        DiffusionDef::Geometric { scale } => Diffusion::Geometric { scale: *scale },
        DiffusionDef::Tanh { base, amplitude } => Diffusion::Tanh {
            base: *base,
            amplitude: *amplitude,
        },
    };
    let coeffs = CoefficientField::new(d, drift, diffusion).map_err(|e| e.to_string())?;
    let k = &def.constants;
    let constants = Constants {
        c: k.c,
        growth_c: k.growth_c,
        alpha: k.alpha,
        lipschitz: k.lipschitz,
        growth_p: k.growth_p,
    };
    let name = def.name.clone().unwrap_or_else(|| default_name.to_string());
    let mut spec = match &def.nonlinearity {
        NonlinearityDef::Manufactured {
            lambda,
            kappa,
            decay,
            width,
        } => {
            let target = ManufacturedTarget {
                decay: decay.unwrap_or(1.0),
                width: width.unwrap_or(1.0),
            };
            let kappa = vector(Some(kappa), d, "nonlinearity.kappa")?;
            manufactured_problem(name, def.horizon, coeffs, constants, *lambda, kappa, target)
                .map_err(|e| e.to_string())?
                .0
        }
        other => {
            let g: sfpe::problem::Terminal = match def.terminal.as_ref().ok_or("missing [terminal] section")? {
                TerminalDef::Gaussian => Arc::new(|x: &DVector<f64>| (-0.5 * x.norm_squared()).exp()),
                TerminalDef::Linear { coefficients } => {
                    let a = vector(Some(coefficients), d, "terminal.coefficients")?;
                    Arc::new(move |x: &DVector<f64>| a.dot(x))
                }
                TerminalDef::Constant { value } => {
                    let v = *value;
                    Arc::new(move |_: &DVector<f64>| v)
                }
            };
            let (f, decoupled): (sfpe::problem::Nonlinearity, bool) = match other {
                NonlinearityDef::Zero => (Arc::new(|_, _, _, _| 0.0), true),
                NonlinearityDef::Linear { lambda, kappa, source } => {
                    let kappa = vector(kappa.as_ref(), d, "nonlinearity.kappa")?;
                    let (lambda, source) = (*lambda, *source);
                    (
                        Arc::new(move |_, _, a, w: &DVector<f64>| lambda * a + kappa.dot(w) + source),
                        false,
                    )
                }
                NonlinearityDef::Manufactured { .. } => unreachable!(),
            };
            let spec = ProblemSpec::new(name, def.horizon, coeffs, f, g, constants).map_err(|e| e.to_string())?;
            if decoupled {
                spec.decoupled()
            } else {
                spec
            }
        }
    };
    if let Some(r) = &def.region {
        if !(r.half_width > 0.0) {
            return Err("region.half_width must be positive".into());
        }
        spec = spec.with_region(ProbeRegion {
            center: vector(r.center.as_ref(), d, "region.center")?,
            half_width: r.half_width,
        });
    }
    check_declared(&spec)?;
    Ok(spec)
}

fn check_declared(spec: &ProblemSpec) -> Result<(), String> {
    let root = RngStream::new(0x5eed);
    let k = spec.constants;
    let n = DECLARED_PROBES;
    let reports = [
        check_monotonicity(&spec.coeffs, k.c, &pair_probes(spec, n, root.child(0))),
        check_ellipticity(&spec.coeffs, k.alpha, &direction_probes(spec, n, root.child(1))),
        check_lipschitz_f(spec, &lipschitz_probes(spec, n, root.child(2))),
    ];
    for r in reports {
        let r = r.map_err(|e| e.to_string())?;
        if !r.pass {
            return Err(format!(
                "declared constant fails the {} check: statistic {} against threshold {}",
                r.condition, r.statistic, r.threshold
            ));
        }
    }
    for (t, x) in spec.random_points(n, root.child(3)) {
        let bound = k.growth_c * (1.0 + x.norm_squared()) + 1e-12;
        if x.dot(&spec.coeffs.mu(t, &x)) > bound || spec.coeffs.sigma(t, &x).norm_squared() > bound {
            return Err(format!(
                "declared growth_c = {} fails the linear growth check",
                k.growth_c
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU: &str = r#"
dim = 2
horizon = 1.0
[drift]
kind = "ou"
rate = 1.0
[diffusion]
kind = "scalar"
scale = 1.0
[terminal]
kind = "gaussian"
[nonlinearity]
kind = "linear"
lambda = -0.5
[constants]
c = 0.0
growth_c = 2.0
alpha = 1.0
lipschitz = 0.5
growth_p = 1.0
"#;

    #[test]
    fn ou_file_matches_preset() {
        let spec = parse_problem(OU, "ou-file").unwrap();
        let preset = sfpe::presets::ou_linear(2).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(spec.coeffs.mu(0.0, &x), preset.coeffs.mu(0.0, &x));
        assert_eq!(spec.eval_g(&x), preset.eval_g(&x));
        assert_eq!(spec.eval_f(0.0, &x, 2.0, &x), preset.eval_f(0.0, &x, 2.0, &x));
        assert_eq!(spec.name, "ou-file");
    }

    #[test]
    fn false_constants_rejected() {
        let bad = OU.replace("alpha = 1.0", "alpha = 1.5");
        assert!(parse_problem(&bad, "x").unwrap_err().contains("ellipticity"));
        let bad = OU.replace("lipschitz = 0.5", "lipschitz = 0.4");
        assert!(parse_problem(&bad, "x").is_err());
    }

    #[test]
    fn unknown_keys_and_kinds_rejected() {
        assert!(parse_problem(&OU.replace("rate = 1.0", "rate = 1.0\nspeed = 2"), "x").is_err());
        assert!(parse_problem(&OU.replace("kind = \"ou\"", "kind = \"cubic\""), "x").is_err());
    }

    #[test]
    fn manufactured_file_has_solution() {
        let text = OU
            .replace(
                "kind = \"linear\"\nlambda = -0.5",
                "kind = \"manufactured\"\nlambda = 0.5\nkappa = [0.3, 0.0]",
            )
            .replace("lipschitz = 0.5", "lipschitz = 0.6");
        let spec = parse_problem(&text, "m").unwrap();
        assert!(spec.solution.is_some());
    }
}
