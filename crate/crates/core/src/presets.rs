//! Built-in problem instances.
//!
//! Names: `heat`, `heat-d{n}`, `brownian`, `brownian-d{n}`, `ou-linear`,
//! `gbm-1d`, `manufactured-d{n}`. Each preset declares constants that its
//! coefficients satisfy on the preset's probe region, and a closed-form
//! solution.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{
    manufactured_problem, CoefficientField, Constants, Diffusion, Drift, ManufacturedTarget, ProbeRegion, ProblemSpec,
};

/// Lipschitz constant declared for presets whose `f` ignores `(a, w)`.
const DECOUPLED_L: f64 = 0.1;

pub const GBM_DRIFT: f64 = 0.05;
pub const GBM_VOL: f64 = 0.2;

/// Names accepted by [`preset`] (dimension-suffixed families shown with their shipped sizes).
pub const PRESET_NAMES: &[&str] = &[
    "heat",
    "heat-d1",
    "heat-d2",
    "heat-d5",
    "brownian",
    "brownian-d2",
    "ou-linear",
    "gbm-1d",
    "manufactured-d1",
    "manufactured-d2",
    "manufactured-d5",
    "manufactured-d10",
];

fn gaussian(x: &DVector<f64>) -> f64 {
    (-0.5 * x.norm_squared()).exp()
}

/// `u(t,x) = E[g(x + scale W_{T-t})]` for the Gaussian `g`, with its gradient.
fn gaussian_heat_solution(dim: usize, horizon: f64, variance_rate: f64) -> crate::problem::SolutionFn {
    Arc::new(move |t, x: &DVector<f64>| {
        let spread = 1.0 + variance_rate * (horizon - t);
        let u = spread.powf(-0.5 * dim as f64) * (-0.5 * x.norm_squared() / spread).exp();
        let mut out = DVector::zeros(dim + 1);
        out[0] = u;
        out.rows_mut(1, dim).copy_from(&(x * (-u / spread)));
        out
    })
}

fn decoupled_zero() -> crate::problem::Nonlinearity {
    Arc::new(|_, _, _, _| 0.0)
}

/// Heat equation `du/dt + laplace(u) = 0`: `mu = 0`, `sigma = sqrt(2) I`, Gaussian `g`.
pub fn heat(dim: usize) -> Result<ProblemSpec> {
    let coeffs = CoefficientField::new(
        dim,
        Drift::Zero,
        Diffusion::Constant(DMatrix::identity(dim, dim) * 2f64.sqrt()),
    )?;
    let horizon = 1.0;
    let constants = Constants {
        c: 0.0,
        growth_c: 2.0 * dim as f64,
        alpha: 2.0,
        lipschitz: DECOUPLED_L,
        growth_p: 1.0,
    };
    Ok(ProblemSpec::new(
        format!("heat-d{dim}"),
        horizon,
        coeffs,
        decoupled_zero(),
        Arc::new(gaussian),
        constants,
    )?
    .with_solution(gaussian_heat_solution(dim, horizon, 2.0))
    .decoupled())
}

/// Standard Brownian motion (`mu = 0`, `sigma = I`) with Gaussian `g` and `f = 0`.
pub fn brownian(dim: usize) -> Result<ProblemSpec> {
    let coeffs = CoefficientField::new(dim, Drift::Zero, Diffusion::Constant(DMatrix::identity(dim, dim)))?;
    let horizon = 1.0;
    let constants = Constants {
        c: 0.0,
        growth_c: dim as f64,
        alpha: 1.0,
        lipschitz: DECOUPLED_L,
        growth_p: 1.0,
    };
    Ok(ProblemSpec::new(
        format!("brownian-d{dim}"),
        horizon,
        coeffs,
        decoupled_zero(),
        Arc::new(gaussian),
        constants,
    )?
    .with_solution(gaussian_heat_solution(dim, horizon, 1.0))
    .decoupled())
}

/// Ornstein-Uhlenbeck flow `mu = -x`, `sigma = I`, Gaussian `g`, linear `f = -a / 2`.
pub fn ou_linear(dim: usize) -> Result<ProblemSpec> {
    let coeffs = CoefficientField::new(
        dim,
        Drift::Linear {
            matrix: -DMatrix::identity(dim, dim),
            offset: DVector::zeros(dim),
        },
        Diffusion::Constant(DMatrix::identity(dim, dim)),
    )?;
    let horizon = 1.0;
    let discount = 0.5;
    let constants = Constants {
        c: 0.0,
        growth_c: dim as f64,
        alpha: 1.0,
        lipschitz: discount,
        growth_p: 1.0,
    };
    // X_T | x ~ N(x e^{-tau}, v I) with v = (1 - e^{-2 tau}) / 2
    let solution: crate::problem::SolutionFn = Arc::new(move |t, x: &DVector<f64>| {
        let tau = horizon - t;
        let decay = (-tau).exp();
        let v = 0.5 * (1.0 - (-2.0 * tau).exp());
        let m = x * decay;
        let u =
            (-discount * tau).exp() * (1.0 + v).powf(-0.5 * dim as f64) * (-0.5 * m.norm_squared() / (1.0 + v)).exp();
        let mut out = DVector::zeros(dim + 1);
        out[0] = u;
        out.rows_mut(1, dim).copy_from(&(m * (-u * decay / (1.0 + v))));
        out
    });
    Ok(ProblemSpec::new(
        "ou-linear",
        horizon,
        coeffs,
        Arc::new(move |_, _, a, _| -discount * a),
        Arc::new(gaussian),
        constants,
    )?
    .with_solution(solution))
}

/// One-dimensional geometric Brownian motion with linear payoff `g(x) = x`, `f = 0`.
///
/// The diffusion degenerates at `x = 0`, so the constants are declared (and
/// probed) on `x in [0.5, 2]` only.
pub fn gbm_1d() -> Result<ProblemSpec> {
    let (a, b) = (GBM_DRIFT, GBM_VOL);
    let coeffs = CoefficientField::new(
        1,
        Drift::Linear {
            matrix: DMatrix::from_element(1, 1, a),
            offset: DVector::zeros(1),
        },
        Diffusion::Geometric { scale: b },
    )?;
    let horizon = 1.0;
    let constants = Constants {
        c: (2.0 * a).max(b * b),
        growth_c: a.max(b * b),
        alpha: b * b * 0.25,
        lipschitz: DECOUPLED_L,
        growth_p: 1.0,
    };
    let solution: crate::problem::SolutionFn = Arc::new(move |t, x: &DVector<f64>| {
        let growth = (a * (horizon - t)).exp();
        DVector::from_vec(vec![x[0] * growth, growth])
    });
    Ok(ProblemSpec::new(
        "gbm-1d",
        horizon,
        coeffs,
        decoupled_zero(),
        Arc::new(|x: &DVector<f64>| x[0]),
        constants,
    )?
    .with_region(ProbeRegion {
        center: DVector::from_element(1, 1.25),
        half_width: 0.75,
    })
    .with_solution(solution)
    .decoupled())
}

/// Coupling used by the manufactured presets: `lambda = 0.5`, `kappa = 0.3 e_1`.
pub const MANUFACTURED_LAMBDA: f64 = 0.5;
pub const MANUFACTURED_KAPPA: f64 = 0.3;
pub const MANUFACTURED_HORIZON: f64 = 0.5;

/// Manufactured problem on an OU flow (`mu = -x/2`, `sigma = I`) with the
/// default target and a gradient-dependent linear nonlinearity.
pub fn manufactured(dim: usize) -> Result<ProblemSpec> {
    let coeffs = CoefficientField::new(
        dim,
        Drift::Linear {
            matrix: DMatrix::identity(dim, dim) * -0.5,
            offset: DVector::zeros(dim),
        },
        Diffusion::Constant(DMatrix::identity(dim, dim)),
    )?;
    let mut kappa = DVector::zeros(dim);
    kappa[0] = MANUFACTURED_KAPPA;
    let constants = Constants {
        c: 0.0,
        growth_c: dim as f64,
        alpha: 1.0,
        lipschitz: 1.0,
        growth_p: 1.0,
    };
    let (spec, _) = manufactured_problem(
        format!("manufactured-d{dim}"),
        MANUFACTURED_HORIZON,
        coeffs,
        constants,
        MANUFACTURED_LAMBDA,
        kappa,
        ManufacturedTarget::default(),
    )?;
    Ok(spec)
}

fn parse_dim(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)
        .and_then(|rest| rest.parse::<usize>().ok())
        .filter(|&d| (1..=64).contains(&d))
}

/// Look up a built-in preset by name.
pub fn preset(name: &str) -> Result<ProblemSpec> {
    match name {
        "heat" => return heat(2),
        "brownian" => return brownian(1),
        "ou-linear" => return ou_linear(2),
        "gbm-1d" => return gbm_1d(),
        _ => {}
    }
    if let Some(d) = parse_dim(name, "heat-d") {
        return heat(d);
    }
    if let Some(d) = parse_dim(name, "brownian-d") {
        return brownian(d);
    }
    if let Some(d) = parse_dim(name, "manufactured-d") {
        return manufactured(d);
    }
    Err(Error::Config(format!("unknown preset '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{
        check_ellipticity, check_lipschitz_f, check_monotonicity, direction_probes, lipschitz_probes, pair_probes,
    };
    use crate::rng::RngStream;

    #[test]
    fn all_names_resolve() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            assert!(spec.solution.is_some(), "{name}");
        }
        assert!(preset("heat-d0").is_err());
        assert!(preset("nope").is_err());
        assert_eq!(preset("heat").unwrap().dim, 2);
    }

    #[test]
    fn declared_constants_hold_on_random_probes() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            let root = RngStream::new(2024);
            let k = spec.constants;
            let m = check_monotonicity(&spec.coeffs, k.c, &pair_probes(&spec, 1000, root.child(0))).unwrap();
            let e = check_ellipticity(&spec.coeffs, k.alpha, &direction_probes(&spec, 1000, root.child(1))).unwrap();
            let l = check_lipschitz_f(&spec, &lipschitz_probes(&spec, 1000, root.child(2))).unwrap();
            assert!(m.pass, "{name}: {m:?}");
            assert!(e.pass, "{name}: {e:?}");
            assert!(l.pass, "{name}: {l:?}");
            // linear growth bound used by the Lyapunov family
            for (t, x) in spec.random_points(1000, root.child(3)) {
                let bound = k.growth_c * (1.0 + x.norm_squared());
                assert!(x.dot(&spec.coeffs.mu(t, &x)) <= bound + 1e-12, "{name}");
                assert!(spec.coeffs.sigma(t, &x).norm_squared() <= bound + 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn ou_solution_matches_gaussian_quadrature() {
        // 1-d oracle: E[g(m + sqrt(v) Z)] by trapezoid quadrature in Z
        let spec = ou_linear(1).unwrap();
        let sol = spec.solution.clone().unwrap();
        let (t, x) = (0.3f64, 0.8f64);
        let tau = 1.0 - t;
        let m = x * (-tau).exp();
        let v = 0.5 * (1.0 - (-2.0 * tau).exp());
        let n = 20_000;
        let h = 16.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let z = -8.0 + h * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let y = m + v.sqrt() * z;
            acc += w * (-0.5 * y * y).exp() * (-0.5 * z * z).exp();
        }
        let expected = (-0.5 * tau).exp() * acc * h / (2.0 * std::f64::consts::PI).sqrt();
        let got = sol(t, &DVector::from_element(1, x));
        assert!((got[0] - expected).abs() < 1e-10);
    }
}
