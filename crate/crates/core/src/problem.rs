//! Problem instances: SDE coefficients with their spatial derivatives, the
//! nonlinearity and terminal condition, declared structural constants, and
//! probe-based checks of those constants.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type DriftFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Jacobian of one column of the diffusion matrix: `(t, x, column) -> d x d`.
pub type ColumnJacobianFn = Arc<dyn Fn(f64, &DVector<f64>, usize) -> DMatrix<f64> + Send + Sync>;
/// `f(t, x, a, w)`.
pub type Nonlinearity = Arc<dyn Fn(f64, &DVector<f64>, f64, &DVector<f64>) -> f64 + Send + Sync>;
pub type Terminal = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
/// A candidate or exact solution returning `(u, grad_x u)` stacked into a `d + 1` vector.
pub type SolutionFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Default relative tolerance of the probe-based condition checks.
pub const CHECK_TOLERANCE: f64 = 1e-8;

/// Drift field `mu(t, x)`.
#[derive(Clone)]
pub enum Drift {
    Zero,
    /// `mu(x) = A x + b`.
    Linear {
        matrix: DMatrix<f64>,
        offset: DVector<f64>,
    },
    /// `mu_i(x) = amplitude * sin(x_i)`.
    Sine {
        amplitude: f64,
    },
    Custom {
        field: DriftFn,
        jacobian: Option<MatrixFn>,
    },
}

/// Diffusion field `sigma(t, x)`, always square.
#[derive(Clone)]
pub enum Diffusion {
    Constant(DMatrix<f64>),
    /// `sigma(x) = scale * diag(x)`.
    Geometric {
        scale: f64,
    },
    /// `sigma(x) = diag(base + amplitude * tanh(x_i))`.
    Tanh {
        base: f64,
        amplitude: f64,
    },
    Custom {
        field: MatrixFn,
        column_jacobian: Option<ColumnJacobianFn>,
    },
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Zero => write!(f, "Zero"),
            Drift::Linear { matrix, offset } => f
                .debug_struct("Linear")
                .field("matrix", matrix)
                .field("offset", offset)
                .finish(),
            Drift::Sine { amplitude } => write!(f, "Sine({amplitude})"),
            Drift::Custom { jacobian, .. } => write!(f, "Custom(jacobian: {})", jacobian.is_some()),
        }
    }
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Diffusion::Geometric { scale } => write!(f, "Geometric({scale})"),
            Diffusion::Tanh { base, amplitude } => write!(f, "Tanh({base}, {amplitude})"),
            Diffusion::Custom { column_jacobian, .. } => {
                write!(f, "Custom(jacobian: {})", column_jacobian.is_some())
            }
        }
    }
}

/// The pair `(mu, sigma)` together with their spatial derivatives.
#[derive(Clone, Debug)]
pub struct CoefficientField {
    dim: usize,
    drift: Drift,
    diffusion: Diffusion,
    fd_fallback: bool,
}

fn fd_step(x: &DVector<f64>) -> f64 {
    f64::EPSILON.sqrt() * (1.0 + x.norm())
}

impl CoefficientField {
    /// Build and validate a coefficient field.
    ///
    /// User-supplied Jacobians of custom fields are compared against central
    /// finite differences at a fixed set of probe points.
    pub fn new(dim: usize, drift: Drift, diffusion: Diffusion) -> Result<Self> {
        let field = Self {
            dim,
            drift,
            diffusion,
            fd_fallback: false,
        };
        field.validate()?;
        Ok(field)
    }

    /// Allow finite-difference Jacobians for custom fields that supply none.
    pub fn with_fd_fallback(mut self) -> Self {
        self.fd_fallback = true;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    /// True when `sigma` does not depend on `(t, x)`.
    pub fn has_constant_diffusion(&self) -> bool {
        matches!(self.diffusion, Diffusion::Constant(_))
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        match &self.drift {
            Drift::Linear { matrix, offset } => {
                if matrix.shape() != (d, d) || offset.len() != d {
                    return Err(Error::Config("linear drift has wrong shape".into()));
                }
            }
            Drift::Sine { amplitude } if !amplitude.is_finite() => {
                return Err(Error::Config("sine drift amplitude must be finite".into()));
            }
            _ => {}
        }
        if let Diffusion::Constant(m) = &self.diffusion {
            if m.shape() != (d, d) {
                return Err(Error::Config("constant diffusion must be d x d".into()));
            }
        }
        let stream = RngStream::new(0x5eed_cafe);
        for i in 0..8 {
            let mut rng = stream.child(i).rng();
            let t: f64 = rng.random();
            let x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mu = self.mu(t, &x);
            let sigma = self.sigma(t, &x);
            if mu.len() != d || sigma.shape() != (d, d) {
                return Err(Error::Config("coefficient field returns wrong shapes".into()));
            }
            if let Drift::Custom { jacobian: Some(_), .. } = &self.drift {
                let exact = self.jac_mu(t, &x)?;
                let fd = self.fd_jac_mu(t, &x);
                check_fd_agreement("drift jacobian", &exact, &fd)?;
            }
            if let Diffusion::Custom {
                column_jacobian: Some(_),
                ..
            } = &self.diffusion
            {
                for j in 0..d {
                    let exact = self.jac_sigma_col(t, &x, j)?;
                    let fd = self.fd_jac_sigma_col(t, &x, j);
                    check_fd_agreement("diffusion column jacobian", &exact, &fd)?;
                }
            }
        }
        Ok(())
    }

    pub fn mu(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        self.mu_into(t, x, &mut out);
        out
    }

    pub fn mu_into(&self, t: f64, x: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.drift {
            Drift::Zero => out.fill(0.0),
            Drift::Linear { matrix, offset } => {
                out.copy_from(offset);
                out.gemv(1.0, matrix, x, 1.0);
            }
            Drift::Sine { amplitude } => {
                for (o, xi) in out.iter_mut().zip(x.iter()) {
                    *o = amplitude * xi.sin();
                }
            }
            Drift::Custom { field, .. } => out.copy_from(&field(t, x)),
        }
    }

    pub fn sigma(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.sigma_into(t, x, &mut out);
        out
    }

    pub fn sigma_into(&self, t: f64, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        match &self.diffusion {
            Diffusion::Constant(m) => out.copy_from(m),
            Diffusion::Geometric { scale } => {
                out.fill(0.0);
                for i in 0..self.dim {
                    out[(i, i)] = scale * x[i];
                }
            }
            Diffusion::Tanh { base, amplitude } => {
                out.fill(0.0);
                for i in 0..self.dim {
                    out[(i, i)] = base + amplitude * x[i].tanh();
                }
            }
            Diffusion::Custom { field, .. } => out.copy_from(&field(t, x)),
        }
    }

    /// `d mu / d x` at `(t, x)`.
    pub fn jac_mu(&self, t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.jac_mu_into(t, x, &mut out)?;
        Ok(out)
    }

    pub fn jac_mu_into(&self, t: f64, x: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        match &self.drift {
            Drift::Zero => out.fill(0.0),
            Drift::Linear { matrix, .. } => out.copy_from(matrix),
            Drift::Sine { amplitude } => {
                out.fill(0.0);
                for i in 0..self.dim {
                    out[(i, i)] = amplitude * x[i].cos();
                }
            }
            Drift::Custom { jacobian, .. } => match jacobian {
                Some(j) => out.copy_from(&j(t, x)),
                None if self.fd_fallback => out.copy_from(&self.fd_jac_mu(t, x)),
                None => return Err(Error::Config("custom drift has no jacobian".into())),
            },
        }
        Ok(())
    }

    /// Jacobian of column `col` of `sigma`: entry `(i, k)` is `d sigma_{i,col} / d x_k`.
    pub fn jac_sigma_col(&self, t: f64, x: &DVector<f64>, col: usize) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.jac_sigma_col_into(t, x, col, &mut out)?;
        Ok(out)
    }

    pub fn jac_sigma_col_into(&self, t: f64, x: &DVector<f64>, col: usize, out: &mut DMatrix<f64>) -> Result<()> {
        match &self.diffusion {
            Diffusion::Constant(_) => out.fill(0.0),
            Diffusion::Geometric { scale } => {
                out.fill(0.0);
                out[(col, col)] = *scale;
            }
            Diffusion::Tanh { amplitude, .. } => {
                out.fill(0.0);
                let c = x[col].cosh();
                out[(col, col)] = amplitude / (c * c);
            }
            Diffusion::Custom { column_jacobian, .. } => match column_jacobian {
                Some(j) => out.copy_from(&j(t, x, col)),
                None if self.fd_fallback => out.copy_from(&self.fd_jac_sigma_col(t, x, col)),
                None => return Err(Error::Config("custom diffusion has no jacobian".into())),
            },
        }
        Ok(())
    }

    /// True when every Jacobian is available (exactly or by fallback).
    pub fn has_jacobians(&self) -> bool {
        let drift_ok = !matches!(self.drift, Drift::Custom { jacobian: None, .. });
        let diff_ok = !matches!(
            self.diffusion,
            Diffusion::Custom {
                column_jacobian: None,
                ..
            }
        );
        self.fd_fallback || (drift_ok && diff_ok)
    }

    fn fd_jac_mu(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let h = fd_step(x);
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        for k in 0..self.dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let diff = (self.mu(t, &xp) - self.mu(t, &xm)) / (2.0 * h);
            jac.set_column(k, &diff);
        }
        jac
    }

    fn fd_jac_sigma_col(&self, t: f64, x: &DVector<f64>, col: usize) -> DMatrix<f64> {
        let h = fd_step(x);
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        for k in 0..self.dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let diff = (self.sigma(t, &xp).column(col) - self.sigma(t, &xm).column(col)) / (2.0 * h);
            jac.set_column(k, &diff);
        }
        jac
    }
}

fn check_fd_agreement(what: &str, exact: &DMatrix<f64>, fd: &DMatrix<f64>) -> Result<()> {
    let scale = 1.0 + exact.norm();
    let gap = (exact - fd).norm();
    if !(gap <= 1e-5 * scale) {
        return Err(Error::Config(format!(
            "{what} disagrees with finite differences (gap {gap:e})"
        )));
    }
    Ok(())
}

/// Structural constants declared for a problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    /// Monotonicity constant of `(mu, sigma)`; enters the weight moment bound.
    pub c: f64,
    /// Linear growth constant: `max(<x, mu>, |sigma|_F^2) <= growth_c (1 + |x|^2)`.
    pub growth_c: f64,
    /// Ellipticity constant.
    pub alpha: f64,
    /// Lipschitz constant of `f` in `(a, w)`.
    pub lipschitz: f64,
    /// Polynomial growth exponent of `g` and `f(., ., 0, 0)`.
    pub growth_p: f64,
}

/// Axis-aligned box that probe points are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub center: DVector<f64>,
    pub half_width: f64,
}

impl ProbeRegion {
    pub fn centered(dim: usize, half_width: f64) -> Self {
        Self {
            center: DVector::zeros(dim),
            half_width,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.center.len(), |i, _| {
            self.center[i] + self.half_width * (2.0 * rng.random::<f64>() - 1.0)
        })
    }
}

/// A semilinear Kolmogorov problem on `[0, T] x R^d`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub coeffs: CoefficientField,
    pub f: Nonlinearity,
    pub g: Terminal,
    pub constants: Constants,
    /// Where the declared constants are claimed to hold and are probed.
    pub region: ProbeRegion,
    /// Closed-form `(u, grad u)` when one is known.
    pub solution: Option<SolutionFn>,
    /// True when `f` does not depend on `(a, w)`.
    pub decoupled: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("coeffs", &self.coeffs)
            .field("constants", &self.constants)
            .field("has_solution", &self.solution.is_some())
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        horizon: f64,
        coeffs: CoefficientField,
        f: Nonlinearity,
        g: Terminal,
        constants: Constants,
    ) -> Result<Self> {
        let dim = coeffs.dim();
        let spec = Self {
            name: name.into(),
            dim,
            horizon,
            coeffs,
            f,
            g,
            constants,
            region: ProbeRegion::centered(dim, 3.0),
            solution: None,
            decoupled: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_region(mut self, region: ProbeRegion) -> Self {
        self.region = region;
        self
    }

    pub fn with_solution(mut self, solution: SolutionFn) -> Self {
        self.solution = Some(solution);
        self
    }

    /// Mark `f` as independent of `(a, w)`.
    pub fn decoupled(mut self) -> Self {
        self.decoupled = true;
        self
    }

    fn validate(&self) -> Result<()> {
        let k = &self.constants;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("horizon T must be positive".into()));
        }
        if !(k.c >= 0.0 && k.growth_c >= 0.0) {
            return Err(Error::Config("c and growth_c must be nonnegative".into()));
        }
        if !(k.alpha > 0.0 && k.lipschitz > 0.0 && k.growth_p > 0.0) {
            return Err(Error::Config("alpha, L and p must be positive".into()));
        }
        Ok(())
    }

    pub fn eval_f(&self, t: f64, x: &DVector<f64>, a: f64, w: &DVector<f64>) -> f64 {
        (self.f)(t, x, a, w)
    }

    pub fn eval_g(&self, x: &DVector<f64>) -> f64 {
        (self.g)(x)
    }

    /// Value and gradient at the terminal time. The gradient part is left
    /// unpopulated: the fixed-point equation only defines it on `[0, T)`.
    pub fn terminal_value(&self, x: &DVector<f64>) -> f64 {
        self.eval_g(x)
    }

    /// Draw `n` probe points `(t, x)` from `[0, T] x region`.
    pub fn random_points(&self, n: usize, stream: RngStream) -> Vec<(f64, DVector<f64>)> {
        let mut rng = stream.rng();
        (0..n)
            .map(|_| {
                let t = self.horizon * rng.random::<f64>();
                (t, self.region.sample(&mut rng))
            })
            .collect()
    }
}

/// Outcome of a probe-based check.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: &'static str,
    /// Worst value of the checked quotient over the probes.
    pub statistic: f64,
    /// Value the statistic is compared against.
    pub threshold: f64,
    pub tolerance: f64,
    pub n_probes: usize,
    /// Index of the probe attaining the statistic.
    pub worst_probe: usize,
    pub pass: bool,
}

fn rel_tol(threshold: f64) -> f64 {
    CHECK_TOLERANCE * threshold.abs().max(1.0)
}

/// Checks `max(<x-y, mu(s,x)-mu(s,y)>, 0.5 |sigma(s,x)-sigma(s,y)|_F^2) <= c/2 |x-y|^2`.
pub fn check_monotonicity(
    coeffs: &CoefficientField,
    c: f64,
    probes: &[(f64, DVector<f64>, DVector<f64>)],
) -> Result<ConditionReport> {
    if probes.is_empty() {
        return Err(Error::Usage("monotonicity check needs probes".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut worst_probe = 0;
    for (i, (s, x, y)) in probes.iter().enumerate() {
        let diff = x - y;
        let n2 = diff.norm_squared();
        if n2 == 0.0 {
            return Err(Error::Usage(format!("probe {i} has coincident x and y")));
        }
        let drift_q = diff.dot(&(coeffs.mu(*s, x) - coeffs.mu(*s, y))) / n2;
        let diff_q = 0.5 * (coeffs.sigma(*s, x) - coeffs.sigma(*s, y)).norm_squared() / n2;
        let q = drift_q.max(diff_q);
        if q > worst {
            worst = q;
            worst_probe = i;
        }
    }
    let threshold = 0.5 * c;
    let tolerance = rel_tol(threshold);
    Ok(ConditionReport {
        condition: "monotonicity",
        statistic: worst,
        threshold,
        tolerance,
        n_probes: probes.len(),
        worst_probe,
        pass: worst <= threshold + tolerance,
    })
}

/// Checks `v^T sigma sigma^T v >= alpha |v|^2`.
pub fn check_ellipticity(
    coeffs: &CoefficientField,
    alpha: f64,
    probes: &[(f64, DVector<f64>, DVector<f64>)],
) -> Result<ConditionReport> {
    if probes.is_empty() {
        return Err(Error::Usage("ellipticity check needs probes".into()));
    }
    let mut worst = f64::INFINITY;
    let mut worst_probe = 0;
    for (i, (s, x, v)) in probes.iter().enumerate() {
        let n2 = v.norm_squared();
        if n2 == 0.0 {
            return Err(Error::Usage(format!("probe {i} has a zero test vector")));
        }
        let q = (coeffs.sigma(*s, x).transpose() * v).norm_squared() / n2;
        if q < worst {
            worst = q;
            worst_probe = i;
        }
    }
    let tolerance = rel_tol(alpha);
    Ok(ConditionReport {
        condition: "ellipticity",
        statistic: worst,
        threshold: alpha,
        tolerance,
        n_probes: probes.len(),
        worst_probe,
        pass: worst >= alpha - tolerance,
    })
}

/// A pair of `(a, w)` arguments sharing `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzProbe {
    pub t: f64,
    pub x: DVector<f64>,
    pub a: (f64, f64),
    pub w: (DVector<f64>, DVector<f64>),
}

/// Checks `|f(t,x,a1,w1) - f(t,x,a2,w2)| <= L |(a1,w1) - (a2,w2)|`.
pub fn check_lipschitz_f(spec: &ProblemSpec, probes: &[LipschitzProbe]) -> Result<ConditionReport> {
    if probes.is_empty() {
        return Err(Error::Usage("lipschitz check needs probes".into()));
    }
    let mut worst = 0.0;
    let mut worst_probe = 0;
    for (i, p) in probes.iter().enumerate() {
        let da = p.a.0 - p.a.1;
        let dist = (da * da + (&p.w.0 - &p.w.1).norm_squared()).sqrt();
        if dist == 0.0 {
            return Err(Error::Usage(format!("probe {i} pairs identical (a, w)")));
        }
        let df = spec.eval_f(p.t, &p.x, p.a.0, &p.w.0) - spec.eval_f(p.t, &p.x, p.a.1, &p.w.1);
        let q = df.abs() / dist;
        if q > worst {
            worst = q;
            worst_probe = i;
        }
    }
    let l = spec.constants.lipschitz;
    let tolerance = rel_tol(l);
    Ok(ConditionReport {
        condition: "lipschitz",
        statistic: worst,
        threshold: l,
        tolerance,
        n_probes: probes.len(),
        worst_probe,
        pass: worst <= l + tolerance,
    })
}

/// Checks `|g(x)| <= bound (1 + |x|^2)^(p/2)` and the same for `f(t, x, 0, 0)`.
pub fn check_polynomial_growth(
    spec: &ProblemSpec,
    bound: f64,
    probes: &[(f64, DVector<f64>)],
) -> Result<ConditionReport> {
    if probes.is_empty() {
        return Err(Error::Usage("growth check needs probes".into()));
    }
    let p = spec.constants.growth_p;
    let zero = DVector::zeros(spec.dim);
    let mut worst = 0.0;
    let mut worst_probe = 0;
    for (i, (t, x)) in probes.iter().enumerate() {
        let weight = (1.0 + x.norm_squared()).powf(0.5 * p);
        let q = spec.eval_g(x).abs().max(spec.eval_f(*t, x, 0.0, &zero).abs()) / weight;
        if q > worst {
            worst = q;
            worst_probe = i;
        }
    }
    let tolerance = rel_tol(bound);
    Ok(ConditionReport {
        condition: "polynomial-growth",
        statistic: worst,
        threshold: bound,
        tolerance,
        n_probes: probes.len(),
        worst_probe,
        pass: worst <= bound + tolerance,
    })
}

/// Random probes `(t, x, y)` with `x != y` drawn from the problem's region.
pub fn pair_probes(spec: &ProblemSpec, n: usize, stream: RngStream) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
    let mut rng = stream.rng();
    (0..n)
        .map(|_| {
            let t = spec.horizon * rng.random::<f64>();
            let x = spec.region.sample(&mut rng);
            let mut y = spec.region.sample(&mut rng);
            if y == x {
                y[0] += spec.region.half_width.max(1.0);
            }
            (t, x, y)
        })
        .collect()
}

/// Random probes `(t, x, v)` with a standard normal, nonzero `v`.
pub fn direction_probes(spec: &ProblemSpec, n: usize, stream: RngStream) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
    let mut rng = stream.rng();
    (0..n)
        .map(|_| {
            let t = spec.horizon * rng.random::<f64>();
            let x = spec.region.sample(&mut rng);
            let mut v = DVector::from_fn(spec.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            if v.norm_squared() == 0.0 {
                v[0] = 1.0;
            }
            (t, x, v)
        })
        .collect()
}

/// Random Lipschitz probes with `(a, w)` drawn from a standard normal.
pub fn lipschitz_probes(spec: &ProblemSpec, n: usize, stream: RngStream) -> Vec<LipschitzProbe> {
    let mut rng = stream.rng();
    let d = spec.dim;
    (0..n)
        .map(|_| {
            let t = spec.horizon * rng.random::<f64>();
            let x = spec.region.sample(&mut rng);
            let mut normal = || rng.sample::<f64, _>(StandardNormal);
            let a = (normal(), normal());
            let w0 = DVector::from_fn(d, |_, _| normal());
            let w1 = DVector::from_fn(d, |_, _| normal());
            LipschitzProbe { t, x, a, w: (w0, w1) }
        })
        .collect()
}

/// The Lyapunov family `V_q(x) = (1 + |x|^2)^(q/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovVq {
    pub q: f64,
}

impl LyapunovVq {
    pub fn new(q: f64) -> Result<Self> {
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Usage("Lyapunov exponent q must be positive".into()));
        }
        Ok(Self { q })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (1.0 + x.norm_squared()).powf(0.5 * self.q)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = 1.0 + x.norm_squared();
        x * (self.q * s.powf(0.5 * self.q - 1.0))
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let s = 1.0 + x.norm_squared();
        let q = self.q;
        let d = x.len();
        let mut h = DMatrix::identity(d, d) * (q * s.powf(0.5 * q - 1.0));
        h.ger(q * (q - 2.0) * s.powf(0.5 * q - 2.0), x, x, 1.0);
        h
    }

    /// The admissible rate `growth_c q max(q + 1, 3) + L q` for problems whose
    /// coefficients satisfy the linear growth bound with `growth_c`.
    pub fn growth_rate(&self, growth_c: f64, lipschitz: f64) -> f64 {
        growth_c * self.q * (self.q + 1.0).max(3.0) + lipschitz * self.q
    }
}

/// Result of [`check_lyapunov_vq`].
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    pub q: f64,
    pub rho: f64,
    /// `max_x [<mu, grad V> + tr(sigma sigma^T Hess V)/2 + |grad V^T sigma|^2 / (2V)] / V`.
    pub rate_moment: f64,
    /// `max_x [<mu, grad V> + tr(sigma sigma^T Hess V)/2 + L |grad V|] / V`.
    pub rate_lipschitz: f64,
    /// Smallest `rho` passing both inequalities on these probes.
    pub implied_rho: f64,
    pub n_probes: usize,
    pub pass: bool,
}

/// Probe both generator inequalities for `V_q` with rate `rho`.
pub fn check_lyapunov_vq(
    spec: &ProblemSpec,
    vq: LyapunovVq,
    rho: f64,
    probes: &[(f64, DVector<f64>)],
) -> Result<LyapunovReport> {
    if probes.is_empty() {
        return Err(Error::Usage("lyapunov check needs probes".into()));
    }
    let l = spec.constants.lipschitz;
    let mut rate_moment = f64::NEG_INFINITY;
    let mut rate_lipschitz = f64::NEG_INFINITY;
    let mut pass = true;
    for (t, x) in probes {
        let v = vq.value(x);
        if !(v > 0.0) {
            return Err(Error::Internal("V_q evaluated nonpositive".into()));
        }
        let grad = vq.gradient(x);
        let hess = vq.hessian(x);
        let mu = spec.coeffs.mu(*t, x);
        let sigma = spec.coeffs.sigma(*t, x);
        let a = sigma.transpose() * &hess * &sigma;
        let generator = mu.dot(&grad) + 0.5 * a.trace();
        let lhs_moment = generator + 0.5 * (sigma.transpose() * &grad).norm_squared() / v;
        let lhs_lip = generator + l * grad.norm();
        let tol = CHECK_TOLERANCE * v.max(1.0);
        pass &= lhs_moment <= rho * v + tol && lhs_lip <= rho * v + tol;
        rate_moment = rate_moment.max(lhs_moment / v);
        rate_lipschitz = rate_lipschitz.max(lhs_lip / v);
    }
    Ok(LyapunovReport {
        q: vq.q,
        rho,
        rate_moment,
        rate_lipschitz,
        implied_rho: rate_moment.max(rate_lipschitz).max(0.0),
        n_probes: probes.len(),
        pass,
    })
}

/// Shape of the manufactured target `u(t, x) = exp(-decay (T - t)) / (1 + |x|^2 / width^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManufacturedTarget {
    pub decay: f64,
    pub width: f64,
}

impl Default for ManufacturedTarget {
    fn default() -> Self {
        Self { decay: 1.0, width: 1.0 }
    }
}

/// Closed-form derivatives of a [`ManufacturedTarget`].
#[derive(Debug, Clone)]
pub struct TargetDerivatives {
    pub u: f64,
    pub dt: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl ManufacturedTarget {
    pub fn derivatives(&self, horizon: f64, t: f64, x: &DVector<f64>) -> TargetDerivatives {
        let w2 = self.width * self.width;
        let e = (-self.decay * (horizon - t)).exp();
        let s = 1.0 + x.norm_squared() / w2;
        let u = e / s;
        // u = e * phi(|x|^2), phi(r) = (1 + r / w2)^-1
        let phi1 = -1.0 / (w2 * s * s);
        let phi2 = 2.0 / (w2 * w2 * s * s * s);
        let grad = x * (2.0 * e * phi1);
        let d = x.len();
        let mut hess = DMatrix::identity(d, d) * (2.0 * e * phi1);
        hess.ger(4.0 * e * phi2, x, x, 1.0);
        TargetDerivatives {
            u,
            dt: self.decay * u,
            grad,
            hess,
        }
    }
}

/// Build the problem whose solution is the given manufactured target.
///
/// The nonlinearity is `f(t,x,a,w) = s0(t,x) + lambda a + <kappa, w>` with the
/// source `s0` chosen so that the target solves the PDE exactly.
pub fn manufactured_problem(
    name: impl Into<String>,
    horizon: f64,
    coeffs: CoefficientField,
    constants: Constants,
    lambda: f64,
    kappa: DVector<f64>,
    target: ManufacturedTarget,
) -> Result<(ProblemSpec, SolutionFn)> {
    let d = coeffs.dim();
    if kappa.len() != d {
        return Err(Error::Config("kappa must have length d".into()));
    }
    let coupling = (lambda * lambda + kappa.norm_squared()).sqrt();
    let constants = Constants {
        lipschitz: if coupling > 0.0 { coupling } else { constants.lipschitz },
        ..constants
    };
    let source = {
        let coeffs = coeffs.clone();
        let kappa = kappa.clone();
        move |t: f64, x: &DVector<f64>| {
            let td = target.derivatives(horizon, t, x);
            let mu = coeffs.mu(t, x);
            let sigma = coeffs.sigma(t, x);
            let diffusion = 0.5 * (sigma.transpose() * &td.hess * &sigma).trace();
            -td.dt - mu.dot(&td.grad) - diffusion - lambda * td.u - kappa.dot(&td.grad)
        }
    };
    let f: Nonlinearity = {
        let kappa = kappa.clone();
        Arc::new(move |t, x, a, w| source(t, x) + lambda * a + kappa.dot(w))
    };
    let g: Terminal = Arc::new(move |x| target.derivatives(horizon, horizon, x).u);
    let solution: SolutionFn = Arc::new(move |t, x| {
        let td = target.derivatives(horizon, t, x);
        let mut out = DVector::zeros(d + 1);
        out[0] = td.u;
        out.rows_mut(1, d).copy_from(&td.grad);
        out
    });
    let mut spec = ProblemSpec::new(name, horizon, coeffs, f, g, constants)?.with_solution(solution.clone());
    if coupling == 0.0 {
        spec = spec.decoupled();
    }
    Ok((spec, solution))
}

/// `du/dt + <mu, grad u> + tr(sigma sigma^T Hess u)/2 + f(t, x, u, grad u)` for a
/// manufactured target, from its closed-form derivatives.
pub fn manufactured_residual(spec: &ProblemSpec, target: ManufacturedTarget, t: f64, x: &DVector<f64>) -> f64 {
    let td = target.derivatives(spec.horizon, t, x);
    let mu = spec.coeffs.mu(t, x);
    let sigma = spec.coeffs.sigma(t, x);
    td.dt + mu.dot(&td.grad) + 0.5 * (sigma.transpose() * &td.hess * &sigma).trace() + spec.eval_f(t, x, td.u, &td.grad)
}
