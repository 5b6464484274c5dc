//! Cross-checks between independent representations of the same solution:
//! finite-difference PDE residuals, BEL gradients against bumped values,
//! convergence tables and Lyapunov moment certificates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{average_pairs, check_query, McConfig, Payoff};
use crate::picard::{solve, Candidate, PicardConfig};
use crate::problem::{LyapunovVq, ProblemSpec};
use crate::rng::RngStream;
use crate::sde::{sample_brownian, simulate_path_with_increments, simulate_weighted, TimeGrid};
use crate::stats::{collect_samples, Estimate};

/// Per-probe residuals with the tolerance they were judged against.
///
/// Probe `j` passes iff `residuals[j] <= tolerance * scales[j] + 3 stderrs[j]`,
/// where `residuals` and `stderrs` are Euclidean norms of the component vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub probes: Vec<(f64, DVector<f64>)>,
    pub residuals: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub components: Vec<DVector<f64>>,
    pub component_stderrs: Vec<DVector<f64>>,
    pub scales: Vec<f64>,
    pub pass: Vec<bool>,
    pub tolerance: f64,
}

impl ResidualReport {
    pub fn new(
        probes: Vec<(f64, DVector<f64>)>,
        components: Vec<DVector<f64>>,
        component_stderrs: Vec<DVector<f64>>,
        scales: Vec<f64>,
        tolerance: f64,
    ) -> Self {
        let residuals: Vec<f64> = components.iter().map(|c| c.norm()).collect();
        let stderrs: Vec<f64> = component_stderrs.iter().map(|c| c.norm()).collect();
        let pass = residuals
            .iter()
            .zip(&stderrs)
            .zip(&scales)
            .map(|((r, se), sc)| *r <= tolerance * sc + 3.0 * se)
            .collect();
        Self {
            probes,
            residuals,
            stderrs,
            components,
            component_stderrs,
            scales,
            pass,
            tolerance,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }

    /// Largest `residual / scale` over the probes.
    pub fn max_scaled_residual(&self) -> f64 {
        self.residuals
            .iter()
            .zip(&self.scales)
            .map(|(r, s)| r / s)
            .fold(0.0, f64::max)
    }
}

/// Finite-difference steps for [`pde_residual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps {
    /// Time step as a fraction of `T`.
    pub time_fraction: f64,
    /// Space step as a multiple of `1 + |x|`.
    pub space_factor: f64,
    /// Use the candidate's own gradient instead of differencing its value.
    pub supplied_gradient: bool,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            time_fraction: 1e-3,
            space_factor: 1e-3,
            supplied_gradient: true,
        }
    }
}

/// Default scaled tolerance of [`pde_residual`].
pub const PDE_TOLERANCE: f64 = 1e-4;

/// Linear combination of candidate values evaluated by a finite-difference stencil.
struct Stencil {
    dt: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    center: DVector<f64>,
    /// Standard error of the assembled residual when the candidate is noisy.
    stderr: f64,
}

fn stencil(
    u: &dyn Fn(f64, &DVector<f64>) -> Result<(DVector<f64>, f64)>,
    t: f64,
    x: &DVector<f64>,
    ht: f64,
    hx: f64,
    supplied_gradient: bool,
    spec: &ProblemSpec,
) -> Result<Stencil> {
    let d = x.len();
    let shift = |i: usize, a: f64, j: usize, b: f64| {
        let mut y = x.clone();
        y[i] += a;
        y[j] += b;
        y
    };
    let (center, se_c) = u(t, x)?;
    let (up, se_up) = u(t + ht, x)?;
    let (down, se_down) = u(t - ht, x)?;
    let dt = (up[0] - down[0]) / (2.0 * ht);
    let sigma = spec.coeffs.sigma(t, x);
    let a = &sigma * sigma.transpose();
    let mu = spec.coeffs.mu(t, x);
    // variance contributions, weighted by the coefficient of each evaluation in the residual
    let mut var = (se_up * se_up + se_down * se_down) / (4.0 * ht * ht);
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let mut center_weight = 0.0;
    for i in 0..d {
        let (p, se_p) = u(t, &shift(i, hx, i, 0.0))?;
        let (m, se_m) = u(t, &shift(i, -hx, i, 0.0))?;
        hess[(i, i)] = (p[0] - 2.0 * center[0] + m[0]) / (hx * hx);
        grad[i] = (p[0] - m[0]) / (2.0 * hx);
        let w = 0.5 * a[(i, i)] / (hx * hx);
        let g = if supplied_gradient { 0.0 } else { mu[i] / (2.0 * hx) };
        var += (w + g).powi(2) * se_p * se_p + (w - g).powi(2) * se_m * se_m;
        center_weight += 2.0 * w;
        for j in (i + 1)..d {
            let (pp, s1) = u(t, &shift(i, hx, j, hx))?;
            let (pm, s2) = u(t, &shift(i, hx, j, -hx))?;
            let (mp, s3) = u(t, &shift(i, -hx, j, hx))?;
            let (mm, s4) = u(t, &shift(i, -hx, j, -hx))?;
            let h = (pp[0] - pm[0] - mp[0] + mm[0]) / (4.0 * hx * hx);
            hess[(i, j)] = h;
            hess[(j, i)] = h;
            let w = a[(i, j)] / (4.0 * hx * hx);
            var += w * w * (s1 * s1 + s2 * s2 + s3 * s3 + s4 * s4);
        }
    }
    var += center_weight * center_weight * se_c * se_c;
    if supplied_gradient {
        grad.copy_from(&center.rows(1, d));
    }
    Ok(Stencil {
        dt,
        grad,
        hess,
        center,
        stderr: var.sqrt(),
    })
}

fn pde_residual_impl(
    spec: &ProblemSpec,
    u: &dyn Fn(f64, &DVector<f64>) -> Result<(DVector<f64>, f64)>,
    probes: &[(f64, DVector<f64>)],
    fd: FdSteps,
    require_precision: bool,
) -> Result<ResidualReport> {
    let ht = fd.time_fraction * spec.horizon;
    let mut components = Vec::with_capacity(probes.len());
    let mut stderrs = Vec::with_capacity(probes.len());
    let mut scales = Vec::with_capacity(probes.len());
    for (t, x) in probes {
        if x.len() != spec.dim {
            return Err(Error::Usage(format!(
                "probe has length {}, expected {}",
                x.len(),
                spec.dim
            )));
        }
        if !(*t > 0.0 && t + ht < spec.horizon) {
            return Err(Error::Usage(format!(
                "probe t = {t} leaves no room for the time stencil (h_t = {ht:e}, T = {})",
                spec.horizon
            )));
        }
        let hx = fd.space_factor * (1.0 + x.norm());
        let s = stencil(u, *t, x, ht, hx, fd.supplied_gradient, spec)?;
        let sigma = spec.coeffs.sigma(*t, x);
        let a = &sigma * sigma.transpose();
        let mu = spec.coeffs.mu(*t, x);
        let value = s.center[0];
        let residual =
            s.dt + mu.dot(&s.grad) + 0.5 * (a.component_mul(&s.hess)).sum() + (spec.f)(*t, x, value, &s.grad);
        let scale = 1.0 + value.abs() + s.grad.norm();
        if require_precision && 3.0 * s.stderr >= PDE_TOLERANCE * scale {
            return Err(Error::Usage(format!(
                "candidate noise too large for the residual test: stderr {:e} vs tolerance {:e}; increase n_paths",
                s.stderr,
                PDE_TOLERANCE * scale
            )));
        }
        components.push(DVector::from_element(1, residual));
        stderrs.push(DVector::from_element(1, s.stderr));
        scales.push(scale);
    }
    Ok(ResidualReport::new(
        probes.to_vec(),
        components,
        stderrs,
        scales,
        PDE_TOLERANCE,
    ))
}

/// `du/dt + <mu, grad u> + tr(sigma sigma^T Hess u)/2 + f(t, x, u, grad u)` by
/// central differences at each probe, judged against `1e-4 (1 + |u| + |grad u|)`.
pub fn pde_residual(
    spec: &ProblemSpec,
    u: Candidate<'_>,
    probes: &[(f64, DVector<f64>)],
    fd: FdSteps,
) -> Result<ResidualReport> {
    pde_residual_impl(spec, &|t, x| Ok((u(t, x), 0.0)), probes, fd, false)
}

/// [`pde_residual`] for a Monte-Carlo candidate returning `(estimate, stderr of the value)`.
///
/// Refuses with a usage error when the propagated standard error of any
/// residual is not below a third of its tolerance.
pub fn pde_residual_mc(
    spec: &ProblemSpec,
    u: &dyn Fn(f64, &DVector<f64>) -> Result<(DVector<f64>, f64)>,
    probes: &[(f64, DVector<f64>)],
    fd: FdSteps,
) -> Result<ResidualReport> {
    pde_residual_impl(spec, u, probes, fd, true)
}

/// BEL gradient against central differences of the value with common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscheckReport {
    pub t: f64,
    pub x: DVector<f64>,
    pub bel: Estimate,
    pub finite_difference: Estimate,
    /// `bel - finite_difference`, estimated sample by sample.
    pub gap: Estimate,
    pub bump: f64,
    pub tolerance: Vec<f64>,
    pub pass: bool,
}

/// Relative tolerance of [`gradient_crosscheck`], as a fraction of `|grad u|`.
pub const CROSSCHECK_RELATIVE: f64 = 2e-2;
/// Bump size of the finite differences in [`gradient_crosscheck`], times `1 + |x|`.
pub const CROSSCHECK_BUMP: f64 = 1e-2;

/// Compare the BEL estimate of `grad_x E[payoff(X_T)]` with bumped values.
///
/// Both estimators run on the same paths, so the gap is estimated per sample.
/// Component `i` passes when `|gap_i| <= max(3 se_i, 0.02 |grad|)`.
pub fn gradient_crosscheck(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    payoff: Option<Payoff<'_>>,
    mc: McConfig,
    stream: RngStream,
) -> Result<CrosscheckReport> {
    check_query(spec, t, x)?;
    if mc.n_paths < 2 || mc.grid_steps == 0 {
        return Err(Error::Usage("crosscheck needs at least two paths and one step".into()));
    }
    let span = spec.horizon - t;
    crate::bel::check_horizon(spec, span)?;
    let d = spec.dim;
    let g = |y: &DVector<f64>| spec.eval_g(y);
    let payoff = payoff.unwrap_or(&g);
    let grid = TimeGrid::uniform(t, spec.horizon, mc.grid_steps)?;
    let n = grid.n_steps();
    let bump = CROSSCHECK_BUMP * (1.0 + x.norm());
    let samples = collect_samples(mc.n_paths, true, |i| {
        let increments = sample_brownian(&grid, d, &mut stream.child(i as u64).rng());
        let mut parts = Vec::with_capacity(2);
        for &sign in mc.signs() {
            let wp = simulate_weighted(spec, x, &grid, &increments, sign, true).map_err(|e| e.at_path(i))?;
            let bel = &wp.integrals[n] * (payoff(&wp.states[n]) / span);
            let mut out = vec![0.0; 3 * d];
            for k in 0..d {
                let mut up = x.clone();
                up[k] += bump;
                let mut down = x.clone();
                down[k] -= bump;
                let pu = simulate_weighted(spec, &up, &grid, &increments, sign, false).map_err(|e| e.at_path(i))?;
                let pd = simulate_weighted(spec, &down, &grid, &increments, sign, false).map_err(|e| e.at_path(i))?;
                let fd = (payoff(&pu.states[n]) - payoff(&pd.states[n])) / (2.0 * bump);
                out[k] = bel[k];
                out[d + k] = fd;
                out[2 * d + k] = bel[k] - fd;
            }
            parts.push(out);
        }
        Ok(average_pairs(parts))
    })?;
    let all = Estimate::from_samples(&samples)?;
    let part = |j: usize| Estimate {
        mean: all.mean[j * d..(j + 1) * d].to_vec(),
        stderr: all.stderr[j * d..(j + 1) * d].to_vec(),
        n_samples: all.n_samples,
    };
    let (bel, fd, gap) = (part(0), part(1), part(2));
    let grad_norm = fd.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tolerance: Vec<f64> = gap
        .stderr
        .iter()
        .map(|se| (3.0 * se).max(CROSSCHECK_RELATIVE * grad_norm))
        .collect();
    let pass = gap.mean.iter().zip(&tolerance).all(|(g, tol)| g.abs() <= *tol);
    Ok(CrosscheckReport {
        t,
        x: x.clone(),
        bel,
        finite_difference: fd,
        gap,
        bump,
        tolerance,
        pass,
    })
}

/// Parameter varied by [`convergence_study`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyAxis {
    /// Outer sample count `M[depth]`.
    NPaths,
    GridSteps,
    /// Picard depth; depth `n` uses the last `n` entries of the base sample counts.
    Depth,
}

impl StudyAxis {
    pub fn name(&self) -> &'static str {
        match self {
            StudyAxis::NPaths => "n_paths",
            StudyAxis::GridSteps => "grid_steps",
            StudyAxis::Depth => "depth",
        }
    }
}

/// One row of a convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub parameter: usize,
    pub estimate: DVector<f64>,
    pub stderr: DVector<f64>,
    /// `|v - u|` against the closed-form solution, when the problem has one.
    pub value_error: Option<f64>,
    /// `|grad v - grad u|`, when the problem has a closed form.
    pub gradient_error: Option<f64>,
    pub wall_seconds: f64,
}

fn study_config(base: &PicardConfig, axis: StudyAxis, value: usize) -> Result<PicardConfig> {
    let mut cfg = base.clone();
    match axis {
        StudyAxis::NPaths => {
            let last = cfg.samples_per_level.len() - 1;
            cfg.samples_per_level[last] = value;
        }
        StudyAxis::GridSteps => cfg.grid_steps = value,
        StudyAxis::Depth => {
            let n = base.samples_per_level.len();
            if value == 0 || value > n {
                return Err(Error::Usage(format!("depth {value} needs 1..={n} base sample counts")));
            }
            cfg.samples_per_level = base.samples_per_level[n - value..].to_vec();
            cfg.depth = value;
        }
    }
    Ok(cfg)
}

/// Solve at `(t, x)` for each value of `axis`, starting from `base`.
///
/// Row `j` uses `stream.child(j)`, so rows are independent.
pub fn convergence_study(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    axis: StudyAxis,
    values: &[usize],
    base: &PicardConfig,
    stream: RngStream,
) -> Result<Vec<StudyRow>> {
    base.validate()?;
    if values.is_empty() || values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage(
            "study values must be nonempty and strictly increasing".into(),
        ));
    }
    let exact = spec.solution.as_ref().map(|sol| sol(t, x));
    let mut rows = Vec::with_capacity(values.len());
    for (j, &value) in values.iter().enumerate() {
        let cfg = study_config(base, axis, value)?;
        let start = Instant::now();
        let vg = solve(spec, t, x, &cfg, stream.child(j as u64))?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let (value_error, gradient_error) = match &exact {
            Some(u) => {
                let diff = &vg.vg - u;
                (Some(diff[0].abs()), Some(diff.rows(1, spec.dim).norm()))
            }
            None => (None, None),
        };
        rows.push(StudyRow {
            parameter: value,
            estimate: vg.vg,
            stderr: vg.stderr,
            value_error,
            gradient_error,
            wall_seconds,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Usage("slope needs at least two matching points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Usage("log-log slope needs positive data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

/// One row of [`moment_certificates`].
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateRow {
    pub s: f64,
    /// Monte-Carlo mean of `exp(-rho (s - t)) V_q(X_s)`.
    pub mean: f64,
    pub stderr: f64,
    /// `V_q(x)`.
    pub bound: f64,
    pub pass: bool,
}

/// Check `E[exp(-rho (s - t)) V_q(X_s)] <= V_q(x)` at each horizon.
///
/// A horizon passes when `mean <= bound (1 + 3 stderr / mean)`. Horizon `j`
/// uses `stream.child(j)` and `steps` Euler steps.
#[allow(clippy::too_many_arguments)]
pub fn moment_certificates(
    spec: &ProblemSpec,
    vq: LyapunovVq,
    rho: f64,
    t: f64,
    x: &DVector<f64>,
    horizons: &[f64],
    n_paths: usize,
    steps: usize,
    stream: RngStream,
) -> Result<Vec<CertificateRow>> {
    if x.len() != spec.dim {
        return Err(Error::Usage(format!(
            "point has length {}, expected {}",
            x.len(),
            spec.dim
        )));
    }
    if n_paths < 2 || steps == 0 {
        return Err(Error::Usage("certificates need at least two paths and one step".into()));
    }
    let bound = vq.value(x);
    let mut rows = Vec::with_capacity(horizons.len());
    for (j, &s) in horizons.iter().enumerate() {
        if !(s > t && s <= spec.horizon) {
            return Err(Error::Usage(format!(
                "horizon s = {s} outside (t, T] = ({t}, {}]",
                spec.horizon
            )));
        }
        let grid = TimeGrid::uniform(t, s, steps)?;
        let discount = (-rho * (s - t)).exp();
        let row_stream = stream.child(j as u64);
        let samples = collect_samples(n_paths, true, |i| {
            let increments = sample_brownian(&grid, spec.dim, &mut row_stream.child(i as u64).rng());
            let path = simulate_path_with_increments(spec, x, &grid, increments).map_err(|e| e.at_path(i))?;
            Ok(vec![discount * vq.value(&path.states[steps])])
        })?;
        let est = Estimate::from_samples(&samples)?;
        let (mean, stderr) = (est.mean[0], est.stderr[0]);
        rows.push(CertificateRow {
            s,
            mean,
            stderr,
            bound,
            pass: mean <= bound * (1.0 + 3.0 * stderr / mean),
        });
    }
    Ok(rows)
}
