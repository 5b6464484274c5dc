//! Plain Monte-Carlo estimators: the linear Feynman-Kac value, the
//! Bismut-Elworthy-Li gradient, and the joint `(value, gradient)` estimator
//! with a frozen running term.

use nalgebra::DVector;
use rand::Rng;

use crate::bel::{check_horizon, weight_from_integral};
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::rng::RngStream;
use crate::sde::{sample_brownian, simulate_weighted, TimeGrid, DEFAULT_STEPS};
use crate::stats::{collect_samples, Estimate};

/// Running term `h(s, y)`.
pub type Running<'a> = &'a (dyn Fn(f64, &DVector<f64>) -> f64 + Sync);
/// Terminal payoff `g(y)`.
pub type Payoff<'a> = &'a (dyn Fn(&DVector<f64>) -> f64 + Sync);

/// How the time integral of the running term is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    /// Left-point sum over the grid; the node at `s = t` is dropped.
    #[default]
    LeftPoint,
    /// One uniformly drawn time `r` per sample, weighted by `T - t`.
    RandomizedUniform,
}

/// Sample size and discretization of a Monte-Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    /// Number of samples; with `antithetic` each sample averages a pair of paths.
    pub n_paths: usize,
    pub grid_steps: usize,
    pub antithetic: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            grid_steps: DEFAULT_STEPS,
            antithetic: false,
        }
    }
}

impl McConfig {
    pub fn new(n_paths: usize, grid_steps: usize) -> Self {
        Self {
            n_paths,
            grid_steps,
            antithetic: false,
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub(crate) fn signs(&self) -> &'static [f64] {
        if self.antithetic {
            &[1.0, -1.0]
        } else {
            &[1.0]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.grid_steps == 0 {
            return Err(Error::Usage("n_paths and grid_steps must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_query(spec: &ProblemSpec, t: f64, x: &DVector<f64>) -> Result<()> {
    if x.len() != spec.dim {
        return Err(Error::Usage(format!(
            "point has length {}, expected {}",
            x.len(),
            spec.dim
        )));
    }
    if t == spec.horizon {
        return Err(Error::Terminal);
    }
    if !(0.0..spec.horizon).contains(&t) {
        return Err(Error::Usage(format!("t = {t} outside [0, {})", spec.horizon)));
    }
    Ok(())
}

pub(crate) fn average_pairs(parts: Vec<Vec<f64>>) -> Vec<f64> {
    let n = parts.len() as f64;
    let mut out = vec![0.0; parts[0].len()];
    for p in &parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `E[g(X_T) + int_t^T h(s, X_s) ds]`, left-point in time including the node at `t`.
pub fn estimate_value(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    running: Running<'_>,
    mc: McConfig,
    stream: RngStream,
) -> Result<Estimate> {
    check_query(spec, t, x)?;
    mc.validate()?;
    let grid = TimeGrid::uniform(t, spec.horizon, mc.grid_steps)?;
    let samples = collect_samples(mc.n_paths, true, |i| {
        let increments = sample_brownian(&grid, spec.dim, &mut stream.child(i as u64).rng());
        let mut parts = Vec::with_capacity(2);
        for &sign in mc.signs() {
            let wp = simulate_weighted(spec, x, &grid, &increments, sign, false).map_err(|e| e.at_path(i))?;
            let mut acc = spec.eval_g(&wp.states[grid.n_steps()]);
            for k in 0..grid.n_steps() {
                acc += running(grid.times()[k], &wp.states[k]) * grid.dt(k);
            }
            parts.push(vec![acc]);
        }
        Ok(average_pairs(parts))
    })?;
    Estimate::from_samples(&samples)
}

/// `E[payoff(X_T) Z_{t,T}[1..]]`, the gradient of `x -> E[payoff(X^x_T)]`.
pub fn estimate_gradient_bel(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    payoff: Payoff<'_>,
    mc: McConfig,
    stream: RngStream,
) -> Result<Estimate> {
    check_query(spec, t, x)?;
    mc.validate()?;
    let span = spec.horizon - t;
    check_horizon(spec, span)?;
    let grid = TimeGrid::uniform(t, spec.horizon, mc.grid_steps)?;
    let n = grid.n_steps();
    let samples = collect_samples(mc.n_paths, true, |i| {
        let increments = sample_brownian(&grid, spec.dim, &mut stream.child(i as u64).rng());
        let mut parts = Vec::with_capacity(2);
        for &sign in mc.signs() {
            let wp = simulate_weighted(spec, x, &grid, &increments, sign, true).map_err(|e| e.at_path(i))?;
            let value = payoff(&wp.states[n]);
            parts.push((&wp.integrals[n] * (value / span)).iter().copied().collect());
        }
        Ok(average_pairs(parts))
    })?;
    Estimate::from_samples(&samples)
}

/// Randomized times are kept this fraction of `T - t` away from both ends so
/// that nested evaluations always see a representable horizon.
const DRAW_MARGIN: f64 = 1e-12;

/// Draw `r` uniformly from `(t, T)`, rejecting the margins at both ends.
pub(crate) fn draw_time<R: Rng>(spec: &ProblemSpec, t: f64, rng: &mut R) -> f64 {
    let span = spec.horizon - t;
    let margin = DRAW_MARGIN * span;
    loop {
        let u: f64 = rng.random();
        let r = t + span * u;
        if r - t >= margin && spec.horizon - r >= margin {
            return r;
        }
    }
}

/// Grid for randomized quadrature: `[t, r]` and `[r, T]` split the step budget.
pub(crate) fn randomized_grid(t: f64, r: f64, horizon: f64, steps: usize) -> Result<TimeGrid> {
    let first = steps.div_ceil(2);
    TimeGrid::two_piece(t, r, horizon, first, steps - first)
}

/// Time grid and Brownian increments shared by both signs of one sample.
pub(crate) struct PhiDraw {
    pub grid: TimeGrid,
    /// Node of the randomized time `r`; unused for left-point quadrature.
    pub r_index: usize,
    pub increments: Vec<DVector<f64>>,
}

/// Node label passed to the running term for the randomized time `r`.
pub(crate) const RANDOM_NODE_LABEL: usize = 1;

pub(crate) fn check_phi_args(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    steps: usize,
    quadrature: Quadrature,
) -> Result<()> {
    check_query(spec, t, x)?;
    check_horizon(spec, spec.horizon - t)?;
    if steps == 0 {
        return Err(Error::Usage("grid_steps must be positive".into()));
    }
    if quadrature == Quadrature::RandomizedUniform && steps < 2 {
        return Err(Error::Usage(
            "randomized quadrature needs at least two grid steps".into(),
        ));
    }
    Ok(())
}

/// Draw the grid and increments of one sample from `path_stream`.
pub(crate) fn phi_draw(
    spec: &ProblemSpec,
    t: f64,
    steps: usize,
    quadrature: Quadrature,
    path_stream: RngStream,
) -> Result<PhiDraw> {
    let (grid, r_index) = match quadrature {
        Quadrature::LeftPoint => (TimeGrid::uniform(t, spec.horizon, steps)?, 0),
        Quadrature::RandomizedUniform => {
            let r = draw_time(spec, t, &mut path_stream.child(0).rng());
            (randomized_grid(t, r, spec.horizon, steps)?, steps.div_ceil(2))
        }
    };
    let increments = sample_brownian(&grid, spec.dim, &mut path_stream.rng());
    Ok(PhiDraw {
        grid,
        r_index,
        increments,
    })
}

/// One draw of `g(X_T) Z_{t,T} + sum h(r, X_r) Z_{t,r} dr` with noise sign `sign`.
///
/// `running(label, r, y)` is called once per quadrature node; labels are the
/// grid index for left-point quadrature and [`RANDOM_NODE_LABEL`] otherwise.
/// The terminal term is skipped when `terminal` is `None`.
pub(crate) fn phi_sample(
    spec: &ProblemSpec,
    x: &DVector<f64>,
    draw: &PhiDraw,
    sign: f64,
    quadrature: Quadrature,
    terminal: Option<Payoff<'_>>,
    running: &mut dyn FnMut(usize, f64, &DVector<f64>) -> Result<f64>,
) -> Result<DVector<f64>> {
    let grid = &draw.grid;
    let n = grid.n_steps();
    let t = grid.t_start();
    let span = spec.horizon - t;
    let wp = simulate_weighted(spec, x, grid, &draw.increments, sign, true)?;
    let mut acc = match terminal {
        Some(g) => weight_from_integral(&wp.integrals[n], span) * g(&wp.states[n]),
        None => DVector::zeros(spec.dim + 1),
    };
    match quadrature {
        Quadrature::LeftPoint => {
            for k in 1..n {
                let tk = grid.times()[k];
                let h = running(k, tk, &wp.states[k])?;
                if h != 0.0 {
                    acc.axpy(h * grid.dt(k), &weight_from_integral(&wp.integrals[k], tk - t), 1.0);
                }
            }
        }
        Quadrature::RandomizedUniform => {
            let r = grid.times()[draw.r_index];
            let h = running(RANDOM_NODE_LABEL, r, &wp.states[draw.r_index])?;
            if h != 0.0 {
                acc.axpy(h * span, &weight_from_integral(&wp.integrals[draw.r_index], r - t), 1.0);
            }
        }
    }
    Ok(acc)
}

/// `E[g(X_T) Z_{t,T} + int_t^T h(r, X_r) Z_{t,r} dr]` as a `(d + 1)`-vector.
#[allow(clippy::too_many_arguments)]
pub fn estimate_value_gradient(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    terminal: Payoff<'_>,
    running: Running<'_>,
    mc: McConfig,
    quadrature: Quadrature,
    stream: RngStream,
) -> Result<Estimate> {
    mc.validate()?;
    check_phi_args(spec, t, x, mc.grid_steps, quadrature)?;
    let samples = collect_samples(mc.n_paths, true, |i| {
        let draw = phi_draw(spec, t, mc.grid_steps, quadrature, stream.child(i as u64))?;
        let mut parts = Vec::with_capacity(2);
        for &sign in mc.signs() {
            let mut h = |_: usize, r: f64, y: &DVector<f64>| Ok(running(r, y));
            let acc = phi_sample(spec, x, &draw, sign, quadrature, Some(terminal), &mut h).map_err(|e| e.at_path(i))?;
            parts.push(acc.iter().copied().collect());
        }
        Ok(average_pairs(parts))
    })?;
    Estimate::from_samples(&samples)
}
