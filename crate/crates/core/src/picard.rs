//! Nested Monte-Carlo Picard iteration for the fixed-point equation
//!
//! `(v, grad v)(t,x) = E[g(X_T) Z_{t,T} + int_t^T f(r, X_r, v, grad v) Z_{t,r} dr]`
//!
//! and its multilevel (telescoping) variant. Iteration starts from `V_0 = 0`.
//!
//! Random streams are keyed so that results do not depend on the thread
//! count: sample `i` of a level draws its path from `stream.child(i)` and the
//! inner evaluation at quadrature node `k` from `stream.child(i).child(k)`.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimators::{
    average_pairs, check_phi_args, estimate_value_gradient, phi_draw, phi_sample, McConfig, Quadrature,
};
use crate::problem::ProblemSpec;
use crate::rng::RngStream;
use crate::sde::DEFAULT_STEPS;
use crate::stats::{collect_samples, Estimate};
use crate::verification::ResidualReport;

/// Offset of the stream keys used by multilevel correction levels.
const LEVEL_KEY_BASE: u64 = 1 << 63;

/// Candidate solution `(t, x) -> (v, grad v)`.
pub type Candidate<'a> = &'a (dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Plain,
    Multilevel,
}

/// Parameters of a Picard solve.
///
/// `samples_per_level[k - 1]` is the sample count `M[k]` used by the iterate
/// `V_k`. The multilevel scheme spends `M[n - l]` samples on level `l`, so `M`
/// must be nondecreasing in `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PicardConfig {
    pub depth: usize,
    pub samples_per_level: Vec<usize>,
    pub grid_steps: usize,
    pub quadrature: Quadrature,
    pub scheme: Scheme,
    pub antithetic: bool,
    /// Refuse runs whose predicted Euler step count exceeds this.
    pub budget: Option<u128>,
}

impl PicardConfig {
    pub fn new(samples_per_level: Vec<usize>) -> Self {
        Self {
            depth: samples_per_level.len(),
            samples_per_level,
            grid_steps: DEFAULT_STEPS,
            quadrature: Quadrature::LeftPoint,
            scheme: Scheme::Plain,
            antithetic: false,
            budget: None,
        }
    }

    pub fn grid_steps(mut self, steps: usize) -> Self {
        self.grid_steps = steps;
        self
    }

    pub fn quadrature(mut self, quadrature: Quadrature) -> Self {
        self.quadrature = quadrature;
        self
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn budget(mut self, budget: Option<u128>) -> Self {
        self.budget = budget;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Usage("Picard depth must be at least 1".into()));
        }
        if self.samples_per_level.len() != self.depth {
            return Err(Error::Usage(format!(
                "samples_per_level has {} entries, depth is {}",
                self.samples_per_level.len(),
                self.depth
            )));
        }
        if self.samples_per_level.contains(&0) {
            return Err(Error::Usage("samples_per_level entries must be positive".into()));
        }
        if self.grid_steps == 0 {
            return Err(Error::Usage("grid_steps must be positive".into()));
        }
        if self.scheme == Scheme::Multilevel && self.samples_per_level.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Usage(
                "multilevel sample counts must be nonincreasing in level (nondecreasing in depth)".into(),
            ));
        }
        Ok(())
    }

    fn copies(&self) -> u128 {
        if self.antithetic {
            2
        } else {
            1
        }
    }

    fn inner_calls(&self) -> u128 {
        match self.quadrature {
            Quadrature::LeftPoint => self.grid_steps as u128 - 1,
            Quadrature::RandomizedUniform => 1,
        }
    }

    /// Exact number of Euler steps the configured solve will take.
    pub fn predicted_steps(&self) -> u128 {
        let k = self.grid_steps as u128;
        let a = self.copies();
        let e = self.inner_calls();
        let m = |n: usize| self.samples_per_level[n - 1] as u128;
        let mut cost = vec![0u128; self.depth + 1];
        for n in 1..=self.depth {
            cost[n] = match self.scheme {
                Scheme::Plain => m(n).saturating_mul(a.saturating_mul(k.saturating_add(e.saturating_mul(cost[n - 1])))),
                Scheme::Multilevel => (0..n).fold(0u128, |total, l| {
                    let inner = if l == 0 { 0 } else { cost[l].saturating_add(cost[l - 1]) };
                    let level = m(n - l).saturating_mul(a.saturating_mul(k.saturating_add(e.saturating_mul(inner))));
                    total.saturating_add(level)
                }),
            };
        }
        cost[self.depth]
    }
}

/// `(v, grad v)` at `(t, x)` with per-component standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGradient {
    pub t: f64,
    pub x: DVector<f64>,
    /// `v` followed by `grad v`; the gradient entries are NaN at `t = T`.
    pub vg: DVector<f64>,
    pub stderr: DVector<f64>,
    /// Outer samples (summed over levels for the multilevel scheme).
    pub n_samples: usize,
    pub euler_steps: u64,
}

impl ValueGradient {
    pub fn value(&self) -> f64 {
        self.vg[0]
    }

    /// `None` at the terminal time, where the gradient is not defined.
    pub fn gradient(&self) -> Option<DVector<f64>> {
        if self.vg.iter().skip(1).any(|v| v.is_nan()) {
            return None;
        }
        Some(self.vg.rows(1, self.vg.len() - 1).into_owned())
    }
}

/// `(g(x), undefined)` at `t = T`.
pub fn terminal_value(spec: &ProblemSpec, x: &DVector<f64>) -> Result<ValueGradient> {
    if x.len() != spec.dim {
        return Err(Error::Usage(format!(
            "point has length {}, expected {}",
            x.len(),
            spec.dim
        )));
    }
    let mut vg = DVector::from_element(spec.dim + 1, f64::NAN);
    vg[0] = spec.eval_g(x);
    let mut stderr = DVector::from_element(spec.dim + 1, f64::NAN);
    stderr[0] = 0.0;
    Ok(ValueGradient {
        t: spec.horizon,
        x: x.clone(),
        vg,
        stderr,
        n_samples: 0,
        euler_steps: 0,
    })
}

struct Solver<'a> {
    spec: &'a ProblemSpec,
    cfg: &'a PicardConfig,
    steps: AtomicU64,
}

impl Solver<'_> {
    fn signs(&self) -> &'static [f64] {
        McConfig::new(1, 1).antithetic(self.cfg.antithetic).signs()
    }

    fn nonlinearity(&self, r: f64, y: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let d = self.spec.dim;
        (self.spec.f)(r, y, v[0], &v.rows(1, d).into_owned())
    }

    fn zero(&self) -> DVector<f64> {
        DVector::zeros(self.spec.dim + 1)
    }

    /// One Monte-Carlo level: `M` samples of `Phi` with the given running term.
    fn level(
        &self,
        t: f64,
        x: &DVector<f64>,
        m: usize,
        stream: RngStream,
        with_terminal: bool,
        running: &(dyn Fn(RngStream, usize, f64, &DVector<f64>) -> Result<f64> + Sync),
    ) -> Result<Estimate> {
        let spec = self.spec;
        let g = |y: &DVector<f64>| spec.eval_g(y);
        let terminal: Option<&(dyn Fn(&DVector<f64>) -> f64 + Sync)> = if with_terminal { Some(&g) } else { None };
        let samples = collect_samples(m, true, |i| {
            let sample_stream = stream.child(i as u64);
            let draw = phi_draw(spec, t, self.cfg.grid_steps, self.cfg.quadrature, sample_stream)?;
            let mut parts = Vec::with_capacity(2);
            for &sign in self.signs() {
                let mut h = |k: usize, r: f64, y: &DVector<f64>| running(sample_stream.child(k as u64), k, r, y);
                let acc = phi_sample(spec, x, &draw, sign, self.cfg.quadrature, terminal, &mut h)
                    .map_err(|e| e.at_path(i))?;
                self.steps.fetch_add(draw.grid.n_steps() as u64, Ordering::Relaxed);
                parts.push(acc.iter().copied().collect());
            }
            Ok(average_pairs(parts))
        })?;
        Estimate::from_samples(&samples)
    }

    fn plain(&self, n: usize, t: f64, x: &DVector<f64>, stream: RngStream) -> Result<Estimate> {
        let m = self.cfg.samples_per_level[n - 1];
        let running = |inner: RngStream, _: usize, r: f64, y: &DVector<f64>| {
            let v = if n == 1 {
                self.zero()
            } else {
                DVector::from_vec(self.plain(n - 1, r, y, inner)?.mean)
            };
            Ok(self.nonlinearity(r, y, &v))
        };
        self.level(t, x, m, stream, true, &running)
    }

    fn multilevel(&self, n: usize, t: f64, x: &DVector<f64>, stream: RngStream) -> Result<Estimate> {
        let d1 = self.spec.dim + 1;
        let mut mean = vec![0.0; d1];
        let mut var = vec![0.0; d1];
        let mut n_samples = 0;
        for l in 0..n {
            let m = self.cfg.samples_per_level[n - l - 1];
            let level_stream = if l == 0 {
                stream
            } else {
                stream.child(LEVEL_KEY_BASE + l as u64)
            };
            let running = |inner: RngStream, _: usize, r: f64, y: &DVector<f64>| {
                if l == 0 {
                    return Ok(self.nonlinearity(r, y, &self.zero()));
                }
                let upper = DVector::from_vec(self.multilevel(l, r, y, inner.child(0))?.mean);
                let lower = if l == 1 {
                    self.zero()
                } else {
                    DVector::from_vec(self.multilevel(l - 1, r, y, inner.child(1))?.mean)
                };
                Ok(self.nonlinearity(r, y, &upper) - self.nonlinearity(r, y, &lower))
            };
            let est = self.level(t, x, m, level_stream, l == 0, &running)?;
            for j in 0..d1 {
                mean[j] += est.mean[j];
                var[j] += est.stderr[j] * est.stderr[j];
            }
            n_samples += m;
        }
        Ok(Estimate {
            mean,
            stderr: var.into_iter().map(f64::sqrt).collect(),
            n_samples,
        })
    }
}

fn run(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    cfg: &PicardConfig,
    scheme: Scheme,
    stream: RngStream,
) -> Result<ValueGradient> {
    cfg.validate()?;
    check_phi_args(spec, t, x, cfg.grid_steps, cfg.quadrature)?;
    let predicted = cfg.predicted_steps();
    if let Some(budget) = cfg.budget {
        if predicted > budget {
            return Err(Error::Budget { predicted, budget });
        }
    }
    let solver = Solver {
        spec,
        cfg,
        steps: AtomicU64::new(0),
    };
    let est = match scheme {
        Scheme::Plain => solver.plain(cfg.depth, t, x, stream)?,
        Scheme::Multilevel => solver.multilevel(cfg.depth, t, x, stream)?,
    };
    Ok(ValueGradient {
        t,
        x: x.clone(),
        vg: DVector::from_vec(est.mean),
        stderr: DVector::from_vec(est.stderr),
        n_samples: est.n_samples,
        euler_steps: solver.steps.into_inner(),
    })
}

/// Plain nested Picard iterate `V_n(t, x)` with `n = cfg.depth`; `cfg.scheme` is ignored.
pub fn picard_evaluate(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    cfg: &PicardConfig,
    stream: RngStream,
) -> Result<ValueGradient> {
    let cfg = PicardConfig {
        scheme: Scheme::Plain,
        ..cfg.clone()
    };
    run(spec, t, x, &cfg, Scheme::Plain, stream)
}

/// Multilevel Picard iterate; `cfg.scheme` is ignored.
pub fn mlp_evaluate(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    cfg: &PicardConfig,
    stream: RngStream,
) -> Result<ValueGradient> {
    let cfg = PicardConfig {
        scheme: Scheme::Multilevel,
        ..cfg.clone()
    };
    run(spec, t, x, &cfg, Scheme::Multilevel, stream)
}

/// Dispatch on `cfg.scheme`.
pub fn solve(
    spec: &ProblemSpec,
    t: f64,
    x: &DVector<f64>,
    cfg: &PicardConfig,
    stream: RngStream,
) -> Result<ValueGradient> {
    match cfg.scheme {
        Scheme::Plain => picard_evaluate(spec, t, x, cfg, stream),
        Scheme::Multilevel => mlp_evaluate(spec, t, x, cfg, stream),
    }
}

/// `Phi(candidate)(t, x) - candidate(t, x)` at each probe.
///
/// A probe passes when the residual norm is at most `tolerance` plus three
/// times the norm of its standard errors. Probe `j` uses `stream.child(j)`.
pub fn fixed_point_residual(
    spec: &ProblemSpec,
    candidate: Candidate<'_>,
    probes: &[(f64, DVector<f64>)],
    mc: McConfig,
    quadrature: Quadrature,
    tolerance: f64,
    stream: RngStream,
) -> Result<ResidualReport> {
    let d = spec.dim;
    let g = |y: &DVector<f64>| spec.eval_g(y);
    let running = |r: f64, y: &DVector<f64>| {
        let v = candidate(r, y);
        (spec.f)(r, y, v[0], &v.rows(1, d).into_owned())
    };
    let mut components = Vec::with_capacity(probes.len());
    let mut stderrs = Vec::with_capacity(probes.len());
    for (j, (t, x)) in probes.iter().enumerate() {
        let est = estimate_value_gradient(spec, *t, x, &g, &running, mc, quadrature, stream.child(j as u64))?;
        let target = candidate(*t, x);
        if target.len() != d + 1 {
            return Err(Error::Usage(format!(
                "candidate returned {} entries, expected {}",
                target.len(),
                d + 1
            )));
        }
        components.push(DVector::from_vec(est.mean) - target);
        stderrs.push(DVector::from_vec(est.stderr));
    }
    Ok(ResidualReport::new(
        probes.to_vec(),
        components,
        stderrs,
        vec![1.0; probes.len()],
        tolerance,
    ))
}
