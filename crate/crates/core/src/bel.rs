//! Bismut-Elworthy-Li weights `Z_{t,s} = (1, (s-t)^-1 int_t^s (sigma^-1 Y)^T dW)`
//! and Monte-Carlo diagnostics of their second moment.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::rng::RngStream;
use crate::sde::{sample_brownian, simulate_weighted, DiffusionSolver, SdePath, TimeGrid, VariationPath};
use crate::stats::{collect_samples, Estimate};

/// Weights over horizons shorter than this fraction of `T` are refused.
pub const MIN_HORIZON_FRACTION: f64 = 1e-6;

/// The `(d + 1)`-vector weight for the horizon `(t, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BelWeight {
    pub value: DVector<f64>,
    pub t: f64,
    pub s: f64,
}

impl BelWeight {
    /// The gradient part `value[1..]`.
    pub fn gradient_part(&self) -> DVector<f64> {
        self.value.rows(1, self.value.len() - 1).into_owned()
    }
}

pub(crate) fn check_horizon(spec: &ProblemSpec, span: f64) -> Result<()> {
    let min = MIN_HORIZON_FRACTION * spec.horizon;
    if !(span >= min) {
        return Err(Error::SingularHorizon { span, min });
    }
    Ok(())
}

/// Assemble `(1, I_k / span)` from a raw Ito sum.
pub(crate) fn weight_from_integral(integral: &DVector<f64>, span: f64) -> DVector<f64> {
    let d = integral.len();
    let mut z = DVector::zeros(d + 1);
    z[0] = 1.0;
    z.rows_mut(1, d).copy_from(&(integral / span));
    z
}

/// Weight at grid node `s_index` of a simulated path and its first variation.
pub fn bel_weight(spec: &ProblemSpec, path: &SdePath, variation: &VariationPath, s_index: usize) -> Result<BelWeight> {
    if s_index == 0 {
        return Err(Error::SingularHorizon {
            span: 0.0,
            min: MIN_HORIZON_FRACTION * spec.horizon,
        });
    }
    if s_index >= path.states.len() || variation.matrices.len() != path.states.len() {
        return Err(Error::Usage("weight index out of range or mismatched variation".into()));
    }
    let times = path.grid.times();
    let (t, s) = (times[0], times[s_index]);
    check_horizon(spec, s - t)?;
    let mut acc = DVector::zeros(spec.dim);
    for (k, &tk) in times.iter().enumerate().take(s_index) {
        let sigma = spec.coeffs.sigma(tk, &path.states[k]);
        DiffusionSolver::new(&sigma, tk)?.accumulate(&variation.matrices[k], &path.increments[k], &mut acc);
    }
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Internal("non-finite weight".into()));
    }
    Ok(BelWeight {
        value: weight_from_integral(&acc, s - t),
        t,
        s,
    })
}

/// Monte-Carlo summary of `E[Z]` and `E|Z[1..]|^2` against the moment bound.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub t: f64,
    pub s: f64,
    pub n_paths: usize,
    /// Per-component mean of `Z[1..]` with standard errors.
    pub mean: Estimate,
    /// Euclidean norm of the mean of `Z[1..]`.
    pub mean_norm: f64,
    pub second_moment: f64,
    pub second_moment_stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `d / (alpha (s-t)^2) int_t^s exp(2 c (r - t)) dr`.
pub fn weight_moment_bound(dim: usize, alpha: f64, c: f64, span: f64) -> f64 {
    let integral = if c == 0.0 {
        span
    } else {
        (2.0 * c * span).exp_m1() / (2.0 * c)
    };
    dim as f64 / (alpha * span * span) * integral
}

/// Estimate the first two moments of `Z_{t,s}` from `x` over `n_paths` paths.
pub fn weight_moment_report(
    spec: &ProblemSpec,
    t: f64,
    s: f64,
    x: &DVector<f64>,
    n_paths: usize,
    n_steps: usize,
    stream: RngStream,
) -> Result<MomentReport> {
    if !(s > t) {
        return Err(Error::Usage(format!("need s > t, got t = {t}, s = {s}")));
    }
    if n_paths < 2 {
        return Err(Error::Usage("moment report needs at least two paths".into()));
    }
    check_horizon(spec, s - t)?;
    let grid = TimeGrid::uniform(t, s, n_steps)?;
    let d = spec.dim;
    let samples = collect_samples(n_paths, true, |i| {
        let increments = sample_brownian(&grid, d, &mut stream.child(i as u64).rng());
        let wp = simulate_weighted(spec, x, &grid, &increments, 1.0, true).map_err(|e| e.at_path(i))?;
        let z = &wp.integrals[grid.n_steps()] / (s - t);
        let mut out: Vec<f64> = z.iter().copied().collect();
        out.push(z.norm_squared());
        Ok(out)
    })?;
    let all = Estimate::from_samples(&samples)?;
    let mean = Estimate {
        mean: all.mean[..d].to_vec(),
        stderr: all.stderr[..d].to_vec(),
        n_samples: n_paths,
    };
    let second_moment = all.mean[d];
    let second_moment_stderr = all.stderr[d];
    let bound = weight_moment_bound(d, spec.constants.alpha, spec.constants.c, s - t);
    Ok(MomentReport {
        t,
        s,
        n_paths,
        mean_norm: mean.mean.iter().map(|v| v * v).sum::<f64>().sqrt(),
        mean,
        second_moment,
        second_moment_stderr,
        bound,
        pass: second_moment <= bound + 3.0 * second_moment_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::sde::{simulate_first_variation, simulate_path};
    use nalgebra::DMatrix;

    #[test]
    fn brownian_weight_is_scaled_increment() {
        let spec = presets::brownian(2).unwrap();
        let g = TimeGrid::uniform(0.0, 0.5, 10).unwrap();
        let p = simulate_path(&spec, &DVector::zeros(2), &g, RngStream::new(3)).unwrap();
        let y = simulate_first_variation(&spec, &p).unwrap();
        for s_index in [1, 4, 10] {
            let w = bel_weight(&spec, &p, &y, s_index).unwrap();
            assert_eq!(w.value[0], 1.0);
            let span = g.times()[s_index];
            let expected = (&p.states[s_index] - &p.states[0]) / span;
            assert!((w.gradient_part() - expected).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_horizon_refused() {
        let spec = presets::brownian(1).unwrap();
        let g = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        let p = simulate_path(&spec, &DVector::zeros(1), &g, RngStream::new(0)).unwrap();
        let y = simulate_first_variation(&spec, &p).unwrap();
        assert!(matches!(
            bel_weight(&spec, &p, &y, 0),
            Err(Error::SingularHorizon { .. })
        ));
        let tiny = TimeGrid::uniform(0.0, 1e-8, 2).unwrap();
        let p = simulate_path(&spec, &DVector::zeros(1), &tiny, RngStream::new(0)).unwrap();
        let y = simulate_first_variation(&spec, &p).unwrap();
        assert!(matches!(
            bel_weight(&spec, &p, &y, 2),
            Err(Error::SingularHorizon { .. })
        ));
    }

    #[test]
    fn scaling_sigma_scales_weight() {
        let base = presets::brownian(2).unwrap();
        let mut scaled = base.clone();
        let kappa = 2.5;
        scaled.coeffs = crate::problem::CoefficientField::new(
            2,
            crate::problem::Drift::Zero,
            crate::problem::Diffusion::Constant(DMatrix::identity(2, 2) * kappa),
        )
        .unwrap();
        let g = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        for i in 0..20 {
            let inc = sample_brownian(&g, 2, &mut RngStream::new(9).child(i).rng());
            let a = simulate_weighted(&base, &DVector::zeros(2), &g, &inc, 1.0, true).unwrap();
            let b = simulate_weighted(&scaled, &DVector::zeros(2), &g, &inc, 1.0, true).unwrap();
            let diff = &a.integrals[8] / kappa - &b.integrals[8];
            assert!(diff.norm() < 1e-14);
        }
    }

    #[test]
    fn moment_bound_closed_form() {
        assert_eq!(weight_moment_bound(3, 1.0, 0.0, 1.0), 3.0);
        assert!((weight_moment_bound(2, 1.0, 0.0, 0.25) - 8.0).abs() < 1e-12);
        assert!(weight_moment_bound(2, 1.0, 1.0, 0.5) > weight_moment_bound(2, 1.0, 0.0, 0.5));
        // small c limit
        let a = weight_moment_bound(1, 2.0, 1e-9, 0.7);
        assert!((a - weight_moment_bound(1, 2.0, 0.0, 0.7)).abs() < 1e-8);
    }

    #[test]
    fn brownian_moments_tight() {
        let spec = presets::brownian(2).unwrap();
        for span in [1.0, 0.25] {
            let r = weight_moment_report(&spec, 0.0, span, &DVector::zeros(2), 20_000, 4, RngStream::new(1)).unwrap();
            assert!(r.pass, "{r:?}");
            assert!((r.second_moment - r.bound).abs() <= 4.0 * r.second_moment_stderr);
            for (m, se) in r.mean.mean.iter().zip(&r.mean.stderr) {
                assert!(m.abs() <= 4.0 * se);
            }
        }
    }

    #[test]
    fn transposed_solve_for_nonsymmetric_sigma() {
        // linear payoff <a, X_T> with mu = 0 and a triangular sigma: E[<a, X_T> Z] = a
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.8, 0.6]);
        let mut spec = presets::brownian(2).unwrap();
        spec.coeffs = crate::problem::CoefficientField::new(
            2,
            crate::problem::Drift::Zero,
            crate::problem::Diffusion::Constant(sigma),
        )
        .unwrap();
        let a = DVector::from_vec(vec![0.7, -1.1]);
        let g = TimeGrid::uniform(0.0, 1.0, 2).unwrap();
        let n = 40_000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let inc = sample_brownian(&g, 2, &mut RngStream::new(4).child(i).rng());
                let wp = simulate_weighted(&spec, &DVector::zeros(2), &g, &inc, 1.0, true).unwrap();
                let payoff = a.dot(&wp.states[2]);
                (wp.integrals[2].clone() * payoff).iter().copied().collect()
            })
            .collect();
        let e = Estimate::from_samples(&samples).unwrap();
        for i in 0..2 {
            assert!((e.mean[i] - a[i]).abs() <= 4.0 * e.stderr[i], "{e:?}");
        }
    }
}
