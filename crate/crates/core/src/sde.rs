//! Euler-Maruyama simulation of the flow `X`, its first variation
//! `Y = dX/dx`, and the inverse variation, all driven by one set of Brownian
//! increments with left-point (Ito) evaluation of the coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::problem::{CoefficientField, ProblemSpec};
use crate::rng::RngStream;

/// Number of steps used when a caller does not choose one.
pub const DEFAULT_STEPS: usize = 200;

/// Condition estimate above which `sigma` is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Strictly increasing time nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Usage("time grid needs at least one step".into()));
        }
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::Usage(format!("bad time interval [{t_start}, {t_end}]")));
        }
        let dt = (t_end - t_start) / n_steps as f64;
        let mut times: Vec<f64> = (0..n_steps).map(|k| t_start + k as f64 * dt).collect();
        times.push(t_end);
        Self::from_times(times)
    }

    /// Uniform on `[t_start, t_mid]` with `n_first` steps, then on `[t_mid, t_end]` with `n_second`.
    pub fn two_piece(t_start: f64, t_mid: f64, t_end: f64, n_first: usize, n_second: usize) -> Result<Self> {
        let mut times = Self::uniform(t_start, t_mid, n_first)?.times;
        let tail = Self::uniform(t_mid, t_end, n_second)?.times;
        times.extend_from_slice(&tail[1..]);
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Usage("time grid needs at least two nodes".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Usage("time nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    fn check_within(&self, horizon: f64) -> Result<()> {
        if self.t_start() < 0.0 || self.t_end() > horizon {
            return Err(Error::Usage(format!(
                "grid [{}, {}] leaves [0, {horizon}]",
                self.t_start(),
                self.t_end()
            )));
        }
        Ok(())
    }
}

/// Independent `N(0, dt_k I)` increments for each step of `grid`.
pub fn sample_brownian<R: Rng + ?Sized>(grid: &TimeGrid, dim: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..grid.n_steps())
        .map(|k| {
            let scale = grid.dt(k).sqrt();
            DVector::from_fn(dim, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        })
        .collect()
}

/// A discretized trajectory with the increments that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
    pub increments: Vec<DVector<f64>>,
}

/// Matrix-valued process on a grid: the first variation or its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationPath {
    pub grid: TimeGrid,
    pub matrices: Vec<DMatrix<f64>>,
}

fn check_finite(x: &DVector<f64>, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Blowup { step, path: 0 })
    }
}

/// Euler-Maruyama path from `x0` using fresh increments from `stream`.
pub fn simulate_path(spec: &ProblemSpec, x0: &DVector<f64>, grid: &TimeGrid, stream: RngStream) -> Result<SdePath> {
    let increments = sample_brownian(grid, spec.dim, &mut stream.rng());
    simulate_path_with_increments(spec, x0, grid, increments)
}

/// Euler-Maruyama path driven by the given increments.
pub fn simulate_path_with_increments(
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    increments: Vec<DVector<f64>>,
) -> Result<SdePath> {
    grid.check_within(spec.horizon)?;
    let d = spec.dim;
    if x0.len() != d {
        return Err(Error::Usage(format!(
            "initial state has length {}, expected {d}",
            x0.len()
        )));
    }
    if increments.len() != grid.n_steps() || increments.iter().any(|w| w.len() != d) {
        return Err(Error::Usage("increments do not match the grid".into()));
    }
    check_finite(x0, 0)?;
    let mut states = Vec::with_capacity(grid.n_steps() + 1);
    states.push(x0.clone());
    let mut bufs = StepBuffers::new(d);
    for (k, dw) in increments.iter().enumerate() {
        let next = euler_step(&spec.coeffs, grid.times()[k], &states[k], grid.dt(k), dw, &mut bufs);
        check_finite(&next, k + 1)?;
        states.push(next);
    }
    Ok(SdePath {
        grid: grid.clone(),
        states,
        increments,
    })
}

pub(crate) struct StepBuffers {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    jac: DMatrix<f64>,
    col_jac: DMatrix<f64>,
    noise: DMatrix<f64>,
    noise_sq: DMatrix<f64>,
    mult: DMatrix<f64>,
    tmp: DMatrix<f64>,
}

impl StepBuffers {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            mu: DVector::zeros(d),
            sigma: DMatrix::zeros(d, d),
            jac: DMatrix::zeros(d, d),
            col_jac: DMatrix::zeros(d, d),
            noise: DMatrix::zeros(d, d),
            noise_sq: DMatrix::zeros(d, d),
            mult: DMatrix::zeros(d, d),
            tmp: DMatrix::zeros(d, d),
        }
    }
}

fn euler_step(
    coeffs: &CoefficientField,
    t: f64,
    x: &DVector<f64>,
    dt: f64,
    dw: &DVector<f64>,
    bufs: &mut StepBuffers,
) -> DVector<f64> {
    coeffs.mu_into(t, x, &mut bufs.mu);
    coeffs.sigma_into(t, x, &mut bufs.sigma);
    let mut next = x.clone();
    next.axpy(dt, &bufs.mu, 1.0);
    next.gemv(1.0, &bufs.sigma, dw, 1.0);
    next
}

/// Fills `bufs.jac` with `d mu/dx` and `bufs.noise` with `sum_l (d sigma_{., l}/dx) dW_l`.
fn load_derivatives(
    coeffs: &CoefficientField,
    t: f64,
    x: &DVector<f64>,
    dw: &DVector<f64>,
    bufs: &mut StepBuffers,
) -> Result<()> {
    coeffs.jac_mu_into(t, x, &mut bufs.jac)?;
    bufs.noise.fill(0.0);
    if !coeffs.has_constant_diffusion() {
        for l in 0..x.len() {
            coeffs.jac_sigma_col_into(t, x, l, &mut bufs.col_jac)?;
            bufs.noise += &bufs.col_jac * dw[l];
        }
    }
    Ok(())
}

/// `Y <- (I + J dt + B) Y`.
fn variation_step(y: &mut DMatrix<f64>, dt: f64, bufs: &mut StepBuffers) {
    bufs.mult.copy_from(&bufs.noise);
    bufs.mult += &bufs.jac * dt;
    bufs.tmp.gemm(1.0, &bufs.mult, y, 0.0);
    *y += &bufs.tmp;
}

/// `Z <- Z [(I + J dt)^-1 - B + B^2]`.
///
/// The drift part is inverted exactly and the noise part is expanded to second
/// order, so `Z_k Y_k = I` holds to rounding whenever `sigma` is
/// state-independent and to `O(dt)` otherwise. In expectation the `B^2` term
/// is the Ito correction `sum_n S_n S_n dt` of the inverse-variation equation.
fn inverse_step(z: &mut DMatrix<f64>, dt: f64, bufs: &mut StepBuffers, t: f64) -> Result<()> {
    let d = z.nrows();
    bufs.mult.copy_from(&bufs.jac);
    bufs.mult.scale_mut(dt);
    for i in 0..d {
        bufs.mult[(i, i)] += 1.0;
    }
    let lu = bufs.mult.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::Ellipticity {
        condition: f64::INFINITY,
        t,
    })?;
    bufs.mult.copy_from(&inv);
    bufs.mult -= &bufs.noise;
    bufs.noise_sq.gemm(1.0, &bufs.noise, &bufs.noise, 0.0);
    bufs.mult += &bufs.noise_sq;
    bufs.tmp.gemm(1.0, z, &bufs.mult, 0.0);
    z.copy_from(&bufs.tmp);
    Ok(())
}

fn check_path(spec: &ProblemSpec, path: &SdePath) -> Result<()> {
    if !spec.coeffs.has_jacobians() {
        return Err(Error::Config("variation needs jacobians of mu and sigma".into()));
    }
    if path.states.len() != path.increments.len() + 1 || path.states[0].len() != spec.dim {
        return Err(Error::Usage("path does not match the problem".into()));
    }
    Ok(())
}

/// First variation `Y = dX/dx` along `path`, with `Y_0 = I`.
pub fn simulate_first_variation(spec: &ProblemSpec, path: &SdePath) -> Result<VariationPath> {
    check_path(spec, path)?;
    let d = spec.dim;
    let mut bufs = StepBuffers::new(d);
    let mut y = DMatrix::identity(d, d);
    let mut matrices = Vec::with_capacity(path.states.len());
    matrices.push(y.clone());
    for (k, dw) in path.increments.iter().enumerate() {
        let t = path.grid.times()[k];
        load_derivatives(&spec.coeffs, t, &path.states[k], dw, &mut bufs)?;
        variation_step(&mut y, path.grid.dt(k), &mut bufs);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup { step: k + 1, path: 0 });
        }
        matrices.push(y.clone());
    }
    Ok(VariationPath {
        grid: path.grid.clone(),
        matrices,
    })
}

/// Inverse variation along `path`, with `Z_0 = I`; approximates `Y^{-1}`.
pub fn simulate_inverse_variation(spec: &ProblemSpec, path: &SdePath) -> Result<VariationPath> {
    check_path(spec, path)?;
    let d = spec.dim;
    let mut bufs = StepBuffers::new(d);
    let mut z = DMatrix::identity(d, d);
    let mut matrices = Vec::with_capacity(path.states.len());
    matrices.push(z.clone());
    for (k, dw) in path.increments.iter().enumerate() {
        let t = path.grid.times()[k];
        load_derivatives(&spec.coeffs, t, &path.states[k], dw, &mut bufs)?;
        inverse_step(&mut z, path.grid.dt(k), &mut bufs, t)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup { step: k + 1, path: 0 });
        }
        matrices.push(z.clone());
    }
    Ok(VariationPath {
        grid: path.grid.clone(),
        matrices,
    })
}

/// `D_t X_s = Y_s Y_t^{-1} sigma(t, X_t)`, with the inverse variation standing in for `Y_t^{-1}`.
pub fn malliavin_derivative(
    spec: &ProblemSpec,
    path: &SdePath,
    variation: &VariationPath,
    inverse: &VariationPath,
    t_index: usize,
    s_index: usize,
) -> Result<DMatrix<f64>> {
    if t_index > s_index {
        return Err(Error::Usage(format!("t index {t_index} after s index {s_index}")));
    }
    if s_index >= path.states.len()
        || variation.matrices.len() != path.states.len()
        || inverse.matrices.len() != path.states.len()
    {
        return Err(Error::Usage("index out of range or mismatched variation paths".into()));
    }
    let t = path.grid.times()[t_index];
    let sigma = spec.coeffs.sigma(t, &path.states[t_index]);
    Ok(&variation.matrices[s_index] * &inverse.matrices[t_index] * sigma)
}

/// LU of `sigma^T` with a pivot-ratio condition estimate.
pub(crate) struct DiffusionSolver {
    lu_transposed: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DiffusionSolver {
    pub(crate) fn new(sigma: &DMatrix<f64>, t: f64) -> Result<Self> {
        let lu = sigma.transpose().lu();
        let u = lu.u();
        let diag = u.diagonal();
        let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Ellipticity { condition, t });
        }
        Ok(Self { lu_transposed: lu })
    }

    /// `(sigma^-1 Y)^T dw`, accumulated into `acc`.
    pub(crate) fn accumulate(&self, y: &DMatrix<f64>, dw: &DVector<f64>, acc: &mut DVector<f64>) {
        // (sigma^-1 Y)^T dw = Y^T (sigma^-T dw)
        let v = self.lu_transposed.solve(dw);
        match v {
            Some(v) => acc.gemv_tr(1.0, y, &v, 1.0),
            None => acc.fill(f64::NAN),
        }
    }
}

/// A path together with the running Ito integrals of the weight process.
pub(crate) struct WeightedPath {
    pub states: Vec<DVector<f64>>,
    /// `integrals[k] = sum_{j<k} (sigma_j^-1 Y_j)^T dW_j`; empty when weights were not requested.
    pub integrals: Vec<DVector<f64>>,
}

/// One pass over the grid computing `X` and, if asked, the weight integrals.
pub(crate) fn simulate_weighted(
    spec: &ProblemSpec,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    increments: &[DVector<f64>],
    sign: f64,
    weights: bool,
) -> Result<WeightedPath> {
    let d = spec.dim;
    let coeffs = &spec.coeffs;
    let n = grid.n_steps();
    let mut bufs = StepBuffers::new(d);
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    let mut integrals = Vec::new();
    let mut y = DMatrix::identity(d, d);
    let mut acc = DVector::zeros(d);
    let constant = match coeffs.diffusion() {
        crate::problem::Diffusion::Constant(m) if weights => Some(DiffusionSolver::new(m, grid.t_start())?),
        _ => None,
    };
    if weights {
        integrals.reserve(n + 1);
        integrals.push(acc.clone());
    }
    let mut dw = DVector::zeros(d);
    for k in 0..n {
        let t = grid.times()[k];
        dw.copy_from(&increments[k]);
        if sign < 0.0 {
            dw.neg_mut();
        }
        let x = &states[k];
        if weights {
            match &constant {
                Some(solver) => solver.accumulate(&y, &dw, &mut acc),
                None => {
                    coeffs.sigma_into(t, x, &mut bufs.sigma);
                    DiffusionSolver::new(&bufs.sigma, t)?.accumulate(&y, &dw, &mut acc);
                }
            }
            load_derivatives(coeffs, t, x, &dw, &mut bufs)?;
            variation_step(&mut y, grid.dt(k), &mut bufs);
            if acc.iter().any(|v| !v.is_finite()) {
                return Err(Error::Blowup { step: k + 1, path: 0 });
            }
            integrals.push(acc.clone());
        }
        let next = euler_step(coeffs, t, x, grid.dt(k), &dw, &mut bufs);
        check_finite(&next, k + 1)?;
        states.push(next);
    }
    Ok(WeightedPath { states, integrals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::problem::{Constants, Diffusion, Drift};
    use std::sync::Arc;

    fn spec_with(d: usize, drift: Drift, diffusion: Diffusion) -> ProblemSpec {
        let coeffs = CoefficientField::new(d, drift, diffusion).unwrap();
        ProblemSpec::new(
            "test",
            1.0,
            coeffs,
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|_| 0.0),
            Constants {
                c: 1.0,
                growth_c: 1.0,
                alpha: 1e-3,
                lipschitz: 1.0,
                growth_p: 1.0,
            },
        )
        .unwrap()
    }

    fn linear(a: DMatrix<f64>) -> Drift {
        let d = a.nrows();
        Drift::Linear {
            matrix: a,
            offset: DVector::zeros(d),
        }
    }

    #[test]
    fn grid_construction() {
        let g = TimeGrid::uniform(0.25, 1.0, 3).unwrap();
        assert_eq!(g.n_steps(), 3);
        assert_eq!(g.t_start(), 0.25);
        assert_eq!(g.t_end(), 1.0);
        assert!(TimeGrid::uniform(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::uniform(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5]).is_err());
        let two = TimeGrid::two_piece(0.0, 0.3, 1.0, 2, 3).unwrap();
        assert_eq!(two.n_steps(), 5);
        assert_eq!(two.times()[2], 0.3);
    }

    #[test]
    fn brownian_increment_moments() {
        let g = TimeGrid::uniform(0.0, 1.0, 1).unwrap();
        let root = RngStream::new(17);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| sample_brownian(&g, 1, &mut root.child(i).rng())[0][0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        // 4 sigma CLT bound on the mean, ~ 4 sqrt(2/n) on the variance
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() <= 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn summed_increments_have_unit_variance() {
        let g = TimeGrid::uniform(0.0, 1.0, 16).unwrap();
        let root = RngStream::new(3);
        let n = 50_000;
        let sums: Vec<f64> = (0..n)
            .map(|i| {
                sample_brownian(&g, 1, &mut root.child(i).rng())
                    .iter()
                    .map(|w| w[0])
                    .sum()
            })
            .collect();
        let var = sums.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() <= 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn increments_are_deterministic() {
        let g = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
        let s = RngStream::new(5).child(9);
        assert_eq!(
            sample_brownian(&g, 3, &mut s.rng()),
            sample_brownian(&g, 3, &mut s.rng())
        );
    }

    #[test]
    fn frozen_dynamics() {
        let spec = spec_with(2, Drift::Zero, Diffusion::Constant(DMatrix::zeros(2, 2)));
        let x0 = DVector::from_vec(vec![0.3, -1.0]);
        let g = TimeGrid::uniform(0.0, 1.0, 7).unwrap();
        let p = simulate_path(&spec, &x0, &g, RngStream::new(1)).unwrap();
        assert!(p.states.iter().all(|s| *s == x0));
    }

    #[test]
    fn constant_drift_is_exact() {
        let spec = spec_with(
            1,
            Drift::Linear {
                matrix: DMatrix::zeros(1, 1),
                offset: DVector::from_element(1, 1.0),
            },
            Diffusion::Constant(DMatrix::zeros(1, 1)),
        );
        for n in [1, 2, 8, 64, 10, 37] {
            let g = TimeGrid::uniform(0.0, 1.0, n).unwrap();
            let p = simulate_path(&spec, &DVector::from_element(1, 0.5), &g, RngStream::new(2)).unwrap();
            assert!((p.states[n][0] - 1.5).abs() <= 1e-14, "n={n}");
            if n.is_power_of_two() {
                assert_eq!(p.states[n][0], 1.5);
            }
        }
    }

    #[test]
    fn brownian_marginal_covariance() {
        let spec = presets::brownian(2).unwrap();
        let g = TimeGrid::uniform(0.2, 0.7, 5).unwrap();
        let root = RngStream::new(8);
        let n = 100_000;
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for i in 0..n {
            let p = simulate_path(&spec, &DVector::zeros(2), &g, root.child(i)).unwrap();
            let e = &p.states[5];
            cov += e * e.transpose();
        }
        cov /= n as f64;
        let tol = 4.0 * 0.5 * (2.0 / n as f64).sqrt();
        assert!((cov[(0, 0)] - 0.5).abs() < tol);
        assert!((cov[(1, 1)] - 0.5).abs() < tol);
        assert!(cov[(0, 1)].abs() < tol);
    }

    #[test]
    fn blowup_is_reported_with_step() {
        let spec = spec_with(
            1,
            Drift::Custom {
                field: Arc::new(|_, x| x.map(|v| v * v * v)),
                jacobian: Some(Arc::new(|_, x| DMatrix::from_element(1, 1, 3.0 * x[0] * x[0]))),
            },
            Diffusion::Constant(DMatrix::zeros(1, 1)),
        );
        let g = TimeGrid::uniform(0.0, 1.0, 50).unwrap();
        let err = simulate_path(&spec, &DVector::from_element(1, 10.0), &g, RngStream::new(0)).unwrap_err();
        assert!(matches!(err, Error::Blowup { step, .. } if step > 0 && step <= 50));
    }

    #[test]
    fn flow_property_concatenation() {
        let spec = presets::gbm_1d().unwrap();
        let x0 = DVector::from_element(1, 1.1);
        let full = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
        let inc = sample_brownian(&full, 1, &mut RngStream::new(4).rng());
        let one = simulate_path_with_increments(&spec, &x0, &full, inc.clone()).unwrap();
        let first = TimeGrid::from_times(full.times()[..=4].to_vec()).unwrap();
        let second = TimeGrid::from_times(full.times()[4..].to_vec()).unwrap();
        let a = simulate_path_with_increments(&spec, &x0, &first, inc[..4].to_vec()).unwrap();
        let b = simulate_path_with_increments(&spec, &a.states[4], &second, inc[4..].to_vec()).unwrap();
        assert_eq!(&one.states[..=4], &a.states[..]);
        assert_eq!(&one.states[4..], &b.states[..]);
    }

    #[test]
    fn variation_is_identity_for_additive_noise_without_drift() {
        let spec = spec_with(3, Drift::Zero, Diffusion::Constant(DMatrix::identity(3, 3) * 0.7));
        let g = TimeGrid::uniform(0.0, 1.0, 20).unwrap();
        let p = simulate_path(&spec, &DVector::zeros(3), &g, RngStream::new(1)).unwrap();
        let y = simulate_first_variation(&spec, &p).unwrap();
        let z = simulate_inverse_variation(&spec, &p).unwrap();
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(y.matrices.iter().all(|m| *m == id));
        assert!(z.matrices.iter().all(|m| *m == id));
    }

    fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        // scaling and squaring with a Taylor series; independent of the scheme
        let s = 10;
        let b = a / 2f64.powi(s);
        let mut term = DMatrix::identity(a.nrows(), a.ncols());
        let mut sum = term.clone();
        for k in 1..20 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn linear_drift_variation_converges_to_matrix_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.3, -0.2, -0.1]);
        let spec = spec_with(2, linear(a.clone()), Diffusion::Constant(DMatrix::identity(2, 2)));
        let (t0, t1) = (0.0, 0.8);
        let exact = expm(&(&a * (t1 - t0)));
        let exact_inv = expm(&(&a * -(t1 - t0)));
        let mut errs = Vec::new();
        let mut inv_errs = Vec::new();
        for n in [50, 100, 200] {
            let g = TimeGrid::uniform(t0, t1, n).unwrap();
            let p = simulate_path(&spec, &DVector::zeros(2), &g, RngStream::new(3)).unwrap();
            let y = simulate_first_variation(&spec, &p).unwrap();
            let z = simulate_inverse_variation(&spec, &p).unwrap();
            errs.push((&y.matrices[n] - &exact).norm());
            inv_errs.push((&z.matrices[n] - &exact_inv).norm());
        }
        for e in [&errs, &inv_errs] {
            assert!(e[0] < 1e-2);
            // first order: error halves when the step halves
            assert!((e[0] / e[1] - 2.0).abs() < 0.2, "{e:?}");
            assert!((e[1] / e[2] - 2.0).abs() < 0.2, "{e:?}");
        }
    }

    #[test]
    fn gbm_variation_tracks_state_ratio() {
        let spec = presets::gbm_1d().unwrap();
        let x0 = DVector::from_element(1, 1.3);
        let g = TimeGrid::uniform(0.0, 1.0, 100).unwrap();
        let p = simulate_path(&spec, &x0, &g, RngStream::new(12)).unwrap();
        let y = simulate_first_variation(&spec, &p).unwrap();
        for k in 0..=100 {
            let ratio = p.states[k][0] / x0[0];
            assert!((y.matrices[k][(0, 0)] - ratio).abs() <= 1e-12 * ratio.abs().max(1.0));
        }
    }

    #[test]
    fn inverse_times_variation_is_identity_for_constant_sigma() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.4, 0.0, 0.1, -0.3, 0.2, 0.0, -0.6, -0.8]);
        let spec = spec_with(3, linear(a), Diffusion::Constant(DMatrix::identity(3, 3)));
        for n in [3, 40, 400] {
            let g = TimeGrid::uniform(0.0, 1.0, n).unwrap();
            let p = simulate_path(&spec, &DVector::from_element(3, 0.2), &g, RngStream::new(6)).unwrap();
            let y = simulate_first_variation(&spec, &p).unwrap();
            let z = simulate_inverse_variation(&spec, &p).unwrap();
            let id = DMatrix::<f64>::identity(3, 3);
            for k in 0..=n {
                assert!((&z.matrices[k] * &y.matrices[k] - &id).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn malliavin_derivative_cases() {
        let spec = presets::gbm_1d().unwrap();
        let x0 = DVector::from_element(1, 0.9);
        let g = TimeGrid::uniform(0.0, 1.0, 50).unwrap();
        let p = simulate_path(&spec, &x0, &g, RngStream::new(1)).unwrap();
        let y = simulate_first_variation(&spec, &p).unwrap();
        let z = simulate_inverse_variation(&spec, &p).unwrap();
        let d00 = malliavin_derivative(&spec, &p, &y, &z, 0, 0).unwrap();
        assert_eq!(d00, spec.coeffs.sigma(0.0, &x0));
        assert!(matches!(
            malliavin_derivative(&spec, &p, &y, &z, 3, 2),
            Err(Error::Usage(_))
        ));

        let bm = presets::brownian(2).unwrap();
        let p = simulate_path(&bm, &DVector::zeros(2), &g, RngStream::new(1)).unwrap();
        let y = simulate_first_variation(&bm, &p).unwrap();
        let z = simulate_inverse_variation(&bm, &p).unwrap();
        for (t, s) in [(0, 0), (3, 10), (49, 50)] {
            assert_eq!(
                malliavin_derivative(&bm, &p, &y, &z, t, s).unwrap(),
                DMatrix::identity(2, 2)
            );
        }
    }

    #[test]
    fn weighted_path_matches_standalone_pieces() {
        let spec = presets::gbm_1d().unwrap();
        let x0 = DVector::from_element(1, 1.2);
        let g = TimeGrid::uniform(0.0, 1.0, 25).unwrap();
        let p = simulate_path(&spec, &x0, &g, RngStream::new(77)).unwrap();
        let y = simulate_first_variation(&spec, &p).unwrap();
        let w = simulate_weighted(&spec, &x0, &g, &p.increments, 1.0, true).unwrap();
        assert_eq!(w.states, p.states);
        let mut acc = 0.0;
        for k in 0..25 {
            let sigma = spec.coeffs.sigma(g.times()[k], &p.states[k])[(0, 0)];
            acc += y.matrices[k][(0, 0)] / sigma * p.increments[k][0];
            assert!((w.integrals[k + 1][0] - acc).abs() <= 1e-12 * (1.0 + acc.abs()));
        }
    }

    #[test]
    fn singular_diffusion_is_refused() {
        let spec = spec_with(
            2,
            Drift::Zero,
            Diffusion::Constant(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))),
        );
        let g = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        let inc = sample_brownian(&g, 2, &mut RngStream::new(0).rng());
        let r = simulate_weighted(&spec, &DVector::zeros(2), &g, &inc, 1.0, true);
        assert!(matches!(r, Err(Error::Ellipticity { .. })));
    }
}
