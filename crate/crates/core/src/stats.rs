//! Monte-Carlo estimates and order-independent accumulation.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Sample mean of a (possibly vector valued) quantity with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mean: Vec<f64>,
    /// Sample standard deviation divided by `sqrt(n_samples)`. Zero when `n_samples == 1`.
    pub stderr: Vec<f64>,
    pub n_samples: usize,
}

/// Pairwise summation; the tree shape depends only on the length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

impl Estimate {
    /// Build an estimate from per-sample vectors, all of the same length.
    ///
    /// Sums are taken relative to the first sample, so identical samples give
    /// that sample back exactly with zero standard error.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Usage("estimate needs at least one sample".into()));
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Internal("ragged sample vectors".into()));
        }
        let mut mean = Vec::with_capacity(dim);
        let mut stderr = Vec::with_capacity(dim);
        let mut column = vec![0.0; n];
        for c in 0..dim {
            let shift = samples[0][c];
            for (slot, s) in column.iter_mut().zip(samples) {
                *slot = s[c] - shift;
            }
            let dm = pairwise_sum(&column) / n as f64;
            let m = shift + dm;
            let se = if n > 1 {
                for v in column.iter_mut() {
                    let e = *v - dm;
                    *v = e * e;
                }
                (pairwise_sum(&column) / (n as f64 - 1.0) / n as f64).sqrt()
            } else {
                0.0
            };
            if !m.is_finite() || !se.is_finite() {
                return Err(Error::Internal(format!("non-finite estimate in component {c}")));
            }
            mean.push(m);
            stderr.push(se);
        }
        Ok(Self {
            mean,
            stderr,
            n_samples: n,
        })
    }

    pub fn scalar(&self) -> f64 {
        self.mean[0]
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Evaluate `sample(i)` for `i in 0..n` on the rayon pool and return the
/// results in index order. The first failing index (in order) wins, so the
/// reported error does not depend on scheduling.
pub fn collect_samples<F>(n: usize, parallel: bool, sample: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync + Send,
{
    let results: Vec<Result<Vec<f64>>> = if parallel {
        (0..n).into_par_iter().map(&sample).collect()
    } else {
        (0..n).map(&sample).collect()
    };
    results.into_iter().collect()
}
