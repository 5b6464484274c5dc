//! Shared fixtures for the benchmarks.

use sfpe::{DVector, ProblemSpec};

/// A preset by name, panicking on unknown names.
pub fn problem(name: &str) -> ProblemSpec {
    sfpe::presets::preset(name).unwrap_or_else(|e| panic!("preset {name}: {e}"))
}

/// The point `(0.1, -0.2, 0.3, ...)` in dimension `d`.
pub fn point(d: usize) -> DVector<f64> {
    DVector::from_fn(d, |i, _| {
        if i % 2 == 0 {
            0.1 * (i + 1) as f64
        } else {
            -0.1 * (i + 1) as f64
        }
    })
}
