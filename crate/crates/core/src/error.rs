use thiserror::Error;

/// Errors surfaced by the solver and its verification routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation blow-up at step {step} (path {path}): non-finite state")]
    Blowup { step: usize, path: usize },

    #[error("weight horizon too short: s - t = {span:e} (minimum {min:e})")]
    SingularHorizon { span: f64, min: f64 },

    #[error("ellipticity violated: diffusion matrix condition estimate {condition:e} at t = {t}")]
    Ellipticity { condition: f64, t: f64 },

    #[error("at terminal time: the gradient is undefined at t = T, use the terminal accessor")]
    Terminal,

    #[error("cost guard: predicted {predicted} path steps exceeds budget {budget}")]
    Budget { predicted: u128, budget: u128 },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Attach the index of the path that failed to a blow-up error.
    pub fn at_path(self, path: usize) -> Self {
        match self {
            Error::Blowup { step, .. } => Error::Blowup { step, path },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
