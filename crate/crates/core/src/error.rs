use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("operating point invalid: {0}")]
    OperatingPoint(String),

    #[error("transfer function evaluated too close to a pole at s = {s}")]
    NearPole { s: num_complex::Complex64 },

    #[error("spectral discretization did not converge (last move {delta:.3e} at {nodes} nodes)")]
    Unconverged { delta: f64, nodes: usize },

    #[error("system is not stable at zero delay (spectral abscissa {abscissa:.6})")]
    UnstableAtZeroDelay { abscissa: f64 },

    #[error("simulation diverged at t = {t:.6} s")]
    Diverged { t: f64 },

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("malformed document: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
