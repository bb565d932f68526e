use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error(
        "distribution is not factorized at context {context} (joint action {joint_action}, \
         deviation {deviation:.3e}); the closed-form projection needs decentralized data, \
         use the numeric solver (lvf-numeric) instead"
    )]
    NotFactorized {
        context: usize,
        joint_action: usize,
        deviation: f64,
    },

    #[error(
        "joint action {joint_action} has zero mass at context {context}; the closed-form \
         projection needs an exploratory (strictly positive) data distribution"
    )]
    ZeroMass { context: usize, joint_action: usize },

    #[error(
        "joint action {joint_action} has no support at context {context}; the IGM operator \
         needs an exploratory data distribution with full support"
    )]
    MissingSupport { context: usize, joint_action: usize },

    #[error(
        "optimal policy is not unique at state {state} (gap {gap:.3e}); the stability check \
         needs a unique optimal policy"
    )]
    NonUniqueOptimalPolicy { state: usize, gap: f64 },

    #[error("{what} has {size} rows, above the cap of {cap}")]
    CapExceeded {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("incompatible shapes: {0}")]
    Shape(String),

    #[error("least-squares instance has no positive weight")]
    NoPositiveWeight,

    #[error("value table became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
