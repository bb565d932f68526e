//! Fitted Q-iteration for cooperative multi-agent MDPs under linear value
//! factorization (LVF) and individual-global-max (IGM) value classes.
//!
//! The crate models tabular multi-agent MDPs with optional rich
//! observations, decentralized and joint data distributions, the two
//! empirical Bellman operators, the weighted least-squares machinery they
//! rest on, and a harness for running and sweeping FQI experiments.

pub mod data_distribution;
pub mod env_model;
pub mod error;
pub mod harness;
pub mod igm;
pub mod io;
pub mod lstsq;
pub mod lvf;
pub mod verify;

pub use data_distribution::{JointDistribution, ProductPolicy};
pub use env_model::{Environment, JointActionSpace, LatentMmdp, RichObservationLayer};
pub use error::{Error, Result};
pub use harness::{RunConfig, RunLog, Status};
pub use igm::JointQ;
pub use lvf::{FactoredQ, ResidueSpec, TargetTable};
