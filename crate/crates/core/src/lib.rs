//! Tree-structured policy gradient over large discrete item sets.
pub mod agent;
pub mod cluster;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod neural;
pub mod reprs;
pub mod simenv;
pub mod synth;

pub use agent::{Availability, Episode, TpgrModel};
pub use cluster::{ClusterMethod, ClusterTree};
pub use data::{RatingDataset, RatingRange};
pub use error::{ErrorKind, Result, TpgrError};
pub use reprs::{ItemRepresentation, VectorSet};
pub use simenv::{SimConfig, Simulator};
