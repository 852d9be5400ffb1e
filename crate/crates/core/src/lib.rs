pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod occupancy;
pub mod scenario;
pub mod sim;
pub mod treatment;

pub use occupancy::Occupancy;
pub use treatment::{enumerate_treatments, Treatment};
