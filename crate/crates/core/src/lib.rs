//! Decentralized (stochastic) gradient descent over gossip topologies:
//! simulation, closed-form fixed points, first-order bias and variance
//! predictions, explicit error bounds and the statistics to compare them.

pub mod dynamics;
pub mod error;
pub mod io;
pub mod matops;
pub mod noise;
pub mod objectives;
pub mod rng;
pub mod stacked;
pub mod stats;
pub mod theory;
pub mod topology;

pub use dynamics::{Algorithm, Coupling, RunConfig, RunRecord};
pub use error::{LabError, Result};
pub use matops::{Matrix, SymSpectrum};
pub use noise::NoiseModel;
pub use objectives::ObjectiveSet;
pub use rng::StreamKey;
pub use stacked::StackedPoint;
pub use stats::StationaryMoments;
pub use theory::TheoryReport;
pub use topology::{CommMatrix, SpectralProfile};
