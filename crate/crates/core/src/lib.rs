//! Budget-aware nonmyopic active search.
//!
//! The crate provides the pieces needed to run and amortize efficient
//! nonmyopic search (ENS):
//!
//! - [`problem`]: search problems, the label oracle and episode state.
//! - [`neighbors`]: exact and inverted-file k-nearest-neighbor indices.
//! - [`knn_model`]: the incremental k-NN posterior with hypothetical updates.
//! - [`policies`]: random, one-step, UCB, explore-then-commit, ENS and the
//!   learned policy.
//! - [`synthgen`]: the synthetic problem generator with GP-sampled labels.
//! - [`featurize`]: the four per-candidate state features.
//! - [`policynet`]: the small feedforward scorer, its training and I/O.
//! - [`dagger`]: dataset aggregation (DAgger) imitation of the ENS expert.
//! - [`harness`]: seeded multi-repeat evaluation, statistics and timing.

mod binio;
pub mod dagger;
pub mod error;
pub mod featurize;
pub mod harness;
pub mod knn_model;
pub mod neighbors;
pub mod policies;
pub mod policynet;
pub mod problem;
pub mod seeding;
pub mod session;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
pub use featurize::{featurize, FeatureMatrix};
pub use knn_model::{ModelParams, PosteriorModel, TopSumCache};
pub use neighbors::{Backend, NeighborIndex};
pub use policies::{EnsBackend, Policy, PolicyKind};
pub use policynet::{PolicyNet, TrainConfig};
pub use problem::{
    new_episode, step, EpisodeState, LabelOracle, PolicyDecision, SearchProblem,
    SimilarityConfig,
};
pub use session::ProblemContext;
pub use synthgen::GenConfig;
