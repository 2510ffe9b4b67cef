//! Taste-group collaborative filtering for implicit feedback.
//!
//! The crate learns a hierarchy of binary latent variables over items from
//! binary consumption data, treats each latent's `s1` state as a soft user
//! group ("taste"), characterizes every group by the membership-weighted
//! fraction of its members that consumed each item, and ranks items for a
//! user by combining group preferences with the user's group memberships.
//!
//! Everything in here is pure computation over in-memory data; file IO and
//! the command-line front end live in the companion `tastecf-cli` crate.
//! The crate is `no_std` (with `alloc`), so float math goes through `libm`
//! and results are bit-identical across platforms.
//!
//! Module map:
//!
//! * [`data`]: interaction records, temporal splitting, sparse binary
//!   user-item matrices, recency filtering.
//! * [`ltm`]: the latent tree model: structure, parameters, validation,
//!   joint evaluation, text serialization.
//! * [`inference`]: exact posterior marginals and evidence likelihood via
//!   a two-pass message schedule on the tree.
//! * [`learn`]: structure and parameter learning: mutual-information
//!   islands, per-island latent class models, level stacking, global EM.
//! * [`recommend`]: group preference profiles, membership vectors, item
//!   scoring and top-N ranking.
//! * [`metrics`]: AUC and NDCG@R evaluation plus popularity and user-kNN
//!   baselines.
//! * [`synth`]: planted-taste synthetic data and recovery scoring.
//! * [`rng`]: small deterministic PRNG used everywhere randomness is
//!   needed.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod inference;
pub mod learn;
pub mod ltm;
pub mod metrics;
pub mod recommend;
pub mod rng;
pub mod synth;
pub mod text;

pub(crate) mod math;

pub use data::{FeedbackMatrix, InteractionRecord, RecencyWindow, SplitSpec};
pub use inference::{AbsentPolicy, Evidence};
// pub use learn::LearnConfig;
pub use ltm::{LatentTreeModel, NodeId, State};
pub use recommend::{GroupProfile, MembershipVector, RankedList};
pub use synth::{GroundTruth, SynthConfig};
