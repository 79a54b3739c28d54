//! Frame-ensemble symmetrization.
//!
//! Each environment defines a weighted set of local frames, one per ordered
//! pair of non-collinear neighbors. Evaluating a backbone in every frame and
//! rotating the outputs back gives a weighted average that is exactly
//! equivariant and as smooth as the weights.

mod config;
mod ensemble;
mod symmetrize;

pub use config::{AuxParams, CollinearMode, EcseConfig, PoolMode, PruneParams};
pub use ensemble::{
    adaptive_inner_cutoff, aux_weight, build_ensemble, cross_sq, frame_ensemble, pair_weight,
    prune, stitch_unordered_pairs, Ensemble, WeightedFrame,
};
pub use symmetrize::Symmetrized;
