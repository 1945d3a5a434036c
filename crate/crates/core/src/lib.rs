//! Parameter identification for k-mixtures of Bayesian network distributions
//! over a known DAG.
//!
//! The pipeline conditions the mixture on carefully chosen assignments
//! ([`runs`]), hands each conditioned subproblem to a mixture-of-products
//! solver ([`mixprod`]), stitches the per-run source labelings together and
//! inverts the boundary-conditioned outputs into per-source CPTs
//! ([`recovery`]). [`alphabet`] extends the binary machinery to d-ary
//! variables through a one-hot reduction.

// `!(x > t)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alphabet;
pub mod dag;
pub mod io;
pub mod mixprod;
pub mod model;
pub mod perm;
pub mod recovery;
pub mod run_builder;
pub mod runs;

pub use dag::{vset, Dag, DagError, VertexId, VertexSet};

pub use model::{Assignment, MixtureModel, ModelError, SampleSet};

pub use mixprod::{EmBackend, EmConfig, ExactBackend, MixProdOracle, NoisyBackend, OracleOutput};
pub use recovery::{solve_mixbnd, RecoveredModel, SolveOptions};
pub use run_builder::{build_generic, build_path};
pub use runs::{Run, RunCollection};

/// Derives an independent child seed from `seed` and a stream index.
///
/// SplitMix64 finalizer over the pair, so nearby inputs give unrelated
/// outputs and the mapping never depends on thread scheduling.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}
