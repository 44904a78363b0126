//! Desk-scale laboratory for proxy-residual closed-loop reinforcement fine-tuning
//! of trajectory-scoring driving policies.
//!
//! The crate is `no_std` (with `alloc`) and contains only pure computation:
//!
//! * [`geometry`], [`dynamics`] and [`road`]: planar primitives, kinematic bicycle
//!   integration, PID tracking and lane/route deviation measures.
//! * [`world`]: the closed-loop micro-world with reactive traffic, signals,
//!   pedestrians, infraction detection and termination rules.
//! * [`counterfactual`]: batched candidate rollouts from a frozen snapshot with
//!   decaying background agents, returns and group-normalized advantages.
//! * [`rewards`]: dense counterfactual and sparse corrective rewards.
//! * [`policy`]: trajectory vocabulary, features, masked linear-softmax scorer,
//!   behavior-cloned initialization and the EMA teacher.
//! * [`objectives`], [`optim`], [`trainer`]: losses with analytic gradients,
//!   AdamW and the collect / evaluate / update loop with its baselines.
//! * [`eval`]: driving-score style evaluation and distribution snapshots.
//! * [`theory`]: exact checks on small enumerable MDPs.
//! * [`gradcheck`]: finite-difference checks of every objective gradient.
//!
//! File formats, configuration parsing and the command line live in the
//! companion `craftlab` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod counterfactual;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod rewards;
pub mod road;
pub mod theory;
pub mod trainer;
pub mod world;

mod stats;

pub use error::{Error, Result};

/// Seeds a deterministic generator from a base seed and a stream tag.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two integers into a new 64-bit seed (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
