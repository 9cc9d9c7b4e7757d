//! Seeded RNG streams.
//!
//! Every run owns one master seed. Consumers (spawning, comms failure, per-robot
//! planning) draw from independent ChaCha streams derived from it, so enabling or
//! disabling one consumer never perturbs the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream id for spawn-side/goal assignment draws.
pub const STREAM_SPAWN: u64 = 1;
/// Stream id for per-timestep comms failure draws.
pub const STREAM_COMMS: u64 = 2;
/// Base stream id for planner RNGs; per-robot planner seeds come from
/// [`derive_robot_seed`].
pub const STREAM_PLANNER_BASE: u64 = 1000;

/// A ChaCha generator bound to (seed, stream).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 step; used to derive per-run seeds in sweeps.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-run seed for a sweep cell (gamma index, run index).
pub fn derive_run_seed(base_seed: u64, gamma_index: usize, run_index: usize) -> u64 {
    let a = splitmix64(base_seed ^ 0xa076_1d64_78bd_642f);
    let b = splitmix64(a.wrapping_add(gamma_index as u64));
    splitmix64(b.wrapping_add((run_index as u64) << 20))
}

/// Deterministic per-robot planner seed within a run.
pub fn derive_robot_seed(run_seed: u64, robot_id: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64(STREAM_PLANNER_BASE.wrapping_add(robot_id as u64)))
}
