//! Decentralized coordination between one transmission agent and the
//! distribution agents attached to it.

pub mod agents;
pub mod codec;
pub mod condense;
pub mod partition;
pub mod verify;

pub use agents::{
    decentralized_track_step, run_decentralized, AgentSteps, Decentralized, RoundIncrements,
    StepMode,
};
pub use codec::{decode, encode, CoordMessage, Transport};
pub use condense::{accumulate_solve, condense, recover, QuadraticSurrogate};
pub use partition::{partition_network, AgentMap, AgentProblems, Partition, BOUNDARY_DIM};
pub use verify::{
    equivalence_trials, verify_equivalence, verify_equivalence_with, EquivalenceReport,
};
