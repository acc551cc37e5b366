//! Greybox fuzzing guided by a multi-task neural network.
//!
//! A shared encoder is trained to predict three coverage signals of an input
//! (edges, approach levels and call-context edges). Input gradients of its
//! last layer rank the input bytes; mutation enumerates the top-ranked bytes
//! and copies comparison operands into place. Seeds for retraining are picked
//! by edge rarity.

pub mod coverage;
pub mod mtnn;
pub mod mutator;
pub mod orchestrator;
pub mod scheduler;
pub mod targets;
