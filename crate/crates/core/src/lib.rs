//! Codified state machines for tracking character state in narrative text.

pub mod checker;
pub mod client;
pub mod engine;
pub mod model;
pub mod pfsm;
pub mod prompts;
pub mod synthbench;
pub mod codifier;
pub mod harness;
