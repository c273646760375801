//! Deobfuscation toolkit for a toy x86-64 subset.
//!
//! Code is lifted block by block into an SSA IR over an explicit machine
//! state record, the control flow graph is recovered while proving opaque
//! predicates, and the result is cleaned up into an argument-based function.

pub mod ir;
pub mod lifter;
pub mod opt;
pub mod machine;
pub mod exec;
pub mod solver;
pub mod explorer;
pub mod recover;
pub mod corpus;
