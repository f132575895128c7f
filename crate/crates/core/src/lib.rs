//! Compiler and block-parallel runtime for probabilistic circuits.
//!
//! A [`graph::CircuitGraph`] is validated and compiled into a
//! [`compiler::CompiledCircuit`], which a [`runtime::Engine`] evaluates on
//! batches in log space and differentiates to obtain parameter flows for EM.

pub mod bench;
pub mod compiler;
pub mod data;
pub mod error;
pub mod graph;
pub mod oracle;
pub mod par;
pub mod runtime;
pub mod structures;
pub mod train;

pub use compiler::{compile, CompileConfig, CompiledCircuit};
pub use error::{Error, Result};
pub use graph::{CircuitGraph, Node, NodeId, VarId};
pub use runtime::{Batch, Engine};
