//! Counterexample-guided repair of neural networks and other parametric models.

pub mod model;
pub mod qp;
pub mod spec;
pub mod par;
pub mod seeds;
pub mod search;
pub mod removal;
pub mod engine;
pub mod pathology;
pub mod rmi;
