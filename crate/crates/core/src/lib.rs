//! Multi-scale expert routing over pools of low-rank adapter experts.

pub mod expert;
pub mod harness;
pub mod linalg;
pub mod pool;
pub mod router;
pub mod semantic;
pub mod training;
