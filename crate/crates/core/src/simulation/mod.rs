//! Monte Carlo designs, replication runner and the closed-form variance-model oracle.

pub mod dgp;
pub mod neyman_scott;
pub mod study;
pub mod summary;

pub use dgp::{generate, Dgp, DgpKind, DgpSpec};
pub use study::{run_study, run_study_report, SimulationReport, StudyConfig};
pub use summary::{summarize, Summary};
