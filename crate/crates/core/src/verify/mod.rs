//! Verification machinery shared by the test suites and the `verify`
//! command: finite-difference gradient checks and independent oracles.

pub mod ctc_oracle;
pub mod gradcheck;
pub mod suite;

pub use ctc_oracle::{collapse, ctc_grid, enumerate_loss, CtcGridReport};
pub use gradcheck::{check_gradients, project, GradCheckOptions, GradCheckReport};
pub use suite::{run_suite, SuiteItem, SuiteReport};
