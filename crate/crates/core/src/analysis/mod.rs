//! Verification and experiment routines built on the solver and oracles.

pub mod chain;
pub mod lemmas;
pub mod psgd;
pub mod rate;
pub mod suites;
pub mod surrogate;

pub use suites::{contract_suite, verify_lemmas, LemmaSuiteConfig, SuiteOutcome};
