//! Literature-mining pipeline for systematic reviews.
//!
//! The crate covers the six review tasks (search query generation, study
//! eligibility assessment and four structured extraction tasks), the
//! instruction-corpus builder that produces training data for them, the
//! evaluation harness, and the workbench service used for human review
//! with AI assistance.

pub mod eval;
pub mod extraction;
pub mod gateway;
pub mod instruct;
pub mod pipeline;
pub mod query;
pub mod registry;
pub mod screening;
pub mod text;
pub mod workbench;
