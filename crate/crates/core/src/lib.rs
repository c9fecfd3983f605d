//! Conversational question answering with history answer embeddings.
//!
//! The pipeline: [`corpus`] loads dialogs, [`history`] picks the previous
//! turns to condition on, [`featurizer`] packs them into fixed-length windows,
//! [`model`] scores answer spans, [`trainer`] fits it, [`inference`] decodes
//! answers and [`metrics`] scores them QuAC-style.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod featurizer;
pub mod history;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
